//! Volume flattening orders realised as voxel permutations.
//!
//! A [`ScanOrder`] maps every voxel of a `D×H×W` grid to a position in a 1D
//! sequence. Linear voxel indices are row-major: `(d·H + h)·W + w`.
//! Axis orders are written slowest-to-fastest, so `DHW` walks width first,
//! then height, then depth.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, OnceLock, RwLock};

use crate::error::{Error, Result};
use crate::tensor::{gather_last, scatter_last, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Axis {
    D,
    H,
    W,
}

impl Axis {
    fn index(self) -> usize {
        match self {
            Axis::D => 0,
            Axis::H => 1,
            Axis::W => 2,
        }
    }

    fn letter(self) -> char {
        ['D', 'H', 'W'][self.index()]
    }
}

/// Permutation of the three axes, slowest first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AxisOrder(pub [Axis; 3]);

impl AxisOrder {
    pub const DHW: AxisOrder = AxisOrder([Axis::D, Axis::H, Axis::W]);

    /// The six orders in the order the taxonomy lists them:
    /// DHW, DWH, WDH, WHD, HDW, HWD.
    pub const ALL: [AxisOrder; 6] = [
        AxisOrder([Axis::D, Axis::H, Axis::W]),
        AxisOrder([Axis::D, Axis::W, Axis::H]),
        AxisOrder([Axis::W, Axis::D, Axis::H]),
        AxisOrder([Axis::W, Axis::H, Axis::D]),
        AxisOrder([Axis::H, Axis::D, Axis::W]),
        AxisOrder([Axis::H, Axis::W, Axis::D]),
    ];

    fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|o| o.to_string() == s)
    }
}

impl fmt::Display for AxisOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.iter().try_for_each(|a| write!(f, "{}", a.letter()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScanKind {
    /// Plain nested-loop order over the three axes.
    Axes(AxisOrder),
    /// DHW order with the recurrence restarted at every (H, W) slice.
    TwoD,
    /// Non-overlapping windows of the given extents; voxels within a window
    /// and windows themselves are both visited in DHW order.
    Window([usize; 3]),
    /// 3D serpentine: consecutive positions are always face neighbours.
    Zigzag,
    /// Anti-diagonals of each (H, W) slice with increasing H, slices in D order.
    Inclined,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ScanOrder {
    pub kind: ScanKind,
    pub flipped: bool,
}

/// A realised order for one grid size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Permutation {
    /// Voxel index → sequence position.
    pub to_seq: Vec<usize>,
    /// Sequence position → voxel index.
    pub to_voxel: Vec<usize>,
    /// When set, the sequence is a concatenation of independent segments of
    /// this length and recurrent state must be reset at their boundaries.
    pub segment: Option<usize>,
}

impl Permutation {
    pub fn len(&self) -> usize {
        self.to_seq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.to_seq.is_empty()
    }
}

type CacheKey = (ScanOrder, [usize; 3]);

fn cache() -> &'static RwLock<HashMap<CacheKey, Arc<Permutation>>> {
    static CACHE: OnceLock<RwLock<HashMap<CacheKey, Arc<Permutation>>>> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

impl ScanOrder {
    pub const fn new(kind: ScanKind) -> Self {
        ScanOrder { kind, flipped: false }
    }

    pub const fn axes(order: AxisOrder) -> Self {
        Self::new(ScanKind::Axes(order))
    }

    pub fn dhw() -> Self {
        Self::axes(AxisOrder::DHW)
    }

    /// The same path traversed backwards.
    pub fn flip(self) -> Self {
        ScanOrder {
            kind: self.kind,
            flipped: !self.flipped,
        }
    }

    /// Orders (a)–(p) of the taxonomy: (a)–(l) are the six axis orders each
    /// followed by its flip, then (m) 2D, (n) 3D window (2³), (o) zigzag and
    /// (p) inclined.
    pub fn from_letter(c: char) -> Option<Self> {
        let i = (c as u32).checked_sub('a' as u32)? as usize;
        match i {
            0..=11 => {
                let o = Self::axes(AxisOrder::ALL[i / 2]);
                Some(if i % 2 == 1 { o.flip() } else { o })
            }
            12 => Some(Self::new(ScanKind::TwoD)),
            13 => Some(Self::new(ScanKind::Window([2; 3]))),
            14 => Some(Self::new(ScanKind::Zigzag)),
            15 => Some(Self::new(ScanKind::Inclined)),
            _ => None,
        }
    }

    /// All sixteen base orders (a)–(p).
    pub fn all() -> Vec<ScanOrder> {
        ('a'..='p').map(|c| Self::from_letter(c).unwrap()).collect()
    }

    /// Parses names such as `DHW`, `flip(HWD)`, `2d`, `window:2`,
    /// `window:2x4x4`, `zigzag` or `inclined`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(inner) = s.strip_prefix("flip(").and_then(|r| r.strip_suffix(')')) {
            return Ok(Self::parse(inner)?.flip());
        }
        if let Some(o) = AxisOrder::parse(s) {
            return Ok(Self::axes(o));
        }
        let lower = s.to_ascii_lowercase();
        match lower.as_str() {
            "2d" => return Ok(Self::new(ScanKind::TwoD)),
            "zigzag" => return Ok(Self::new(ScanKind::Zigzag)),
            "inclined" => return Ok(Self::new(ScanKind::Inclined)),
            _ => {}
        }
        if let Some(spec) = lower.strip_prefix("window:") {
            let parts: Vec<usize> = spec
                .split('x')
                .map(|p| p.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::config(format!("bad window extents in {s:?}")))?;
            let ext = match parts.as_slice() {
                [w] => [*w; 3],
                [a, b, c] => [*a, *b, *c],
                _ => return Err(Error::config(format!("bad window extents in {s:?}"))),
            };
            if ext.contains(&0) {
                return Err(Error::config("window extents must be positive"));
            }
            return Ok(Self::new(ScanKind::Window(ext)));
        }
        Err(Error::config(format!("unknown scan order {s:?}")))
    }

    /// Realises the order on a `D×H×W` grid. Results are cached per
    /// `(order, dims)`.
    pub fn realize(&self, dims: [usize; 3]) -> Result<Arc<Permutation>> {
        let key = (*self, dims);
        if let Some(p) = cache().read().unwrap().get(&key) {
            return Ok(p.clone());
        }
        let p = Arc::new(self.build(dims)?);
        cache().write().unwrap().insert(key, p.clone());
        Ok(p)
    }

    fn build(&self, dims: [usize; 3]) -> Result<Permutation> {
        let [d, h, w] = dims;
        if dims.contains(&0) {
            return Err(Error::config(format!("empty grid {dims:?}")));
        }
        let lin = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
        let n = d * h * w;
        let mut path = Vec::with_capacity(n);
        let mut segment = None;
        match self.kind {
            ScanKind::Axes(AxisOrder(axes)) => {
                let ext = axes.map(|a| dims[a.index()]);
                for i in 0..ext[0] {
                    for j in 0..ext[1] {
                        for k in 0..ext[2] {
                            let mut c = [0; 3];
                            c[axes[0].index()] = i;
                            c[axes[1].index()] = j;
                            c[axes[2].index()] = k;
                            path.push(lin(c[0], c[1], c[2]));
                        }
                    }
                }
            }
            ScanKind::TwoD => {
                path.extend(0..n);
                segment = Some(h * w);
            }
            ScanKind::Window(win) => {
                for a in 0..3 {
                    if !dims[a].is_multiple_of(win[a]) {
                        return Err(Error::config(format!(
                            "window {win:?} does not divide volume {dims:?}"
                        )));
                    }
                }
                let [wd, wh, ww] = win;
                for bz in 0..d / wd {
                    for by in 0..h / wh {
                        for bx in 0..w / ww {
                            for z in 0..wd {
                                for y in 0..wh {
                                    for x in 0..ww {
                                        path.push(lin(bz * wd + z, by * wh + y, bx * ww + x));
                                    }
                                }
                            }
                        }
                    }
                }
            }
            ScanKind::Zigzag => {
                let mut row = 0usize;
                for z in 0..d {
                    let ys: Vec<usize> = if z % 2 == 0 { (0..h).collect() } else { (0..h).rev().collect() };
                    for y in ys {
                        if row.is_multiple_of(2) {
                            path.extend((0..w).map(|x| lin(z, y, x)));
                        } else {
                            path.extend((0..w).rev().map(|x| lin(z, y, x)));
                        }
                        row += 1;
                    }
                }
            }
            ScanKind::Inclined => {
                for z in 0..d {
                    for s in 0..h + w - 1 {
                        let lo = s.saturating_sub(w - 1);
                        let hi = s.min(h - 1);
                        for y in lo..=hi {
                            path.push(lin(z, y, s - y));
                        }
                    }
                }
            }
        }
        if self.flipped {
            path.reverse();
        }
        let mut to_seq = vec![usize::MAX; n];
        for (pos, &v) in path.iter().enumerate() {
            to_seq[v] = pos;
        }
        debug_assert!(to_seq.iter().all(|&p| p != usize::MAX));
        Ok(Permutation {
            to_seq,
            to_voxel: path,
            segment,
        })
    }
}

impl fmt::Display for ScanOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let base = match self.kind {
            ScanKind::Axes(o) => o.to_string(),
            ScanKind::TwoD => "2d".into(),
            ScanKind::Window([a, b, c]) if a == b && b == c => format!("window:{a}"),
            ScanKind::Window([a, b, c]) => format!("window:{a}x{b}x{c}"),
            ScanKind::Zigzag => "zigzag".into(),
            ScanKind::Inclined => "inclined".into(),
        };
        if self.flipped {
            write!(f, "flip({base})")
        } else {
            f.write_str(&base)
        }
    }
}

/// An ordered, non-empty list of scan orders whose outputs a MetaSSM block
/// averages.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OrderSet {
    pub name: String,
    pub orders: Vec<ScanOrder>,
}

/// Names of the nine ablation presets.
pub const PRESETS: [&str; 9] = ["B1", "B2", "B3", "B4", "B5", "B6", "B7", "B8", "B9"];

impl OrderSet {
    pub fn new(name: impl Into<String>, orders: Vec<ScanOrder>) -> Result<Self> {
        if orders.is_empty() {
            return Err(Error::config("order set must not be empty"));
        }
        Ok(OrderSet {
            name: name.into(),
            orders,
        })
    }

    /// The B1–B9 configurations of the scan ablation.
    pub fn preset(name: &str) -> Result<Self> {
        let letters = |s: &str| s.chars().map(|c| ScanOrder::from_letter(c).unwrap()).collect::<Vec<_>>();
        let pair = |o: ScanOrder| vec![o, o.flip()];
        let orders = match name {
            "B1" => letters("a"),
            "B2" => letters("ab"),
            "B3" => letters("abk"),
            "B4" => letters("abcdef"),
            "B5" => letters("abcdefghijkl"),
            "B6" => pair(ScanOrder::from_letter('m').unwrap()),
            "B7" => pair(ScanOrder::from_letter('n').unwrap()),
            "B8" => pair(ScanOrder::from_letter('o').unwrap()),
            "B9" => pair(ScanOrder::from_letter('p').unwrap()),
            _ => return Err(Error::config(format!("unknown order-set preset {name:?}"))),
        };
        Self::new(name, orders)
    }

    /// Human-readable description in the ablation table's notation.
    pub fn describe(&self) -> String {
        match self.name.as_str() {
            "B1" => "(a) DHW".into(),
            "B2" => "(a) DHW + (b) flip(DHW)".into(),
            "B3" => "(a) DHW + (b) flip(DHW) + (k) HWD".into(),
            "B4" => "(a)-(f): DHW DWH WDH pairs".into(),
            "B5" => "(a)-(l): all six axis-order pairs".into(),
            "B6" => "(m) 2D scan w/ DHW + flip(DHW)".into(),
            "B7" => "(n) 3D window scan w/ DHW + flip(DHW)".into(),
            "B8" => "(o) zigzag scan w/ DHW + flip(DHW)".into(),
            "B9" => "(p) inclined scan w/ DHW + flip(DHW)".into(),
            _ => self.orders.iter().map(|o| o.to_string()).collect::<Vec<_>>().join(" + "),
        }
    }

    /// Parses a preset name (`B2`) or a comma-separated list of orders.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if PRESETS.contains(&s) {
            return Self::preset(s);
        }
        let orders = s
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(ScanOrder::parse)
            .collect::<Result<Vec<_>>>()?;
        Self::new(s, orders)
    }
}

impl fmt::Display for OrderSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if PRESETS.contains(&self.name.as_str()) {
            return f.write_str(&self.name);
        }
        let names: Vec<String> = self.orders.iter().map(|o| o.to_string()).collect();
        f.write_str(&names.join(","))
    }
}

fn spatial(shape: &[usize]) -> Result<([usize; 3], usize)> {
    let r = shape.len();
    if r < 3 {
        return Err(Error::shape("flatten", format!("rank of {shape:?} < 3")));
    }
    let dims = [shape[r - 3], shape[r - 2], shape[r - 1]];
    Ok((dims, r - 3))
}

/// `[.., D, H, W] → [.., L]` with `out[π(i)] = v[i]`.
pub fn flatten(v: &Tensor, order: &ScanOrder) -> Result<Tensor> {
    let (dims, lead) = spatial(v.shape())?;
    let perm = order.realize(dims)?;
    let mut shape = v.shape()[..lead].to_vec();
    shape.push(perm.len());
    Tensor::new(&shape, scatter_last(v.data(), &perm.to_seq))
}

/// Inverse of [`flatten`].
pub fn unflatten(s: &Tensor, order: &ScanOrder, dims: [usize; 3]) -> Result<Tensor> {
    let perm = order.realize(dims)?;
    let l = *s.shape().last().ok_or_else(|| Error::shape("unflatten", "rank 0"))?;
    if l != perm.len() {
        return Err(Error::shape(
            "unflatten",
            format!("sequence length {l} for grid {dims:?}"),
        ));
    }
    let mut shape = s.shape()[..s.shape().len() - 1].to_vec();
    shape.extend_from_slice(&dims);
    Tensor::new(&shape, gather_last(s.data(), &perm.to_seq))
}

fn coords(v: usize, dims: [usize; 3]) -> [usize; 3] {
    [v / (dims[1] * dims[2]), (v / dims[2]) % dims[1], v % dims[2]]
}

/// True when the two voxels differ by exactly one in exactly one coordinate.
pub fn face_adjacent(a: usize, b: usize, dims: [usize; 3]) -> bool {
    let (ca, cb) = (coords(a, dims), coords(b, dims));
    let diffs: Vec<usize> = (0..3).map(|i| ca[i].abs_diff(cb[i])).collect();
    diffs.iter().sum::<usize>() == 1
}

/// Number of consecutive sequence positions whose voxels are not face
/// neighbours.
pub fn discontinuities(order: &ScanOrder, dims: [usize; 3]) -> Result<usize> {
    let p = order.realize(dims)?;
    Ok(p.to_voxel
        .windows(2)
        .filter(|w| !face_adjacent(w[0], w[1], dims))
        .count())
}
