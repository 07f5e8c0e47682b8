//! 3D convolution and transposed convolution via im2col + GEMM.

use std::ops::Range;
use std::rc::Rc;

use super::{gemm, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Kernel extents, stride and zero padding of a 3D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeometry {
    /// Stride-1 convolution that preserves spatial extents (odd kernel).
    pub fn same(k: usize) -> Self {
        assert!(k % 2 == 1, "same padding needs an odd kernel");
        ConvGeometry {
            kernel: [k; 3],
            stride: [1; 3],
            padding: [(k - 1) / 2; 3],
        }
    }

    pub fn strided(k: usize, stride: usize, padding: usize) -> Self {
        ConvGeometry {
            kernel: [k; 3],
            stride: [stride; 3],
            padding: [padding; 3],
        }
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.padding == [0; 3]
    }
}

/// Output extents of a convolution, or an error when the padded input is
/// smaller than the kernel.
pub fn conv_output_dims(input: [usize; 3], g: &ConvGeometry) -> Result<[usize; 3]> {
    let mut out = [0; 3];
    for a in 0..3 {
        let padded = input[a] + 2 * g.padding[a];
        if g.stride[a] == 0 || padded < g.kernel[a] {
            return Err(Error::shape(
                "conv3d",
                format!(
                    "axis {a}: extent {} (+2×{} padding) smaller than kernel {}",
                    input[a], g.padding[a], g.kernel[a]
                ),
            ));
        }
        out[a] = (padded - g.kernel[a]) / g.stride[a] + 1;
    }
    Ok(out)
}

/// Range of output indices `o` with `0 <= o*s + k - p < n`.
#[inline]
fn valid_range(n_out: usize, n_in: usize, s: usize, k: usize, p: usize) -> (usize, usize) {
    let (k, p) = (k as isize, p as isize);
    let s = s as isize;
    // o*s + k - p >= 0  =>  o >= ceil((p-k)/s)
    let lo = if p - k > 0 { (p - k + s - 1) / s } else { 0 };
    // o*s + k - p <= n_in - 1  =>  o <= (n_in - 1 + p - k) / s
    let top = n_in as isize - 1 + p - k;
    let hi = if top < 0 { 0 } else { (top / s + 1).min(n_out as isize) };
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

/// Number of output rows (flattened `(d, h)` pairs) per im2col chunk, so
/// that a chunk of `r` unfolded rows stays near 1 MiB.
fn chunk_rows(r: usize, out: [usize; 3]) -> usize {
    const BUDGET: usize = 1 << 17;
    (BUDGET / (r * out[2]).max(1)).clamp(1, out[0] * out[1])
}

/// Unfolds output rows `rows` (flattened `(d, h)` indices) of one
/// `[C, D, H, W]` image into `[C·kd·kh·kw, rows.len()·Wo]` columns.
fn im2col(x: &[Real], c: usize, dims: [usize; 3], g: &ConvGeometry, out: [usize; 3], rows: Range<usize>, cols: &mut Vec<Real>) {
    let [d, h, w] = dims;
    let [od, oh, ow] = out;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let n = rows.len() * ow;
    cols.resize(c * g.taps() * n, 0.0);
    let mut row = 0;
    for ch in 0..c {
        let img = &x[ch * d * h * w..(ch + 1) * d * h * w];
        for a in 0..kd {
            let (d_lo, d_hi) = valid_range(od, d, sd, a, pd);
            for b in 0..kh {
                let (h_lo, h_hi) = valid_range(oh, h, sh, b, ph);
                for e in 0..kw {
                    let (w_lo, w_hi) = valid_range(ow, w, sw, e, pw);
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for (j, r) in rows.clone().enumerate() {
                        let (zd, zh) = (r / oh, r % oh);
                        let drow = &mut dst[j * ow..(j + 1) * ow];
                        if zd < d_lo || zd >= d_hi || zh < h_lo || zh >= h_hi {
                            drow.fill(0.0);
                            continue;
                        }
                        drow[..w_lo].fill(0.0);
                        drow[w_hi..].fill(0.0);
                        let id = zd * sd + a - pd;
                        let ih = zh * sh + b - ph;
                        let src = &img[(id * h + ih) * w..(id * h + ih + 1) * w];
                        if sw == 1 {
                            let iw0 = w_lo + e - pw;
                            drow[w_lo..w_hi].copy_from_slice(&src[iw0..iw0 + (w_hi - w_lo)]);
                        } else {
                            for zw in w_lo..w_hi {
                                drow[zw] = src[zw * sw + e - pw];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates the columns of output rows `rows`
/// back into an image.
fn col2im(cols: &[Real], c: usize, dims: [usize; 3], g: &ConvGeometry, out: [usize; 3], rows: Range<usize>, img_out: &mut [Real]) {
    let [d, h, w] = dims;
    let [od, oh, ow] = out;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let n = rows.len() * ow;
    let mut row = 0;
    for ch in 0..c {
        let img = &mut img_out[ch * d * h * w..(ch + 1) * d * h * w];
        for a in 0..kd {
            let (d_lo, d_hi) = valid_range(od, d, sd, a, pd);
            for b in 0..kh {
                let (h_lo, h_hi) = valid_range(oh, h, sh, b, ph);
                for e in 0..kw {
                    let (w_lo, w_hi) = valid_range(ow, w, sw, e, pw);
                    let src = &cols[row * n..(row + 1) * n];
                    for (j, r) in rows.clone().enumerate() {
                        let (zd, zh) = (r / oh, r % oh);
                        if zd < d_lo || zd >= d_hi || zh < h_lo || zh >= h_hi {
                            continue;
                        }
                        let id = zd * sd + a - pd;
                        let ih = zh * sh + b - ph;
                        let dst = &mut img[(id * h + ih) * w..(id * h + ih + 1) * w];
                        let srow = &src[j * ow..(j + 1) * ow];
                        if sw == 1 {
                            let iw0 = w_lo + e - pw;
                            for (o, v) in dst[iw0..iw0 + (w_hi - w_lo)].iter_mut().zip(&srow[w_lo..w_hi]) {
                                *o += v;
                            }
                        } else {
                            for zw in w_lo..w_hi {
                                dst[zw * sw + e - pw] += srow[zw];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Splits `0..od·oh` into chunks of at most `step` rows.
fn row_chunks(out: [usize; 3], step: usize) -> impl Iterator<Item = Range<usize>> {
    let total = out[0] * out[1];
    (0..total).step_by(step).map(move |s| s..(s + step).min(total))
}

fn dims5(op: &'static str, s: &[usize]) -> Result<[usize; 5]> {
    <[usize; 5]>::try_from(s).map_err(|_| Error::shape(op, format!("expected rank-5 tensor, got {s:?}")))
}

fn check_bias(op: &'static str, b: &Option<Rc<Tensor>>, n: usize) -> Result<()> {
    if let Some(b) = b {
        if b.shape() != [n] {
            return Err(Error::shape(op, format!("bias shape {:?}, expected [{n}]", b.shape())));
        }
    }
    Ok(())
}

fn bias_grad(g: &[Real], bsz: usize, c: usize, p: usize) -> Vec<Real> {
    let mut gb = vec![0.0; c];
    for bi in 0..bsz {
        for (ch, chunk) in g[bi * c * p..(bi + 1) * c * p].chunks_exact(p).enumerate() {
            gb[ch] += chunk.iter().sum::<Real>();
        }
    }
    gb
}

/// Cross-correlation of `x: [B, Cin, D, H, W]` with `w: [Cout, Cin, kd, kh, kw]`.
pub fn conv3d<'t>(x: Var<'t>, w: Var<'t>, b: Option<Var<'t>>, g: ConvGeometry) -> Result<Var<'t>> {
    let vx = x.value();
    let vw = w.value();
    let vb = b.map(|b| b.value());
    let [bsz, cin, d, h, wd] = dims5("conv3d", vx.shape())?;
    let [cout, wcin, kd, kh, kw] = dims5("conv3d", vw.shape())?;
    if wcin != cin {
        return Err(Error::shape(
            "conv3d",
            format!("input has {cin} channels, kernel expects {wcin}"),
        ));
    }
    if [kd, kh, kw] != g.kernel {
        return Err(Error::shape(
            "conv3d",
            format!("kernel {:?} disagrees with geometry {:?}", [kd, kh, kw], g.kernel),
        ));
    }
    check_bias("conv3d", &vb, cout)?;
    let in_dims = [d, h, wd];
    let out_dims = conv_output_dims(in_dims, &g)?;
    let p_in = d * h * wd;
    let p_out: usize = out_dims.iter().product();
    let r = cin * g.taps();

    let mut out = vec![0.0; bsz * cout * p_out];
    let mut cols = Vec::new();
    for bi in 0..bsz {
        let xi = &vx.data()[bi * cin * p_in..(bi + 1) * cin * p_in];
        let o = &mut out[bi * cout * p_out..(bi + 1) * cout * p_out];
        if let Some(vb) = &vb {
            for (c, chunk) in o.chunks_exact_mut(p_out).enumerate() {
                chunk.fill(vb.data()[c]);
            }
        }
        if g.is_pointwise() {
            gemm(cout, r, p_out, 1.0, vw.data(), (r, 1), xi, (p_out, 1), 1.0, o, (p_out, 1));
        } else {
            let ow = out_dims[2];
            for rows in row_chunks(out_dims, chunk_rows(r, out_dims)) {
                im2col(xi, cin, in_dims, &g, out_dims, rows.clone(), &mut cols);
                let n = rows.len() * ow;
                gemm(cout, r, n, 1.0, vw.data(), (r, 1), &cols, (n, 1), 1.0, &mut o[rows.start * ow..], (p_out, 1));
            }
        }
    }
    let shape = [bsz, cout, out_dims[0], out_dims[1], out_dims[2]];
    let value = Rc::new(Tensor::new(&shape, out)?);
    let mut parents = vec![x, w];
    parents.extend(b);
    let has_bias = vb.is_some();
    Ok(x.tape().record(value, &parents, move |gout, need| {
        let mut gx = need[0].then(|| vec![0.0; bsz * cin * p_in]);
        let mut gw = need[1].then(|| vec![0.0; cout * r]);
        let ow = out_dims[2];
        let (mut cols, mut gcols) = (Vec::new(), Vec::new());
        for bi in 0..bsz {
            let xi = &vx.data()[bi * cin * p_in..(bi + 1) * cin * p_in];
            let gi = &gout[bi * cout * p_out..(bi + 1) * cout * p_out];
            if g.is_pointwise() {
                if let Some(gw) = gw.as_mut() {
                    gemm(cout, p_out, r, 1.0, gi, (p_out, 1), xi, (1, p_out), 1.0, gw, (r, 1));
                }
                if let Some(gx) = gx.as_mut() {
                    let gxi = &mut gx[bi * cin * p_in..(bi + 1) * cin * p_in];
                    gemm(r, cout, p_out, 1.0, vw.data(), (1, r), gi, (p_out, 1), 0.0, gxi, (p_out, 1));
                }
                continue;
            }
            for rows in row_chunks(out_dims, chunk_rows(r, out_dims)) {
                let n = rows.len() * ow;
                let gchunk = &gi[rows.start * ow..];
                if let Some(gw) = gw.as_mut() {
                    im2col(xi, cin, in_dims, &g, out_dims, rows.clone(), &mut cols);
                    gemm(cout, n, r, 1.0, gchunk, (p_out, 1), &cols, (1, n), 1.0, gw, (r, 1));
                }
                if let Some(gx) = gx.as_mut() {
                    let gxi = &mut gx[bi * cin * p_in..(bi + 1) * cin * p_in];
                    gcols.resize(r * n, 0.0);
                    gemm(r, cout, n, 1.0, vw.data(), (1, r), gchunk, (p_out, 1), 0.0, &mut gcols, (n, 1));
                    col2im(&gcols, cin, in_dims, &g, out_dims, rows, gxi);
                }
            }
        }
        let mut grads = vec![gx, gw];
        if has_bias {
            grads.push(need[2].then(|| bias_grad(gout, bsz, cout, p_out)));
        }
        grads
    }))
}

/// Transposed convolution (the adjoint of [`conv3d`] in its input), with
/// `x: [B, Cin, D, H, W]` and `w: [Cin, Cout, kd, kh, kw]`. Output extents
/// are `(n − 1)·s − 2p + k` per axis.
pub fn conv_transpose3d<'t>(x: Var<'t>, w: Var<'t>, b: Option<Var<'t>>, g: ConvGeometry) -> Result<Var<'t>> {
    let vx = x.value();
    let vw = w.value();
    let vb = b.map(|b| b.value());
    let [bsz, cin, d, h, wd] = dims5("conv_transpose3d", vx.shape())?;
    let [wcin, cout, kd, kh, kw] = dims5("conv_transpose3d", vw.shape())?;
    if wcin != cin || [kd, kh, kw] != g.kernel {
        return Err(Error::shape(
            "conv_transpose3d",
            format!("input {:?} with kernel {:?}", vx.shape(), vw.shape()),
        ));
    }
    check_bias("conv_transpose3d", &vb, cout)?;
    let small = [d, h, wd];
    let mut big = [0; 3];
    for a in 0..3 {
        let n = (small[a] - 1) * g.stride[a] + g.kernel[a];
        if n <= 2 * g.padding[a] {
            return Err(Error::shape("conv_transpose3d", "padding removes the whole output"));
        }
        big[a] = n - 2 * g.padding[a];
    }
    // The forward conv of the adjoint pair maps `big` onto `small`.
    if conv_output_dims(big, &g)? != small {
        return Err(Error::shape("conv_transpose3d", "geometry is not invertible for this input"));
    }
    let p_small = d * h * wd;
    let p_big: usize = big.iter().product();
    let r = cout * g.taps();

    let mut out = vec![0.0; bsz * cout * p_big];
    let step = chunk_rows(r, small);
    let mut cols = Vec::new();
    for bi in 0..bsz {
        let xi = &vx.data()[bi * cin * p_small..(bi + 1) * cin * p_small];
        let o = &mut out[bi * cout * p_big..(bi + 1) * cout * p_big];
        for rows in row_chunks(small, step) {
            let n = rows.len() * wd;
            cols.resize(r * n, 0.0);
            gemm(r, cin, n, 1.0, vw.data(), (1, r), &xi[rows.start * wd..], (p_small, 1), 0.0, &mut cols, (n, 1));
            col2im(&cols, cout, big, &g, small, rows, o);
        }
        if let Some(vb) = &vb {
            for (c, chunk) in o.chunks_exact_mut(p_big).enumerate() {
                chunk.iter_mut().for_each(|v| *v += vb.data()[c]);
            }
        }
    }
    let shape = [bsz, cout, big[0], big[1], big[2]];
    let value = Rc::new(Tensor::new(&shape, out)?);
    let mut parents = vec![x, w];
    parents.extend(b);
    let has_bias = vb.is_some();
    Ok(x.tape().record(value, &parents, move |gout, need| {
        let mut gx = need[0].then(|| vec![0.0; bsz * cin * p_small]);
        let mut gw = need[1].then(|| vec![0.0; cin * r]);
        let mut gcols = Vec::new();
        for bi in 0..bsz {
            let gi = &gout[bi * cout * p_big..(bi + 1) * cout * p_big];
            let xi = &vx.data()[bi * cin * p_small..(bi + 1) * cin * p_small];
            for rows in row_chunks(small, step) {
                let n = rows.len() * wd;
                let off = rows.start * wd;
                im2col(gi, cout, big, &g, small, rows, &mut gcols);
                if let Some(gx) = gx.as_mut() {
                    let gxi = &mut gx[bi * cin * p_small..(bi + 1) * cin * p_small];
                    gemm(cin, r, n, 1.0, vw.data(), (r, 1), &gcols, (n, 1), 0.0, &mut gxi[off..], (p_small, 1));
                }
                if let Some(gw) = gw.as_mut() {
                    gemm(cin, n, r, 1.0, &xi[off..], (p_small, 1), &gcols, (1, n), 1.0, gw, (r, 1));
                }
            }
        }
        let mut grads = vec![gx, gw];
        if has_bias {
            grads.push(need[2].then(|| bias_grad(gout, bsz, cout, p_big)));
        }
        grads
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, ops::sum, ops::mul, Tape};

    /// Direct nested-loop cross-correlation, independent of im2col/GEMM.
    fn conv_oracle(x: &Tensor, w: &Tensor, b: &[Real], g: &ConvGeometry) -> Tensor {
        let [bsz, cin, d, h, wd] = <[usize; 5]>::try_from(x.shape()).unwrap();
        let cout = w.shape()[0];
        let [od, oh, ow] = conv_output_dims([d, h, wd], g).unwrap();
        let mut out = Tensor::zeros(&[bsz, cout, od, oh, ow]);
        for n in 0..bsz {
            for o in 0..cout {
                for zd in 0..od {
                    for zh in 0..oh {
                        for zw in 0..ow {
                            let mut s = b[o];
                            for c in 0..cin {
                                for a in 0..g.kernel[0] {
                                    for bb in 0..g.kernel[1] {
                                        for e in 0..g.kernel[2] {
                                            let id = (zd * g.stride[0] + a) as isize - g.padding[0] as isize;
                                            let ih = (zh * g.stride[1] + bb) as isize - g.padding[1] as isize;
                                            let iw = (zw * g.stride[2] + e) as isize - g.padding[2] as isize;
                                            if id < 0 || ih < 0 || iw < 0 || id >= d as isize || ih >= h as isize || iw >= wd as isize {
                                                continue;
                                            }
                                            s += w.get(&[o, c, a, bb, e])
                                                * x.get(&[n, c, id as usize, ih as usize, iw as usize]);
                                        }
                                    }
                                }
                            }
                            out.set(&[n, o, zd, zh, zw], s);
                        }
                    }
                }
            }
        }
        out
    }

    fn pseudo(shape: &[usize], seed: Real) -> Tensor {
        Tensor::from_fn(shape, |i| ((i as Real + seed) * 0.6180339887).sin())
    }

    fn run_conv(x: &Tensor, w: &Tensor, b: &[Real], g: ConvGeometry) -> Tensor {
        let tape = Tape::new();
        let bt = Tensor::new(&[b.len()], b.to_vec()).unwrap();
        let y = conv3d(tape.leaf(x), tape.leaf(w), Some(tape.leaf(&bt)), g).unwrap();
        (*y.value()).clone()
    }

    #[test]
    fn scalar_multiply_add() {
        let x = Tensor::full(&[1, 1, 1, 1, 1], 2.0);
        let w = Tensor::full(&[1, 1, 1, 1, 1], 3.0);
        let y = run_conv(&x, &w, &[1.0], ConvGeometry::same(1));
        assert_eq!(y.data(), &[7.0]);
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = pseudo(&[1, 1, 4, 5, 3], 0.3);
        let mut w = Tensor::zeros(&[1, 1, 3, 3, 3]);
        w.set(&[0, 0, 1, 1, 1], 1.0);
        let y = run_conv(&x, &w, &[0.0], ConvGeometry::same(3));
        assert_eq!(y.max_abs_diff(&x), 0.0);
    }

    #[test]
    fn matches_loop_oracle_same_padding() {
        let x = pseudo(&[1, 2, 4, 4, 4], 1.0);
        let w = pseudo(&[3, 2, 3, 3, 3], 7.0);
        let b = [0.1, -0.2, 0.3];
        let g = ConvGeometry::same(3);
        let y = run_conv(&x, &w, &b, g);
        assert!(y.max_abs_diff(&conv_oracle(&x, &w, &b, &g)) < 1e-10);
    }

    #[test]
    fn matches_loop_oracle_on_all_small_shapes() {
        let geoms = [
            ConvGeometry::same(3),
            ConvGeometry::same(1),
            ConvGeometry::strided(3, 2, 1),
            ConvGeometry::strided(2, 2, 0),
        ];
        for bsz in 1..=2 {
            for cin in 1..=3 {
                for &(d, h, w) in &[(2, 3, 5), (5, 5, 5), (3, 4, 2), (4, 4, 4)] {
                    for g in &geoms {
                        if conv_output_dims([d, h, w], g).is_err() {
                            continue;
                        }
                        let x = pseudo(&[bsz, cin, d, h, w], (d * h + w) as Real);
                        let k = g.kernel[0];
                        let wt = pseudo(&[2, cin, k, k, k], cin as Real);
                        let y = run_conv(&x, &wt, &[0.5, -0.5], *g);
                        assert!(y.max_abs_diff(&conv_oracle(&x, &wt, &[0.5, -0.5], g)) < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn shape_errors_are_descriptive() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[1, 2, 4, 4, 4]));
        let w = tape.leaf(&Tensor::zeros(&[1, 3, 3, 3, 3]));
        let e = conv3d(x, w, None, ConvGeometry::same(3)).unwrap_err();
        assert!(e.to_string().contains("channels"), "{e}");
        let tiny = tape.leaf(&Tensor::zeros(&[1, 1, 1, 1, 1]));
        let w = tape.leaf(&Tensor::zeros(&[1, 1, 3, 3, 3]));
        assert!(conv3d(tiny, w, None, ConvGeometry::strided(3, 1, 0)).is_err());
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let x = pseudo(&[2, 2, 4, 3, 5], 2.0);
        let w = pseudo(&[3, 2, 3, 3, 3], 5.0);
        let probe = pseudo(&[2, 3, 2, 2, 3], 9.0);
        let g = ConvGeometry::strided(3, 2, 1);
        let xc = x.clone();
        let pc = probe.clone();
        let err_w = grad_check(
            move |tape, wv| {
                let y = conv3d(tape.constant(xc.clone()), wv, None, g)?;
                Ok(sum(mul(y, tape.constant(pc.clone()))?))
            },
            &w,
            1e-5,
        )
        .unwrap();
        assert!(err_w < 1e-6, "weight grad rel err {err_w}");
        let err_x = grad_check(
            move |tape, xv| {
                let y = conv3d(xv, tape.constant(w.clone()), None, g)?;
                Ok(sum(mul(y, tape.constant(probe.clone()))?))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err_x < 1e-6, "input grad rel err {err_x}");
    }

    #[test]
    fn bias_gradient_is_output_sum() {
        let tape = Tape::new();
        let x = tape.leaf(&pseudo(&[2, 1, 3, 3, 3], 0.0));
        let w = tape.leaf(&pseudo(&[2, 1, 3, 3, 3], 1.0));
        let b = tape.leaf(&Tensor::zeros(&[2]).with_grad());
        let y = sum(conv3d(x, w, Some(b), ConvGeometry::same(3)).unwrap());
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(b).unwrap(), &[54.0, 54.0]);
    }

    #[test]
    fn transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, convT(y)> with the same kernel.
        let g = ConvGeometry::strided(2, 2, 0);
        let x = pseudo(&[1, 3, 4, 6, 2], 0.5);
        let w = pseudo(&[2, 3, 2, 2, 2], 1.5);
        let y = pseudo(&[1, 2, 2, 3, 1], 2.5);
        let tape = Tape::new();
        let cx = conv3d(tape.leaf(&x), tape.leaf(&w), None, g).unwrap().value();
        // The transposed conv takes weights [Cin_t=2, Cout_t=3, ...], i.e. the same array.
        let ty = conv_transpose3d(tape.leaf(&y), tape.leaf(&w), None, g).unwrap().value();
        assert_eq!(ty.shape(), x.shape());
        let lhs: Real = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: Real = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn transpose_gradients_match_finite_differences() {
        let g = ConvGeometry::strided(2, 2, 0);
        let x = pseudo(&[2, 3, 2, 2, 3], 0.25);
        let w = pseudo(&[3, 2, 2, 2, 2], 3.5);
        let b = Tensor::new(&[2], vec![0.2, -0.1]).unwrap();
        let probe = pseudo(&[2, 2, 4, 4, 6], 4.0);
        let (xc, pc, bc) = (x.clone(), probe.clone(), b.clone());
        let err_w = grad_check(
            move |tape, wv| {
                let y = conv_transpose3d(tape.constant(xc.clone()), wv, Some(tape.constant(bc.clone())), g)?;
                Ok(sum(mul(y, tape.constant(pc.clone()))?))
            },
            &w,
            1e-5,
        )
        .unwrap();
        let err_x = grad_check(
            move |tape, xv| {
                let y = conv_transpose3d(xv, tape.constant(w.clone()), Some(tape.constant(b.clone())), g)?;
                Ok(sum(mul(y, tape.constant(probe.clone()))?))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err_w < 1e-6 && err_x < 1e-6, "{err_w} {err_x}");
    }

    #[test]
    fn upsample_of_downsample_preserves_even_shape() {
        let tape = Tape::new();
        for dims in [[4, 4, 4], [2, 6, 8], [8, 2, 4]] {
            let x = tape.leaf(&pseudo(&[1, 2, dims[0], dims[1], dims[2]], 0.0));
            let down = conv3d(x, tape.leaf(&pseudo(&[4, 2, 3, 3, 3], 1.0)), None, ConvGeometry::strided(3, 2, 1)).unwrap();
            let up = conv_transpose3d(down, tape.leaf(&pseudo(&[4, 2, 2, 2, 2], 2.0)), None, ConvGeometry::strided(2, 2, 0)).unwrap();
            assert_eq!(up.shape(), x.shape());
        }
    }
}
