//! Elementwise, reduction and reshaping operations on the tape.

use std::rc::Rc;

use super::{gemm, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

fn same_shape(op: &'static str, a: &Var<'_>, b: &Var<'_>) -> Result<Vec<usize>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
    }
    Ok(sa)
}

fn tensor_like(shape: &[usize], data: Vec<Real>) -> Rc<Tensor> {
    Rc::new(Tensor::new(shape, data).expect("shape preserved"))
}

pub fn add<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let shape = same_shape("add", &a, &b)?;
    let (va, vb) = (a.value(), b.value());
    let out: Vec<Real> = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
    Ok(a.tape().record(tensor_like(&shape, out), &[a, b], |g, _| {
        vec![Some(g.to_vec()), Some(g.to_vec())]
    }))
}

pub fn sub<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let shape = same_shape("sub", &a, &b)?;
    let (va, vb) = (a.value(), b.value());
    let out: Vec<Real> = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
    Ok(a.tape().record(tensor_like(&shape, out), &[a, b], |g, _| {
        vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]
    }))
}

pub fn mul<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let shape = same_shape("mul", &a, &b)?;
    let (va, vb) = (a.value(), b.value());
    let out: Vec<Real> = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
    Ok(a.tape().record(tensor_like(&shape, out), &[a, b], move |g, need| {
        let ga = need[0].then(|| g.iter().zip(vb.data()).map(|(g, y)| g * y).collect());
        let gb = need[1].then(|| g.iter().zip(va.data()).map(|(g, x)| g * x).collect());
        vec![ga, gb]
    }))
}

pub fn scale(a: Var<'_>, s: Real) -> Var<'_> {
    let va = a.value();
    let out = va.data().iter().map(|x| x * s).collect();
    a.tape().record(tensor_like(va.shape(), out), &[a], move |g, _| {
        vec![Some(g.iter().map(|v| v * s).collect())]
    })
}

/// Sum of a list of equally shaped variables.
pub fn add_n<'t>(items: &[Var<'t>]) -> Result<Var<'t>> {
    let (first, rest) = items
        .split_first()
        .ok_or_else(|| Error::shape("add_n", "empty list"))?;
    rest.iter().try_fold(*first, |acc, v| add(acc, *v))
}

/// Sum of all elements, shape `[1]`.
pub fn sum(a: Var<'_>) -> Var<'_> {
    let va = a.value();
    let n = va.numel();
    let s: Real = va.data().iter().sum();
    a.tape().record(Rc::new(Tensor::scalar(s)), &[a], move |g, _| vec![Some(vec![g[0]; n])])
}

/// Mean of all elements, shape `[1]`.
pub fn mean(a: Var<'_>) -> Var<'_> {
    let n = a.value().numel();
    scale(sum(a), 1.0 / n as Real)
}

/// Mean squared error between equally shaped variables.
pub fn mse<'t>(pred: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    let d = sub(pred, target)?;
    Ok(mean(mul(d, d)?))
}

fn unary<'t>(
    a: Var<'t>,
    f: impl Fn(Real) -> Real,
    df: impl Fn(Real, Real) -> Real + 'static,
) -> Var<'t> {
    let va = a.value();
    let out: Vec<Real> = va.data().iter().map(|&x| f(x)).collect();
    let out = tensor_like(va.shape(), out);
    let saved = out.clone();
    a.tape().record(out, &[a], move |g, _| {
        let gi = g
            .iter()
            .zip(va.data())
            .zip(saved.data())
            .map(|((g, &x), &y)| g * df(x, y))
            .collect();
        vec![Some(gi)]
    })
}

pub fn leaky_relu(a: Var<'_>, slope: Real) -> Var<'_> {
    unary(
        a,
        move |x| if x > 0.0 { x } else { slope * x },
        move |x, _| if x > 0.0 { 1.0 } else { slope },
    )
}

pub fn sigmoid_scalar(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus_scalar(x: Real) -> Real {
    if x > 20.0 {
        x
    } else if x < -20.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// `x·σ(x)`.
pub fn silu(a: Var<'_>) -> Var<'_> {
    unary(
        a,
        |x| x * sigmoid_scalar(x),
        |x, _| {
            let s = sigmoid_scalar(x);
            s * (1.0 + x * (1.0 - s))
        },
    )
}

/// `ln(1 + eˣ)`, always positive.
pub fn softplus(a: Var<'_>) -> Var<'_> {
    unary(a, softplus_scalar, |x, _| sigmoid_scalar(x))
}

pub fn exp(a: Var<'_>) -> Var<'_> {
    unary(a, Real::exp, |_, y| y)
}

/// Softmax over axis 1 of a `[B, K, ...]` variable.
pub fn softmax_channels(a: Var<'_>) -> Result<Var<'_>> {
    let va = a.value();
    let shape = va.shape().to_vec();
    if shape.len() < 2 {
        return Err(Error::shape("softmax_channels", format!("rank of {shape:?} < 2")));
    }
    let out = softmax_channels_raw(&va);
    let out = Rc::new(out);
    let saved = out.clone();
    Ok(a.tape().record(out, &[a], move |g, _| {
        let (b, k) = (shape[0], shape[1]);
        let p: usize = shape[2..].iter().product();
        let y = saved.data();
        let mut gi = vec![0.0; g.len()];
        for bi in 0..b {
            let base = bi * k * p;
            for v in 0..p {
                let dot: Real = (0..k).map(|c| g[base + c * p + v] * y[base + c * p + v]).sum();
                for c in 0..k {
                    let i = base + c * p + v;
                    gi[i] = y[i] * (g[i] - dot);
                }
            }
        }
        vec![Some(gi)]
    }))
}

/// Softmax over axis 1 without recording.
pub fn softmax_channels_raw(t: &Tensor) -> Tensor {
    let shape = t.shape();
    let (b, k) = (shape[0], shape[1]);
    let p: usize = shape[2..].iter().product();
    let x = t.data();
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        let base = bi * k * p;
        for v in 0..p {
            let m = (0..k).map(|c| x[base + c * p + v]).fold(Real::NEG_INFINITY, Real::max);
            let mut z = 0.0;
            for c in 0..k {
                let e = (x[base + c * p + v] - m).exp();
                out[base + c * p + v] = e;
                z += e;
            }
            for c in 0..k {
                out[base + c * p + v] /= z;
            }
        }
    }
    Tensor::new(shape, out).unwrap()
}

/// Concatenates `[B, Cᵢ, ...]` variables along axis 1.
pub fn concat_channels<'t>(items: &[Var<'t>]) -> Result<Var<'t>> {
    let first = items
        .first()
        .ok_or_else(|| Error::shape("concat_channels", "empty list"))?;
    let s0 = first.shape();
    if s0.len() < 2 {
        return Err(Error::shape("concat_channels", "rank < 2"));
    }
    let b = s0[0];
    let p: usize = s0[2..].iter().product();
    let mut chans = Vec::with_capacity(items.len());
    let values: Vec<Rc<Tensor>> = items.iter().map(|v| v.value()).collect();
    for v in &values {
        let s = v.shape();
        if s.len() != s0.len() || s[0] != b || s[2..] != s0[2..] {
            return Err(Error::shape("concat_channels", format!("{s:?} vs {s0:?}")));
        }
        chans.push(s[1]);
    }
    let ctot: usize = chans.iter().sum();
    let mut out = Vec::with_capacity(b * ctot * p);
    for bi in 0..b {
        for (v, &c) in values.iter().zip(&chans) {
            out.extend_from_slice(&v.data()[bi * c * p..(bi + 1) * c * p]);
        }
    }
    let mut shape = s0.clone();
    shape[1] = ctot;
    Ok(first.tape().record(tensor_like(&shape, out), items, move |g, need| {
        let mut offset = 0;
        let mut grads = Vec::with_capacity(chans.len());
        for (i, &c) in chans.iter().enumerate() {
            if need[i] {
                let mut gi = Vec::with_capacity(b * c * p);
                for bi in 0..b {
                    let start = bi * ctot * p + offset * p;
                    gi.extend_from_slice(&g[start..start + c * p]);
                }
                grads.push(Some(gi));
            } else {
                grads.push(None);
            }
            offset += c;
        }
        grads
    }))
}

/// Scatters the last axis: `out[.., perm[i]] = x[.., i]`.
pub fn permute_last<'t>(a: Var<'t>, perm: Rc<Vec<usize>>) -> Result<Var<'t>> {
    let va = a.value();
    let l = *va.shape().last().unwrap();
    if perm.len() != l {
        return Err(Error::shape(
            "permute_last",
            format!("permutation of length {} for axis of length {l}", perm.len()),
        ));
    }
    let out = scatter_last(va.data(), &perm);
    Ok(a.tape().record(tensor_like(va.shape(), out), &[a], move |g, _| {
        vec![Some(gather_last(g, &perm))]
    }))
}

/// `out[.., perm[i]] = x[.., i]` over rows of length `perm.len()`.
pub fn scatter_last(x: &[Real], perm: &[usize]) -> Vec<Real> {
    let l = perm.len();
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks_exact(l).zip(out.chunks_exact_mut(l)) {
        for (i, &p) in perm.iter().enumerate() {
            dst[p] = src[i];
        }
    }
    out
}

/// `out[.., i] = x[.., perm[i]]`, the inverse of [`scatter_last`].
pub fn gather_last(x: &[Real], perm: &[usize]) -> Vec<Real> {
    let l = perm.len();
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks_exact(l).zip(out.chunks_exact_mut(l)) {
        for (i, &p) in perm.iter().enumerate() {
            dst[i] = src[p];
        }
    }
    out
}

pub fn reshape<'t>(a: Var<'t>, shape: &[usize]) -> Result<Var<'t>> {
    let va = a.value();
    let t = Tensor::new(shape, va.data().to_vec())?;
    Ok(a.tape().record(Rc::new(t), &[a], |g, _| vec![Some(g.to_vec())]))
}

/// Per-position linear map over axis 1: `[B, Cin, P] · Wᵀ + b → [B, Cout, P]`
/// with `W: [Cout, Cin]` and optional `b: [Cout]`. Trailing axes after the
/// channel axis are treated as one flattened position axis.
pub fn channel_linear<'t>(x: Var<'t>, w: Var<'t>, b: Option<Var<'t>>) -> Result<Var<'t>> {
    let vx = x.value();
    let vw = w.value();
    let xs = vx.shape().to_vec();
    let ws = vw.shape().to_vec();
    if xs.len() < 2 || ws.len() != 2 || ws[1] != xs[1] {
        return Err(Error::shape(
            "channel_linear",
            format!("input {xs:?} with weight {ws:?}"),
        ));
    }
    let (bsz, cin, cout) = (xs[0], xs[1], ws[0]);
    let p: usize = xs[2..].iter().product();
    let vb = match b {
        Some(b) => {
            let v = b.value();
            if v.shape() != [cout] {
                return Err(Error::shape("channel_linear", format!("bias {:?}", v.shape())));
            }
            Some(v)
        }
        None => None,
    };
    let mut out = vec![0.0; bsz * cout * p];
    for bi in 0..bsz {
        let o = &mut out[bi * cout * p..(bi + 1) * cout * p];
        if let Some(vb) = &vb {
            for (c, chunk) in o.chunks_exact_mut(p).enumerate() {
                chunk.fill(vb.data()[c]);
            }
        }
        let xi = &vx.data()[bi * cin * p..(bi + 1) * cin * p];
        gemm(cout, cin, p, 1.0, vw.data(), (cin, 1), xi, (p, 1), 1.0, o, (p, 1));
    }
    let mut shape = xs.clone();
    shape[1] = cout;
    let mut parents = vec![x, w];
    parents.extend(b);
    let has_bias = vb.is_some();
    Ok(x.tape().record(tensor_like(&shape, out), &parents, move |g, need| {
        let gx = need[0].then(|| {
            let mut gx = vec![0.0; bsz * cin * p];
            for bi in 0..bsz {
                let gi = &g[bi * cout * p..(bi + 1) * cout * p];
                let o = &mut gx[bi * cin * p..(bi + 1) * cin * p];
                gemm(cin, cout, p, 1.0, vw.data(), (1, cin), gi, (p, 1), 0.0, o, (p, 1));
            }
            gx
        });
        let gw = need[1].then(|| {
            let mut gw = vec![0.0; cout * cin];
            for bi in 0..bsz {
                let gi = &g[bi * cout * p..(bi + 1) * cout * p];
                let xi = &vx.data()[bi * cin * p..(bi + 1) * cin * p];
                gemm(cout, p, cin, 1.0, gi, (p, 1), xi, (1, p), 1.0, &mut gw, (cin, 1));
            }
            gw
        });
        let mut grads = vec![gx, gw];
        if has_bias {
            grads.push(need[2].then(|| {
                let mut gb = vec![0.0; cout];
                for bi in 0..bsz {
                    for (c, chunk) in g[bi * cout * p..(bi + 1) * cout * p].chunks_exact(p).enumerate() {
                        gb[c] += chunk.iter().sum::<Real>();
                    }
                }
                gb
            }));
        }
        grads
    }))
}

/// Convenience: records `t` as a constant on `tape`.
pub fn constant(tape: &Tape, t: Tensor) -> Var<'_> {
    tape.constant(t)
}
