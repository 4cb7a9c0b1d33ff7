//! Matrix products, softmax, cosine similarity and scaled dot-product attention.

use super::tape::Var;
use super::{NumericsError, Tensor};

/// Norms at or below this are treated as zero vectors.
pub const MIN_NORM: f64 = 1e-12;

/// `c = op(a) · op(b)` for row-major operands, where `op` optionally
/// transposes. `a` is `m×k` after `op`, `b` is `k×n` after `op`.
/// When `accumulate` is set the product is added into `c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize), NumericsError> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(NumericsError::Shape { op, detail: format!("expected rank 2, got {:?}", t.shape()) }),
    }
}

fn softmax_slice(v: &[f64], out: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(v) {
        *o = (x - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

fn softmax_backward(y: &[f64], g: &[f64], out: &mut [f64]) {
    let dot: f64 = y.iter().zip(g).map(|(y, g)| y * g).sum();
    for ((o, &y), &g) in out.iter_mut().zip(y).zip(g) {
        *o = y * (g - dot);
    }
}

impl<'t> Var<'t> {
    /// Product of two rank-2 tensors.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>, NumericsError> {
        let (a, b) = (self.value(), other.value());
        let (m, k) = dims2("matmul", &a)?;
        let (k2, n) = dims2("matmul", &b)?;
        if k != k2 {
            return Err(NumericsError::Shape { op: "matmul", detail: format!("{m}x{k} · {k2}x{n}") });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
        Ok(self.tape().push(
            Tensor::from_parts(vec![m, n], out),
            &[self, other],
            Box::new(move |g| {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, b.data(), true, &mut ga, false);
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, a.data(), true, g.data(), false, &mut gb, false);
                vec![Some(Tensor::from_parts(vec![m, k], ga)), Some(Tensor::from_parts(vec![k, n], gb))]
            }),
        ))
    }

    /// Softmax of a rank-1 tensor, computed with max subtraction.
    pub fn softmax(self) -> Result<Var<'t>, NumericsError> {
        let v = self.value();
        if v.ndim() != 1 {
            return Err(NumericsError::Shape {
                op: "softmax",
                detail: format!("expected rank 1, got {:?}", v.shape()),
            });
        }
        if v.numel() == 0 {
            return Err(NumericsError::Empty { op: "softmax" });
        }
        v.ensure_finite("softmax")?;
        let mut out = vec![0.0; v.numel()];
        softmax_slice(v.data(), &mut out);
        let y = Tensor::from_vec(out);
        let saved = y.clone();
        Ok(self.tape().push(
            y,
            &[self],
            Box::new(move |g| {
                let mut gx = vec![0.0; saved.numel()];
                softmax_backward(saved.data(), g.data(), &mut gx);
                vec![Some(Tensor::from_vec(gx))]
            }),
        ))
    }

    /// Row-wise softmax of a rank-2 tensor.
    pub fn softmax_rows(self) -> Result<Var<'t>, NumericsError> {
        let v = self.value();
        let (r, c) = dims2("softmax_rows", &v)?;
        if c == 0 {
            return Err(NumericsError::Empty { op: "softmax_rows" });
        }
        v.ensure_finite("softmax_rows")?;
        let mut out = vec![0.0; r * c];
        for (o, x) in out.chunks_mut(c).zip(v.data().chunks(c)) {
            softmax_slice(x, o);
        }
        let y = Tensor::from_parts(vec![r, c], out);
        let saved = y.clone();
        Ok(self.tape().push(
            y,
            &[self],
            Box::new(move |g| {
                let mut gx = vec![0.0; r * c];
                for ((o, y), g) in gx.chunks_mut(c).zip(saved.data().chunks(c)).zip(g.data().chunks(c)) {
                    softmax_backward(y, g, o);
                }
                vec![Some(Tensor::from_parts(vec![r, c], gx))]
            }),
        ))
    }

    /// Scale each row of a rank-2 tensor to unit Euclidean norm.
    pub fn normalize_rows(self) -> Result<Var<'t>, NumericsError> {
        let v = self.value();
        let (r, c) = dims2("normalize_rows", &v)?;
        let norms: Vec<f64> = v.data().chunks(c).map(|row| row.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        if let Some(i) = norms.iter().position(|&n| !(n > MIN_NORM)) {
            return Err(NumericsError::Degenerate { op: "normalize_rows", detail: format!("row {i} has zero norm") });
        }
        let mut out = v.data().to_vec();
        for (row, n) in out.chunks_mut(c).zip(&norms) {
            row.iter_mut().for_each(|x| *x /= n);
        }
        let y = Tensor::from_parts(vec![r, c], out);
        let saved = y.clone();
        Ok(self.tape().push(
            y,
            &[self],
            Box::new(move |g| {
                let mut gx = vec![0.0; r * c];
                for (((o, y), g), n) in gx.chunks_mut(c).zip(saved.data().chunks(c)).zip(g.data().chunks(c)).zip(&norms)
                {
                    let dot: f64 = y.iter().zip(g).map(|(y, g)| y * g).sum();
                    for ((o, y), g) in o.iter_mut().zip(y).zip(g) {
                        *o = (g - y * dot) / n;
                    }
                }
                vec![Some(Tensor::from_parts(vec![r, c], gx))]
            }),
        ))
    }
}

/// Cosine similarity of two equal-length rank-1 tensors.
pub fn cosine_similarity<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>, NumericsError> {
    let (x, y) = (a.value(), b.value());
    if x.ndim() != 1 || x.shape() != y.shape() {
        return Err(NumericsError::Shape {
            op: "cosine_similarity",
            detail: format!("{:?} vs {:?}", x.shape(), y.shape()),
        });
    }
    let nx = x.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny = y.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(nx > MIN_NORM && ny > MIN_NORM) {
        return Err(NumericsError::Degenerate { op: "cosine_similarity", detail: "zero-norm vector".into() });
    }
    let dot: f64 = x.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
    let cos = (dot / (nx * ny)).clamp(-1.0, 1.0);
    Ok(a.tape().push(
        Tensor::scalar(cos),
        &[a, b],
        Box::new(move |g| {
            let g = g.data()[0];
            let ga = Tensor::from_fn(x.shape(), |i| g * (y.data()[i] / (nx * ny) - cos * x.data()[i] / (nx * nx)));
            let gb = Tensor::from_fn(y.shape(), |i| g * (x.data()[i] / (nx * ny) - cos * y.data()[i] / (ny * ny)));
            vec![Some(ga), Some(gb)]
        }),
    ))
}

/// Scaled dot-product attention `softmax(Q Kᵀ / √d) V` with a row-wise softmax.
///
/// `q` is `T×d`, `k` is `S×d`, `v` is `S×d_v`; the result is `T×d_v`.
pub fn attention<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>) -> Result<Var<'t>, NumericsError> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks[0] != vs[0] {
        return Err(NumericsError::Shape { op: "attention", detail: format!("Q {qs:?}, K {ks:?}, V {vs:?}") });
    }
    let scale = 1.0 / (qs[1] as f64).sqrt();
    let scores = q.matmul(k.transpose()?)?.scale(scale);
    scores.softmax_rows()?.matmul(v)
}
