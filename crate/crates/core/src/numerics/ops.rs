//! Elementwise, reduction and shape operations on [`Var`].

use super::tape::Var;
use super::{NumericsError, Tensor};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), NumericsError> {
    if a.shape() != b.shape() {
        return Err(NumericsError::Shape { op, detail: format!("{:?} vs {:?}", a.shape(), b.shape()) });
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>, NumericsError> {
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x + y);
        Ok(self.tape().push(out, &[self, other], Box::new(|g| vec![Some(g.clone()), Some(g.clone())])))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>, NumericsError> {
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x - y);
        Ok(self.tape().push(out, &[self, other], Box::new(|g| vec![Some(g.clone()), Some(g.map(|v| -v))])))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>, NumericsError> {
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x * y);
        Ok(self.tape().push(
            out,
            &[self, other],
            Box::new(move |g| vec![Some(g.zip_map(&b, |g, y| g * y)), Some(g.zip_map(&a, |g, x| g * x))]),
        ))
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>, NumericsError> {
        let (a, b) = (self.value(), other.value());
        same_shape("div", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x / y);
        out.ensure_finite("div")?;
        let quotient = out.clone();
        Ok(self.tape().push(
            out,
            &[self, other],
            Box::new(move |g| {
                let ga = g.zip_map(&b, |g, y| g / y);
                let gb = Tensor::from_fn(g.shape(), |i| -g.data()[i] * quotient.data()[i] / b.data()[i]);
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        let out = self.value().map(|x| x * factor);
        self.tape().push(out, &[self], Box::new(move |g| vec![Some(g.map(|v| v * factor))]))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let out = self.value().map(|x| x + c);
        self.tape().push(out, &[self], Box::new(|g| vec![Some(g.clone())]))
    }

    /// `c - self`.
    pub fn rsub_scalar(self, c: f64) -> Var<'t> {
        self.scale(-1.0).add_scalar(c)
    }

    pub fn square(self) -> Var<'t> {
        let x = self.value();
        let out = x.map(|v| v * v);
        self.tape().push(out, &[self], Box::new(move |g| vec![Some(g.zip_map(&x, |g, v| 2.0 * g * v))]))
    }

    pub fn exp(self) -> Var<'t> {
        let out = self.value().map(f64::exp);
        let y = out.clone();
        self.tape().push(out, &[self], Box::new(move |g| vec![Some(g.zip_map(&y, |g, y| g * y))]))
    }

    /// Absolute value. The subgradient at exactly zero is zero.
    pub fn abs(self) -> Var<'t> {
        let x = self.value();
        let out = x.map(f64::abs);
        self.tape().push(
            out,
            &[self],
            Box::new(move |g| {
                vec![Some(g.zip_map(&x, |g, v| {
                    if v > 0.0 {
                        g
                    } else if v < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                }))]
            }),
        )
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        let x = self.value();
        let out = x.map(|v| if v > 0.0 { v } else { slope * v });
        self.tape().push(
            out,
            &[self],
            Box::new(move |g| vec![Some(g.zip_map(&x, |g, v| if v > 0.0 { g } else { slope * g }))]),
        )
    }

    pub fn sigmoid(self) -> Var<'t> {
        let out = self.value().map(|v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        });
        let y = out.clone();
        self.tape().push(out, &[self], Box::new(move |g| vec![Some(g.zip_map(&y, |g, y| g * y * (1.0 - y)))]))
    }

    /// Elementwise maximum. On exact ties the whole gradient goes to `self`.
    pub fn maximum(self, other: Var<'t>) -> Result<Var<'t>, NumericsError> {
        let (a, b) = (self.value(), other.value());
        same_shape("maximum", &a, &b)?;
        let out = a.zip_map(&b, f64::max);
        Ok(self.tape().push(
            out,
            &[self, other],
            Box::new(move |g| {
                let mask: Vec<bool> = a.data().iter().zip(b.data()).map(|(x, y)| x >= y).collect();
                let ga = Tensor::from_fn(g.shape(), |i| if mask[i] { g.data()[i] } else { 0.0 });
                let gb = Tensor::from_fn(g.shape(), |i| if mask[i] { 0.0 } else { g.data()[i] });
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape().push(
            Tensor::scalar(x.sum()),
            &[self],
            Box::new(move |g| vec![Some(Tensor::full(shape.clone(), g.data()[0]))]),
        )
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>, NumericsError> {
        let x = self.value();
        let old = x.shape().to_vec();
        let out = (*x).clone().reshape(shape)?;
        Ok(self.tape().push(
            out,
            &[self],
            Box::new(move |g| vec![Some(g.clone().reshape(old.clone()).expect("same numel"))]),
        ))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(self) -> Result<Var<'t>, NumericsError> {
        let x = self.value();
        let [r, c] = *x.shape() else {
            return Err(NumericsError::Shape {
                op: "transpose",
                detail: format!("expected rank 2, got {:?}", x.shape()),
            });
        };
        let out = transpose2(x.data(), r, c);
        Ok(self.tape().push(out, &[self], Box::new(move |g| vec![Some(transpose2(g.data(), c, r))])))
    }

    /// Contiguous range `start..start + len` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>, NumericsError> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(NumericsError::Shape {
                op: "narrow",
                detail: format!("axis {axis} range {start}+{len} of {shape:?}"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        Ok(self.tape().push(
            Tensor::from_parts(out_shape, data),
            &[self],
            Box::new(move |g| {
                let mut gx = Tensor::zeros(shape.clone());
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    gx.data_mut()[base..base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Add a per-channel bias `[C]` to an NCHW tensor.
    pub fn add_channel_bias(self, bias: Var<'t>) -> Result<Var<'t>, NumericsError> {
        let (x, b) = (self.value(), bias.value());
        let (_, c, h, w) = x.dims4()?;
        if b.shape() != [c] {
            return Err(NumericsError::Shape {
                op: "add_channel_bias",
                detail: format!("bias {:?} for {c} channels", b.shape()),
            });
        }
        let hw = h * w;
        let mut out = (*x).clone();
        for (i, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
            let v = b.data()[i % c];
            chunk.iter_mut().for_each(|x| *x += v);
        }
        Ok(self.tape().push(
            out,
            &[self, bias],
            Box::new(move |g| {
                let mut gb = vec![0.0; c];
                for (i, chunk) in g.data().chunks(hw).enumerate() {
                    gb[i % c] += chunk.iter().sum::<f64>();
                }
                vec![Some(g.clone()), Some(Tensor::from_vec(gb))]
            }),
        ))
    }

    /// Add a per-sample, per-channel vector `[N, C]` to an NCHW tensor,
    /// broadcasting over the spatial axes.
    pub fn add_channel_vector(self, v: Var<'t>) -> Result<Var<'t>, NumericsError> {
        let (x, vv) = (self.value(), v.value());
        let (n, c, h, w) = x.dims4()?;
        if vv.shape() != [n, c] {
            return Err(NumericsError::Shape {
                op: "add_channel_vector",
                detail: format!("vector {:?} for {:?}", vv.shape(), x.shape()),
            });
        }
        let hw = h * w;
        let mut out = (*x).clone();
        for (i, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
            let s = vv.data()[i];
            chunk.iter_mut().for_each(|x| *x += s);
        }
        Ok(self.tape().push(
            out,
            &[self, v],
            Box::new(move |g| {
                let gv: Vec<f64> = g.data().chunks(hw).map(|c| c.iter().sum()).collect();
                vec![Some(g.clone()), Some(Tensor::from_parts(vec![n, c], gv))]
            }),
        ))
    }
}

pub(crate) fn transpose2(data: &[f64], rows: usize, cols: usize) -> Tensor {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    Tensor::from_parts(vec![cols, rows], out)
}

/// Concatenate along `axis`. All other extents must agree.
pub fn concat<'t>(vars: &[Var<'t>], axis: usize) -> Result<Var<'t>, NumericsError> {
    let first = vars.first().ok_or(NumericsError::Empty { op: "concat" })?;
    let values: Vec<_> = vars.iter().map(Var::value).collect();
    let base = values[0].shape().to_vec();
    if axis >= base.len() {
        return Err(NumericsError::Shape { op: "concat", detail: format!("axis {axis} of {base:?}") });
    }
    for v in &values {
        let s = v.shape();
        if s.len() != base.len() || s.iter().enumerate().any(|(i, &e)| i != axis && e != base[i]) {
            return Err(NumericsError::Shape { op: "concat", detail: format!("{base:?} vs {s:?}") });
        }
    }
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let extents: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    let total: usize = extents.iter().sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &e) in values.iter().zip(&extents) {
            data.extend_from_slice(&v.data()[o * e * inner..(o + 1) * e * inner]);
        }
    }
    let mut shape = base.clone();
    shape[axis] = total;
    let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
    Ok(first.tape().push(
        Tensor::from_parts(shape, data),
        vars,
        Box::new(move |g| {
            let mut parts: Vec<Vec<f64>> = extents.iter().map(|&e| Vec::with_capacity(outer * e * inner)).collect();
            let mut offset = 0;
            for _ in 0..outer {
                for (p, &e) in parts.iter_mut().zip(&extents) {
                    p.extend_from_slice(&g.data()[offset..offset + e * inner]);
                    offset += e * inner;
                }
            }
            parts.into_iter().zip(&shapes).map(|(p, s)| Some(Tensor::from_parts(s.clone(), p))).collect()
        }),
    ))
}
