//! Spatial operations on NCHW tensors: convolution, padding, cropping,
//! resampling, pooling and the Sobel gradient-magnitude map.

use super::linalg::gemm;
use super::tape::Var;
use super::tensor::dims4;
use super::{NumericsError, Tensor};

/// Geometry of one 2-D cross-correlation.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }

    /// 1×1, stride 1, no padding: the input plane is already the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let (p, pad) = (g.p(), g.pad as isize);
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &mut col[((c * g.kh + ki) * g.kw + kj) * p..][..p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    let out = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        *o = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add(col: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let (p, pad) = (g.p(), g.pad as isize);
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &col[((c * g.kh + ki) * g.kw + kj) * p..][..p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in row[oy * g.ow..(oy + 1) * g.ow].iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation of `input` (N×C×H×W) with `kernel` (O×C×kh×kw),
/// zero padding on every side.
pub fn conv2d<'t>(input: Var<'t>, kernel: Var<'t>, stride: usize, padding: usize) -> Result<Var<'t>, NumericsError> {
    let (x, w) = (input.value(), kernel.value());
    let (n, c, h, wd) = x.dims4()?;
    let (o, kc, kh, kw) = dims4(w.shape())?;
    if kc != c {
        return Err(NumericsError::Shape {
            op: "conv2d",
            detail: format!("input has {c} channels, kernel expects {kc}"),
        });
    }
    if stride == 0 {
        return Err(NumericsError::Shape { op: "conv2d", detail: "stride must be at least 1".into() });
    }
    if h + 2 * padding < kh || wd + 2 * padding < kw {
        return Err(NumericsError::Shape {
            op: "conv2d",
            detail: format!("{h}x{wd} input with padding {padding} is smaller than the {kh}x{kw} kernel"),
        });
    }
    let g = ConvGeom {
        c,
        h,
        w: wd,
        kh,
        kw,
        stride,
        pad: padding,
        oh: (h + 2 * padding - kh) / stride + 1,
        ow: (wd + 2 * padding - kw) / stride + 1,
    };
    let (k, p) = (g.k(), g.p());
    let in_plane = c * h * wd;
    let mut out = vec![0.0; n * o * p];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
    for s in 0..n {
        let xs = &x.data()[s * in_plane..(s + 1) * in_plane];
        let cols: &[f64] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, &g, &mut col);
            &col
        };
        gemm(o, k, p, w.data(), false, cols, false, &mut out[s * o * p..(s + 1) * o * p], false);
    }
    let (need_x, need_w) = (input.requires_grad(), kernel.requires_grad());
    Ok(input.tape().push(
        Tensor::from_parts(vec![n, o, g.oh, g.ow], out),
        &[input, kernel],
        Box::new(move |grad| {
            let mut gx = need_x.then(|| vec![0.0; n * in_plane]);
            let mut gw = need_w.then(|| vec![0.0; o * k]);
            let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
            let mut gcol = vec![0.0; k * p];
            for s in 0..n {
                let gs = &grad.data()[s * o * p..(s + 1) * o * p];
                if let Some(gw) = gw.as_mut() {
                    let xs = &x.data()[s * in_plane..(s + 1) * in_plane];
                    let cols: &[f64] = if g.is_pointwise() {
                        xs
                    } else {
                        im2col(xs, &g, &mut col);
                        &col
                    };
                    gemm(o, p, k, gs, false, cols, true, gw, true);
                }
                if let Some(gx) = gx.as_mut() {
                    let dst = &mut gx[s * in_plane..(s + 1) * in_plane];
                    if g.is_pointwise() {
                        gemm(k, o, p, w.data(), true, gs, false, dst, true);
                    } else {
                        gemm(k, o, p, w.data(), true, gs, false, &mut gcol, false);
                        col2im_add(&gcol, &g, dst);
                    }
                }
            }
            vec![
                gx.map(|d| Tensor::from_parts(vec![n, c, h, wd], d)),
                gw.map(|d| Tensor::from_parts(vec![o, c, kh, kw], d)),
            ]
        }),
    ))
}

impl<'t> Var<'t> {
    /// Extend the spatial extent by repeating edge pixels.
    pub fn pad_replicate(self, top: usize, bottom: usize, left: usize, right: usize) -> Result<Var<'t>, NumericsError> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        if h == 0 || w == 0 {
            return Err(NumericsError::Empty { op: "pad_replicate" });
        }
        let (oh, ow) = (h + top + bottom, w + left + right);
        let src_y: Vec<usize> = (0..oh).map(|y| y.saturating_sub(top).min(h - 1)).collect();
        let src_x: Vec<usize> = (0..ow).map(|x| x.saturating_sub(left).min(w - 1)).collect();
        let mut out = vec![0.0; n * c * oh * ow];
        for (plane, dst) in x.data().chunks(h * w).zip(out.chunks_mut(oh * ow)) {
            for (y, &sy) in src_y.iter().enumerate() {
                for (xx, &sx) in src_x.iter().enumerate() {
                    dst[y * ow + xx] = plane[sy * w + sx];
                }
            }
        }
        Ok(self.tape().push(
            Tensor::from_parts(vec![n, c, oh, ow], out),
            &[self],
            Box::new(move |g| {
                let mut gx = vec![0.0; n * c * h * w];
                for (src, dst) in g.data().chunks(oh * ow).zip(gx.chunks_mut(h * w)) {
                    for (y, &sy) in src_y.iter().enumerate() {
                        for (xx, &sx) in src_x.iter().enumerate() {
                            dst[sy * w + sx] += src[y * ow + xx];
                        }
                    }
                }
                vec![Some(Tensor::from_parts(vec![n, c, h, w], gx))]
            }),
        ))
    }

    /// Spatial window `[top, top + height) × [left, left + width)`.
    pub fn crop(self, top: usize, left: usize, height: usize, width: usize) -> Result<Var<'t>, NumericsError> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        if top + height > h || left + width > w {
            return Err(NumericsError::Shape {
                op: "crop",
                detail: format!("{height}x{width}@({top},{left}) of {h}x{w}"),
            });
        }
        let mut out = Vec::with_capacity(n * c * height * width);
        for plane in x.data().chunks(h * w) {
            for y in top..top + height {
                out.extend_from_slice(&plane[y * w + left..y * w + left + width]);
            }
        }
        Ok(self.tape().push(
            Tensor::from_parts(vec![n, c, height, width], out),
            &[self],
            Box::new(move |g| {
                let mut gx = vec![0.0; n * c * h * w];
                for (src, dst) in g.data().chunks(height * width).zip(gx.chunks_mut(h * w)) {
                    for (r, y) in (top..top + height).enumerate() {
                        dst[y * w + left..y * w + left + width].copy_from_slice(&src[r * width..(r + 1) * width]);
                    }
                }
                vec![Some(Tensor::from_parts(vec![n, c, h, w], gx))]
            }),
        ))
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample_nearest2x(self) -> Result<Var<'t>, NumericsError> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * oh * ow];
        for (src, dst) in x.data().chunks(h * w).zip(out.chunks_mut(oh * ow)) {
            for y in 0..oh {
                for xx in 0..ow {
                    dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        Ok(self.tape().push(
            Tensor::from_parts(vec![n, c, oh, ow], out),
            &[self],
            Box::new(move |g| {
                let mut gx = vec![0.0; n * c * h * w];
                for (src, dst) in g.data().chunks(oh * ow).zip(gx.chunks_mut(h * w)) {
                    for y in 0..oh {
                        for xx in 0..ow {
                            dst[(y / 2) * w + xx / 2] += src[y * ow + xx];
                        }
                    }
                }
                vec![Some(Tensor::from_parts(vec![n, c, h, w], gx))]
            }),
        ))
    }

    /// Spatial mean per channel: N×C×H×W → N×C.
    pub fn global_avg_pool(self) -> Result<Var<'t>, NumericsError> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        let hw = (h * w) as f64;
        let out: Vec<f64> = x.data().chunks(h * w).map(|p| p.iter().sum::<f64>() / hw).collect();
        Ok(self.tape().push(
            Tensor::from_parts(vec![n, c], out),
            &[self],
            Box::new(move |g| {
                let mut gx = Vec::with_capacity(n * c * h * w);
                for &v in g.data() {
                    gx.extend(std::iter::repeat_n(v / hw, h * w));
                }
                vec![Some(Tensor::from_parts(vec![n, c, h, w], gx))]
            }),
        ))
    }
}

pub const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
pub const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

/// Per-pixel Sobel gradient magnitude `|gx| + |gy|`, per channel, with
/// replicate padding so the output keeps the input's spatial shape.
pub fn image_gradient(img: Var<'_>) -> Result<Var<'_>, NumericsError> {
    let shape = img.shape();
    let (n, c, h, w) = dims4(&shape)?;
    if h < 3 || w < 3 {
        return Err(NumericsError::ImageTooSmall { op: "image_gradient", height: h, width: w, min: 3 });
    }
    let tape = img.tape();
    let planes = img.reshape([n * c, 1, h, w])?.pad_replicate(1, 1, 1, 1)?;
    let kx = tape.constant(Tensor::from_parts(vec![1, 1, 3, 3], SOBEL_X.to_vec()));
    let ky = tape.constant(Tensor::from_parts(vec![1, 1, 3, 3], SOBEL_Y.to_vec()));
    let gx = conv2d(planes, kx, 1, 0)?.abs();
    let gy = conv2d(planes, ky, 1, 0)?.abs();
    gx.add(gy)?.reshape([n, c, h, w])
}
