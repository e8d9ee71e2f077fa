//! Dense NHWC tensors and the handful of kernels the nowcast network needs.
//!
//! Every kernel has a matching backward routine used by [`crate::graph`].
//! Convolutions accumulate in a fixed `(di, dj, ci)` order so results are
//! reproducible run to run.

use std::fmt;

use crate::error::{Error, Result};

/// Dense row-major tensor of rank 1 to 4. Rank-4 tensors are laid out as
/// `[batch, height, width, channels]` with channels fastest.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_shape(&shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        check_shape(shape).expect("invalid tensor shape");
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        check_shape(shape).expect("invalid tensor shape");
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// `(b, h, w, c)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, h, w, c] => Ok((b, h, w, c)),
            _ => Err(Error::shape("tensor", format!("expected rank 4, got {:?}", self.shape))),
        }
    }

    pub fn at4(&self, b: usize, i: usize, j: usize, c: usize) -> f64 {
        let (_, h, w, ch) = self.dims4().expect("rank-4 tensor");
        self.data[((b * h + i) * w + j) * ch + c]
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Select samples along the batch axis.
    pub fn select_batch(&self, indices: &[usize]) -> Result<Tensor> {
        let (b, h, w, c) = self.dims4()?;
        let per = h * w * c;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            if i >= b {
                return Err(Error::shape("select_batch", format!("index {i} >= batch {b}")));
            }
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        Tensor::new(vec![indices.len(), h, w, c], data)
    }

    /// Concatenate rank-4 tensors along the batch axis.
    pub fn stack_batch(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::shape("stack_batch", "no tensors"))?;
        let (_, h, w, c) = first.dims4()?;
        let mut data = Vec::new();
        let mut batch = 0;
        for p in parts {
            let (pb, ph, pw, pc) = p.dims4()?;
            if (ph, pw, pc) != (h, w, c) {
                return Err(Error::shape("stack_batch", "mismatched sample shapes"));
            }
            batch += pb;
            data.extend_from_slice(&p.data);
        }
        Tensor::new(vec![batch, h, w, c], data)
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(Error::shape("tensor", format!("rank must be 1..=4, got {shape:?}")));
    }
    if shape.contains(&0) {
        return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
    }
    Ok(())
}

/// Output length of a valid (unpadded) convolution.
pub fn conv_output_extent(layer: &str, input: usize, kernel: usize, stride: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(Error::shape(layer, "kernel and stride must be >= 1"));
    }
    if input < kernel {
        return Err(Error::NegativeExtent { layer: layer.to_string(), input, required: kernel });
    }
    Ok((input - kernel) / stride + 1)
}

/// Rows (or columns) removed from the leading edge by a center crop.
#[inline]
pub fn crop_offset(from: usize, to: usize) -> usize {
    (from - to) / 2
}

fn conv_dims(x: &Tensor, w: &Tensor) -> Result<(usize, usize, usize)> {
    let (_, _, _, cin) = x.dims4()?;
    match w.shape[..] {
        [k, k2, wc, cout] if k == k2 && wc == cin => Ok((k, cin, cout)),
        _ => Err(Error::shape(
            "conv2d",
            format!("weights {:?} incompatible with input {:?}", w.shape, x.shape),
        )),
    }
}

/// Valid 2-D convolution. `w` is `[k, k, cin, cout]`, `bias` (if any) is `[cout]`.
///
/// Each output element is `bias[co]` followed by the products accumulated in
/// ascending `(di, dj, ci)` order.
pub fn conv2d_valid(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize) -> Result<Tensor> {
    let (b, h, wd, _) = x.dims4()?;
    let (k, cin, cout) = conv_dims(x, w)?;
    if let Some(bias) = bias {
        if bias.shape != [cout] {
            return Err(Error::shape("conv2d", format!("bias {:?} vs cout {cout}", bias.shape)));
        }
    }
    let oh = conv_output_extent("conv2d", h, k, stride)?;
    let ow = conv_output_extent("conv2d", wd, k, stride)?;
    let geom = ConvGeom { b, h, wd, cin, k, stride, oh, ow };
    let mut out = vec![0.0; b * oh * ow * cout];
    let bias = bias.map(|t| t.data.as_slice());
    macro_rules! fwd {
        ($($c:literal)*) => {
            match cout {
                $($c => conv_fwd::<$c>(&geom, &x.data, &w.data, bias, &mut out),)*
                _ => conv_fwd_dyn(&geom, cout, &x.data, &w.data, bias, &mut out),
            }
        };
    }
    fwd!(1 2 3 4 6 7 8 12 14 16 24 32 48 64 96 128);
    Tensor::new(vec![b, oh, ow, cout], out)
}

struct ConvGeom {
    b: usize,
    h: usize,
    wd: usize,
    cin: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    #[inline]
    fn x_offset(&self, bi: usize, i: usize, j: usize, di: usize, dj: usize) -> usize {
        ((bi * self.h + i * self.stride + di) * self.wd + j * self.stride + dj) * self.cin
    }
}

// Output-channel count fixed at compile time so the accumulator stays in registers.
fn conv_fwd<const C: usize>(g: &ConvGeom, xd: &[f64], wd: &[f64], bias: Option<&[f64]>, out: &mut [f64]) {
    let cin = g.cin;
    for bi in 0..g.b {
        for i in 0..g.oh {
            for j in 0..g.ow {
                let mut acc = [0.0; C];
                if let Some(bias) = bias {
                    acc.copy_from_slice(bias);
                }
                for di in 0..g.k {
                    for dj in 0..g.k {
                        let xo = g.x_offset(bi, i, j, di, dj);
                        let xrow = &xd[xo..xo + cin];
                        let wo = (di * g.k + dj) * cin * C;
                        for (ci, &xv) in xrow.iter().enumerate() {
                            let wrow: &[f64; C] = wd[wo + ci * C..wo + (ci + 1) * C].try_into().unwrap();
                            for c in 0..C {
                                acc[c] += xv * wrow[c];
                            }
                        }
                    }
                }
                let o = ((bi * g.oh + i) * g.ow + j) * C;
                out[o..o + C].copy_from_slice(&acc);
            }
        }
    }
}

fn conv_fwd_dyn(g: &ConvGeom, cout: usize, xd: &[f64], wd: &[f64], bias: Option<&[f64]>, out: &mut [f64]) {
    let cin = g.cin;
    for bi in 0..g.b {
        for i in 0..g.oh {
            for j in 0..g.ow {
                let o = ((bi * g.oh + i) * g.ow + j) * cout;
                let acc = &mut out[o..o + cout];
                if let Some(bias) = bias {
                    acc.copy_from_slice(bias);
                }
                for di in 0..g.k {
                    for dj in 0..g.k {
                        let xo = g.x_offset(bi, i, j, di, dj);
                        let wo = (di * g.k + dj) * cin * cout;
                        for (ci, &xv) in xd[xo..xo + cin].iter().enumerate() {
                            let wrow = &wd[wo + ci * cout..wo + (ci + 1) * cout];
                            for (a, &wv) in acc.iter_mut().zip(wrow) {
                                *a += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of [`conv2d_valid`] (without bias) with respect to input and weights.
///
/// The input gradient is skipped (returned as `None`) when `need_input_grad` is false.
pub fn conv2d_valid_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    need_input_grad: bool,
) -> Result<(Option<Tensor>, Tensor)> {
    let (b, h, wd, _) = x.dims4()?;
    let (k, cin, cout) = conv_dims(x, w)?;
    let (gb, oh, ow, gc) = grad_out.dims4()?;
    if gb != b || gc != cout {
        return Err(Error::shape("conv2d backward", "gradient shape mismatch"));
    }
    let geom = ConvGeom { b, h, wd, cin, k, stride, oh, ow };
    let mut gw = vec![0.0; w.data.len()];
    macro_rules! wgrad {
        ($($c:literal)*) => {
            match cout {
                $($c => conv_wgrad::<$c>(&geom, &x.data, &grad_out.data, &mut gw),)*
                _ => conv_wgrad_dyn(&geom, cout, &x.data, &grad_out.data, &mut gw),
            }
        };
    }
    wgrad!(1 2 3 4 6 8 12 16 24 32 48 64 96 128);
    let gx = if !need_input_grad {
        None
    } else if stride == 1 {
        Some(conv_input_grad_full(&geom, cout, w, grad_out)?)
    } else {
        let mut gx = vec![0.0; x.data.len()];
        conv_input_grad_scatter(&geom, cout, &w.data, &grad_out.data, &mut gx);
        Some(Tensor::new(x.shape.clone(), gx)?)
    };
    Ok((gx, Tensor::new(w.shape.clone(), gw)?))
}

// Weight gradient, accumulated one output row at a time in registers.
fn conv_wgrad<const C: usize>(g: &ConvGeom, xd: &[f64], go: &[f64], gw: &mut [f64]) {
    let cin = g.cin;
    let sx = g.stride * cin;
    for bi in 0..g.b {
        for i in 0..g.oh {
            let grow = &go[(bi * g.oh + i) * g.ow * C..(bi * g.oh + i + 1) * g.ow * C];
            for di in 0..g.k {
                for dj in 0..g.k {
                    let xo = g.x_offset(bi, i, 0, di, dj);
                    let wo = (di * g.k + dj) * cin * C;
                    for ci in 0..cin {
                        let mut acc = [0.0; C];
                        for (j, gv) in grow.chunks_exact(C).enumerate() {
                            let xv = xd[xo + j * sx + ci];
                            for c in 0..C {
                                acc[c] += xv * gv[c];
                            }
                        }
                        for (a, v) in gw[wo + ci * C..wo + (ci + 1) * C].iter_mut().zip(acc) {
                            *a += v;
                        }
                    }
                }
            }
        }
    }
}

fn conv_wgrad_dyn(g: &ConvGeom, cout: usize, xd: &[f64], go: &[f64], gw: &mut [f64]) {
    let cin = g.cin;
    for bi in 0..g.b {
        for i in 0..g.oh {
            for j in 0..g.ow {
                let o = ((bi * g.oh + i) * g.ow + j) * cout;
                let grow = &go[o..o + cout];
                for di in 0..g.k {
                    for dj in 0..g.k {
                        let xo = g.x_offset(bi, i, j, di, dj);
                        let wo = (di * g.k + dj) * cin * cout;
                        for ci in 0..cin {
                            let xv = xd[xo + ci];
                            for (a, &gv) in gw[wo + ci * cout..wo + (ci + 1) * cout].iter_mut().zip(grow) {
                                *a += xv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

// Stride-1 input gradient: full convolution of the output gradient with the
// spatially flipped, channel-transposed kernel.
fn conv_input_grad_full(g: &ConvGeom, cout: usize, w: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let (k, cin) = (g.k, g.cin);
    let pad = k - 1;
    let (ph, pw) = (g.oh + 2 * pad, g.ow + 2 * pad);
    let mut padded = vec![0.0; g.b * ph * pw * cout];
    for bi in 0..g.b {
        for i in 0..g.oh {
            let src = &grad_out.data[(bi * g.oh + i) * g.ow * cout..(bi * g.oh + i + 1) * g.ow * cout];
            let dst = ((bi * ph + i + pad) * pw + pad) * cout;
            padded[dst..dst + src.len()].copy_from_slice(src);
        }
    }
    let mut flipped = vec![0.0; w.data.len()];
    for di in 0..k {
        for dj in 0..k {
            for ci in 0..cin {
                for co in 0..cout {
                    flipped[(((k - 1 - di) * k + (k - 1 - dj)) * cout + co) * cin + ci] =
                        w.data[((di * k + dj) * cin + ci) * cout + co];
                }
            }
        }
    }
    let padded = Tensor { shape: vec![g.b, ph, pw, cout], data: padded };
    let flipped = Tensor { shape: vec![k, k, cout, cin], data: flipped };
    conv2d_valid(&padded, &flipped, None, 1)
}

fn conv_input_grad_scatter(g: &ConvGeom, cout: usize, wd: &[f64], go: &[f64], gx: &mut [f64]) {
    let cin = g.cin;
    for bi in 0..g.b {
        for i in 0..g.oh {
            for j in 0..g.ow {
                let o = ((bi * g.oh + i) * g.ow + j) * cout;
                let grow = &go[o..o + cout];
                for di in 0..g.k {
                    for dj in 0..g.k {
                        let xo = g.x_offset(bi, i, j, di, dj);
                        let wo = (di * g.k + dj) * cin * cout;
                        for ci in 0..cin {
                            let wrow = &wd[wo + ci * cout..wo + (ci + 1) * cout];
                            gx[xo + ci] += wrow.iter().zip(grow).fold(0.0, |a, (&wv, &gv)| a + wv * gv);
                        }
                    }
                }
            }
        }
    }
}

/// Adds a per-channel bias to the last axis.
pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = *x.shape.last().unwrap();
    if bias.shape != [c] {
        return Err(Error::shape("linear_bias", format!("bias {:?} vs channels {c}", bias.shape)));
    }
    let mut out = x.clone();
    for chunk in out.data.chunks_exact_mut(c) {
        for (v, &bv) in chunk.iter_mut().zip(&bias.data) {
            *v += bv;
        }
    }
    Ok(out)
}

pub fn add_bias_backward(grad_out: &Tensor) -> Tensor {
    let c = *grad_out.shape.last().unwrap();
    let mut gb = vec![0.0; c];
    for chunk in grad_out.data.chunks_exact(c) {
        for (a, &g) in gb.iter_mut().zip(chunk) {
            *a += g;
        }
    }
    Tensor { shape: vec![c], data: gb }
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor { shape: x.shape.clone(), data: x.data.iter().map(|&v| v.max(0.0)).collect() }
}

/// ReLU gradient; the derivative at exactly zero is taken as zero.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = x
        .data
        .iter()
        .zip(&grad_out.data)
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor { shape: x.shape.clone(), data }
}

pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    if factor == 0 {
        return Err(Error::shape("upsample", "factor must be >= 1"));
    }
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(b * oh * ow * c);
    for bi in 0..b {
        for i in 0..oh {
            for j in 0..ow {
                let s = ((bi * h + i / factor) * w + j / factor) * c;
                out.extend_from_slice(&x.data[s..s + c]);
            }
        }
    }
    Tensor::new(vec![b, oh, ow, c], out)
}

pub fn upsample_nearest_backward(x_shape: &[usize], grad_out: &Tensor, factor: usize) -> Result<Tensor> {
    let (b, h, w, c) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (_, oh, ow, _) = grad_out.dims4()?;
    let mut gx = vec![0.0; b * h * w * c];
    for bi in 0..b {
        for i in 0..oh {
            for j in 0..ow {
                let s = ((bi * h + i / factor) * w + j / factor) * c;
                let o = ((bi * oh + i) * ow + j) * c;
                for ch in 0..c {
                    gx[s + ch] += grad_out.data[o + ch];
                }
            }
        }
    }
    Tensor::new(x_shape.to_vec(), gx)
}

/// Average pooling with a square, non-overlapping window.
pub fn avgpool(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(
            "avgpool",
            format!("{h}x{w} not divisible by pool factor {factor}"),
        ));
    }
    let (oh, ow) = (h / factor, w / factor);
    let scale = 1.0 / (factor * factor) as f64;
    let mut out = vec![0.0; b * oh * ow * c];
    for bi in 0..b {
        for i in 0..oh {
            for j in 0..ow {
                let o = ((bi * oh + i) * ow + j) * c;
                for di in 0..factor {
                    for dj in 0..factor {
                        let s = ((bi * h + i * factor + di) * w + j * factor + dj) * c;
                        for ch in 0..c {
                            out[o + ch] += x.data[s + ch];
                        }
                    }
                }
                for v in &mut out[o..o + c] {
                    *v *= scale;
                }
            }
        }
    }
    Tensor::new(vec![b, oh, ow, c], out)
}

pub fn avgpool_backward(x_shape: &[usize], grad_out: &Tensor, factor: usize) -> Result<Tensor> {
    let (b, h, w, c) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (_, oh, ow, _) = grad_out.dims4()?;
    let scale = 1.0 / (factor * factor) as f64;
    let mut gx = vec![0.0; b * h * w * c];
    for bi in 0..b {
        for i in 0..oh {
            for j in 0..ow {
                let o = ((bi * oh + i) * ow + j) * c;
                for di in 0..factor {
                    for dj in 0..factor {
                        let s = ((bi * h + i * factor + di) * w + j * factor + dj) * c;
                        for ch in 0..c {
                            gx[s + ch] = grad_out.data[o + ch] * scale;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(x_shape.to_vec(), gx)
}

/// Crop the spatial axes to `(th, tw)`, removing `floor(d/2)` from the top/left
/// and the remainder from the bottom/right.
pub fn center_crop(x: &Tensor, th: usize, tw: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    if th > h || tw > w || th == 0 || tw == 0 {
        return Err(Error::shape("center_crop", format!("cannot crop {h}x{w} to {th}x{tw}")));
    }
    let (oi, oj) = (crop_offset(h, th), crop_offset(w, tw));
    let mut out = Vec::with_capacity(b * th * tw * c);
    for bi in 0..b {
        for i in 0..th {
            let s = ((bi * h + i + oi) * w + oj) * c;
            out.extend_from_slice(&x.data[s..s + tw * c]);
        }
    }
    Tensor::new(vec![b, th, tw, c], out)
}

pub fn center_crop_backward(x_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (_, th, tw, _) = grad_out.dims4()?;
    let (oi, oj) = (crop_offset(h, th), crop_offset(w, tw));
    let mut gx = vec![0.0; b * h * w * c];
    for bi in 0..b {
        for i in 0..th {
            let d = ((bi * h + i + oi) * w + oj) * c;
            let s = ((bi * th + i) * tw) * c;
            gx[d..d + tw * c].copy_from_slice(&grad_out.data[s..s + tw * c]);
        }
    }
    Tensor::new(x_shape.to_vec(), gx)
}

pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
    let (b, h, w, _) = first.dims4()?;
    let mut total = 0;
    for p in parts {
        let (pb, ph, pw, pc) = p.dims4()?;
        if (pb, ph, pw) != (b, h, w) {
            return Err(Error::shape(
                "concat",
                format!("spatial mismatch {:?} vs {:?}", first.shape, p.shape),
            ));
        }
        total += pc;
    }
    let mut out = Vec::with_capacity(b * h * w * total);
    for px in 0..b * h * w {
        for p in parts {
            let c = p.shape[3];
            out.extend_from_slice(&p.data[px * c..(px + 1) * c]);
        }
    }
    Tensor::new(vec![b, h, w, total], out)
}

pub fn concat_channels_backward(shapes: &[&[usize]], grad_out: &Tensor) -> Result<Vec<Tensor>> {
    let (b, h, w, total) = grad_out.dims4()?;
    let mut outs: Vec<Vec<f64>> = shapes.iter().map(|s| Vec::with_capacity(s.iter().product())).collect();
    for px in 0..b * h * w {
        let mut off = px * total;
        for (s, o) in shapes.iter().zip(outs.iter_mut()) {
            let c = s[3];
            o.extend_from_slice(&grad_out.data[off..off + c]);
            off += c;
        }
    }
    shapes
        .iter()
        .zip(outs)
        .map(|(s, d)| Tensor::new(s.to_vec(), d))
        .collect()
}

/// Mean squared error over the central `(ch, cw)` window of both tensors.
pub fn mse_cropped(pred: &Tensor, truth: &Tensor, ch: usize, cw: usize) -> Result<f64> {
    let (pb, _, _, pc) = pred.dims4()?;
    let (tb, _, _, tc) = truth.dims4()?;
    if pb != tb || pc != tc {
        return Err(Error::shape(
            "mse_cropped",
            format!("pred {:?} vs truth {:?}", pred.shape, truth.shape),
        ));
    }
    let p = center_crop(pred, ch, cw)?;
    let t = center_crop(truth, ch, cw)?;
    let sum: f64 = p.data.iter().zip(&t.data).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / p.data.len() as f64)
}

/// Gradients of [`mse_cropped`] with respect to `pred` and `truth`, scaled by `upstream`.
pub fn mse_cropped_backward(
    pred: &Tensor,
    truth: &Tensor,
    ch: usize,
    cw: usize,
    upstream: f64,
) -> Result<(Tensor, Tensor)> {
    let p = center_crop(pred, ch, cw)?;
    let t = center_crop(truth, ch, cw)?;
    let scale = 2.0 * upstream / p.data.len() as f64;
    let diff: Vec<f64> = p.data.iter().zip(&t.data).map(|(a, b)| scale * (a - b)).collect();
    let gp = Tensor::new(p.shape.clone(), diff.clone())?;
    let gt = Tensor::new(p.shape.clone(), diff.into_iter().map(|v| -v).collect())?;
    Ok((center_crop_backward(&pred.shape, &gp)?, center_crop_backward(&truth.shape, &gt)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct quadruple loop, independent of the optimized kernel's slicing.
    fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, s: usize) -> Tensor {
        let (bn, h, wd, cin) = x.dims4().unwrap();
        let (k, cout) = (w.shape()[0], w.shape()[3]);
        let oh = (h - k) / s + 1;
        let ow = (wd - k) / s + 1;
        let mut out = Tensor::zeros(&[bn, oh, ow, cout]);
        for n in 0..bn {
            for i in 0..oh {
                for j in 0..ow {
                    for co in 0..cout {
                        let mut acc = b.data()[co];
                        for di in 0..k {
                            for dj in 0..k {
                                for ci in 0..cin {
                                    let xv = x.at4(n, i * s + di, j * s + dj, ci);
                                    let wv = w.data()[((di * k + dj) * cin + ci) * cout + co];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out.data_mut()[((n * oh + i) * ow + j) * cout + co] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn output_extent_arithmetic() {
        assert_eq!(conv_output_extent("l", 256, 2, 2).unwrap(), 128);
        assert_eq!(conv_output_extent("l", 57, 2, 2).unwrap(), 28);
        assert_eq!(conv_output_extent("l", 5, 3, 1).unwrap(), 3);
        match conv_output_extent("enc0", 2, 3, 1) {
            Err(Error::NegativeExtent { layer, .. }) => assert_eq!(layer, "enc0"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn conv_of_ones_sums_window() {
        let x = Tensor::full(&[1, 3, 3, 1], 1.0);
        let w = Tensor::full(&[3, 3, 1, 1], 1.0);
        let y = conv2d_valid(&x, &w, Some(&Tensor::zeros(&[1])), 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn unit_kernel_is_identity() {
        let x = random(&[2, 4, 5, 1], 3);
        let w = Tensor::full(&[1, 1, 1, 1], 1.0);
        let y = conv2d_valid(&x, &w, None, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_matches_loop_oracle() {
        for (seed, (h, k, s, cin, cout)) in
            [(8, 3, 2, 2, 3), (8, 3, 1, 2, 4), (9, 2, 2, 3, 5), (7, 1, 1, 4, 2)].into_iter().enumerate()
        {
            let x = random(&[2, h, h, cin], seed as u64);
            let w = random(&[k, k, cin, cout], 100 + seed as u64);
            let b = random(&[cout], 200 + seed as u64);
            let got = conv2d_valid(&x, &w, Some(&b), s).unwrap();
            let want = conv_oracle(&x, &w, &b, s);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) <= 1e-12);
        }
        let x = random(&[1, 8, 8, 2], 9);
        let w = random(&[3, 3, 2, 4], 10);
        assert_eq!(conv2d_valid(&x, &w, None, 2).unwrap().shape(), &[1, 3, 3, 4]);
    }

    #[test]
    fn conv_rejects_mismatched_weights() {
        let x = Tensor::zeros(&[1, 4, 4, 2]);
        let w = Tensor::zeros(&[3, 3, 3, 1]);
        assert!(conv2d_valid(&x, &w, None, 1).is_err());
    }

    #[test]
    fn upsample_replicates_blocks() {
        let x = Tensor::new(vec![1, 1, 1, 1], vec![5.0]).unwrap();
        let y = upsample_nearest(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 1]);
        assert!(y.data().iter().all(|&v| v == 5.0));

        let x = Tensor::new(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = upsample_nearest(&x, 2).unwrap();
        #[rustfmt::skip]
        let want = [1., 1., 2., 2.,
                    1., 1., 2., 2.,
                    3., 3., 4., 4.,
                    3., 3., 4., 4.];
        assert_eq!(y.data(), &want);
        let z = upsample_nearest(&random(&[2, 3, 4, 2], 1), 4).unwrap();
        assert_eq!(z.shape(), &[2, 12, 16, 2]);
    }

    #[test]
    fn avgpool_inverts_upsample() {
        let x = random(&[2, 3, 5, 3], 4);
        let y = avgpool(&upsample_nearest(&x, 2).unwrap(), 2).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-15);
        assert!(avgpool(&Tensor::zeros(&[1, 5, 4, 1]), 2).is_err());
    }

    #[test]
    fn crop_offsets_follow_floor_ceil_rule() {
        let x = Tensor::from_fn(&[1, 28, 28, 1], |i| i as f64);
        let y = center_crop(&x, 24, 24).unwrap();
        assert_eq!(y.at4(0, 0, 0, 0), x.at4(0, 2, 2, 0));
        assert_eq!(y.at4(0, 23, 23, 0), x.at4(0, 25, 25, 0));

        assert_eq!(center_crop(&x, 28, 28).unwrap(), x);

        let x = Tensor::from_fn(&[1, 5, 5, 1], |i| i as f64);
        let y = center_crop(&x, 4, 4).unwrap();
        // 0 rows removed on top, 1 on the bottom.
        assert_eq!(y.at4(0, 0, 0, 0), x.at4(0, 0, 0, 0));
        assert_eq!(y.at4(0, 3, 3, 0), x.at4(0, 3, 3, 0));

        assert!(center_crop(&x, 6, 4).is_err());
    }

    #[test]
    fn mse_cases() {
        let p = random(&[2, 6, 6, 3], 5);
        assert_eq!(mse_cropped(&p, &p, 4, 4).unwrap(), 0.0);
        let d = 0.75;
        let t = Tensor::from_fn(p.shape(), |i| p.data()[i] + d);
        assert!((mse_cropped(&p, &t, 4, 4).unwrap() - d * d).abs() < 1e-12);

        let p = random(&[1, 6, 6, 1], 6);
        let z = Tensor::zeros(&[1, 6, 6, 1]);
        let mut acc = 0.0;
        for i in 1..5 {
            for j in 1..5 {
                acc += p.at4(0, i, j, 0).powi(2);
            }
        }
        assert!((mse_cropped(&p, &z, 4, 4).unwrap() - acc / 16.0).abs() < 1e-14);
        assert!(mse_cropped(&p, &Tensor::zeros(&[1, 6, 6, 2]), 4, 4).is_err());
    }

    #[test]
    fn concat_interleaves_channels() {
        let a = Tensor::from_fn(&[1, 2, 2, 1], |i| i as f64);
        let b = Tensor::from_fn(&[1, 2, 2, 2], |i| 10.0 + i as f64);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(&c.data()[..6], &[0.0, 10.0, 11.0, 1.0, 12.0, 13.0]);
        let back = concat_channels_backward(&[a.shape(), b.shape()], &c).unwrap();
        assert_eq!(back[0], a);
        assert_eq!(back[1], b);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
        assert!(Tensor::new(vec![1, 1, 1, 1, 1], vec![1.0]).is_err());
    }
}
