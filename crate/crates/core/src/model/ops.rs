//! Hand-written CPU kernels for the hot operations of the networks.
//!
//! Stride-1 "same" convolution is patch extraction followed by one matrix
//! product, fused into a single graph node so the patch matrix never gets a
//! gradient buffer of its own. Patch extraction (`Im2Col`) and its adjoint
//! scatter-add (`Col2Im`) differentiate into each other, as do nearest-neighbour ×2
//! upsampling and 2×2 sum pooling. Leaky ReLU and the logistic function are
//! fused elementwise kernels.

use std::sync::Mutex;

use candle_core::{CpuStorage, CustomOp1, CustomOp3, Device, Layout, Shape, Tensor, WithDType};

trait Real: WithDType + Default {
    fn of(v: f64) -> Self;
    fn tanh(self) -> Self;
}

impl Real for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn tanh(self) -> Self {
        f32::tanh(self)
    }
}

impl Real for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

/// Runs a generic kernel on the contiguous f32 or f64 data of `storage`.
macro_rules! dispatch {
    ($storage:expr, $layout:expr, $name:expr, |$v:ident| $body:expr) => {
        match $storage {
            CpuStorage::F32(data) => {
                let $v = contiguous(data, $layout, $name)?;
                CpuStorage::F32($body)
            }
            CpuStorage::F64(data) => {
                let $v = contiguous(data, $layout, $name)?;
                CpuStorage::F64($body)
            }
            _ => candle_core::bail!("{} supports f32 and f64", $name),
        }
    };
}

/// `[B, C, H, W]` → `[B, C·k·k, H·W]`, zero padding `k / 2`.
#[derive(Debug, Clone, Copy)]
struct Im2Col {
    kernel: usize,
}

/// Adjoint of `Im2Col` for images of shape `[·, channels, height, width]`.
#[derive(Debug, Clone, Copy)]
struct Col2Im {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
}

/// Calls `f(col_offset, src_offset, len)` for every contiguous run that
/// patch extraction copies within one image.
#[inline]
fn for_each_run(c: usize, h: usize, w: usize, k: usize, mut f: impl FnMut(usize, usize, usize)) {
    let p = k / 2;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * h * w;
                // output x range whose source column x + kx − p is in bounds
                let x0 = p.saturating_sub(kx);
                let x1 = (w + p).saturating_sub(kx).min(w);
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y + ky;
                    if sy < p || sy - p >= h {
                        continue;
                    }
                    let src = (ch * h + sy - p) * w + x0 + kx - p;
                    f(row + y * w + x0, src, x1 - x0);
                }
            }
        }
    }
}

fn im2col<T: Real>(src: &[T], b: usize, c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let p = k / 2;
    let zero = T::default();
    let mut out = Vec::with_capacity(b * c * k * k * h * w);
    for img in src.chunks_exact(c * h * w).take(b) {
        for plane in img.chunks_exact(h * w) {
            for ky in 0..k {
                for kx in 0..k {
                    let x0 = p.saturating_sub(kx).min(w);
                    let x1 = (w + p).saturating_sub(kx).min(w).max(x0);
                    for y in 0..h {
                        let sy = y + ky;
                        if sy < p || sy - p >= h || x0 == x1 {
                            out.resize(out.len() + w, zero);
                            continue;
                        }
                        let row = &plane[(sy - p) * w..(sy - p + 1) * w];
                        out.resize(out.len() + x0, zero);
                        out.extend_from_slice(&row[x0 + kx - p..x1 + kx - p]);
                        out.resize(out.len() + w - x1, zero);
                    }
                }
            }
        }
    }
    out
}

fn col2im<T: Real>(src: &[T], b: usize, c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let img = c * h * w;
    let cols = h * w * c * k * k;
    let mut out = vec![T::default(); b * img];
    for n in 0..b {
        let s = &src[n * cols..(n + 1) * cols];
        let o = &mut out[n * img..(n + 1) * img];
        for_each_run(c, h, w, k, |ci, oi, len| {
            for (d, v) in o[oi..oi + len].iter_mut().zip(&s[ci..ci + len]) {
                *d += *v;
            }
        });
    }
    out
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout, op: &str) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("{op} requires a contiguous input"),
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = layout.shape().dims4()?;
        let k = self.kernel;
        let shape = Shape::from((b, c * k * k, h * w));
        let out = dispatch!(storage, layout, "im2col", |v| im2col(v, b, c, h, w, k));
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (_, c, h, w) = arg.dims4()?;
        let op = Col2Im {
            channels: c,
            height: h,
            width: w,
            kernel: self.kernel,
        };
        Ok(Some(grad_res.contiguous()?.apply_op1(op)?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, _, _) = layout.shape().dims3()?;
        let Col2Im {
            channels: c,
            height: h,
            width: w,
            kernel: k,
        } = *self;
        let shape = Shape::from((b, c, h, w));
        let out = dispatch!(storage, layout, "col2im", |v| col2im(v, b, c, h, w, k));
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(Im2Col { kernel: self.kernel })?))
    }
}

/// `conv2d_same` as one op over (input, weight, bias). The patch matrix of
/// the forward pass is kept for the backward pass.
#[derive(Debug)]
struct Conv2dSame {
    cols: Mutex<Option<Tensor>>,
}

fn conv_fwd<T: Real>(
    x: &[T],
    (b, c, h, w): (usize, usize, usize, usize),
    weight: &[T],
    bias: &[T],
    (o, k): (usize, usize),
) -> candle_core::Result<(Vec<T>, Tensor)> {
    let dev = Device::Cpu;
    let cols = Tensor::from_vec(im2col(x, b, c, h, w, k), (b, c * k * k, h * w), &dev)?;
    let wm = Tensor::from_slice(weight, (o, c * k * k), &dev)?;
    let bias = Tensor::from_slice(bias, (o, 1), &dev)?;
    let y = wm.broadcast_matmul(&cols)?.broadcast_add(&bias)?;
    Ok((y.flatten_all()?.to_vec1()?, cols))
}

impl CustomOp3 for Conv2dSame {
    fn name(&self) -> &'static str {
        "conv2d-same"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = l1.shape().dims4()?;
        let (o, _, k, _) = l2.shape().dims4()?;
        let (out, cols) = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(wt), CpuStorage::F32(bs)) => {
                let x = contiguous(x, l1, "conv2d-same")?;
                let (wt, bs) = (contiguous(wt, l2, "conv2d-same")?, contiguous(bs, l3, "conv2d-same")?);
                let (y, cols) = conv_fwd(x, dims, wt, bs, (o, k))?;
                (CpuStorage::F32(y), cols)
            }
            (CpuStorage::F64(x), CpuStorage::F64(wt), CpuStorage::F64(bs)) => {
                let x = contiguous(x, l1, "conv2d-same")?;
                let (wt, bs) = (contiguous(wt, l2, "conv2d-same")?, contiguous(bs, l3, "conv2d-same")?);
                let (y, cols) = conv_fwd(x, dims, wt, bs, (o, k))?;
                (CpuStorage::F64(y), cols)
            }
            _ => candle_core::bail!("conv2d-same needs matching f32 or f64 operands"),
        };
        *self.cols.lock().expect("conv cache poisoned") = Some(cols);
        let (b, _, h, w) = dims;
        Ok((out, Shape::from((b, o, h, w))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        weight: &Tensor,
        _bias: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (b, c, h, w) = x.dims4()?;
        let (o, _, k, _) = weight.dims4()?;
        let cached = self.cols.lock().expect("conv cache poisoned").clone();
        let cols = match cached {
            Some(cols) => cols,
            None => x.detach().contiguous()?.apply_op1_no_bwd(&Im2Col { kernel: k })?,
        };
        let g = grad_res.detach().contiguous()?.reshape((b, o, h * w))?;
        let grad_w = g.matmul(&cols.t()?)?.sum(0)?.reshape(weight.shape())?;
        let grad_b = g.sum(2)?.sum(0)?;
        let wm = weight.detach().reshape((o, c * k * k))?;
        let col2im = Col2Im {
            channels: c,
            height: h,
            width: w,
            kernel: k,
        };
        let grad_x = wm.t()?.broadcast_matmul(&g)?.apply_op1_no_bwd(&col2im)?;
        Ok((Some(grad_x), Some(grad_w), Some(grad_b)))
    }
}

/// `max(x, slope·x)`.
#[derive(Debug, Clone, Copy)]
struct LeakyRelu {
    slope: f64,
}

/// Derivative of `LeakyRelu` at `x`: 1 for x > 0, else the slope.
#[derive(Debug, Clone, Copy)]
struct LeakySlope {
    slope: f64,
}

impl CustomOp1 for LeakyRelu {
    fn name(&self) -> &'static str {
        "leaky-relu"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        fn run<T: Real>(v: &[T], slope: f64) -> Vec<T> {
            let s = T::of(slope);
            v.iter().map(|&x| if x > T::default() { x } else { s * x }).collect()
        }
        Ok((dispatch!(storage, layout, "leaky-relu", |v| run(v, self.slope)), layout.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let slope = arg.contiguous()?.apply_op1_no_bwd(&LeakySlope { slope: self.slope })?;
        Ok(Some(grad_res.mul(&slope)?))
    }
}

impl CustomOp1 for LeakySlope {
    fn name(&self) -> &'static str {
        "leaky-slope"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        fn run<T: Real>(v: &[T], slope: f64) -> Vec<T> {
            let (one, s) = (T::of(1.0), T::of(slope));
            v.iter().map(|&x| if x > T::default() { one } else { s }).collect()
        }
        Ok((dispatch!(storage, layout, "leaky-slope", |v| run(v, self.slope)), layout.shape().clone()))
    }
}

/// Logistic function as ½(tanh(x/2) + 1); derivative σ(1 − σ).
#[derive(Debug, Clone, Copy)]
struct Logistic;

impl CustomOp1 for Logistic {
    fn name(&self) -> &'static str {
        "logistic"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        fn run<T: Real>(v: &[T]) -> Vec<T> {
            let half = T::of(0.5);
            v.iter().map(|&x| half * ((half * x).tanh() + T::of(1.0))).collect()
        }
        Ok((dispatch!(storage, layout, "logistic", |v| run(v)), layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let d = res.mul(&res.affine(-1.0, 1.0)?)?;
        Ok(Some(grad_res.mul(&d)?))
    }
}

/// Nearest-neighbour ×2 upsampling of `[B, C, H, W]`.
#[derive(Debug, Clone, Copy)]
struct Upsample2;

/// 2×2 block sums of `[B, C, 2H, 2W]`; adjoint of `Upsample2`.
#[derive(Debug, Clone, Copy)]
struct SumPool2;

impl CustomOp1 for Upsample2 {
    fn name(&self) -> &'static str {
        "upsample2"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = layout.shape().dims4()?;
        fn run<T: Real>(v: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
            let mut out = vec![T::default(); planes * 4 * h * w];
            for p in 0..planes {
                for y in 0..2 * h {
                    let src = &v[(p * h + y / 2) * w..(p * h + y / 2 + 1) * w];
                    let dst = &mut out[(p * 2 * h + y) * 2 * w..(p * 2 * h + y + 1) * 2 * w];
                    for (x, d) in dst.iter_mut().enumerate() {
                        *d = src[x / 2];
                    }
                }
            }
            out
        }
        let out = dispatch!(storage, layout, "upsample2", |v| run(v, b * c, h, w));
        Ok((out, Shape::from((b, c, 2 * h, 2 * w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(SumPool2)?))
    }
}

impl CustomOp1 for SumPool2 {
    fn name(&self) -> &'static str {
        "sum-pool2"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h2, w2) = layout.shape().dims4()?;
        if h2 % 2 != 0 || w2 % 2 != 0 {
            candle_core::bail!("sum-pool2 needs even spatial dims, got {h2}x{w2}");
        }
        let (h, w) = (h2 / 2, w2 / 2);
        fn run<T: Real>(v: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
            let mut out = vec![T::default(); planes * h * w];
            for p in 0..planes {
                for y in 0..2 * h {
                    let src = &v[(p * 2 * h + y) * 2 * w..(p * 2 * h + y + 1) * 2 * w];
                    let dst = &mut out[(p * h + y / 2) * w..(p * h + y / 2 + 1) * w];
                    for (x, s) in src.iter().enumerate() {
                        dst[x / 2] += *s;
                    }
                }
            }
            out
        }
        let out = dispatch!(storage, layout, "sum-pool2", |v| run(v, b * c, h, w));
        Ok((out, Shape::from((b, c, h, w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(Upsample2)?))
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(LeakyRelu { slope })
}

pub fn logistic(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Logistic)
}

pub fn upsample2(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Upsample2)
}

/// 2×2 average pooling.
pub fn avg_pool2(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(SumPool2)?.affine(0.25, 0.0)
}

/// Stride-1 convolution with zero padding `k / 2` (odd `k` keeps the size).
/// `x` is `[B, C, H, W]`, `weight` `[O, C, k, k]`, `bias` `[O]`.
pub fn conv2d_same(x: &Tensor, weight: &Tensor, bias: &Tensor) -> candle_core::Result<Tensor> {
    let (_, c, _, _) = x.dims4()?;
    let (o, wc, k, k2) = weight.dims4()?;
    if wc != c || k != k2 {
        candle_core::bail!("conv weight {:?} does not fit input {:?}", weight.dims(), x.dims());
    }
    if bias.dims() != [o] {
        candle_core::bail!("conv bias {:?} does not fit {o} output channels", bias.dims());
    }
    let op = Conv2dSame { cols: Mutex::new(None) };
    x.contiguous()?.apply_op3(&weight.contiguous()?, &bias.contiguous()?, op)
}
