//! Convolutional and resampling kernels on plain tensors.
//!
//! Forward functions are public; the matching adjoints are crate-private and
//! consumed by the gradient tape.

use crate::error::{invalid, shape_err, Result};
use crate::gemm::{gemm, transpose};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Geometry of a 2-D convolution.
///
/// Weight layouts: regular `[out, in, kh, kw]`, depthwise `[channels, 1, kh, kw]`,
/// transposed (deconvolution) `[in, out, kh, kw]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub depthwise: bool,
}

impl ConvSpec {
    /// Square odd kernel with "same" padding and stride 1.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride: 1,
            padding: kernel / 2,
            depthwise: false,
        }
    }

    pub fn depthwise(channels: usize, kernel: usize) -> Self {
        ConvSpec {
            depthwise: true,
            ..ConvSpec::same(channels, channels, kernel)
        }
    }

    /// 4×4 transposed convolution with stride 2 and padding 1: exactly doubles H and W.
    pub fn deconv(in_channels: usize, out_channels: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel_h: 4,
            kernel_w: 4,
            stride: 2,
            padding: 1,
            depthwise: false,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        if self.depthwise {
            [self.in_channels, 1, self.kernel_h, self.kernel_w]
        } else {
            [self.out_channels, self.in_channels, self.kernel_h, self.kernel_w]
        }
    }

    pub fn deconv_weight_dims(&self) -> [usize; 4] {
        [self.in_channels, self.out_channels, self.kernel_h, self.kernel_w]
    }

    /// Number of inputs feeding one output value.
    pub fn fan_in(&self) -> usize {
        let per_channel = self.kernel_h * self.kernel_w;
        if self.depthwise {
            per_channel
        } else {
            per_channel * self.in_channels
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < self.kernel_h || pw < self.kernel_w {
            return Err(shape_err!(
                "{h}x{w} input (padded {ph}x{pw}) is smaller than the {}x{} kernel",
                self.kernel_h,
                self.kernel_w
            ));
        }
        Ok((
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }

    pub fn deconv_output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let oh = (h - 1) * self.stride + self.kernel_h;
        let ow = (w - 1) * self.stride + self.kernel_w;
        if oh <= 2 * self.padding || ow <= 2 * self.padding {
            return Err(shape_err!("deconvolution output of {h}x{w} input is empty"));
        }
        Ok((oh - 2 * self.padding, ow - 2 * self.padding))
    }

    fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(invalid!("stride and kernel extents must be positive: {self:?}"));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(invalid!("channel counts must be positive: {self:?}"));
        }
        if self.depthwise && self.in_channels != self.out_channels {
            return Err(invalid!(
                "depthwise convolution needs equal in/out channels: {self:?}"
            ));
        }
        Ok(())
    }
}

fn check_weights<T: Scalar>(
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    expect: [usize; 4],
    out_channels: usize,
) -> Result<()> {
    if w.dims() != expect {
        return Err(shape_err!(
            "weight dims {:?} do not match expected {expect:?}",
            w.dims()
        ));
    }
    if let Some(b) = b {
        if b.dims() != [out_channels] {
            return Err(shape_err!(
                "bias dims {:?} do not match [{out_channels}]",
                b.dims()
            ));
        }
    }
    Ok(())
}

fn check_input_channels(spec: &ConvSpec, c: usize) -> Result<()> {
    if c != spec.in_channels {
        return Err(shape_err!(
            "input has {c} channels but the convolution expects {}",
            spec.in_channels
        ));
    }
    Ok(())
}

/// Valid output index range along one axis for kernel tap `k`.
#[inline]
fn tap_range(out: usize, inp: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // out index o reads input o*stride + k - pad, which must lie in [0, inp).
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if inp + pad > k {
        ((inp + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

#[derive(Clone, Copy)]
struct Grid {
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

fn im2col<T: Scalar>(x: &[T], g: Grid) -> Vec<T> {
    let plane = g.oh * g.ow;
    let mut cols = vec![T::zero(); g.c * g.kh * g.kw * plane];
    for ci in 0..g.c {
        let src = &x[ci * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.kh {
            let (oy0, oy1) = tap_range(g.oh, g.h, ky, g.stride, g.pad);
            for kx in 0..g.kw {
                let (ox0, ox1) = tap_range(g.ow, g.w, kx, g.stride, g.pad);
                let row = ((ci * g.kh + ky) * g.kw + kx) * plane;
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let dst = &mut cols[row + oy * g.ow..][..g.ow];
                    let srow = &src[iy * g.w..][..g.w];
                    if g.stride == 1 {
                        let ix0 = ox0 + kx - g.pad;
                        dst[ox0..ox1].copy_from_slice(&srow[ix0..ix0 + (ox1 - ox0)]);
                    } else {
                        for ox in ox0..ox1 {
                            dst[ox] = srow[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: Grid, x: &mut [T]) {
    let plane = g.oh * g.ow;
    for ci in 0..g.c {
        let dst = &mut x[ci * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.kh {
            let (oy0, oy1) = tap_range(g.oh, g.h, ky, g.stride, g.pad);
            for kx in 0..g.kw {
                let (ox0, ox1) = tap_range(g.ow, g.w, kx, g.stride, g.pad);
                let row = ((ci * g.kh + ky) * g.kw + kx) * plane;
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &cols[row + oy * g.ow..][..g.ow];
                    let drow = &mut dst[iy * g.w..][..g.w];
                    for ox in ox0..ox1 {
                        drow[ox * g.stride + kx - g.pad] += src[ox];
                    }
                }
            }
        }
    }
}

fn is_pointwise(spec: &ConvSpec) -> bool {
    spec.kernel_h == 1 && spec.kernel_w == 1 && spec.stride == 1 && spec.padding == 0
}

/// 2-D convolution (regular or depthwise) of an N,C,H,W tensor.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    spec.validate()?;
    let (n, c, h, wd) = x.nchw()?;
    check_input_channels(spec, c)?;
    check_weights(w, b, spec.weight_dims(), spec.out_channels)?;
    let (oh, ow) = spec.output_hw(h, wd)?;
    let co = spec.out_channels;
    let plane = oh * ow;
    let mut out = vec![T::zero(); n * co * plane];
    if let Some(b) = b {
        for (i, chunk) in out.chunks_exact_mut(plane).enumerate() {
            chunk.fill(b.data()[i % co]);
        }
    }
    let g = Grid {
        c,
        h,
        w: wd,
        kh: spec.kernel_h,
        kw: spec.kernel_w,
        stride: spec.stride,
        pad: spec.padding,
        oh,
        ow,
    };
    for bi in 0..n {
        let xs = &x.data()[bi * c * h * wd..][..c * h * wd];
        let os = &mut out[bi * co * plane..][..co * plane];
        if spec.depthwise {
            depthwise_forward(xs, w.data(), g, os);
        } else if is_pointwise(spec) {
            gemm(co, plane, c, w.data(), xs, os, true);
        } else {
            let cols = im2col(xs, g);
            gemm(co, plane, c * g.kh * g.kw, w.data(), &cols, os, true);
        }
    }
    let out = Tensor::new(vec![n, co, oh, ow], out)?;
    out.check_finite("conv2d")?;
    Ok(out)
}

fn depthwise_forward<T: Scalar>(x: &[T], w: &[T], g: Grid, out: &mut [T]) {
    let kk = g.kh * g.kw;
    for ch in 0..g.c {
        let src = &x[ch * g.h * g.w..][..g.h * g.w];
        let dst = &mut out[ch * g.oh * g.ow..][..g.oh * g.ow];
        for ky in 0..g.kh {
            let (oy0, oy1) = tap_range(g.oh, g.h, ky, g.stride, g.pad);
            for kx in 0..g.kw {
                let wv = w[ch * kk + ky * g.kw + kx];
                let (ox0, ox1) = tap_range(g.ow, g.w, kx, g.stride, g.pad);
                for oy in oy0..oy1 {
                    let srow = &src[(oy * g.stride + ky - g.pad) * g.w..][..g.w];
                    let drow = &mut dst[oy * g.ow..][..g.ow];
                    for ox in ox0..ox1 {
                        drow[ox] += wv * srow[ox * g.stride + kx - g.pad];
                    }
                }
            }
        }
    }
}

/// Gradients requested from a convolution adjoint.
pub(crate) struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec,
    dout: &Tensor<T>,
    want: [bool; 3],
) -> Result<ConvGrads<T>> {
    let (n, c, h, wd) = x.nchw()?;
    let (_, co, oh, ow) = dout.nchw()?;
    let plane = oh * ow;
    let g = Grid {
        c,
        h,
        w: wd,
        kh: spec.kernel_h,
        kw: spec.kernel_w,
        stride: spec.stride,
        pad: spec.padding,
        oh,
        ow,
    };
    let kdim = c * g.kh * g.kw;
    let mut dx = want[0].then(|| vec![T::zero(); x.numel()]);
    let mut dw = want[1].then(|| vec![T::zero(); w.numel()]);
    let wt = (want[0] && !spec.depthwise).then(|| transpose(w.data(), co, kdim));
    for bi in 0..n {
        let xs = &x.data()[bi * c * h * wd..][..c * h * wd];
        let ds = &dout.data()[bi * co * plane..][..co * plane];
        if spec.depthwise {
            depthwise_backward(
                xs,
                w.data(),
                ds,
                g,
                dx.as_mut().map(|d| &mut d[bi * c * h * wd..][..c * h * wd]),
                dw.as_deref_mut(),
            );
            continue;
        }
        let pointwise = is_pointwise(spec);
        if let (Some(dx), Some(wt)) = (dx.as_mut(), wt.as_ref()) {
            let dxs = &mut dx[bi * c * h * wd..][..c * h * wd];
            if pointwise {
                gemm(c, plane, co, wt, ds, dxs, true);
            } else {
                let mut dcols = vec![T::zero(); kdim * plane];
                gemm(kdim, plane, co, wt, ds, &mut dcols, false);
                col2im(&dcols, g, dxs);
            }
        }
        if let Some(dw) = dw.as_mut() {
            let colst = if pointwise {
                transpose(xs, c, plane)
            } else {
                transpose(&im2col(xs, g), kdim, plane)
            };
            gemm(co, kdim, plane, ds, &colst, dw, true);
        }
    }
    let db = want[2].then(|| bias_grad(dout, co, plane, n));
    Ok(ConvGrads {
        dx: dx.map(|d| Tensor::new(x.dims().to_vec(), d)).transpose()?,
        dw: dw.map(|d| Tensor::new(w.dims().to_vec(), d)).transpose()?,
        db,
    })
}

fn bias_grad<T: Scalar>(dout: &Tensor<T>, co: usize, plane: usize, n: usize) -> Tensor<T> {
    let mut db = vec![T::zero(); co];
    for bi in 0..n {
        for (o, slot) in db.iter_mut().enumerate() {
            let s: T = dout.data()[(bi * co + o) * plane..][..plane]
                .iter()
                .copied()
                .sum();
            *slot += s;
        }
    }
    Tensor::new(vec![co], db).expect("bias dims")
}

fn depthwise_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dout: &[T],
    g: Grid,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let kk = g.kh * g.kw;
    for ch in 0..g.c {
        let src = &x[ch * g.h * g.w..][..g.h * g.w];
        let dsrc = &dout[ch * g.oh * g.ow..][..g.oh * g.ow];
        for ky in 0..g.kh {
            let (oy0, oy1) = tap_range(g.oh, g.h, ky, g.stride, g.pad);
            for kx in 0..g.kw {
                let widx = ch * kk + ky * g.kw + kx;
                let wv = w[widx];
                let (ox0, ox1) = tap_range(g.ow, g.w, kx, g.stride, g.pad);
                let mut acc = T::zero();
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let drow = &dsrc[oy * g.ow..][..g.ow];
                    for ox in ox0..ox1 {
                        let ix = ox * g.stride + kx - g.pad;
                        acc += drow[ox] * src[iy * g.w + ix];
                        if let Some(dx) = dx.as_deref_mut() {
                            dx[ch * g.h * g.w + iy * g.w + ix] += wv * drow[ox];
                        }
                    }
                }
                if let Some(dw) = dw.as_deref_mut() {
                    dw[widx] += acc;
                }
            }
        }
    }
}

/// Transposed convolution (weights `[in, out, kh, kw]`).
pub fn deconv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    spec.validate()?;
    if spec.depthwise {
        return Err(invalid!("depthwise transposed convolution is not supported"));
    }
    let (n, c, h, wd) = x.nchw()?;
    check_input_channels(spec, c)?;
    check_weights(w, b, spec.deconv_weight_dims(), spec.out_channels)?;
    let (oh, ow) = spec.deconv_output_hw(h, wd)?;
    let co = spec.out_channels;
    let kk = spec.kernel_h * spec.kernel_w;
    let g = Grid {
        c: co,
        h: oh,
        w: ow,
        kh: spec.kernel_h,
        kw: spec.kernel_w,
        stride: spec.stride,
        pad: spec.padding,
        oh: h,
        ow: wd,
    };
    let wt = transpose(w.data(), c, co * kk);
    let mut out = vec![T::zero(); n * co * oh * ow];
    let mut cols = vec![T::zero(); co * kk * h * wd];
    for bi in 0..n {
        let xs = &x.data()[bi * c * h * wd..][..c * h * wd];
        gemm(co * kk, h * wd, c, &wt, xs, &mut cols, false);
        col2im(&cols, g, &mut out[bi * co * oh * ow..][..co * oh * ow]);
    }
    if let Some(b) = b {
        for (i, chunk) in out.chunks_exact_mut(oh * ow).enumerate() {
            let bv = b.data()[i % co];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
    let out = Tensor::new(vec![n, co, oh, ow], out)?;
    out.check_finite("deconv2d")?;
    Ok(out)
}

pub(crate) fn deconv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec,
    dout: &Tensor<T>,
    want: [bool; 3],
) -> Result<ConvGrads<T>> {
    let (n, c, h, wd) = x.nchw()?;
    let (_, co, oh, ow) = dout.nchw()?;
    let kk = spec.kernel_h * spec.kernel_w;
    let g = Grid {
        c: co,
        h: oh,
        w: ow,
        kh: spec.kernel_h,
        kw: spec.kernel_w,
        stride: spec.stride,
        pad: spec.padding,
        oh: h,
        ow: wd,
    };
    let mut dx = want[0].then(|| vec![T::zero(); x.numel()]);
    let mut dw = want[1].then(|| vec![T::zero(); w.numel()]);
    for bi in 0..n {
        let ds = &dout.data()[bi * co * oh * ow..][..co * oh * ow];
        let dcols = im2col(ds, g);
        if let Some(dx) = dx.as_mut() {
            gemm(
                c,
                h * wd,
                co * kk,
                w.data(),
                &dcols,
                &mut dx[bi * c * h * wd..][..c * h * wd],
                false,
            );
        }
        if let Some(dw) = dw.as_mut() {
            let xs = &x.data()[bi * c * h * wd..][..c * h * wd];
            let dcols_t = transpose(&dcols, co * kk, h * wd);
            gemm(c, co * kk, h * wd, xs, &dcols_t, dw, true);
        }
    }
    let db = want[2].then(|| bias_grad(dout, co, oh * ow, n));
    Ok(ConvGrads {
        dx: dx.map(|d| Tensor::new(x.dims().to_vec(), d)).transpose()?,
        dw: dw.map(|d| Tensor::new(w.dims().to_vec(), d)).transpose()?,
        db,
    })
}

/// 2×2 average pooling with stride 2 (odd trailing rows/columns are dropped).
pub fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.nchw()?;
    if h < 2 || w < 2 {
        return Err(shape_err!("average pooling needs at least 2x2, got {h}x{w}"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks_exact(h * w) {
        for oy in 0..oh {
            let r0 = &plane[2 * oy * w..][..w];
            let r1 = &plane[(2 * oy + 1) * w..][..w];
            for ox in 0..ow {
                out.push((r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]) * quarter);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub(crate) fn avg_pool2_backward<T: Scalar>(
    in_dims: &[usize],
    dout: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (h, w) = (in_dims[2], in_dims[3]);
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut dx = Tensor::zeros(in_dims.to_vec());
    for (plane, dplane) in dx
        .data_mut()
        .chunks_exact_mut(h * w)
        .zip(dout.data().chunks_exact(oh * ow))
    {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dplane[oy * ow + ox] * quarter;
                plane[2 * oy * w + 2 * ox] += g;
                plane[2 * oy * w + 2 * ox + 1] += g;
                plane[(2 * oy + 1) * w + 2 * ox] += g;
                plane[(2 * oy + 1) * w + 2 * ox + 1] += g;
            }
        }
    }
    Ok(dx)
}

/// Source taps for one output coordinate under the half-pixel convention.
#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    i0: usize,
    i1: usize,
    frac: T,
}

fn resize_taps<T: Scalar>(inp: usize, out: usize) -> Vec<Tap<T>> {
    let scale = inp as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(inp - 1);
            let i1 = (i0 + 1).min(inp - 1);
            Tap {
                i0,
                i1,
                frac: T::of(src - i0 as f64),
            }
        })
        .collect()
}

/// Bilinear resize with half-pixel centers (align-corners = false).
pub fn bilinear_resize<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.nchw()?;
    if out_h == 0 || out_w == 0 {
        return Err(invalid!("resize target must be at least 1x1"));
    }
    let ty = resize_taps::<T>(h, out_h);
    let tx = resize_taps::<T>(w, out_w);
    let one = T::one();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in x.data().chunks_exact(h * w) {
        for t in &ty {
            let r0 = &plane[t.i0 * w..][..w];
            let r1 = &plane[t.i1 * w..][..w];
            for s in &tx {
                let top = r0[s.i0] * (one - s.frac) + r0[s.i1] * s.frac;
                let bot = r1[s.i0] * (one - s.frac) + r1[s.i1] * s.frac;
                out.push(top * (one - t.frac) + bot * t.frac);
            }
        }
    }
    Tensor::new(vec![n, c, out_h, out_w], out)
}

pub(crate) fn bilinear_resize_backward<T: Scalar>(
    in_dims: &[usize],
    dout: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (h, w) = (in_dims[2], in_dims[3]);
    let (_, _, oh, ow) = dout.nchw()?;
    let ty = resize_taps::<T>(h, oh);
    let tx = resize_taps::<T>(w, ow);
    let one = T::one();
    let mut dx = Tensor::zeros(in_dims.to_vec());
    for (plane, dplane) in dx
        .data_mut()
        .chunks_exact_mut(h * w)
        .zip(dout.data().chunks_exact(oh * ow))
    {
        for (oy, t) in ty.iter().enumerate() {
            for (ox, s) in tx.iter().enumerate() {
                let g = dplane[oy * ow + ox];
                let gt = g * (one - t.frac);
                let gb = g * t.frac;
                plane[t.i0 * w + s.i0] += gt * (one - s.frac);
                plane[t.i0 * w + s.i1] += gt * s.frac;
                plane[t.i1 * w + s.i0] += gb * (one - s.frac);
                plane[t.i1 * w + s.i1] += gb * s.frac;
            }
        }
    }
    Ok(dx)
}

/// Clamp-to-edge bilinear sample location.
#[derive(Clone, Copy)]
struct Sample<T> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    ax: T,
    ay: T,
    inside_x: bool,
    inside_y: bool,
}

#[inline]
fn sample_at<T: Scalar>(x: T, y: T, w: usize, h: usize) -> Sample<T> {
    let wmax = T::of((w - 1) as f64);
    let hmax = T::of((h - 1) as f64);
    let inside_x = x >= T::zero() && x <= wmax;
    let inside_y = y >= T::zero() && y <= hmax;
    let sx = x.max(T::zero()).min(wmax);
    let sy = y.max(T::zero()).min(hmax);
    let x0 = sx.floor().to_usize().unwrap_or(0).min(w - 1);
    let y0 = sy.floor().to_usize().unwrap_or(0).min(h - 1);
    Sample {
        x0,
        x1: (x0 + 1).min(w - 1),
        y0,
        y1: (y0 + 1).min(h - 1),
        ax: sx - T::of(x0 as f64),
        ay: sy - T::of(y0 as f64),
        inside_x,
        inside_y,
    }
}

fn check_warp_dims<T: Scalar>(img: &Tensor<T>, flow: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = img.nchw()?;
    let (fn_, fc, fh, fw) = flow.nchw()?;
    if fc != 2 || (fn_, fh, fw) != (n, h, w) {
        return Err(shape_err!(
            "flow dims {:?} do not match image dims {:?}",
            flow.dims(),
            img.dims()
        ));
    }
    Ok((n, c, h, w))
}

/// Backward warp: `out(p) = img(p + flow(p))`, bilinear with clamp-to-edge.
/// Flow channel 0 is the horizontal displacement, channel 1 the vertical.
pub fn warp<T: Scalar>(img: &Tensor<T>, flow: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = check_warp_dims(img, flow)?;
    let one = T::one();
    let plane = h * w;
    let mut out = vec![T::zero(); img.numel()];
    for b in 0..n {
        let fu = &flow.data()[(b * 2) * plane..][..plane];
        let fv = &flow.data()[(b * 2 + 1) * plane..][..plane];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let s = sample_at(T::of(x as f64) + fu[p], T::of(y as f64) + fv[p], w, h);
                for ch in 0..c {
                    let src = &img.data()[(b * c + ch) * plane..][..plane];
                    let top = src[s.y0 * w + s.x0] * (one - s.ax) + src[s.y0 * w + s.x1] * s.ax;
                    let bot = src[s.y1 * w + s.x0] * (one - s.ax) + src[s.y1 * w + s.x1] * s.ax;
                    out[(b * c + ch) * plane + p] = top * (one - s.ay) + bot * s.ay;
                }
            }
        }
    }
    let out = Tensor::new(img.dims().to_vec(), out)?;
    out.check_finite("warp")?;
    Ok(out)
}

pub(crate) fn warp_backward<T: Scalar>(
    img: &Tensor<T>,
    flow: &Tensor<T>,
    dout: &Tensor<T>,
    want: [bool; 2],
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let (n, c, h, w) = check_warp_dims(img, flow)?;
    let one = T::one();
    let plane = h * w;
    let mut dimg = want[0].then(|| Tensor::zeros(img.dims().to_vec()));
    let mut dflow = want[1].then(|| Tensor::zeros(flow.dims().to_vec()));
    for b in 0..n {
        let fu = &flow.data()[(b * 2) * plane..][..plane];
        let fv = &flow.data()[(b * 2 + 1) * plane..][..plane];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let s = sample_at(T::of(x as f64) + fu[p], T::of(y as f64) + fv[p], w, h);
                let (mut gu, mut gv) = (T::zero(), T::zero());
                for ch in 0..c {
                    let base = (b * c + ch) * plane;
                    let g = dout.data()[base + p];
                    let src = &img.data()[base..][..plane];
                    let (i00, i01) = (src[s.y0 * w + s.x0], src[s.y0 * w + s.x1]);
                    let (i10, i11) = (src[s.y1 * w + s.x0], src[s.y1 * w + s.x1]);
                    if let Some(di) = dimg.as_mut() {
                        let d = &mut di.data_mut()[base..][..plane];
                        d[s.y0 * w + s.x0] += g * (one - s.ax) * (one - s.ay);
                        d[s.y0 * w + s.x1] += g * s.ax * (one - s.ay);
                        d[s.y1 * w + s.x0] += g * (one - s.ax) * s.ay;
                        d[s.y1 * w + s.x1] += g * s.ax * s.ay;
                    }
                    if s.inside_x {
                        gu += g * ((one - s.ay) * (i01 - i00) + s.ay * (i11 - i10));
                    }
                    if s.inside_y {
                        gv += g * ((one - s.ax) * (i10 - i00) + s.ax * (i11 - i01));
                    }
                }
                if let Some(df) = dflow.as_mut() {
                    df.data_mut()[(b * 2) * plane + p] += gu;
                    df.data_mut()[(b * 2 + 1) * plane + p] += gv;
                }
            }
        }
    }
    Ok((dimg, dflow))
}

/// Shape check shared by the weighted-fusion forward and adjoint.
fn check_fuse<T: Scalar>(weights: &Tensor<T>, cands: &[&Tensor<T>]) -> Result<(usize, usize, usize, usize, usize)> {
    let (n, k, h, w) = weights.nchw()?;
    if cands.len() != k {
        return Err(shape_err!(
            "{k} weight maps but {} candidates",
            cands.len()
        ));
    }
    let (cn, c, ch, cw) = cands[0].nchw()?;
    if (cn, ch, cw) != (n, h, w) {
        return Err(shape_err!(
            "candidate dims {:?} do not match weight dims {:?}",
            cands[0].dims(),
            weights.dims()
        ));
    }
    if cands.iter().any(|t| t.dims() != cands[0].dims()) {
        return Err(shape_err!("fusion candidates differ in dims"));
    }
    Ok((n, k, c, h, w))
}

/// Per-pixel convex blend `Σ_j a_j I_j` with `a_j = (w_j + ε/K) / (Σ w + ε)`.
///
/// The result is clamped to the candidates' per-pixel hull so that rounding
/// cannot push it outside `[min_j I_j, max_j I_j]`.
pub fn fuse_weighted<T: Scalar>(weights: &Tensor<T>, cands: &[&Tensor<T>], eps: T) -> Result<Tensor<T>> {
    let (n, k, c, h, w) = check_fuse(weights, cands)?;
    if weights.data().iter().any(|&v| v < T::zero()) {
        return Err(invalid!("fusion weights must be nonnegative"));
    }
    let plane = h * w;
    let share = eps / T::of(k as f64);
    let mut out = vec![T::zero(); n * c * plane];
    let mut a = vec![T::zero(); k];
    for b in 0..n {
        for p in 0..plane {
            let mut s = eps;
            for (j, aj) in a.iter_mut().enumerate() {
                *aj = weights.data()[(b * k + j) * plane + p];
                s += *aj;
            }
            for aj in a.iter_mut() {
                *aj = (*aj + share) / s;
            }
            for ch in 0..c {
                let idx = (b * c + ch) * plane + p;
                let (mut acc, mut lo, mut hi) = (T::zero(), T::infinity(), T::neg_infinity());
                for (j, cand) in cands.iter().enumerate() {
                    let v = cand.data()[idx];
                    acc += a[j] * v;
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
                out[idx] = acc.max(lo).min(hi);
            }
        }
    }
    let out = Tensor::new(vec![n, c, h, w], out)?;
    out.check_finite("fuse")?;
    Ok(out)
}

/// Adjoint of [`fuse_weighted`]; the hull clamp is treated as the identity.
pub(crate) fn fuse_backward<T: Scalar>(
    weights: &Tensor<T>,
    cands: &[&Tensor<T>],
    eps: T,
    dout: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let (n, k, c, h, w) = check_fuse(weights, cands)?;
    let plane = h * w;
    let share = eps / T::of(k as f64);
    let mut dw = Tensor::zeros(weights.dims().to_vec());
    let mut dc: Vec<Tensor<T>> = cands.iter().map(|t| Tensor::zeros(t.dims().to_vec())).collect();
    let mut a = vec![T::zero(); k];
    for b in 0..n {
        for p in 0..plane {
            let mut s = eps;
            for (j, aj) in a.iter_mut().enumerate() {
                *aj = weights.data()[(b * k + j) * plane + p];
                s += *aj;
            }
            for aj in a.iter_mut() {
                *aj = (*aj + share) / s;
            }
            for ch in 0..c {
                let idx = (b * c + ch) * plane + p;
                let g = dout.data()[idx];
                let blended: T = cands.iter().zip(&a).map(|(t, &aj)| aj * t.data()[idx]).sum();
                for (j, cand) in cands.iter().enumerate() {
                    dc[j].data_mut()[idx] += g * a[j];
                    dw.data_mut()[(b * k + j) * plane + p] += g * (cand.data()[idx] - blended) / s;
                }
            }
        }
    }
    Ok((dw, dc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(dims: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(dims.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, s: &ConvSpec) -> Tensor<f64> {
        let (n, c, h, wd) = x.nchw().unwrap();
        let (oh, ow) = s.output_hw(h, wd).unwrap();
        let mut out = Tensor::zeros(vec![n, s.out_channels, oh, ow]);
        for bi in 0..n {
            for o in 0..s.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data()[o];
                        let chans: Vec<usize> = if s.depthwise { vec![o] } else { (0..c).collect() };
                        for (wi, &ci) in chans.iter().enumerate() {
                            for ky in 0..s.kernel_h {
                                for kx in 0..s.kernel_w {
                                    let iy = (oy * s.stride + ky) as isize - s.padding as isize;
                                    let ix = (ox * s.stride + kx) as isize - s.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((bi * c + ci) * h + iy as usize) * wd + ix as usize];
                                    let cin = if s.depthwise { 1 } else { c };
                                    let wv = w.data()[((o * cin + wi) * s.kernel_h + ky) * s.kernel_w + kx];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out.data_mut()[((bi * s.out_channels + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        assert_eq!(a.dims(), b.dims());
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn conv_matches_direct_sum() {
        let specs = [
            ConvSpec::same(3, 5, 3),
            ConvSpec::same(3, 5, 3).with_stride(2),
            ConvSpec::same(4, 2, 1),
            ConvSpec::same(2, 3, 5),
            ConvSpec::depthwise(3, 7),
            ConvSpec::depthwise(2, 11),
        ];
        for (i, s) in specs.iter().enumerate() {
            let x = rand_tensor(&[2, s.in_channels, 9, 10], i as u64);
            let w = rand_tensor(&s.weight_dims(), 50 + i as u64);
            let b = rand_tensor(&[s.out_channels], 90 + i as u64);
            let got = conv2d(&x, &w, Some(&b), s).unwrap();
            assert!(max_diff(&got, &naive_conv(&x, &w, &b, s)) < 1e-12, "{s:?}");
        }
    }

    #[test]
    fn deconv_matches_scatter_definition() {
        let s = ConvSpec::deconv(2, 3);
        let x = rand_tensor(&[1, 2, 3, 4], 1);
        let w = rand_tensor(&s.deconv_weight_dims(), 2);
        let got = deconv2d(&x, &w, None, &s).unwrap();
        let mut want = Tensor::zeros(vec![1, 3, 6, 8]);
        for ci in 0..2 {
            for iy in 0..3 {
                for ix in 0..4 {
                    let xv = x.data()[(ci * 3 + iy) * 4 + ix];
                    for o in 0..3 {
                        for ky in 0..4 {
                            for kx in 0..4 {
                                let oy = (iy * 2 + ky) as isize - 1;
                                let ox = (ix * 2 + kx) as isize - 1;
                                if oy < 0 || ox < 0 || oy >= 6 || ox >= 8 {
                                    continue;
                                }
                                let wv = w.data()[((ci * 3 + o) * 4 + ky) * 4 + kx];
                                want.data_mut()[(o * 6 + oy as usize) * 8 + ox as usize] += xv * wv;
                            }
                        }
                    }
                }
            }
        }
        assert!(max_diff(&got, &want) < 1e-12);
    }

    #[test]
    fn shape_errors() {
        let s = ConvSpec::same(3, 4, 3);
        let x = Tensor::<f64>::zeros(vec![1, 2, 8, 8]);
        assert!(conv2d(&x, &Tensor::zeros(s.weight_dims().to_vec()), None, &s).is_err());
        let x = Tensor::<f64>::zeros(vec![1, 3, 8, 8]);
        assert!(conv2d(&x, &Tensor::zeros(vec![4, 3, 5, 5]), None, &s).is_err());
        assert!(conv2d(&x, &Tensor::zeros(s.weight_dims().to_vec()), Some(&Tensor::zeros(vec![3])), &s).is_err());
        assert!(warp(&x, &Tensor::zeros(vec![1, 2, 8, 7])).is_err());
    }

    #[test]
    fn pool_and_resize_values() {
        let x = Tensor::new(vec![1, 1, 2, 4], vec![1.0, 3.0, 5.0, 7.0, 3.0, 5.0, 9.0, 11.0]).unwrap();
        assert_eq!(avg_pool2(&x).unwrap().data(), &[3.0, 8.0]);
        let same = bilinear_resize(&x, 2, 4).unwrap();
        assert_eq!(same.data(), x.data());
        // 1-D upsample by 2 of [0, 4]: sources -0.25→0, 0.25, 0.75, 1.25→clamped.
        let r = Tensor::new(vec![1, 1, 1, 2], vec![0.0, 4.0]).unwrap();
        let up = bilinear_resize(&r, 1, 4).unwrap();
        assert_eq!(up.data(), &[0.0, 1.0, 3.0, 4.0]);
    }

    #[test]
    fn fuse_examples() {
        let c1 = Tensor::full(vec![1, 3, 2, 2], 0.25);
        let c2 = Tensor::full(vec![1, 3, 2, 2], 4.0);
        // identical candidates: output equals them whatever the weights
        let w = rand_tensor(&[1, 2, 2, 2], 3).map(f64::abs);
        let out = fuse_weighted(&w, &[&c1, &c1], 1e-6).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.25));
        // selector
        let mut sel = Tensor::zeros(vec![1, 2, 2, 2]);
        sel.data_mut()[4..].fill(1.0);
        let out = fuse_weighted(&sel, &[&c1, &c2], 1e-6).unwrap();
        assert!(out.data().iter().all(|&v| (v - 4.0).abs() <= 1e-6 * 4.0));
        // all-zero weights fall back to the plain mean
        let z = Tensor::zeros(vec![1, 2, 2, 2]);
        let out = fuse_weighted(&z, &[&c1, &c2], 1e-6).unwrap();
        assert!(out.data().iter().all(|&v| (v - 2.125).abs() < 1e-12));
        assert!(fuse_weighted(&z.map(|_| -1.0), &[&c1, &c2], 1e-6).is_err());
        assert!(fuse_weighted(&z, &[&c1], 1e-6).is_err());
    }

    #[test]
    fn fuse_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let k = 5;
        let w = Tensor::from_fn(vec![1, k, 1, 1], |_| rng.random_range(0.0..1.0));
        let cands: Vec<Tensor<f64>> = (0..k)
            .map(|_| Tensor::from_fn(vec![1, 1, 1, 1], |_| rng.random_range(0.0..3.0)))
            .collect();
        let refs: Vec<&Tensor<f64>> = cands.iter().collect();
        let got = fuse_weighted(&w, &refs, 1e-6).unwrap().data()[0];
        let num: f64 = (0..k).map(|j| w.data()[j] * cands[j].data()[0]).sum();
        let den: f64 = w.data().iter().sum::<f64>() + 1e-6;
        assert!((got - num / den).abs() < 1e-6);
    }
}
