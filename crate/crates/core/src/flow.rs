//! Dense optical-flow fields: backward warping, resolution changes,
//! Middlebury `.flo` I/O and color-wheel visualization.

use std::fs;
use std::path::Path;

use crate::error::{invalid, shape_err, Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Middlebury `.flo` magic tag (the float 202021.25 in little-endian).
pub const FLO_MAGIC: &[u8; 4] = b"PIEH";

/// Per-pixel displacement from the reference (`source_index`) frame into the
/// `target_index` frame. Channel 0 is horizontal (u), channel 1 vertical (v),
/// both in pixels of the field's own resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField<T> {
    pub flow: Tensor<T>,
    pub source_index: usize,
    pub target_index: usize,
}

impl<T: Scalar> FlowField<T> {
    pub fn new(flow: Tensor<T>, source_index: usize, target_index: usize) -> Result<Self> {
        let (c, _, _) = flow.chw()?;
        if c != 2 {
            return Err(shape_err!("flow field needs 2 channels, got {c}"));
        }
        flow.check_finite("flow field")?;
        Ok(FlowField {
            flow,
            source_index,
            target_index,
        })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self::constant(h, w, T::zero(), T::zero())
    }

    pub fn constant(h: usize, w: usize, u: T, v: T) -> Self {
        let mut data = vec![u; 2 * h * w];
        data[h * w..].fill(v);
        FlowField {
            flow: Tensor::new(vec![2, h, w], data).expect("flow dims"),
            source_index: 0,
            target_index: 0,
        }
    }

    pub fn height(&self) -> usize {
        self.flow.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.flow.dims()[2]
    }

    pub fn u(&self) -> &[T] {
        &self.flow.data()[..self.height() * self.width()]
    }

    pub fn v(&self) -> &[T] {
        &self.flow.data()[self.height() * self.width()..]
    }

    /// Mean Euclidean endpoint error against `other`.
    pub fn mean_epe(&self, other: &FlowField<T>) -> Result<f64> {
        if self.flow.dims() != other.flow.dims() {
            return Err(shape_err!(
                "flow dims differ: {:?} vs {:?}",
                self.flow.dims(),
                other.flow.dims()
            ));
        }
        let n = self.height() * self.width();
        let total: f64 = (0..n)
            .map(|p| {
                let du = (self.u()[p] - other.u()[p]).as_f64();
                let dv = (self.v()[p] - other.v()[p]).as_f64();
                du.hypot(dv)
            })
            .sum();
        Ok(total / n as f64)
    }
}

/// Samples `image` (`[C,H,W]`) at `p + flow(p)` with bilinear interpolation
/// and clamp-to-edge borders.
pub fn warp<T: Scalar>(image: &Tensor<T>, flow: &FlowField<T>) -> Result<Tensor<T>> {
    let (_, h, w) = image.chw()?;
    if (flow.height(), flow.width()) != (h, w) {
        return Err(shape_err!(
            "flow is {}x{} but image is {h}x{w}",
            flow.height(),
            flow.width()
        ));
    }
    let out = ops::warp(&image.clone().unsqueeze0(), &flow.flow.clone().unsqueeze0())?;
    out.squeeze0()
}

/// Bilinear upsampling by an integer `factor`; displacements are multiplied
/// by `factor` so they stay in pixels of the new resolution.
pub fn upsample_flow<T: Scalar>(flow: &FlowField<T>, factor: usize) -> Result<FlowField<T>> {
    if factor < 1 {
        return Err(invalid!("upsampling factor must be at least 1"));
    }
    if factor == 1 {
        return Ok(flow.clone());
    }
    let (h, w) = (flow.height(), flow.width());
    let up = ops::bilinear_resize(&flow.flow.clone().unsqueeze0(), h * factor, w * factor)?;
    let k = T::of(factor as f64);
    Ok(FlowField {
        flow: up.squeeze0()?.map(|v| v * k),
        source_index: flow.source_index,
        target_index: flow.target_index,
    })
}

/// Serializes to the Middlebury layout: magic, i32 width, i32 height, then
/// interleaved (u, v) f32 pairs in row-major order, all little-endian.
pub fn encode_flo<T: Scalar>(flow: &FlowField<T>) -> Vec<u8> {
    let (h, w) = (flow.height(), flow.width());
    let mut buf = Vec::with_capacity(12 + 8 * h * w);
    buf.extend_from_slice(FLO_MAGIC);
    buf.extend_from_slice(&(w as i32).to_le_bytes());
    buf.extend_from_slice(&(h as i32).to_le_bytes());
    for (u, v) in flow.u().iter().zip(flow.v()) {
        buf.extend_from_slice(&u.as_f32().to_le_bytes());
        buf.extend_from_slice(&v.as_f32().to_le_bytes());
    }
    buf
}

pub fn decode_flo<T: Scalar>(bytes: &[u8], path: &Path) -> Result<FlowField<T>> {
    if bytes.len() < 12 {
        return Err(Error::format(path, "truncated .flo header"));
    }
    if &bytes[..4] != FLO_MAGIC {
        return Err(Error::format(
            path,
            format!("bad .flo magic {:?}", String::from_utf8_lossy(&bytes[..4])),
        ));
    }
    let w = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let h = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if w <= 0 || h <= 0 {
        return Err(Error::format(path, format!("nonpositive .flo dims {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let expect = w.checked_mul(h).and_then(|n| n.checked_mul(8)).and_then(|n| n.checked_add(12));
    if expect.filter(|&e| e == bytes.len()).is_none() {
        return Err(Error::format(
            path,
            format!("{w}x{h} flow does not match the file size of {} bytes", bytes.len()),
        ));
    }
    let n = w * h;
    let mut data = vec![T::zero(); 2 * n];
    for (p, pair) in bytes[12..].chunks_exact(8).enumerate() {
        data[p] = T::of(f32::from_le_bytes(pair[..4].try_into().unwrap()) as f64);
        data[n + p] = T::of(f32::from_le_bytes(pair[4..].try_into().unwrap()) as f64);
    }
    let flow = Tensor::new(vec![2, h, w], data)?;
    FlowField::new(flow, 0, 0).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_flo<T: Scalar>(flow: &FlowField<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_flo(flow)).map_err(|e| Error::io(path, e))
}

pub fn read_flo<T: Scalar>(path: impl AsRef<Path>) -> Result<FlowField<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_flo(&bytes, path)
}

/// The 55-entry Middlebury color wheel (RGB in 0..=255), red → yellow →
/// green → cyan → blue → magenta → red.
pub fn color_wheel() -> Vec<[f64; 3]> {
    const SEGMENTS: [(usize, [usize; 3]); 6] = [
        (15, [0, 1, 2]),
        (6, [1, 0, 2]),
        (4, [1, 2, 0]),
        (11, [2, 1, 0]),
        (13, [2, 0, 1]),
        (6, [0, 2, 1]),
    ];
    let mut wheel = Vec::with_capacity(55);
    for (i, &(n, [full, ramp, _])) in SEGMENTS.iter().enumerate() {
        for k in 0..n {
            let mut rgb = [0.0; 3];
            let t = (255 * k / n) as f64;
            rgb[full] = 255.0;
            // Even segments ramp the next channel up, odd ones ramp the previous down.
            rgb[ramp] = if i % 2 == 0 { t } else { 255.0 - t };
            wheel.push(rgb);
        }
    }
    wheel
}

/// Color-wheel rendering: hue from direction, saturation from magnitude
/// relative to the 99th-percentile magnitude. A zero field renders white.
pub fn flow_to_rgb<T: Scalar>(flow: &FlowField<T>) -> Result<Tensor<T>> {
    flow.flow.check_finite("flow_to_rgb")?;
    let (h, w) = (flow.height(), flow.width());
    let n = h * w;
    let mags: Vec<f64> = flow
        .u()
        .iter()
        .zip(flow.v())
        .map(|(u, v)| u.as_f64().hypot(v.as_f64()))
        .collect();
    let mut sorted = mags.clone();
    sorted.sort_by(f64::total_cmp);
    let rank = ((n - 1) as f64 * 0.99).round() as usize;
    let norm = sorted[rank];
    let wheel = color_wheel();
    let ncols = wheel.len();
    let mut out = vec![T::one(); 3 * n];
    if norm <= 0.0 {
        return Tensor::new(vec![3, h, w], out);
    }
    for p in 0..n {
        let (u, v) = (flow.u()[p].as_f64() / norm, flow.v()[p].as_f64() / norm);
        let rad = mags[p] / norm;
        let a = (-v).atan2(-u) / std::f64::consts::PI;
        let fk = (a + 1.0) / 2.0 * (ncols - 1) as f64;
        let k0 = (fk.floor() as usize).min(ncols - 1);
        let k1 = if k0 + 1 == ncols { 0 } else { k0 + 1 };
        let f = fk - k0 as f64;
        for c in 0..3 {
            let col = ((1.0 - f) * wheel[k0][c] + f * wheel[k1][c]) / 255.0;
            let col = if rad <= 1.0 {
                1.0 - rad * (1.0 - col)
            } else {
                col * 0.75
            };
            out[c * n + p] = T::of(col);
        }
    }
    Tensor::new(vec![3, h, w], out)
}
