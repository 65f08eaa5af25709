//! Training samples: alternating-exposure synthesis from radiance frames,
//! geometric augmentation, a procedural translated scene, and the plain-text
//! frame manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, shape_err, Error, Result};
use crate::flow::{read_flo, FlowField};
use crate::hdr::{expose, ExposureSchedule, LdrFrame, RadianceFrame};
use crate::io::{read_pfm, read_ppm};
use crate::pipeline::SequenceWindow;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SourceTag {
    /// Captured video; no ground-truth flow.
    Real,
    /// Rendered or procedurally generated; may carry ground-truth flow.
    Synthetic,
}

/// One window with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample<T> {
    pub window: SequenceWindow<T>,
    /// Ground-truth radiance for every window frame.
    pub gt_hdr: Vec<RadianceFrame<T>>,
    /// `F_{t→n}` for every neighbor in ascending order.
    pub gt_flows: Option<Vec<FlowField<T>>>,
    pub source_tag: SourceTag,
}

impl<T: Scalar> TrainingSample<T> {
    pub fn new(
        window: SequenceWindow<T>,
        gt_hdr: Vec<RadianceFrame<T>>,
        gt_flows: Option<Vec<FlowField<T>>>,
        source_tag: SourceTag,
    ) -> Result<Self> {
        if gt_hdr.len() != window.frames.len() {
            return Err(invalid!(
                "{} ground-truth frames for a {}-frame window",
                gt_hdr.len(),
                window.frames.len()
            ));
        }
        let dims = window.frames[0].image.dims();
        if gt_hdr.iter().any(|h| h.image.dims() != dims) {
            return Err(shape_err!("ground-truth frames do not match the window size"));
        }
        if let Some(f) = &gt_flows {
            if source_tag != SourceTag::Synthetic {
                return Err(invalid!("only synthetic samples carry ground-truth flow"));
            }
            if f.len() != window.frames.len() - 1 {
                return Err(invalid!("need one ground-truth flow per neighbor, got {}", f.len()));
            }
            if f.iter().any(|f| f.flow.dims() != [2, dims[1], dims[2]]) {
                return Err(shape_err!("ground-truth flows do not match the window size"));
            }
        }
        Ok(TrainingSample {
            window,
            gt_hdr,
            gt_flows,
            source_tag,
        })
    }

    pub fn has_flow_gt(&self) -> bool {
        self.gt_flows.is_some()
    }

    /// Ground truth of the reference frame.
    pub fn gt_reference(&self) -> &RadianceFrame<T> {
        &self.gt_hdr[self.window.reference_index]
    }

    /// Largest ground-truth radiance in the sample (1 if all black): the
    /// normalization constant for tonemapped losses.
    pub fn white_point(&self) -> T {
        let m = self
            .gt_hdr
            .iter()
            .map(|h| h.image.max_value())
            .fold(T::zero(), |a, b| a.max(b));
        if m > T::zero() {
            m
        } else {
            T::one()
        }
    }
}

/// LDR synthesis precision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SynthMode {
    /// No quantization: values are exact `clip((H·e)^(1/γ))`.
    #[default]
    Continuous,
    /// Rounded to 8-bit code values.
    Quantized8,
}

/// Simulates an alternating-exposure capture of `hdr_frames`; frame `i` gets
/// exposure `schedule.exposure_at(phase + i)`.
pub fn synthesize_frames<T: Scalar>(
    hdr_frames: &[RadianceFrame<T>],
    schedule: &ExposureSchedule<T>,
    phase: usize,
    mode: SynthMode,
) -> Result<Vec<LdrFrame<T>>> {
    if hdr_frames.is_empty() {
        return Err(invalid!("no radiance frames to synthesize from"));
    }
    hdr_frames
        .iter()
        .enumerate()
        .map(|(i, h)| {
            let e = schedule.exposure_at(phase + i);
            let mut img = expose(&h.image, e, schedule.gamma);
            if mode == SynthMode::Quantized8 {
                let k = T::of(255.0);
                img = img.map(|v| (v * k).round() / k);
            }
            LdrFrame::new(img, e, i)
        })
        .collect()
}

/// [`synthesize_frames`] for exactly one window.
pub fn synthesize_window<T: Scalar>(
    hdr_frames: &[RadianceFrame<T>],
    schedule: &ExposureSchedule<T>,
    phase: usize,
    mode: SynthMode,
) -> Result<SequenceWindow<T>> {
    SequenceWindow::new(synthesize_frames(hdr_frames, schedule, phase, mode)?, schedule.clone())
}

// ---------------------------------------------------------------------------
// Geometric augmentation

/// One augmentation draw. Applied in order: horizontal flip, vertical flip,
/// `rot90` quarter turns, then a crop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct AugmentDraw {
    pub flip_h: bool,
    pub flip_v: bool,
    /// Quarter turns, each mapping pixel `(x, y)` to `(H−1−y, x)`.
    pub rot90: u8,
    /// `(top, left, height, width)`; `None` keeps the full frame.
    pub crop: Option<(usize, usize, usize, usize)>,
}

impl AugmentDraw {
    /// Random flips, rotation and a `size × size` crop of an `h × w` frame.
    pub fn random(rng: &mut impl Rng, h: usize, w: usize, size: usize) -> Result<Self> {
        if h < size || w < size {
            return Err(invalid!("frames of {h}x{w} are smaller than the {size}x{size} crop"));
        }
        let flip_h = rng.random();
        let flip_v = rng.random();
        let rot90 = rng.random_range(0..4u8);
        let (rh, rw) = if rot90 % 2 == 1 { (w, h) } else { (h, w) };
        let top = rng.random_range(0..=rh - size);
        let left = rng.random_range(0..=rw - size);
        Ok(AugmentDraw {
            flip_h,
            flip_v,
            rot90,
            crop: Some((top, left, size, size)),
        })
    }
}

/// Remaps `[C,H,W]` so that `out[c][y'][x'] = src[c][f(y', x')]`.
fn remap<T: Scalar>(t: &Tensor<T>, oh: usize, ow: usize, f: impl Fn(usize, usize) -> (usize, usize)) -> Result<Tensor<T>> {
    let (c, h, w) = t.chw()?;
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let src = &t.data()[ch * h * w..][..h * w];
        for y in 0..oh {
            for x in 0..ow {
                let (sy, sx) = f(y, x);
                out.push(src[sy * w + sx]);
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

fn flip_h<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, h, w) = t.chw()?;
    remap(t, h, w, |y, x| (y, w - 1 - x))
}

fn flip_v<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, h, w) = t.chw()?;
    remap(t, h, w, |y, x| (h - 1 - y, x))
}

/// Quarter turn: `new[y'][x'] = old[H−1−x'][y']`.
fn rot90<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, h, w) = t.chw()?;
    remap(t, w, h, |y, x| (h - 1 - x, y))
}

fn crop<T: Scalar>(t: &Tensor<T>, (top, left, ch, cw): (usize, usize, usize, usize)) -> Result<Tensor<T>> {
    let (_, h, w) = t.chw()?;
    if top + ch > h || left + cw > w || ch == 0 || cw == 0 {
        return Err(invalid!("crop {ch}x{cw} at ({top}, {left}) exceeds {h}x{w}"));
    }
    remap(t, ch, cw, |y, x| (y + top, x + left))
}

/// Applies the draw to an image.
pub fn transform_image<T: Scalar>(t: &Tensor<T>, d: &AugmentDraw) -> Result<Tensor<T>> {
    let mut t = t.clone();
    if d.flip_h {
        t = flip_h(&t)?;
    }
    if d.flip_v {
        t = flip_v(&t)?;
    }
    for _ in 0..d.rot90 % 4 {
        t = rot90(&t)?;
    }
    if let Some(c) = d.crop {
        t = crop(&t, c)?;
    }
    Ok(t)
}

/// Applies the draw to a flow field: the grid moves like an image and the
/// vectors follow the same linear map.
pub fn transform_flow<T: Scalar>(f: &FlowField<T>, d: &AugmentDraw) -> Result<FlowField<T>> {
    let plane = f.height() * f.width();
    let mut t = f.flow.clone();
    let flip_sign = |t: &mut Tensor<T>, ch: usize| {
        t.data_mut()[ch * plane..][..plane].iter_mut().for_each(|v| *v = -*v);
    };
    if d.flip_h {
        t = flip_h(&t)?;
        flip_sign(&mut t, 0);
    }
    if d.flip_v {
        t = flip_v(&t)?;
        flip_sign(&mut t, 1);
    }
    for _ in 0..d.rot90 % 4 {
        t = rot90(&t)?;
        // (u, v) -> (−v, u)
        let p = t.dims()[1] * t.dims()[2];
        let (u, v) = t.data_mut().split_at_mut(p);
        for (a, b) in u.iter_mut().zip(v.iter_mut()) {
            let (nu, nv) = (-*b, *a);
            *a = nu;
            *b = nv;
        }
    }
    if let Some(c) = d.crop {
        t = crop(&t, c)?;
    }
    FlowField::new(t, f.source_index, f.target_index)
}

/// Applies one draw to every frame, ground-truth frame and flow of a sample.
pub fn apply_augment<T: Scalar>(sample: &TrainingSample<T>, d: &AugmentDraw) -> Result<TrainingSample<T>> {
    let frames = sample
        .window
        .frames
        .iter()
        .map(|f| LdrFrame::new(transform_image(&f.image, d)?, f.exposure, f.frame_index))
        .collect::<Result<Vec<_>>>()?;
    let gt = sample
        .gt_hdr
        .iter()
        .map(|h| RadianceFrame::new(transform_image(&h.image, d)?, h.white_point))
        .collect::<Result<Vec<_>>>()?;
    let flows = sample
        .gt_flows
        .as_ref()
        .map(|fs| fs.iter().map(|f| transform_flow(f, d)).collect::<Result<Vec<_>>>())
        .transpose()?;
    TrainingSample::new(
        SequenceWindow::new(frames, sample.window.schedule.clone())?,
        gt,
        flows,
        sample.source_tag,
    )
}

/// Random flip/rotation and a `crop × crop` crop, seeded.
pub fn augment<T: Scalar>(sample: &TrainingSample<T>, seed: u64, crop: usize) -> Result<TrainingSample<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = AugmentDraw::random(&mut rng, sample.window.height(), sample.window.width(), crop)?;
    apply_augment(sample, &d)
}

// ---------------------------------------------------------------------------
// Procedural translated scene

/// Smooth procedural radiance in `[lo, hi]`, varying in log space, flat within `margin` of the
/// texture's own borders so that clamp-to-edge sampling near the frame edge
/// stays exact under small translations.
fn texture(x: f64, y: f64, w: f64, h: f64, margin: f64, lo: f64, hi: f64, ch: usize) -> f64 {
    let ramp = |d: f64| {
        let s = ((d - margin) / margin).clamp(0.0, 1.0);
        s * s * (3.0 - 2.0 * s)
    };
    let env = ramp(x) * ramp(w - 1.0 - x) * ramp(y) * ramp(h - 1.0 - y);
    let phase = ch as f64 * 0.7;
    let s = 0.5 * (x / 9.0 + phase).sin() * (y / 11.0).cos() + 0.35 * ((x + y) / 13.0 - phase).sin()
        + 0.15 * (x / 5.0 - y / 7.0).cos();
    let (a, b) = (lo.ln(), hi.ln());
    (0.5 * (a + b) + 0.5 * (b - a) * env * (1.8 * s).clamp(-1.0, 1.0)).exp()
}

/// `count` frames of a procedural scene translating by `velocity` pixels per
/// frame; the middle frame (`count / 2`) is undisplaced.
///
/// Radiance spans `[0.003, 0.95]` on a log scale, so under the default
/// two-exposure schedule a long-exposure frame has both well-exposed and
/// clipped regions while a short exposure never clips.
pub fn translated_radiance<T: Scalar>(size: usize, velocity: (f64, f64), count: usize) -> Result<Vec<RadianceFrame<T>>> {
    if count == 0 {
        return Err(invalid!("need at least one frame"));
    }
    let r = count / 2;
    let reach = r.max(count - 1 - r) as f64;
    let margin = 2.0 * velocity.0.abs().max(velocity.1.abs()) * reach + 3.0;
    if size as f64 <= 4.0 * margin {
        return Err(invalid!("{size}px is too small for velocity {velocity:?} over {count} frames"));
    }
    let s = size as f64;
    (0..count)
        .map(|k| {
            let dk = k as f64 - r as f64;
            let (ox, oy) = (dk * velocity.0, dk * velocity.1);
            let img = Tensor::from_fn(vec![3, size, size], |i| {
                let ch = i / (size * size);
                let p = i % (size * size);
                let (x, y) = ((p % size) as f64, (p / size) as f64);
                T::of(texture(x - ox, y - oy, s, s, margin, 0.003, 0.95, ch))
            });
            RadianceFrame::new(img, T::one())
        })
        .collect()
}

/// Window whose neighbors are exact translations of the reference.
///
/// Frame `k` shows the scene of [`translated_radiance`] moved by
/// `(k − r)·velocity` pixels, where `r` is the reference position, so
/// `F_{t→n} = (n − r)·velocity` everywhere.
pub fn translated_sample<T: Scalar>(
    size: usize,
    velocity: (f64, f64),
    schedule: &ExposureSchedule<T>,
    phase: usize,
) -> Result<TrainingSample<T>> {
    let n = schedule.window_len();
    let r = n / 2;
    let gt = translated_radiance(size, velocity, n)?;
    let window = synthesize_window(&gt, schedule, phase, SynthMode::Continuous)?;
    let flows = window
        .neighbor_positions()
        .into_iter()
        .map(|k| {
            let dk = k as f64 - r as f64;
            FlowField::new(
                FlowField::constant(size, size, T::of(dk * velocity.0), T::of(dk * velocity.1)).flow,
                r,
                k,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    TrainingSample::new(window, gt, Some(flows), SourceTag::Synthetic)
}

// ---------------------------------------------------------------------------
// Manifest

pub const MANIFEST_HEADER: &str = "hdrflow-manifest v1";

/// One frame of a manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub index: usize,
    pub exposure: f64,
    pub ldr: PathBuf,
    pub hdr: Option<PathBuf>,
    /// Ground-truth `F_{t→t+k}` files keyed by the signed offset `k`.
    pub flows: BTreeMap<i32, PathBuf>,
}

/// Line-oriented frame list.
///
/// ```text
/// hdrflow-manifest v1
/// # index exposure ldr_path [hdr=path] [flow-1=path] [flow+1=path] ...
/// 0 1 ldr/000.ppm hdr=hdr/000.pfm
/// 1 8 ldr/001.ppm hdr=hdr/001.pfm flow-1=flow/001_m1.flo flow+1=flow/001_p1.flo
/// ```
///
/// Blank lines and lines starting with `#` after the header are ignored.
/// Relative paths are resolved against the manifest's directory. Indices
/// must be consecutive and ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub records: Vec<FrameRecord>,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn parse(text: &str, base_dir: &Path, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, l)) if l.trim() == MANIFEST_HEADER => {}
            Some((_, l)) => {
                return Err(Error::format(path, format!("expected header {MANIFEST_HEADER:?}, got {:?}", l.trim())))
            }
            None => return Err(Error::format(path, "empty manifest")),
        }
        let mut records: Vec<FrameRecord> = Vec::new();
        for (no, line) in lines {
            let line = line.trim();
            if line.starts_with('#') {
                continue;
            }
            let bad = |msg: String| Error::format(path, format!("line {}: {msg}", no + 1));
            let mut fields = line.split_whitespace();
            let (Some(idx), Some(exp), Some(ldr)) = (fields.next(), fields.next(), fields.next()) else {
                return Err(bad("expected: index exposure ldr_path [key=path ...]".into()));
            };
            let index: usize = idx.parse().map_err(|_| bad(format!("invalid index {idx:?}")))?;
            let exposure: f64 = exp
                .parse()
                .ok()
                .filter(|e: &f64| *e > 0.0 && e.is_finite())
                .ok_or_else(|| bad(format!("invalid exposure {exp:?}")))?;
            let mut rec = FrameRecord {
                index,
                exposure,
                ldr: PathBuf::from(ldr),
                hdr: None,
                flows: BTreeMap::new(),
            };
            for kv in fields {
                let (k, v) = kv.split_once('=').ok_or_else(|| bad(format!("expected key=path, got {kv:?}")))?;
                if v.is_empty() {
                    return Err(bad(format!("empty path for {k}")));
                }
                if k == "hdr" {
                    if rec.hdr.replace(PathBuf::from(v)).is_some() {
                        return Err(bad("duplicate hdr".into()));
                    }
                } else if let Some(off) = k.strip_prefix("flow") {
                    let off: i32 = off
                        .parse()
                        .ok()
                        .filter(|o| *o != 0 && off.starts_with(['+', '-']))
                        .ok_or_else(|| bad(format!("invalid flow key {k:?}")))?;
                    if rec.flows.insert(off, PathBuf::from(v)).is_some() {
                        return Err(bad(format!("duplicate {k}")));
                    }
                } else {
                    return Err(bad(format!("unknown key {k:?}")));
                }
            }
            if let Some(prev) = records.last() {
                if index != prev.index + 1 {
                    return Err(bad(format!("index {index} does not follow {}", prev.index)));
                }
            }
            records.push(rec);
        }
        if records.is_empty() {
            return Err(Error::format(path, "manifest lists no frames"));
        }
        Ok(Manifest {
            records,
            base_dir: base_dir.to_path_buf(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base, path)
    }

    pub fn render(&self) -> String {
        let mut s = format!("{MANIFEST_HEADER}\n# index exposure ldr_path [hdr=path] [flow<k>=path ...]\n");
        for r in &self.records {
            write!(s, "{} {} {}", r.index, r.exposure, r.ldr.display()).unwrap();
            if let Some(h) = &r.hdr {
                write!(s, " hdr={}", h.display()).unwrap();
            }
            for (k, p) in &r.flows {
                write!(s, " flow{k:+}={}", p.display()).unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn exposures(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.exposure).collect()
    }

    /// Distinct exposures in first-appearance order, as a schedule.
    pub fn schedule<T: Scalar>(&self, gamma: T) -> Result<ExposureSchedule<T>> {
        let mut pattern: Vec<f64> = Vec::new();
        for e in self.exposures() {
            if !pattern.contains(&e) {
                pattern.push(e);
            }
        }
        ExposureSchedule::new(pattern.into_iter().map(T::of).collect(), gamma)
    }

    pub fn load_frames<T: Scalar>(&self) -> Result<Vec<LdrFrame<T>>> {
        self.records
            .iter()
            .map(|r| read_ppm(self.resolve(&r.ldr), T::of(r.exposure), r.index))
            .collect()
    }

    /// Training sample for the window centred on record position `center`.
    /// Ground-truth radiance is required for every window frame; flows are
    /// used (and the sample tagged synthetic) only if the reference lists one
    /// for every neighbor offset.
    pub fn load_sample<T: Scalar>(&self, center: usize, schedule: &ExposureSchedule<T>) -> Result<TrainingSample<T>> {
        let r = schedule.window_len() / 2;
        if center < r || center + r >= self.records.len() {
            return Err(invalid!("record {center} has no complete window"));
        }
        let recs = &self.records[center - r..=center + r];
        let frames = recs
            .iter()
            .map(|rec| read_ppm(self.resolve(&rec.ldr), T::of(rec.exposure), rec.index))
            .collect::<Result<Vec<_>>>()?;
        let gt = recs
            .iter()
            .map(|rec| {
                let p = rec
                    .hdr
                    .as_ref()
                    .ok_or_else(|| invalid!("frame {} has no ground-truth radiance", rec.index))?;
                read_pfm(self.resolve(p))
            })
            .collect::<Result<Vec<_>>>()?;
        let reference = &self.records[center];
        let offsets: Vec<i32> = (-(r as i32)..=r as i32).filter(|&k| k != 0).collect();
        let flows = if offsets.iter().all(|k| reference.flows.contains_key(k)) {
            Some(
                offsets
                    .iter()
                    .map(|k| read_flo(self.resolve(&reference.flows[k])))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let tag = if flows.is_some() { SourceTag::Synthetic } else { SourceTag::Real };
        let window = SequenceWindow::new(frames, schedule.clone())?;
        TrainingSample::new(window, gt, flows, tag)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::warp;
    use crate::hdr::{ldr_to_linear, GAMMA};

    fn rad(v: f64, h: usize, w: usize) -> RadianceFrame<f64> {
        RadianceFrame::new(Tensor::full(vec![3, h, w], v), 1.0).unwrap()
    }

    #[test]
    fn synthesis_examples() {
        let s = ExposureSchedule::two_exposure();
        let w = synthesize_window(&[rad(0.0, 2, 2), rad(0.0, 2, 2), rad(0.0, 2, 2)], &s, 0, SynthMode::Continuous).unwrap();
        assert!(w.frames.iter().all(|f| f.image.data().iter().all(|&v| v == 0.0)));
        let f = synthesize_frames(&[rad(0.1, 1, 1), rad(0.125, 1, 1)], &s, 0, SynthMode::Continuous).unwrap();
        assert!((f[0].image.data()[0] - 0.1f64.powf(1.0 / 2.2)).abs() < 1e-15);
        assert_eq!(f[1].image.data()[0], 1.0);
        assert_eq!(f[1].exposure, 8.0);
        assert!(synthesize_frames::<f64>(&[], &s, 0, SynthMode::Continuous).is_err());
        let q = synthesize_frames(&[rad(0.1, 1, 1)], &s, 0, SynthMode::Quantized8).unwrap();
        assert_eq!(q[0].image.data()[0] * 255.0, (0.1f64.powf(1.0 / 2.2) * 255.0).round());
    }

    #[test]
    fn synthesis_inverts_off_clip() {
        let s = ExposureSchedule::three_exposure();
        let h = RadianceFrame::new(Tensor::from_fn(vec![3, 4, 4], |i| 0.001 + i as f64 * 0.0012), 1.0).unwrap();
        let frames = synthesize_frames(&vec![h.clone(); 3], &s, 0, SynthMode::Continuous).unwrap();
        for f in frames {
            let back = ldr_to_linear(&f, GAMMA).unwrap();
            for (a, b) in back.image.data().iter().zip(h.image.data()) {
                assert!((a - b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn identity_draw_and_flip_sign() {
        let s = translated_sample::<f64>(48, (1.0, 0.5), &ExposureSchedule::two_exposure(), 1).unwrap();
        assert_eq!(apply_augment(&s, &AugmentDraw::default()).unwrap(), s);
        let d = AugmentDraw { flip_h: true, ..Default::default() };
        let a = apply_augment(&s, &d).unwrap();
        let f = &a.gt_flows.as_ref().unwrap()[1];
        assert!(f.u().iter().all(|&u| u == -1.0));
        assert!(f.v().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn rotation_maps_vectors_and_commutes_with_warp() {
        let img = Tensor::from_fn(vec![3, 6, 8], |i| ((i * 37) % 23) as f64 / 23.0);
        let flow = FlowField::new(Tensor::from_fn(vec![2, 6, 8], |i| ((i * 13) % 7) as f64 * 0.3 - 0.9), 0, 1).unwrap();
        let c = FlowField::<f64>::constant(6, 8, 0.75, -0.25);
        for k in 1..4u8 {
            let d = AugmentDraw { rot90: k, flip_v: k == 2, ..Default::default() };
            let rc = transform_flow(&c, &d).unwrap();
            if k == 1 {
                assert!(rc.u().iter().all(|&u| u == 0.25) && rc.v().iter().all(|&v| v == 0.75));
            }
            let lhs = warp(&transform_image(&img, &d).unwrap(), &transform_flow(&flow, &d).unwrap()).unwrap();
            let rhs = transform_image(&warp(&img, &flow).unwrap(), &d).unwrap();
            for (a, b) in lhs.data().iter().zip(rhs.data()) {
                assert!((a - b).abs() < 1e-12, "k={k}");
            }
        }
    }

    #[test]
    fn augment_crops_and_commutes_with_synthesis() {
        let s = translated_sample::<f64>(64, (1.0, -1.0), &ExposureSchedule::two_exposure(), 1).unwrap();
        let a = augment(&s, 3, 32).unwrap();
        assert_eq!(a.window.frames[0].image.dims(), [3, 32, 32]);
        assert!(augment(&s, 3, 65).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = AugmentDraw::random(&mut rng, 64, 64, 32).unwrap();
        let moved: Vec<_> = s.gt_hdr.iter().map(|h| RadianceFrame::new(transform_image(&h.image, &d).unwrap(), 1.0).unwrap()).collect();
        let resynth = synthesize_window(&moved, &s.window.schedule, 1, SynthMode::Continuous).unwrap();
        assert_eq!(resynth.frames, a.window.frames);
    }

    #[test]
    fn translated_sample_is_consistent() {
        let s = translated_sample::<f64>(64, (2.0, -1.0), &ExposureSchedule::two_exposure(), 0).unwrap();
        assert_eq!(s.window.reference().exposure, 8.0);
        let flows = s.gt_flows.as_ref().unwrap();
        assert_eq!(flows[0].u()[0], -2.0);
        assert_eq!(flows[1].v()[0], -1.0);
        let r = s.gt_reference();
        for (k, f) in [(0usize, &flows[0]), (2, &flows[1])] {
            let w = warp(&s.gt_hdr[k].image, f).unwrap();
            let err = w.zip_map(&r.image, |a, b| (a - b).abs()).unwrap().max_value();
            assert!(err < 1e-12, "{err}");
        }
        let err = TrainingSample::new(s.window.clone(), s.gt_hdr.clone(), s.gt_flows.clone(), SourceTag::Real);
        assert!(err.is_err());
    }

    #[test]
    fn manifest_round_trip_and_errors() {
        let text = "hdrflow-manifest v1\n# comment\n3 1 a.ppm hdr=a.pfm\n4 8 /abs/b.ppm flow-1=m.flo flow+1=p.flo\n";
        let m = Manifest::parse(text, Path::new("/data"), Path::new("m.txt")).unwrap();
        assert_eq!(m.records.len(), 2);
        assert_eq!(m.resolve(&m.records[0].ldr), PathBuf::from("/data/a.ppm"));
        assert_eq!(m.resolve(&m.records[1].ldr), PathBuf::from("/abs/b.ppm"));
        assert_eq!(m.records[1].flows[&-1], PathBuf::from("m.flo"));
        let again = Manifest::parse(&m.render(), Path::new("/data"), Path::new("m.txt")).unwrap();
        assert_eq!(again, m);
        let p = Path::new("m.txt");
        for bad in [
            "",
            "wrong header\n0 1 a.ppm",
            "hdrflow-manifest v1\n",
            "hdrflow-manifest v1\n0 0 a.ppm",
            "hdrflow-manifest v1\n0 x a.ppm",
            "hdrflow-manifest v1\n0 1",
            "hdrflow-manifest v1\n0 1 a.ppm bogus=1",
            "hdrflow-manifest v1\n0 1 a.ppm flow0=x",
            "hdrflow-manifest v1\n0 1 a.ppm\n2 8 b.ppm",
        ] {
            assert!(Manifest::parse(bad, Path::new("."), p).is_err(), "{bad:?}");
        }
        let s = m.schedule::<f64>(2.2).unwrap();
        assert_eq!(s.pattern(), &[1.0, 8.0]);
    }
}
