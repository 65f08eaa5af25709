//! Per-pixel radiometric transforms between gamma-encoded LDR frames and
//! linear radiance, μ-law tonemapping and the well-exposedness mask.

use crate::error::{invalid, shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Display gamma of the LDR encoding.
pub const GAMMA: f64 = 2.2;
/// μ-law compression strength for losses and metrics.
pub const MU: f64 = 5000.0;
/// Luminance strictly above this is not under-exposed.
pub const DELTA_LOW: f64 = 0.2;
/// Luminance strictly below this is not over-exposed.
pub const DELTA_HIGH: f64 = 0.8;

/// BT.601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Gamma-encoded frame with values in `[0, 1]` and its relative exposure time.
#[derive(Clone, Debug, PartialEq)]
pub struct LdrFrame<T> {
    pub image: Tensor<T>,
    pub exposure: T,
    pub frame_index: usize,
}

impl<T: Scalar> LdrFrame<T> {
    pub fn new(image: Tensor<T>, exposure: T, frame_index: usize) -> Result<Self> {
        let (c, _, _) = image.chw()?;
        if c != 3 {
            return Err(shape_err!("LDR frame needs 3 channels, got {c}"));
        }
        if !(exposure > T::zero()) {
            return Err(invalid!("exposure must be positive, got {exposure}"));
        }
        if let Some(v) = image
            .data()
            .iter()
            .find(|v| !(**v >= T::zero() && **v <= T::one()))
        {
            return Err(invalid!("LDR pixel {v} outside [0, 1]"));
        }
        Ok(LdrFrame {
            image,
            exposure,
            frame_index,
        })
    }

    pub fn height(&self) -> usize {
        self.image.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.image.dims()[2]
    }
}

/// Linear radiance image. `image / white_point` is nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RadianceFrame<T> {
    pub image: Tensor<T>,
    pub white_point: T,
}

impl<T: Scalar> RadianceFrame<T> {
    pub fn new(image: Tensor<T>, white_point: T) -> Result<Self> {
        image.chw()?;
        if !(white_point > T::zero()) {
            return Err(invalid!("white point must be positive, got {white_point}"));
        }
        if let Some(v) = image.data().iter().find(|v| !(**v >= T::zero()) || !v.is_finite()) {
            return Err(invalid!("radiance {v} is negative or non-finite"));
        }
        Ok(RadianceFrame { image, white_point })
    }

    /// Radiance frame whose white point is its own maximum (1 for an all-black frame).
    pub fn with_max_white_point(image: Tensor<T>) -> Result<Self> {
        let m = image.max_value();
        let wp = if m > T::zero() { m } else { T::one() };
        Self::new(image, wp)
    }

    /// `clamp(image / white_point, 0, 1)`, the tonemapper's input domain.
    pub fn normalized(&self) -> Tensor<T> {
        normalize(&self.image, self.white_point)
    }
}

/// `clamp(x / white_point, 0, 1)`.
pub fn normalize<T: Scalar>(x: &Tensor<T>, white_point: T) -> Tensor<T> {
    x.map(|v| (v / white_point).max(T::zero()).min(T::one()))
}

/// Binary mask of well-exposed reference pixels, `[1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LuminanceMask<T> {
    pub mask: Tensor<T>,
}

impl<T: Scalar> LuminanceMask<T> {
    /// Fraction of pixels that are *not* well exposed.
    pub fn uncovered_fraction(&self) -> f64 {
        1.0 - self.mask.mean().as_f64()
    }

    /// `1 − M`, the pixels where the alignment loss is active.
    pub fn complement(&self) -> Tensor<T> {
        self.mask.map(|m| T::one() - m)
    }
}

/// Cyclic capture exposures (2 or 3 distinct values) and the encoding gamma.
#[derive(Clone, Debug, PartialEq)]
pub struct ExposureSchedule<T> {
    pattern: Vec<T>,
    pub gamma: T,
}

impl<T: Scalar> ExposureSchedule<T> {
    pub fn new(pattern: Vec<T>, gamma: T) -> Result<Self> {
        if !(2..=3).contains(&pattern.len()) {
            return Err(invalid!(
                "exposure pattern must have 2 or 3 entries, got {}",
                pattern.len()
            ));
        }
        if pattern.iter().any(|e| !(*e > T::zero())) {
            return Err(invalid!("exposures must be positive"));
        }
        for (i, a) in pattern.iter().enumerate() {
            if pattern[i + 1..].contains(a) {
                return Err(invalid!("exposure {a} repeats in the pattern"));
            }
        }
        if !(gamma > T::zero()) {
            return Err(invalid!("gamma must be positive"));
        }
        Ok(ExposureSchedule { pattern, gamma })
    }

    /// EV−3 / EV+0 alternation: exposures {1, 8}.
    pub fn two_exposure() -> Self {
        Self::new(vec![T::one(), T::of(8.0)], T::of(GAMMA)).expect("default schedule")
    }

    /// EV−2 / EV+0 / EV+2 cycle: exposures {1, 4, 16}.
    pub fn three_exposure() -> Self {
        Self::new(vec![T::one(), T::of(4.0), T::of(16.0)], T::of(GAMMA))
            .expect("default schedule")
    }

    pub fn pattern(&self) -> &[T] {
        &self.pattern
    }

    pub fn len(&self) -> usize {
        self.pattern.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pattern.is_empty()
    }

    /// Window length used with this schedule: 3 frames for 2 exposures, 5 for 3.
    pub fn window_len(&self) -> usize {
        2 * self.pattern.len() - 1
    }

    /// Exposure of frame `t` when the cycle starts at frame 0.
    pub fn exposure_at(&self, t: usize) -> T {
        self.pattern[t % self.pattern.len()]
    }

    /// Phase `k` such that `exposures[i] == pattern[(k + i) % len]` for all `i`.
    pub fn phase_of(&self, exposures: &[T]) -> Option<usize> {
        let n = self.pattern.len();
        (0..n).find(|&k| {
            exposures
                .iter()
                .enumerate()
                .all(|(i, e)| *e == self.pattern[(k + i) % n])
        })
    }
}

/// `I = L^γ / e`.
pub fn ldr_to_linear<T: Scalar>(frame: &LdrFrame<T>, gamma: T) -> Result<RadianceFrame<T>> {
    if !(frame.exposure > T::zero()) {
        return Err(invalid!("exposure must be positive, got {}", frame.exposure));
    }
    let e = frame.exposure;
    let image = frame.image.map(|v| v.max(T::zero()).powf(gamma) / e);
    Ok(RadianceFrame {
        image,
        white_point: T::one() / e,
    })
}

/// Pixelwise `L^γ / e` on a raw tensor.
pub fn linearize<T: Scalar>(image: &Tensor<T>, exposure: T, gamma: T) -> Tensor<T> {
    image.map(|v| v.max(T::zero()).powf(gamma) / exposure)
}

/// `clip((I · e)^(1/γ), 0, 1)`.
pub fn linear_to_ldr<T: Scalar>(
    rad: &RadianceFrame<T>,
    target_exposure: T,
    gamma: T,
    frame_index: usize,
) -> Result<LdrFrame<T>> {
    if !(target_exposure > T::zero()) {
        return Err(invalid!("target exposure must be positive, got {target_exposure}"));
    }
    Ok(LdrFrame {
        image: expose(&rad.image, target_exposure, gamma),
        exposure: target_exposure,
        frame_index,
    })
}

/// Pixelwise `clip((I · e)^(1/γ), 0, 1)` on a raw tensor.
pub fn expose<T: Scalar>(radiance: &Tensor<T>, exposure: T, gamma: T) -> Tensor<T> {
    let inv = T::one() / gamma;
    radiance.map(|v| (v * exposure).max(T::zero()).powf(inv).min(T::one()))
}

/// Re-exposes an LDR frame as if captured with `target_exposure`.
pub fn adjust_exposure<T: Scalar>(
    frame: &LdrFrame<T>,
    target_exposure: T,
    gamma: T,
) -> Result<LdrFrame<T>> {
    if !(target_exposure > T::zero()) {
        return Err(invalid!("target exposure must be positive, got {target_exposure}"));
    }
    if target_exposure == frame.exposure {
        return Ok(frame.clone());
    }
    let rad = ldr_to_linear(frame, gamma)?;
    linear_to_ldr(&rad, target_exposure, gamma, frame.frame_index)
}

/// μ-law tonemap `ln(1 + μH) / ln(1 + μ)` on inputs already in `[0, 1]`.
pub fn tonemap_mu<T: Scalar>(h: &Tensor<T>, mu: T) -> Result<Tensor<T>> {
    if !(mu > T::zero()) {
        return Err(invalid!("mu must be positive, got {mu}"));
    }
    let denom = mu.ln_1p();
    Ok(h.map(|v| (mu * v).ln_1p() / denom))
}

/// Inverse of [`tonemap_mu`]: `((1 + μ)^t − 1) / μ`.
pub fn tonemap_mu_inverse<T: Scalar>(t: &Tensor<T>, mu: T) -> Result<Tensor<T>> {
    if !(mu > T::zero()) {
        return Err(invalid!("mu must be positive, got {mu}"));
    }
    let denom = mu.ln_1p();
    Ok(t.map(|v| (v * denom).exp_m1() / mu))
}

/// BT.601 luma of a gamma-encoded RGB image, `[1, H, W]`.
pub fn luminance_y<T: Scalar>(frame: &LdrFrame<T>) -> Result<Tensor<T>> {
    luma(&frame.image)
}

pub(crate) fn luma<T: Scalar>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(shape_err!("luminance needs 3 channels, got {c}"));
    }
    let plane = h * w;
    let d = image.data();
    let [kr, kg, kb] = LUMA.map(T::of);
    let y = (0..plane)
        .map(|p| kr * d[p] + kg * d[plane + p] + kb * d[2 * plane + p])
        .collect();
    Tensor::new(vec![1, h, w], y)
}

/// `M = 1` where `δ_low < Y < δ_high` (strict), else 0.
pub fn well_exposed_mask<T: Scalar>(
    frame: &LdrFrame<T>,
    delta_low: T,
    delta_high: T,
) -> Result<LuminanceMask<T>> {
    if !(T::zero() <= delta_low && delta_low < delta_high && delta_high <= T::one()) {
        return Err(invalid!(
            "thresholds must satisfy 0 <= low < high <= 1, got ({delta_low}, {delta_high})"
        ));
    }
    let y = luminance_y(frame)?;
    Ok(LuminanceMask {
        mask: y.map(|v| {
            if v > delta_low && v < delta_high {
                T::one()
            } else {
                T::zero()
            }
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(values: Vec<f64>, h: usize, w: usize, e: f64) -> LdrFrame<f64> {
        LdrFrame::new(Tensor::new(vec![3, h, w], values).unwrap(), e, 0).unwrap()
    }

    fn gray(v: f64, h: usize, w: usize) -> LdrFrame<f64> {
        frame(vec![v; 3 * h * w], h, w, 1.0)
    }

    #[test]
    fn linearization_fixed_points() {
        let f = frame(vec![0.0, 1.0, 0.5], 1, 1, 1.0);
        let rad = ldr_to_linear(&f, GAMMA).unwrap();
        assert_eq!(rad.image.data()[0], 0.0);
        assert_eq!(rad.image.data()[1], 1.0);
        assert_eq!(rad.image.data()[2], 0.5f64.powf(2.2));
        let f8 = frame(vec![0.0; 3], 1, 1, 8.0);
        assert_eq!(ldr_to_linear(&f8, GAMMA).unwrap().image.data(), &[0.0; 3]);
    }

    #[test]
    fn linear_to_ldr_clips_and_round_trips() {
        let rad = RadianceFrame::new(Tensor::new(vec![3, 1, 1], vec![0.0, 2.0, 0.3]).unwrap(), 1.0).unwrap();
        let l = linear_to_ldr(&rad, 1.0, GAMMA, 0).unwrap();
        assert_eq!(l.image.data()[0], 0.0);
        assert_eq!(l.image.data()[1], 1.0);
        let back = ldr_to_linear(&l, GAMMA).unwrap();
        assert!((back.image.data()[2] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn nonpositive_exposures_rejected() {
        let rad = RadianceFrame::new(Tensor::zeros(vec![3, 1, 1]), 1.0).unwrap();
        assert!(linear_to_ldr(&rad, 0.0, GAMMA, 0).is_err());
        assert!(adjust_exposure(&gray(0.5, 1, 1), -1.0, GAMMA).is_err());
        assert!(LdrFrame::new(Tensor::<f64>::zeros(vec![3, 1, 1]), 0.0, 0).is_err());
    }

    #[test]
    fn adjust_exposure_cases() {
        let f = frame(vec![0.1, 0.25, 1.0], 1, 1, 1.0);
        assert_eq!(adjust_exposure(&f, 1.0, GAMMA).unwrap(), f);
        let up = adjust_exposure(&f, 4.0, GAMMA).unwrap();
        assert_eq!(up.image.data()[2], 1.0);
        let want = (0.25f64.powf(2.2) * 4.0).powf(1.0 / 2.2);
        assert!((up.image.data()[1] - want).abs() < 1e-15);
        let f1 = frame(vec![1.0; 3], 1, 1, 1.0);
        assert_eq!(adjust_exposure(&f1, 8.0, GAMMA).unwrap().image.data(), &[1.0; 3]);
    }

    #[test]
    fn tonemap_endpoints_and_reference_value() {
        let t = tonemap_mu(&Tensor::new(vec![3], vec![0.0, 1.0, 0.01]).unwrap(), MU).unwrap();
        assert_eq!(t.data()[0], 0.0);
        assert_eq!(t.data()[1], 1.0);
        assert!((t.data()[2] - 51f64.ln() / 5001f64.ln()).abs() < 1e-15);
        let tf = tonemap_mu(&Tensor::new(vec![2], vec![0.0f32, 1.0]).unwrap(), MU as f32).unwrap();
        assert_eq!(tf.data(), &[0.0, 1.0]);
        assert!(tonemap_mu(&t, 0.0).is_err());
        let inv = tonemap_mu_inverse(&t, MU).unwrap();
        assert!((inv.data()[2] - 0.01).abs() < 1e-14);
    }

    #[test]
    fn luminance_projections() {
        let f = frame(vec![1.0, 0.3, 0.2, 0.0, 0.3, 0.5, 0.0, 0.3, 0.9], 1, 3, 1.0);
        let y = luminance_y(&f).unwrap();
        assert_eq!(y.dims(), &[1, 1, 3]);
        assert!((y.data()[0] - 0.299).abs() < 1e-15);
        assert!((y.data()[1] - 0.3).abs() < 1e-15);
        let want = 0.299 * 0.2 + 0.587 * 0.5 + 0.114 * 0.9;
        assert!((y.data()[2] - want).abs() < 1e-15);
        let two = LdrFrame {
            image: Tensor::<f64>::zeros(vec![2, 1, 1]),
            exposure: 1.0,
            frame_index: 0,
        };
        assert!(luminance_y(&two).is_err());
    }

    #[test]
    fn mask_thresholds() {
        let m = well_exposed_mask(&gray(0.5, 2, 2), 0.2, 0.8).unwrap();
        assert_eq!(m.mask.data(), &[1.0; 4]);
        let m = well_exposed_mask(&gray(0.0, 2, 2), 0.2, 0.8).unwrap();
        assert_eq!(m.mask.data(), &[0.0; 4]);
        assert!(well_exposed_mask(&gray(0.5, 1, 1), 0.8, 0.2).is_err());
        assert!(well_exposed_mask(&gray(0.5, 1, 1), 0.5, 0.5).is_err());
    }

    #[test]
    fn mask_ramp_boundaries_are_strict() {
        // Ramp 0.0, 0.1, ..., 1.0 in every channel; Y equals the ramp value.
        let w = 11;
        let ramp: Vec<f64> = (0..w).map(|i| i as f64 / 10.0).collect();
        let values: Vec<f64> = (0..3).flat_map(|_| ramp.clone()).collect();
        let m = well_exposed_mask(&frame(values, 1, w, 1.0), 0.2, 0.8).unwrap();
        for (i, &y) in ramp.iter().enumerate() {
            let y = 0.299 * y + 0.587 * y + 0.114 * y;
            let want = if y > 0.2 && y < 0.8 { 1.0 } else { 0.0 };
            assert_eq!(m.mask.data()[i], want, "pixel {i} at Y={y}");
        }
    }

    #[test]
    fn schedule_validation_and_phase() {
        assert!(ExposureSchedule::new(vec![1.0], GAMMA).is_err());
        assert!(ExposureSchedule::new(vec![1.0, 1.0], GAMMA).is_err());
        assert!(ExposureSchedule::new(vec![1.0, -2.0], GAMMA).is_err());
        assert!(ExposureSchedule::new(vec![1.0, 2.0, 4.0, 8.0], GAMMA).is_err());
        let s = ExposureSchedule::<f64>::three_exposure();
        assert_eq!(s.window_len(), 5);
        assert_eq!(s.phase_of(&[4.0, 16.0, 1.0, 4.0, 16.0]), Some(1));
        assert_eq!(s.phase_of(&[4.0, 4.0, 1.0]), None);
        assert_eq!(ExposureSchedule::<f32>::two_exposure().exposure_at(3), 8.0);
    }
}
