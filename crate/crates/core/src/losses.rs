//! Training objectives: tonemapped reconstruction, masked HDR-domain
//! alignment, flow supervision and their weighted total.
//!
//! The `*_tape` variants operate on batched `[N,C,H,W]` tape variables and are
//! what training differentiates; the plain variants evaluate the same
//! quantities on frames.

use crate::error::{invalid, shape_err, Result};
use crate::flow::FlowField;
use crate::hdr::{normalize, tonemap_mu, LuminanceMask, RadianceFrame};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_rec: f64,
    pub lambda_ha: f64,
    pub lambda_flow: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_rec: 1.0,
            lambda_ha: 0.5,
            lambda_flow: 0.001,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_rec, self.lambda_ha, self.lambda_flow];
        if all.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(invalid!("loss weights must be finite and nonnegative: {self:?}"));
        }
        Ok(())
    }

    pub fn zero() -> Self {
        LossWeights {
            lambda_rec: 0.0,
            lambda_ha: 0.0,
            lambda_flow: 0.0,
        }
    }
}

/// Unweighted loss terms of one sample.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub rec: f64,
    pub ha: f64,
    pub flow: f64,
    /// Fraction of reference pixels outside the well-exposed band.
    pub mask_coverage: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub rec: f64,
    pub ha: f64,
    /// Zero for samples without ground-truth flow.
    pub flow: f64,
    pub mask_coverage: f64,
}

/// `λ_rec·rec + λ_ha·ha + λ_flow·flow`, with the flow term dropped when the
/// sample has no ground-truth flow.
pub fn total_loss(parts: &LossParts, weights: &LossWeights, has_flow_gt: bool) -> LossReport {
    let flow = if has_flow_gt { parts.flow } else { 0.0 };
    LossReport {
        total: weights.lambda_rec * parts.rec + weights.lambda_ha * parts.ha + weights.lambda_flow * flow,
        rec: parts.rec,
        ha: parts.ha,
        flow,
        mask_coverage: parts.mask_coverage,
    }
}

/// `T(clamp(x / white_point, 0, 1))` on a constant tensor.
fn tonemapped<T: Scalar>(x: &Tensor<T>, white_point: T, mu: T) -> Result<Tensor<T>> {
    tonemap_mu(&normalize(x, white_point), mu)
}

fn check_positive<T: Scalar>(white_point: T, mu: T) -> Result<()> {
    if !(white_point > T::zero()) || !(mu > T::zero()) {
        return Err(invalid!("white point and mu must be positive, got {white_point}, {mu}"));
    }
    Ok(())
}

/// Mean over all elements of `|T(pred/wp) − T(gt/wp)|`.
pub fn rec_loss_tape<T: Scalar>(
    tape: &Tape<T>,
    pred: Var,
    gt: &Tensor<T>,
    white_point: T,
    mu: T,
) -> Result<Var> {
    check_positive(white_point, mu)?;
    if tape.dims(pred) != gt.dims() {
        return Err(shape_err!(
            "prediction dims {:?} do not match ground truth {:?}",
            tape.dims(pred),
            gt.dims()
        ));
    }
    let p = tape.scale(pred, T::one() / white_point)?;
    let p = tape.clamp(p, T::zero(), T::one())?;
    let p = tape.tonemap(p, mu)?;
    let g = tape.constant(tonemapped(gt, white_point, mu)?);
    let d = tape.sub(p, g)?;
    let a = tape.abs(d)?;
    tape.mean(a)
}

/// Alignment loss between tonemapped ground-truth frames.
///
/// For each neighbor, `|T(H_t) − W(T(H_n), F_{t→n})|` is summed over both
/// neighbors and averaged over the elements where `1 − M = 1` (all channels
/// of those pixels). An empty mask gives 0.
#[allow(clippy::too_many_arguments)]
pub fn halo_loss_tape<T: Scalar>(
    tape: &Tape<T>,
    gt_ref: &Tensor<T>,
    gt_neighbors: [&Tensor<T>; 2],
    flows: [Var; 2],
    active: &Tensor<T>,
    white_point: T,
    mu: T,
) -> Result<Var> {
    check_positive(white_point, mu)?;
    let (n, _, h, w) = gt_ref.nchw()?;
    for g in gt_neighbors {
        if g.dims() != gt_ref.dims() {
            return Err(shape_err!(
                "neighbor dims {:?} do not match reference {:?}",
                g.dims(),
                gt_ref.dims()
            ));
        }
    }
    for f in flows {
        if tape.dims(f) != [n, 2, h, w] {
            return Err(shape_err!(
                "flow dims {:?} do not match [{n}, 2, {h}, {w}]",
                tape.dims(f)
            ));
        }
    }
    let t_ref = tape.constant(tonemapped(gt_ref, white_point, mu)?);
    let mut total = None;
    for (g, f) in gt_neighbors.into_iter().zip(flows) {
        let t_n = tape.constant(tonemapped(g, white_point, mu)?);
        let warped = tape.warp(t_n, f)?;
        let d = tape.sub(t_ref, warped)?;
        let a = tape.abs(d)?;
        total = Some(match total {
            None => a,
            Some(acc) => tape.add(acc, a)?,
        });
    }
    tape.masked_mean(total.expect("two neighbors"), active)
}

/// Per-pixel L1 norm `|Δu| + |Δv|`, averaged over pixels, summed over both flows.
pub fn flow_loss_tape<T: Scalar>(tape: &Tape<T>, pred: [Var; 2], gt: [&Tensor<T>; 2]) -> Result<Var> {
    let mut total = None;
    for (p, g) in pred.into_iter().zip(gt) {
        let (n, c, h, w) = g.nchw()?;
        if c != 2 || tape.dims(p) != g.dims() {
            return Err(shape_err!(
                "flow dims {:?} do not match ground truth {:?}",
                tape.dims(p),
                g.dims()
            ));
        }
        let gv = tape.constant(g.clone());
        let d = tape.sub(p, gv)?;
        let a = tape.abs(d)?;
        let s = tape.sum(a)?;
        let m = tape.scale(s, T::one() / T::of((n * h * w) as f64))?;
        total = Some(match total {
            None => m,
            Some(acc) => tape.add(acc, m)?,
        });
    }
    Ok(total.expect("two flows"))
}

fn eval<T: Scalar>(f: impl FnOnce(&Tape<T>) -> Result<Var>) -> Result<T> {
    let tape = Tape::new();
    let v = f(&tape)?;
    tape.value(v).item()
}

/// [`rec_loss_tape`] on frames, normalized by the ground truth's white point.
pub fn rec_loss<T: Scalar>(pred: &RadianceFrame<T>, gt: &RadianceFrame<T>, mu: T) -> Result<T> {
    eval(|tape| {
        let p = tape.constant(pred.image.clone().unsqueeze0());
        rec_loss_tape(tape, p, &gt.image.clone().unsqueeze0(), gt.white_point, mu)
    })
}

/// [`halo_loss_tape`] on frames `(H_{t−1}, H_t, H_{t+1})`, normalized by the
/// reference white point.
pub fn halo_loss<T: Scalar>(
    gt: [&RadianceFrame<T>; 3],
    flows: [&FlowField<T>; 2],
    mask: &LuminanceMask<T>,
    mu: T,
) -> Result<T> {
    let [prev, cur, next] = gt;
    let active = mask.complement();
    let (_, h, w) = active.chw()?;
    let active = active.reshape(vec![1, 1, h, w])?;
    eval(|tape| {
        let f = flows.map(|f| tape.constant(f.flow.clone().unsqueeze0()));
        halo_loss_tape(
            tape,
            &cur.image.clone().unsqueeze0(),
            [&prev.image.clone().unsqueeze0(), &next.image.clone().unsqueeze0()],
            f,
            &active,
            cur.white_point,
            mu,
        )
    })
}

pub fn flow_loss<T: Scalar>(pred: [&FlowField<T>; 2], gt: [&FlowField<T>; 2]) -> Result<T> {
    eval(|tape| {
        let p = pred.map(|f| tape.constant(f.flow.clone().unsqueeze0()));
        let g = gt.map(|f| f.flow.clone().unsqueeze0());
        flow_loss_tape(tape, p, [&g[0], &g[1]])
    })
}
