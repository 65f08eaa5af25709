//! Window-level reconstruction: exposure matching, flow estimation,
//! alignment, fusion-input assembly and weighted fusion.
//!
//! Fusion input order (part of the weight-file contract): all LDR images
//! first, then their linear counterparts, each group ordered as
//! `[reference, aligned neighbors…, original neighbors…]` with neighbors in
//! ascending time. Two exposures: neighbors `t−1, t+1` (5 images, 30 channels).
//! Three exposures: `t−2, t−1, t+1, t+2` (9 images, 54 channels).

use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::error::{invalid, shape_err, Result};
use crate::flow::FlowField;
use crate::hdr::{adjust_exposure, ldr_to_linear, ExposureSchedule, LdrFrame, RadianceFrame};
use crate::nets::{flownet_tape, fusionnet_tape, FlowNetConfig, FlowTrace, FusionNetConfig, HdrModel, FUSION_EPS};
use crate::scalar::Scalar;
use crate::store::TapeParams;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Consecutive frames centred on the reference.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceWindow<T> {
    pub frames: Vec<LdrFrame<T>>,
    pub reference_index: usize,
    pub schedule: ExposureSchedule<T>,
}

impl<T: Scalar> SequenceWindow<T> {
    pub fn new(frames: Vec<LdrFrame<T>>, schedule: ExposureSchedule<T>) -> Result<Self> {
        let n = schedule.window_len();
        if frames.len() != n {
            return Err(invalid!(
                "a {}-exposure window needs {n} frames, got {}",
                schedule.len(),
                frames.len()
            ));
        }
        let exposures: Vec<T> = frames.iter().map(|f| f.exposure).collect();
        if schedule.phase_of(&exposures).is_none() {
            return Err(invalid!(
                "frame exposures {exposures:?} do not follow the schedule {:?}",
                schedule.pattern()
            ));
        }
        let dims = frames[0].image.dims();
        if let Some(f) = frames.iter().find(|f| f.image.dims() != dims) {
            return Err(shape_err!(
                "window frames differ in size: {:?} vs {dims:?}",
                f.image.dims()
            ));
        }
        Ok(SequenceWindow {
            frames,
            reference_index: n / 2,
            schedule,
        })
    }

    pub fn reference(&self) -> &LdrFrame<T> {
        &self.frames[self.reference_index]
    }

    /// Window positions of the neighbors, ascending.
    pub fn neighbor_positions(&self) -> Vec<usize> {
        (0..self.frames.len()).filter(|&i| i != self.reference_index).collect()
    }

    /// Pairs of same-exposure neighbors fed to one flow-network call, as
    /// `(first, last)` window positions: `(0, 2)` for two exposures,
    /// `(0, 3)` and `(1, 4)` for three.
    pub fn flow_pairs(&self) -> Vec<(usize, usize)> {
        let k = self.schedule.len();
        (0..k - 1).map(|i| (i, i + k)).collect()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }

    /// Number of fused candidates: the reference plus aligned and original neighbors.
    pub fn candidate_count(&self) -> usize {
        2 * self.frames.len() - 1
    }

    /// Radiance that saturates the shortest exposure in the window.
    pub fn white_point(&self) -> T {
        let e = self
            .frames
            .iter()
            .map(|f| f.exposure)
            .fold(T::infinity(), |a, b| a.min(b));
        T::one() / e
    }

    /// Human-readable labels of the candidates in fusion order.
    pub fn candidate_labels(&self) -> Vec<String> {
        let r = self.reference_index as isize;
        let rel = |i: usize| {
            let d = i as isize - r;
            if d < 0 {
                format!("t{d}")
            } else {
                format!("t+{d}")
            }
        };
        let mut v = vec!["ref t".to_string()];
        v.extend(self.neighbor_positions().into_iter().map(|i| format!("aligned {}", rel(i))));
        v.extend(self.neighbor_positions().into_iter().map(|i| format!("original {}", rel(i))));
        v
    }
}

/// The fusion network's input images, in contract order.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionInput<T> {
    pub ldr_stack: Vec<Tensor<T>>,
    pub linear_stack: Vec<Tensor<T>>,
    pub channel_order: Vec<String>,
}

impl<T: Scalar> FusionInput<T> {
    /// `[6K, H, W]` with LDR images first.
    pub fn to_tensor(&self) -> Result<Tensor<T>> {
        let all: Vec<Tensor<T>> = self.ldr_stack.iter().chain(&self.linear_stack).map(batched).collect();
        let refs: Vec<&Tensor<T>> = all.iter().collect();
        Tensor::concat_channels(&refs)?.squeeze0()
    }
}

/// Tape variables of one pipeline evaluation.
#[derive(Clone, Debug)]
pub struct PipelineTrace {
    /// One trace per flow-network call.
    pub invocations: Vec<FlowTrace>,
    /// `F_{t→n}` for each neighbor, in ascending neighbor order.
    pub flows: Vec<Var>,
    pub ldr_candidates: Vec<Var>,
    pub linear_candidates: Vec<Var>,
    pub fusion_input: Var,
    pub weights: Var,
    pub output: Var,
}

fn batched<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    t.clone().unsqueeze0()
}

/// Records the full reconstruction of `window` on `tape`.
pub fn pipeline_tape<T: Scalar>(
    tape: &Tape<T>,
    flow: (&TapeParams, &FlowNetConfig),
    fusion: (&TapeParams, &FusionNetConfig),
    window: &SequenceWindow<T>,
) -> Result<PipelineTrace> {
    let k = window.candidate_count();
    if fusion.1.out_weights != k {
        return Err(invalid!(
            "fusion network blends {} candidates but the window provides {k}",
            fusion.1.out_weights
        ));
    }
    let gamma = window.schedule.gamma;
    let reference = window.reference();
    let ldr: Vec<Var> = window.frames.iter().map(|f| tape.constant(batched(&f.image))).collect();
    let linear: Vec<Var> = window
        .frames
        .iter()
        .map(|f| Ok(tape.constant(batched(&ldr_to_linear(f, gamma)?.image))))
        .collect::<Result<_>>()?;

    let mut flow_of = vec![None; window.frames.len()];
    let mut invocations = Vec::new();
    for (a, b) in window.flow_pairs() {
        let g = adjust_exposure(reference, window.frames[b].exposure, gamma)?;
        let g = tape.constant(batched(&g.image));
        let input = tape.concat_channels(&[ldr[a], g, ldr[b]])?;
        let tr = flownet_tape(tape, flow.0, flow.1, input)?;
        flow_of[a] = Some(tr.flows[0]);
        flow_of[b] = Some(tr.flows[1]);
        invocations.push(tr);
    }
    let neighbors = window.neighbor_positions();
    let flows: Vec<Var> = neighbors.iter().map(|&i| flow_of[i].expect("every neighbor paired")).collect();

    let r = window.reference_index;
    let mut ldr_c = vec![ldr[r]];
    let mut lin_c = vec![linear[r]];
    for (&i, &f) in neighbors.iter().zip(&flows) {
        ldr_c.push(tape.warp(ldr[i], f)?);
        lin_c.push(tape.warp(linear[i], f)?);
    }
    for &i in &neighbors {
        ldr_c.push(ldr[i]);
        lin_c.push(linear[i]);
    }
    let all: Vec<Var> = ldr_c.iter().chain(&lin_c).copied().collect();
    let fusion_input = tape.concat_channels(&all)?;
    let weights = fusionnet_tape(tape, fusion.0, fusion.1, fusion_input)?;
    let output = tape.fuse(weights, &lin_c, T::of(FUSION_EPS))?;
    Ok(PipelineTrace {
        invocations,
        flows,
        ldr_candidates: ldr_c,
        linear_candidates: lin_c,
        fusion_input,
        weights,
        output,
    })
}

/// Result of reconstructing one window.
#[derive(Clone, Debug)]
pub struct Reconstruction<T> {
    pub hdr: RadianceFrame<T>,
    /// `[K, H, W]` fusion weights.
    pub weights: Tensor<T>,
    /// `F_{t→n}` per neighbor, ascending.
    pub flows: Vec<FlowField<T>>,
    pub fusion_input: FusionInput<T>,
}

/// Reconstructs the reference frame of a window of either arity.
pub fn reconstruct<T: Scalar>(window: &SequenceWindow<T>, model: &HdrModel<T>) -> Result<Reconstruction<T>> {
    let flow_cfg = model.flow_config()?;
    let fusion_cfg = model.fusion_config()?;
    let tape = Tape::new();
    let fp = model.flow.to_tape(&tape, false);
    let up = model.fusion.to_tape(&tape, false);
    let tr = pipeline_tape(&tape, (&fp, &flow_cfg), (&up, &fusion_cfg), window)?;
    let value = |v: Var| tape.value(v).as_ref().clone().squeeze0();
    let r = window.reference_index;
    let neighbors = window.neighbor_positions();
    let flows = tr
        .flows
        .iter()
        .zip(&neighbors)
        .map(|(&f, &n)| {
            FlowField::new(
                value(f)?,
                window.frames[r].frame_index,
                window.frames[n].frame_index,
            )
        })
        .collect::<Result<_>>()?;
    let fusion_input = FusionInput {
        ldr_stack: tr.ldr_candidates.iter().map(|&v| value(v)).collect::<Result<_>>()?,
        linear_stack: tr.linear_candidates.iter().map(|&v| value(v)).collect::<Result<_>>()?,
        channel_order: window.candidate_labels(),
    };
    let out = value(tr.output)?;
    out.check_finite("reconstruction")?;
    Ok(Reconstruction {
        hdr: RadianceFrame::new(out, window.white_point())?,
        weights: value(tr.weights)?,
        flows,
        fusion_input,
    })
}

pub fn reconstruct_2exp<T: Scalar>(window: &SequenceWindow<T>, model: &HdrModel<T>) -> Result<Reconstruction<T>> {
    if window.frames.len() != 3 {
        return Err(invalid!("two-exposure reconstruction needs a 3-frame window"));
    }
    reconstruct(window, model)
}

pub fn reconstruct_3exp<T: Scalar>(window: &SequenceWindow<T>, model: &HdrModel<T>) -> Result<Reconstruction<T>> {
    if window.frames.len() != 5 {
        return Err(invalid!("three-exposure reconstruction needs a 5-frame window"));
    }
    reconstruct(window, model)
}

/// One reconstructed frame of a sequence.
#[derive(Clone, Debug)]
pub struct FrameOutput<T> {
    /// Sequence position of the reference frame.
    pub index: usize,
    pub hdr: RadianceFrame<T>,
    pub elapsed: Duration,
}

#[derive(Clone, Debug)]
pub struct SequenceOutput<T> {
    pub frames: Vec<FrameOutput<T>>,
    /// Sequence positions without a complete window.
    pub skipped: Vec<usize>,
}

/// Sequence positions that can serve as references, and those that cannot.
pub fn reference_indices(len: usize, window_len: usize) -> (Vec<usize>, Vec<usize>) {
    let r = window_len / 2;
    (0..len).partition(|&i| i >= r && i + r < len)
}

/// Reconstructs every frame that has a complete window, using up to
/// `threads` workers. Output order and values do not depend on `threads`;
/// `sink` sees frames in ascending order.
pub fn process_sequence<T: Scalar>(
    frames: &[LdrFrame<T>],
    schedule: &ExposureSchedule<T>,
    model: &HdrModel<T>,
    threads: usize,
    mut sink: impl FnMut(&FrameOutput<T>) -> Result<()>,
) -> Result<SequenceOutput<T>> {
    let n = schedule.window_len();
    if frames.len() < n {
        return Err(invalid!(
            "a {}-exposure sequence needs at least {n} frames, got {}",
            schedule.len(),
            frames.len()
        ));
    }
    let exposures: Vec<T> = frames.iter().map(|f| f.exposure).collect();
    if schedule.phase_of(&exposures).is_none() {
        return Err(invalid!(
            "sequence exposures do not cycle through {:?}",
            schedule.pattern()
        ));
    }
    let (refs, skipped) = reference_indices(frames.len(), n);
    let r = n / 2;
    let run = |&t: &usize| -> Result<FrameOutput<T>> {
        let start = Instant::now();
        let window = SequenceWindow::new(frames[t - r..=t + r].to_vec(), schedule.clone())?;
        let rec = reconstruct(&window, model)?;
        Ok(FrameOutput {
            index: t,
            hdr: rec.hdr,
            elapsed: start.elapsed(),
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| invalid!("cannot start worker pool: {e}"))?;
    let outputs: Vec<FrameOutput<T>> = pool.install(|| refs.par_iter().map(run).collect::<Result<_>>())?;
    for o in &outputs {
        sink(o)?;
    }
    Ok(SequenceOutput {
        frames: outputs,
        skipped,
    })
}
