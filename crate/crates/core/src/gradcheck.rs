//! Finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use std::str::FromStr;

use rand::Rng;

use crate::data::{synthesize_window, SourceTag, SynthMode, TrainingSample};
use crate::error::{invalid, Error, Result};
use crate::flow::FlowField;
use crate::hdr::{ExposureSchedule, RadianceFrame, MU};
use crate::losses::{flow_loss_tape, halo_loss_tape, rec_loss_tape};
use crate::nets::{flownet_tape, fusionnet_tape, FlowNetConfig, FusionNetConfig, HdrModel};
use crate::pipeline::pipeline_tape;
use crate::store::{TapeParams, WeightStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::train::{loss_tape, TrainConfig};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Denominator floor so that near-zero gradients are compared absolutely.
    pub floor: f64,
    /// Coordinates probed per input; `None` probes all of them.
    pub max_probes: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-6,
            tolerance: 1e-3,
            floor: 1e-4,
            max_probes: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub probes: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of the scalar `f(inputs)` against central
/// differences for every input tensor.
pub fn check<F>(
    name: &str,
    inputs: &[Tensor<f64>],
    opts: &GradCheckOptions,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    if inputs.is_empty() {
        return Err(invalid!("gradient check needs at least one input"));
    }
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.dims().to_vec())))
        .collect();
    drop(tape);

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&tape, &vars)?;
        tape.value(out).item()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = inputs.to_vec();
    let mut report = GradCheckReport {
        name: name.to_string(),
        probes: 0,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        tolerance: opts.tolerance,
    };
    for k in 0..inputs.len() {
        let n = inputs[k].numel();
        let mut idx: Vec<usize> = match opts.max_probes {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        idx.sort_unstable();
        for i in idx {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + opts.step;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - opts.step;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic[k].data()[i];
            report.probes += 1;
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            report.max_rel_err = report.max_rel_err.max(relative_error(a, numeric, opts.floor));
        }
    }
    Ok(report)
}

/// Named groups of end-to-end checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    All,
    /// Each loss term and the weighted total through both networks.
    Losses,
    /// Both networks and the assembled pipeline.
    Networks,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Suite::All),
            "losses" => Ok(Suite::Losses),
            "networks" => Ok(Suite::Networks),
            _ => Err(invalid!("unknown gradient-check module {s:?}; expected all, losses or networks")),
        }
    }
}

/// Side length of the suite's images.
pub const SUITE_SIZE: usize = 16;
/// Width divisor of the suite's networks.
pub const SUITE_DIVISOR: usize = 8;

fn uniform(dims: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(dims.to_vec(), |_| rng.random_range(lo..hi))
}

/// A 2-exposure sample of log-uniform radiance with random ground-truth flow.
pub fn suite_sample(seed: u64) -> Result<TrainingSample<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = SUITE_SIZE;
    let gt = (0..3)
        .map(|_| {
            let img = uniform(&[3, n, n], &mut rng, 0.003f64.ln(), 0.95f64.ln()).map(f64::exp);
            RadianceFrame::new(img, 1.0)
        })
        .collect::<Result<Vec<_>>>()?;
    let window = synthesize_window(&gt, &ExposureSchedule::two_exposure(), 0, SynthMode::Continuous)?;
    let flows = [0, 2]
        .into_iter()
        .map(|k| FlowField::new(uniform(&[2, n, n], &mut rng, -1.5, 1.5), 1, k))
        .collect::<Result<Vec<_>>>()?;
    TrainingSample::new(window, gt, Some(flows), SourceTag::Synthetic)
}

/// Seeded reduced-width networks for the suite's 2-exposure windows.
///
/// Biases are drawn from `±0.05` instead of zero: with zero biases, output
/// positions fed only by inactive units sit exactly on a ReLU kink, where
/// central differences are meaningless.
pub fn suite_model(seed: u64) -> Result<HdrModel<f64>> {
    let mut m = HdrModel::init(
        &FlowNetConfig::reduced(SUITE_DIVISOR)?,
        &FusionNetConfig::for_candidates(5)?.reduced(SUITE_DIVISOR)?,
        seed,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    for store in [&mut m.flow, &mut m.fusion] {
        for (name, t) in store.iter_mut() {
            if name.ends_with(".bias") {
                t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.05..0.05));
            }
        }
    }
    Ok(m)
}

/// Sum of `x` weighted by fixed random coefficients.
fn project(tape: &Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = tape.constant(uniform(&tape.dims(x), &mut rng, -1.0, 1.0));
    let p = tape.mul(x, c)?;
    tape.sum(p)
}

fn params_of(store: &WeightStore<f64>, vars: &[Var]) -> TapeParams {
    TapeParams::from_vars(store.names().zip(vars.iter().copied()))
}

fn tensors_of(store: &WeightStore<f64>) -> Vec<Tensor<f64>> {
    store.iter().map(|(_, t)| t.clone()).collect()
}

/// Runs the checks of `suite` on 16x16 inputs with reduced-width networks.
pub fn run_suite(suite: Suite, opts: &GradCheckOptions) -> Result<Vec<GradCheckReport>> {
    let sample = suite_sample(opts.seed)?;
    let model = suite_model(opts.seed)?;
    let flow_cfg = model.flow_config()?;
    let fusion_cfg = model.fusion_config()?;
    let wp = sample.white_point();
    let gt = |i: usize| sample.gt_hdr[i].image.clone().unsqueeze0();
    let gt_flow = |i: usize| sample.gt_flows.as_ref().expect("suite sample has flow")[i].flow.clone().unsqueeze0();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let n = SUITE_SIZE;
    let config = TrainConfig::default();
    let mut out = Vec::new();

    if matches!(suite, Suite::All | Suite::Losses) {
        let pred = uniform(&[1, 3, n, n], &mut rng, 0.01, 1.2);
        out.push(check("rec_loss", &[pred], opts, |t, v| rec_loss_tape(t, v[0], &gt(1), wp, MU))?);

        let flows = [uniform(&[1, 2, n, n], &mut rng, -2.0, 2.0), uniform(&[1, 2, n, n], &mut rng, -2.0, 2.0)];
        let active = Tensor::from_fn(vec![1, 1, n, n], |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
        out.push(check("ha_loss", &flows, opts, |t, v| {
            halo_loss_tape(t, &gt(1), [&gt(0), &gt(2)], [v[0], v[1]], &active, wp, MU)
        })?);
        out.push(check("flow_loss", &flows, opts, |t, v| {
            flow_loss_tape(t, [v[0], v[1]], [&gt_flow(0), &gt_flow(1)])
        })?);

        let mut inputs = tensors_of(&model.flow);
        inputs.extend(tensors_of(&model.fusion));
        let nf = model.flow.len();
        out.push(check("total_loss", &inputs, opts, |t, v| {
            let fp = params_of(&model.flow, &v[..nf]);
            let up = params_of(&model.fusion, &v[nf..]);
            Ok(loss_tape(t, (&fp, &flow_cfg), (&up, &fusion_cfg), &sample, &config)?.total)
        })?);
    }

    if matches!(suite, Suite::All | Suite::Networks) {
        let mut inputs = vec![uniform(&[1, 9, n, n], &mut rng, 0.0, 1.0)];
        inputs.extend(tensors_of(&model.flow));
        out.push(check("flow_net", &inputs, opts, |t, v| {
            let tr = flownet_tape(t, &params_of(&model.flow, &v[1..]), &flow_cfg, v[0])?;
            let a = project(t, tr.flows[0], 1)?;
            let b = project(t, tr.flows[1], 2)?;
            t.add(a, b)
        })?);

        let mut inputs = vec![uniform(&[1, 30, n, n], &mut rng, 0.0, 1.0)];
        inputs.extend(tensors_of(&model.fusion));
        out.push(check("fusion_net", &inputs, opts, |t, v| {
            let w = fusionnet_tape(t, &params_of(&model.fusion, &v[1..]), &fusion_cfg, v[0])?;
            project(t, w, 3)
        })?);

        let mut inputs = tensors_of(&model.flow);
        inputs.extend(tensors_of(&model.fusion));
        let nf = model.flow.len();
        out.push(check("pipeline", &inputs, opts, |t, v| {
            let fp = params_of(&model.flow, &v[..nf]);
            let up = params_of(&model.fusion, &v[nf..]);
            let tr = pipeline_tape(t, (&fp, &flow_cfg), (&up, &fusion_cfg), &sample.window)?;
            project(t, tr.output, 4)
        })?);
    }
    Ok(out)
}
