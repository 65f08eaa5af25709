//! Desk-scale training: Adam over both networks, round-robin real/synthetic
//! batching, checkpoints and the single-sample overfit harness.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{augment, SourceTag, TrainingSample};
use crate::error::{invalid, Error, Result};
use crate::hdr::{well_exposed_mask, DELTA_HIGH, DELTA_LOW, MU};
use crate::losses::{flow_loss_tape, halo_loss_tape, rec_loss_tape, total_loss, LossParts, LossReport, LossWeights};
use crate::nets::{FlowNetConfig, FusionNetConfig, HdrModel};
use crate::pipeline::{pipeline_tape, reconstruct};
use crate::scalar::Scalar;
use crate::store::{TapeParams, WeightStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const STATE_HEADER: &str = "hdrflow-train-state v1";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Decoupled (AdamW-style) decay; 0 disables it.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    /// The learning rate halves once at each listed step.
    pub lr_halving_steps: Vec<usize>,
    pub loss_weights: LossWeights,
    pub mu: f64,
    /// Network width divisor used when a trainer initializes its own model.
    pub width_divisor: usize,
    /// Random flips, rotations and a square crop of this size per draw.
    pub augment_crop: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.0,
            batch_size: 1,
            max_steps: 500,
            seed: 0,
            lr_halving_steps: Vec::new(),
            loss_weights: LossWeights::default(),
            mu: MU,
            width_divisor: 4,
            augment_crop: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.betas;
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid!("learning rate must be finite and nonnegative, got {}", self.learning_rate));
        }
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(invalid!("betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) || !(self.mu > 0.0) {
            return Err(invalid!("eps and mu must be positive and weight decay nonnegative"));
        }
        if self.batch_size == 0 || self.width_divisor == 0 {
            return Err(invalid!("batch size and width divisor must be at least 1"));
        }
        self.loss_weights.validate()
    }

    /// Learning rate in effect at `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        let halvings = self.lr_halving_steps.iter().filter(|&&s| s <= step).count();
        self.learning_rate * 0.5f64.powi(halvings as i32)
    }
}

/// First and second moment estimates, one entry per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    /// Updates applied so far.
    pub step: usize,
    pub m: WeightStore<T>,
    pub v: WeightStore<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &WeightStore<T>) -> Self {
        AdamState {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One Adam update of `params` from `grads`.
pub fn adam_update<T: Scalar>(
    params: &mut WeightStore<T>,
    grads: &WeightStore<T>,
    state: &mut AdamState<T>,
    config: &TrainConfig,
) -> Result<()> {
    let lr = config.lr_at(state.step);
    state.step += 1;
    let (b1, b2) = config.betas;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let (b1, b2, eps) = (T::of(b1), T::of(b2), T::of(config.eps));
    let (step_size, c2, decay) = (T::of(lr / c1), T::of(c2), T::of(1.0 - lr * config.weight_decay));
    for (name, p) in params.iter_mut() {
        let g = grads.get(name)?;
        let m = state.m.get_mut(name)?;
        let v = state.v.get_mut(name)?;
        if g.dims() != p.dims() || m.dims() != p.dims() || v.dims() != p.dims() {
            return Err(Error::Weights(format!("optimizer state for {name} does not match the parameter")));
        }
        for (((w, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            *w = *w * decay - step_size * *m / ((*v / c2).sqrt() + eps);
        }
    }
    Ok(())
}

fn add_into<T: Scalar>(acc: &mut WeightStore<T>, g: &WeightStore<T>, scale: T) -> Result<()> {
    for (name, a) in acc.iter_mut() {
        let g = g.get(name)?;
        a.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b * scale);
    }
    Ok(())
}

fn sum_vars<T: Scalar>(tape: &Tape<T>, vars: Vec<Var>) -> Result<Var> {
    let mut it = vars.into_iter();
    let first = it.next().ok_or_else(|| invalid!("nothing to sum"))?;
    it.try_fold(first, |acc, v| tape.add(acc, v))
}

fn scalar_of<T: Scalar>(tape: &Tape<T>, v: Var) -> Result<f64> {
    Ok(tape.value(v).item()?.as_f64())
}

/// Loss variables of one sample recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossTrace {
    pub total: Var,
    pub rec: Var,
    pub ha: Var,
    /// `None` without ground-truth flow.
    pub flow: Option<Var>,
    pub mask_coverage: f64,
}

/// Records the pipeline and the weighted training loss of `sample`.
///
/// HALoss and flow loss are evaluated per flow-network call (each covering
/// two neighbors) and summed. The tonemap normalization uses the sample's
/// ground-truth white point.
pub fn loss_tape<T: Scalar>(
    tape: &Tape<T>,
    flow: (&TapeParams, &FlowNetConfig),
    fusion: (&TapeParams, &FusionNetConfig),
    sample: &TrainingSample<T>,
    config: &TrainConfig,
) -> Result<LossTrace> {
    let window = &sample.window;
    let (h, w) = (window.height(), window.width());
    let mu = T::of(config.mu);
    let wp = sample.white_point();
    let lw = &config.loss_weights;

    let gt_finite = sample.gt_hdr.iter().all(|h| h.image.is_finite())
        && sample.gt_flows.iter().flatten().all(|f| f.flow.is_finite());
    if !gt_finite {
        return Err(Error::Numeric("non-finite ground truth".into()));
    }

    let trace = pipeline_tape(tape, flow, fusion, window)?;
    let gt = |i: usize| sample.gt_hdr[i].image.clone().unsqueeze0();
    let gt_ref = gt(window.reference_index);
    let rec = rec_loss_tape(tape, trace.output, &gt_ref, wp, mu)?;

    let mask = well_exposed_mask(window.reference(), T::of(DELTA_LOW), T::of(DELTA_HIGH))?;
    let active = mask.complement().reshape(vec![1, 1, h, w])?;
    let neighbors = window.neighbor_positions();
    let slot = |p: usize| neighbors.iter().position(|&n| n == p).expect("flow pair member is a neighbor");
    let mut ha_terms = Vec::new();
    let mut flow_terms = Vec::new();
    for (a, b) in window.flow_pairs() {
        let flows = [trace.flows[slot(a)], trace.flows[slot(b)]];
        let (ga, gb) = (gt(a), gt(b));
        ha_terms.push(halo_loss_tape(tape, &gt_ref, [&ga, &gb], flows, &active, wp, mu)?);
        if let Some(gf) = &sample.gt_flows {
            let fa = gf[slot(a)].flow.clone().unsqueeze0();
            let fb = gf[slot(b)].flow.clone().unsqueeze0();
            flow_terms.push(flow_loss_tape(tape, flows, [&fa, &fb])?);
        }
    }
    let ha = sum_vars(tape, ha_terms)?;
    let flow = if flow_terms.is_empty() { None } else { Some(sum_vars(tape, flow_terms)?) };

    let mut terms = vec![tape.scale(rec, T::of(lw.lambda_rec))?, tape.scale(ha, T::of(lw.lambda_ha))?];
    if let Some(f) = flow {
        terms.push(tape.scale(f, T::of(lw.lambda_flow))?);
    }
    Ok(LossTrace {
        total: sum_vars(tape, terms)?,
        rec,
        ha,
        flow,
        mask_coverage: mask.uncovered_fraction(),
    })
}

/// Gradients of one sample's total loss with respect to both networks.
pub struct SampleGradients<T> {
    pub report: LossReport,
    pub flow: WeightStore<T>,
    pub fusion: WeightStore<T>,
}

/// Forward and backward pass of the full pipeline on one sample.
pub fn sample_gradients<T: Scalar>(
    sample: &TrainingSample<T>,
    model: &HdrModel<T>,
    config: &TrainConfig,
) -> Result<SampleGradients<T>> {
    let flow_cfg = model.flow_config()?;
    let fusion_cfg = model.fusion_config()?;
    let tape = Tape::new();
    let flow_p = model.flow.to_tape(&tape, true);
    let fusion_p = model.fusion.to_tape(&tape, true);
    let lt = loss_tape(&tape, (&flow_p, &flow_cfg), (&fusion_p, &fusion_cfg), sample, config)?;
    let parts = LossParts {
        rec: scalar_of(&tape, lt.rec)?,
        ha: scalar_of(&tape, lt.ha)?,
        flow: match lt.flow {
            Some(f) => scalar_of(&tape, f)?,
            None => 0.0,
        },
        mask_coverage: lt.mask_coverage,
    };
    let report = total_loss(&parts, &config.loss_weights, sample.has_flow_gt());
    tape.backward(lt.total)?;
    Ok(SampleGradients {
        report,
        flow: flow_p.grads(&tape),
        fusion: fusion_p.grads(&tape),
    })
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len() as f64;
    let avg = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    LossReport {
        total: avg(|r| r.total),
        rec: avg(|r| r.rec),
        ha: avg(|r| r.ha),
        flow: avg(|r| r.flow),
        mask_coverage: avg(|r| r.mask_coverage),
    }
}

fn diverged(step: usize, msg: impl Into<String>) -> Error {
    Error::Diverged { step, msg: msg.into() }
}

/// Optimizer state for both networks.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T> {
    pub flow: AdamState<T>,
    pub fusion: AdamState<T>,
}

impl<T: Scalar> ModelState<T> {
    pub fn new(model: &HdrModel<T>) -> Self {
        ModelState {
            flow: AdamState::new(&model.flow),
            fusion: AdamState::new(&model.fusion),
        }
    }

    pub fn step(&self) -> usize {
        self.flow.step
    }
}

/// One optimizer step on a batch: per-sample gradients are averaged, then
/// both networks take an Adam update. Returns the batch-mean losses.
///
/// A non-finite loss or gradient aborts with [`Error::Diverged`] and leaves
/// `model` and `state` untouched.
pub fn train_step<T: Scalar>(
    batch: &[TrainingSample<T>],
    model: &mut HdrModel<T>,
    config: &TrainConfig,
    state: &mut ModelState<T>,
) -> Result<LossReport> {
    let step = state.step();
    let first = batch.first().ok_or_else(|| invalid!("empty batch"))?;
    let arity = first.window.frames.len();
    if batch.iter().any(|s| s.window.frames.len() != arity) {
        return Err(invalid!("batch mixes window sizes"));
    }
    let mut g_flow = model.flow.zeros_like();
    let mut g_fusion = model.fusion.zeros_like();
    let mut reports = Vec::with_capacity(batch.len());
    let scale = T::of(1.0 / batch.len() as f64);
    for (i, sample) in batch.iter().enumerate() {
        let g = sample_gradients(sample, model, config).map_err(|e| match e {
            Error::Numeric(m) => diverged(step, format!("sample {i}: {m}")),
            e => e,
        })?;
        let r = g.report;
        if !r.total.is_finite() {
            return Err(diverged(
                step,
                format!("sample {i}: total={} rec={} ha={} flow={}", r.total, r.rec, r.ha, r.flow),
            ));
        }
        if !g.flow.iter().chain(g.fusion.iter()).all(|(_, t)| t.is_finite()) {
            return Err(diverged(step, format!("sample {i}: non-finite gradient at total={}", r.total)));
        }
        add_into(&mut g_flow, &g.flow, scale)?;
        add_into(&mut g_fusion, &g.fusion, scale)?;
        reports.push(r);
    }
    adam_update(&mut model.flow, &g_flow, &mut state.flow, config)?;
    adam_update(&mut model.fusion, &g_fusion, &mut state.fusion, config)?;
    Ok(mean_report(&reports))
}

/// Deterministic batch order over a sample set.
///
/// Global draw slots alternate between the real and synthetic pools when
/// both are present. Each pool is visited in a fresh seeded permutation per
/// pass, so the batch for any step is a pure function of `(seed, step)`.
#[derive(Clone, Debug)]
pub struct BatchSchedule {
    pools: Vec<Vec<usize>>,
    seed: u64,
    batch_size: usize,
}

impl BatchSchedule {
    pub fn new<T>(samples: &[TrainingSample<T>], batch_size: usize, seed: u64) -> Result<Self> {
        if samples.is_empty() || batch_size == 0 {
            return Err(invalid!("need at least one sample and a positive batch size"));
        }
        let pools: Vec<Vec<usize>> = [SourceTag::Real, SourceTag::Synthetic]
            .into_iter()
            .map(|tag| (0..samples.len()).filter(|&i| samples[i].source_tag == tag).collect::<Vec<_>>())
            .filter(|p| !p.is_empty())
            .collect();
        Ok(BatchSchedule { pools, seed, batch_size })
    }

    fn slot(&self, g: usize) -> (usize, usize) {
        let k = self.pools.len();
        let pool_id = g % k;
        let pool = &self.pools[pool_id];
        let pos = g / k;
        let pass = pos / pool.len();
        let mut order = pool.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ ((pool_id as u64) << 48) ^ pass as u64);
        order.shuffle(&mut rng);
        (order[pos % pool.len()], g)
    }

    /// `(sample index, global slot)` pairs of the batch at `step`.
    pub fn batch(&self, step: usize) -> Vec<(usize, usize)> {
        (0..self.batch_size).map(|i| self.slot(step * self.batch_size + i)).collect()
    }
}

/// Model, optimizer state and configuration of a training run.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub model: HdrModel<T>,
    pub state: ModelState<T>,
    pub config: TrainConfig,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: HdrModel<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            state: ModelState::new(&model),
            model,
            config,
        })
    }

    /// Fresh reduced-width networks sized for `candidates` fusion inputs.
    pub fn init(candidates: usize, config: TrainConfig) -> Result<Self> {
        let d = config.width_divisor;
        let model = HdrModel::init(
            &FlowNetConfig::reduced(d)?,
            &FusionNetConfig::for_candidates(candidates)?.reduced(d)?,
            config.seed,
        )?;
        Self::new(model, config)
    }

    pub fn step(&mut self, batch: &[TrainingSample<T>]) -> Result<LossReport> {
        train_step(batch, &mut self.model, &self.config, &mut self.state)
    }

    /// Runs until `max_steps` updates have been applied, drawing batches
    /// from `samples` and calling `on_step` after each update.
    pub fn run(
        &mut self,
        samples: &[TrainingSample<T>],
        mut on_step: impl FnMut(usize, &LossReport) -> Result<()>,
    ) -> Result<Vec<LossReport>> {
        let schedule = BatchSchedule::new(samples, self.config.batch_size, self.config.seed)?;
        let mut curve = Vec::new();
        while self.state.step() < self.config.max_steps {
            let step = self.state.step();
            let batch = schedule
                .batch(step)
                .into_iter()
                .map(|(i, g)| match self.config.augment_crop {
                    Some(c) => augment(&samples[i], self.config.seed.wrapping_add(g as u64), c),
                    None => Ok(samples[i].clone()),
                })
                .collect::<Result<Vec<_>>>()?;
            let r = self.step(&batch)?;
            on_step(step, &r)?;
            curve.push(r);
        }
        Ok(curve)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, &self.model, &self.state, &self.config)
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let (model, state, config) = load_checkpoint(path)?;
        config.validate()?;
        Ok(Trainer { model, state, config })
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";

/// `<path>.state`, the plain-text sidecar of a checkpoint.
pub fn state_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".state");
    PathBuf::from(s)
}

/// Writes the weights and Adam moments as one HDRW container at `path`
/// (moment tensors under `adam.m/` and `adam.v/`) and the step counter and
/// configuration to the sidecar [`state_path`].
pub fn save_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
    model: &HdrModel<T>,
    state: &ModelState<T>,
    config: &TrainConfig,
) -> Result<()> {
    let path = path.as_ref();
    if state.flow.step != state.fusion.step {
        return Err(invalid!("flow and fusion optimizers disagree on the step count"));
    }
    let mut store = model.combined();
    let moments = HdrModel {
        flow: state.flow.m.clone(),
        fusion: state.fusion.m.clone(),
    };
    store.extend_prefixed(M_PREFIX, &moments.combined())?;
    let moments = HdrModel {
        flow: state.flow.v.clone(),
        fusion: state.fusion.v.clone(),
    };
    store.extend_prefixed(V_PREFIX, &moments.combined())?;
    store.save(path)?;
    let sp = state_path(path);
    fs::write(&sp, render_state(state.step(), config)).map_err(|e| Error::io(&sp, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(HdrModel<T>, ModelState<T>, TrainConfig)> {
    let path = path.as_ref();
    let sp = state_path(path);
    let text = fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
    let (step, config) = parse_state(&text, &sp)?;
    let store = WeightStore::<T>::load(path)?;
    let mut weights = WeightStore::new();
    for (k, v) in store.iter() {
        if !k.starts_with(M_PREFIX) && !k.starts_with(V_PREFIX) {
            weights.insert(k, v.clone())?;
        }
    }
    let model = HdrModel::from_combined(&weights)?;
    let m = HdrModel::from_combined(&store.strip_prefix(M_PREFIX))?;
    let v = HdrModel::from_combined(&store.strip_prefix(V_PREFIX))?;
    let state = ModelState {
        flow: AdamState { step, m: m.flow, v: v.flow },
        fusion: AdamState { step, m: m.fusion, v: v.fusion },
    };
    Ok((model, state, config))
}

fn render_state(step: usize, c: &TrainConfig) -> String {
    let mut s = format!("{STATE_HEADER}\n");
    let halvings: Vec<String> = c.lr_halving_steps.iter().map(|s| s.to_string()).collect();
    let lw = &c.loss_weights;
    let fields: [(&str, String); 15] = [
        ("step", step.to_string()),
        ("learning_rate", c.learning_rate.to_string()),
        ("beta1", c.betas.0.to_string()),
        ("beta2", c.betas.1.to_string()),
        ("eps", c.eps.to_string()),
        ("weight_decay", c.weight_decay.to_string()),
        ("batch_size", c.batch_size.to_string()),
        ("max_steps", c.max_steps.to_string()),
        ("seed", c.seed.to_string()),
        ("lr_halving_steps", halvings.join(",")),
        ("lambda_rec", lw.lambda_rec.to_string()),
        ("lambda_ha", lw.lambda_ha.to_string()),
        ("lambda_flow", lw.lambda_flow.to_string()),
        ("mu", c.mu.to_string()),
        ("width_divisor", c.width_divisor.to_string()),
    ];
    for (k, v) in fields {
        writeln!(s, "{k}={v}").unwrap();
    }
    writeln!(s, "augment_crop={}", c.augment_crop.map_or("none".to_string(), |v| v.to_string())).unwrap();
    s
}

fn parse_state(text: &str, path: &Path) -> Result<(usize, TrainConfig)> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(STATE_HEADER) {
        return Err(Error::format(path, format!("expected header {STATE_HEADER:?}")));
    }
    let mut kv = std::collections::HashMap::new();
    for line in lines.map(str::trim).filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("expected key=value, got {line:?}")))?;
        kv.insert(k, v);
    }
    fn get<V: std::str::FromStr>(kv: &std::collections::HashMap<&str, &str>, k: &str, path: &Path) -> Result<V> {
        kv.get(k)
            .ok_or_else(|| Error::format(path, format!("missing {k}")))?
            .parse()
            .map_err(|_| Error::format(path, format!("invalid {k}")))
    }
    let halvings: &str = kv.get("lr_halving_steps").copied().unwrap_or("");
    let lr_halving_steps = halvings
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::format(path, "invalid lr_halving_steps")))
        .collect::<Result<Vec<usize>>>()?;
    let augment_crop = match kv.get("augment_crop").copied() {
        None | Some("none") => None,
        Some(v) => Some(v.parse().map_err(|_| Error::format(path, "invalid augment_crop"))?),
    };
    let config = TrainConfig {
        learning_rate: get(&kv, "learning_rate", path)?,
        betas: (get(&kv, "beta1", path)?, get(&kv, "beta2", path)?),
        eps: get(&kv, "eps", path)?,
        weight_decay: get(&kv, "weight_decay", path)?,
        batch_size: get(&kv, "batch_size", path)?,
        max_steps: get(&kv, "max_steps", path)?,
        seed: get(&kv, "seed", path)?,
        lr_halving_steps,
        loss_weights: LossWeights {
            lambda_rec: get(&kv, "lambda_rec", path)?,
            lambda_ha: get(&kv, "lambda_ha", path)?,
            lambda_flow: get(&kv, "lambda_flow", path)?,
        },
        mu: get(&kv, "mu", path)?,
        width_divisor: get(&kv, "width_divisor", path)?,
        augment_crop,
    };
    Ok((get(&kv, "step", path)?, config))
}

// ---------------------------------------------------------------------------
// Overfit harness

/// Outcome of [`overfit_tiny`].
#[derive(Clone, Debug)]
pub struct OverfitReport<T> {
    /// Batch losses, one per step.
    pub curve: Vec<LossReport>,
    pub model: HdrModel<T>,
}

impl<T: Scalar> OverfitReport<T> {
    /// `1 − final/initial` of the total loss.
    pub fn reduction(&self) -> f64 {
        match (self.curve.first(), self.curve.last()) {
            (Some(a), Some(b)) if a.total > 0.0 => 1.0 - b.total / a.total,
            _ => 0.0,
        }
    }

    /// Mean endpoint error of the trained flows against the sample's ground
    /// truth, averaged over neighbors.
    pub fn flow_epe(&self, sample: &TrainingSample<T>) -> Result<f64> {
        let gt = sample
            .gt_flows
            .as_ref()
            .ok_or_else(|| invalid!("sample has no ground-truth flow"))?;
        let rec = reconstruct(&sample.window, &self.model)?;
        let mut total = 0.0;
        for (p, g) in rec.flows.iter().zip(gt) {
            total += p.mean_epe(g)?;
        }
        Ok(total / gt.len() as f64)
    }
}

/// Repeatedly trains fresh reduced-width networks on one sample.
///
/// Stops with [`Error::Diverged`] once the loss exceeds ten times its
/// initial value.
pub fn overfit_tiny<T: Scalar>(
    sample: &TrainingSample<T>,
    config: &TrainConfig,
    mut on_step: impl FnMut(usize, &LossReport),
) -> Result<OverfitReport<T>> {
    let mut trainer = Trainer::init(sample.window.candidate_count(), config.clone())?;
    let batch = std::slice::from_ref(sample);
    let mut curve: Vec<LossReport> = Vec::with_capacity(config.max_steps);
    for step in 0..config.max_steps {
        let r = trainer.step(batch)?;
        on_step(step, &r);
        if let Some(first) = curve.first() {
            if r.total > 10.0 * first.total {
                return Err(diverged(
                    step,
                    format!("loss {} exceeds ten times the initial {}", r.total, first.total),
                ));
            }
        }
        curve.push(r);
    }
    Ok(OverfitReport {
        curve,
        model: trainer.model,
    })
}

/// Moving average of `values` over `window` consecutive entries.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    values.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}

/// Whether the `window`-smoothed curve never increases.
pub fn smoothed_monotone(values: &[f64], window: usize) -> bool {
    smooth(values, window).windows(2).all(|p| p[1] <= p[0])
}

/// Sum of `|Δ|` between two stores with identical names and shapes.
pub fn store_delta<T: Scalar>(a: &WeightStore<T>, b: &WeightStore<T>) -> Result<f64> {
    let mut d = 0.0;
    for (k, t) in a.iter() {
        let u: &Tensor<T> = b.get(k)?;
        d += t.data().iter().zip(u.data()).map(|(x, y)| (x.as_f64() - y.as_f64()).abs()).sum::<f64>();
    }
    Ok(d)
}
