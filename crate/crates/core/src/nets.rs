//! The flow network and the fusion U-Net.
//!
//! Each network is described by a flat layer table (name, geometry, kind).
//! The same table drives initialization, shape validation of loaded weights,
//! and the forward passes, so names cannot drift apart.
//!
//! Parameter names are `<layer>.weight` and `<layer>.bias`.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, shape_err, Error, Result};
use crate::flow::FlowField;
use crate::hdr::RadianceFrame;
use crate::ops::{self, ConvSpec};
use crate::scalar::Scalar;
use crate::store::{TapeParams, WeightStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Guard added to the fusion denominator.
pub const FUSION_EPS: f64 = 1e-6;
/// Scale of the flow head's output weights at initialization.
pub const FLOW_HEAD_GAIN: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Deconv,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerDef {
    pub name: String,
    pub spec: ConvSpec,
    pub kind: LayerKind,
}

impl LayerDef {
    fn conv(name: impl Into<String>, spec: ConvSpec) -> Self {
        LayerDef {
            name: name.into(),
            spec,
            kind: LayerKind::Conv,
        }
    }

    fn deconv(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        LayerDef {
            name: name.into(),
            spec: ConvSpec::deconv(cin, cout),
            kind: LayerKind::Deconv,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        match self.kind {
            LayerKind::Conv => self.spec.weight_dims(),
            LayerKind::Deconv => self.spec.deconv_weight_dims(),
        }
    }

    /// Inputs contributing to one output value. For a stride-s transposed
    /// convolution each output sees `in · kh · kw / s²` inputs.
    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Conv => self.spec.fan_in(),
            LayerKind::Deconv => {
                let s = self.spec.stride * self.spec.stride;
                (self.spec.in_channels * self.spec.kernel_h * self.spec.kernel_w / s).max(1)
            }
        }
    }
}

/// Kaiming-normal weights (`std = sqrt(2 / fan_in)`) and zero biases, drawn in
/// layer-table order from a ChaCha8 stream seeded with `seed`.
pub fn init_layers<T: Scalar>(layers: &[LayerDef], seed: u64) -> WeightStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = WeightStore::new();
    for l in layers {
        let std = (2.0 / l.fan_in() as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let w = Tensor::from_fn(l.weight_dims().to_vec(), |_| T::of(normal.sample(&mut rng)));
        store.insert(l.weight_name(), w).expect("unique layer names");
        store
            .insert(l.bias_name(), Tensor::zeros(vec![l.spec.out_channels]))
            .expect("unique layer names");
    }
    store
}

/// Checks that `store` holds exactly the parameters of `layers` with the right dims.
pub fn validate_store<T: Scalar>(layers: &[LayerDef], store: &WeightStore<T>) -> Result<()> {
    for l in layers {
        let w = store.get(&l.weight_name())?;
        if w.dims() != l.weight_dims() {
            return Err(Error::Weights(format!(
                "{}: dims {:?}, expected {:?}",
                l.weight_name(),
                w.dims(),
                l.weight_dims()
            )));
        }
        let b = store.get(&l.bias_name())?;
        if b.dims() != [l.spec.out_channels] {
            return Err(Error::Weights(format!(
                "{}: dims {:?}, expected [{}]",
                l.bias_name(),
                b.dims(),
                l.spec.out_channels
            )));
        }
    }
    if store.len() != 2 * layers.len() {
        let known: std::collections::HashSet<String> = layers
            .iter()
            .flat_map(|l| [l.weight_name(), l.bias_name()])
            .collect();
        let extra: Vec<&str> = store.names().filter(|n| !known.contains(*n)).collect();
        return Err(Error::Weights(format!("unexpected parameters {extra:?}")));
    }
    Ok(())
}

fn dim_of<T: Scalar>(store: &WeightStore<T>, name: &str, axis: usize) -> Result<usize> {
    store
        .get(name)?
        .dims()
        .get(axis)
        .copied()
        .ok_or_else(|| Error::Weights(format!("{name} has too few dims")))
}

fn divide(c: usize, divisor: usize) -> usize {
    (c / divisor).max(1)
}

/// Applies layers from a table to tape variables.
struct Layers<'a, T: Scalar> {
    tape: &'a Tape<T>,
    params: &'a TapeParams,
    table: IndexMap<String, LayerDef>,
}

impl<'a, T: Scalar> Layers<'a, T> {
    fn new(tape: &'a Tape<T>, params: &'a TapeParams, defs: Vec<LayerDef>) -> Self {
        Layers {
            tape,
            params,
            table: defs.into_iter().map(|d| (d.name.clone(), d)).collect(),
        }
    }

    fn apply(&self, name: &str, x: Var) -> Result<Var> {
        let def = self
            .table
            .get(name)
            .ok_or_else(|| Error::Weights(format!("no layer named {name}")))?;
        let w = self.params.get(&def.weight_name())?;
        let b = self.params.get(&def.bias_name())?;
        match def.kind {
            LayerKind::Conv => self.tape.conv2d(x, w, Some(b), def.spec),
            LayerKind::Deconv => self.tape.deconv2d(x, w, Some(b), def.spec),
        }
    }

    fn apply_relu(&self, name: &str, x: Var) -> Result<Var> {
        let y = self.apply(name, x)?;
        self.tape.relu(y)
    }
}

// ---------------------------------------------------------------------------
// Flow network

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlowNetConfig {
    pub in_channels: usize,
    pub pyramid_channels: [usize; 4],
    pub mlk_kernels: [usize; 3],
    pub decoder_channels: [usize; 2],
    /// Hidden widths of the first two 5×5 head convolutions.
    pub head_channels: [usize; 2],
}

impl Default for FlowNetConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl FlowNetConfig {
    pub const HEAD_KERNEL: usize = 5;
    pub const OUT_CHANNELS: usize = 4;

    pub fn full() -> Self {
        FlowNetConfig {
            in_channels: 9,
            pyramid_channels: [32, 64, 128, 256],
            mlk_kernels: [7, 9, 11],
            decoder_channels: [128, 64],
            head_channels: [64, 32],
        }
    }

    /// Full configuration with every width divided by `divisor`.
    pub fn reduced(divisor: usize) -> Result<Self> {
        if divisor == 0 {
            return Err(invalid!("width divisor must be positive"));
        }
        let f = Self::full();
        Ok(FlowNetConfig {
            pyramid_channels: f.pyramid_channels.map(|c| divide(c, divisor)),
            decoder_channels: f.decoder_channels.map(|c| divide(c, divisor)),
            head_channels: f.head_channels.map(|c| divide(c, divisor)),
            ..f
        })
    }

    pub fn layers(&self) -> Vec<LayerDef> {
        let [c1, c2, c3, c4] = self.pyramid_channels;
        let img = self.in_channels;
        let [d1, d2] = self.decoder_channels;
        let [h1, h2] = self.head_channels;
        let mut v = Vec::new();
        // inputs to each scale: the previous scale's output, concatenated
        // with the pooled image from 1/4 on
        let ins = [img, c1, c2 + img, c3 + img];
        for (s, (&cin, &c)) in ins.iter().zip(&self.pyramid_channels).enumerate() {
            let p = format!("enc.s{}", s + 1);
            v.push(LayerDef::conv(format!("{p}.b0.conv1"), ConvSpec::same(cin, c, 3).with_stride(2)));
            v.push(LayerDef::conv(format!("{p}.b0.conv2"), ConvSpec::same(c, c, 3)));
            v.push(LayerDef::conv(format!("{p}.b0.proj"), ConvSpec::same(cin, c, 1).with_stride(2)));
            v.push(LayerDef::conv(format!("{p}.b1.conv1"), ConvSpec::same(c, c, 3)));
            v.push(LayerDef::conv(format!("{p}.b1.conv2"), ConvSpec::same(c, c, 3)));
        }
        v.push(LayerDef::conv("enc.out", ConvSpec::same(c4 + img, c4, 1)));
        for (i, &k) in self.mlk_kernels.iter().enumerate() {
            v.push(LayerDef::conv(format!("mlk.dw{i}"), ConvSpec::depthwise(c4, k)));
        }
        v.push(LayerDef::conv("mlk.merge", ConvSpec::same(3 * c4, c4, 1)));
        for (i, (cin, skip, d)) in [(c4, c3 + img, d1), (d1, c2 + img, d2)].into_iter().enumerate() {
            let p = format!("dec.up{}", i + 1);
            v.push(LayerDef::deconv(format!("{p}.deconv"), cin, d));
            v.push(LayerDef::conv(format!("{p}.merge"), ConvSpec::same(d + skip, d, 1)));
            v.push(LayerDef::conv(format!("{p}.conv"), ConvSpec::same(d, d, 3)));
        }
        let k = Self::HEAD_KERNEL;
        v.push(LayerDef::conv("head.conv1", ConvSpec::same(d2, h1, k)));
        v.push(LayerDef::conv("head.conv2", ConvSpec::same(h1, h2, k)));
        v.push(LayerDef::conv("head.out", ConvSpec::same(h2, Self::OUT_CHANNELS, k)));
        v
    }

    /// Recovers the configuration from parameter shapes and validates the store.
    pub fn from_store<T: Scalar>(store: &WeightStore<T>) -> Result<Self> {
        let ch = |s: usize| dim_of(store, &format!("enc.s{s}.b0.conv2.weight"), 0);
        let kernel = |i: usize| dim_of(store, &format!("mlk.dw{i}.weight"), 2);
        let cfg = FlowNetConfig {
            in_channels: dim_of(store, "enc.s1.b0.conv1.weight", 1)?,
            pyramid_channels: [ch(1)?, ch(2)?, ch(3)?, ch(4)?],
            mlk_kernels: [kernel(0)?, kernel(1)?, kernel(2)?],
            decoder_channels: [
                dim_of(store, "dec.up1.conv.weight", 0)?,
                dim_of(store, "dec.up2.conv.weight", 0)?,
            ],
            head_channels: [
                dim_of(store, "head.conv1.weight", 0)?,
                dim_of(store, "head.conv2.weight", 0)?,
            ],
        };
        validate_store(&cfg.layers(), store)?;
        Ok(cfg)
    }

    /// Kaiming init, with the linear flow output scaled by [`FLOW_HEAD_GAIN`]
    /// so that untrained networks predict nearly zero motion.
    pub fn init<T: Scalar>(&self, seed: u64) -> WeightStore<T> {
        let mut store = init_layers(&self.layers(), seed);
        let gain = T::of(FLOW_HEAD_GAIN);
        if let Ok(w) = store.get_mut("head.out.weight") {
            w.data_mut().iter_mut().for_each(|v| *v *= gain);
        }
        store
    }
}

/// Intermediate tensors of one flow-network evaluation.
#[derive(Clone, Copy, Debug)]
pub struct FlowTrace {
    /// Residual-stage outputs at 1/2, 1/4, 1/8, 1/16.
    pub features: [Var; 4],
    /// Encoder output at 1/16.
    pub z_e: Var,
    /// Decoder output at 1/4.
    pub decoded: Var,
    /// Flow-head output at 1/4 (`[N,4,h,w]`, quarter-resolution pixels).
    pub quarter_flow: Var,
    /// `F_{t→t−1}` and `F_{t→t+1}` at full resolution.
    pub flows: [Var; 2],
}

fn residual_block<T: Scalar>(l: &Layers<T>, prefix: &str, x: Var, project: bool) -> Result<Var> {
    let h = l.apply_relu(&format!("{prefix}.conv1"), x)?;
    let h = l.apply(&format!("{prefix}.conv2"), h)?;
    let skip = if project {
        l.apply(&format!("{prefix}.proj"), x)?
    } else {
        x
    };
    let y = l.tape.add(h, skip)?;
    l.tape.relu(y)
}

fn mlk_apply<T: Scalar>(l: &Layers<T>, z: Var) -> Result<Var> {
    let branches = (0..3)
        .map(|i| l.apply(&format!("mlk.dw{i}"), z))
        .collect::<Result<Vec<_>>>()?;
    let cat = l.tape.concat_channels(&branches)?;
    let merged = l.apply("mlk.merge", cat)?;
    l.tape.add(merged, z)
}

/// Flow network on a `[N,9,H,W]` tape variable.
pub fn flownet_tape<T: Scalar>(
    tape: &Tape<T>,
    params: &TapeParams,
    cfg: &FlowNetConfig,
    input: Var,
) -> Result<FlowTrace> {
    let dims = tape.dims(input);
    if dims.len() != 4 || dims[1] != cfg.in_channels {
        return Err(shape_err!(
            "flow network expects [N, {}, H, W], got {dims:?}",
            cfg.in_channels
        ));
    }
    let (h, w) = (dims[2], dims[3]);
    if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
        return Err(shape_err!("flow network needs H and W divisible by 16, got {h}x{w}"));
    }
    let l = Layers::new(tape, params, cfg.layers());

    let p2 = tape.avg_pool2(input)?;
    let p4 = tape.avg_pool2(p2)?;
    let p8 = tape.avg_pool2(p4)?;
    let p16 = tape.avg_pool2(p8)?;
    let pooled = [p2, p4, p8, p16];

    let mut x = input;
    let mut features = Vec::with_capacity(4);
    let mut skips = Vec::with_capacity(3);
    for s in 0..4 {
        let p = format!("enc.s{}", s + 1);
        let y = residual_block(&l, &format!("{p}.b0"), x, true)?;
        let y = residual_block(&l, &format!("{p}.b1"), y, false)?;
        features.push(y);
        x = if s == 0 {
            y
        } else {
            let cat = tape.concat_channels(&[y, pooled[s]])?;
            skips.push(cat);
            cat
        };
    }
    let z_e = l.apply_relu("enc.out", x)?;
    let z = mlk_apply(&l, z_e)?;

    let mut d = z;
    for (i, &skip) in [skips[1], skips[0]].iter().enumerate() {
        let p = format!("dec.up{}", i + 1);
        let up = l.apply_relu(&format!("{p}.deconv"), d)?;
        let cat = tape.concat_channels(&[up, skip])?;
        let m = l.apply_relu(&format!("{p}.merge"), cat)?;
        d = l.apply_relu(&format!("{p}.conv"), m)?;
    }
    let hd = l.apply_relu("head.conv1", d)?;
    let hd = l.apply_relu("head.conv2", hd)?;
    let quarter_flow = l.apply("head.out", hd)?;
    let up = tape.bilinear_resize(quarter_flow, h, w)?;
    let full = tape.scale(up, T::of(4.0))?;
    let flows = [
        tape.slice_channels(full, 0, 2)?,
        tape.slice_channels(full, 2, 2)?,
    ];
    Ok(FlowTrace {
        features: [features[0], features[1], features[2], features[3]],
        z_e,
        decoded: d,
        quarter_flow,
        flows,
    })
}

/// Predicts `(F_{t→t−1}, F_{t→t+1})` from `concat(L_{t−1}, g(L_t), L_{t+1})`.
/// The returned fields carry source index 1 and target indices 0 and 2
/// (window-local positions).
pub fn flownet_forward<T: Scalar>(
    frames: &Tensor<T>,
    weights: &WeightStore<T>,
) -> Result<(FlowField<T>, FlowField<T>)> {
    let cfg = FlowNetConfig::from_store(weights)?;
    frames.chw()?;
    let tape = Tape::new();
    let params = weights.to_tape(&tape, false);
    let x = tape.constant(frames.clone().unsqueeze0());
    let trace = flownet_tape(&tape, &params, &cfg, x)?;
    let back = tape.value(trace.flows[0]).as_ref().clone().squeeze0()?;
    let fwd = tape.value(trace.flows[1]).as_ref().clone().squeeze0()?;
    Ok((FlowField::new(back, 1, 0)?, FlowField::new(fwd, 1, 2)?))
}

/// The multi-size large-kernel block on its own: three depthwise branches,
/// concatenated, merged by a 1×1 convolution and added back to `z`.
pub fn mlk_block<T: Scalar>(z: &Tensor<T>, weights: &WeightStore<T>) -> Result<Tensor<T>> {
    let cfg = FlowNetConfig::from_store(weights)?;
    let (c, _, _) = z.chw()?;
    if c != cfg.pyramid_channels[3] {
        return Err(shape_err!(
            "large-kernel block expects {} channels, got {c}",
            cfg.pyramid_channels[3]
        ));
    }
    let tape = Tape::new();
    let params = weights.to_tape(&tape, false);
    let l = Layers::new(&tape, &params, cfg.layers());
    let x = tape.constant(z.clone().unsqueeze0());
    let y = mlk_apply(&l, x)?;
    let out = tape.value(y).as_ref().clone();
    out.squeeze0()
}

// ---------------------------------------------------------------------------
// Fusion network

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FusionNetConfig {
    pub in_channels: usize,
    pub down_channels: [usize; 3],
    pub out_weights: usize,
}

impl FusionNetConfig {
    /// Five candidates (30 input channels).
    pub fn two_exposure() -> Self {
        FusionNetConfig {
            in_channels: 30,
            down_channels: [32, 64, 128],
            out_weights: 5,
        }
    }

    /// Nine candidates (54 input channels).
    pub fn three_exposure() -> Self {
        FusionNetConfig {
            in_channels: 54,
            down_channels: [32, 64, 128],
            out_weights: 9,
        }
    }

    pub fn for_candidates(k: usize) -> Result<Self> {
        match k {
            5 => Ok(Self::two_exposure()),
            9 => Ok(Self::three_exposure()),
            _ => Err(invalid!("fusion supports 5 or 9 candidates, got {k}")),
        }
    }

    pub fn reduced(mut self, divisor: usize) -> Result<Self> {
        if divisor == 0 {
            return Err(invalid!("width divisor must be positive"));
        }
        self.down_channels = self.down_channels.map(|c| divide(c, divisor));
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 6 * self.out_weights {
            return Err(invalid!(
                "fusion input must have 6 channels per candidate: {} vs {} weights",
                self.in_channels,
                self.out_weights
            ));
        }
        Ok(())
    }

    pub fn layers(&self) -> Vec<LayerDef> {
        let [c1, c2, c3] = self.down_channels;
        let cin = self.in_channels;
        let mut v = Vec::new();
        for (i, (a, b)) in [(cin, c1), (c1, c2), (c2, c3)].into_iter().enumerate() {
            let p = format!("down{}", i + 1);
            v.push(LayerDef::conv(format!("{p}.conv1"), ConvSpec::same(a, b, 3).with_stride(2)));
            v.push(LayerDef::conv(format!("{p}.conv2"), ConvSpec::same(b, b, 3)));
        }
        // up blocks: (input, deconv out, skip channels, conv out)
        let ups = [(c3, c2, c2, c2), (c2, c1, c1, c1), (c1, c1, cin, self.out_weights)];
        for (i, (a, d, skip, o)) in ups.into_iter().enumerate() {
            let p = format!("up{}", i + 1);
            v.push(LayerDef::deconv(format!("{p}.deconv"), a, d));
            v.push(LayerDef::conv(format!("{p}.conv"), ConvSpec::same(d + skip, o, 3)));
        }
        v
    }

    pub fn from_store<T: Scalar>(store: &WeightStore<T>) -> Result<Self> {
        let cfg = FusionNetConfig {
            in_channels: dim_of(store, "down1.conv1.weight", 1)?,
            down_channels: [
                dim_of(store, "down1.conv1.weight", 0)?,
                dim_of(store, "down2.conv1.weight", 0)?,
                dim_of(store, "down3.conv1.weight", 0)?,
            ],
            out_weights: dim_of(store, "up3.conv.weight", 0)?,
        };
        cfg.validate().map_err(|e| Error::Weights(e.to_string()))?;
        validate_store(&cfg.layers(), store)?;
        Ok(cfg)
    }

    pub fn init<T: Scalar>(&self, seed: u64) -> WeightStore<T> {
        init_layers(&self.layers(), seed)
    }
}

/// Fusion U-Net on a `[N,6K,H,W]` variable; returns sigmoid weights `[N,K,H,W]`.
pub fn fusionnet_tape<T: Scalar>(
    tape: &Tape<T>,
    params: &TapeParams,
    cfg: &FusionNetConfig,
    input: Var,
) -> Result<Var> {
    cfg.validate()?;
    let dims = tape.dims(input);
    if dims.len() != 4 || dims[1] != cfg.in_channels {
        return Err(shape_err!(
            "fusion network expects [N, {}, H, W], got {dims:?}",
            cfg.in_channels
        ));
    }
    let (h, w) = (dims[2], dims[3]);
    if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
        return Err(shape_err!("fusion network needs H and W divisible by 8, got {h}x{w}"));
    }
    let l = Layers::new(tape, params, cfg.layers());
    let mut skips = vec![input];
    let mut x = input;
    for i in 1..=3 {
        x = l.apply_relu(&format!("down{i}.conv1"), x)?;
        x = l.apply_relu(&format!("down{i}.conv2"), x)?;
        skips.push(x);
    }
    for i in 1..=3 {
        let up = l.apply_relu(&format!("up{i}.deconv"), x)?;
        let cat = tape.concat_channels(&[up, skips[3 - i]])?;
        x = l.apply(&format!("up{i}.conv"), cat)?;
        x = if i < 3 { tape.relu(x)? } else { tape.sigmoid(x)? };
    }
    Ok(x)
}

/// Per-pixel fusion weights `[K,H,W]` in `(0, 1)` for a `[6K,H,W]` stack.
pub fn fusionnet_forward<T: Scalar>(stack: &Tensor<T>, weights: &WeightStore<T>) -> Result<Tensor<T>> {
    let cfg = FusionNetConfig::from_store(weights)?;
    stack.chw()?;
    let tape = Tape::new();
    let params = weights.to_tape(&tape, false);
    let x = tape.constant(stack.clone().unsqueeze0());
    let y = fusionnet_tape(&tape, &params, &cfg, x)?;
    let out = tape.value(y).as_ref().clone();
    out.squeeze0()
}

/// `Ĥ = Σ w_j I_j / (Σ w_j + ε)`, realized as a convex blend (see
/// [`ops::fuse_weighted`]). The result inherits the first candidate's white point.
pub fn fuse_hdr<T: Scalar>(
    weight_maps: &Tensor<T>,
    candidates: &[RadianceFrame<T>],
) -> Result<RadianceFrame<T>> {
    let (k, h, w) = weight_maps.chw()?;
    if candidates.len() != k {
        return Err(shape_err!("{k} weight maps but {} candidates", candidates.len()));
    }
    let cands: Vec<Tensor<T>> = candidates
        .iter()
        .map(|c| c.image.clone().unsqueeze0())
        .collect();
    let refs: Vec<&Tensor<T>> = cands.iter().collect();
    let wm = weight_maps.clone().reshape(vec![1, k, h, w])?;
    let out = ops::fuse_weighted(&wm, &refs, T::of(FUSION_EPS))?.squeeze0()?;
    RadianceFrame::new(out, candidates[0].white_point)
}

// ---------------------------------------------------------------------------
// Both networks together

/// Flow and fusion weights for one exposure protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct HdrModel<T> {
    pub flow: WeightStore<T>,
    pub fusion: WeightStore<T>,
}

impl<T: Scalar> HdrModel<T> {
    pub const FLOW_PREFIX: &'static str = "flow/";
    pub const FUSION_PREFIX: &'static str = "fusion/";

    /// Seeds the flow network with `seed` and the fusion network with `seed + 1`.
    pub fn init(flow: &FlowNetConfig, fusion: &FusionNetConfig, seed: u64) -> Result<Self> {
        fusion.validate()?;
        Ok(HdrModel {
            flow: flow.init(seed),
            fusion: fusion.init(seed.wrapping_add(1)),
        })
    }

    pub fn flow_config(&self) -> Result<FlowNetConfig> {
        FlowNetConfig::from_store(&self.flow)
    }

    pub fn fusion_config(&self) -> Result<FusionNetConfig> {
        FusionNetConfig::from_store(&self.fusion)
    }

    /// Single store with `flow/` and `fusion/` name prefixes.
    pub fn combined(&self) -> WeightStore<T> {
        let mut s = WeightStore::new();
        s.extend_prefixed(Self::FLOW_PREFIX, &self.flow).expect("disjoint prefixes");
        s.extend_prefixed(Self::FUSION_PREFIX, &self.fusion).expect("disjoint prefixes");
        s
    }

    pub fn from_combined(store: &WeightStore<T>) -> Result<Self> {
        let m = HdrModel {
            flow: store.strip_prefix(Self::FLOW_PREFIX),
            fusion: store.strip_prefix(Self::FUSION_PREFIX),
        };
        if m.flow.len() + m.fusion.len() != store.len() {
            return Err(Error::Weights(
                "weight file has entries outside the flow/ and fusion/ groups".into(),
            ));
        }
        m.flow_config()?;
        m.fusion_config()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.combined().save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_combined(&WeightStore::load(path)?)
    }

    pub fn param_count(&self) -> usize {
        self.flow.param_count() + self.fusion.param_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_tensor(dims: &[usize], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(dims.to_vec(), |_| rng.random_range(0.0..1.0))
    }

    fn zeroed<T: Scalar>(s: &WeightStore<T>) -> WeightStore<T> {
        s.zeros_like()
    }

    #[test]
    fn flownet_shapes_at_full_width() {
        let cfg = FlowNetConfig::full();
        let store: WeightStore<f32> = cfg.init(1);
        let tape = Tape::new();
        let params = store.to_tape(&tape, false);
        let x = tape.constant(rand_tensor(&[1, 9, 64, 64], 2));
        let tr = flownet_tape(&tape, &params, &cfg, x).unwrap();
        let want = [[1, 32, 32, 32], [1, 64, 16, 16], [1, 128, 8, 8], [1, 256, 4, 4]];
        for (f, w) in tr.features.iter().zip(want) {
            assert_eq!(tape.dims(*f), w);
        }
        assert_eq!(tape.dims(tr.z_e), [1, 256, 4, 4]);
        assert_eq!(tape.dims(tr.decoded), [1, 64, 16, 16]);
        assert_eq!(tape.dims(tr.quarter_flow), [1, 4, 16, 16]);
        for f in tr.flows {
            assert_eq!(tape.dims(f), [1, 2, 64, 64]);
        }
    }

    #[test]
    fn flownet_rejects_bad_sizes_and_weights() {
        let cfg = FlowNetConfig::reduced(8).unwrap();
        let store: WeightStore<f32> = cfg.init(1);
        assert!(flownet_forward(&rand_tensor(&[9, 24, 32], 0), &store).is_err());
        assert!(flownet_forward(&rand_tensor(&[6, 32, 32], 0), &store).is_err());
        let mut broken = WeightStore::new();
        for (k, v) in store.iter() {
            if k != "mlk.merge.bias" {
                broken.insert(k, v.clone()).unwrap();
            }
        }
        let err = flownet_forward(&rand_tensor(&[9, 32, 32], 0), &broken).unwrap_err();
        assert!(err.to_string().contains("mlk.merge.bias"), "{err}");
        let mut extra = store.clone();
        extra.insert("stray", Tensor::zeros(vec![1])).unwrap();
        assert!(FlowNetConfig::from_store(&extra).is_err());
    }

    #[test]
    fn zero_network_gives_zero_flow() {
        let store: WeightStore<f32> = zeroed(&FlowNetConfig::reduced(4).unwrap().init(3));
        let (a, b) = flownet_forward(&rand_tensor(&[9, 32, 48], 4), &store).unwrap();
        assert!(a.flow.data().iter().chain(b.flow.data()).all(|&v| v == 0.0));
        assert_eq!((a.height(), a.width()), (32, 48));
        assert_eq!((a.source_index, a.target_index, b.target_index), (1, 0, 2));
    }

    #[test]
    fn config_round_trips_through_store() {
        for d in [1, 4] {
            let cfg = FlowNetConfig::reduced(d).unwrap();
            assert_eq!(FlowNetConfig::from_store(&cfg.init::<f32>(0)).unwrap(), cfg);
            let fc = FusionNetConfig::three_exposure().reduced(d).unwrap();
            assert_eq!(FusionNetConfig::from_store(&fc.init::<f32>(0)).unwrap(), fc);
        }
    }

    #[test]
    fn mlk_identity_kernels_double_the_input() {
        let cfg = FlowNetConfig::reduced(16).unwrap();
        let c = cfg.pyramid_channels[3];
        let mut store: WeightStore<f64> = cfg.init::<f64>(0).zeros_like();
        for (i, &k) in cfg.mlk_kernels.iter().enumerate() {
            let name = format!("mlk.dw{i}.weight");
            let mut w = Tensor::zeros(vec![c, 1, k, k]);
            for ch in 0..c {
                w.data_mut()[ch * k * k + (k / 2) * k + k / 2] = 1.0;
            }
            store.replace(&name, w).unwrap();
        }
        let mut merge = Tensor::zeros(vec![c, 3 * c, 1, 1]);
        for o in 0..c {
            for b in 0..3 {
                merge.data_mut()[o * 3 * c + b * c + o] = 1.0 / 3.0;
            }
        }
        store.replace("mlk.merge.weight", merge).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = Tensor::from_fn(vec![c, 6, 5], |_| rng.random_range(-1.0..1.0));
        let out = mlk_block(&z, &store).unwrap();
        for (o, i) in out.data().iter().zip(z.data()) {
            assert!((o - 2.0 * i).abs() < 1e-12);
        }
        // zero branches: pure residual
        let zero = store.zeros_like();
        assert_eq!(mlk_block(&z, &zero).unwrap(), z);
        assert!(mlk_block(&Tensor::zeros(vec![c + 1, 4, 4]), &zero).is_err());
    }

    #[test]
    fn mlk_receptive_field_reaches_radius_five() {
        let cfg = FlowNetConfig::reduced(16).unwrap();
        let c = cfg.pyramid_channels[3];
        let store: WeightStore<f64> = cfg.init(9);
        let mut z = Tensor::zeros(vec![c, 15, 15]);
        z.data_mut()[7 * 15 + 7] = 1.0;
        let out = mlk_block(&z, &store).unwrap();
        let mut radius = 0;
        for ch in 0..c {
            for y in 0..15usize {
                for x in 0..15usize {
                    if out.data()[(ch * 15 + y) * 15 + x] != 0.0 {
                        radius = radius.max(y.abs_diff(7).max(x.abs_diff(7)));
                    }
                }
            }
        }
        assert_eq!(radius, 5);
    }

    #[test]
    fn fusion_shapes_and_zero_network() {
        for (cfg, k) in [(FusionNetConfig::two_exposure(), 5), (FusionNetConfig::three_exposure(), 9)] {
            let cfg = cfg.reduced(4).unwrap();
            let store: WeightStore<f32> = cfg.init(0);
            let x = rand_tensor(&[6 * k, 32, 40], 1);
            let y = fusionnet_forward(&x, &store).unwrap();
            assert_eq!(y.dims(), [k, 32, 40]);
            assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
            let y0 = fusionnet_forward(&x, &store.zeros_like()).unwrap();
            assert!(y0.data().iter().all(|&v| v == 0.5));
        }
        let store: WeightStore<f32> = FusionNetConfig::two_exposure().init(0);
        assert!(fusionnet_forward(&rand_tensor(&[30, 20, 16], 1), &store).is_err());
        assert!(fusionnet_forward(&rand_tensor(&[54, 16, 16], 1), &store).is_err());
        let bad = FusionNetConfig {
            in_channels: 31,
            ..FusionNetConfig::two_exposure()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn uniform_weights_give_the_candidate_mean() {
        let c: Vec<RadianceFrame<f64>> = (0..5)
            .map(|j| RadianceFrame::new(Tensor::full(vec![3, 2, 2], j as f64), 1.0).unwrap())
            .collect();
        let out = fuse_hdr(&Tensor::full(vec![5, 2, 2], 0.5), &c).unwrap();
        assert!(out.image.data().iter().all(|&v| (v - 2.0).abs() < 1e-12));
        assert!(fuse_hdr(&Tensor::full(vec![4, 2, 2], 0.5), &c).is_err());
    }

    #[test]
    fn init_is_seeded_and_kaiming_scaled() {
        let cfg = FlowNetConfig::full();
        let a: WeightStore<f32> = cfg.init(42);
        assert_eq!(a, cfg.init(42));
        assert_ne!(a, cfg.init(43));
        for l in cfg.layers() {
            let w = a.get(&l.weight_name()).unwrap();
            assert!(a.get(&l.bias_name()).unwrap().data().iter().all(|&v| v == 0.0));
            if w.numel() < 1024 {
                continue;
            }
            let n = w.numel() as f64;
            let mean = w.data().iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = w.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let gain = if l.name == "head.out" { FLOW_HEAD_GAIN } else { 1.0 };
            let want = 2.0 / l.fan_in() as f64 * gain * gain;
            assert!((var / want - 1.0).abs() < 0.2, "{}: {var} vs {want}", l.name);
        }
    }

    #[test]
    fn combined_store_round_trip() {
        let m = HdrModel::<f32>::init(
            &FlowNetConfig::reduced(8).unwrap(),
            &FusionNetConfig::two_exposure().reduced(8).unwrap(),
            7,
        )
        .unwrap();
        let c = m.combined();
        assert!(c.names().all(|n| n.starts_with("flow/") || n.starts_with("fusion/")));
        assert_eq!(HdrModel::from_combined(&c).unwrap(), m);
        let mut bad = c.clone();
        bad.insert("other/x", Tensor::zeros(vec![1])).unwrap();
        assert!(HdrModel::from_combined(&bad).is_err());
    }

    #[test]
    fn flownet_layer_count_matches_structure() {
        let layers = FlowNetConfig::full().layers();
        let resblock_convs = layers.iter().filter(|l| l.name.starts_with("enc.s")).count();
        // 8 residual blocks: 16 convs plus 4 projections
        assert_eq!(resblock_convs, 20);
        let heads: Vec<_> = layers.iter().filter(|l| l.name.starts_with("head.")).collect();
        assert_eq!(heads.len(), 3);
        assert!(heads.iter().all(|l| l.spec.kernel_h == 5));
        assert_eq!(heads[2].spec.out_channels, 4);
    }
}
