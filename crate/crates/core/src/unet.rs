//! The 3D encoder-decoder segmentation network, its parameter layout and
//! checkpoint serialization.
//!
//! Topology for `levels = L`:
//!
//! ```text
//! enc0 -> pool -> enc1 -> pool -> ... enc(L-1) -> pool -> bottleneck
//!   |                                   |                     |
//!   +--------- concat <- up <- ... <----+-- concat <- up <----+
//!              dec0                        dec(L-1)
//! dec0 -> 1x1x1 conv -> softmax
//! ```
//!
//! Every encoder, bottleneck and decoder block is `convs_per_level` rounds of
//! 3x3x3 convolution + ReLU. Level `l` carries `base * growth^l` channels.
//! Upsampling is a stride-2 transposed convolution; each decoder stage joins
//! the upsampled features with the encoder output of equal resolution,
//! encoder channels first.

use rand::Rng;

use crate::error::{Error, Result};
use crate::neural::{
    concat_channels, conv3d_1x1, conv3d_1x1_backward, conv3d_same, conv3d_same_backward, he_init, maxpool3d_2,
    maxpool3d_2_backward, relu, relu_backward, softmax_channels, split_channels, upconv3d_2, upconv3d_2_backward,
    Parameter, Tensor,
};
use crate::volgrid::{ProbMask, Shape3, Volume, NUM_CLASSES};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SPCKPT01";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Number of downsampling steps, and of skip connections.
    pub levels: usize,
    pub base_channels: usize,
    pub convs_per_level: usize,
    pub growth: usize,
}

impl ModelConfig {
    /// Small network used by tests and the desk-scale experiments.
    pub const TOY: ModelConfig = ModelConfig {
        in_channels: 1,
        out_channels: NUM_CLASSES,
        levels: 2,
        base_channels: 4,
        convs_per_level: 2,
        growth: 2,
    };

    /// Four-level network at full width; see [`reference_base_search`].
    pub const REFERENCE: ModelConfig = ModelConfig {
        in_channels: 1,
        out_channels: NUM_CLASSES,
        levels: 4,
        base_channels: 32,
        convs_per_level: 2,
        growth: 2,
    };

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("in_channels", self.in_channels),
            ("levels", self.levels),
            ("base_channels", self.base_channels),
            ("convs_per_level", self.convs_per_level),
            ("growth", self.growth),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::usage(format!("model {name} must be >= 1")));
            }
        }
        if self.out_channels != NUM_CLASSES {
            return Err(Error::usage(format!(
                "model out_channels must be {NUM_CLASSES}, got {}",
                self.out_channels
            )));
        }
        if self.levels > 16 || self.channels(self.levels).is_none() {
            return Err(Error::usage("model width overflows"));
        }
        Ok(())
    }

    /// Channel count at resolution level `level` (`levels` is the bottleneck).
    pub fn channels(&self, level: usize) -> Option<usize> {
        let g = self.growth.checked_pow(level as u32)?;
        self.base_channels.checked_mul(g)
    }

    fn ch(&self, level: usize) -> usize {
        self.channels(level).expect("validated config")
    }

    /// Spatial dims must be divisible by this factor.
    pub fn spatial_divisor(&self) -> usize {
        1 << self.levels
    }

    pub fn check_input_dims(&self, spatial: Shape3) -> Result<()> {
        let div = self.spatial_divisor();
        if spatial.iter().any(|&s| s == 0 || s % div != 0) {
            return Err(Error::usage(format!(
                "input spatial dims {spatial:?} must be positive multiples of 2^levels = {div}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LayerKind {
    Conv3,
    Up,
    Pointwise,
}

#[derive(Debug, Clone)]
struct LayerSpec {
    kind: LayerKind,
    name: String,
    cin: usize,
    cout: usize,
}

impl LayerSpec {
    fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Conv3 => vec![self.cout, self.cin, 3, 3, 3],
            LayerKind::Up => vec![self.cin, self.cout, 2, 2, 2],
            LayerKind::Pointwise => vec![self.cout, self.cin, 1, 1, 1],
        }
    }

    fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Conv3 => self.cin * 27,
            // each output voxel of the stride-2 transposed conv sees one kernel tap per input channel
            LayerKind::Up => self.cin,
            LayerKind::Pointwise => self.cin,
        }
    }

    fn param_count(&self) -> usize {
        self.weight_shape().iter().product::<usize>() + self.cout
    }
}

/// Layers in parameter order: encoder shallow to deep, bottleneck, decoder
/// deep to shallow, then the 1x1x1 head.
fn layer_plan(cfg: &ModelConfig) -> Vec<LayerSpec> {
    let mut plan = Vec::new();
    let mut c = cfg.in_channels;
    let conv = |name: String, cin: usize, cout: usize| LayerSpec {
        kind: LayerKind::Conv3,
        name,
        cin,
        cout,
    };
    for l in 0..cfg.levels {
        for j in 0..cfg.convs_per_level {
            plan.push(conv(format!("enc{l}.conv{j}"), c, cfg.ch(l)));
            c = cfg.ch(l);
        }
    }
    for j in 0..cfg.convs_per_level {
        plan.push(conv(format!("bottleneck.conv{j}"), c, cfg.ch(cfg.levels)));
        c = cfg.ch(cfg.levels);
    }
    for l in (0..cfg.levels).rev() {
        plan.push(LayerSpec {
            kind: LayerKind::Up,
            name: format!("dec{l}.up"),
            cin: c,
            cout: cfg.ch(l),
        });
        c = 2 * cfg.ch(l);
        for j in 0..cfg.convs_per_level {
            plan.push(conv(format!("dec{l}.conv{j}"), c, cfg.ch(l)));
            c = cfg.ch(l);
        }
    }
    plan.push(LayerSpec {
        kind: LayerKind::Pointwise,
        name: "head".into(),
        cin: c,
        cout: cfg.out_channels,
    });
    plan
}

/// Exact number of weight and bias scalars in a model built from `cfg`.
pub fn param_count(cfg: &ModelConfig) -> Result<usize> {
    cfg.validate()?;
    Ok(layer_plan(cfg).iter().map(LayerSpec::param_count).sum())
}

/// Parameter counts of four-level networks for a range of base widths,
/// with the signed difference from `target`.
pub fn reference_base_search(bases: std::ops::RangeInclusive<usize>, target: usize) -> Vec<(usize, usize, i64)> {
    bases
        .filter_map(|base| {
            let cfg = ModelConfig {
                base_channels: base,
                ..ModelConfig::REFERENCE
            };
            let n = param_count(&cfg).ok()?;
            Some((base, n, n as i64 - target as i64))
        })
        .collect()
}

/// Records the resolutions joined by each skip connection during a forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForwardTrace {
    /// `(encoder feature shape, upsampled feature shape)` per join, deep to shallow.
    pub skip_joins: Vec<([usize; 5], [usize; 5])>,
    /// Output shape of the bottleneck block.
    pub bottleneck: [usize; 5],
}

#[derive(Debug, Clone)]
struct ConvStep {
    layer: usize,
    input: Tensor,
    pre_act: Tensor,
}

#[derive(Debug, Clone)]
struct DecoderStage {
    up_layer: usize,
    up_input: Tensor,
    skip_channels: usize,
    convs: Vec<ConvStep>,
}

/// Activations kept from a training forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    encoder: Vec<Vec<ConvStep>>,
    pools: Vec<(Vec<usize>, Vec<usize>)>,
    bottleneck: Vec<ConvStep>,
    decoder: Vec<DecoderStage>,
    head_input: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Parameter>,
}

impl Model {
    /// Builds a model with He-initialized weights and zero biases.
    pub fn build<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Model> {
        config.validate()?;
        let mut params = Vec::new();
        for spec in layer_plan(&config) {
            let w = he_init(&spec.weight_shape(), spec.fan_in(), rng)?;
            params.push(Parameter::new(format!("{}.weight", spec.name), w));
            params.push(Parameter::new(format!("{}.bias", spec.name), Tensor::zeros(&[spec.cout])));
        }
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    /// Total scalar count of the flattened parameter list.
    pub fn flat_len(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    fn weight(&self, layer: usize) -> &Tensor {
        &self.params[2 * layer].value
    }

    fn bias(&self, layer: usize) -> &Tensor {
        &self.params[2 * layer + 1].value
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let [_, c, d, h, w] = x.dims5()?;
        if c != self.config.in_channels {
            return Err(Error::usage(format!(
                "model expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        self.config.check_input_dims([d, h, w])
    }

    fn conv_relu(&self, layer: usize, x: Tensor, cache: Option<&mut Vec<ConvStep>>) -> Result<Tensor> {
        let pre = conv3d_same(&x, self.weight(layer), self.bias(layer))?;
        let out = relu(&pre);
        if let Some(steps) = cache {
            steps.push(ConvStep {
                layer,
                input: x,
                pre_act: pre,
            });
        }
        Ok(out)
    }

    fn run(&self, x: &Tensor, mut cache: Option<&mut ForwardCache>, trace: &mut ForwardTrace) -> Result<Tensor> {
        self.check_input(x)?;
        let cfg = self.config;
        let cpl = cfg.convs_per_level;
        let mut layer = 0;
        let mut h = x.clone();
        let mut skips = Vec::with_capacity(cfg.levels);
        for _ in 0..cfg.levels {
            let mut steps = Vec::new();
            for _ in 0..cpl {
                let steps_ref = cache.as_ref().map(|_| &mut steps);
                h = self.conv_relu(layer, h, steps_ref)?;
                layer += 1;
            }
            let pooled = maxpool3d_2(&h)?;
            if let Some(c) = cache.as_deref_mut() {
                c.encoder.push(steps);
                c.pools.push((h.shape().to_vec(), pooled.argmax));
            }
            skips.push(h);
            h = pooled.output;
        }
        let mut steps = Vec::new();
        for _ in 0..cpl {
            let steps_ref = cache.as_ref().map(|_| &mut steps);
            h = self.conv_relu(layer, h, steps_ref)?;
            layer += 1;
        }
        trace.bottleneck = h.dims5()?;
        if let Some(c) = cache.as_deref_mut() {
            c.bottleneck = steps;
        }
        for _ in (0..cfg.levels).rev() {
            let up_layer = layer;
            let up = upconv3d_2(&h, self.weight(up_layer), self.bias(up_layer))?;
            layer += 1;
            let skip = skips.pop().expect("one skip per level");
            let skip_shape = skip.dims5()?;
            let up_shape = up.dims5()?;
            if skip_shape[2..] != up_shape[2..] {
                return Err(Error::usage(format!(
                    "skip connection joins unequal resolutions {skip_shape:?} and {up_shape:?}"
                )));
            }
            trace.skip_joins.push((skip_shape, up_shape));
            let mut z = concat_channels(&skip, &up)?;
            let mut steps = Vec::new();
            for _ in 0..cpl {
                let steps_ref = cache.as_ref().map(|_| &mut steps);
                z = self.conv_relu(layer, z, steps_ref)?;
                layer += 1;
            }
            if let Some(c) = cache.as_deref_mut() {
                c.decoder.push(DecoderStage {
                    up_layer,
                    up_input: h,
                    skip_channels: skip_shape[1],
                    convs: steps,
                });
            }
            h = z;
        }
        let logits = conv3d_1x1(&h, self.weight(layer), self.bias(layer))?;
        if let Some(c) = cache {
            c.head_input = h;
        }
        Ok(logits)
    }

    /// Pre-softmax scores for an `N x C_in x D x H x W` batch, keeping the
    /// activations needed by [`Model::backward`].
    pub fn forward_train(&self, x: &Tensor) -> Result<(Tensor, ForwardCache)> {
        let mut cache = ForwardCache {
            encoder: Vec::new(),
            pools: Vec::new(),
            bottleneck: Vec::new(),
            decoder: Vec::new(),
            head_input: Tensor::zeros(&[0]),
        };
        let logits = self.run(x, Some(&mut cache), &mut ForwardTrace::default())?;
        Ok((logits, cache))
    }

    pub fn forward_logits(&self, x: &Tensor) -> Result<Tensor> {
        self.run(x, None, &mut ForwardTrace::default())
    }

    /// Channel-first class probabilities plus the skip-connection trace.
    pub fn forward_traced(&self, x: &Tensor) -> Result<(Tensor, ForwardTrace)> {
        let mut trace = ForwardTrace::default();
        let logits = self.run(x, None, &mut trace)?;
        Ok((softmax_channels(&logits)?, trace))
    }

    pub fn forward_probs(&self, x: &Tensor) -> Result<Tensor> {
        softmax_channels(&self.forward_logits(x)?)
    }

    /// Runs one patch and returns channel-last probabilities `(D, H, W, 3)`.
    pub fn predict_patch(&self, patch: &Volume) -> Result<ProbMask> {
        let [d, h, w] = patch.shape();
        let x = Tensor::new(vec![1, 1, d, h, w], patch.data().to_vec())?;
        let probs = self.forward_probs(&x)?;
        channels_last(&probs, 0)
    }

    /// Accumulates parameter gradients given the loss gradient w.r.t. the logits.
    pub fn backward(&mut self, cache: &ForwardCache, grad_logits: &Tensor) -> Result<()> {
        let head = self.params.len() / 2 - 1;
        let g = conv3d_1x1_backward(&cache.head_input, self.weight(head), grad_logits)?;
        self.accumulate(head, &g.weight, &g.bias);
        let mut grad = g.input;

        let mut skip_grads: Vec<Tensor> = Vec::with_capacity(cache.decoder.len());
        // decoder stages were recorded deep to shallow; unwind shallow to deep
        for stage in cache.decoder.iter().rev() {
            grad = self.backward_convs(&stage.convs, grad)?;
            let (g_skip, g_up) = split_channels(&grad, stage.skip_channels)?;
            skip_grads.push(g_skip);
            let g = upconv3d_2_backward(&stage.up_input, self.weight(stage.up_layer), &g_up)?;
            self.accumulate(stage.up_layer, &g.weight, &g.bias);
            grad = g.input;
        }

        grad = self.backward_convs(&cache.bottleneck, grad)?;

        // skip_grads is ordered shallow to deep, like the encoder
        for (level, steps) in cache.encoder.iter().enumerate().rev() {
            let (shape, argmax) = &cache.pools[level];
            let mut g_level = maxpool3d_2_backward(shape, argmax, &grad)?;
            for (a, b) in g_level.data_mut().iter_mut().zip(skip_grads[level].data()) {
                *a += *b;
            }
            grad = self.backward_convs(steps, g_level)?;
        }
        Ok(())
    }

    fn backward_convs(&mut self, steps: &[ConvStep], mut grad: Tensor) -> Result<Tensor> {
        for step in steps.iter().rev() {
            let g_pre = relu_backward(&step.pre_act, &grad)?;
            let g = conv3d_same_backward(&step.input, self.weight(step.layer), &g_pre)?;
            self.accumulate(step.layer, &g.weight, &g.bias);
            grad = g.input;
        }
        Ok(grad)
    }

    fn accumulate(&mut self, layer: usize, gw: &Tensor, gb: &Tensor) {
        for (dst, src) in [(2 * layer, gw), (2 * layer + 1, gb)] {
            for (a, b) in self.params[dst].grad.data_mut().iter_mut().zip(src.data()) {
                *a += *b;
            }
        }
    }

    /// All parameter values concatenated in parameter order.
    pub fn flat_values(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.flat_len());
        for p in &self.params {
            out.extend_from_slice(p.value.data());
        }
        out
    }

    pub fn load_flat_values(&mut self, values: &[f32]) -> Result<()> {
        if values.len() != self.flat_len() {
            return Err(Error::Format(format!(
                "parameter payload has {} values, model needs {}",
                values.len(),
                self.flat_len()
            )));
        }
        let mut at = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&values[at..at + n]);
            at += n;
        }
        Ok(())
    }
}

/// Converts sample `n` of an `N x C x D x H x W` tensor to a channel-last [`ProbMask`].
pub fn channels_last(t: &Tensor, n: usize) -> Result<ProbMask> {
    let [_, c, d, h, w] = t.dims5()?;
    if c != NUM_CLASSES {
        return Err(Error::usage(format!("expected {NUM_CLASSES} channels, got {c}")));
    }
    let vol = d * h * w;
    let src = &t.data()[n * c * vol..(n + 1) * c * vol];
    let mut data = vec![0.0f32; vol * c];
    for v in 0..vol {
        for k in 0..c {
            data[v * c + k] = src[k * vol + v];
        }
    }
    ProbMask::new([d, h, w], data)
}

/// Training metadata stored alongside a checkpoint's parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointMeta {
    pub epoch: u64,
    pub iteration: u64,
    pub best_dice: f64,
}

pub fn save_checkpoint(model: &Model, meta: &CheckpointMeta) -> Vec<u8> {
    let cfg = model.config;
    let mut out = Vec::with_capacity(80 + model.flat_len() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [
        cfg.in_channels,
        cfg.out_channels,
        cfg.levels,
        cfg.base_channels,
        cfg.convs_per_level,
        cfg.growth,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&meta.epoch.to_le_bytes());
    out.extend_from_slice(&meta.iteration.to_le_bytes());
    out.extend_from_slice(&meta.best_dice.to_le_bytes());
    out.extend_from_slice(&(model.flat_len() as u64).to_le_bytes());
    for p in &model.params {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("checkpoint truncated at byte {} (needed {n} more)", self.at))
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<(Model, CheckpointMeta)> {
    let mut cur = Cursor { bytes, at: 0 };
    if cur.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let mut fields = [0usize; 6];
    for f in &mut fields {
        *f = cur.u32()? as usize;
    }
    let config = ModelConfig {
        in_channels: fields[0],
        out_channels: fields[1],
        levels: fields[2],
        base_channels: fields[3],
        convs_per_level: fields[4],
        growth: fields[5],
    };
    config
        .validate()
        .map_err(|e| Error::Format(format!("checkpoint holds an invalid model config: {e}")))?;
    let meta = CheckpointMeta {
        epoch: cur.u64()?,
        iteration: cur.u64()?,
        best_dice: f64::from_le_bytes(cur.take(8)?.try_into().unwrap()),
    };
    let count = cur.u64()? as usize;
    let expected = param_count(&config)?;
    if count != expected {
        return Err(Error::Format(format!(
            "checkpoint declares {count} parameters, config needs {expected}"
        )));
    }
    let payload = cur.take(count.checked_mul(4).ok_or_else(|| Error::Format("parameter count overflows".into()))?)?;
    if cur.at != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint payload",
            bytes.len() - cur.at
        )));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut params = Vec::new();
    let mut at = 0;
    for spec in layer_plan(&config) {
        let ws = spec.weight_shape();
        let wn: usize = ws.iter().product();
        params.push(Parameter::new(format!("{}.weight", spec.name), Tensor::new(ws, values[at..at + wn].to_vec())?));
        at += wn;
        params.push(Parameter::new(
            format!("{}.bias", spec.name),
            Tensor::new(vec![spec.cout], values[at..at + spec.cout].to_vec())?,
        ));
        at += spec.cout;
    }
    Ok((Model { config, params }, meta))
}
