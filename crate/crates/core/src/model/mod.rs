//! Residual 2-D U-Net, its loss, optimizers, training loop and checkpoints.
//!
//! Layout for `encoder_channels = [c0, c1, …, c(L-1)]`:
//!
//! * encoder level 0: residual units at full resolution, `in_channels → c0`;
//! * encoder level `l > 0`: the first unit has stride 2 (`c(l-1) → cl`);
//! * decoder level `l` (from `L-1` down to 1): a 2×2 stride-2 transposed
//!   convolution `cl → c(l-1)`, concatenation with the encoder skip, then
//!   residual units `2·c(l-1) → c(l-1)`;
//! * a 1×1 convolution head `c0 → num_classes`.
//!
//! A residual unit is conv3×3 → BN → PReLU → conv3×3 → BN → PReLU on the
//! branch, plus the input itself or a 1×1 (possibly strided) convolution when
//! the shape changes. [`ForwardHooks`] let uncertainty methods rewrite
//! convolution inputs and outputs and branch outputs without touching this
//! code.

mod archive;
mod checkpoint;
mod loss;
mod optim;
mod params;
mod train;

pub use archive::TensorArchive;
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use loss::{dice_ce_components, dice_ce_loss, one_hot};
pub use optim::{Optimizer, OptimizerKind};
pub use params::{Bound, Param, ParamKind, ParamStore};
pub use train::{
    evaluate_dsc, recompute_bn_stats, recompute_bn_stats_from, train, EpochRecord, History, Objective, PlainObjective, SplitDataset,
    StepLoss, TrainConfig, TrainOutcome, TrainingHook,
};

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub encoder_channels: Vec<usize>,
    pub residual_units_per_level: usize,
    pub prelu_init: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self { in_channels: 1, num_classes: 2, encoder_channels: vec![16, 32, 64], residual_units_per_level: 2, prelu_init: 0.25 }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return Err(Error::invalid("encoder_channels must be non-empty and positive"));
        }
        if self.num_classes < 2 || self.in_channels == 0 || self.residual_units_per_level == 0 {
            return Err(Error::invalid("need num_classes ≥ 2, in_channels ≥ 1 and at least one residual unit per level"));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.encoder_channels.len()
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels() - 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    /// Square kernel with the given size, stride and zero padding.
    Conv { k: usize, stride: usize, pad: usize },
    /// 2×2 stride-2 transposed convolution, kernel `[Cin, Cout, 2, 2]`.
    Up2x,
}

/// A convolution of the network; its tensors are `<name>.weight` and
/// `<name>.bias`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kind: ConvKind,
}

impl ConvSpec {
    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn kernel_shape(&self) -> Vec<usize> {
        match self.kind {
            ConvKind::Conv { k, .. } => vec![self.cout, self.cin, k, k],
            ConvKind::Up2x => vec![self.cin, self.cout, 2, 2],
        }
    }

    pub fn fan_in(&self) -> usize {
        match self.kind {
            ConvKind::Conv { k, .. } => self.cin * k * k,
            ConvKind::Up2x => self.cin,
        }
    }

    pub fn param_count(&self) -> usize {
        self.kernel_shape().iter().product::<usize>() + self.cout
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnitSpec {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
}

impl UnitSpec {
    pub fn conv1(&self) -> ConvSpec {
        ConvSpec {
            name: format!("{}.conv1", self.name),
            cin: self.cin,
            cout: self.cout,
            kind: ConvKind::Conv { k: 3, stride: self.stride, pad: 1 },
        }
    }

    pub fn conv2(&self) -> ConvSpec {
        ConvSpec { name: format!("{}.conv2", self.name), cin: self.cout, cout: self.cout, kind: ConvKind::Conv { k: 3, stride: 1, pad: 1 } }
    }

    pub fn shortcut(&self) -> Option<ConvSpec> {
        (self.cin != self.cout || self.stride != 1).then(|| ConvSpec {
            name: format!("{}.shortcut", self.name),
            cin: self.cin,
            cout: self.cout,
            kind: ConvKind::Conv { k: 1, stride: self.stride, pad: 0 },
        })
    }

    pub fn convs(&self) -> Vec<ConvSpec> {
        let mut v = vec![self.conv1(), self.conv2()];
        v.extend(self.shortcut());
        v
    }

    fn bn(&self, i: usize) -> String {
        format!("{}.bn{i}", self.name)
    }

    fn act(&self, i: usize) -> String {
        format!("{}.act{i}.alpha", self.name)
    }
}

/// Batch statistics observed by one train-mode batch-norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BnBatchStats {
    pub layer: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and report them.
    Train,
    /// Normalize with the stored running statistics.
    Eval,
}

/// Extension points used by the uncertainty methods. `bound` holds the
/// tape handles of every trainable tensor in the store, including
/// method-specific ones.
pub trait ForwardHooks<'t> {
    /// Rewrites the input of a convolution.
    fn conv_input(&mut self, _bound: &Bound<'t>, _conv: &ConvSpec, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x)
    }

    /// Rewrites the output of a convolution (bias included).
    fn conv_output(&mut self, _bound: &Bound<'t>, _conv: &ConvSpec, y: Var<'t>) -> Result<Var<'t>> {
        Ok(y)
    }

    /// Rewrites a residual unit's branch output before the residual addition.
    fn unit_branch(&mut self, _bound: &Bound<'t>, _unit: &UnitSpec, h: Var<'t>) -> Result<Var<'t>> {
        Ok(h)
    }
}

/// Hooks that change nothing.
pub struct NoHooks;

impl ForwardHooks<'_> for NoHooks {}

pub struct ForwardOutput<'t> {
    pub logits: Var<'t>,
    pub bn_stats: Vec<BnBatchStats>,
}

/// Network layout derived from a [`UNetConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct UNet {
    config: UNetConfig,
    encoder: Vec<Vec<UnitSpec>>,
    /// Indexed by decoder level `l` (`l ≥ 1`); entry 0 is unused.
    ups: Vec<Option<ConvSpec>>,
    decoder: Vec<Vec<UnitSpec>>,
    head: ConvSpec,
}

impl UNet {
    pub fn new(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let ch = &config.encoder_channels;
        let units = config.residual_units_per_level;
        let mut encoder = Vec::new();
        for (l, &c) in ch.iter().enumerate() {
            let cin = if l == 0 { config.in_channels } else { ch[l - 1] };
            let stride = if l == 0 { 1 } else { 2 };
            encoder.push(
                (0..units)
                    .map(|u| UnitSpec {
                        name: format!("enc{l}.unit{u}"),
                        cin: if u == 0 { cin } else { c },
                        cout: c,
                        stride: if u == 0 { stride } else { 1 },
                    })
                    .collect(),
            );
        }
        let mut ups = vec![None];
        let mut decoder = vec![Vec::new()];
        for l in 1..ch.len() {
            ups.push(Some(ConvSpec { name: format!("dec{l}.up"), cin: ch[l], cout: ch[l - 1], kind: ConvKind::Up2x }));
            decoder.push(
                (0..units)
                    .map(|u| UnitSpec {
                        name: format!("dec{l}.unit{u}"),
                        cin: if u == 0 { 2 * ch[l - 1] } else { ch[l - 1] },
                        cout: ch[l - 1],
                        stride: 1,
                    })
                    .collect(),
            );
        }
        let head = ConvSpec { name: "head".into(), cin: ch[0], cout: config.num_classes, kind: ConvKind::Conv { k: 1, stride: 1, pad: 0 } };
        Ok(Self { config, encoder, ups, decoder, head })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    /// Residual units in forward order.
    pub fn units(&self) -> Vec<&UnitSpec> {
        let mut out: Vec<&UnitSpec> = self.encoder.iter().flatten().collect();
        for l in (1..self.config.levels()).rev() {
            out.extend(&self.decoder[l]);
        }
        out
    }

    /// Every convolution in forward order.
    pub fn convs(&self) -> Vec<ConvSpec> {
        let mut out = Vec::new();
        for u in self.encoder.iter().flatten() {
            out.extend(u.convs());
        }
        for l in (1..self.config.levels()).rev() {
            out.extend(self.ups[l].clone());
            for u in &self.decoder[l] {
                out.extend(u.convs());
            }
        }
        out.push(self.head.clone());
        out
    }

    /// Batch-norm layer names in forward order.
    pub fn bn_layers(&self) -> Vec<(String, usize)> {
        self.units().iter().flat_map(|u| [(u.bn(1), u.cout), (u.bn(2), u.cout)]).collect()
    }

    /// Every tensor of the base network with its shape and kind, in the
    /// canonical order used for initialization and serialization.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>, ParamKind)> {
        let mut out = Vec::new();
        let conv = |out: &mut Vec<(String, Vec<usize>, ParamKind)>, c: &ConvSpec| {
            out.push((c.weight_name(), c.kernel_shape(), ParamKind::Trainable));
            out.push((c.bias_name(), vec![c.cout], ParamKind::Trainable));
        };
        let unit = |out: &mut Vec<(String, Vec<usize>, ParamKind)>, u: &UnitSpec| {
            for (i, c) in [(1, u.conv1()), (2, u.conv2())] {
                conv(out, &c);
                let bn = u.bn(i);
                out.push((format!("{bn}.gamma"), vec![u.cout], ParamKind::Trainable));
                out.push((format!("{bn}.beta"), vec![u.cout], ParamKind::Trainable));
                out.push((format!("{bn}.running_mean"), vec![u.cout], ParamKind::Buffer));
                out.push((format!("{bn}.running_var"), vec![u.cout], ParamKind::Buffer));
                out.push((u.act(i), vec![1], ParamKind::Trainable));
            }
            if let Some(s) = u.shortcut() {
                conv(out, &s);
            }
        };
        for u in self.encoder.iter().flatten() {
            unit(&mut out, u);
        }
        for l in (1..self.config.levels()).rev() {
            conv(&mut out, self.ups[l].as_ref().expect("decoder level has an up-convolution"));
            for u in &self.decoder[l] {
                unit(&mut out, u);
            }
        }
        conv(&mut out, &self.head);
        out
    }

    /// Kaiming-uniform fan-in kernels, zero biases, unit BN scale, zero BN
    /// shift, PReLU slopes at `prelu_init`.
    pub fn init_params(&self, rng: &mut Rng) -> Result<ParamStore> {
        let fan_in: std::collections::HashMap<String, usize> = self.convs().into_iter().map(|c| (c.weight_name(), c.fan_in())).collect();
        let mut store = ParamStore::new();
        for (name, shape, kind) in self.param_shapes() {
            let value = if let Some(&fan) = fan_in.get(&name) {
                let bound = (6.0 / fan as f64).sqrt();
                Tensor::from_fn(&shape, |_| rng.uniform_range(-bound, bound))
            } else if name.ends_with(".gamma") || name.ends_with(".running_var") {
                Tensor::ones(&shape)
            } else if name.ends_with(".alpha") {
                Tensor::full(&shape, self.config.prelu_init)
            } else {
                Tensor::zeros(&shape)
            };
            store.insert(name, value, kind)?;
        }
        Ok(store)
    }

    /// Checks that `store` holds every base tensor with the expected shape.
    pub fn check_params(&self, store: &ParamStore) -> Result<()> {
        for (name, shape, _) in self.param_shapes() {
            let t = store.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ArtifactMismatch(format!("{name} has shape {:?}, config expects {shape:?}", t.shape())));
            }
        }
        Ok(())
    }

    /// Trainable scalar count of the base network alone.
    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().filter(|p| p.2 == ParamKind::Trainable).map(|p| p.1.iter().product::<usize>()).sum()
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let m = self.config.size_multiple();
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(Error::shape("unet", format!("input {shape:?} must be [N, {}, H, W]", self.config.in_channels)));
        }
        if !shape[2].is_multiple_of(m) || !shape[3].is_multiple_of(m) {
            return Err(Error::shape("unet", format!("spatial size {}x{} is not divisible by {m}", shape[2], shape[3])));
        }
        Ok(())
    }

    pub fn forward<'t>(
        &self,
        store: &ParamStore,
        bound: &Bound<'t>,
        x: Var<'t>,
        mode: BnMode,
        hooks: &mut dyn ForwardHooks<'t>,
    ) -> Result<ForwardOutput<'t>> {
        self.check_input(&x.shape())?;
        let mut f = Pass { store, bound, mode, hooks, stats: Vec::new() };
        let mut skips = Vec::with_capacity(self.config.levels());
        let mut h = x;
        for level in &self.encoder {
            for u in level {
                h = f.unit(u, h)?;
            }
            skips.push(h);
        }
        for l in (1..self.config.levels()).rev() {
            let up = f.conv(self.ups[l].as_ref().expect("decoder level has an up-convolution"), h)?;
            h = skips[l - 1].concat_channels(up)?;
            for u in &self.decoder[l] {
                h = f.unit(u, h)?;
            }
        }
        let logits = f.conv(&self.head, h)?;
        Ok(ForwardOutput { logits, bn_stats: f.stats })
    }
}

struct Pass<'a, 't> {
    store: &'a ParamStore,
    bound: &'a Bound<'t>,
    mode: BnMode,
    hooks: &'a mut dyn ForwardHooks<'t>,
    stats: Vec<BnBatchStats>,
}

impl<'t> Pass<'_, 't> {
    fn conv(&mut self, c: &ConvSpec, x: Var<'t>) -> Result<Var<'t>> {
        let x = self.hooks.conv_input(self.bound, c, x)?;
        let k = self.bound.get(&c.weight_name())?;
        let b = self.bound.get(&c.bias_name())?;
        let y = match c.kind {
            ConvKind::Conv { stride, pad, .. } => x.conv2d(k, b, stride, pad)?,
            ConvKind::Up2x => x.up_conv2x(k, b)?,
        };
        self.hooks.conv_output(self.bound, c, y)
    }

    fn bn(&mut self, name: &str, x: Var<'t>) -> Result<Var<'t>> {
        let gamma = self.bound.get(&format!("{name}.gamma"))?;
        let beta = self.bound.get(&format!("{name}.beta"))?;
        match self.mode {
            BnMode::Train => {
                let (y, mean, var) = x.batch_norm_train(gamma, beta, BN_EPS)?;
                self.stats.push(BnBatchStats { layer: name.to_string(), mean, var });
                Ok(y)
            }
            BnMode::Eval => {
                let mean = self.store.get(&format!("{name}.running_mean"))?;
                let var = self.store.get(&format!("{name}.running_var"))?;
                x.batch_norm_eval(gamma, beta, mean.data(), var.data(), BN_EPS)
            }
        }
    }

    fn unit(&mut self, u: &UnitSpec, x: Var<'t>) -> Result<Var<'t>> {
        let mut h = self.conv(&u.conv1(), x)?;
        h = self.bn(&u.bn(1), h)?;
        h = h.prelu(self.bound.get(&u.act(1))?)?;
        h = self.conv(&u.conv2(), h)?;
        h = self.bn(&u.bn(2), h)?;
        h = h.prelu(self.bound.get(&u.act(2))?)?;
        h = self.hooks.unit_branch(self.bound, u, h)?;
        let skip = match u.shortcut() {
            Some(s) => self.conv(&s, x)?,
            None => x,
        };
        h.add(skip)
    }
}

/// A network layout together with its parameters. Method-specific tensors
/// (fast weights, dropout logits) may live in the same store next to the
/// base tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub net: UNet,
    pub params: ParamStore,
}

impl Model {
    pub fn build(config: UNetConfig, rng: &mut Rng) -> Result<Self> {
        let net = UNet::new(config)?;
        let params = net.init_params(rng)?;
        Ok(Self { net, params })
    }

    pub fn from_parts(config: UNetConfig, params: ParamStore) -> Result<Self> {
        let net = UNet::new(config)?;
        net.check_params(&params)?;
        Ok(Self { net, params })
    }

    pub fn config(&self) -> &UNetConfig {
        self.net.config()
    }

    /// Folds batch statistics into the running buffers with momentum 0.1.
    pub fn apply_bn_stats(&mut self, stats: &[BnBatchStats]) -> Result<()> {
        for s in stats {
            for (suffix, vals) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let t = self.params.get_mut(&format!("{}.{suffix}", s.layer))?;
                for (r, v) in t.data_mut().iter_mut().zip(vals.iter()) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                }
            }
        }
        Ok(())
    }

    /// Softmax probabilities `[N, C, H, W]` with eval-mode batch norm.
    pub fn predict_probs(&self, images: &Tensor, hooks: &mut dyn for<'t> ForwardHooks<'t>) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let x = tape.constant(images.clone());
        let out = self.net.forward(&self.params, &bound, x, BnMode::Eval, hooks)?;
        let p = out.logits.softmax_channel()?;
        Ok((*p.value()).clone())
    }

    /// Deterministic eval-mode probabilities.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        self.predict_probs(images, &mut NoHooks)
    }
}

/// Argmax over the class axis of one `[C, H, W]` probability map.
pub fn argmax_labels(probs: &Tensor) -> Result<LabelMap> {
    if probs.ndim() != 3 {
        return Err(Error::shape("argmax_labels", format!("expected [C, H, W], got {:?}", probs.shape())));
    }
    let (c, h, w) = (probs.shape()[0], probs.shape()[1], probs.shape()[2]);
    let s = h * w;
    let d = probs.data();
    let labels = (0..s)
        .map(|v| {
            let mut best = 0;
            for k in 1..c {
                if d[k * s + v] > d[best * s + v] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(h, w, labels)
}
