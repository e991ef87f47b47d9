//! Rank-1 fast weights: batch ensemble, rank-1 BNN and the LP-BNN base.
//!
//! Member `m` of a convolution uses the weight `W ⊙ (r_m s_mᵀ)`, computed as
//! `r_m ⊙ (conv(s_m ⊙ x))`: `s` scales input channels, `r` output channels.
//! The bias is scaled by `r` too. Vectors of all members live in one
//! `[M, C]` matrix per side and every batch row selects its member's row.

use std::collections::HashMap;

use crate::autograd::Var;
use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::model::{dice_ce_loss, BnMode, Bound, ConvSpec, ForwardHooks, Model, Objective, ParamKind, StepLoss};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::Rank1Config;

pub(crate) fn be_name(conv: &str, side: char) -> String {
    format!("{conv}.be_{side}")
}

pub(crate) fn rank1_name(conv: &str, side: char, what: &str) -> String {
    format!("{conv}.rank1.{side}_{what}")
}

/// Number of members stored for the fast weights of `model`, if any.
pub(crate) fn member_count(model: &Model) -> Option<usize> {
    let conv = model.net.convs().into_iter().next()?;
    [be_name(&conv.name, 'r'), rank1_name(&conv.name, 'r', "mean")].iter().find_map(|n| model.params.get(n).ok().map(|t| t.shape()[0]))
}

/// Adds point fast weights `<conv>.be_r` `[M, cout]` and `<conv>.be_s`
/// `[M, cin]` to every convolution, entries drawn as random signs.
pub fn add_fast_weights(model: &mut Model, members: usize, rng: &mut Rng) -> Result<()> {
    if members == 0 {
        return Err(Error::invalid("fast weights need at least one member"));
    }
    for c in model.net.convs() {
        for (side, len) in [('r', c.cout), ('s', c.cin)] {
            let t = Tensor::from_fn(&[members, len], |_| if rng.bernoulli(0.5) { 1.0 } else { -1.0 });
            model.params.insert(be_name(&c.name, side), t, ParamKind::Trainable)?;
        }
    }
    Ok(())
}

/// Adds a factorized Gaussian posterior over every convolution's `r` and
/// `s`: means drawn from the prior, log-std at `ln init_std`.
pub fn add_rank1_posterior(model: &mut Model, members: usize, cfg: &Rank1Config, rng: &mut Rng) -> Result<()> {
    if members == 0 {
        return Err(Error::invalid("rank-1 posterior needs at least one member"));
    }
    for c in model.net.convs() {
        for (side, len) in [('r', c.cout), ('s', c.cin)] {
            let mean = Tensor::from_fn(&[members, len], |_| cfg.prior_mean + cfg.prior_std * rng.normal());
            model.params.insert(rank1_name(&c.name, side, "mean"), mean, ParamKind::Trainable)?;
            let logstd = Tensor::full(&[members, len], cfg.init_std.ln());
            model.params.insert(rank1_name(&c.name, side, "logstd"), logstd, ParamKind::Trainable)?;
        }
    }
    Ok(())
}

/// Repeats a batch `m` times along the leading axis.
pub fn tile_batch(x: &Tensor, m: usize) -> Result<Tensor> {
    if x.ndim() == 0 || m == 0 {
        return Err(Error::invalid("tile_batch needs a batched tensor and m ≥ 1"));
    }
    let mut shape = x.shape().to_vec();
    shape[0] *= m;
    let data = x.data().iter().copied().cycle().take(x.len() * m).collect();
    Tensor::new(shape, data)
}

/// `r ⊙ ((x ⊙ s)·Wᵀ + b)` for `x: [N, in]`, `r: [out]`, `s: [in]`.
pub fn fast_linear<'t>(x: Var<'t>, w: Var<'t>, b: Var<'t>, r: Var<'t>, s: Var<'t>) -> Result<Var<'t>> {
    x.scale_axis(s, 1)?.linear(w, b)?.scale_axis(r, 1)
}

/// Source of the `[M, C]` fast-weight matrices.
#[derive(Clone, Debug, PartialEq)]
pub enum FastWeights {
    /// Point vectors `<conv>.be_r`, `<conv>.be_s`.
    Point,
    /// One reparameterized draw `μ + σ ⊙ ε` per forward from the rank-1
    /// posterior.
    Sampled,
    /// Rank-1 posterior means.
    PosteriorMean,
    /// Point vectors, with `r` of the listed convolutions replaced by the
    /// given `[M, cout]` constants.
    Decoded(HashMap<String, Tensor>),
}

/// Routes batch row `i` through member `members[i]`.
pub struct FastWeightHooks<'r> {
    pub source: FastWeights,
    pub members: Vec<usize>,
    /// Required by [`FastWeights::Sampled`].
    pub rng: Option<&'r mut Rng>,
}

impl<'r> FastWeightHooks<'r> {
    pub fn point(members: Vec<usize>) -> Self {
        Self { source: FastWeights::Point, members, rng: None }
    }

    fn matrix<'t>(&mut self, bound: &Bound<'t>, conv: &ConvSpec, side: char) -> Result<Var<'t>> {
        match &self.source {
            FastWeights::Point => bound.get(&be_name(&conv.name, side)),
            FastWeights::Decoded(map) => match (side, map.get(&conv.name)) {
                ('r', Some(t)) => {
                    let tape = bound.get(&conv.weight_name())?.tape();
                    Ok(tape.constant(t.clone()))
                }
                _ => bound.get(&be_name(&conv.name, side)),
            },
            FastWeights::PosteriorMean => bound.get(&rank1_name(&conv.name, side, "mean")),
            FastWeights::Sampled => {
                let mean = bound.get(&rank1_name(&conv.name, side, "mean"))?;
                let logstd = bound.get(&rank1_name(&conv.name, side, "logstd"))?;
                let rng = self.rng.as_deref_mut().ok_or_else(|| Error::invalid("sampled fast weights need an rng"))?;
                let eps = Tensor::from_fn(&mean.shape(), |_| rng.normal());
                mean.add(logstd.exp()?.mul(mean.tape().constant(eps))?)
            }
        }
    }

    fn scale<'t>(&mut self, bound: &Bound<'t>, conv: &ConvSpec, side: char, x: Var<'t>) -> Result<Var<'t>> {
        let n = x.shape()[0];
        if n != self.members.len() {
            return Err(Error::shape("fast weights", format!("{} member indices for batch of {n}", self.members.len())));
        }
        let m = self.matrix(bound, conv, side)?;
        x.scale_channels(m.gather_rows(&self.members)?)
    }
}

impl<'t> ForwardHooks<'t> for FastWeightHooks<'_> {
    fn conv_input(&mut self, bound: &Bound<'t>, conv: &ConvSpec, x: Var<'t>) -> Result<Var<'t>> {
        self.scale(bound, conv, 's', x)
    }

    fn conv_output(&mut self, bound: &Bound<'t>, conv: &ConvSpec, y: Var<'t>) -> Result<Var<'t>> {
        self.scale(bound, conv, 'r', y)
    }
}

/// Member index of every row of an `m`-way tiled batch of `n` rows.
pub(crate) fn tiled_members(n: usize, m: usize) -> Vec<usize> {
    (0..m).flat_map(|k| std::iter::repeat_n(k, n)).collect()
}

fn tiled_labels<'a>(labels: &[&'a LabelMap], m: usize) -> Vec<&'a LabelMap> {
    (0..m).flat_map(|_| labels.iter().copied()).collect()
}

/// Mean over members of eval-mode probabilities with member-constant routing.
pub(crate) fn member_average(model: &Model, images: &Tensor, m: usize, source: &FastWeights) -> Result<Tensor> {
    let n = images.shape()[0];
    let mut acc: Option<Tensor> = None;
    for k in 0..m {
        let mut hooks = FastWeightHooks { source: source.clone(), members: vec![k; n], rng: None };
        let p = model.predict_probs(images, &mut hooks)?;
        acc = Some(match acc {
            None => p,
            Some(mut a) => {
                a.data_mut().iter_mut().zip(p.data()).for_each(|(a, b)| *a += b);
                a
            }
        });
    }
    let acc = acc.ok_or_else(|| Error::invalid("member average over zero members"))?;
    Ok(acc.map(|v| v / m as f64))
}

/// Batch-ensemble training: the minibatch is tiled `members` ways, slice `k`
/// routed through member `k`, in one forward with shared batch statistics.
pub struct FastWeightObjective {
    pub members: usize,
}

impl Objective for FastWeightObjective {
    fn loss<'t>(
        &mut self,
        model: &Model,
        bound: &Bound<'t>,
        x: Var<'t>,
        labels: &[&LabelMap],
        _: usize,
        _: &mut Rng,
    ) -> Result<StepLoss<'t>> {
        let n = x.shape()[0];
        let xt = x.tape().constant(tile_batch(&x.value(), self.members)?);
        let mut hooks = FastWeightHooks::point(tiled_members(n, self.members));
        let out = model.net.forward(&model.params, bound, xt, BnMode::Train, &mut hooks)?;
        Ok(StepLoss { loss: dice_ce_loss(out.logits, &tiled_labels(labels, self.members))?, bn_stats: out.bn_stats })
    }

    fn predict_val(&mut self, model: &Model, images: &Tensor, _: &mut Rng) -> Result<Tensor> {
        member_average(model, images, self.members, &FastWeights::Point)
    }
}

/// Closed-form `Σ KL(N(μ, σ²) ‖ N(m0, s0²))` with `σ = exp(logstd)`, written
/// in terms of `logstd − ln s0` so that it is exactly zero at the prior.
pub fn gaussian_kl<'t>(mean: Var<'t>, logstd: Var<'t>, prior_mean: f64, prior_std: f64) -> Result<Var<'t>> {
    if !(prior_std > 0.0) {
        return Err(Error::invalid(format!("prior std {prior_std} must be positive")));
    }
    let d = logstd.add_const(-prior_std.ln())?;
    let ratio2 = d.scale(2.0)?.exp()?;
    let z2 = mean.add_const(-prior_mean)?.scale(1.0 / prior_std)?.square()?;
    ratio2.add(z2)?.add_const(-1.0)?.scale(0.5)?.sub(d)?.sum()
}

/// KL of the whole rank-1 posterior (every convolution, both sides, all
/// members) against `N(prior_mean, prior_std²)`.
pub fn rank1_kl<'t>(model: &Model, bound: &Bound<'t>, prior_mean: f64, prior_std: f64) -> Result<Var<'t>> {
    let mut total: Option<Var<'t>> = None;
    for c in model.net.convs() {
        for side in ['r', 's'] {
            let mean = bound.get(&rank1_name(&c.name, side, "mean"))?;
            let logstd = bound.get(&rank1_name(&c.name, side, "logstd"))?;
            let kl = gaussian_kl(mean, logstd, prior_mean, prior_std)?;
            total = Some(match total {
                Some(acc) => acc.add(kl)?,
                None => kl,
            });
        }
    }
    total.ok_or_else(|| Error::invalid("network has no convolutions"))
}

/// Negative log-likelihood (Dice + CE) of one reparameterized posterior draw
/// on an `m`-way tiled batch, and the posterior KL.
#[allow(clippy::too_many_arguments)]
pub fn rank1_elbo_terms<'t>(
    model: &Model,
    bound: &Bound<'t>,
    x: Var<'t>,
    labels: &[&LabelMap],
    members: usize,
    cfg: &Rank1Config,
    rng: &mut Rng,
) -> Result<(Var<'t>, Var<'t>, Vec<crate::model::BnBatchStats>)> {
    let n = x.shape()[0];
    let xt = x.tape().constant(tile_batch(&x.value(), members)?);
    let mut hooks = FastWeightHooks { source: FastWeights::Sampled, members: tiled_members(n, members), rng: Some(rng) };
    let out = model.net.forward(&model.params, bound, xt, BnMode::Train, &mut hooks)?;
    let nll = dice_ce_loss(out.logits, &tiled_labels(labels, members))?;
    let kl = rank1_kl(model, bound, cfg.prior_mean, cfg.prior_std)?;
    Ok((nll, kl, out.bn_stats))
}

/// `nll + kl / N_data`, validated on posterior means.
pub struct Rank1Objective {
    pub members: usize,
    pub config: Rank1Config,
}

impl Objective for Rank1Objective {
    fn loss<'t>(
        &mut self,
        model: &Model,
        bound: &Bound<'t>,
        x: Var<'t>,
        labels: &[&LabelMap],
        n_train: usize,
        rng: &mut Rng,
    ) -> Result<StepLoss<'t>> {
        let (nll, kl, bn_stats) = rank1_elbo_terms(model, bound, x, labels, self.members, &self.config, rng)?;
        let n = self.config.n_data.unwrap_or(n_train).max(1) as f64;
        Ok(StepLoss { loss: nll.add(kl.scale(1.0 / n)?)?, bn_stats })
    }

    fn predict_val(&mut self, model: &Model, images: &Tensor, _: &mut Rng) -> Result<Tensor> {
        member_average(model, images, self.members, &FastWeights::PosteriorMean)
    }
}
