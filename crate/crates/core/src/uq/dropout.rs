//! Monte-Carlo and concrete dropout on residual-unit branches.
//!
//! Both act on the branch output of every residual unit, after the second
//! convolution block and before the residual addition.

use crate::autograd::Var;
use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::model::{dice_ce_loss, BnMode, Bound, ForwardHooks, Model, Objective, ParamKind, StepLoss, UnitSpec};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Suffix of the per-unit learnable dropout logit, `<unit>.concrete.p_logit`.
pub const P_LOGIT_SUFFIX: &str = "concrete.p_logit";

pub(crate) fn p_logit_name(unit: &UnitSpec) -> String {
    format!("{}.{P_LOGIT_SUFFIX}", unit.name)
}

/// Inverted Bernoulli dropout with a fresh mask per call.
pub struct McDropoutHooks<'r> {
    pub p: f64,
    pub rng: &'r mut Rng,
}

impl<'t> ForwardHooks<'t> for McDropoutHooks<'_> {
    fn unit_branch(&mut self, _: &Bound<'t>, _: &UnitSpec, h: Var<'t>) -> Result<Var<'t>> {
        if self.p == 0.0 {
            return Ok(h);
        }
        let keep = 1.0 - self.p;
        let mask = Tensor::from_fn(&h.shape(), |_| if self.rng.bernoulli(keep) { 1.0 / keep } else { 0.0 });
        h.mul(h.tape().constant(mask))
    }
}

/// Trains with the same dropout that prediction samples from.
pub struct McDropoutObjective {
    pub p: f64,
}

impl Objective for McDropoutObjective {
    fn loss<'t>(
        &mut self,
        model: &Model,
        bound: &Bound<'t>,
        x: Var<'t>,
        labels: &[&LabelMap],
        _: usize,
        rng: &mut Rng,
    ) -> Result<StepLoss<'t>> {
        let out = model.net.forward(&model.params, bound, x, BnMode::Train, &mut McDropoutHooks { p: self.p, rng })?;
        Ok(StepLoss { loss: dice_ce_loss(out.logits, labels)?, bn_stats: out.bn_stats })
    }
}

/// Relaxed keep-mask `1 − sigmoid((logit p + ln u − ln(1−u)) / t)` for uniform
/// draws `u`, differentiable in the one-element `p_logit`.
pub fn concrete_mask<'t>(p_logit: Var<'t>, u: &Tensor, t: f64) -> Result<Var<'t>> {
    if !(t > 0.0) {
        return Err(Error::invalid(format!("concrete temperature {t} must be positive")));
    }
    let noise = u.map(|v| v.ln() - (1.0 - v).ln());
    let tape = p_logit.tape();
    p_logit.broadcast(u.shape())?.add(tape.constant(noise))?.scale(1.0 / t)?.sigmoid()?.neg()?.add_const(1.0)
}

/// Relaxed dropout whose rate is read from each unit's `p_logit` parameter.
pub struct ConcreteDropoutHooks<'r> {
    pub temperature: f64,
    pub rng: &'r mut Rng,
}

impl<'t> ForwardHooks<'t> for ConcreteDropoutHooks<'_> {
    fn unit_branch(&mut self, bound: &Bound<'t>, unit: &UnitSpec, h: Var<'t>) -> Result<Var<'t>> {
        let logit = bound.get(&p_logit_name(unit))?;
        let shape = h.shape();
        let u = Tensor::from_fn(&shape, |_| self.rng.uniform_open());
        let z = concrete_mask(logit, &u, self.temperature)?;
        let keep = logit.sigmoid()?.neg()?.add_const(1.0)?;
        h.mul(z)?.div(keep.broadcast(&shape)?)
    }
}

/// `Σ_l l²(1−p_l)/(2N)·‖W_l‖² + (K_l/N)·(p_l ln p_l + (1−p_l) ln(1−p_l))`.
pub fn concrete_regularizer<'t>(
    weights: &[Var<'t>],
    p_logits: &[Var<'t>],
    input_channels: &[usize],
    lengthscale: f64,
    n_data: usize,
) -> Result<Var<'t>> {
    if weights.is_empty() || weights.len() != p_logits.len() || weights.len() != input_channels.len() {
        return Err(Error::invalid("concrete_regularizer: need one weight, logit and channel count per layer"));
    }
    if n_data == 0 {
        return Err(Error::invalid("concrete_regularizer: n_data must be ≥ 1"));
    }
    let n = n_data as f64;
    let mut total: Option<Var<'t>> = None;
    for ((w, logit), &k) in weights.iter().zip(p_logits).zip(input_channels) {
        let p = logit.sigmoid()?;
        let q = p.neg()?.add_const(1.0)?;
        let weight_term = w.square()?.sum()?.mul(q)?.scale(lengthscale * lengthscale / (2.0 * n))?;
        let neg_entropy = p.mul(p.log()?)?.add(q.mul(q.log()?)?)?.sum()?.scale(k as f64 / n)?;
        let term = weight_term.add(neg_entropy)?;
        total = Some(match total {
            Some(acc) => acc.add(term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one layer"))
}

/// Learned dropout rate of every residual unit, in forward order.
pub fn dropout_probability(model: &Model) -> Result<Vec<(String, f64)>> {
    model
        .net
        .units()
        .into_iter()
        .map(|u| {
            let logit = model.params.get(&p_logit_name(u))?.item()?;
            Ok((u.name.clone(), 1.0 / (1.0 + (-logit).exp())))
        })
        .collect()
}

/// Adds one dropout logit per residual unit, initialized to `init_p`.
pub(crate) fn add_concrete_params(model: &mut Model, init_p: f64) -> Result<()> {
    let logit = (init_p / (1.0 - init_p)).ln();
    let names: Vec<String> = model.net.units().into_iter().map(p_logit_name).collect();
    for name in names {
        model.params.insert(name, Tensor::new(vec![1], vec![logit])?, ParamKind::Trainable)?;
    }
    Ok(())
}

/// Data loss plus the concrete regularizer over every unit's second
/// convolution, whose input the unit's dropout rate is tied to.
pub struct ConcreteObjective {
    pub temperature: f64,
    pub lengthscale: f64,
    pub n_data: Option<usize>,
}

impl Objective for ConcreteObjective {
    fn loss<'t>(
        &mut self,
        model: &Model,
        bound: &Bound<'t>,
        x: Var<'t>,
        labels: &[&LabelMap],
        n_train: usize,
        rng: &mut Rng,
    ) -> Result<StepLoss<'t>> {
        let mut hooks = ConcreteDropoutHooks { temperature: self.temperature, rng };
        let out = model.net.forward(&model.params, bound, x, BnMode::Train, &mut hooks)?;
        let units = model.net.units();
        let weights = units.iter().map(|u| bound.get(&u.conv2().weight_name())).collect::<Result<Vec<_>>>()?;
        let logits = units.iter().map(|u| bound.get(&p_logit_name(u))).collect::<Result<Vec<_>>>()?;
        let k: Vec<usize> = units.iter().map(|u| u.conv2().cin).collect();
        let reg = concrete_regularizer(&weights, &logits, &k, self.lengthscale, self.n_data.unwrap_or(n_train))?;
        Ok(StepLoss { loss: dice_ce_loss(out.logits, labels)?.add(reg)?, bn_stats: out.bn_stats })
    }
}
