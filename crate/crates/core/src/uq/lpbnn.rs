//! Latent posterior over batch-ensemble `r` vectors.
//!
//! One small VAE per convolution whose output width exceeds the latent
//! size. It is fitted to the `M` member rows of that layer's `r` matrix, one
//! Adam step after every network step. At prediction a member's vector is
//! replaced by a decoded draw `z ~ q(z | r_m)`.

use std::collections::HashMap;

use serde_json::json;

use crate::autograd::{Tape, Var};
use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::model::{Bound, Model, Objective, Optimizer, OptimizerKind, ParamKind, ParamStore, StepLoss, TensorArchive};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::fast::{be_name, member_average, FastWeightObjective, FastWeights};
use super::LpBnnConfig;

#[derive(Clone, Debug)]
pub struct LayerVae {
    /// Convolution whose `r` vectors are modeled.
    pub layer: String,
    pub dim: usize,
    pub latent: usize,
    pub hidden: usize,
    pub params: ParamStore,
    opt: Optimizer,
}

pub struct VaeLoss<'t> {
    /// Mean over rows of the squared reconstruction error summed over entries.
    pub recon: Var<'t>,
    /// Mean over rows of `KL(q(z|r) ‖ N(0, I))`.
    pub kl: Var<'t>,
}

impl LayerVae {
    pub fn new(layer: impl Into<String>, dim: usize, cfg: &LpBnnConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.latent_dim >= dim {
            return Err(Error::invalid(format!("latent dim {} must be below vector length {dim}", cfg.latent_dim)));
        }
        let (l, h) = (cfg.latent_dim, cfg.hidden);
        let mut params = ParamStore::new();
        for (name, (out, inp)) in ["enc", "mu", "logstd", "dec1", "dec2"].into_iter().zip([(h, dim), (l, h), (l, h), (h, l), (dim, h)]) {
            let bound = 1.0 / (inp as f64).sqrt();
            params.insert(
                format!("{name}.weight"),
                Tensor::from_fn(&[out, inp], |_| rng.uniform_range(-bound, bound)),
                ParamKind::Trainable,
            )?;
            params.insert(format!("{name}.bias"), Tensor::zeros(&[out]), ParamKind::Trainable)?;
        }
        Ok(Self { layer: layer.into(), dim, latent: l, hidden: h, params, opt: Optimizer::new(OptimizerKind::Adam, cfg.lr) })
    }

    fn dense<'t>(bound: &Bound<'t>, name: &str, x: Var<'t>) -> Result<Var<'t>> {
        x.linear(bound.get(&format!("{name}.weight"))?, bound.get(&format!("{name}.bias"))?)
    }

    /// `(μ, log σ)` of `q(z | r)` for rows `r: [B, dim]`.
    pub fn encode<'t>(&self, bound: &Bound<'t>, r: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let h = Self::dense(bound, "enc", r)?.tanh()?;
        Ok((Self::dense(bound, "mu", h)?, Self::dense(bound, "logstd", h)?))
    }

    pub fn decode_var<'t>(&self, bound: &Bound<'t>, z: Var<'t>) -> Result<Var<'t>> {
        let h = Self::dense(bound, "dec1", z)?.tanh()?;
        Self::dense(bound, "dec2", h)
    }

    /// Reconstruction and KL terms for rows `r` with noise `eps: [B, latent]`.
    pub fn loss<'t>(&self, bound: &Bound<'t>, r: &Tensor, eps: &Tensor) -> Result<VaeLoss<'t>> {
        self.check_rows(r)?;
        let tape = bound.get("enc.weight")?.tape();
        let rows = r.shape()[0] as f64;
        let rv = tape.constant(r.clone());
        let (mu, logstd) = self.encode(bound, rv)?;
        let z = mu.add(logstd.exp()?.mul(tape.constant(eps.clone()))?)?;
        let recon = self.decode_var(bound, z)?.sub(rv)?.square()?.sum()?.scale(1.0 / rows)?;
        let kl = logstd.scale(2.0)?.exp()?.add(mu.square()?)?.add_const(-1.0)?.sub(logstd.scale(2.0)?)?.sum()?.scale(0.5 / rows)?;
        Ok(VaeLoss { recon, kl })
    }

    /// One Adam step on `recon + kl_weight·kl`; returns the loss value.
    pub fn step(&mut self, r: &Tensor, kl_weight: f64, rng: &mut Rng) -> Result<f64> {
        let eps = Tensor::from_fn(&[r.shape()[0], self.latent], |_| rng.normal());
        let (value, grads) = {
            let tape = Tape::new();
            let bound = self.params.bind(&tape, true);
            let l = self.loss(&bound, r, &eps)?;
            let total = l.recon.add(l.kl.scale(kl_weight)?)?;
            tape.backward(total)?;
            (total.item()?, bound.grads())
        };
        self.opt.step(&mut self.params, &grads)?;
        Ok(value)
    }

    /// Decodes latent rows `z: [B, latent]`.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let out = self.decode_var(&bound, tape.constant(z.clone()))?;
        Ok((*out.value()).clone())
    }

    /// Posterior means `μ(r)` of rows `r`.
    pub fn encode_mean(&self, r: &Tensor) -> Result<Tensor> {
        self.check_rows(r)?;
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let (mu, _) = self.encode(&bound, tape.constant(r.clone()))?;
        Ok((*mu.value()).clone())
    }

    /// Fresh vectors: `z ~ q(z | r_i)` decoded, one per row of `r`.
    pub fn sample(&self, r: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        self.check_rows(r)?;
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let (mu, logstd) = self.encode(&bound, tape.constant(r.clone()))?;
        let eps = Tensor::from_fn(&mu.shape(), |_| rng.normal());
        let z = mu.add(logstd.exp()?.mul(tape.constant(eps))?)?;
        Ok((*self.decode_var(&bound, z)?.value()).clone())
    }

    fn check_rows(&self, r: &Tensor) -> Result<()> {
        if r.ndim() != 2 || r.shape()[1] != self.dim || r.shape()[0] == 0 {
            return Err(Error::shape("layer vae", format!("rows {:?} for vector length {}", r.shape(), self.dim)));
        }
        Ok(())
    }

    pub fn to_archive(&self) -> TensorArchive {
        TensorArchive {
            meta: json!({ "layer": self.layer, "dim": self.dim, "latent": self.latent, "hidden": self.hidden, "lr": self.opt.lr() }),
            tensors: self.params.clone(),
        }
    }

    /// Restores a VAE; optimizer moments start fresh.
    pub fn from_archive(a: TensorArchive) -> Result<Self> {
        let field = |k: &str| a.meta.get(k).ok_or_else(|| Error::Format(format!("vae archive lacks {k}")));
        let layer = field("layer")?.as_str().ok_or_else(|| Error::Format("vae layer name".into()))?.to_string();
        let num = |k: &str| -> Result<usize> { field(k)?.as_u64().map(|v| v as usize).ok_or_else(|| Error::Format(format!("vae {k}"))) };
        let (dim, latent, hidden) = (num("dim")?, num("latent")?, num("hidden")?);
        let lr = field("lr")?.as_f64().ok_or_else(|| Error::Format("vae lr".into()))?;
        for (name, shape) in [("enc.weight", [hidden, dim]), ("mu.weight", [latent, hidden]), ("dec2.weight", [dim, hidden])] {
            if a.tensors.get(name)?.shape() != shape {
                return Err(Error::ArtifactMismatch(format!("vae {layer}: {name} has wrong shape")));
            }
        }
        Ok(Self { layer, dim, latent, hidden, params: a.tensors, opt: Optimizer::new(OptimizerKind::Adam, lr) })
    }
}

/// One VAE per convolution with more output channels than `latent_dim`.
pub(crate) fn build_vaes(model: &Model, cfg: &LpBnnConfig, rng: &mut Rng) -> Result<Vec<LayerVae>> {
    model.net.convs().into_iter().filter(|c| c.cout > cfg.latent_dim).map(|c| LayerVae::new(c.name, c.cout, cfg, rng)).collect()
}

/// Decoded draws replacing the `r` matrix of every modeled layer.
pub(crate) fn sample_r(model: &Model, vaes: &[LayerVae], rng: &mut Rng) -> Result<HashMap<String, Tensor>> {
    vaes.iter().map(|v| Ok((v.layer.clone(), v.sample(model.params.get(&be_name(&v.layer, 'r'))?, rng)?))).collect()
}

/// Batch-ensemble loss with interleaved VAE steps on the current `r` rows.
pub struct LpBnnObjective {
    pub inner: FastWeightObjective,
    pub vaes: Vec<LayerVae>,
    pub kl_weight: f64,
}

impl LpBnnObjective {
    /// Extra VAE steps on fixed `r` matrices, e.g. those of the best epoch.
    pub fn fit_vaes(&mut self, model: &Model, steps: usize, rng: &mut Rng) -> Result<()> {
        for v in &mut self.vaes {
            let r = model.params.get(&be_name(&v.layer, 'r'))?.clone();
            for _ in 0..steps {
                v.step(&r, self.kl_weight, rng)?;
            }
        }
        Ok(())
    }
}

impl Objective for LpBnnObjective {
    fn loss<'t>(
        &mut self,
        model: &Model,
        bound: &Bound<'t>,
        x: Var<'t>,
        labels: &[&LabelMap],
        n_train: usize,
        rng: &mut Rng,
    ) -> Result<StepLoss<'t>> {
        self.inner.loss(model, bound, x, labels, n_train, rng)
    }

    fn predict_val(&mut self, model: &Model, images: &Tensor, _: &mut Rng) -> Result<Tensor> {
        member_average(model, images, self.inner.members, &FastWeights::Point)
    }

    fn after_step(&mut self, model: &mut Model, rng: &mut Rng) -> Result<()> {
        self.fit_vaes(model, 1, rng)
    }
}
