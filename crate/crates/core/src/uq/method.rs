//! Training, prediction and persistence for every [`MethodTag`].

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::LabeledImage;
use crate::error::{Error, Result};
use crate::model::{
    recompute_bn_stats_from, train, Checkpoint, History, Model, Objective, OptimizerKind, ParamKind, ParamStore, PlainObjective,
    SplitDataset, TensorArchive, TrainConfig, TrainOutcome, TrainingHook, UNetConfig,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::dropout::{add_concrete_params, ConcreteDropoutHooks, ConcreteObjective, McDropoutHooks, McDropoutObjective};
use super::fast::{add_fast_weights, add_rank1_posterior, member_count, FastWeightHooks, FastWeightObjective, FastWeights, Rank1Objective};
use super::lpbnn::{build_vaes, sample_r, LayerVae, LpBnnObjective};
use super::swag::{swag_fit, SwagCollector, SwagStats};
use super::{aggregate_samples, base_uq, MethodTag, PredictiveResult, UQMethodSpec};

/// Stream for method-specific initial tensors, so the base weights of a
/// seed are the same for every method.
const METHOD_STREAM: u64 = 0x6d65_7468;
/// Stream of the second SWA/SWAG training phase.
const SWAG_STREAM: u64 = 0x7377_6167;
/// VAE steps on the final `r` vectors after LP-BNN training.
const VAE_FIT_STEPS: usize = 500;
/// Images per prediction forward.
const PREDICT_CHUNK: usize = 8;

pub const ARTIFACT_VERSION: u32 = 1;

/// Everything prediction needs for one method run.
#[derive(Clone, Debug)]
pub struct TrainedMethod {
    pub spec: UQMethodSpec,
    pub config: UNetConfig,
    pub train_config: TrainConfig,
    /// One model per member; a single entry for one-network methods. SWA and
    /// SWAG entries hold the SWA mean with re-estimated batch norm.
    pub members: Vec<Model>,
    pub vaes: Vec<LayerVae>,
    /// One per member for SWAG and multi-SWAG.
    pub swag: Vec<SwagStats>,
    /// Training images for re-estimating batch norm of sampled weights.
    pub bn_images: Vec<Tensor>,
    pub histories: Vec<History>,
    pub seeds: Vec<u64>,
}

/// Initial network for `seed`.
pub fn init_model(config: &UNetConfig, seed: u64) -> Result<Model> {
    Model::build(config.clone(), &mut Rng::new(seed))
}

fn run(model: Model, data: &SplitDataset<'_>, tc: &TrainConfig, seed: u64, objective: &mut dyn Objective) -> Result<TrainOutcome> {
    let tc = TrainConfig { seed, ..tc.clone() };
    train(model, data, &tc, objective, &mut [])
}

/// `m` independent trainings with seeds `base_seed + i`. Member 0 equals a
/// base training with `base_seed`.
pub fn train_ensemble(
    config: &UNetConfig,
    data: &SplitDataset<'_>,
    tc: &TrainConfig,
    m: usize,
    base_seed: u64,
) -> Result<Vec<TrainOutcome>> {
    if m == 0 {
        return Err(Error::invalid("an ensemble needs at least one member"));
    }
    (0..m as u64)
        .map(|i| {
            let seed = base_seed + i;
            init_model(config, seed)
                .and_then(|model| run(model, data, tc, seed, &mut PlainObjective))
                .map_err(|e| Error::Member { index: i as usize, source: Box::new(e) })
        })
        .collect()
}

fn join_histories(first: History, second: History) -> History {
    let offset = first.epochs.len();
    let mut epochs = first.epochs;
    epochs.extend(second.epochs.into_iter().map(|mut r| {
        r.epoch += offset;
        r
    }));
    History { epochs, train_seconds: first.train_seconds + second.train_seconds, ..first }
}

fn bn_subset(spec: &UQMethodSpec, data: &SplitDataset<'_>) -> Vec<Tensor> {
    let n = spec.swag.bn_images.unwrap_or(data.train.len()).min(data.train.len());
    data.train[..n].iter().map(|i| i.image.clone()).collect()
}

/// Model carrying `weights` (trainable entries, store order) with batch
/// norm re-estimated on `bn_images`.
fn with_weights(template: &Model, weights: &[f64], bn_images: &[Tensor], batch: usize) -> Result<Model> {
    let mut m = template.clone();
    m.params.unflatten(|_| true, weights)?;
    let refs: Vec<&Tensor> = bn_images.iter().collect();
    recompute_bn_stats_from(&mut m, &refs, batch)?;
    Ok(m)
}

/// One SWA/SWAG run: returns the SWA-mean model, the moments and the history.
fn swag_run(
    spec: &UQMethodSpec,
    config: &UNetConfig,
    data: &SplitDataset<'_>,
    tc: &TrainConfig,
    seed: u64,
    bn: &[Tensor],
) -> Result<(Model, SwagStats, History)> {
    let s = &spec.swag;
    let sgd = |max_epochs: usize, seed: u64| TrainConfig {
        optimizer: OptimizerKind::Sgd,
        lr: s.lr,
        max_epochs,
        patience: max_epochs,
        seed,
        ..tc.clone()
    };
    let model = init_model(config, seed)?;
    let mut collector;
    let history = match s.start_epoch {
        Some(start) => {
            collector = SwagCollector::new(&model, s.max_rank, start, s.interval);
            let hooks: &mut [&mut dyn TrainingHook] = &mut [&mut collector];
            train(model, data, &sgd(tc.max_epochs, seed), &mut PlainObjective, hooks)?.history
        }
        None => {
            let pre = run(model, data, tc, seed, &mut PlainObjective)?;
            let start = pre.best.model()?;
            collector = SwagCollector::new(&start, s.max_rank, 0, s.interval);
            let hooks: &mut [&mut dyn TrainingHook] = &mut [&mut collector];
            let post = train(start, data, &sgd(s.collect_epochs, seed ^ SWAG_STREAM), &mut PlainObjective, hooks)?;
            join_histories(pre.history, post.history)
        }
    };
    let stats = collector.stats;
    let need = if spec.tag == MethodTag::Swa { 1 } else { 2 };
    if stats.n < need {
        return Err(Error::invalid(format!("{} collected {} snapshots, needs {need}", spec.tag, stats.n)));
    }
    let template = init_model(config, seed)?;
    let mean = with_weights(&template, stats.swa_mean()?, bn, tc.batch_size)?;
    Ok((mean, stats, history))
}

/// Trains one run of `spec.tag`. Members use seeds `seed + i`.
pub fn train_method(
    spec: &UQMethodSpec,
    config: &UNetConfig,
    data: &SplitDataset<'_>,
    tc: &TrainConfig,
    seed: u64,
) -> Result<TrainedMethod> {
    spec.validate()?;
    tc.validate()?;
    let mut out = TrainedMethod {
        spec: spec.clone(),
        config: config.clone(),
        train_config: tc.clone(),
        members: Vec::new(),
        vaes: Vec::new(),
        swag: Vec::new(),
        bn_images: Vec::new(),
        histories: Vec::new(),
        seeds: vec![seed],
    };
    let mut extra = Rng::with_stream(seed, METHOD_STREAM);
    let m = spec.num_members;
    let single = |out: &mut TrainedMethod, model: Model, objective: &mut dyn Objective| -> Result<()> {
        let o = run(model, data, tc, seed, objective)?;
        out.members.push(o.best.model()?);
        out.histories.push(o.history);
        Ok(())
    };
    match spec.tag {
        MethodTag::Base => single(&mut out, init_model(config, seed)?, &mut PlainObjective)?,
        MethodTag::McDropout => single(&mut out, init_model(config, seed)?, &mut McDropoutObjective { p: spec.dropout_p })?,
        MethodTag::ConcreteDropout => {
            let mut model = init_model(config, seed)?;
            add_concrete_params(&mut model, spec.concrete.init_p)?;
            let c = &spec.concrete;
            single(&mut out, model, &mut ConcreteObjective { temperature: c.temperature, lengthscale: c.lengthscale, n_data: c.n_data })?;
        }
        MethodTag::Ensemble => {
            for o in train_ensemble(config, data, tc, m, seed)? {
                out.members.push(o.best.model()?);
                out.histories.push(o.history);
            }
            out.seeds = (0..m as u64).map(|i| seed + i).collect();
        }
        MethodTag::BatchEnsemble => {
            let mut model = init_model(config, seed)?;
            add_fast_weights(&mut model, m, &mut extra)?;
            single(&mut out, model, &mut FastWeightObjective { members: m })?;
        }
        MethodTag::Rank1Bnn => {
            let mut model = init_model(config, seed)?;
            add_rank1_posterior(&mut model, m, &spec.rank1, &mut extra)?;
            single(&mut out, model, &mut Rank1Objective { members: m, config: spec.rank1.clone() })?;
        }
        MethodTag::LpBnn => {
            let mut model = init_model(config, seed)?;
            add_fast_weights(&mut model, m, &mut extra)?;
            let vaes = build_vaes(&model, &spec.lpbnn, &mut extra)?;
            let mut objective = LpBnnObjective { inner: FastWeightObjective { members: m }, vaes, kl_weight: spec.lpbnn.kl_weight };
            single(&mut out, model, &mut objective)?;
            objective.fit_vaes(&out.members[0], VAE_FIT_STEPS, &mut extra)?;
            out.vaes = objective.vaes;
        }
        MethodTag::Swa | MethodTag::Swag | MethodTag::MultiSwag => {
            let runs = if spec.tag == MethodTag::MultiSwag { m } else { 1 };
            out.bn_images = bn_subset(spec, data);
            out.seeds = (0..runs as u64).map(|i| seed + i).collect();
            for (i, &s) in out.seeds.clone().iter().enumerate() {
                let (model, stats, history) =
                    swag_run(spec, config, data, tc, s, &out.bn_images).map_err(|e| Error::Member { index: i, source: Box::new(e) })?;
                out.members.push(model);
                out.swag.push(stats);
                out.histories.push(history);
            }
            if spec.tag == MethodTag::Swa {
                out.swag.clear();
                out.bn_images.clear();
            }
        }
    }
    Ok(out)
}

fn mismatch(msg: impl Into<String>) -> Error {
    Error::ArtifactMismatch(msg.into())
}

fn check_artifacts(spec: &UQMethodSpec, t: &TrainedMethod) -> Result<()> {
    spec.validate()?;
    if spec.tag != t.spec.tag {
        return Err(mismatch(format!("method {} cannot use {} artifacts", spec.tag, t.spec.tag)));
    }
    let first = t.members.first().ok_or_else(|| mismatch("no trained networks"))?;
    if t.members.iter().any(|m| m.config() != first.config()) {
        return Err(mismatch("members have different architectures"));
    }
    let dims: Vec<usize> = t.members.iter().map(|m| m.params.trainable_count()).collect();
    match spec.tag {
        MethodTag::Base | MethodTag::McDropout | MethodTag::Swa if t.members.len() != 1 => {
            Err(mismatch(format!("{} needs one network", spec.tag)))
        }
        MethodTag::ConcreteDropout if t.members.len() != 1 || super::dropout_probability(first).is_err() => {
            Err(mismatch("concrete dropout needs one network with dropout logits"))
        }
        MethodTag::BatchEnsemble | MethodTag::Rank1Bnn | MethodTag::LpBnn if t.members.len() != 1 || member_count(first).is_none() => {
            Err(mismatch(format!("{} needs one network with fast weights", spec.tag)))
        }
        MethodTag::LpBnn if t.vaes.is_empty() => Err(mismatch("lp_bnn needs layer VAEs")),
        MethodTag::Swag if t.members.len() != 1 => Err(mismatch("swag needs one posterior")),
        MethodTag::Swag | MethodTag::MultiSwag
            if t.swag.len() != t.members.len() || t.bn_images.is_empty() || t.swag.iter().zip(&dims).any(|(s, &d)| s.dim() != d) =>
        {
            Err(mismatch(format!("{} needs SWAG moments matching every network and batch-norm images", spec.tag)))
        }
        _ => Ok(()),
    }
}

/// Per-image `[C, H, W]` probabilities of one pass over `images`, chunked;
/// adds each image's share of the wall time to `seconds`.
fn pass(images: &[&Tensor], seconds: &mut [f64], mut forward: impl FnMut(&Tensor) -> Result<Tensor>) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(images.len());
    for (c, chunk) in images.chunks(PREDICT_CHUNK).enumerate() {
        let start = Instant::now();
        let probs = forward(&Tensor::stack_batch(chunk)?)?;
        for b in 0..chunk.len() {
            out.push(probs.batch_item(b)?);
        }
        let share = start.elapsed().as_secs_f64() / chunk.len() as f64;
        seconds[c * PREDICT_CHUNK..c * PREDICT_CHUNK + chunk.len()].iter_mut().for_each(|s| *s += share);
    }
    Ok(out)
}

/// Runs `spec` on `[C_in, H, W]` images with the trained artifacts. Weights
/// are never modified; stochastic draws come from `rng` in pass order.
pub fn predict_batch(spec: &UQMethodSpec, trained: &TrainedMethod, images: &[&Tensor], rng: &mut Rng) -> Result<Vec<PredictiveResult>> {
    check_artifacts(spec, trained)?;
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let mut seconds = vec![0.0; images.len()];
    let model = &trained.members[0];
    let t = spec.num_samples;
    let mut passes: Vec<Vec<Tensor>> = Vec::new();
    let batch = trained.train_config.batch_size;
    let spread = |seconds: &mut [f64], start: Instant| {
        let share = start.elapsed().as_secs_f64() / seconds.len() as f64;
        seconds.iter_mut().for_each(|s| *s += share);
    };
    match spec.tag {
        MethodTag::Base | MethodTag::Swa => passes.push(pass(images, &mut seconds, |x| model.predict(x))?),
        MethodTag::McDropout => {
            for _ in 0..t {
                passes.push(pass(images, &mut seconds, |x| {
                    model.predict_probs(x, &mut McDropoutHooks { p: spec.dropout_p, rng: &mut *rng })
                })?);
            }
        }
        MethodTag::ConcreteDropout => {
            let temperature = spec.concrete.temperature;
            for _ in 0..t {
                passes.push(pass(images, &mut seconds, |x| {
                    model.predict_probs(x, &mut ConcreteDropoutHooks { temperature, rng: &mut *rng })
                })?);
            }
        }
        MethodTag::Ensemble => {
            for m in &trained.members {
                passes.push(pass(images, &mut seconds, |x| m.predict(x))?);
            }
        }
        MethodTag::BatchEnsemble => {
            let members = member_count(model).expect("checked");
            for k in 0..members {
                passes.push(pass(images, &mut seconds, |x| model.predict_probs(x, &mut FastWeightHooks::point(vec![k; x.shape()[0]])))?);
            }
        }
        MethodTag::Rank1Bnn => {
            let members = member_count(model).expect("checked");
            for i in 0..t {
                let k = i % members;
                passes.push(pass(images, &mut seconds, |x| {
                    let mut hooks = FastWeightHooks { source: FastWeights::Sampled, members: vec![k; x.shape()[0]], rng: Some(&mut *rng) };
                    model.predict_probs(x, &mut hooks)
                })?);
            }
        }
        MethodTag::LpBnn => {
            let members = member_count(model).expect("checked");
            for i in 0..t {
                let k = i % members;
                let start = Instant::now();
                let source = FastWeights::Decoded(sample_r(model, &trained.vaes, rng)?);
                spread(&mut seconds, start);
                passes.push(pass(images, &mut seconds, |x| {
                    model.predict_probs(x, &mut FastWeightHooks { source: source.clone(), members: vec![k; x.shape()[0]], rng: None })
                })?);
            }
        }
        MethodTag::Swag | MethodTag::MultiSwag => {
            for (template, stats) in trained.members.iter().zip(&trained.swag) {
                let posterior = swag_fit(stats)?;
                for _ in 0..t {
                    let start = Instant::now();
                    let w = posterior.sample(spec.swag.scale, rng);
                    let sampled = with_weights(template, &w, &trained.bn_images, batch)?;
                    spread(&mut seconds, start);
                    passes.push(pass(images, &mut seconds, |x| sampled.predict(x))?);
                }
            }
        }
    }

    let sampled = !matches!(spec.tag, MethodTag::Base | MethodTag::Swa);
    let n_samples = passes.len();
    (0..images.len())
        .map(|i| {
            let per: Vec<Tensor> = passes.iter().map(|p| p[i].clone()).collect();
            let (mean_probs, uncertainty_map, samples) = if sampled {
                let (mean, unc) = aggregate_samples(&per, spec.uncertainty)?;
                (mean, unc, Some(per))
            } else {
                let mean = per.into_iter().next().expect("one pass");
                let unc = base_uq(&mean)?;
                (mean, unc, None)
            };
            Ok(PredictiveResult { method: spec.tag, mean_probs, uncertainty_map, samples, n_samples, inference_seconds: seconds[i] })
        })
        .collect()
}

/// [`predict_batch`] for one image.
pub fn predict(spec: &UQMethodSpec, trained: &TrainedMethod, image: &Tensor, rng: &mut Rng) -> Result<PredictiveResult> {
    Ok(predict_batch(spec, trained, &[image], rng)?.pop().expect("one image in, one result out"))
}

/// Bytes of one training forward/backward of the first network on
/// `sample` alone: values retained on the tape plus materialized gradients.
/// Batch-ensemble-style methods tile the sample once per member, as in
/// training.
pub fn pass_bytes(spec: &UQMethodSpec, trained: &TrainedMethod, sample: &LabeledImage, rng: &mut Rng) -> Result<usize> {
    check_artifacts(spec, trained)?;
    let model = &trained.members[0];
    let m = spec.num_members;
    let mut objective: Box<dyn Objective> = match spec.tag {
        MethodTag::McDropout => Box::new(McDropoutObjective { p: spec.dropout_p }),
        MethodTag::ConcreteDropout => {
            let c = &spec.concrete;
            Box::new(ConcreteObjective { temperature: c.temperature, lengthscale: c.lengthscale, n_data: c.n_data })
        }
        MethodTag::BatchEnsemble | MethodTag::LpBnn => Box::new(FastWeightObjective { members: m }),
        MethodTag::Rank1Bnn => Box::new(Rank1Objective { members: m, config: spec.rank1.clone() }),
        _ => Box::new(PlainObjective),
    };
    let tape = crate::autograd::Tape::new();
    let bound = model.params.bind(&tape, true);
    let x = tape.constant(Tensor::stack_batch(&[&sample.image])?);
    let step = objective.loss(model, &bound, x, &[&sample.labels], 1, rng)?;
    tape.backward(step.loss)?;
    Ok(tape.activation_bytes() + tape.gradient_bytes())
}

/// Convenience for callers holding labeled images.
pub fn image_refs<'a>(items: &[&'a LabeledImage]) -> Vec<&'a Tensor> {
    items.iter().map(|i| &i.image).collect()
}

/// `manifest.json` of an artifact directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactManifest {
    pub format_version: u32,
    pub method: UQMethodSpec,
    pub unet: UNetConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub members: Vec<String>,
    pub swag_stats: Vec<String>,
    pub vaes: Vec<String>,
    pub bn_images: Option<String>,
    pub histories: Vec<History>,
}

/// Writes `manifest.json`, `member_000.ckpt`…, `swag_stats.bin` (or
/// `swag_stats_000.bin`… for several posteriors), `vae_layer_<name>.ckpt`
/// and `bn_images.bin` into `dir`.
pub fn save_artifacts(dir: &Path, t: &TrainedMethod) -> Result<ArtifactManifest> {
    fs::create_dir_all(dir)?;
    let mut manifest = ArtifactManifest {
        format_version: ARTIFACT_VERSION,
        method: t.spec.clone(),
        unet: t.config.clone(),
        train: t.train_config.clone(),
        seeds: t.seeds.clone(),
        members: Vec::new(),
        swag_stats: Vec::new(),
        vaes: Vec::new(),
        bn_images: None,
        histories: t.histories.clone(),
    };
    for (i, m) in t.members.iter().enumerate() {
        let name = format!("member_{i:03}.ckpt");
        let h = t.histories.get(i);
        let best = h.and_then(|h| h.epochs.get(h.best_epoch));
        let seed = t.seeds.get(i).copied().unwrap_or(t.seeds[0]);
        let ck = Checkpoint::new(m, Rng::new(seed).state(), best.map_or(0, |r| r.epoch), best.map_or(f64::NAN, |r| r.val_dsc));
        ck.save(&dir.join(&name))?;
        manifest.members.push(name);
    }
    for (i, s) in t.swag.iter().enumerate() {
        let name = if t.swag.len() == 1 { "swag_stats.bin".to_string() } else { format!("swag_stats_{i:03}.bin") };
        s.to_archive()?.save(&dir.join(&name))?;
        manifest.swag_stats.push(name);
    }
    for v in &t.vaes {
        let name = format!("vae_layer_{}.ckpt", v.layer);
        v.to_archive().save(&dir.join(&name))?;
        manifest.vaes.push(name);
    }
    if !t.bn_images.is_empty() {
        let mut tensors = ParamStore::new();
        for (i, img) in t.bn_images.iter().enumerate() {
            tensors.insert(format!("image_{i:05}"), img.clone(), ParamKind::Buffer)?;
        }
        TensorArchive { meta: serde_json::Value::Null, tensors }.save(&dir.join("bn_images.bin"))?;
        manifest.bn_images = Some("bn_images.bin".into());
    }
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_artifacts(dir: &Path) -> Result<TrainedMethod> {
    let manifest: ArtifactManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    if manifest.format_version != ARTIFACT_VERSION {
        return Err(Error::Format(format!("artifact version {} (expected {ARTIFACT_VERSION})", manifest.format_version)));
    }
    let members = manifest
        .members
        .iter()
        .map(|n| {
            let ck = Checkpoint::load(&dir.join(n))?;
            if ck.config != manifest.unet {
                return Err(mismatch(format!("{n} was trained with a different network config")));
            }
            ck.model()
        })
        .collect::<Result<Vec<_>>>()?;
    let swag =
        manifest.swag_stats.iter().map(|n| SwagStats::from_archive(&TensorArchive::load(&dir.join(n))?)).collect::<Result<Vec<_>>>()?;
    let vaes = manifest.vaes.iter().map(|n| LayerVae::from_archive(TensorArchive::load(&dir.join(n))?)).collect::<Result<Vec<_>>>()?;
    let bn_images = match &manifest.bn_images {
        Some(n) => TensorArchive::load(&dir.join(n))?.tensors.iter().map(|(_, p)| p.value.clone()).collect(),
        None => Vec::new(),
    };
    let t = TrainedMethod {
        spec: manifest.method,
        config: manifest.unet,
        train_config: manifest.train,
        members,
        vaes,
        swag,
        bn_images,
        histories: manifest.histories,
        seeds: manifest.seeds,
    };
    check_artifacts(&t.spec, &t)?;
    Ok(t)
}
