use std::fmt;
use std::fs::File;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::align::{alignment_objective, init_alignment, separation, AlignPair, Separation, IMAGE_ENCODER, KSPACE_ENCODER};
use crate::backbone::{init_encoder, init_mae, mae_objective, EncoderConfig, LossPositions};
use crate::error::{KmtrError, Result};
use crate::heads::{class_weights, forward, init_head, task_loss, HeadConfig, Targets, Task, TargetNorm, ENCODER, N_DISEASES, N_PHENOTYPES};
use crate::metrics::MetricReport;
use crate::nn::{AdamW, AdamWConfig, Graph, Mat, ParameterStore, Var};
use crate::nn::optim::cosine_lr;
use crate::phantom::derive_seed;
use crate::tokenizer::{random_visible_partition, Domain, PatchSequence};

use super::checkpoint::Checkpoint;
use super::config::{ExperimentConfig, StageSettings};
use super::data::{Dataset, Split, Subject};
use super::{checkpoint_path, ensure_parent, log_path};

pub const PRETRAIN_IMAGE: &str = "pretrain_image";
pub const PRETRAIN_KSPACE: &str = "pretrain_kspace";
pub const ALIGN: &str = "align";

/// Which k-space encoder a downstream run starts from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    /// Stage II aligned encoder (k-MTR).
    Aligned,
    /// Stage I k-space encoder without alignment (MAE_k^u).
    Unaligned,
    /// Freshly initialized encoder.
    Random,
}

impl EncoderVariant {
    pub const ALL: [EncoderVariant; 3] = [EncoderVariant::Aligned, EncoderVariant::Unaligned, EncoderVariant::Random];

    pub fn name(self) -> &'static str {
        match self {
            EncoderVariant::Aligned => "aligned",
            EncoderVariant::Unaligned => "unaligned",
            EncoderVariant::Random => "random",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            EncoderVariant::Aligned => "k-MTR",
            EncoderVariant::Unaligned => "MAE_k^u",
            EncoderVariant::Random => "random",
        }
    }

    /// With Stage II disabled the aligned encoder does not exist, so runs fall back to the ablation.
    pub fn resolve(self, cfg: &ExperimentConfig) -> Self {
        if self == EncoderVariant::Aligned && cfg.skip_align {
            EncoderVariant::Unaligned
        } else {
            self
        }
    }
}

impl fmt::Display for EncoderVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for EncoderVariant {
    type Err = KmtrError;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| KmtrError::InvalidConfig(format!("unknown encoder variant {s:?}")))
    }
}

pub fn pretrain_stage(domain: Domain) -> &'static str {
    match domain {
        Domain::Image => PRETRAIN_IMAGE,
        Domain::Kspace => PRETRAIN_KSPACE,
    }
}

pub fn finetune_stage(task: Task, variant: EncoderVariant, r: f64) -> String {
    format!("finetune_{}_{}_r{}", task.name(), variant.name(), r)
}

pub(crate) fn stage_seed(cfg: &ExperimentConfig, stage: &str) -> u64 {
    stage.bytes().fold(cfg.seed, |s, b| derive_seed(s, b as u64))
}

/// Epoch-shuffled minibatches; the last partial batch of an epoch is dropped.
pub struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Result<Self> {
        if n == 0 || batch == 0 {
            return Err(KmtrError::InvalidConfig(format!("cannot sample batches of {batch} from {n} items")));
        }
        let batch = batch.min(n);
        Ok(Self { rng: ChaCha8Rng::seed_from_u64(seed), order: (0..n).collect(), pos: n, batch })
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.order.sort_unstable();
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let b = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        b
    }

    pub fn word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }
}

pub fn optimizer(s: &StageSettings) -> AdamW {
    AdamW::new(AdamWConfig { lr: s.lr, weight_decay: s.weight_decay, clip_norm: s.clip_norm, warmup_steps: s.warmup, ..AdamWConfig::default() })
}

struct StageRun {
    losses: Vec<f64>,
    word_pos: u128,
}

/// Drives `step` for the configured number of steps, writing one CSV row per
/// step. `step` returns the row values after `step` and `lr`; the first is the loss.
fn run_stage(name: &str, s: &StageSettings, n: usize, seed: u64, out: &Path, columns: &[&str], mut step: impl FnMut(usize, &[usize], f64) -> Result<Vec<f64>>) -> Result<StageRun> {
    let path = log_path(out, name);
    ensure_parent(&path)?;
    let mut log = csv::Writer::from_writer(File::create(&path)?);
    let mut header = vec!["step", "lr"];
    header.extend_from_slice(columns);
    log.write_record(&header)?;
    let mut sampler = BatchSampler::new(n, s.batch, seed)?;
    let mut losses = Vec::with_capacity(s.steps);
    for k in 0..s.steps {
        let lr = cosine_lr(s.lr, k, s.steps, s.warmup);
        let batch = sampler.next_batch();
        let row = step(k, &batch, lr)?;
        if !row[0].is_finite() {
            log.flush()?;
            return Err(KmtrError::NonFinite(format!("{name}: loss {} at step {k}", row[0])));
        }
        let mut rec = vec![k.to_string(), format!("{lr}")];
        rec.extend(row.iter().map(|v| format!("{v}")));
        log.write_record(&rec)?;
        if k % 50 == 0 || k + 1 == s.steps {
            info!("{name} step {k}/{} loss {:.6}", s.steps, row[0]);
        }
        losses.push(row[0]);
    }
    log.flush()?;
    Ok(StageRun { losses, word_pos: sampler.word_pos() })
}

fn batch_mean(g: &mut Graph, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    g.scale(acc, 1.0 / terms.len() as f64)
}

fn ids(subjects: &[&Subject]) -> Vec<String> {
    subjects.iter().map(|s| s.id().to_string()).collect()
}

/// Stage I: masked-autoencoder pretraining of one domain's encoder on the training split.
pub fn pretrain(cfg: &ExperimentConfig, data: &Dataset, domain: Domain, out: &Path) -> Result<Checkpoint> {
    cfg.validate()?;
    let enc = cfg.encoder()?;
    let stage = pretrain_stage(domain);
    let seed = stage_seed(cfg, stage);
    let mut store = init_mae(&mut ChaCha8Rng::seed_from_u64(seed), &enc)?;
    let train = data.split(Split::Train);
    let r = cfg.acceleration.upstream;
    let items = train
        .iter()
        .map(|s| match domain {
            Domain::Image => data.image_sequence(s).map(|q| {
                let t = q.patches.clone();
                (q, t)
            }),
            Domain::Kspace => Ok((data.kspace_input(s, &data.mask(cfg, s, r, 0)?)?, data.kspace_target(s)?)),
        })
        .collect::<Result<Vec<(PatchSequence, Mat)>>>()?;
    if domain == Domain::Kspace && cfg.loss_positions == LossPositions::Hidden && items.iter().all(|(q, _)| q.hidden_idx.is_empty()) {
        warn!("{stage}: every token is sampled at R={r}; the hidden set is empty and the loss is identically zero");
    }
    let l = data.grid.num_tokens();
    let mut opt = optimizer(&cfg.pretrain);
    let run = run_stage(stage, &cfg.pretrain, items.len(), seed, out, &["loss", "grad_norm"], |k, batch, lr| {
        let mut g = Graph::new();
        let mut terms = Vec::with_capacity(batch.len());
        for &i in batch {
            let (seq, target) = &items[i];
            let input = match domain {
                Domain::Image => {
                    let (vis, hid) = random_visible_partition(l, cfg.mask_ratio, derive_seed(derive_seed(seed, k as u64), i as u64))?;
                    seq.clone().with_partition(vis, hid)?
                }
                Domain::Kspace => seq.clone(),
            };
            terms.push(mae_objective(&mut g, &store, &enc, &input, target, cfg.loss_positions)?);
        }
        let loss = batch_mean(&mut g, &terms);
        let value = g.scalar(loss);
        let grads = g.param_grads(&g.backward(loss));
        Ok(vec![value, opt.clip_and_step(&mut store, grads, lr)])
    })?;
    let meta = json!({
        "encoder": enc,
        "domain": domain,
        "r": r,
        "train_ids": ids(&train),
        "final_loss": run.losses.last(),
    });
    let ckpt = Checkpoint::new(stage, &cfg.hash()?, cfg.seed, run.word_pos, cfg.pretrain.steps, store, meta);
    ckpt.save(&checkpoint_path(out, stage))?;
    Ok(ckpt)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignSummary {
    pub initial_train: Separation,
    pub final_train: Separation,
    /// Validation statistics of the Stage I encoders with the initial projectors.
    pub val_unaligned: Separation,
    pub val_aligned: Separation,
}

fn align_pairs(cfg: &ExperimentConfig, data: &Dataset, subjects: &[&Subject]) -> Result<Vec<AlignPair>> {
    subjects
        .iter()
        .map(|s| Ok(AlignPair { image: data.image_sequence(s)?, kspace: data.kspace_input(s, &data.mask(cfg, s, cfg.acceleration.upstream, 0)?)? }))
        .collect()
}

/// Cosine separation of all pairs in `pairs` under `store`.
pub fn pair_separation(store: &ParameterStore, enc: &EncoderConfig, cfg: &ExperimentConfig, pairs: &[AlignPair]) -> Result<Separation> {
    let mut g = Graph::new();
    let (_, terms) = alignment_objective(&mut g, store, enc, &cfg.alignment, pairs)?;
    Ok(separation(&terms.cos))
}

/// Stage II: contrastive alignment of the two Stage I encoders.
pub fn align(cfg: &ExperimentConfig, data: &Dataset, out: &Path) -> Result<(Checkpoint, AlignSummary)> {
    cfg.validate()?;
    if cfg.skip_align {
        return Err(KmtrError::InvalidConfig("alignment is disabled in this config (skip_align)".into()));
    }
    let enc = cfg.encoder()?;
    let image = Checkpoint::load(&checkpoint_path(out, PRETRAIN_IMAGE))?;
    let kspace = Checkpoint::load(&checkpoint_path(out, PRETRAIN_KSPACE))?;
    let seed = stage_seed(cfg, ALIGN);
    let mut store = init_alignment(&mut ChaCha8Rng::seed_from_u64(seed), &image.params, &kspace.params, &enc, &cfg.alignment)?;
    let initial = store.clone();
    let train = data.split(Split::Train);
    let val = data.split(Split::Val);
    let pairs = align_pairs(cfg, data, &train)?;
    let val_pairs = align_pairs(cfg, data, &val)?;
    let initial_train = pair_separation(&store, &enc, cfg, &pairs)?;
    let mut opt = optimizer(&cfg.align);
    let frozen = format!("{IMAGE_ENCODER}.");
    let run = run_stage(ALIGN, &cfg.align, pairs.len(), seed, out, &["loss", "pos_cos_mean", "neg_cos_mean", "grad_norm"], |k, batch, lr| {
        let mut b: Vec<AlignPair> = batch.iter().map(|&i| pairs[i].clone()).collect();
        if cfg.align_resample_masks {
            for (p, &i) in b.iter_mut().zip(batch) {
                p.kspace = data.kspace_input(train[i], &data.mask(cfg, train[i], cfg.acceleration.upstream, k as u64 + 1)?)?;
            }
        }
        let mut g = Graph::new();
        let (l, terms) = alignment_objective(&mut g, &store, &enc, &cfg.alignment, &b)?;
        let mut grads = g.param_grads(&g.backward(l));
        if cfg.alignment.freeze_image_encoder {
            grads.retain(|k, _| !k.starts_with(&frozen));
        }
        let sep = separation(&terms.cos);
        let norm = opt.clip_and_step(&mut store, grads, lr);
        Ok(vec![terms.loss, sep.pos_cos_mean, sep.neg_cos_mean, norm])
    })?;
    let summary = AlignSummary {
        initial_train,
        final_train: pair_separation(&store, &enc, cfg, &pairs)?,
        val_unaligned: pair_separation(&initial, &enc, cfg, &val_pairs)?,
        val_aligned: pair_separation(&store, &enc, cfg, &val_pairs)?,
    };
    info!("align: val separation {:.4} (unaligned {:.4})", summary.val_aligned.gap(), summary.val_unaligned.gap());
    let meta = json!({
        "encoder": enc,
        "alignment": cfg.alignment,
        "r": cfg.acceleration.upstream,
        "train_ids": ids(&train),
        "final_loss": run.losses.last(),
        "summary": summary,
    });
    let ckpt = Checkpoint::new(ALIGN, &cfg.hash()?, cfg.seed, run.word_pos, cfg.align.steps, store, meta);
    ckpt.save(&checkpoint_path(out, ALIGN))?;
    let mut report = MetricReport::new(Split::Val.name(), val.len(), cfg.acceleration.upstream, cfg.seed);
    report.tags.insert("stage".into(), ALIGN.into());
    report.tags.insert("scale_note".into(), format!("contrastive batch {} (negatives per anchor {})", cfg.align.batch, cfg.align.batch.min(train.len()) - 1));
    for (name, s) in [("aligned", summary.val_aligned), ("unaligned", summary.val_unaligned)] {
        report.insert("alignment", &format!("{name}_pos_cos_mean"), s.pos_cos_mean);
        report.insert("alignment", &format!("{name}_neg_cos_mean"), s.neg_cos_mean);
        report.insert("alignment", &format!("{name}_separation"), s.gap());
    }
    let dir = super::report_dir(out);
    std::fs::create_dir_all(&dir)?;
    report.save(&dir, "align_val")?;
    Ok((ckpt, summary))
}

/// Everything a task checkpoint needs for inference and audit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneMeta {
    pub task: Task,
    pub variant: EncoderVariant,
    pub r: f64,
    pub encoder: EncoderConfig,
    pub heads: HeadConfig,
    pub target_norm: TargetNorm,
    pub class_weights: Vec<(f64, f64)>,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub linear_probe: bool,
    /// Step whose parameters were kept.
    pub selected_step: usize,
}

/// Encoder weights under the `enc.` prefix for `variant`.
pub fn encoder_params(cfg: &ExperimentConfig, out: &Path, variant: EncoderVariant, enc: &EncoderConfig) -> Result<ParameterStore> {
    let mut store = ParameterStore::new();
    match variant {
        EncoderVariant::Aligned => {
            let ck = Checkpoint::load(&checkpoint_path(out, ALIGN))?;
            let prefix = format!("{KSPACE_ENCODER}.");
            for (k, v) in ck.params.iter().filter(|(k, _)| k.starts_with(&prefix)) {
                store.insert(format!("{ENCODER}.{}", &k[prefix.len()..]), v.clone())?;
            }
        }
        EncoderVariant::Unaligned => {
            store = Checkpoint::load(&checkpoint_path(out, PRETRAIN_KSPACE))?.params;
            store.retain_prefix(&format!("{ENCODER}."));
        }
        EncoderVariant::Random => init_encoder(&mut store, &mut ChaCha8Rng::seed_from_u64(stage_seed(cfg, "random_encoder")), enc, ENCODER)?,
    }
    if store.is_empty() {
        return Err(KmtrError::MissingParameter(format!("no encoder parameters for variant {variant}")));
    }
    Ok(store)
}

fn targets(task: Task, subjects: &[&Subject], data: &Dataset, norm: &TargetNorm, weights: &[(f64, f64)]) -> Result<Targets> {
    let n = subjects.len();
    Ok(match task {
        Task::Regression => Targets::Regression(Mat::from_shape_fn((n, N_PHENOTYPES), |(i, j)| norm.normalize(&subjects[i].phenotypes())[j])),
        Task::Classification => {
            let labels = Mat::from_shape_fn((n, N_DISEASES), |(i, d)| if subjects[i].disease_labels()[d] { 1.0 } else { 0.0 });
            let w = Mat::from_shape_fn((n, N_DISEASES), |(i, d)| if subjects[i].disease_labels()[d] { weights[d].1 } else { weights[d].0 });
            Targets::Classification { labels, weights: w }
        }
        Task::Segmentation => Targets::Segmentation(subjects.iter().map(|s| s.seg.labels.clone()).collect()),
        Task::Reconstruction => Targets::Reconstruction(subjects.iter().map(|s| data.image_patches(s)).collect::<Result<_>>()?),
    })
}

/// Stage III: fine-tunes encoder and task head on undersampled k-space, then scores the val split.
pub fn finetune(cfg: &ExperimentConfig, data: &Dataset, task: Task, variant: EncoderVariant, r: Option<f64>, out: &Path) -> Result<(Checkpoint, MetricReport)> {
    cfg.validate()?;
    let variant = variant.resolve(cfg);
    let r = r.unwrap_or_else(|| cfg.acceleration.for_task(task));
    if !(r >= 1.0) {
        return Err(KmtrError::InvalidConfig(format!("acceleration must be >= 1, got {r}")));
    }
    let enc = cfg.encoder()?;
    cfg.heads.validate(&enc)?;
    let stage = finetune_stage(task, variant, r);
    let seed = stage_seed(cfg, &stage);
    let mut store = encoder_params(cfg, out, variant, &enc)?;
    init_head(&mut store, &mut ChaCha8Rng::seed_from_u64(seed), task, &enc, &cfg.heads)?;
    let train = data.split(Split::Train);
    let val = data.split(Split::Val);
    let norm = TargetNorm::fit(&train.iter().map(|s| s.phenotypes()).collect::<Vec<_>>())?;
    let weights = class_weights(&train.iter().map(|s| s.disease_labels()).collect::<Vec<_>>());
    let fixed: Vec<PatchSequence> = train.iter().map(|s| data.kspace_input(s, &data.mask(cfg, s, r, 0)?)).collect::<Result<_>>()?;
    let settings = cfg.finetune.for_task(task).clone();
    let val_inputs: Vec<PatchSequence> = val.iter().map(|s| data.kspace_input(s, &data.mask(cfg, s, r, 0)?)).collect::<Result<_>>()?;
    let val_targets = targets(task, &val, data, &norm, &weights)?;
    let val_loss = |store: &ParameterStore| -> Result<f64> {
        let mut g = Graph::new();
        let outs = forward(&mut g, store, task, &enc, &cfg.heads, &val_inputs.iter().collect::<Vec<_>>())?;
        let l = task_loss(&mut g, &outs, &val_targets)?;
        Ok(g.scalar(l))
    };
    let mut best: Option<(f64, usize, ParameterStore)> = None;
    let mut opt = optimizer(&settings);
    let enc_prefix = format!("{ENCODER}.");
    let every = cfg.finetune.eval_every;
    let run = run_stage(&stage, &settings, train.len(), seed, out, &["loss", "grad_norm", "val_loss"], |k, batch, lr| {
        let resampled: Vec<PatchSequence>;
        let inputs: Vec<&PatchSequence> = if cfg.finetune.resample_masks {
            resampled = batch.iter().map(|&i| data.kspace_input(train[i], &data.mask(cfg, train[i], r, k as u64 + 1)?)).collect::<Result<_>>()?;
            resampled.iter().collect()
        } else {
            batch.iter().map(|&i| &fixed[i]).collect()
        };
        let subjects: Vec<&Subject> = batch.iter().map(|&i| train[i]).collect();
        let t = targets(task, &subjects, data, &norm, &weights)?;
        let mut g = Graph::new();
        let outs = forward(&mut g, &store, task, &enc, &cfg.heads, &inputs)?;
        let loss = task_loss(&mut g, &outs, &t)?;
        let value = g.scalar(loss);
        let mut grads = g.param_grads(&g.backward(loss));
        if cfg.finetune.linear_probe {
            grads.retain(|name, _| !name.starts_with(&enc_prefix));
        }
        let norm = opt.clip_and_step(&mut store, grads, lr);
        let mut vl = f64::NAN;
        if every > 0 && ((k + 1) % every == 0 || k + 1 == settings.steps) {
            vl = val_loss(&store)?;
            if best.as_ref().map_or(true, |b| vl < b.0) {
                best = Some((vl, k + 1, store.clone()));
            }
        }
        Ok(vec![value, norm, vl])
    })?;
    let selected_step = match best {
        Some((vl, step, params)) => {
            info!("{stage}: keeping parameters from step {step} (val loss {vl:.6})");
            store = params;
            step
        }
        None => settings.steps,
    };
    let meta = FinetuneMeta {
        task,
        variant,
        r,
        encoder: enc,
        heads: cfg.heads.clone(),
        target_norm: norm,
        class_weights: weights,
        train_ids: ids(&train),
        val_ids: ids(&val),
        linear_probe: cfg.finetune.linear_probe,
        selected_step,
    };
    let ckpt = Checkpoint::new(&stage, &cfg.hash()?, cfg.seed, run.word_pos, settings.steps, store, json!({ "finetune": meta, "final_loss": run.losses.last() }));
    ckpt.save(&checkpoint_path(out, &stage))?;
    let report = super::evaluate::score(cfg, data, &ckpt, Split::Val, out)?;
    Ok((ckpt, report))
}
