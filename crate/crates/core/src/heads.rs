//! Task heads on top of the k-space encoder.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{decoder_forward, encoder_forward, init_decoder, pos_embed, pos_init, EncoderConfig, EncoderVars, LatentEmbedding};
use crate::error::{KmtrError, Result};
use crate::nn::layers::{self, Init};
use crate::nn::loss::{self, sigmoid, softmax};
use crate::nn::{FrameGeom, Graph, Mat, ParameterStore, Var};
use crate::phantom::{PhenotypeVector, SegmentationMap};
use crate::tokenizer::{real_patches_to_volume, Domain, PatchGridSpec, PatchSequence, TokenIndex};

pub const N_PHENOTYPES: usize = 4;
pub const N_DISEASES: usize = 2;
pub const N_CLASSES: usize = 4;
pub const ENCODER: &str = "enc";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Regression,
    Classification,
    Segmentation,
    Reconstruction,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Regression, Task::Classification, Task::Segmentation, Task::Reconstruction];

    pub fn name(self) -> &'static str {
        match self {
            Task::Regression => "regression",
            Task::Classification => "classification",
            Task::Segmentation => "segmentation",
            Task::Reconstruction => "reconstruction",
        }
    }

    pub fn prefix(self) -> &'static str {
        match self {
            Task::Regression => "head.reg",
            Task::Classification => "head.cls",
            Task::Segmentation => "head.seg",
            Task::Reconstruction => "head.rec",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = KmtrError;
    fn from_str(s: &str) -> Result<Self> {
        Task::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| KmtrError::TaskMismatch(format!("unknown task {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub reg_hidden: usize,
    pub cls_hidden: usize,
    /// Channels at token resolution; halved per upsampling stage, floor 8.
    pub seg_channels: usize,
    /// Learned L×L token-mixing layer in the segmentation mixing block.
    pub token_mixing: bool,
    pub rec_dec_depth: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { reg_hidden: 64, cls_hidden: 64, seg_channels: 32, token_mixing: true, rec_dec_depth: 1 }
    }
}

impl HeadConfig {
    pub fn validate(&self, enc: &EncoderConfig) -> Result<()> {
        let [_, hp, wp] = enc.grid.patch;
        if hp != wp || hp < 2 || !hp.is_power_of_two() {
            return Err(KmtrError::InvalidConfig(format!("segmentation head needs square power-of-two spatial patches, got {hp}x{wp}")));
        }
        if self.reg_hidden == 0 || self.cls_hidden == 0 || self.seg_channels == 0 || self.rec_dec_depth == 0 {
            return Err(KmtrError::InvalidConfig("head widths and depths must be positive".into()));
        }
        Ok(())
    }

    fn seg_stage_channels(&self, enc: &EncoderConfig) -> Vec<usize> {
        let stages = enc.grid.patch[1].trailing_zeros() as usize;
        (0..=stages).map(|k| (self.seg_channels >> k).max(8)).collect()
    }

    fn rec_config(&self, enc: &EncoderConfig) -> EncoderConfig {
        EncoderConfig { dec_depth: self.rec_dec_depth, out_dim: Some(enc.grid.patch_voxels()), ..enc.clone() }
    }
}

/// Per-phenotype z-scoring statistics from the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl TargetNorm {
    pub fn fit(rows: &[[f64; N_PHENOTYPES]]) -> Result<Self> {
        if rows.is_empty() {
            return Err(KmtrError::InvalidConfig("cannot fit target statistics on an empty split".into()));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; N_PHENOTYPES];
        let mut std = vec![0.0; N_PHENOTYPES];
        for r in rows {
            for j in 0..N_PHENOTYPES {
                mean[j] += r[j] / n;
            }
        }
        for r in rows {
            for j in 0..N_PHENOTYPES {
                std[j] += (r[j] - mean[j]).powi(2) / n;
            }
        }
        for s in &mut std {
            *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
        }
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, y: &[f64]) -> Vec<f64> {
        y.iter().enumerate().map(|(j, v)| (v - self.mean[j]) / self.std[j]).collect()
    }

    pub fn denormalize(&self, z: &[f64]) -> Vec<f64> {
        z.iter().enumerate().map(|(j, v)| v * self.std[j] + self.mean[j]).collect()
    }
}

/// Inverse-frequency weights `(negative, positive)` per disease.
pub fn class_weights(labels: &[[bool; N_DISEASES]]) -> Vec<(f64, f64)> {
    let n = labels.len() as f64;
    (0..N_DISEASES)
        .map(|d| {
            let pos = labels.iter().filter(|l| l[d]).count() as f64;
            let neg = n - pos;
            if pos == 0.0 || neg == 0.0 {
                (1.0, 1.0)
            } else {
                (n / (2.0 * neg), n / (2.0 * pos))
            }
        })
        .collect()
}

pub fn init_head(store: &mut ParameterStore, rng: &mut impl Rng, task: Task, enc: &EncoderConfig, cfg: &HeadConfig) -> Result<()> {
    cfg.validate(enc)?;
    let p = task.prefix();
    match task {
        Task::Regression => layers::mlp_init(store, rng, p, enc.dim, cfg.reg_hidden, N_PHENOTYPES, Init::Xavier),
        Task::Classification => layers::mlp_init(store, rng, p, enc.dim, cfg.cls_hidden, N_DISEASES, Init::Xavier),
        Task::Segmentation => {
            let l = enc.grid.num_tokens();
            let tp = enc.grid.patch[0];
            let ch = cfg.seg_stage_channels(enc);
            layers::embedding_init(store, rng, &format!("{p}.mask_token"), 1, enc.dim)?;
            layers::embedding_init(store, rng, &format!("{p}.skip_mask_token"), 1, enc.dim)?;
            pos_init(store, rng, &format!("{p}.pos"), &enc.grid, enc.dim)?;
            layers::block_init(store, rng, &format!("{p}.mix"), enc.dim, enc.mlp_ratio)?;
            if cfg.token_mixing {
                store.insert(format!("{p}.token_mix"), Array2::zeros((l, l)))?;
            }
            layers::layer_norm_init(store, &format!("{p}.norm"), enc.dim)?;
            layers::linear_init(store, rng, &format!("{p}.expand"), enc.dim, tp * ch[0], Init::Xavier)?;
            layers::linear_init(store, rng, &format!("{p}.skip"), enc.dim, tp * 4 * ch[1], Init::Xavier)?;
            for k in 0..ch.len() - 1 {
                layers::conv_init(store, rng, &format!("{p}.up.{k}"), ch[k], 4 * ch[k + 1])?;
            }
            let last = *ch.last().expect("at least one stage");
            layers::conv_init(store, rng, &format!("{p}.refine"), last, last)?;
            layers::conv_init(store, rng, &format!("{p}.out"), last, N_CLASSES)
        }
        Task::Reconstruction => {
            init_decoder(store, rng, &cfg.rec_config(enc), p)?;
            if cfg.token_mixing {
                let l = enc.grid.num_tokens();
                store.insert(format!("{p}.token_mix"), Array2::zeros((l, l)))?;
            }
            Ok(())
        }
    }
}

/// Rejects anything but undersampled k-space input.
pub fn check_kspace(seq: &PatchSequence) -> Result<()> {
    if seq.domain != Domain::Kspace {
        return Err(KmtrError::DomainViolation(format!("heads accept k-space input only, got {:?}", seq.domain)));
    }
    Ok(())
}

fn check_latent(latent: &LatentEmbedding) -> Result<()> {
    if latent.domain != Domain::Kspace {
        return Err(KmtrError::DomainViolation(format!("heads accept k-space latents only, got {:?}", latent.domain)));
    }
    Ok(())
}

/// Source map from (L × tp·c) token features, columns ordered (dt, c), to
/// per-frame maps of (S·T·gh·gw × c).
fn token_to_frames_map(grid: &PatchGridSpec, c: usize) -> (Vec<usize>, FrameGeom) {
    let [s, t, _, _] = grid.volume;
    let [tp, _, _] = grid.patch;
    let [_, gh, gw] = grid.grid();
    let geom = FrameGeom { frames: s * t, h: gh, w: gw };
    let mut src = Vec::with_capacity(geom.pixels() * c);
    for f in 0..s * t {
        let (sl, tt) = (f / t, f % t);
        for h in 0..gh {
            for w in 0..gw {
                let i = grid.flat_index(TokenIndex { slice: sl, t: tt / tp, h, w });
                for ch in 0..c {
                    src.push(i * tp * c + (tt % tp) * c + ch);
                }
            }
        }
    }
    (src, geom)
}

fn conv(g: &mut Graph, store: &ParameterStore, name: &str, x: Var, geom: FrameGeom) -> Var {
    let w = g.param(store, &format!("{name}.weight"));
    let b = g.param(store, &format!("{name}.bias"));
    let y = g.conv3x3(x, w, geom);
    g.add_row(y, b)
}

/// Per-pixel class logits ((S·T·H·W) × 4) from encoder outputs.
fn segmentation_forward(g: &mut Graph, store: &ParameterStore, enc: &EncoderConfig, cfg: &HeadConfig, vars: &EncoderVars, seq: &PatchSequence) -> Var {
    let p = Task::Segmentation.prefix();
    let grid = &enc.grid;
    let ch = cfg.seg_stage_channels(enc);
    let rest: Vec<usize> = (1..=seq.visible_idx.len()).collect();
    let fill = |g: &mut Graph, src: Var, token: &str| {
        let vis = g.gather_rows(src, &rest);
        let tok = g.param(store, &format!("{p}.{token}"));
        let full = g.interleave(vis, tok, &seq.visible_idx, &seq.hidden_idx);
        let pos = pos_embed(g, store, &format!("{p}.pos"), &grid.indices());
        g.add(full, pos)
    };
    let x = fill(g, vars.tokens, "mask_token");
    let mut x = layers::block(g, store, &format!("{p}.mix"), x, enc.heads);
    if cfg.token_mixing {
        let m = g.param(store, &format!("{p}.token_mix"));
        let mixed = g.matmul(m, x);
        x = g.add(x, mixed);
    }
    let x = layers::layer_norm(g, store, &format!("{p}.norm"), x);
    let x = layers::linear(g, store, &format!("{p}.expand"), x);
    let (src, mut geom) = token_to_frames_map(grid, ch[0]);
    let mut h = g.rearrange(x, src, (geom.pixels(), ch[0]));

    let s = fill(g, vars.skip, "skip_mask_token");
    let s = layers::linear(g, store, &format!("{p}.skip"), s);
    let (src, base) = token_to_frames_map(grid, 4 * ch[1]);
    let s = g.rearrange(s, src, (base.pixels(), 4 * ch[1]));
    let (skip, _) = layers::pixel_shuffle(g, s, base);

    for k in 0..ch.len() - 1 {
        let y = layers::conv_gelu(g, store, &format!("{p}.up.{k}"), h, geom);
        let (y, next) = layers::pixel_shuffle(g, y, geom);
        h = if k == 0 { g.add(y, skip) } else { y };
        geom = next;
    }
    let h = layers::conv_gelu(g, store, &format!("{p}.refine"), h, geom);
    conv(g, store, &format!("{p}.out"), h, geom)
}

/// Head outputs for a batch of k-space sequences.
pub enum HeadOutputs {
    /// N × 4 normalized phenotypes.
    Regression(Var),
    /// N × 2 logits.
    Classification(Var),
    /// Per subject, (S·T·H·W) × 4 logits.
    Segmentation(Vec<Var>),
    /// Per subject, L × patch_voxels image patches.
    Reconstruction(Vec<Var>),
}

/// Runs the shared encoder (under `ENCODER`) and the task head on `batch`.
pub fn forward(g: &mut Graph, store: &ParameterStore, task: Task, enc: &EncoderConfig, cfg: &HeadConfig, batch: &[&PatchSequence]) -> Result<HeadOutputs> {
    let mut vars = Vec::with_capacity(batch.len());
    for seq in batch {
        check_kspace(seq)?;
        vars.push(encoder_forward(g, store, enc, ENCODER, seq, &seq.visible_idx)?);
    }
    let p = task.prefix();
    Ok(match task {
        Task::Regression | Task::Classification => {
            let cls: Vec<Var> = vars.iter().map(|v| g.gather_rows(v.tokens, &[0])).collect();
            let x = g.concat_rows(&cls);
            let y = layers::mlp(g, store, p, x);
            if task == Task::Regression {
                HeadOutputs::Regression(y)
            } else {
                HeadOutputs::Classification(y)
            }
        }
        Task::Segmentation => HeadOutputs::Segmentation(vars.iter().zip(batch).map(|(v, seq)| segmentation_forward(g, store, enc, cfg, v, seq)).collect()),
        Task::Reconstruction => {
            let rc = cfg.rec_config(enc);
            let mut out = Vec::with_capacity(batch.len());
            for (v, seq) in vars.iter().zip(batch) {
                out.push(decoder_forward(g, store, &rc, p, v.tokens, &seq.visible_idx, &seq.hidden_idx)?.output);
            }
            HeadOutputs::Reconstruction(out)
        }
    })
}

/// Training targets matching `HeadOutputs`.
pub enum Targets {
    /// N × 4 z-scored phenotypes.
    Regression(Mat),
    /// N × 2 binary labels with per-element weights.
    Classification { labels: Mat, weights: Mat },
    Segmentation(Vec<Vec<u8>>),
    /// Per subject, L × patch_voxels magnitude-image patches.
    Reconstruction(Vec<Mat>),
}

pub const SMOOTH_L1_BETA: f64 = 1.0;

/// Batch-mean task loss.
pub fn task_loss(g: &mut Graph, out: &HeadOutputs, targets: &Targets) -> Result<Var> {
    let per_subject = |g: &mut Graph, vs: &[Var], f: &dyn Fn(&mut Graph, Var, usize) -> Var| {
        let parts: Vec<Var> = vs.iter().enumerate().map(|(i, &v)| f(g, v, i)).collect();
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = g.add(acc, p);
        }
        g.scale(acc, 1.0 / parts.len() as f64)
    };
    match (out, targets) {
        (HeadOutputs::Regression(y), Targets::Regression(t)) => Ok(loss::smooth_l1(g, *y, t, SMOOTH_L1_BETA)),
        (HeadOutputs::Classification(z), Targets::Classification { labels, weights }) => Ok(loss::bce_with_logits(g, *z, labels, weights)),
        (HeadOutputs::Segmentation(vs), Targets::Segmentation(t)) if vs.len() == t.len() && !vs.is_empty() => Ok(per_subject(g, vs, &|g, v, i| loss::segmentation_loss(g, v, &t[i]))),
        (HeadOutputs::Reconstruction(vs), Targets::Reconstruction(t)) if vs.len() == t.len() && !vs.is_empty() => Ok(per_subject(g, vs, &|g, v, i| loss::mse(g, v, &t[i]))),
        _ => Err(KmtrError::TaskMismatch("head outputs and targets disagree".into())),
    }
}

/// De-normalized phenotypes from a k-space latent.
pub fn regress(latent: &LatentEmbedding, store: &ParameterStore, norm: &TargetNorm) -> Result<PhenotypeVector> {
    check_latent(latent)?;
    let z = run_mlp(latent, store, Task::Regression)?;
    Ok(PhenotypeVector::from_slice(&norm.denormalize(&z)))
}

/// Per-disease probabilities from a k-space latent.
pub fn classify(latent: &LatentEmbedding, store: &ParameterStore) -> Result<Vec<f64>> {
    check_latent(latent)?;
    Ok(run_mlp(latent, store, Task::Classification)?.into_iter().map(sigmoid).collect())
}

fn run_mlp(latent: &LatentEmbedding, store: &ParameterStore, task: Task) -> Result<Vec<f64>> {
    let name = format!("{}.fc1.weight", task.prefix());
    let w = store.get(&name).ok_or(KmtrError::MissingParameter(name))?;
    if w.nrows() != latent.class_token.ncols() {
        return Err(KmtrError::shape(task.name(), &[1, w.nrows()], latent.class_token.shape()));
    }
    let mut g = Graph::new();
    let x = g.input(latent.class_token.clone());
    let y = layers::mlp(&mut g, store, task.prefix(), x);
    Ok(g.value(y).row(0).to_vec())
}

/// Per-pixel logits and argmax labels for one subject.
pub struct Segmentation {
    pub logits: Mat,
    pub map: SegmentationMap,
}

impl Segmentation {
    pub fn probabilities(&self) -> Mat {
        softmax(&self.logits)
    }
}

pub fn segment(seq: &PatchSequence, store: &ParameterStore, enc: &EncoderConfig, cfg: &HeadConfig) -> Result<Segmentation> {
    let mut g = Graph::new();
    let HeadOutputs::Segmentation(v) = forward(&mut g, store, Task::Segmentation, enc, cfg, &[seq])? else { unreachable!() };
    let logits = g.value(v[0]).clone();
    let labels = logits
        .rows()
        .into_iter()
        .map(|r| r.iter().enumerate().fold((0usize, f64::NEG_INFINITY), |b, (c, &v)| if v > b.1 { (c, v) } else { b }).0 as u8)
        .collect();
    Ok(Segmentation { logits, map: SegmentationMap { shape: enc.grid.volume, labels } })
}

/// Real-valued image volume (S·T·H·W, row-major), clipped to [0, 1].
pub fn reconstruct(seq: &PatchSequence, store: &ParameterStore, enc: &EncoderConfig, cfg: &HeadConfig) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let HeadOutputs::Reconstruction(v) = forward(&mut g, store, Task::Reconstruction, enc, cfg, &[seq])? else { unreachable!() };
    let vol = real_patches_to_volume(g.value(v[0]), &enc.grid)?;
    if vol.iter().any(|v| !v.is_finite()) {
        return Err(KmtrError::NonFinite("reconstruction output".into()));
    }
    Ok(vol.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{encode, init_encoder};
    use crate::kspace::ComplexVolume;
    use crate::nn::{grad_check, AdamW, AdamWConfig};
    use crate::tokenizer::{random_visible_partition, real_patches, tokenize};
    use num_complex::Complex64;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn enc_cfg() -> EncoderConfig {
        EncoderConfig { dim: 8, depth: 2, dec_depth: 1, heads: 2, mlp_ratio: 2, grid: PatchGridSpec::new([2, 4, 4], [1, 2, 8, 8]).unwrap(), out_dim: None }
    }

    fn head_cfg() -> HeadConfig {
        HeadConfig { reg_hidden: 6, cls_hidden: 6, seg_channels: 8, token_mixing: true, rec_dec_depth: 1 }
    }

    fn kseq(seed: u64, enc: &EncoderConfig) -> PatchSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = enc.grid.volume.iter().product();
        let v = ComplexVolume::from_vec(enc.grid.volume, (0..n).map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect()).unwrap();
        let (vis, hid) = random_visible_partition(enc.grid.num_tokens(), 0.5, seed).unwrap();
        tokenize(&v, &enc.grid, Domain::Kspace, false).unwrap().with_partition(vis, hid).unwrap()
    }

    fn model(task: Task, seed: u64) -> ParameterStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParameterStore::new();
        init_encoder(&mut s, &mut rng, &enc_cfg(), ENCODER).unwrap();
        init_head(&mut s, &mut rng, task, &enc_cfg(), &head_cfg()).unwrap();
        s
    }

    fn jitter(store: &mut ParameterStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, m) in store.iter_mut() {
            m.mapv_inplace(|v| v + rng.gen_range(-0.2..0.2));
        }
    }

    #[test]
    fn task_names_roundtrip() {
        for t in Task::ALL {
            assert_eq!(t.name().parse::<Task>().unwrap(), t);
        }
        assert!("bogus".parse::<Task>().is_err());
    }

    #[test]
    fn normalization_is_invertible() {
        let rows = [[1000.0, 400.0, 60.0, 300.0], [1200.0, 700.0, 41.0, 330.0], [900.0, 350.0, 61.1, 280.0]];
        let n = TargetNorm::fit(&rows).unwrap();
        for r in &rows {
            let back = n.denormalize(&n.normalize(r));
            for j in 0..4 {
                assert!((back[j] - r[j]).abs() < 1e-9);
            }
        }
        let flat = TargetNorm::fit(&[[1.0; 4], [1.0; 4]]).unwrap();
        assert_eq!(flat.std, vec![1.0; 4]);
    }

    #[test]
    fn inverse_frequency_weights() {
        let labels = [[true, false], [false, false], [false, false], [false, true]];
        let w = class_weights(&labels);
        assert_eq!(w[0], (4.0 / 6.0, 2.0));
        assert_eq!(class_weights(&[[false, false]; 3]), vec![(1.0, 1.0); 2]);
    }

    #[test]
    fn zero_weight_heads_give_constant_predictions() {
        let enc = enc_cfg();
        let mut s = model(Task::Regression, 1);
        init_head(&mut s, &mut ChaCha8Rng::seed_from_u64(2), Task::Classification, &enc, &head_cfg()).unwrap();
        for (k, m) in s.iter_mut() {
            if k.starts_with("head.") {
                m.fill(0.0);
            }
        }
        let lat = encode(&kseq(3, &enc), &s, &enc).unwrap();
        let norm = TargetNorm { mean: vec![1.0, 2.0, 3.0, 4.0], std: vec![5.0; 4] };
        assert_eq!(regress(&lat, &s, &norm).unwrap().to_array(), [1.0, 2.0, 3.0, 4.0]);
        assert_eq!(classify(&lat, &s).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn image_inputs_are_rejected() {
        let enc = enc_cfg();
        let s = model(Task::Segmentation, 4);
        let mut seq = kseq(5, &enc);
        seq.domain = Domain::Image;
        assert!(matches!(segment(&seq, &s, &enc, &head_cfg()), Err(KmtrError::DomainViolation(_))));
        let lat = LatentEmbedding { class_token: Array2::zeros((1, 8)), tokens: Array2::zeros((0, 8)), visible_idx: vec![], domain: Domain::Image, fully_sampled: true };
        assert!(matches!(classify(&lat, &s), Err(KmtrError::DomainViolation(_))));
    }

    #[test]
    fn output_shapes() {
        let enc = enc_cfg();
        let seq = kseq(6, &enc);
        let s = model(Task::Segmentation, 7);
        let seg = segment(&seq, &s, &enc, &head_cfg()).unwrap();
        assert_eq!(seg.logits.dim(), (2 * 8 * 8, 4));
        assert_eq!(seg.map.shape, [1, 2, 8, 8]);
        let p = seg.probabilities();
        assert!(p.rows().into_iter().all(|r| (r.sum() - 1.0).abs() < 1e-6));
        let s = model(Task::Reconstruction, 8);
        let rec = reconstruct(&seq, &s, &enc, &head_cfg()).unwrap();
        assert_eq!(rec.len(), 128);
        assert!(rec.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn frame_map_places_token_features() {
        let enc = enc_cfg();
        let (src, geom) = token_to_frames_map(&enc.grid, 3);
        assert_eq!(geom, FrameGeom { frames: 2, h: 2, w: 2 });
        // frame 1, pixel (1, 0) belongs to token (t=0, h=1, w=0), sub-frame 1
        let row = (2 + 1) * 2;
        let i = enc.grid.flat_index(TokenIndex { slice: 0, t: 0, h: 1, w: 0 });
        assert_eq!(src[row * 3 + 2], i * 6 + 3 + 2);
    }

    #[test]
    fn head_gradients() {
        let enc = enc_cfg();
        let cfg = head_cfg();
        let a = kseq(9, &enc);
        let b = kseq(10, &enc);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for task in Task::ALL {
            let mut s = model(task, 12);
            jitter(&mut s, 13);
            let targets = match task {
                Task::Regression => Targets::Regression(Array2::from_shape_fn((2, 4), |_| rng.gen_range(-2.0..2.0))),
                Task::Classification => Targets::Classification { labels: Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap(), weights: Array2::from_elem((2, 2), 1.5) },
                Task::Segmentation => Targets::Segmentation((0..2).map(|_| (0..128).map(|_| rng.gen_range(0..4u8)).collect()).collect()),
                Task::Reconstruction => Targets::Reconstruction((0..2).map(|_| Array2::from_shape_fn((4, 32), |_| rng.gen_range(0.0..1.0))).collect()),
            };
            let r = grad_check(&s, 1e-5, |g, st| {
                let out = forward(g, st, task, &enc, &cfg, &[&a, &b])?;
                task_loss(g, &out, &targets)
            })
            .unwrap();
            assert!(r.max_rel_error < 1e-4, "{task}: {r:?}");
        }
    }

    #[test]
    fn classification_overfits_fixed_batch() {
        let enc = enc_cfg();
        let cfg = head_cfg();
        let seqs: Vec<PatchSequence> = (0..4).map(|i| kseq(20 + i, &enc)).collect();
        let refs: Vec<&PatchSequence> = seqs.iter().collect();
        let labels = Array2::from_shape_vec((4, 2), vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let targets = Targets::Classification { weights: Array2::ones((4, 2)), labels };
        let mut s = model(Task::Classification, 14);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
        let mut losses = vec![];
        for _ in 0..100 {
            let mut g = Graph::new();
            let out = forward(&mut g, &s, Task::Classification, &enc, &cfg, &refs).unwrap();
            let l = task_loss(&mut g, &out, &targets).unwrap();
            losses.push(g.scalar(l));
            let grads = g.param_grads(&g.backward(l));
            opt.step(&mut s, &grads, 3e-3);
        }
        assert!(losses[99] < 0.5 * losses[0], "{} -> {}", losses[0], losses[99]);
    }

    #[test]
    fn segmentation_overfits_one_subject() {
        let enc = enc_cfg();
        let cfg = head_cfg();
        let seq = kseq(30, &enc);
        // blocky labels so a 4x4-patch decoder can represent them
        let labels: Vec<u8> = (0..128).map(|i| { let (y, x) = ((i % 64) / 8, i % 8); ((y / 2 + x / 4 + i / 64) % 4) as u8 }).collect();
        let truth = SegmentationMap { shape: [1, 2, 8, 8], labels: labels.clone() };
        let targets = Targets::Segmentation(vec![labels]);
        let mut s = model(Task::Segmentation, 15);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, clip_norm: 0.0, ..Default::default() });
        for _ in 0..300 {
            let mut g = Graph::new();
            let out = forward(&mut g, &s, Task::Segmentation, &enc, &cfg, &[&seq]).unwrap();
            let l = task_loss(&mut g, &out, &targets).unwrap();
            let grads = g.param_grads(&g.backward(l));
            opt.step(&mut s, &grads, 1e-2);
        }
        let pred = segment(&seq, &s, &enc, &cfg).unwrap().map;
        for c in 1..4u8 {
            let inter = pred.labels.iter().zip(&truth.labels).filter(|(a, b)| **a == c && **b == c).count() as f64;
            let tot = pred.labels.iter().filter(|&&a| a == c).count() as f64 + truth.labels.iter().filter(|&&b| b == c).count() as f64;
            assert!(2.0 * inter / tot >= 0.95, "class {c}: {}", 2.0 * inter / tot);
        }
    }

    #[test]
    fn reconstruction_targets_are_real_patches() {
        let enc = enc_cfg();
        let vol: Vec<f64> = (0..128).map(|i| i as f64 / 128.0).collect();
        let t = real_patches(&vol, &enc.grid).unwrap();
        assert_eq!(t.dim(), (enc.grid.num_tokens(), enc.grid.patch_voxels()));
    }
}
