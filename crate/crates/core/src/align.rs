//! Cross-modal alignment of k-space and image class tokens.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{encoder_forward, EncoderConfig, LatentEmbedding};
use crate::error::{KmtrError, Result};
use crate::nn::layers::{self, Init};
use crate::nn::{AdamW, Graph, Mat, ParameterStore, Var};
use crate::tokenizer::PatchSequence;

pub const IMAGE_ENCODER: &str = "image.enc";
pub const KSPACE_ENCODER: &str = "kspace.enc";
pub const IMAGE_PROJECTOR: &str = "proj_i";
pub const KSPACE_PROJECTOR: &str = "proj_k";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    pub tau: f64,
    pub lambda: f64,
    pub include_positive_in_denominator: bool,
    pub proj_dim: usize,
    pub activation: Activation,
    pub freeze_image_encoder: bool,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self { tau: 0.1, lambda: 0.5, include_positive_in_denominator: false, proj_dim: 32, activation: Activation::Gelu, freeze_image_encoder: false }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(KmtrError::InvalidConfig(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(KmtrError::InvalidConfig(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if self.proj_dim == 0 {
            return Err(KmtrError::InvalidConfig("proj_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn loss_params(&self) -> ContrastiveParams {
        ContrastiveParams { tau: self.tau, lambda: self.lambda, include_positive_in_denominator: self.include_positive_in_denominator }
    }
}

/// Two-layer MLP (dim -> dim -> proj_dim) stored under `name`.
pub fn projector_init(store: &mut ParameterStore, rng: &mut impl Rng, name: &str, dim: usize, proj_dim: usize) -> Result<()> {
    layers::linear_init(store, rng, &format!("{name}.fc1"), dim, dim, Init::Xavier)?;
    layers::linear_init(store, rng, &format!("{name}.fc2"), dim, proj_dim, Init::Xavier)
}

pub fn projector(g: &mut Graph, store: &ParameterStore, name: &str, x: Var, act: Activation) -> Var {
    let h = layers::linear(g, store, &format!("{name}.fc1"), x);
    let h = match act {
        Activation::Gelu => g.gelu(h),
        Activation::Identity => h,
    };
    layers::linear(g, store, &format!("{name}.fc2"), h)
}

/// Projects the class token of `latent`; the result is not normalized.
pub fn project(latent: &LatentEmbedding, store: &ParameterStore, name: &str, act: Activation) -> Result<Vec<f64>> {
    let w = store.get(&format!("{name}.fc1.weight")).ok_or_else(|| KmtrError::MissingParameter(format!("{name}.fc1.weight")))?;
    if w.nrows() != latent.class_token.ncols() {
        return Err(KmtrError::shape("project", &[1, w.nrows()], latent.class_token.shape()));
    }
    let mut g = Graph::new();
    let x = g.input(latent.class_token.clone());
    let z = projector(&mut g, store, name, x, act);
    Ok(g.value(z).row(0).to_vec())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContrastiveParams {
    pub tau: f64,
    pub lambda: f64,
    pub include_positive_in_denominator: bool,
}

impl Default for ContrastiveParams {
    fn default() -> Self {
        Self { tau: 0.1, lambda: 0.5, include_positive_in_denominator: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveTerms {
    pub l_ik: f64,
    pub l_ki: f64,
    pub loss: f64,
    /// Cosine similarities, row m = image anchor m, column n = k-space candidate n.
    pub cos: Mat,
    pub grad_zi: Mat,
    pub grad_zk: Mat,
}

fn normalize_rows(z: &Mat) -> Result<(Mat, Vec<f64>)> {
    let mut u = z.clone();
    let mut norms = Vec::with_capacity(z.nrows());
    for (m, mut row) in u.axis_iter_mut(Axis(0)).enumerate() {
        let n = row.dot(&row).sqrt();
        if !(n > 0.0) {
            return Err(KmtrError::ZeroNorm(m));
        }
        row /= n;
        norms.push(n);
    }
    Ok((u, norms))
}

/// One directional term: anchors are rows of `s`, candidates its columns.
/// Returns the summed loss and dℓ/ds.
fn directional(s: &Mat, include_positive: bool) -> (f64, Mat) {
    let n = s.nrows();
    let mut total = 0.0;
    let mut grad = Array2::zeros((n, n));
    for m in 0..n {
        let keep = |k: usize| include_positive || k != m;
        let max = (0..n).filter(|&k| keep(k)).map(|k| s[[m, k]]).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..n).filter(|&k| keep(k)).map(|k| (s[[m, k]] - max).exp()).sum();
        total += max + denom.ln() - s[[m, m]];
        for k in (0..n).filter(|&k| keep(k)) {
            grad[[m, k]] += (s[[m, k]] - max).exp() / denom;
        }
        grad[[m, m]] -= 1.0;
    }
    (total, grad)
}

/// Symmetric contrastive loss between paired image (`zi`) and k-space (`zk`)
/// embeddings, with gradients w.r.t. both inputs.
pub fn contrastive_terms(zi: &Mat, zk: &Mat, p: ContrastiveParams) -> Result<ContrastiveTerms> {
    if zi.dim() != zk.dim() {
        return Err(KmtrError::shape("contrastive_loss", zi.shape(), zk.shape()));
    }
    let n = zi.nrows();
    if n < 2 {
        return Err(KmtrError::BatchTooSmall(n));
    }
    if !(p.tau > 0.0) || !(0.0..=1.0).contains(&p.lambda) {
        return Err(KmtrError::InvalidConfig(format!("tau {} / lambda {} out of range", p.tau, p.lambda)));
    }
    let (ui, ni) = normalize_rows(zi)?;
    let (uk, nk) = normalize_rows(zk)?;
    let cos = ui.dot(&uk.t());
    let s = &cos / p.tau;
    let (l_ik, g_ik) = directional(&s, p.include_positive_in_denominator);
    let st = s.t().to_owned();
    let (l_ki, g_ki) = directional(&st, p.include_positive_in_denominator);
    let loss = p.lambda * l_ik + (1.0 - p.lambda) * l_ki;
    // dL/dcos
    let gc = (g_ik * p.lambda + g_ki.t().to_owned() * (1.0 - p.lambda)) / p.tau;
    let gui = gc.dot(&uk);
    let guk = gc.t().dot(&ui);
    let back = |u: &Mat, gu: &Mat, norms: &[f64]| {
        let mut out = gu.clone();
        for (m, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            let proj = u.row(m).dot(&gu.row(m));
            row.zip_mut_with(&u.row(m), |g, &uv| *g = (*g - uv * proj) / norms[m]);
        }
        out
    };
    let grad_zi = back(&ui, &gui, &ni);
    let grad_zk = back(&uk, &guk, &nk);
    Ok(ContrastiveTerms { l_ik, l_ki, loss, cos, grad_zi, grad_zk })
}

pub fn contrastive_loss(zi: &Mat, zk: &Mat, p: ContrastiveParams) -> Result<f64> {
    contrastive_terms(zi, zk, p).map(|t| t.loss)
}

/// Graph node for the contrastive loss over the rows of `zi` and `zk`.
pub fn contrastive_node(g: &mut Graph, zi: Var, zk: Var, p: ContrastiveParams) -> Result<(Var, ContrastiveTerms)> {
    let t = contrastive_terms(g.value(zi), g.value(zk), p)?;
    let v = g.loss_node(t.loss, vec![(zi, t.grad_zi.clone()), (zk, t.grad_zk.clone())]);
    Ok((v, t))
}

/// Mean cosine of positive pairs, of all negatives, and of each anchor's hardest negative.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    pub pos_cos_mean: f64,
    pub neg_cos_mean: f64,
    pub hardest_neg_mean: f64,
}

impl Separation {
    pub fn gap(&self) -> f64 {
        self.pos_cos_mean - self.neg_cos_mean
    }
}

pub fn separation(cos: &Mat) -> Separation {
    let n = cos.nrows();
    let pos = (0..n).map(|m| cos[[m, m]]).sum::<f64>() / n as f64;
    let mut neg = 0.0;
    let mut hardest = 0.0;
    for m in 0..n {
        let mut h = f64::NEG_INFINITY;
        for k in (0..n).filter(|&k| k != m) {
            neg += cos[[m, k]];
            h = h.max(cos[[m, k]]);
        }
        hardest += h;
    }
    Separation { pos_cos_mean: pos, neg_cos_mean: neg / (n * (n - 1)) as f64, hardest_neg_mean: hardest / n as f64 }
}

/// Image (fully sampled, all tokens visible) and undersampled k-space inputs of one subject.
#[derive(Clone, Debug)]
pub struct AlignPair {
    pub image: PatchSequence,
    pub kspace: PatchSequence,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AlignStepStats {
    pub loss: f64,
    pub separation: Separation,
    pub grad_norm: f64,
}

/// Alignment parameters: both encoders from their pretraining stores plus fresh projectors.
pub fn init_alignment(rng: &mut impl Rng, image_mae: &ParameterStore, kspace_mae: &ParameterStore, enc: &EncoderConfig, cfg: &AlignConfig) -> Result<ParameterStore> {
    cfg.validate()?;
    let mut store = ParameterStore::new();
    let take = |src: &ParameterStore, prefix: &str, dst: &mut ParameterStore| -> Result<()> {
        let mut enc_only = src.clone();
        enc_only.retain_prefix("enc.");
        if enc_only.is_empty() {
            return Err(KmtrError::MissingParameter(format!("{prefix}: no encoder parameters")));
        }
        for (k, v) in enc_only.iter() {
            dst.insert(format!("{prefix}.{}", k.trim_start_matches("enc.")), v.clone())?;
        }
        Ok(())
    };
    take(image_mae, IMAGE_ENCODER, &mut store)?;
    take(kspace_mae, KSPACE_ENCODER, &mut store)?;
    projector_init(&mut store, rng, IMAGE_PROJECTOR, enc.dim, cfg.proj_dim)?;
    projector_init(&mut store, rng, KSPACE_PROJECTOR, enc.dim, cfg.proj_dim)?;
    Ok(store)
}

/// Builds the alignment loss for one batch on `g`.
pub fn alignment_objective(g: &mut Graph, store: &ParameterStore, enc: &EncoderConfig, cfg: &AlignConfig, batch: &[AlignPair]) -> Result<(Var, ContrastiveTerms)> {
    let mut ci = Vec::with_capacity(batch.len());
    let mut ck = Vec::with_capacity(batch.len());
    for pair in batch {
        let a = encoder_forward(g, store, enc, IMAGE_ENCODER, &pair.image, &pair.image.visible_idx)?;
        ci.push(g.gather_rows(a.tokens, &[0]));
        let b = encoder_forward(g, store, enc, KSPACE_ENCODER, &pair.kspace, &pair.kspace.visible_idx)?;
        ck.push(g.gather_rows(b.tokens, &[0]));
    }
    let ti = g.concat_rows(&ci);
    let tk = g.concat_rows(&ck);
    let zi = projector(g, store, IMAGE_PROJECTOR, ti, cfg.activation);
    let zk = projector(g, store, KSPACE_PROJECTOR, tk, cfg.activation);
    contrastive_node(g, zi, zk, cfg.loss_params())
}

/// One optimizer step on the alignment loss; image-encoder gradients are
/// dropped when the config freezes it.
pub fn align_step(store: &mut ParameterStore, enc: &EncoderConfig, cfg: &AlignConfig, opt: &mut AdamW, batch: &[AlignPair], lr: f64) -> Result<AlignStepStats> {
    let mut g = Graph::new();
    let (l, terms) = alignment_objective(&mut g, store, enc, cfg, batch)?;
    let mut grads: BTreeMap<String, Mat> = g.param_grads(&g.backward(l));
    if cfg.freeze_image_encoder {
        let frozen = format!("{IMAGE_ENCODER}.");
        grads.retain(|k, _| !k.starts_with(&frozen));
    }
    if grads.values().any(|m| m.iter().any(|v| !v.is_finite())) {
        return Err(KmtrError::NonFinite("alignment gradient".into()));
    }
    let grad_norm = opt.clip_and_step(store, grads, lr);
    Ok(AlignStepStats { loss: terms.loss, separation: separation(&terms.cos), grad_norm })
}
