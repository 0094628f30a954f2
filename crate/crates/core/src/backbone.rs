//! Transformer encoder/decoder for masked autoencoding of patch sequences.
//!
//! The encoder sees only visible tokens (plus a class token). The decoder
//! re-inserts a learned mask token at every hidden position, adds its own
//! positional embeddings, and predicts patches for all L positions.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KmtrError, Result};
use crate::nn::layers::{self, Init};
use crate::nn::{loss, Graph, Mat, ParameterStore, Var};
use crate::tokenizer::{check_partition, Domain, PatchGridSpec, PatchSequence, TokenIndex};

pub use crate::nn::{grad_check, GradCheckReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dim: usize,
    pub depth: usize,
    pub dec_depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub grid: PatchGridSpec,
    /// Width of decoder outputs; defaults to the grid's patch_dim.
    #[serde(default)]
    pub out_dim: Option<usize>,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(KmtrError::InvalidConfig(format!(
                "dim ({}) must be a positive multiple of heads ({})",
                self.dim, self.heads
            )));
        }
        if self.dec_depth == 0 {
            return Err(KmtrError::InvalidConfig("decoder depth must be >= 1".into()));
        }
        if self.mlp_ratio == 0 {
            return Err(KmtrError::InvalidConfig("mlp_ratio must be >= 1".into()));
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.grid.patch_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim.unwrap_or_else(|| self.patch_dim())
    }

    /// Encoder layer whose output feeds the intermediate skip (⌈depth/2⌉).
    pub fn skip_layer(&self) -> usize {
        self.depth.div_ceil(2)
    }
}

/// Class token plus per-visible-token embeddings of one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentEmbedding {
    pub class_token: Mat,
    pub tokens: Mat,
    pub visible_idx: Vec<usize>,
    pub domain: Domain,
    pub fully_sampled: bool,
}

/// Factorized positional embedding tables (slice, t, h, w) under `prefix`.
pub fn pos_init(store: &mut ParameterStore, rng: &mut impl Rng, prefix: &str, grid: &PatchGridSpec, dim: usize) -> Result<()> {
    let [gt, gh, gw] = grid.grid();
    layers::embedding_init(store, rng, &format!("{prefix}.slice"), grid.volume[0], dim)?;
    layers::embedding_init(store, rng, &format!("{prefix}.t"), gt, dim)?;
    layers::embedding_init(store, rng, &format!("{prefix}.h"), gh, dim)?;
    layers::embedding_init(store, rng, &format!("{prefix}.w"), gw, dim)
}

/// Sum of the four table rows selected by each token's grid index.
pub fn pos_embed(g: &mut Graph, store: &ParameterStore, prefix: &str, index: &[TokenIndex]) -> Var {
    let pick = |f: fn(&TokenIndex) -> usize| index.iter().map(f).collect::<Vec<_>>();
    let parts = [
        ("slice", pick(|i| i.slice)),
        ("t", pick(|i| i.t)),
        ("h", pick(|i| i.h)),
        ("w", pick(|i| i.w)),
    ];
    let mut acc: Option<Var> = None;
    for (name, ids) in parts {
        let table = g.param(store, &format!("{prefix}.{name}"));
        let rows = g.gather_rows(table, &ids);
        acc = Some(match acc {
            None => rows,
            Some(a) => g.add(a, rows),
        });
    }
    acc.expect("four tables")
}

pub fn init_encoder(store: &mut ParameterStore, rng: &mut impl Rng, cfg: &EncoderConfig, prefix: &str) -> Result<()> {
    cfg.validate()?;
    layers::linear_init(store, rng, &format!("{prefix}.embed"), cfg.patch_dim(), cfg.dim, Init::Xavier)?;
    pos_init(store, rng, &format!("{prefix}.pos"), &cfg.grid, cfg.dim)?;
    layers::embedding_init(store, rng, &format!("{prefix}.cls"), 1, cfg.dim)?;
    for i in 0..cfg.depth {
        layers::block_init(store, rng, &format!("{prefix}.blocks.{i}"), cfg.dim, cfg.mlp_ratio)?;
    }
    if cfg.depth > 0 {
        layers::layer_norm_init(store, &format!("{prefix}.norm"), cfg.dim)?;
    }
    Ok(())
}

pub fn init_decoder(store: &mut ParameterStore, rng: &mut impl Rng, cfg: &EncoderConfig, prefix: &str) -> Result<()> {
    cfg.validate()?;
    layers::linear_init(store, rng, &format!("{prefix}.embed"), cfg.dim, cfg.dim, Init::Xavier)?;
    layers::embedding_init(store, rng, &format!("{prefix}.mask_token"), 1, cfg.dim)?;
    pos_init(store, rng, &format!("{prefix}.pos"), &cfg.grid, cfg.dim)?;
    for i in 0..cfg.dec_depth {
        layers::block_init(store, rng, &format!("{prefix}.blocks.{i}"), cfg.dim, cfg.mlp_ratio)?;
    }
    layers::layer_norm_init(store, &format!("{prefix}.norm"), cfg.dim)?;
    layers::linear_init(store, rng, &format!("{prefix}.out"), cfg.dim, cfg.out_dim(), Init::Xavier)
}

/// Encoder and decoder parameters for one domain's masked autoencoder.
pub fn init_mae(rng: &mut impl Rng, cfg: &EncoderConfig) -> Result<ParameterStore> {
    let mut store = ParameterStore::new();
    init_encoder(&mut store, rng, cfg, "enc")?;
    init_decoder(&mut store, rng, cfg, "dec")?;
    Ok(store)
}

pub struct EncoderVars {
    /// (n_visible + 1) × dim, class token in row 0.
    pub tokens: Var,
    /// Residual stream after layer ⌈depth/2⌉, same layout as `tokens`.
    pub skip: Var,
}

/// Encodes the given visible tokens of `seq`.
pub fn encoder_forward(g: &mut Graph, store: &ParameterStore, cfg: &EncoderConfig, prefix: &str, seq: &PatchSequence, visible: &[usize]) -> Result<EncoderVars> {
    if seq.patches.ncols() != cfg.patch_dim() {
        return Err(KmtrError::shape("encode", &[seq.len(), cfg.patch_dim()], seq.patches.shape()));
    }
    if seq.spec != cfg.grid {
        return Err(KmtrError::InvalidConfig(format!("sequence grid {:?} differs from encoder grid {:?}", seq.spec, cfg.grid)));
    }
    let x = g.input(seq.patches.select(ndarray::Axis(0), visible));
    let x = layers::linear(g, store, &format!("{prefix}.embed"), x);
    let index: Vec<TokenIndex> = visible.iter().map(|&i| seq.index[i]).collect();
    let pos = pos_embed(g, store, &format!("{prefix}.pos"), &index);
    let x = g.add(x, pos);
    let cls = g.param(store, &format!("{prefix}.cls"));
    let mut h = g.concat_rows(&[cls, x]);
    let mut skip = h;
    for i in 0..cfg.depth {
        h = layers::block(g, store, &format!("{prefix}.blocks.{i}"), h, cfg.heads);
        if i + 1 == cfg.skip_layer() {
            skip = h;
        }
    }
    if cfg.depth > 0 {
        h = layers::layer_norm(g, store, &format!("{prefix}.norm"), h);
    }
    Ok(EncoderVars { tokens: h, skip })
}

/// Inference-mode encoding of the visible tokens of `p`.
pub fn encode(p: &PatchSequence, params: &ParameterStore, cfg: &EncoderConfig) -> Result<LatentEmbedding> {
    let mut g = Graph::new();
    let out = encoder_forward(&mut g, params, cfg, "enc", p, &p.visible_idx)?;
    let v = g.value(out.tokens);
    Ok(LatentEmbedding {
        class_token: v.slice(ndarray::s![0..1, ..]).to_owned(),
        tokens: v.slice(ndarray::s![1.., ..]).to_owned(),
        visible_idx: p.visible_idx.clone(),
        domain: p.domain,
        fully_sampled: p.fully_sampled,
    })
}

pub struct DecoderVars {
    /// Decoder input sequence: class token, then all L positions.
    pub input: Var,
    /// L × out_dim predictions in token order.
    pub output: Var,
}

/// Decodes encoder output (class token in row 0, then visible tokens in
/// `visible_idx` order) into predictions for every position. A `{prefix}.token_mix`
/// (L × L) parameter, when present, adds a dense mix across positions.
pub fn decoder_forward(g: &mut Graph, store: &ParameterStore, cfg: &EncoderConfig, prefix: &str, latent: Var, visible_idx: &[usize], hidden_idx: &[usize]) -> Result<DecoderVars> {
    let l = cfg.grid.num_tokens();
    check_partition(l, visible_idx, hidden_idx)?;
    if g.value(latent).nrows() != visible_idx.len() + 1 {
        return Err(KmtrError::shape("decode", &[visible_idx.len() + 1, cfg.dim], g.value(latent).shape()));
    }
    let x = layers::linear(g, store, &format!("{prefix}.embed"), latent);
    let cls = g.gather_rows(x, &[0]);
    let rest: Vec<usize> = (1..=visible_idx.len()).collect();
    let vis = g.gather_rows(x, &rest);
    let mask = g.param(store, &format!("{prefix}.mask_token"));
    let full = g.interleave(vis, mask, visible_idx, hidden_idx);
    let pos = pos_embed(g, store, &format!("{prefix}.pos"), &cfg.grid.indices());
    let full = g.add(full, pos);
    let input = g.concat_rows(&[cls, full]);
    let mut h = input;
    for i in 0..cfg.dec_depth {
        h = layers::block(g, store, &format!("{prefix}.blocks.{i}"), h, cfg.heads);
    }
    let rows: Vec<usize> = (1..=l).collect();
    let mut h = g.gather_rows(h, &rows);
    let mix = format!("{prefix}.token_mix");
    if store.get(&mix).is_some() {
        let m = g.param(store, &mix);
        let mixed = g.matmul(m, h);
        h = g.add(h, mixed);
    }
    let h = layers::layer_norm(g, store, &format!("{prefix}.norm"), h);
    let output = layers::linear(g, store, &format!("{prefix}.out"), h);
    Ok(DecoderVars { input, output })
}

/// Predicted patches for all L positions from a latent embedding.
pub fn mae_decode(latents: &LatentEmbedding, hidden_idx: &[usize], params: &ParameterStore, cfg: &EncoderConfig) -> Result<PatchSequence> {
    let mut g = Graph::new();
    let mut rows = Array2::zeros((latents.tokens.nrows() + 1, cfg.dim));
    rows.row_mut(0).assign(&latents.class_token.row(0));
    rows.slice_mut(ndarray::s![1.., ..]).assign(&latents.tokens);
    let latent = g.input(rows);
    let out = decoder_forward(&mut g, params, cfg, "dec", latent, &latents.visible_idx, hidden_idx)?;
    Ok(PatchSequence {
        patches: g.value(out.output).clone(),
        index: cfg.grid.indices(),
        visible_idx: latents.visible_idx.clone(),
        hidden_idx: hidden_idx.to_vec(),
        spec: cfg.grid,
        domain: latents.domain,
        fully_sampled: latents.fully_sampled,
    })
}

/// Mean squared error over the hidden-position patch vectors; 0 when nothing is hidden.
pub fn mae_loss(pred: &Mat, target: &Mat, hidden_idx: &[usize]) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(KmtrError::shape("mae_loss", target.shape(), pred.shape()));
    }
    if hidden_idx.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &r in hidden_idx {
        total += pred.row(r).iter().zip(target.row(r)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total / (hidden_idx.len() * pred.ncols()) as f64)
}

/// Which positions the reconstruction loss scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossPositions {
    Hidden,
    All,
}

/// Graph-level masked-autoencoder loss for one subject: encode the visible
/// tokens of `input`, decode all positions, score against `target`.
pub fn mae_objective(g: &mut Graph, store: &ParameterStore, cfg: &EncoderConfig, input: &PatchSequence, target: &Mat, positions: LossPositions) -> Result<Var> {
    let enc = encoder_forward(g, store, cfg, "enc", input, &input.visible_idx)?;
    let dec = decoder_forward(g, store, cfg, "dec", enc.tokens, &input.visible_idx, &input.hidden_idx)?;
    let rows: Vec<usize> = match positions {
        LossPositions::Hidden => input.hidden_idx.clone(),
        LossPositions::All => (0..input.len()).collect(),
    };
    Ok(loss::mse_rows(g, dec.output, target, &rows))
}
