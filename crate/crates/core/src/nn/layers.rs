//! Parameterized building blocks. Each block owns the parameters under its
//! name prefix inside a [`ParameterStore`].

use ndarray::Array2;
use rand::Rng;

use crate::error::Result;

use super::graph::{FrameGeom, Graph, Var};
use super::params::{trunc_normal, xavier_uniform, ParameterStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Xavier,
    Zero,
}

pub fn linear_init(store: &mut ParameterStore, rng: &mut impl Rng, name: &str, d_in: usize, d_out: usize, init: Init) -> Result<()> {
    let w = match init {
        Init::Xavier => xavier_uniform(rng, d_in, d_out),
        Init::Zero => Array2::zeros((d_in, d_out)),
    };
    store.insert(format!("{name}.weight"), w)?;
    store.insert(format!("{name}.bias"), Array2::zeros((1, d_out)))
}

pub fn linear(g: &mut Graph, store: &ParameterStore, name: &str, x: Var) -> Var {
    let w = g.param(store, &format!("{name}.weight"));
    let b = g.param(store, &format!("{name}.bias"));
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

pub fn layer_norm_init(store: &mut ParameterStore, name: &str, dim: usize) -> Result<()> {
    store.insert(format!("{name}.gamma"), Array2::ones((1, dim)))?;
    store.insert(format!("{name}.beta"), Array2::zeros((1, dim)))
}

pub fn layer_norm(g: &mut Graph, store: &ParameterStore, name: &str, x: Var) -> Var {
    let gamma = g.param(store, &format!("{name}.gamma"));
    let beta = g.param(store, &format!("{name}.beta"));
    g.layer_norm(x, gamma, beta)
}

pub fn embedding_init(store: &mut ParameterStore, rng: &mut impl Rng, name: &str, rows: usize, dim: usize) -> Result<()> {
    store.insert(name, trunc_normal(rng, rows, dim, 0.02))
}

/// Two-layer perceptron with GELU in between.
pub fn mlp_init(store: &mut ParameterStore, rng: &mut impl Rng, name: &str, d_in: usize, hidden: usize, d_out: usize, out_init: Init) -> Result<()> {
    linear_init(store, rng, &format!("{name}.fc1"), d_in, hidden, Init::Xavier)?;
    linear_init(store, rng, &format!("{name}.fc2"), hidden, d_out, out_init)
}

pub fn mlp(g: &mut Graph, store: &ParameterStore, name: &str, x: Var) -> Var {
    let h = linear(g, store, &format!("{name}.fc1"), x);
    let h = g.gelu(h);
    linear(g, store, &format!("{name}.fc2"), h)
}

/// Pre-norm transformer block. Residual output projections start at zero so
/// every block is the identity at initialization.
pub fn block_init(store: &mut ParameterStore, rng: &mut impl Rng, name: &str, dim: usize, mlp_ratio: usize) -> Result<()> {
    layer_norm_init(store, &format!("{name}.ln1"), dim)?;
    linear_init(store, rng, &format!("{name}.qkv"), dim, 3 * dim, Init::Xavier)?;
    linear_init(store, rng, &format!("{name}.proj"), dim, dim, Init::Zero)?;
    layer_norm_init(store, &format!("{name}.ln2"), dim)?;
    mlp_init(store, rng, &format!("{name}.mlp"), dim, dim * mlp_ratio, dim, Init::Zero)
}

pub fn block(g: &mut Graph, store: &ParameterStore, name: &str, x: Var, heads: usize) -> Var {
    let h = layer_norm(g, store, &format!("{name}.ln1"), x);
    let qkv = linear(g, store, &format!("{name}.qkv"), h);
    let a = g.attention(qkv, heads);
    let a = linear(g, store, &format!("{name}.proj"), a);
    let x = g.add(x, a);
    let h = layer_norm(g, store, &format!("{name}.ln2"), x);
    let m = mlp(g, store, &format!("{name}.mlp"), h);
    g.add(x, m)
}

/// 3×3 convolution (+bias) followed by GELU.
pub fn conv_init(store: &mut ParameterStore, rng: &mut impl Rng, name: &str, c_in: usize, c_out: usize) -> Result<()> {
    let a = (6.0 / (9 * c_in + 9 * c_out) as f64).sqrt();
    store.insert(format!("{name}.weight"), Array2::from_shape_fn((9 * c_in, c_out), |_| rng.gen_range(-a..a)))?;
    store.insert(format!("{name}.bias"), Array2::zeros((1, c_out)))
}

pub fn conv_gelu(g: &mut Graph, store: &ParameterStore, name: &str, x: Var, geom: FrameGeom) -> Var {
    let w = g.param(store, &format!("{name}.weight"));
    let b = g.param(store, &format!("{name}.bias"));
    let y = g.conv3x3(x, w, geom);
    let y = g.add_row(y, b);
    g.gelu(y)
}

/// Source map for a 2× pixel shuffle: input rows (frames·h·w) with 4·c
/// channels ordered (dy, dx, c) become rows (frames·2h·2w) with c channels.
pub fn pixel_shuffle_map(geom: FrameGeom, c: usize) -> (Vec<usize>, FrameGeom) {
    let out = FrameGeom { frames: geom.frames, h: 2 * geom.h, w: 2 * geom.w };
    let mut src = Vec::with_capacity(out.pixels() * c);
    for f in 0..out.frames {
        for y in 0..out.h {
            for x in 0..out.w {
                let p = (f * geom.h + y / 2) * geom.w + x / 2;
                let sub = (y % 2) * 2 + (x % 2);
                for ch in 0..c {
                    src.push(p * 4 * c + sub * c + ch);
                }
            }
        }
    }
    (src, out)
}

pub fn pixel_shuffle(g: &mut Graph, x: Var, geom: FrameGeom) -> (Var, FrameGeom) {
    let c = g.value(x).ncols() / 4;
    let (src, out) = pixel_shuffle_map(geom, c);
    let v = g.rearrange(x, src, (out.pixels(), c));
    (v, out)
}
