//! Parameter initialization and the small layers shared by encoder and decoder.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{concat_cols, Var};
use crate::error::Result;
use crate::params::{BoundParams, ParamStore};
use crate::tensor::Tensor;

/// Glorot-uniform weight `fan_in×fan_out` plus a zero bias.
pub fn init_linear(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let w = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    store.insert(format!("{name}.w"), Tensor::matrix(fan_in, fan_out, w).expect("positive dims"));
    store.insert(format!("{name}.b"), Tensor::zeros(1, fan_out));
}

pub fn init_layer_norm(store: &mut ParamStore, name: &str, width: usize) {
    store.insert(format!("{name}.g"), Tensor::full(1, width, 1.0));
    store.insert(format!("{name}.b"), Tensor::zeros(1, width));
}

pub const LN_EPS: f64 = 1e-5;

pub fn linear(p: &BoundParams, name: &str, x: &Var) -> Result<Var> {
    x.matmul(p.get(&format!("{name}.w")))?
        .add(p.get(&format!("{name}.b")))
}

pub fn layer_norm(p: &BoundParams, name: &str, x: &Var) -> Result<Var> {
    x.layer_norm(p.get(&format!("{name}.g")), p.get(&format!("{name}.b")), LN_EPS)
}

/// Two-layer GELU feed-forward block.
pub fn feed_forward(p: &BoundParams, name: &str, x: &Var) -> Result<Var> {
    let h = linear(p, &format!("{name}.ff1"), x)?.gelu();
    linear(p, &format!("{name}.ff2"), &h)
}

pub fn init_feed_forward(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, width: usize, hidden: usize) {
    init_linear(store, rng, &format!("{name}.ff1"), width, hidden);
    init_linear(store, rng, &format!("{name}.ff2"), hidden, width);
}

/// Query/value/output projections with bias; the key projection has none
/// because a key bias only shifts each score row and cancels in the softmax.
pub fn init_attention(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, width: usize) {
    for proj in ["q", "k", "v", "o"] {
        init_linear(store, rng, &format!("{name}.{proj}"), width, width);
    }
    store.remove(&format!("{name}.k.b"));
}

/// Multi-head scaled dot-product attention weights per head, `Nq×Nk` each.
pub fn attention_weights(p: &BoundParams, name: &str, queries: &Var, keys: &Var, heads: usize) -> Result<Vec<Var>> {
    let (_, c) = queries.dims();
    let q = linear(p, &format!("{name}.q"), queries)?;
    let k = keys.matmul(p.get(&format!("{name}.k.w")))?;
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    (0..heads)
        .map(|h| {
            let qh = q.slice_cols(h * d, (h + 1) * d)?;
            let kh = k.slice_cols(h * d, (h + 1) * d)?;
            qh.matmul(&kh.t())?.scale(scale).softmax(1)
        })
        .collect()
}

/// Multi-head attention of `queries` over `keys`, with values taken from `keys` too.
pub fn attention(p: &BoundParams, name: &str, queries: &Var, keys: &Var, heads: usize) -> Result<Var> {
    let (_, c) = queries.dims();
    let d = c / heads;
    let weights = attention_weights(p, name, queries, keys, heads)?;
    let v = linear(p, &format!("{name}.v"), keys)?;
    let outs = weights
        .iter()
        .enumerate()
        .map(|(h, w)| w.matmul(&v.slice_cols(h * d, (h + 1) * d)?))
        .collect::<Result<Vec<_>>>()?;
    let merged = if outs.len() == 1 {
        outs.into_iter().next().expect("one head")
    } else {
        concat_cols(&outs)?
    };
    linear(p, &format!("{name}.o"), &merged)
}
