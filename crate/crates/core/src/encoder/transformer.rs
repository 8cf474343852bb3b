//! Post-norm transformer encoder with block-local attention.
//!
//! The sequence is cut into blocks of `window` positions; each block
//! attends to itself and its two neighbouring blocks, so cost grows
//! linearly with length and a 4096-position article stays cheap.

use ndarray::Array2;
use rand::Rng;

use super::EncoderConfig;
use crate::autograd::{Tape, Var};
use crate::params::{glorot, normal, Bound, ParamStore};

/// Resolves parameter names under a prefix of a bound store.
#[derive(Clone, Copy)]
pub struct Scope<'a> {
    pub bound: &'a Bound,
    pub prefix: &'a str,
}

impl<'a> Scope<'a> {
    pub fn new(bound: &'a Bound, prefix: &'a str) -> Self {
        Self { bound, prefix }
    }

    pub fn var(&self, name: &str) -> Var {
        if self.prefix.is_empty() {
            self.bound.var(name)
        } else {
            self.bound.var(&format!("{}.{name}", self.prefix))
        }
    }
}

fn linear_params<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, fan_in: usize, fan_out: usize) {
    store.insert(format!("{name}.weight"), glorot(rng, fan_in, fan_out));
    store.insert(format!("{name}.bias"), Array2::zeros((1, fan_out)));
}

fn norm_params(store: &mut ParamStore, name: &str, d: usize) {
    store.insert(format!("{name}.gamma"), Array2::ones((1, d)));
    store.insert(format!("{name}.beta"), Array2::zeros((1, d)));
}

/// Fresh parameters for `config`.
pub fn init_params<R: Rng>(config: &EncoderConfig, rng: &mut R) -> ParamStore {
    let d = config.hidden_dim;
    let f = config.ffn_dim();
    let mut store = ParamStore::new();
    store.insert("embed.weight", normal(rng, config.vocab_size, d, 1.0));
    norm_params(&mut store, "embed_norm", d);
    for l in 0..config.layers {
        for proj in ["query", "key", "value", "output"] {
            linear_params(&mut store, rng, &format!("layer{l}.attn.{proj}"), d, d);
        }
        norm_params(&mut store, &format!("layer{l}.attn_norm"), d);
        linear_params(&mut store, rng, &format!("layer{l}.ffn.inner"), d, f);
        linear_params(&mut store, rng, &format!("layer{l}.ffn.outer"), f, d);
        norm_params(&mut store, &format!("layer{l}.ffn_norm"), d);
    }
    store
}

/// Expected shape of every parameter, for checkpoint validation.
pub fn expected_shapes(config: &EncoderConfig) -> Vec<(String, (usize, usize))> {
    let d = config.hidden_dim;
    let f = config.ffn_dim();
    let mut out = vec![
        ("embed.weight".to_owned(), (config.vocab_size, d)),
        ("embed_norm.gamma".to_owned(), (1, d)),
        ("embed_norm.beta".to_owned(), (1, d)),
    ];
    for l in 0..config.layers {
        for proj in ["query", "key", "value", "output"] {
            out.push((format!("layer{l}.attn.{proj}.weight"), (d, d)));
            out.push((format!("layer{l}.attn.{proj}.bias"), (1, d)));
        }
        for norm in ["attn_norm", "ffn_norm"] {
            out.push((format!("layer{l}.{norm}.gamma"), (1, d)));
            out.push((format!("layer{l}.{norm}.beta"), (1, d)));
        }
        out.push((format!("layer{l}.ffn.inner.weight"), (d, f)));
        out.push((format!("layer{l}.ffn.inner.bias"), (1, f)));
        out.push((format!("layer{l}.ffn.outer.weight"), (f, d)));
        out.push((format!("layer{l}.ffn.outer.bias"), (1, d)));
    }
    out
}

pub fn sinusoidal_positions(len: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, d), |(pos, i)| {
        let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let angle = pos as f64 * rate;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

fn linear(tape: &mut Tape, scope: Scope<'_>, name: &str, x: Var) -> Var {
    let w = scope.var(&format!("{name}.weight"));
    let b = scope.var(&format!("{name}.bias"));
    let h = tape.matmul(x, w);
    tape.add_row(h, b)
}

fn norm(tape: &mut Tape, scope: Scope<'_>, name: &str, x: Var) -> Var {
    let g = scope.var(&format!("{name}.gamma"));
    let b = scope.var(&format!("{name}.beta"));
    tape.layer_norm(x, g, b, 1e-5)
}

fn attention(tape: &mut Tape, scope: Scope<'_>, layer: usize, x: Var, config: &EncoderConfig) -> Var {
    let len = tape.value(x).nrows();
    let d = config.hidden_dim;
    let heads = config.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = linear(tape, scope, &format!("layer{layer}.attn.query"), x);
    let k = linear(tape, scope, &format!("layer{layer}.attn.key"), x);
    let v = linear(tape, scope, &format!("layer{layer}.attn.value"), x);

    let w = config.attention_window.max(1);
    let mut blocks = Vec::new();
    let mut start = 0;
    while start < len {
        let end = (start + w).min(len);
        let key_start = start.saturating_sub(w);
        let key_end = (end + w).min(len);
        let qb = tape.slice_rows(q, start, end);
        let kb = tape.slice_rows(k, key_start, key_end);
        let vb = tape.slice_rows(v, key_start, key_end);
        let mut head_out = Vec::with_capacity(heads);
        for h in 0..heads {
            let (c0, c1) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_cols(qb, c0, c1);
            let kh = tape.slice_cols(kb, c0, c1);
            let vh = tape.slice_cols(vb, c0, c1);
            let scores = tape.matmul_t(qh, kh);
            let scores = tape.scale(scores, scale);
            let weights = tape.softmax_rows(scores);
            head_out.push(tape.matmul(weights, vh));
        }
        blocks.push(if heads == 1 { head_out[0] } else { tape.concat_cols(&head_out) });
        start = end;
    }
    let merged = if blocks.len() == 1 { blocks[0] } else { tape.concat_rows(&blocks) };
    linear(tape, scope, &format!("layer{layer}.attn.output"), merged)
}

/// Hidden states (`len × d`) for a sequence of piece ids.
pub fn forward(tape: &mut Tape, scope: Scope<'_>, config: &EncoderConfig, ids: &[usize]) -> Var {
    let embed = scope.var("embed.weight");
    let x = tape.gather_rows(embed, ids);
    let pos = tape.leaf(sinusoidal_positions(ids.len(), config.hidden_dim));
    let x = tape.add(x, pos);
    let mut x = norm(tape, scope, "embed_norm", x);
    for l in 0..config.layers {
        let a = attention(tape, scope, l, x, config);
        let res = tape.add(x, a);
        x = norm(tape, scope, &format!("layer{l}.attn_norm"), res);
        let inner = linear(tape, scope, &format!("layer{l}.ffn.inner"), x);
        let inner = tape.gelu(inner);
        let outer = linear(tape, scope, &format!("layer{l}.ffn.outer"), inner);
        let res = tape.add(x, outer);
        x = norm(tape, scope, &format!("layer{l}.ffn_norm"), res);
    }
    x
}
