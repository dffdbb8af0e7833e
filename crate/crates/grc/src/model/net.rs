//! Graph-building blocks: parameter binding, linear layers, multi-head
//! attention and pre-norm transformer layers.

use std::collections::HashMap;

use crate::optim::{GradStore, Parameters};
use crate::tensor::{Tape, TensorId};

/// Binds named parameters onto a tape, once each, so gradients accumulate on
/// a single leaf per parameter no matter how often it is reused.
pub struct GraphCtx<'a> {
    pub tape: &'a mut Tape,
    params: &'a Parameters,
    trainable: bool,
    bound: HashMap<String, TensorId>,
}

impl<'a> GraphCtx<'a> {
    pub fn new(tape: &'a mut Tape, params: &'a Parameters, trainable: bool) -> Self {
        GraphCtx { tape, params, trainable, bound: HashMap::new() }
    }

    pub fn param(&mut self, name: &str) -> TensorId {
        if let Some(&id) = self.bound.get(name) {
            return id;
        }
        let t = self.params.get(name);
        let id = self.tape.leaf(t.data.clone(), t.shape.clone(), self.trainable);
        self.bound.insert(name.to_string(), id);
        id
    }

    /// Copies gradients off the tape into `grads`, in parameter order.
    pub fn collect_grads(&self, grads: &mut GradStore) {
        for name in self.params.names() {
            if let Some(&id) = self.bound.get(name) {
                if let Some(g) = self.tape.grad(id) {
                    grads.accumulate(name, g);
                }
            }
        }
    }
}

pub fn linear(ctx: &mut GraphCtx, x: TensorId, prefix: &str) -> TensorId {
    let w = ctx.param(&format!("{prefix}.w"));
    let b = ctx.param(&format!("{prefix}.b"));
    let y = ctx.tape.matmul(x, w);
    ctx.tape.add_bias(y, b)
}

pub fn layer_norm(ctx: &mut GraphCtx, x: TensorId, prefix: &str) -> TensorId {
    let g = ctx.param(&format!("{prefix}.g"));
    let b = ctx.param(&format!("{prefix}.b"));
    ctx.tape.layer_norm(x, g, b, 1e-5)
}

/// Multi-head attention. `mask` is an additive 0/MASK_NEG tensor of shape
/// `[n_q, n_k]` applied to every head's scores before the softmax.
pub fn attention(
    ctx: &mut GraphCtx,
    query_input: TensorId,
    kv_input: TensorId,
    mask: Option<TensorId>,
    prefix: &str,
    heads: usize,
) -> TensorId {
    let q = linear(ctx, query_input, &format!("{prefix}.q"));
    let k = linear(ctx, kv_input, &format!("{prefix}.k"));
    let v = linear(ctx, kv_input, &format!("{prefix}.v"));
    let dm = *ctx.tape.shape(q).last().unwrap();
    assert!(dm % heads == 0, "model_dim must be divisible by heads");
    let dh = dm / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = ctx.tape.slice_cols(q, h * dh, (h + 1) * dh);
        let kh = ctx.tape.slice_cols(k, h * dh, (h + 1) * dh);
        let vh = ctx.tape.slice_cols(v, h * dh, (h + 1) * dh);
        let kt = ctx.tape.transpose(kh);
        let scores = ctx.tape.matmul(qh, kt);
        let scores = ctx.tape.scale(scores, scale);
        let scores = match mask {
            Some(m) => ctx.tape.masked_fill(scores, m),
            None => scores,
        };
        let weights = ctx.tape.softmax(scores);
        head_outputs.push(ctx.tape.matmul(weights, vh));
    }
    let merged = ctx.tape.concat_cols(&head_outputs);
    linear(ctx, merged, &format!("{prefix}.o"))
}

fn feed_forward(ctx: &mut GraphCtx, x: TensorId, prefix: &str) -> TensorId {
    let h = linear(ctx, x, &format!("{prefix}.1"));
    let h = ctx.tape.gelu(h);
    linear(ctx, h, &format!("{prefix}.2"))
}

/// Pre-norm encoder layer: self-attention then feed-forward, both residual.
pub fn encoder_layer(ctx: &mut GraphCtx, x: TensorId, prefix: &str, heads: usize) -> TensorId {
    let normed = layer_norm(ctx, x, &format!("{prefix}.ln1"));
    let attn = attention(ctx, normed, normed, None, &format!("{prefix}.attn"), heads);
    let x = ctx.tape.add(x, attn);
    let normed = layer_norm(ctx, x, &format!("{prefix}.ln2"));
    let ff = feed_forward(ctx, normed, &format!("{prefix}.ffn"));
    ctx.tape.add(x, ff)
}

/// Pre-norm decoder layer: masked self-attention, cross-attention over the
/// encoder output, then feed-forward.
pub fn decoder_layer(
    ctx: &mut GraphCtx,
    x: TensorId,
    enc: TensorId,
    self_mask: TensorId,
    prefix: &str,
    heads: usize,
) -> TensorId {
    let normed = layer_norm(ctx, x, &format!("{prefix}.ln1"));
    let attn = attention(ctx, normed, normed, Some(self_mask), &format!("{prefix}.self"), heads);
    let x = ctx.tape.add(x, attn);
    let normed = layer_norm(ctx, x, &format!("{prefix}.ln2"));
    let cross = attention(ctx, normed, enc, None, &format!("{prefix}.cross"), heads);
    let x = ctx.tape.add(x, cross);
    let normed = layer_norm(ctx, x, &format!("{prefix}.ln3"));
    let ff = feed_forward(ctx, normed, &format!("{prefix}.ffn"));
    ctx.tape.add(x, ff)
}

/// Sinusoidal positional encodings, `[len, dim]` row-major.
pub fn sinusoidal_encoding(len: usize, dim: usize) -> Vec<f64> {
    let mut pe = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let angle = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            pe[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}
