use bitstain_tensor::{Bound, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

const LN_EPS: f64 = 1e-6;

/// Deterministic parameter initializer; draws follow creation order.
pub(crate) struct Init {
    pub store: ParamStore,
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<()> {
        let t = Tensor::randn(shape.to_vec(), std, &mut self.rng);
        Ok(self.store.insert(name, t)?)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        Ok(self.store.insert(name, Tensor::full(shape.to_vec(), value))?)
    }

    /// Conv weight `[out, in, k, k]` with `1/sqrt(fan_in)` scale, zero bias.
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Result<()> {
        let std = 1.0 / ((cin * k * k) as f64).sqrt();
        self.normal(&format!("{name}.w"), &[cout, cin, k, k], std)?;
        self.constant(&format!("{name}.b"), &[cout], 0.0)
    }

    pub fn linear(&mut self, name: &str, din: usize, dout: usize, std: f64) -> Result<()> {
        self.normal(&format!("{name}.w"), &[din, dout], std)?;
        self.constant(&format!("{name}.b"), &[dout], 0.0)
    }

    pub fn layer_norm(&mut self, name: &str, d: usize) -> Result<()> {
        self.constant(&format!("{name}.g"), &[d], 1.0)?;
        self.constant(&format!("{name}.b"), &[d], 0.0)
    }
}

pub(crate) fn conv<'t>(p: &Bound<'t>, name: &str, x: Var<'t>, stride: usize, pad: usize) -> Var<'t> {
    x.conv2d(p.get(&format!("{name}.w")), Some(p.get(&format!("{name}.b"))), stride, pad)
}

/// `x [N, in] -> [N, out]`.
pub(crate) fn linear<'t>(p: &Bound<'t>, name: &str, x: Var<'t>) -> Var<'t> {
    x.matmul(p.get(&format!("{name}.w"))) + p.get(&format!("{name}.b"))
}

/// Normalizes over the last axis of a rank-3 input.
pub(crate) fn layer_norm<'t>(p: &Bound<'t>, name: &str, x: Var<'t>) -> Var<'t> {
    let d = *x.shape().last().unwrap() as f64;
    let mu = x.sum_axis(2).scale(1.0 / d);
    let centered = x - mu;
    let var = centered.square().sum_axis(2).scale(1.0 / d);
    let normed = centered / var.offset(LN_EPS).sqrt();
    normed * p.get(&format!("{name}.g")) + p.get(&format!("{name}.b"))
}

/// Applies a linear layer to every row of `[B, T, D]`.
pub(crate) fn token_linear<'t>(p: &Bound<'t>, name: &str, x: Var<'t>) -> Var<'t> {
    let s = x.shape();
    let y = linear(p, name, x.reshape(vec![s[0] * s[1], s[2]]));
    let out = y.shape()[1];
    y.reshape(vec![s[0], s[1], out])
}

pub(crate) fn attention<'t>(p: &Bound<'t>, name: &str, x: Var<'t>, heads: usize) -> Var<'t> {
    let s = x.shape();
    let (b, t, d) = (s[0], s[1], s[2]);
    let dh = d / heads;
    let qkv = token_linear(p, &format!("{name}.qkv"), x);
    let split = |i: usize| {
        qkv.narrow(2, i * d, d)
            .reshape(vec![b, t, heads, dh])
            .permute(&[0, 2, 1, 3])
            .reshape(vec![b * heads, t, dh])
    };
    let (q, k, v) = (split(0), split(1), split(2));
    let scores = q.matmul(k.permute(&[0, 2, 1])).scale(1.0 / (dh as f64).sqrt());
    let mixed = scores
        .softmax()
        .matmul(v)
        .reshape(vec![b, heads, t, dh])
        .permute(&[0, 2, 1, 3])
        .reshape(vec![b, t, d]);
    token_linear(p, &format!("{name}.proj"), mixed)
}

/// Pre-norm transformer block.
pub(crate) fn vit_block<'t>(p: &Bound<'t>, name: &str, x: Var<'t>, heads: usize) -> Var<'t> {
    let h = x + attention(p, &format!("{name}.attn"), layer_norm(p, &format!("{name}.ln1"), x), heads);
    let m = token_linear(p, &format!("{name}.fc1"), layer_norm(p, &format!("{name}.ln2"), h)).gelu();
    h + token_linear(p, &format!("{name}.fc2"), m)
}

pub(crate) fn init_vit_block(init: &mut Init, name: &str, d: usize) -> Result<()> {
    let std = 1.0 / (d as f64).sqrt();
    init.layer_norm(&format!("{name}.ln1"), d)?;
    init.linear(&format!("{name}.attn.qkv"), d, 3 * d, std)?;
    init.linear(&format!("{name}.attn.proj"), d, d, std)?;
    init.layer_norm(&format!("{name}.ln2"), d)?;
    init.linear(&format!("{name}.fc1"), d, 2 * d, std)?;
    init.linear(&format!("{name}.fc2"), 2 * d, d, 1.0 / (2.0 * d as f64).sqrt())
}
