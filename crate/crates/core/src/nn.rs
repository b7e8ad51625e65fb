//! Layers built on the autodiff tape.

use alloc::format;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::graph::{AttnMask, Graph, ParamId, ParamStore, Var};
use crate::tensor::Tensor;
use crate::Rng;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let std = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), Tensor::randn(in_dim, out_dim, std, rng));
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(1, out_dim)));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// Linear map whose weights start at zero (output starts at zero).
    pub fn zeroed(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(in_dim, out_dim));
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(1, out_dim)));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Layer normalization with learned gain and bias.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(1, dim, 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(1, dim)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.layer_norm(x);
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let y = g.mul_row(n, gain);
        g.add_row(y, bias)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, vocab: usize, dim: usize, rng: &mut Rng) -> Self {
        let table = store.add(format!("{name}.table"), Tensor::randn(vocab, dim, 0.5, rng));
        Self { table, vocab, dim }
    }

    pub fn forward(&self, g: &mut Graph, ids: &[usize]) -> Var {
        let t = g.param(self.table);
        g.gather_rows(t, ids.to_vec())
    }
}

/// Two-layer GELU perceptron.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub up: Linear,
    pub down: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, out_dim: usize, rng: &mut Rng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), in_dim, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, out_dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.up.forward(g, x);
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionBlock {
    pub norm1: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub heads: usize,
}

impl AttentionBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut Rng) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            query: Linear::new(store, &format!("{name}.query"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, 2 * dim, dim, rng),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mask: &AttnMask) -> Var {
        let h = self.norm1.forward(g, x);
        let q = self.query.forward(g, h);
        let k = self.key.forward(g, h);
        let v = self.value.forward(g, h);
        let a = g.attention(q, k, v, self.heads, mask);
        let a = self.out.forward(g, a);
        let x = g.add(x, a);
        let h = self.norm2.forward(g, x);
        let m = self.mlp.forward(g, h);
        g.add(x, m)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Transformer {
    pub blocks: Vec<AttentionBlock>,
}

impl Transformer {
    pub fn new(store: &mut ParamStore, name: &str, layers: usize, dim: usize, heads: usize, rng: &mut Rng) -> Self {
        Self {
            blocks: (0..layers)
                .map(|l| AttentionBlock::new(store, &format!("{name}.block{l}"), dim, heads, rng))
                .collect(),
        }
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var, mask: &AttnMask) -> Var {
        for b in &self.blocks {
            x = b.forward(g, x, mask);
        }
        x
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }
}

/// Tape-free row evaluation for cached inference. Values match the graph
/// forward up to summation order.
impl Linear {
    pub fn apply(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let w = store.get(self.weight);
        let mut out = match self.bias {
            Some(b) => store.get(b).data().to_vec(),
            None => alloc::vec![0.0; self.out_dim],
        };
        for (i, xi) in x.iter().enumerate() {
            if *xi == 0.0 {
                continue;
            }
            for (o, wv) in out.iter_mut().zip(w.row(i)) {
                *o += xi * wv;
            }
        }
        out
    }
}

impl LayerNorm {
    pub fn apply(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is = 1.0 / (var + crate::graph::LN_EPS).sqrt();
        let (g, b) = (store.get(self.gain).data(), store.get(self.bias).data());
        x.iter().zip(g).zip(b).map(|((v, gg), bb)| (v - mean) * is * gg + bb).collect()
    }
}

impl Mlp {
    pub fn apply(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = self.up.apply(store, x).into_iter().map(crate::graph::gelu).collect();
        self.down.apply(store, &h)
    }
}

/// Keys and values of every processed row, per block.
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    pub keys: Vec<Vec<Vec<f64>>>,
    pub values: Vec<Vec<Vec<f64>>>,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, |k| k.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Transformer {
    /// Runs one new row through a causal stack, appending to `cache`.
    pub fn step(&self, store: &ParamStore, cache: &mut KvCache, x: &[f64]) -> Vec<f64> {
        if cache.keys.len() < self.blocks.len() {
            cache.keys.resize(self.blocks.len(), Vec::new());
            cache.values.resize(self.blocks.len(), Vec::new());
        }
        let mut x = x.to_vec();
        for (l, b) in self.blocks.iter().enumerate() {
            let h = b.norm1.apply(store, &x);
            let q = b.query.apply(store, &h);
            cache.keys[l].push(b.key.apply(store, &h));
            cache.values[l].push(b.value.apply(store, &h));
            let (keys, values) = (&cache.keys[l], &cache.values[l]);
            let d = q.len();
            let dh = d / b.heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let mut att = alloc::vec![0.0; d];
            for hd in 0..b.heads {
                let r = hd * dh..(hd + 1) * dh;
                let mut p: Vec<f64> = keys.iter().map(|k| scale * crate::tensor::dot(&q[r.clone()], &k[r.clone()])).collect();
                let m = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for s in p.iter_mut() {
                    *s = (*s - m).exp();
                    z += *s;
                }
                for (pj, v) in p.iter().zip(values) {
                    for (o, vv) in att[r.clone()].iter_mut().zip(&v[r.clone()]) {
                        *o += pj / z * vv;
                    }
                }
            }
            let a = b.out.apply(store, &att);
            for (xx, aa) in x.iter_mut().zip(&a) {
                *xx += aa;
            }
            let h = b.norm2.apply(store, &x);
            let m = b.mlp.apply(store, &h);
            for (xx, mm) in x.iter_mut().zip(&m) {
                *xx += mm;
            }
        }
        x
    }
}

/// Sinusoidal position code for a (possibly fractional) position.
pub fn sinusoidal_row(position: f64, dim: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), dim);
    for i in 0..dim / 2 {
        let freq = 1.0 / 10_000f64.powf(2.0 * i as f64 / dim as f64);
        out[2 * i] = (position * freq).sin();
        out[2 * i + 1] = (position * freq).cos();
    }
    if dim % 2 == 1 {
        out[dim - 1] = 0.0;
    }
}

/// Position codes for `positions`, one row each.
pub fn sinusoidal(positions: impl IntoIterator<Item = f64>, dim: usize) -> Tensor {
    let positions: Vec<f64> = positions.into_iter().collect();
    let mut t = Tensor::zeros(positions.len(), dim);
    for (r, p) in positions.iter().enumerate() {
        sinusoidal_row(*p, dim, t.row_mut(r));
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoid_is_bounded_and_distinct() {
        let pe = sinusoidal([0.0, 1.0, 2.0], 8);
        assert_eq!(pe.get(0, 1), 1.0);
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
        assert_ne!(pe.row(1), pe.row(2));
    }

    #[test]
    fn causal_block_output_prefix_is_stable() {
        let mut rng = crate::seeded(1);
        let mut store = ParamStore::new();
        let block = AttentionBlock::new(&mut store, "b", 8, 2, &mut rng);
        let x = Tensor::randn(6, 8, 1.0, &mut rng);
        let mut y = x.clone();
        for c in 0..8 {
            y.set(5, c, 3.0);
        }
        let mask = AttnMask::causal(None);
        let run = |t: Tensor| {
            let mut g = Graph::new(&store);
            let v = g.constant(t);
            let o = block.forward(&mut g, v, &mask);
            g.value(o).clone()
        };
        let (a, b) = (run(x), run(y));
        assert_eq!(a.slice_rows(0, 5), b.slice_rows(0, 5));
    }

    #[test]
    fn cached_steps_match_graph_forward() {
        let mut rng = crate::seeded(7);
        let mut store = ParamStore::new();
        let t = Transformer::new(&mut store, "t", 2, 8, 2, &mut rng);
        let x = Tensor::randn(6, 8, 1.0, &mut rng);
        let mut g = Graph::new(&store);
        let xv = g.constant(x.clone());
        let y = t.forward(&mut g, xv, &AttnMask::causal(None));
        let full = g.value(y).clone();
        let mut cache = KvCache::default();
        for r in 0..6 {
            let row = t.step(&store, &mut cache, x.row(r));
            for (a, b) in row.iter().zip(full.row(r)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
        assert_eq!(cache.len(), 6);
    }
}
