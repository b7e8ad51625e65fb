//! Cross-road harness: a tiny conditional next-token model trained on
//! sequences where several trajectories share one history.
//!
//! A sequence is `[BOS, cond, hub, x_1 .. x_L]`. The hub token names the shared
//! history; hub `m < K` continues into path `k` with probability
//! `π[(k + m) mod K]`, and the last hub is a uniform cross-road. The condition
//! token names the true path with probability `α`, a random path otherwise,
//! and is dropped to NULL with probability `cond_dropout`. Path tokens are
//! distinct per (path, step). Corruption resamples hub and path inputs within
//! their own group; targets stay clean.
//!
//! Probes, all read from exact model probabilities:
//! - context logits: NULL condition, clean hub, logits of the K first-step
//!   tokens, regressed against log π (slope);
//! - uniform floor: same at the uniform hub, spread and mean log-probability;
//! - recovery: at the uniform hub with condition k, probability that the
//!   final path token belongs to k, summed over all rollouts.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AttnMask, Graph, ParamStore};
use crate::nn::{Embedding, LayerNorm, Linear, Transformer};
use crate::optim::{Adam, AdamConfig};
use crate::Rng;

const BOS: usize = 0;
const NULL: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrossroadWorld {
    /// Path probabilities at the first hub; later hubs rotate them.
    pub path_probs: Vec<f64>,
    /// Path tokens after the branch.
    pub path_len: usize,
    pub cond_dropout: f64,
    /// Probability that a kept condition names the true path.
    pub cond_accuracy: f64,
}

impl Default for CrossroadWorld {
    fn default() -> Self {
        Self {
            path_probs: vec![0.1, 0.2, 0.3, 0.4],
            path_len: 3,
            cond_dropout: 0.5,
            cond_accuracy: 0.5,
        }
    }
}

impl CrossroadWorld {
    pub fn paths(&self) -> usize {
        self.path_probs.len()
    }

    /// Rotated hubs plus the uniform one.
    pub fn hubs(&self) -> usize {
        self.paths() + 1
    }

    pub fn vocab(&self) -> usize {
        2 + self.paths() + self.hubs() + self.paths() * self.path_len
    }

    pub fn seq_len(&self) -> usize {
        3 + self.path_len
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.paths();
        if k < 2 {
            return Err(Error::config("cross-road needs at least two paths"));
        }
        if self.path_probs.iter().any(|p| !(*p > 0.0)) {
            return Err(Error::config("path probabilities must be positive"));
        }
        if (self.path_probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("path probabilities must sum to 1"));
        }
        if self.path_len == 0 {
            return Err(Error::config("path length must be positive"));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) || !(0.0..=1.0).contains(&self.cond_accuracy) {
            return Err(Error::config("condition rates must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn uniform_hub(&self) -> usize {
        self.paths()
    }

    /// Path distribution after hub `m`.
    pub fn hub_probs(&self, m: usize) -> Vec<f64> {
        let k = self.paths();
        if m == self.uniform_hub() {
            return vec![1.0 / k as f64; k];
        }
        (0..k).map(|i| self.path_probs[(i + m) % k]).collect()
    }

    fn cond_token(&self, k: usize) -> usize {
        2 + k
    }

    fn hub_token(&self, m: usize) -> usize {
        2 + self.paths() + m
    }

    pub fn path_token(&self, path: usize, step: usize) -> usize {
        2 + self.paths() + self.hubs() + step * self.paths() + path
    }

    fn sample_path(&self, m: usize, rng: &mut Rng) -> usize {
        let probs = self.hub_probs(m);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (k, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return k;
            }
        }
        probs.len() - 1
    }

    /// One clean sequence and its corrupted input copy.
    pub fn sample(&self, rho: f64, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
        let k = self.paths();
        let m = rng.gen_range(0..self.hubs());
        let path = self.sample_path(m, rng);
        let cond = if rng.gen_bool(self.cond_dropout) {
            NULL
        } else if rng.gen_bool(self.cond_accuracy) {
            self.cond_token(path)
        } else {
            self.cond_token(rng.gen_range(0..k))
        };
        let mut clean = vec![BOS, cond, self.hub_token(m)];
        clean.extend((0..self.path_len).map(|s| self.path_token(path, s)));
        let mut noisy = clean.clone();
        if rho > 0.0 {
            if rng.gen_bool(rho) {
                noisy[2] = self.hub_token(rng.gen_range(0..self.hubs()));
            }
            for s in 0..self.path_len {
                if rng.gen_bool(rho) {
                    noisy[3 + s] = self.path_token(rng.gen_range(0..k), s);
                }
            }
        }
        (clean, noisy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrossroadTraining {
    pub steps: usize,
    pub batch: usize,
    pub width: usize,
    pub heads: usize,
    pub lr: f64,
}

impl Default for CrossroadTraining {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 32,
            width: 32,
            heads: 2,
            lr: 1e-2,
        }
    }
}

/// One-layer causal attention model over the cross-road vocabulary.
pub struct CrossroadModel {
    pub store: ParamStore,
    embed: Embedding,
    pos: Embedding,
    body: Transformer,
    norm: LayerNorm,
    head: Linear,
}

impl CrossroadModel {
    pub fn new(world: &CrossroadWorld, cfg: &CrossroadTraining, rng: &mut Rng) -> Self {
        let mut store = ParamStore::new();
        let embed = Embedding::new(&mut store, "embed", world.vocab(), cfg.width, rng);
        let pos = Embedding::new(&mut store, "pos", world.seq_len(), cfg.width, rng);
        let body = Transformer::new(&mut store, "body", 1, cfg.width, cfg.heads, rng);
        let norm = LayerNorm::new(&mut store, "norm", cfg.width);
        let head = Linear::new(&mut store, "head", cfg.width, world.vocab(), rng);
        Self {
            store,
            embed,
            pos,
            body,
            norm,
            head,
        }
    }

    /// Log-probabilities for every row of a batch of equal-length inputs.
    fn forward<'a>(&self, g: &mut Graph<'a>, seqs: &[Vec<usize>]) -> crate::graph::Var {
        let len = seqs[0].len();
        let ids: Vec<usize> = seqs.iter().flatten().copied().collect();
        let positions: Vec<usize> = (0..seqs.len()).flat_map(|_| 0..len).collect();
        let x = self.embed.forward(g, &ids);
        let p = self.pos.forward(g, &positions);
        let x = g.add(x, p);
        let mask = AttnMask::causal(None).with_segments(vec![len; seqs.len()]);
        let h = self.body.forward(g, x, &mask);
        let h = self.norm.forward(g, h);
        let logits = self.head.forward(g, h);
        g.log_softmax(logits)
    }

    /// Log-probabilities at the last row of each sequence.
    pub fn last_log_probs(&self, seqs: &[Vec<usize>]) -> Vec<Vec<f64>> {
        let mut g = Graph::new(&self.store);
        let lp = self.forward(&mut g, seqs);
        let t = g.value(lp);
        let len = seqs[0].len();
        (0..seqs.len()).map(|i| t.row(i * len + len - 1).to_vec()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossroadReport {
    pub rho: f64,
    /// (π_k, centered context logit) for every rotated hub and path.
    pub points: Vec<(f64, f64)>,
    pub slope: f64,
    /// Max minus min context logit at the uniform hub.
    pub uniform_spread: f64,
    /// Mean log-probability of a path at the uniform hub.
    pub uniform_log_prob: f64,
    /// log(1/K).
    pub floor: f64,
    /// Probability of ending on the condition's path from the uniform hub.
    pub recovery: f64,
    pub final_loss: f64,
    pub converged: bool,
}

/// Trains one model and runs every probe.
pub fn crossroad_train_and_probe(world: &CrossroadWorld, rho: f64, cfg: &CrossroadTraining, seed: u64) -> Result<CrossroadReport> {
    world.validate()?;
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::config("corruption rate must lie in [0, 1]"));
    }
    let mut rng = crate::seeded(seed);
    let mut model = CrossroadModel::new(world, cfg, &mut rng);
    let mut adam = Adam::new(AdamConfig::default().with_lr(cfg.lr));
    let len = world.seq_len() - 1;
    let mut final_loss = f64::NAN;
    let mut converged = true;
    for step in 0..cfg.steps {
        // Linear decay sharpens the final fit.
        adam.config.lr = cfg.lr * (1.0 - step as f64 / cfg.steps as f64);
        let mut inputs = Vec::with_capacity(cfg.batch);
        let mut targets = Vec::with_capacity(cfg.batch * world.path_len);
        let mut rows = Vec::with_capacity(cfg.batch * world.path_len);
        for b in 0..cfg.batch {
            let (clean, noisy) = world.sample(rho, &mut rng);
            inputs.push(noisy[..len].to_vec());
            for s in 0..world.path_len {
                rows.push(b * len + 2 + s);
                targets.push(clean[3 + s]);
            }
        }
        let mut g = Graph::new(&model.store);
        let lp = model.forward(&mut g, &inputs);
        let sel = g.gather_rows(lp, rows);
        let picked = g.pick(sel, targets);
        let mean = g.mean(picked);
        let loss = g.scale(mean, -1.0);
        final_loss = g.value(loss).item();
        if !final_loss.is_finite() {
            converged = false;
            break;
        }
        let grads = g.backward(loss);
        drop(g);
        adam.step(&mut model.store, &grads);
    }
    let mut report = probe(world, &model, rho)?;
    report.final_loss = final_loss;
    report.converged = converged && model.store.all_finite();
    Ok(report)
}

fn path_logits(world: &CrossroadWorld, lp: &[f64], step: usize) -> Vec<f64> {
    (0..world.paths()).map(|k| lp[world.path_token(k, step)]).collect()
}

fn centered(v: &[f64]) -> Vec<f64> {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - m).collect()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Least-squares slope through centered data.
pub fn fit_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

pub fn probe(world: &CrossroadWorld, model: &CrossroadModel, rho: f64) -> Result<CrossroadReport> {
    let k = world.paths();
    // Context-only logits: NULL condition, every hub.
    let prompts: Vec<Vec<usize>> = (0..world.hubs()).map(|m| vec![BOS, NULL, world.hub_token(m)]).collect();
    let lps = model.last_log_probs(&prompts);
    let mut points = Vec::new();
    let mut regress = Vec::new();
    for m in 0..k {
        let logits = centered(&path_logits(world, &lps[m], 0));
        let probs = world.hub_probs(m);
        let logp = centered(&probs.iter().map(|p| p.ln()).collect::<Vec<_>>());
        for i in 0..k {
            points.push((probs[i], logits[i]));
            regress.push((logp[i], logits[i]));
        }
    }
    let uni = path_logits(world, &lps[world.uniform_hub()], 0);
    let spread = uni.iter().copied().fold(f64::NEG_INFINITY, f64::max) - uni.iter().copied().fold(f64::INFINITY, f64::min);
    let uniform_log_prob = uni.iter().sum::<f64>() / k as f64;

    // Recovery: exact rollout over the legal path tokens at each step.
    let mut recovery = 0.0;
    for c in 0..k {
        let mut frontier: Vec<(Vec<usize>, f64, usize)> = vec![(vec![BOS, world.cond_token(c), world.hub_token(world.uniform_hub())], 1.0, usize::MAX)];
        for step in 0..world.path_len {
            let seqs: Vec<Vec<usize>> = frontier.iter().map(|f| f.0.clone()).collect();
            let lps = model.last_log_probs(&seqs);
            let mut next = Vec::with_capacity(frontier.len() * k);
            for ((seq, w, _), lp) in frontier.iter().zip(&lps) {
                let p = softmax(&path_logits(world, lp, step));
                for (j, pj) in p.iter().enumerate() {
                    let mut s = seq.clone();
                    s.push(world.path_token(j, step));
                    next.push((s, w * pj, j));
                }
            }
            frontier = next;
        }
        recovery += frontier.iter().filter(|f| f.2 == c).map(|f| f.1).sum::<f64>();
    }
    recovery /= k as f64;
    let all_finite = points.iter().all(|p| p.1.is_finite()) && recovery.is_finite();
    Ok(CrossroadReport {
        rho,
        slope: fit_slope(&regress),
        points,
        uniform_spread: spread,
        uniform_log_prob,
        floor: (1.0 / k as f64).ln(),
        recovery,
        final_loss: f64::NAN,
        converged: all_finite,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn world_layout() {
        let w = CrossroadWorld::default();
        assert!(w.validate().is_ok());
        assert_eq!(w.hubs(), 5);
        assert_eq!(w.vocab(), 2 + 4 + 5 + 12);
        assert_eq!(w.hub_probs(1), vec![0.2, 0.3, 0.4, 0.1]);
        assert_eq!(w.hub_probs(4), vec![0.25; 4]);
        let mut bad = w.clone();
        bad.path_probs = vec![0.5, 0.6];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn clean_sampling_keeps_one_path() {
        let w = CrossroadWorld::default();
        let mut rng = crate::seeded(0);
        for _ in 0..100 {
            let (clean, noisy) = w.sample(0.0, &mut rng);
            assert_eq!(clean, noisy);
            let first = clean[3] - w.path_token(0, 0);
            for s in 0..w.path_len {
                assert_eq!(clean[3 + s], w.path_token(first, s));
            }
        }
    }

    #[test]
    fn slope_oracle() {
        let pts: Vec<(f64, f64)> = [1.0, 2.0, 3.0].iter().map(|&x| (x, 0.5 * x + 3.0)).collect();
        assert!((fit_slope(&pts) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn short_run_reports_finite_values() {
        let w = CrossroadWorld::default();
        let cfg = CrossroadTraining {
            steps: 20,
            ..Default::default()
        };
        let r = crossroad_train_and_probe(&w, 0.5, &cfg, 1).unwrap();
        assert!(r.converged);
        assert_eq!(r.points.len(), 16);
        assert!((0.0..=1.0).contains(&r.recovery));
        assert!((r.floor - 0.25f64.ln()).abs() < 1e-12);
    }
}
