//! Alignment objectives over the generator policy: group-relative policy
//! optimization with a KL penalty, direct preference optimization, the
//! composite reward and best-of-N preference pairs.
//!
//! Objectives are computed outside the tape from per-token log-probs; their
//! gradients re-enter the tape through an external node.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::audio::AudioTokens;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::graph::{Graph, ParamStore};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;
use crate::tokenizer::TokenGrid;
use crate::Rng;

pub const GRPO_BETA: f64 = 0.01;
pub const GROUP_SIZE: usize = 30;
/// Floor on the group reward standard deviation.
pub const STD_EPS: f64 = 1e-8;
pub const DPO_BETA: f64 = 0.1;
pub const BEST_OF_N: usize = 8;
/// Minimum composite-reward gap for a preference pair.
pub const PREFERENCE_GAP: f64 = 0.05;

fn check_finite(xs: &[f64], what: &str) -> Result<()> {
    if xs.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numerical(alloc::format!("{what} log-probs")))
    }
}

// ---------------------------------------------------------------------------
// GRPO

/// Sampled rollouts for one prompt with per-token log-probs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    /// Per rollout, per token, under the sampling policy.
    pub old_log_probs: Vec<Vec<f64>>,
    /// Same tokens under the frozen reference policy.
    pub ref_log_probs: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
}

impl RolloutGroup {
    pub fn validate(&self) -> Result<()> {
        let g = self.rewards.len();
        if g < 2 {
            return Err(Error::config("a group needs at least two rollouts"));
        }
        if self.old_log_probs.len() != g || self.ref_log_probs.len() != g {
            return Err(Error::dim("one log-prob row per rollout"));
        }
        for (o, r) in self.old_log_probs.iter().zip(&self.ref_log_probs) {
            if o.len() != r.len() || o.is_empty() {
                return Err(Error::dim("old and reference log-probs must cover the same tokens"));
            }
            check_finite(o, "old")?;
            check_finite(r, "reference")?;
        }
        if !self.rewards.iter().all(|r| r.is_finite()) {
            return Err(Error::numerical("rewards"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoOutput {
    pub loss: f64,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub mean_ratio: f64,
    /// Per-token k3 estimate of KL(π_θ ‖ π_ref), averaged per rollout then over the group.
    pub kl: f64,
    pub advantages: Vec<f64>,
    /// d loss / d (current per-token log-prob).
    pub grad: Vec<Vec<f64>>,
}

/// Group-normalized advantages `(r - μ) / max(σ, ε)` with population σ.
pub fn group_advantages(rewards: &[f64]) -> (Vec<f64>, f64, f64) {
    let n = rewards.len().max(1) as f64;
    let mu = rewards.iter().sum::<f64>() / n;
    let sigma = (rewards.iter().map(|r| (r - mu) * (r - mu)).sum::<f64>() / n).sqrt();
    let denom = sigma.max(STD_EPS);
    (rewards.iter().map(|r| (r - mu) / denom).collect(), mu, sigma)
}

/// `L = -(1/G) Σ ρ_i Â_i + β KL̂` with the sequence-level ratio
/// `ρ_i = exp(Σ_t (log π_θ - log π_old))` and no clipping.
pub fn grpo_loss(group: &RolloutGroup, new_log_probs: &[Vec<f64>], beta: f64) -> Result<GrpoOutput> {
    group.validate()?;
    let g = group.rewards.len();
    if new_log_probs.len() != g {
        return Err(Error::dim("one current log-prob row per rollout"));
    }
    let (adv, mu, sigma) = group_advantages(&group.rewards);
    let mut policy = 0.0;
    let mut kl = 0.0;
    let mut ratio_sum = 0.0;
    let mut grad = Vec::with_capacity(g);
    for i in 0..g {
        let new = &new_log_probs[i];
        let old = &group.old_log_probs[i];
        let reference = &group.ref_log_probs[i];
        if new.len() != old.len() {
            return Err(Error::dim("current log-probs must cover the sampled tokens"));
        }
        check_finite(new, "current")?;
        let log_ratio: f64 = new.iter().zip(old).map(|(a, b)| a - b).sum();
        let ratio = log_ratio.exp();
        ratio_sum += ratio;
        policy += ratio * adv[i];
        let t = new.len() as f64;
        let mut row = Vec::with_capacity(new.len());
        let mut k = 0.0;
        for (lp, lr) in new.iter().zip(reference) {
            let r = (lr - lp).exp();
            k += r - 1.0 - (lr - lp);
            // d/d lp of (r - 1 - (lr - lp)) = 1 - r
            row.push(-ratio * adv[i] / g as f64 + beta * (1.0 - r) / (t * g as f64));
        }
        kl += k / t;
        grad.push(row);
    }
    let kl = kl / g as f64;
    let loss = -policy / g as f64 + beta * kl;
    if !loss.is_finite() {
        return Err(Error::numerical("grpo loss"));
    }
    Ok(GrpoOutput {
        loss,
        mean_reward: mu,
        std_reward: sigma,
        mean_ratio: ratio_sum / g as f64,
        kl,
        advantages: adv,
        grad,
    })
}

// ---------------------------------------------------------------------------
// DPO

/// Sequence log-probs (sums over tokens) of the winner and loser under the
/// policy and the reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreferenceLogProbs {
    pub winner: f64,
    pub winner_ref: f64,
    pub loser: f64,
    pub loser_ref: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpoOutput {
    pub loss: f64,
    /// `β (log-ratio_w - log-ratio_l)`.
    pub margin: f64,
    pub grad_winner: f64,
    pub grad_loser: f64,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-log σ(z)` computed without overflow.
fn neg_log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

pub fn dpo_loss(p: &PreferenceLogProbs, beta: f64) -> Result<DpoOutput> {
    check_finite(&[p.winner, p.winner_ref, p.loser, p.loser_ref], "preference")?;
    let z = beta * ((p.winner - p.winner_ref) - (p.loser - p.loser_ref));
    let s = sigmoid(-z);
    Ok(DpoOutput {
        loss: neg_log_sigmoid(z),
        margin: z,
        grad_winner: -beta * s,
        grad_loser: beta * s,
    })
}

// ---------------------------------------------------------------------------
// Rewards and pairs

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardWeights {
    pub quality: f64,
    pub alignment: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            quality: 0.5,
            alignment: 0.5,
        }
    }
}

pub fn composite_reward(quality: f64, alignment: f64, w: RewardWeights) -> f64 {
    w.quality * quality + w.alignment * alignment
}

/// `(best, worst)` candidate indices, or `None` when the score gap is below
/// `min_gap`. Ties resolve to the lowest index.
pub fn best_worst(scores: &[f64], min_gap: f64) -> Option<(usize, usize)> {
    if scores.len() < 2 {
        return None;
    }
    let mut best = 0;
    let mut worst = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
        if s < scores[worst] {
            worst = i;
        }
    }
    (best != worst && scores[best] - scores[worst] >= min_gap).then_some((best, worst))
}

/// A chosen and a rejected continuation of one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub prompt: AudioTokens,
    pub winner: TokenGrid,
    pub loser: TokenGrid,
    pub gap: f64,
}

// ---------------------------------------------------------------------------
// Generator policy

/// Samples one rollout of `prompt` from scratch at temperature 1.
pub fn rollout(gen: &Generator, prompt: &AudioTokens, seed: u64) -> Result<TokenGrid> {
    let mut session = gen.session(None, 1.0, 0, seed);
    gen.generate(&mut session, prompt)
}

fn token_log_probs(gen: &Generator, windows: &[(AudioTokens, TokenGrid)]) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new(&gen.store);
    let (col, owner) = gen.motion_log_probs(&mut g, windows)?;
    Ok(split_by_owner(g.value(col).data(), &owner, windows.len()))
}

fn split_by_owner(values: &[f64], owner: &[usize], n: usize) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new(); n];
    for (v, &o) in values.iter().zip(owner) {
        out[o].push(*v);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    pub group_size: usize,
    pub grpo_beta: f64,
    pub dpo_beta: f64,
    pub candidates: usize,
    pub min_gap: f64,
    pub lr: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            group_size: GROUP_SIZE,
            grpo_beta: GRPO_BETA,
            dpo_beta: DPO_BETA,
            candidates: BEST_OF_N,
            min_gap: PREFERENCE_GAP,
            lr: 1e-3,
        }
    }
}

/// One optimizer step's summary (one CSV row).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignStep {
    pub loss: f64,
    pub mean_reward: f64,
    pub kl: f64,
}

pub struct AlignTrainer {
    pub config: AlignConfig,
    pub adam: Adam,
}

impl AlignTrainer {
    pub fn new(config: AlignConfig) -> Self {
        Self {
            config,
            adam: Adam::new(AdamConfig::default().with_lr(config.lr)),
        }
    }

    /// One GRPO step: a group of rollouts per prompt, rewards from `reward`,
    /// a single policy update (so π_old is the pre-step policy).
    pub fn grpo_step(
        &mut self,
        gen: &mut Generator,
        reference: &Generator,
        prompts: &[AudioTokens],
        reward: &mut dyn FnMut(&AudioTokens, &TokenGrid) -> Result<f64>,
        rng: &mut Rng,
    ) -> Result<AlignStep> {
        let gsize = self.config.group_size;
        if gsize < 2 {
            return Err(Error::config("group size must be at least 2"));
        }
        let mut windows = Vec::new();
        let mut rewards = Vec::new();
        for p in prompts {
            for _ in 0..gsize {
                let y = rollout(gen, p, rng.gen())?;
                rewards.push(reward(p, &y)?);
                windows.push((p.clone(), y));
            }
        }
        if windows.is_empty() {
            return Err(Error::config("no prompts"));
        }
        let refs = token_log_probs(reference, &windows)?;
        let (grads, step) = {
            let mut g = Graph::new(&gen.store);
            let (col, owner) = gen.motion_log_probs(&mut g, &windows)?;
            let current = split_by_owner(g.value(col).data(), &owner, windows.len());
            let mut grad_rows = vec![Vec::new(); windows.len()];
            let mut loss = 0.0;
            let mut kl = 0.0;
            for (k, chunk) in (0..windows.len()).collect::<Vec<_>>().chunks(gsize).enumerate() {
                let group = RolloutGroup {
                    old_log_probs: chunk.iter().map(|&i| current[i].clone()).collect(),
                    ref_log_probs: chunk.iter().map(|&i| refs[i].clone()).collect(),
                    rewards: chunk.iter().map(|&i| rewards[i]).collect(),
                };
                let new: Vec<Vec<f64>> = group.old_log_probs.clone();
                let out = grpo_loss(&group, &new, self.config.grpo_beta)?;
                loss += out.loss;
                kl += out.kl;
                for (j, &i) in chunk.iter().enumerate() {
                    grad_rows[i] = out.grad[j].clone();
                }
                let _ = k;
            }
            let groups = prompts.len() as f64;
            // Scatter per-token gradients back into column order.
            let mut cursor = vec![0usize; windows.len()];
            let grad: Vec<f64> = owner
                .iter()
                .map(|&o| {
                    let v = grad_rows[o][cursor[o]] / groups;
                    cursor[o] += 1;
                    v
                })
                .collect();
            let n = grad.len();
            let ext = g.external(col, loss / groups, Tensor::from_vec(n, 1, grad));
            let mean_reward = rewards.iter().sum::<f64>() / rewards.len() as f64;
            (
                g.backward(ext),
                AlignStep {
                    loss: loss / groups,
                    mean_reward,
                    kl: kl / groups,
                },
            )
        };
        self.adam.step(&mut gen.store, &grads);
        Ok(step)
    }

    /// Best-of-N pairs: `candidates` rollouts per prompt ranked by `reward`.
    pub fn build_preference_pairs(
        &self,
        gen: &Generator,
        prompts: &[AudioTokens],
        reward: &mut dyn FnMut(&AudioTokens, &TokenGrid) -> Result<f64>,
        rng: &mut Rng,
    ) -> Result<Vec<PreferencePair>> {
        if self.config.candidates < 2 {
            return Err(Error::config("best-of-N needs at least two candidates"));
        }
        let mut pairs = Vec::new();
        for p in prompts {
            let mut cands = Vec::with_capacity(self.config.candidates);
            let mut scores = Vec::with_capacity(self.config.candidates);
            for _ in 0..self.config.candidates {
                let y = rollout(gen, p, rng.gen())?;
                scores.push(reward(p, &y)?);
                cands.push(y);
            }
            if let Some((b, w)) = best_worst(&scores, self.config.min_gap) {
                if cands[b] != cands[w] {
                    pairs.push(PreferencePair {
                        prompt: p.clone(),
                        winner: cands[b].clone(),
                        loser: cands[w].clone(),
                        gap: scores[b] - scores[w],
                    });
                }
            }
        }
        Ok(pairs)
    }

    /// One DPO step over `pairs`; returns the mean loss (KL column reports
    /// the mean policy-vs-reference log-ratio of the winners).
    pub fn dpo_step(&mut self, gen: &mut Generator, reference: &Generator, pairs: &[PreferencePair]) -> Result<AlignStep> {
        if pairs.is_empty() {
            return Err(Error::config("no preference pairs"));
        }
        let windows: Vec<(AudioTokens, TokenGrid)> = pairs
            .iter()
            .flat_map(|p| [(p.prompt.clone(), p.winner.clone()), (p.prompt.clone(), p.loser.clone())])
            .collect();
        let refs = token_log_probs(reference, &windows)?;
        let (grads, step) = {
            let mut g = Graph::new(&gen.store);
            let (col, owner) = gen.motion_log_probs(&mut g, &windows)?;
            let cur = split_by_owner(g.value(col).data(), &owner, windows.len());
            let n = pairs.len() as f64;
            let mut seq_grad = vec![0.0; windows.len()];
            let mut loss = 0.0;
            let mut drift = 0.0;
            for k in 0..pairs.len() {
                let lp = PreferenceLogProbs {
                    winner: cur[2 * k].iter().sum(),
                    winner_ref: refs[2 * k].iter().sum(),
                    loser: cur[2 * k + 1].iter().sum(),
                    loser_ref: refs[2 * k + 1].iter().sum(),
                };
                let out = dpo_loss(&lp, self.config.dpo_beta)?;
                loss += out.loss / n;
                drift += (lp.winner - lp.winner_ref) / n;
                seq_grad[2 * k] = out.grad_winner / n;
                seq_grad[2 * k + 1] = out.grad_loser / n;
            }
            let grad: Vec<f64> = owner.iter().map(|&o| seq_grad[o]).collect();
            let m = grad.len();
            let ext = g.external(col, loss, Tensor::from_vec(m, 1, grad));
            (
                g.backward(ext),
                AlignStep {
                    loss,
                    mean_reward: pairs.iter().map(|p| p.gap).sum::<f64>() / n,
                    kl: drift,
                },
            )
        };
        self.adam.step(&mut gen.store, &grads);
        Ok(step)
    }
}

/// Mean per-token k3 divergence of `gen` from `reference` on fresh rollouts.
pub fn divergence(gen: &Generator, reference: &Generator, prompts: &[AudioTokens], rollouts: usize, rng: &mut Rng) -> Result<f64> {
    let mut windows = Vec::new();
    for p in prompts {
        for _ in 0..rollouts {
            windows.push((p.clone(), rollout(gen, p, rng.gen())?));
        }
    }
    let cur = token_log_probs(gen, &windows)?;
    let refs = token_log_probs(reference, &windows)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (c, r) in cur.iter().zip(&refs) {
        for (lp, lr) in c.iter().zip(r) {
            total += (lr - lp).exp() - 1.0 - (lr - lp);
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

// ---------------------------------------------------------------------------
// Bandit toy

/// Softmax policy over `arms` actions per prompt with fixed per-arm quality
/// and alignment scores.
pub struct Bandit {
    pub store: ParamStore,
    pub quality: Tensor,
    pub alignment: Tensor,
    pub weights: RewardWeights,
}

impl Bandit {
    pub fn random(prompts: usize, arms: usize, rng: &mut Rng) -> Self {
        let mut store = ParamStore::new();
        store.add("logits", Tensor::randn(prompts, arms, 0.5, rng));
        Self {
            store,
            quality: Tensor::uniform(prompts, arms, 0.5, rng).map(|v| v + 0.5),
            alignment: Tensor::uniform(prompts, arms, 1.0, rng),
            weights: RewardWeights::default(),
        }
    }

    pub fn logits(&self) -> &Tensor {
        self.store.get(crate::graph::ParamId(0))
    }

    pub fn probs(&self, prompt: usize) -> Vec<f64> {
        let row = self.logits().row(prompt);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.iter().map(|v| v / z).collect()
    }

    pub fn reward(&self, prompt: usize, arm: usize) -> f64 {
        composite_reward(self.quality.get(prompt, arm), self.alignment.get(prompt, arm), self.weights)
    }

    /// Exact expected composite reward, averaged over prompts.
    pub fn expected_reward(&self) -> f64 {
        let p = self.logits().rows();
        (0..p)
            .map(|i| self.probs(i).iter().enumerate().map(|(a, pr)| pr * self.reward(i, a)).sum::<f64>())
            .sum::<f64>()
            / p as f64
    }

    /// Exact KL(π ‖ π_ref), averaged over prompts.
    pub fn kl_to(&self, reference: &Bandit) -> f64 {
        let p = self.logits().rows();
        (0..p)
            .map(|i| {
                let a = self.probs(i);
                let b = reference.probs(i);
                a.iter().zip(&b).map(|(x, y)| if *x > 0.0 { x * (x / y).ln() } else { 0.0 }).sum::<f64>()
            })
            .sum::<f64>()
            / p as f64
    }

    fn sample(&self, prompt: usize, rng: &mut Rng) -> usize {
        let p = self.probs(prompt);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (a, pr) in p.iter().enumerate() {
            acc += pr;
            if u < acc {
                return a;
            }
        }
        p.len() - 1
    }

    fn log_prob(&self, prompt: usize, arm: usize) -> f64 {
        self.probs(prompt)[arm].ln()
    }

    /// One GRPO step with plain gradient descent at rate `lr`.
    pub fn grpo_step(&mut self, reference: &Bandit, group: usize, beta: f64, lr: f64, rng: &mut Rng) -> Result<GrpoOutput> {
        let (p, k) = self.logits().shape();
        let mut grad = Tensor::zeros(p, k);
        let mut last = None;
        for i in 0..p {
            let arms: Vec<usize> = (0..group).map(|_| self.sample(i, rng)).collect();
            let lp: Vec<Vec<f64>> = arms.iter().map(|&a| vec![self.log_prob(i, a)]).collect();
            let g = RolloutGroup {
                old_log_probs: lp.clone(),
                ref_log_probs: arms.iter().map(|&a| vec![reference.log_prob(i, a)]).collect(),
                rewards: arms.iter().map(|&a| self.reward(i, a)).collect(),
            };
            let out = grpo_loss(&g, &lp, beta)?;
            // d log π(a) / d logits = onehot(a) - π
            let probs = self.probs(i);
            for (j, &a) in arms.iter().enumerate() {
                let d = out.grad[j][0];
                for (c, pr) in probs.iter().enumerate() {
                    let ind = if c == a { 1.0 } else { 0.0 };
                    grad.set(i, c, grad.get(i, c) + d * (ind - pr));
                }
            }
            last = Some(out);
        }
        let logits = self.store.get_mut(crate::graph::ParamId(0));
        for (v, g) in logits.data_mut().iter_mut().zip(grad.data()) {
            *v -= lr * g;
        }
        last.ok_or_else(|| Error::config("bandit has no prompts"))
    }

    pub fn snapshot(&self) -> Bandit {
        Bandit {
            store: self.store.clone(),
            quality: self.quality.clone(),
            alignment: self.alignment.clone(),
            weights: self.weights,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn group(rewards: Vec<f64>) -> RolloutGroup {
        let n = rewards.len();
        RolloutGroup {
            old_log_probs: vec![vec![-1.0, -2.0]; n],
            ref_log_probs: vec![vec![-1.0, -2.0]; n],
            rewards,
        }
    }

    #[test]
    fn grpo_hand_values() {
        let g = group(vec![0.4; 5]);
        let out = grpo_loss(&g, &g.old_log_probs, GRPO_BETA).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.advantages.iter().all(|a| *a == 0.0));

        let g = group(vec![0.0, 1.0]);
        let out = grpo_loss(&g, &g.old_log_probs, GRPO_BETA).unwrap();
        assert_eq!(out.advantages, vec![-1.0, 1.0]);
        assert_eq!((out.mean_reward, out.std_reward), (0.5, 0.5));
        assert_eq!(out.loss, 0.0);
        assert_eq!(out.mean_ratio, 1.0);
        assert!(group(vec![1.0]).validate().is_err());
    }

    #[test]
    fn grpo_equal_rewards_leave_only_the_kl_term() {
        let mut g = group(vec![0.3; 3]);
        g.ref_log_probs = vec![vec![-1.5, -1.0]; 3];
        let out = grpo_loss(&g, &g.old_log_probs, 0.5).unwrap();
        assert!(out.kl > 0.0);
        assert!((out.loss - 0.5 * out.kl).abs() < 1e-15);
    }

    #[test]
    fn grpo_gradient_matches_finite_differences() {
        let mut g = group(vec![0.1, 0.7, 0.4]);
        g.ref_log_probs = vec![vec![-0.5, -2.5]; 3];
        let new = vec![vec![-1.1, -1.9], vec![-0.8, -2.2], vec![-1.0, -2.05]];
        let out = grpo_loss(&g, &new, 0.3).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            for t in 0..2 {
                let mut p = new.clone();
                p[i][t] += h;
                let mut m = new.clone();
                m[i][t] -= h;
                let fd = (grpo_loss(&g, &p, 0.3).unwrap().loss - grpo_loss(&g, &m, 0.3).unwrap().loss) / (2.0 * h);
                assert!((fd - out.grad[i][t]).abs() < 1e-7, "{fd} vs {}", out.grad[i][t]);
            }
        }
    }

    #[test]
    fn dpo_hand_values() {
        let same = PreferenceLogProbs {
            winner: -3.0,
            winner_ref: -3.0,
            loser: -5.0,
            loser_ref: -5.0,
        };
        assert!((dpo_loss(&same, DPO_BETA).unwrap().loss - core::f64::consts::LN_2).abs() < 1e-12);
        let margin = PreferenceLogProbs {
            winner: 1.0,
            winner_ref: 0.0,
            loser: -1.0,
            loser_ref: 0.0,
        };
        let out = dpo_loss(&margin, DPO_BETA).unwrap();
        assert!((out.loss - 0.5981).abs() < 1e-4);
        assert!((out.loss + sigmoid(0.2).ln()).abs() < 1e-12);
        assert!(out.grad_winner < 0.0 && out.grad_loser > 0.0);
        let bad = PreferenceLogProbs { winner: f64::NAN, ..same };
        assert!(matches!(dpo_loss(&bad, DPO_BETA), Err(Error::Numerical(_))));
    }

    #[test]
    fn dpo_step_on_a_one_parameter_policy_moves_the_right_way() {
        // π(y = 1) = σ(θ); winner y = 1, loser y = 0; reference θ = 0.
        let lp = |theta: f64, y: bool| if y { sigmoid(theta).ln() } else { sigmoid(-theta).ln() };
        let theta = 0.0;
        let p = PreferenceLogProbs {
            winner: lp(theta, true),
            winner_ref: lp(0.0, true),
            loser: lp(theta, false),
            loser_ref: lp(0.0, false),
        };
        let out = dpo_loss(&p, DPO_BETA).unwrap();
        // d logp_w / dθ = 1 - σ(θ), d logp_l / dθ = -σ(θ)
        let d = out.grad_winner * (1.0 - sigmoid(theta)) + out.grad_loser * (-sigmoid(theta));
        let next = theta - 1.0 * d;
        assert!(lp(next, true) > lp(theta, true));
        assert!(lp(next, false) < lp(theta, false));
    }

    #[test]
    fn composite_and_pairs() {
        let w = RewardWeights::default();
        assert_eq!(composite_reward(1.0, 1.0, w), 1.0);
        assert_eq!(composite_reward(0.88, 0.0, RewardWeights { quality: 1.0, alignment: 0.0 }), 0.88);
        assert!((composite_reward(0.5, 0.2, RewardWeights { quality: 0.3, alignment: 0.7 }) - 0.29).abs() < 1e-12);
        assert_eq!(best_worst(&[0.2, 0.9, 0.5], PREFERENCE_GAP), Some((1, 0)));
        assert_eq!(best_worst(&[0.5, 0.5], PREFERENCE_GAP), None);
        assert_eq!(best_worst(&[0.5, 0.53], PREFERENCE_GAP), None);
        assert_eq!(AlignConfig::default().candidates, 8);
        assert_eq!((GRPO_BETA, GROUP_SIZE), (0.01, 30));
    }

    #[test]
    fn one_grpo_step_raises_expected_bandit_reward() {
        let mut gain = 0.0;
        for seed in 0..5 {
            let mut rng = crate::seeded(seed);
            let mut b = Bandit::random(4, 6, &mut rng);
            let reference = b.snapshot();
            let before = b.expected_reward();
            b.grpo_step(&reference, GROUP_SIZE, GRPO_BETA, 0.5, &mut rng).unwrap();
            gain += b.expected_reward() - before;
            assert!(b.kl_to(&reference) > 0.0);
        }
        assert!(gain / 5.0 > 0.0, "{gain}");
    }

    #[test]
    fn generator_grpo_and_dpo_steps_run() {
        use crate::generator::GeneratorConfig;
        let cfg = GeneratorConfig {
            window_chunks: 2,
            audio_size: 8,
            audio_frames_per_chunk: 2,
            motion_layers: 2,
            parts: 1,
            codebook_size: 4,
            layers: 1,
            heads: 2,
            width: 8,
            ..Default::default()
        };
        let mut rng = crate::seeded(7);
        let mut gen = Generator::new(cfg.clone(), &mut rng).unwrap();
        let reference = Generator::new(cfg.clone(), &mut crate::seeded(7)).unwrap();
        let mut prompt = AudioTokens::empty(cfg.audio_layers, cfg.audio_size);
        prompt.ids = vec![1; 2 * cfg.audio_frames_per_chunk * cfg.audio_layers];
        // Reward: fraction of zero ids.
        let mut reward = |_: &AudioTokens, y: &TokenGrid| Ok(y.indices.iter().filter(|&&v| v == 0).count() as f64 / y.indices.len() as f64);
        let mut al = AlignTrainer::new(AlignConfig {
            group_size: 6,
            lr: 0.05,
            ..Default::default()
        });
        let s = al.grpo_step(&mut gen, &reference, &[prompt.clone()], &mut reward, &mut rng).unwrap();
        assert!(s.loss.is_finite() && s.kl.abs() < 1e-12);
        assert!(divergence(&gen, &reference, &[prompt.clone()], 4, &mut rng).unwrap() > 0.0);
        let pairs = al.build_preference_pairs(&gen, &[prompt.clone(), prompt], &mut reward, &mut rng).unwrap();
        if !pairs.is_empty() {
            let s = al.dpo_step(&mut gen, &reference, &pairs).unwrap();
            assert!(s.loss.is_finite());
        }
    }

    proptest! {
        #[test]
        fn grpo_is_affine_reward_invariant(
            rewards in proptest::collection::vec(-5.0f64..5.0, 2..12),
            a in 0.1f64..10.0,
            b in -10.0f64..10.0,
            shift in -0.3f64..0.3,
        ) {
            let n = rewards.len();
            let mut g = group(rewards.clone());
            g.ref_log_probs = vec![vec![-1.2, -1.7]; n];
            let new: Vec<Vec<f64>> = (0..n).map(|i| vec![-1.0 + shift * i as f64 / n as f64, -2.0]).collect();
            let base = grpo_loss(&g, &new, GRPO_BETA).unwrap();
            g.rewards = rewards.iter().map(|r| a * r + b).collect();
            let moved = grpo_loss(&g, &new, GRPO_BETA).unwrap();
            prop_assert!((base.loss - moved.loss).abs() < 1e-9);
            for (x, y) in base.advantages.iter().zip(&moved.advantages) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn dpo_at_reference_is_ln2(w in -50.0f64..0.0, l in -50.0f64..0.0, beta in 0.01f64..2.0) {
            let p = PreferenceLogProbs { winner: w, winner_ref: w, loser: l, loser_ref: l };
            prop_assert!((dpo_loss(&p, beta).unwrap().loss - core::f64::consts::LN_2).abs() < 1e-9);
        }
    }
}
