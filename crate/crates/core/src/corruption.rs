//! Training-time token corruption.
//!
//! Uniform mode resamples every (step, layer, part) cell independently with
//! probability ρ. Hierarchical mode picks exactly ⌊ρ·T⌋ steps and, for each,
//! a cascade start layer q*; layers q ≥ q* of that step are resampled for
//! every part. Replacements are drawn from the full codebook range, so a
//! resampled cell keeps its old id with probability 1/K.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::TokenGrid;
use crate::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionMode {
    Uniform,
    Hierarchical,
}

impl CorruptionMode {
    pub fn name(self) -> &'static str {
        match self {
            CorruptionMode::Uniform => "uniform",
            CorruptionMode::Hierarchical => "hierarchical",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(CorruptionMode::Uniform),
            "hierarchical" => Ok(CorruptionMode::Hierarchical),
            _ => Err(Error::config(alloc::format!("unknown corruption mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub mode: CorruptionMode,
    pub rate: f64,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(mode: CorruptionMode, rate: f64, seed: u64) -> Result<Self> {
        let s = Self { mode, rate, seed };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::config("corruption rate must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Which cells were resampled, laid out like the grid indices.
pub type CorruptionMask = Vec<bool>;

fn random_id(grid: &TokenGrid, rng: &mut Rng) -> u16 {
    rng.gen_range(0..grid.codebook_size) as u16
}

/// Uniform corruption with an explicit RNG; returns the resampled mask.
pub fn corrupt_uniform_with(grid: &mut TokenGrid, rate: f64, rng: &mut Rng) -> CorruptionMask {
    let mut mask = vec![false; grid.indices.len()];
    if rate <= 0.0 {
        return mask;
    }
    for i in 0..grid.indices.len() {
        if rng.gen_bool(rate.min(1.0)) {
            grid.indices[i] = random_id(grid, rng);
            mask[i] = true;
        }
    }
    mask
}

/// Hierarchical corruption with an explicit RNG; returns the resampled mask.
pub fn corrupt_hierarchical_with(grid: &mut TokenGrid, rate: f64, rng: &mut Rng) -> CorruptionMask {
    let mut mask = vec![false; grid.indices.len()];
    let t = grid.steps;
    let count = ((rate.clamp(0.0, 1.0) * t as f64) + 1e-9).floor() as usize;
    if count == 0 || grid.layers == 0 {
        return mask;
    }
    let mut order: Vec<usize> = (0..t).collect();
    order.shuffle(rng);
    for &step in &order[..count.min(t)] {
        let start = rng.gen_range(0..grid.layers);
        for q in start..grid.layers {
            for p in 0..grid.parts {
                let o = grid.offset(step, q, p);
                grid.indices[o] = random_id(grid, rng);
                mask[o] = true;
            }
        }
    }
    mask
}

pub fn corrupt_uniform(grid: &TokenGrid, spec: &CorruptionSpec) -> Result<TokenGrid> {
    spec.validate()?;
    if spec.mode != CorruptionMode::Uniform {
        return Err(Error::config("corrupt_uniform needs uniform mode"));
    }
    let mut out = grid.clone();
    corrupt_uniform_with(&mut out, spec.rate, &mut crate::seeded(spec.seed));
    Ok(out)
}

pub fn corrupt_hierarchical(grid: &TokenGrid, spec: &CorruptionSpec) -> Result<TokenGrid> {
    spec.validate()?;
    if spec.mode != CorruptionMode::Hierarchical {
        return Err(Error::config("corrupt_hierarchical needs hierarchical mode"));
    }
    let mut out = grid.clone();
    corrupt_hierarchical_with(&mut out, spec.rate, &mut crate::seeded(spec.seed));
    Ok(out)
}

/// Dispatches on `spec.mode`.
pub fn corrupt(grid: &TokenGrid, spec: &CorruptionSpec) -> Result<TokenGrid> {
    match spec.mode {
        CorruptionMode::Uniform => corrupt_uniform(grid, spec),
        CorruptionMode::Hierarchical => corrupt_hierarchical(grid, spec),
    }
}

/// Same as [`corrupt`] with an explicit RNG, mask included.
pub fn corrupt_in_place(grid: &mut TokenGrid, mode: CorruptionMode, rate: f64, rng: &mut Rng) -> CorruptionMask {
    match mode {
        CorruptionMode::Uniform => corrupt_uniform_with(grid, rate, rng),
        CorruptionMode::Hierarchical => corrupt_hierarchical_with(grid, rate, rng),
    }
}

/// One corrupted copy per rate, drawn with shared randomness so the cells
/// resampled at a lower rate are also resampled (identically) at every
/// higher rate. Each copy has the same distribution as a single draw.
pub fn nested_corruptions(grid: &TokenGrid, mode: CorruptionMode, rates: &[f64], rng: &mut Rng) -> Vec<TokenGrid> {
    let replacement: Vec<u16> = (0..grid.indices.len()).map(|_| random_id(grid, rng)).collect();
    match mode {
        CorruptionMode::Uniform => {
            let u: Vec<f64> = (0..grid.indices.len()).map(|_| rng.gen::<f64>()).collect();
            rates
                .iter()
                .map(|&rate| {
                    let mut out = grid.clone();
                    for i in 0..u.len() {
                        if u[i] < rate {
                            out.indices[i] = replacement[i];
                        }
                    }
                    out
                })
                .collect()
        }
        CorruptionMode::Hierarchical => {
            let t = grid.steps;
            let mut order: Vec<usize> = (0..t).collect();
            order.shuffle(rng);
            let starts: Vec<usize> = (0..t).map(|_| rng.gen_range(0..grid.layers.max(1))).collect();
            rates
                .iter()
                .map(|&rate| {
                    let mut out = grid.clone();
                    let count = ((rate.clamp(0.0, 1.0) * t as f64) + 1e-9).floor() as usize;
                    for (k, &step) in order[..count.min(t)].iter().enumerate() {
                        for q in starts[k]..grid.layers {
                            for p in 0..grid.parts {
                                let o = grid.offset(step, q, p);
                                out.indices[o] = replacement[o];
                            }
                        }
                    }
                    out
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_grid(steps: usize, layers: usize, parts: usize, k: usize, rng: &mut crate::Rng) -> TokenGrid {
        let mut g = TokenGrid::zeros(steps, layers, parts, k);
        for v in g.indices.iter_mut() {
            *v = rng.gen_range(0..k) as u16;
        }
        g
    }

    /// True when `x` lies within 3σ of a binomial(n, p) mean.
    fn within_3_sigma(hits: usize, n: usize, p: f64) -> bool {
        let mean = n as f64 * p;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        (hits as f64 - mean).abs() <= 3.0 * sd + 1e-9
    }

    #[test]
    fn zero_rate_is_identity() {
        let mut rng = crate::seeded(0);
        let g = random_grid(50, 3, 3, 16, &mut rng);
        for mode in [CorruptionMode::Uniform, CorruptionMode::Hierarchical] {
            let out = corrupt(&g, &CorruptionSpec::new(mode, 0.0, 9).unwrap()).unwrap();
            assert_eq!(out, g);
        }
    }

    #[test]
    fn wrong_mode_and_rate_are_rejected() {
        let g = TokenGrid::zeros(4, 2, 1, 8);
        let spec = CorruptionSpec {
            mode: CorruptionMode::Hierarchical,
            rate: 0.5,
            seed: 0,
        };
        assert!(corrupt_uniform(&g, &spec).is_err());
        assert!(CorruptionSpec::new(CorruptionMode::Uniform, 1.5, 0).is_err());
    }

    #[test]
    fn full_uniform_rate_matches_one_over_k() {
        let mut rng = crate::seeded(1);
        let k = 16;
        let g = random_grid(100_000, 1, 1, k, &mut rng);
        let out = corrupt_uniform(&g, &CorruptionSpec::new(CorruptionMode::Uniform, 1.0, 4).unwrap()).unwrap();
        let same = g.indices.iter().zip(&out.indices).filter(|(a, b)| a == b).count();
        assert!(within_3_sigma(same, g.indices.len(), 1.0 / k as f64), "{same}");
    }

    #[test]
    fn uniform_fraction_matches_rate() {
        let mut g = TokenGrid::zeros(20_000, 3, 2, 8);
        let mask = corrupt_uniform_with(&mut g, 0.3, &mut crate::seeded(2));
        let hits = mask.iter().filter(|m| **m).count();
        assert!(within_3_sigma(hits, mask.len(), 0.3));
    }

    #[test]
    fn hierarchical_layer_rates() {
        // 10^5 tokens per layer: per-layer rate is ρ (q+1)/Q.
        let (t, q, rho) = (100_000, 6, 0.4);
        let mut g = TokenGrid::zeros(t, q, 1, 16);
        let mask = corrupt_hierarchical_with(&mut g, rho, &mut crate::seeded(3));
        let selected = (rho * t as f64).floor() as usize;
        for layer in 0..q {
            let hits = (0..t).filter(|&s| mask[g.offset(s, layer, 0)]).count();
            let p = rho * (layer + 1) as f64 / q as f64;
            assert!(within_3_sigma(hits, t, p), "layer {layer}: {hits}");
            // Given a selected step the rate is (q+1)/Q.
            assert!(within_3_sigma(hits, selected, (layer + 1) as f64 / q as f64));
        }
        // Layer 0 is hit only when the cascade starts at 0: 1/6 of selected steps.
        let l0 = (0..t).filter(|&s| mask[g.offset(s, 0, 0)]).count();
        assert!(within_3_sigma(l0, selected, 1.0 / 6.0));
    }

    #[test]
    fn hierarchical_selects_exactly_floor_rho_t() {
        let mut g = TokenGrid::zeros(37, 3, 2, 8);
        let mask = corrupt_hierarchical_with(&mut g, 0.5, &mut crate::seeded(4));
        // The deepest layer is always hit on a selected step.
        let steps = (0..37).filter(|&s| mask[g.offset(s, 2, 0)]).count();
        assert_eq!(steps, 18);
    }

    #[test]
    fn nested_draws_keep_single_draw_rates() {
        let (t, q) = (60_000, 3);
        let g = TokenGrid::zeros(t, q, 1, 16);
        let rates = [0.2, 0.6];
        let h = nested_corruptions(&g, CorruptionMode::Hierarchical, &rates, &mut crate::seeded(5));
        let u = nested_corruptions(&g, CorruptionMode::Uniform, &rates, &mut crate::seeded(6));
        for (k, &rho) in rates.iter().enumerate() {
            // A replacement can equal the original id (probability 1/K).
            let keep = 1.0 - 1.0 / 16.0;
            for layer in 0..q {
                let hits = (0..t).filter(|&s| h[k].get(s, layer, 0) != 0).count();
                assert!(within_3_sigma(hits, t, rho * (layer + 1) as f64 / q as f64 * keep), "hier {rho} {layer}: {hits}");
            }
            let hits = u[k].indices.iter().filter(|&&v| v != 0).count();
            assert!(within_3_sigma(hits, u[k].indices.len(), rho * keep));
        }
    }

    proptest! {
        #[test]
        fn nested_draws_are_nested(seed in 0u64..500, hier in any::<bool>(), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let mut rng = crate::seeded(seed);
            let g = random_grid(23, 3, 2, 8, &mut rng);
            let mode = if hier { CorruptionMode::Hierarchical } else { CorruptionMode::Uniform };
            let (lo, hi) = (a.min(b), a.max(b));
            let out = nested_corruptions(&g, mode, &[lo, hi], &mut rng);
            for i in 0..g.indices.len() {
                if out[0].indices[i] != g.indices[i] {
                    prop_assert_eq!(out[1].indices[i], out[0].indices[i]);
                }
            }
            prop_assert_eq!(&nested_corruptions(&g, mode, &[0.0], &mut rng)[0], &g);
        }

        #[test]
        fn outputs_stay_in_range_and_are_deterministic(
            seed in 0u64..1000,
            rate in 0.0f64..=1.0,
            steps in 1usize..40,
            layers in 1usize..5,
            parts in 1usize..4,
            k in 1usize..40,
            hier in any::<bool>(),
        ) {
            let mut rng = crate::seeded(seed);
            let g = random_grid(steps, layers, parts, k, &mut rng);
            let mode = if hier { CorruptionMode::Hierarchical } else { CorruptionMode::Uniform };
            let spec = CorruptionSpec::new(mode, rate, seed).unwrap();
            let a = corrupt(&g, &spec).unwrap();
            let b = corrupt(&g, &spec).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!(a.indices.iter().all(|&v| (v as usize) < k));
        }

        #[test]
        fn hierarchical_keeps_unselected_steps(seed in 0u64..1000, rate in 0.0f64..=1.0) {
            let mut rng = crate::seeded(seed);
            let mut g = random_grid(24, 3, 3, 12, &mut rng);
            let orig = g.clone();
            let mask = corrupt_hierarchical_with(&mut g, rate, &mut rng);
            for s in 0..24 {
                let selected = (0..3).any(|p| mask[g.offset(s, 2, p)]);
                for q in 0..3 {
                    for p in 0..3 {
                        if !selected {
                            prop_assert_eq!(g.get(s, q, p), orig.get(s, q, p));
                        }
                    }
                }
                // Cascade: once a layer is hit, every deeper layer is too.
                for q in 1..3 {
                    prop_assert!(!mask[g.offset(s, q - 1, 0)] || mask[g.offset(s, q, 0)]);
                }
            }
        }
    }
}
