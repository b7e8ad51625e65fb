//! FID, L1 diversity and Gaussian-kernel beat alignment.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{norm3, sub, JointPositions};
use crate::tensor::Tensor;

/// Default Gaussian kernel width in seconds.
pub const DEFAULT_SIGMA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BeatSource {
    PrecomputedAudio,
    MotionDerived,
}

/// Sorted event timestamps in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeatSet {
    pub times: Vec<f64>,
    pub source: BeatSource,
}

impl BeatSet {
    pub fn new(times: Vec<f64>, source: BeatSource) -> Result<Self> {
        let b = Self { times, source };
        b.validate()?;
        Ok(b)
    }

    pub fn audio(times: Vec<f64>) -> Result<Self> {
        Self::new(times, BeatSource::PrecomputedAudio)
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(Error::Label("beat times must be finite and nonnegative".into()));
        }
        if self.times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Label("beat times must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Mean vector and unbiased covariance of the rows of `x`.
pub fn mean_and_covariance(x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let (n, d) = x.shape();
    if n < 2 {
        return Err(Error::TooShort { needed: 2, got: n });
    }
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = Tensor::zeros(d, d);
    for r in 0..n {
        let row = x.row(r);
        for i in 0..d {
            let di = row[i] - mean[i];
            for j in i..d {
                let v = cov.get(i, j) + di * (row[j] - mean[j]);
                cov.set(i, j, v);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov.get(i, j) / (n - 1) as f64;
            cov.set(i, j, v);
            cov.set(j, i, v);
        }
    }
    if !cov.all_finite() {
        return Err(Error::numerical("covariance"));
    }
    Ok((mean, cov))
}

/// Eigenvalues and eigenvectors (columns) of a symmetric matrix by cyclic
/// Jacobi rotations.
pub fn symmetric_eigen(a: &Tensor) -> (Vec<f64>, Tensor) {
    let n = a.rows();
    let mut m = a.clone();
    let mut v = Tensor::zeros(n, n);
    for i in 0..n {
        v.set(i, i, 1.0);
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += m.get(i, j) * m.get(i, j);
            }
        }
        let scale: f64 = (0..n).map(|i| m.get(i, i).abs()).sum::<f64>().max(1e-300);
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m.get(q, q) - m.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m.get(k, p), m.get(k, q));
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let (mpk, mqk) = (m.get(p, k), m.get(q, k));
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let (vkp, vkq) = (v.get(k, p), v.get(k, q));
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    ((0..n).map(|i| m.get(i, i)).collect(), v)
}

/// Principal square root of a symmetric PSD matrix; negative eigenvalues
/// (round-off) clamp to zero.
pub fn sqrt_psd(a: &Tensor) -> Tensor {
    let (vals, vecs) = symmetric_eigen(a);
    let n = a.rows();
    let mut out = Tensor::zeros(n, n);
    for (k, &lam) in vals.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        if s == 0.0 {
            continue;
        }
        for i in 0..n {
            let vi = vecs.get(i, k) * s;
            for j in 0..n {
                let v = out.get(i, j) + vi * vecs.get(j, k);
                out.set(i, j, v);
            }
        }
    }
    out
}

/// Fréchet distance between Gaussian fits of two feature sets (rows are
/// samples).
pub fn fid(real: &Tensor, generated: &Tensor) -> Result<f64> {
    if real.cols() != generated.cols() {
        return Err(Error::dim("feature widths differ"));
    }
    let (mr, cr) = mean_and_covariance(real)?;
    let (mg, cg) = mean_and_covariance(generated)?;
    let dmu: f64 = mr.iter().zip(&mg).map(|(a, b)| (a - b) * (a - b)).sum();
    // Tr sqrt(Σr Σg) = Tr sqrt(S Σg S) with S = sqrt(Σr), which is symmetric.
    let s = sqrt_psd(&cr);
    let inner = s.matmul(&cg).matmul(&s);
    let sym = inner.zip_map(&inner.transpose(), |a, b| 0.5 * (a + b));
    let (vals, _) = symmetric_eigen(&sym);
    let tr_sqrt: f64 = vals.iter().map(|v| v.max(0.0).sqrt()).sum();
    let tr = |c: &Tensor| (0..c.rows()).map(|i| c.get(i, i)).sum::<f64>();
    let out = dmu + tr(&cr) + tr(&cg) - 2.0 * tr_sqrt;
    if !out.is_finite() {
        return Err(Error::numerical("fid"));
    }
    Ok(out.max(0.0))
}

/// `(1/N) Σ_t Σ_j |p_t^j - mean_j|₁` over the given positions.
pub fn l1_diversity(positions: &JointPositions) -> f64 {
    let (n, j) = (positions.frames, positions.joints);
    if n == 0 {
        return 0.0;
    }
    let mut mean = vec![[0.0; 3]; j];
    for t in 0..n {
        for (jt, m) in mean.iter_mut().enumerate() {
            let p = positions.get(t, jt);
            for c in 0..3 {
                m[c] += p[c] / n as f64;
            }
        }
    }
    let mut total = 0.0;
    for t in 0..n {
        for (jt, m) in mean.iter().enumerate() {
            let p = positions.get(t, jt);
            total += (0..3).map(|c| (p[c] - m[c]).abs()).sum::<f64>();
        }
    }
    total / n as f64
}

/// Indices of strict local maxima with plateau suppression: the first index
/// of a plateau that is higher than both neighbours counts once. End points
/// never count.
pub fn local_maxima(x: &[f64]) -> Vec<usize> {
    let mut out = Vec::new();
    let n = x.len();
    let mut i = 1;
    while i + 1 < n {
        if x[i] > x[i - 1] {
            let mut j = i + 1;
            while j < n && x[j] == x[i] {
                j += 1;
            }
            if j < n && x[j] < x[i] {
                out.push(i);
            }
            i = j.max(i + 1);
        } else {
            i += 1;
        }
    }
    out
}

pub fn local_minima(x: &[f64]) -> Vec<usize> {
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    local_maxima(&neg)
}

/// Mean joint speed between consecutive frames.
pub fn kinetic_speed(positions: &JointPositions) -> Vec<f64> {
    let (n, j) = (positions.frames, positions.joints);
    (0..n.saturating_sub(1))
        .map(|t| (0..j).map(|jt| norm3(sub(positions.get(t + 1, jt), positions.get(t, jt)))).sum::<f64>() / j.max(1) as f64)
        .collect()
}

/// Frames where deceleration peaks: strict local maxima of `-a` with `-a > 0`,
/// where `a_t = v_{t+1} - v_t`. The change `a_t` is stamped at frame `t+1`.
pub fn motion_beats_dance(positions: &JointPositions, fps: f64) -> Result<BeatSet> {
    if positions.frames < 4 {
        return Err(Error::TooShort {
            needed: 4,
            got: positions.frames,
        });
    }
    let v = kinetic_speed(positions);
    let decel: Vec<f64> = v.windows(2).map(|w| -(w[1] - w[0])).collect();
    let times = local_maxima(&decel)
        .into_iter()
        .filter(|&i| decel[i] > 0.0)
        .map(|i| (i + 1) as f64 / fps)
        .collect();
    BeatSet::new(times, BeatSource::MotionDerived)
}

/// Velocity minima of one joint, stamped at the middle of the frame interval.
pub fn joint_velocity_minima(positions: &JointPositions, joint: usize, fps: f64) -> Result<BeatSet> {
    let speed: Vec<f64> = (0..positions.frames.saturating_sub(1))
        .map(|t| norm3(sub(positions.get(t + 1, joint), positions.get(t, joint))))
        .collect();
    let times = local_minima(&speed).into_iter().map(|i| (i as f64 + 0.5) / fps).collect();
    BeatSet::new(times, BeatSource::MotionDerived)
}

pub fn gaussian_kernel(distance: f64, sigma: f64) -> f64 {
    (-(distance * distance) / (2.0 * sigma * sigma)).exp()
}

/// Mean over audio beats of the kernel at the nearest motion beat. An empty
/// motion set scores 0.
pub fn beat_alignment(audio: &BeatSet, motion: &BeatSet, sigma: f64) -> Result<f64> {
    if audio.is_empty() {
        return Err(Error::Label("beat alignment needs at least one audio beat".into()));
    }
    if !(sigma > 0.0) {
        return Err(Error::config("sigma must be positive"));
    }
    if motion.is_empty() {
        return Ok(0.0);
    }
    let m = &motion.times;
    let total: f64 = audio
        .times
        .iter()
        .map(|&b| {
            let k = m.partition_point(|&x| x < b);
            let mut best = f64::INFINITY;
            if k < m.len() {
                best = best.min((m[k] - b).abs());
            }
            if k > 0 {
                best = best.min((b - m[k - 1]).abs());
            }
            gaussian_kernel(best, sigma)
        })
        .sum();
    Ok(total / audio.len() as f64)
}

/// BA for dance: audio beats against deceleration peaks.
pub fn ba_dance(audio: &BeatSet, positions: &JointPositions, fps: f64, sigma: f64) -> Result<f64> {
    beat_alignment(audio, &motion_beats_dance(positions, fps)?, sigma)
}

/// BA for gesture: per-joint hit rate against velocity minima, averaged over
/// `joints`.
pub fn ba_gesture(audio: &BeatSet, per_joint: &[BeatSet], sigma: f64) -> Result<f64> {
    if per_joint.is_empty() {
        return Err(Error::config("no joints for gesture alignment"));
    }
    let mut total = 0.0;
    for m in per_joint {
        total += beat_alignment(audio, m, sigma)?;
    }
    Ok(total / per_joint.len() as f64)
}

pub fn ba_gesture_from_positions(audio: &BeatSet, positions: &JointPositions, joints: &[usize], fps: f64, sigma: f64) -> Result<f64> {
    let sets = joints
        .iter()
        .map(|&j| joint_velocity_minima(positions, j, fps))
        .collect::<Result<Vec<_>>>()?;
    ba_gesture(audio, &sets, sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_joint(xs: &[f64]) -> JointPositions {
        JointPositions {
            frames: xs.len(),
            joints: 1,
            data: xs.iter().map(|&x| [x, 0.0, 0.0]).collect(),
        }
    }

    #[test]
    fn fid_closed_forms() {
        let mut rng = crate::seeded(0);
        let a = Tensor::randn(200, 3, 1.0, &mut rng);
        assert!(fid(&a, &a).unwrap().abs() < 1e-6);

        // Standardize a large draw so the moments are exact; the closed forms
        // then hold up to round-off, well inside 2%.
        let n = 10_000;
        let raw = Tensor::randn(n, 1, 1.0, &mut rng);
        let (m, c) = mean_and_covariance(&raw).unwrap();
        let z = raw.map(|x| (x - m[0]) / c.item().sqrt());
        let f = fid(&z, &z.map(|x| x + 1.0)).unwrap();
        assert!((f - 1.0).abs() < 0.02, "{f}");
        let f = fid(&z, &z.scale(2.0)).unwrap();
        assert!((f - 1.0).abs() < 0.02, "{f}");

        // Independent draws land near the population value.
        let g = Tensor::randn(n, 1, 1.0, &mut rng).map(|x| x + 1.0);
        let f = fid(&raw, &g).unwrap();
        assert!((f - 1.0).abs() < 0.15, "{f}");
    }

    #[test]
    fn fid_exact_on_fixed_moments() {
        // Two-point sets with exact unbiased moments: means 0 / 1, variances 1 / 4.
        let r = Tensor::from_rows(&[&[-(0.5f64).sqrt()], &[(0.5f64).sqrt()]]);
        let g = Tensor::from_rows(&[&[1.0 - 2.0 * (0.5f64).sqrt()], &[1.0 + 2.0 * (0.5f64).sqrt()]]);
        let f = fid(&r, &g).unwrap();
        // |1|² + (1 - 2)² = 2
        assert!((f - 2.0).abs() < 1e-9, "{f}");
    }

    #[test]
    fn sqrt_psd_squares_back() {
        let mut rng = crate::seeded(1);
        let x = Tensor::randn(5, 5, 1.0, &mut rng);
        let a = x.matmul(&x.transpose());
        let s = sqrt_psd(&a);
        assert!(s.matmul(&s).max_abs_diff(&a) < 1e-9);
    }

    #[test]
    fn diversity_examples() {
        assert_eq!(l1_diversity(&one_joint(&[3.0; 6])), 0.0);
        assert!((l1_diversity(&one_joint(&[0.0, 2.0, 0.0, 2.0])) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dance_beats_examples() {
        // Speeds 1,2,3,1,2,3 need positions with those gaps.
        let mut x = vec![0.0];
        for v in [1.0, 2.0, 3.0, 1.0, 2.0, 3.0] {
            x.push(x.last().unwrap() + v);
        }
        let b = motion_beats_dance(&one_joint(&x), 1.0).unwrap();
        // a = [1,1,-2,1,1]; the drop sits at index 2, stamped at frame 3.
        assert_eq!(b.times, vec![3.0]);

        let lin: Vec<f64> = (0..10).map(|t| t as f64).collect();
        assert!(motion_beats_dance(&one_joint(&lin), 30.0).unwrap().is_empty());
        assert!(matches!(motion_beats_dance(&one_joint(&[0.0; 3]), 30.0), Err(Error::TooShort { .. })));
    }

    #[test]
    fn local_extrema_rules() {
        assert_eq!(local_maxima(&[0.0, 1.0, 1.0, 0.0]), vec![1]);
        assert_eq!(local_maxima(&[0.0, 1.0, 1.0]), Vec::<usize>::new());
        assert_eq!(local_maxima(&[2.0, 1.0, 0.0]), Vec::<usize>::new());
        assert_eq!(local_maxima(&[0.0, 2.0, 1.0, 3.0, 0.0]), vec![1, 3]);
    }

    #[test]
    fn kernel_values() {
        let a = BeatSet::audio(vec![1.0]).unwrap();
        let at = |t: f64| beat_alignment(&a, &BeatSet::new(vec![t], BeatSource::MotionDerived).unwrap(), 0.1).unwrap();
        assert_eq!(at(1.0), 1.0);
        assert!((at(1.1) - (-0.5f64).exp()).abs() < 1e-9);
        assert!((at(1.2) - (-2.0f64).exp()).abs() < 1e-9);
        let empty = BeatSet::new(vec![], BeatSource::MotionDerived).unwrap();
        assert_eq!(beat_alignment(&a, &empty, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn gesture_with_identical_sets_equals_single() {
        let a = BeatSet::audio(vec![0.5, 1.3, 2.0]).unwrap();
        let m = BeatSet::new(vec![0.45, 1.0, 2.2], BeatSource::MotionDerived).unwrap();
        let single = beat_alignment(&a, &m, 0.1).unwrap();
        let g = ba_gesture(&a, &[m.clone(), m.clone(), m], 0.1).unwrap();
        assert_eq!(g, single);
    }

    proptest! {
        #[test]
        fn fid_is_symmetric(seed in 0u64..50) {
            let mut rng = crate::seeded(seed);
            let a = Tensor::randn(30, 3, 1.0, &mut rng);
            let b = Tensor::randn(30, 3, 1.5, &mut rng).map(|x| x + 0.3);
            prop_assert!((fid(&a, &b).unwrap() - fid(&b, &a).unwrap()).abs() < 1e-6);
        }

        #[test]
        fn adding_a_matching_beat_never_hurts(
            beats in prop::collection::btree_set(0u32..1000, 1..10),
            motion in prop::collection::btree_set(0u32..1000, 0..10),
            pick in 0usize..10,
        ) {
            let a: Vec<f64> = beats.iter().map(|&b| b as f64 / 100.0).collect();
            let m: Vec<f64> = motion.iter().map(|&b| b as f64 / 100.0).collect();
            let audio = BeatSet::audio(a.clone()).unwrap();
            let before = beat_alignment(&audio, &BeatSet::new(m.clone(), BeatSource::MotionDerived).unwrap(), 0.1).unwrap();
            let extra = a[pick % a.len()];
            let mut m2 = m.clone();
            if !m2.contains(&extra) {
                m2.push(extra);
                m2.sort_by(|x, y| x.partial_cmp(y).unwrap());
            }
            let after = beat_alignment(&audio, &BeatSet::new(m2, BeatSource::MotionDerived).unwrap(), 0.1).unwrap();
            prop_assert!(after >= before - 1e-12);
        }
    }
}
