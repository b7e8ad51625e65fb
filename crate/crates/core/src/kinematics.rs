//! Skeletons, 6D rotations, forward kinematics, and the FK auxiliary loss.
//!
//! A motion frame is laid out as `[vx, vz, height, r6d(joint 0), r6d(joint 1), ...]`:
//! planar root velocity, root height, and one 6D rotation per joint (the first
//! two columns of the local rotation matrix). Forward kinematics is
//! character-centric: the root sits at its rest offset lifted by the height
//! channel, and [`integrate_root`] recovers world-space root translation.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Vec3 = [f64; 3];
/// Row-major 3x3 matrix.
pub type Mat3 = [[f64; 3]; 3];

/// Norm below which a 6D column is treated as degenerate.
pub const DEGENERATE_TOL: f64 = 1e-8;

/// Leading channels before the per-joint rotations.
pub const ROOT_CHANNELS: usize = 3;

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
pub const IDENTITY_6D: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm3(a: Vec3) -> f64 {
    dot3(a, a).sqrt()
}

#[inline]
pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot3(m[0], v), dot3(m[1], v), dot3(m[2], v)]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in a.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            out[j][i] = *v;
        }
    }
    out
}

pub fn determinant(m: &Mat3) -> f64 {
    dot3(m[0], cross(m[1], m[2]))
}

/// Rotation of `angle` radians about a unit `axis` (Rodrigues).
pub fn axis_angle(axis: Vec3, angle: f64) -> Mat3 {
    let n = norm3(axis);
    let [x, y, z] = if n > 0.0 { scale(axis, 1.0 / n) } else { [1.0, 0.0, 0.0] };
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

fn column(m: &Mat3, c: usize) -> Vec3 {
    [m[0][c], m[1][c], m[2][c]]
}

fn from_columns(a: Vec3, b: Vec3, c: Vec3) -> Mat3 {
    [[a[0], b[0], c[0]], [a[1], b[1], c[1]], [a[2], b[2], c[2]]]
}

/// Intermediates of the Gram-Schmidt map, kept for the backward pass.
#[derive(Debug, Clone, Copy)]
struct GramSchmidt {
    raw_b: Vec3,
    b1: Vec3,
    b2: Vec3,
    norm_a: f64,
    norm_u: f64,
}

fn gram_schmidt(r: &[f64]) -> Result<(Mat3, GramSchmidt)> {
    let a = [r[0], r[1], r[2]];
    let b = [r[3], r[4], r[5]];
    if !a.iter().chain(&b).all(|v| v.is_finite()) {
        return Err(Error::numerical("6D rotation"));
    }
    let norm_a = norm3(a);
    if norm_a < DEGENERATE_TOL {
        return Err(Error::DegenerateRotation);
    }
    let b1 = scale(a, 1.0 / norm_a);
    let u = sub(b, scale(b1, dot3(b1, b)));
    let norm_u = norm3(u);
    if norm_u < DEGENERATE_TOL {
        return Err(Error::DegenerateRotation);
    }
    let b2 = scale(u, 1.0 / norm_u);
    let b3 = cross(b1, b2);
    Ok((
        from_columns(b1, b2, b3),
        GramSchmidt {
            raw_b: b,
            b1,
            b2,
            norm_a,
            norm_u,
        },
    ))
}

/// Maps a 6D rotation (two stacked 3-vectors, the first two matrix columns)
/// to an orthonormal matrix with determinant +1.
pub fn rot6d_to_matrix(r: &[f64; 6]) -> Result<Mat3> {
    gram_schmidt(r).map(|(m, _)| m)
}

/// First two columns of `m`.
pub fn matrix_to_rot6d(m: &Mat3) -> [f64; 6] {
    [m[0][0], m[1][0], m[2][0], m[0][1], m[1][1], m[2][1]]
}

/// Pulls a gradient on the rotation matrix back to the 6D input.
fn gram_schmidt_backward(gs: &GramSchmidt, grad_m: &Mat3) -> [f64; 6] {
    let g1 = column(grad_m, 0);
    let g2 = column(grad_m, 1);
    let g3 = column(grad_m, 2);
    // b3 = b1 x b2
    let mut gb1 = add(g1, cross(gs.b2, g3));
    let gb2 = add(g2, cross(g3, gs.b1));
    // b2 = u / |u|
    let gu = scale(sub(gb2, scale(gs.b2, dot3(gs.b2, gb2))), 1.0 / gs.norm_u);
    // u = b - (b1 . b) b1
    let s = dot3(gs.b1, gs.raw_b);
    let gs_scalar = -dot3(gu, gs.b1);
    let mut gb = gu;
    gb1 = add(gb1, scale(gu, -s));
    gb1 = add(gb1, scale(gs.raw_b, gs_scalar));
    gb = add(gb, scale(gs.b1, gs_scalar));
    // b1 = a / |a|
    let ga = scale(sub(gb1, scale(gs.b1, dot3(gs.b1, gb1))), 1.0 / gs.norm_a);
    [ga[0], ga[1], ga[2], gb[0], gb[1], gb[2]]
}

/// Kinematic tree in topological order (every parent precedes its children).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub parents: Vec<Option<usize>>,
    pub offsets: Vec<Vec3>,
    pub joint_names: Vec<String>,
    /// Ankles, toes, heels.
    pub foot_joints: Vec<usize>,
    pub upper_body_joints: Vec<usize>,
}

impl Skeleton {
    pub fn new(
        parents: Vec<Option<usize>>,
        offsets: Vec<Vec3>,
        joint_names: Vec<String>,
        foot_joints: Vec<usize>,
        upper_body_joints: Vec<usize>,
    ) -> Result<Self> {
        let s = Self {
            parents,
            offsets,
            joint_names,
            foot_joints,
            upper_body_joints,
        };
        s.validate()?;
        Ok(s)
    }

    /// A serial chain rooted at joint 0.
    pub fn chain(offsets: &[Vec3]) -> Self {
        let parents = (0..offsets.len())
            .map(|j| if j == 0 { None } else { Some(j - 1) })
            .collect();
        let joint_names = (0..offsets.len()).map(|j| alloc::format!("j{j}")).collect();
        Self {
            parents,
            offsets: offsets.to_vec(),
            joint_names,
            foot_joints: Vec::new(),
            upper_body_joints: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.parents.len();
        if j == 0 {
            return Err(Error::config("skeleton has no joints"));
        }
        if self.offsets.len() != j || self.joint_names.len() != j {
            return Err(Error::dim("skeleton parents/offsets/names lengths differ"));
        }
        let roots = self.parents.iter().filter(|p| p.is_none()).count();
        if roots != 1 || self.parents[0].is_some() {
            return Err(Error::config("skeleton needs exactly one root at index 0"));
        }
        for (i, p) in self.parents.iter().enumerate() {
            if let Some(p) = p {
                if *p >= i {
                    return Err(Error::config(alloc::format!(
                        "joint {i} has parent {p}; parents must precede children"
                    )));
                }
            }
        }
        if !self.offsets.iter().flatten().all(|v| v.is_finite()) {
            return Err(Error::numerical("skeleton offsets"));
        }
        if self.foot_joints.iter().chain(&self.upper_body_joints).any(|&i| i >= j) {
            return Err(Error::config("joint subset index out of range"));
        }
        Ok(())
    }

    pub fn num_joints(&self) -> usize {
        self.parents.len()
    }

    /// Frame width `3 + 6J`.
    pub fn frame_dim(&self) -> usize {
        ROOT_CHANNELS + 6 * self.num_joints()
    }

    pub fn joint(&self, name: &str) -> Option<usize> {
        self.joint_names.iter().position(|n| n == name)
    }

    /// A 21-joint y-up humanoid in meters, arms hanging at the sides. Left is +x.
    pub fn humanoid() -> Self {
        let spec: [(&str, Option<usize>, Vec3); 21] = [
            ("pelvis", None, [0.0, 0.0, 0.0]),
            ("spine", Some(0), [0.0, 0.12, 0.0]),
            ("chest", Some(1), [0.0, 0.15, 0.0]),
            ("neck", Some(2), [0.0, 0.2, 0.0]),
            ("head", Some(3), [0.0, 0.12, 0.0]),
            ("l_shoulder", Some(2), [0.18, 0.14, 0.0]),
            ("l_elbow", Some(5), [0.02, -0.28, 0.0]),
            ("l_wrist", Some(6), [0.0, -0.25, 0.0]),
            ("l_hand", Some(7), [0.0, -0.08, 0.0]),
            ("r_shoulder", Some(2), [-0.18, 0.14, 0.0]),
            ("r_elbow", Some(9), [-0.02, -0.28, 0.0]),
            ("r_wrist", Some(10), [0.0, -0.25, 0.0]),
            ("r_hand", Some(11), [0.0, -0.08, 0.0]),
            ("l_hip", Some(0), [0.09, -0.05, 0.0]),
            ("l_knee", Some(13), [0.0, -0.42, 0.0]),
            ("l_ankle", Some(14), [0.0, -0.42, 0.0]),
            ("l_toe", Some(15), [0.0, -0.06, 0.13]),
            ("r_hip", Some(0), [-0.09, -0.05, 0.0]),
            ("r_knee", Some(17), [0.0, -0.42, 0.0]),
            ("r_ankle", Some(18), [0.0, -0.42, 0.0]),
            ("r_toe", Some(19), [0.0, -0.06, 0.13]),
        ];
        Self {
            parents: spec.iter().map(|s| s.1).collect(),
            offsets: spec.iter().map(|s| s.2).collect(),
            joint_names: spec.iter().map(|s| String::from(s.0)).collect(),
            foot_joints: vec![15, 16, 19, 20],
            upper_body_joints: (1..=12).collect(),
        }
    }

    /// Left/right joint pairs found by `l_`/`r_` name prefixes.
    pub fn mirror_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for (i, n) in self.joint_names.iter().enumerate() {
            if let Some(rest) = n.strip_prefix("l_") {
                if let Some(j) = self.joint(&alloc::format!("r_{rest}")) {
                    pairs.push((i, j));
                }
            }
        }
        pairs
    }
}

/// `N x (3 + 6J)` frames at a fixed rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionClip {
    pub fps: f64,
    pub frames: Tensor,
}

impl MotionClip {
    pub fn new(fps: f64, frames: Tensor) -> Result<Self> {
        let c = Self { fps, frames };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::config("fps must be positive"));
        }
        if self.frames.rows() == 0 {
            return Err(Error::TooShort { needed: 1, got: 0 });
        }
        if self.frames.cols() < ROOT_CHANNELS + 6 || (self.frames.cols() - ROOT_CHANNELS) % 6 != 0 {
            return Err(Error::dim("frame width must be 3 + 6J"));
        }
        if !self.frames.all_finite() {
            return Err(Error::numerical("motion frames"));
        }
        Ok(())
    }

    /// Every joint at identity, standing still at `height`.
    pub fn rest(num_joints: usize, frames: usize, height: f64, fps: f64) -> Self {
        let dim = ROOT_CHANNELS + 6 * num_joints;
        let mut t = Tensor::zeros(frames, dim);
        for f in 0..frames {
            let row = t.row_mut(f);
            row[2] = height;
            for j in 0..num_joints {
                row[ROOT_CHANNELS + 6 * j..ROOT_CHANNELS + 6 * j + 6].copy_from_slice(&IDENTITY_6D);
            }
        }
        Self { fps, frames: t }
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn num_joints(&self) -> usize {
        (self.frames.cols() - ROOT_CHANNELS) / 6
    }

    pub fn rot6d(&self, frame: usize, joint: usize) -> [f64; 6] {
        let s = ROOT_CHANNELS + 6 * joint;
        let row = self.frames.row(frame);
        [row[s], row[s + 1], row[s + 2], row[s + 3], row[s + 4], row[s + 5]]
    }

    pub fn set_rot6d(&mut self, frame: usize, joint: usize, r: [f64; 6]) {
        let s = ROOT_CHANNELS + 6 * joint;
        self.frames.row_mut(frame)[s..s + 6].copy_from_slice(&r);
    }

    pub fn root_velocity(&self, frame: usize) -> [f64; 2] {
        let row = self.frames.row(frame);
        [row[0], row[1]]
    }

    pub fn root_height(&self, frame: usize) -> f64 {
        self.frames.row(frame)[2]
    }

    pub fn duration_seconds(&self) -> f64 {
        self.len() as f64 / self.fps
    }

    /// Pads at the front by repeating the first frame until the length is a
    /// multiple of `multiple`.
    pub fn pad_front_to_multiple(&self, multiple: usize) -> Self {
        let n = self.len();
        let pad = (multiple - n % multiple) % multiple;
        if pad == 0 {
            return self.clone();
        }
        let first = self.frames.slice_rows(0, 1);
        let mut parts: Vec<&Tensor> = vec![&first; pad];
        parts.push(&self.frames);
        Self {
            fps: self.fps,
            frames: Tensor::concat_rows(&parts),
        }
    }
}

/// `N x J` global joint positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointPositions {
    pub frames: usize,
    pub joints: usize,
    pub data: Vec<Vec3>,
}

impl JointPositions {
    pub fn zeros(frames: usize, joints: usize) -> Self {
        Self {
            frames,
            joints,
            data: vec![[0.0; 3]; frames * joints],
        }
    }

    #[inline]
    pub fn get(&self, frame: usize, joint: usize) -> Vec3 {
        self.data[frame * self.joints + joint]
    }

    #[inline]
    pub fn set(&mut self, frame: usize, joint: usize, p: Vec3) {
        self.data[frame * self.joints + joint] = p;
    }

    /// Per-element linear combination `a·self + b·other`.
    pub fn combine(&self, a: f64, other: &JointPositions, b: f64) -> JointPositions {
        assert_eq!((self.frames, self.joints), (other.frames, other.joints));
        JointPositions {
            frames: self.frames,
            joints: self.joints,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(x, y)| add(scale(*x, a), scale(*y, b)))
                .collect(),
        }
    }

    /// Copy with joint 0 subtracted from every joint of the same frame.
    pub fn root_relative(&self) -> JointPositions {
        let mut out = self.clone();
        for t in 0..self.frames {
            let root = self.get(t, 0);
            for j in 0..self.joints {
                out.set(t, j, sub(self.get(t, j), root));
            }
        }
        out
    }
}

/// Per-frame FK state kept for the backward pass.
struct FkFrame {
    local: Vec<Mat3>,
    global: Vec<Mat3>,
    gs: Vec<GramSchmidt>,
}

fn check_dims(skeleton: &Skeleton, clip: &MotionClip) -> Result<()> {
    if clip.frames.cols() != skeleton.frame_dim() {
        return Err(Error::dim(alloc::format!(
            "clip frame width {} does not match skeleton width {} ({} joints)",
            clip.frames.cols(),
            skeleton.frame_dim(),
            skeleton.num_joints()
        )));
    }
    Ok(())
}

fn fk_frame(skeleton: &Skeleton, row: &[f64], out: &mut [Vec3]) -> Result<FkFrame> {
    let j = skeleton.num_joints();
    let mut local = Vec::with_capacity(j);
    let mut global: Vec<Mat3> = Vec::with_capacity(j);
    let mut gs = Vec::with_capacity(j);
    for jt in 0..j {
        let s = ROOT_CHANNELS + 6 * jt;
        let (r, cache) = gram_schmidt(&row[s..s + 6])?;
        local.push(r);
        gs.push(cache);
        match skeleton.parents[jt] {
            None => {
                global.push(r);
                out[jt] = add(skeleton.offsets[jt], [0.0, row[2], 0.0]);
            }
            Some(p) => {
                global.push(mat_mul(&global[p], &r));
                out[jt] = add(out[p], mat_vec(&global[p], skeleton.offsets[jt]));
            }
        }
    }
    Ok(FkFrame { local, global, gs })
}

/// Character-centric global joint positions.
pub fn forward_kinematics(skeleton: &Skeleton, clip: &MotionClip) -> Result<JointPositions> {
    check_dims(skeleton, clip)?;
    let j = skeleton.num_joints();
    let mut pos = JointPositions::zeros(clip.len(), j);
    for t in 0..clip.len() {
        fk_frame(skeleton, clip.frames.row(t), &mut pos.data[t * j..(t + 1) * j])?;
    }
    Ok(pos)
}

/// Global joint rotations and positions for a single frame.
pub fn forward_kinematics_frame(skeleton: &Skeleton, row: &[f64]) -> Result<(Vec<Mat3>, Vec<Vec3>)> {
    if row.len() != skeleton.frame_dim() {
        return Err(Error::dim("frame width does not match skeleton"));
    }
    let mut pos = vec![[0.0; 3]; skeleton.num_joints()];
    let cache = fk_frame(skeleton, row, &mut pos)?;
    Ok((cache.global, pos))
}

/// Accumulates `dL/dframe` for one frame given `dL/dposition`.
fn fk_frame_backward(skeleton: &Skeleton, cache: &FkFrame, grad_pos: &[Vec3], grad_row: &mut [f64]) {
    let j = skeleton.num_joints();
    let mut gp: Vec<Vec3> = grad_pos.to_vec();
    let mut gg: Vec<Mat3> = vec![[[0.0; 3]; 3]; j];
    for jt in (0..j).rev() {
        match skeleton.parents[jt] {
            Some(p) => {
                let o = skeleton.offsets[jt];
                gp[p] = add(gp[p], gp[jt]);
                // p_j = p_p + G_p o_j
                for (a, row) in gg[p].iter_mut().enumerate() {
                    for (b, v) in row.iter_mut().enumerate() {
                        *v += gp[jt][a] * o[b];
                    }
                }
                // G_j = G_p R_j
                let gr = mat_mul(&transpose(&cache.global[p]), &gg[jt]);
                let gpar = mat_mul(&gg[jt], &transpose(&cache.local[jt]));
                for a in 0..3 {
                    for b in 0..3 {
                        gg[p][a][b] += gpar[a][b];
                    }
                }
                let g6 = gram_schmidt_backward(&cache.gs[jt], &gr);
                let s = ROOT_CHANNELS + 6 * jt;
                for (d, v) in grad_row[s..s + 6].iter_mut().zip(g6) {
                    *d += v;
                }
            }
            None => {
                grad_row[2] += gp[jt][1];
                let g6 = gram_schmidt_backward(&cache.gs[jt], &gg[jt]);
                let s = ROOT_CHANNELS + 6 * jt;
                for (d, v) in grad_row[s..s + 6].iter_mut().zip(g6) {
                    *d += v;
                }
            }
        }
    }
}

/// First and second forward differences along time.
pub fn finite_difference(positions: &JointPositions) -> Result<(JointPositions, JointPositions)> {
    let n = positions.frames;
    if n < 3 {
        return Err(Error::TooShort { needed: 3, got: n });
    }
    let vel = diff(positions);
    let acc = diff(&vel);
    Ok((vel, acc))
}

fn diff(p: &JointPositions) -> JointPositions {
    let mut out = JointPositions::zeros(p.frames - 1, p.joints);
    for t in 0..p.frames - 1 {
        for j in 0..p.joints {
            out.set(t, j, sub(p.get(t + 1, j), p.get(t, j)));
        }
    }
    out
}

/// Loss weights for the FK auxiliary terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuxWeights {
    pub pos: f64,
    pub vel: f64,
    pub acc: f64,
    pub foot_vel: f64,
    pub foot_pos: f64,
}

impl Default for AuxWeights {
    fn default() -> Self {
        Self {
            pos: 0.02,
            vel: 0.2,
            acc: 0.2,
            foot_vel: 0.3,
            foot_pos: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AuxLoss {
    pub total: f64,
    pub pos: f64,
    pub vel: f64,
    pub acc: f64,
    pub foot_vel: f64,
    pub foot_pos: f64,
}

/// Mean over (frame, joint) of the per-point L1 distance, with its sign-gradient.
fn l1_terms(
    hat: &JointPositions,
    gt: &JointPositions,
    joints: Option<&[usize]>,
) -> (f64, Vec<Vec3>) {
    let mut grad = vec![[0.0; 3]; hat.data.len()];
    let all: Vec<usize>;
    let joints = match joints {
        Some(j) => j,
        None => {
            all = (0..hat.joints).collect();
            &all
        }
    };
    let count = (hat.frames * joints.len()).max(1) as f64;
    let mut sum = 0.0;
    for t in 0..hat.frames {
        for &j in joints {
            let d = sub(hat.get(t, j), gt.get(t, j));
            let g = &mut grad[t * hat.joints + j];
            for c in 0..3 {
                sum += d[c].abs();
                g[c] = if d[c] > 0.0 {
                    1.0 / count
                } else if d[c] < 0.0 {
                    -1.0 / count
                } else {
                    0.0
                };
            }
        }
    }
    (sum / count, grad)
}

/// Φ between reconstructed and reference clips.
pub fn auxiliary_loss(
    skeleton: &Skeleton,
    clip_hat: &MotionClip,
    clip_gt: &MotionClip,
    weights: &AuxWeights,
) -> Result<AuxLoss> {
    auxiliary_loss_with_grad(skeleton, clip_hat, clip_gt, weights).map(|(l, _)| l)
}

/// Φ together with `dΦ/d clip_hat.frames`.
pub fn auxiliary_loss_with_grad(
    skeleton: &Skeleton,
    clip_hat: &MotionClip,
    clip_gt: &MotionClip,
    weights: &AuxWeights,
) -> Result<(AuxLoss, Tensor)> {
    check_dims(skeleton, clip_hat)?;
    check_dims(skeleton, clip_gt)?;
    if clip_hat.frames.shape() != clip_gt.frames.shape() {
        return Err(Error::dim("auxiliary loss clips differ in shape"));
    }
    let w = weights;
    if [w.pos, w.vel, w.acc, w.foot_vel, w.foot_pos].iter().any(|v| *v < 0.0) {
        return Err(Error::config("auxiliary loss weights must be nonnegative"));
    }
    let n = clip_hat.len();
    let j = skeleton.num_joints();
    let mut p_hat = JointPositions::zeros(n, j);
    let mut caches = Vec::with_capacity(n);
    for t in 0..n {
        caches.push(fk_frame(skeleton, clip_hat.frames.row(t), &mut p_hat.data[t * j..(t + 1) * j])?);
    }
    let p_gt = forward_kinematics(skeleton, clip_gt)?;

    let mut loss = AuxLoss::default();
    let mut grad_p = vec![[0.0; 3]; n * j];
    let add_grad = |dst: &mut Vec<Vec3>, src: &[Vec3], weight: f64| {
        for (d, s) in dst.iter_mut().zip(src) {
            *d = add(*d, scale(*s, weight));
        }
    };

    let (pos, g) = l1_terms(&p_hat, &p_gt, None);
    loss.pos = pos;
    add_grad(&mut grad_p, &g, w.pos);
    let (fpos, g) = l1_terms(&p_hat, &p_gt, Some(&skeleton.foot_joints));
    loss.foot_pos = fpos;
    add_grad(&mut grad_p, &g, w.foot_pos);

    if n >= 2 {
        let (v_hat, v_gt) = (diff(&p_hat), diff(&p_gt));
        let (vel, gv) = l1_terms(&v_hat, &v_gt, None);
        let (fvel, gfv) = l1_terms(&v_hat, &v_gt, Some(&skeleton.foot_joints));
        loss.vel = vel;
        loss.foot_vel = fvel;
        let mut gvel: Vec<Vec3> = gv.iter().map(|g| scale(*g, w.vel)).collect();
        add_grad(&mut gvel, &gfv, w.foot_vel);
        if n >= 3 {
            let (a_hat, a_gt) = (diff(&v_hat), diff(&v_gt));
            let (acc, ga) = l1_terms(&a_hat, &a_gt, None);
            loss.acc = acc;
            // a_t = v_{t+1} - v_t
            for t in 0..n - 2 {
                for jt in 0..j {
                    let g = scale(ga[t * j + jt], w.acc);
                    gvel[(t + 1) * j + jt] = add(gvel[(t + 1) * j + jt], g);
                    gvel[t * j + jt] = sub(gvel[t * j + jt], g);
                }
            }
        }
        // v_t = p_{t+1} - p_t
        for t in 0..n - 1 {
            for jt in 0..j {
                let g = gvel[t * j + jt];
                grad_p[(t + 1) * j + jt] = add(grad_p[(t + 1) * j + jt], g);
                grad_p[t * j + jt] = sub(grad_p[t * j + jt], g);
            }
        }
    }
    loss.total = w.pos * loss.pos + w.vel * loss.vel + w.acc * loss.acc + w.foot_vel * loss.foot_vel + w.foot_pos * loss.foot_pos;

    let mut grad = Tensor::zeros(n, clip_hat.frames.cols());
    for t in 0..n {
        fk_frame_backward(skeleton, &caches[t], &grad_p[t * j..(t + 1) * j], grad.row_mut(t));
    }
    Ok((loss, grad))
}

/// World-space root path: cumulative planar velocity, height from the clip.
pub fn integrate_root(clip: &MotionClip) -> Vec<Vec3> {
    let mut x = 0.0;
    let mut z = 0.0;
    (0..clip.len())
        .map(|t| {
            let [vx, vz] = clip.root_velocity(t);
            let p = [x, clip.root_height(t), z];
            x += vx;
            z += vz;
            p
        })
        .collect()
}

/// Reflects a clip across the sagittal (x = 0) plane, swapping left/right joints.
pub fn mirror_clip(skeleton: &Skeleton, clip: &MotionClip) -> MotionClip {
    let reflect: Mat3 = [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let pairs = skeleton.mirror_pairs();
    let mut partner: Vec<usize> = (0..skeleton.num_joints()).collect();
    for (a, b) in pairs {
        partner[a] = b;
        partner[b] = a;
    }
    let mut out = clip.clone();
    for t in 0..clip.len() {
        out.frames.row_mut(t)[0] = -clip.frames.row(t)[0];
        for j in 0..skeleton.num_joints() {
            let r6 = clip.rot6d(t, j);
            let m = match rot6d_to_matrix(&r6) {
                Ok(m) => m,
                Err(_) => IDENTITY,
            };
            let mirrored = mat_mul(&mat_mul(&reflect, &m), &reflect);
            out.set_rot6d(t, partner[j], matrix_to_rot6d(&mirrored));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn assert_mat_close(a: &Mat3, b: &Mat3, tol: f64) {
        for i in 0..3 {
            for j in 0..3 {
                assert!((a[i][j] - b[i][j]).abs() < tol, "{a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn rot6d_examples() {
        assert_mat_close(&rot6d_to_matrix(&IDENTITY_6D).unwrap(), &IDENTITY, 1e-15);
        let rz = rot6d_to_matrix(&[0.0, 1.0, 0.0, -1.0, 0.0, 0.0]).unwrap();
        // Columns [0,1,0], [-1,0,0], [0,0,1].
        assert_mat_close(&rz, &[[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]], 1e-15);
        assert_mat_close(&rot6d_to_matrix(&[2.0, 0.0, 0.0, 0.0, 3.0, 0.0]).unwrap(), &IDENTITY, 1e-15);
    }

    #[test]
    fn rot6d_degenerate_inputs_error() {
        assert_eq!(rot6d_to_matrix(&[0.0; 6]), Err(Error::DegenerateRotation));
        assert_eq!(
            rot6d_to_matrix(&[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]),
            Err(Error::DegenerateRotation)
        );
        assert_eq!(
            rot6d_to_matrix(&[1e-9, 0.0, 0.0, 0.0, 1.0, 0.0]),
            Err(Error::DegenerateRotation)
        );
    }

    fn chain3() -> Skeleton {
        Skeleton::chain(&[[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 1.0, 0.0]])
    }

    #[test]
    fn fk_identity_chain() {
        let clip = MotionClip::rest(3, 2, 0.0, 30.0);
        let p = forward_kinematics(&chain3(), &clip).unwrap();
        assert_eq!(p.get(1, 0), [0.0, 0.0, 0.0]);
        assert_eq!(p.get(1, 1), [0.0, 1.0, 0.0]);
        assert_eq!(p.get(1, 2), [0.0, 2.0, 0.0]);
    }

    #[test]
    fn fk_rotated_root() {
        let mut clip = MotionClip::rest(3, 1, 0.0, 30.0);
        clip.set_rot6d(0, 0, [0.0, 1.0, 0.0, -1.0, 0.0, 0.0]);
        let p = forward_kinematics(&chain3(), &clip).unwrap();
        for (got, want) in [(p.get(0, 1), [-1.0, 0.0, 0.0]), (p.get(0, 2), [-2.0, 0.0, 0.0])] {
            assert!(norm3(sub(got, want)) < 1e-12, "{got:?}");
        }
    }

    #[test]
    fn fk_single_joint_sits_at_offset() {
        let s = Skeleton::chain(&[[0.3, 0.2, 0.1]]);
        let clip = MotionClip::rest(1, 4, 0.0, 30.0);
        let p = forward_kinematics(&s, &clip).unwrap();
        for t in 0..4 {
            assert_eq!(p.get(t, 0), [0.3, 0.2, 0.1]);
        }
    }

    #[test]
    fn fk_rejects_wrong_width() {
        let clip = MotionClip::rest(2, 1, 0.0, 30.0);
        assert!(matches!(forward_kinematics(&chain3(), &clip), Err(Error::Dimension(_))));
    }

    #[test]
    fn root_height_lifts_the_root() {
        let clip = MotionClip::rest(3, 1, 0.9, 30.0);
        let p = forward_kinematics(&chain3(), &clip).unwrap();
        assert_eq!(p.get(0, 0), [0.0, 0.9, 0.0]);
        assert_eq!(p.get(0, 2), [0.0, 2.9, 0.0]);
    }

    fn line(n: usize, f: impl Fn(usize) -> Vec3) -> JointPositions {
        JointPositions {
            frames: n,
            joints: 1,
            data: (0..n).map(f).collect(),
        }
    }

    #[test]
    fn finite_difference_examples() {
        let (v, a) = finite_difference(&line(5, |_| [1.0, 2.0, 3.0])).unwrap();
        assert!(v.data.iter().chain(&a.data).all(|p| *p == [0.0; 3]));

        let (v, a) = finite_difference(&line(5, |t| [t as f64, 0.0, 0.0])).unwrap();
        assert!(v.data.iter().all(|p| *p == [1.0, 0.0, 0.0]));
        assert!(a.data.iter().all(|p| *p == [0.0; 3]));

        let (v, a) = finite_difference(&line(4, |t| [(t * t) as f64, 0.0, 0.0])).unwrap();
        assert_eq!(v.data.iter().map(|p| p[0]).collect::<Vec<_>>(), vec![1.0, 3.0, 5.0]);
        assert_eq!(a.data.iter().map(|p| p[0]).collect::<Vec<_>>(), vec![2.0, 2.0]);

        assert_eq!(
            finite_difference(&line(2, |_| [0.0; 3])).unwrap_err(),
            Error::TooShort { needed: 3, got: 2 }
        );
    }

    #[test]
    fn auxiliary_loss_defaults_and_zero_case() {
        let w = AuxWeights::default();
        assert_eq!((w.pos, w.vel, w.acc, w.foot_vel, w.foot_pos), (0.02, 0.2, 0.2, 0.3, 0.05));
        let s = Skeleton::humanoid();
        let clip = MotionClip::rest(s.num_joints(), 6, 0.9, 30.0);
        let l = auxiliary_loss(&s, &clip, &clip, &w).unwrap();
        assert_eq!(l, AuxLoss::default());
    }

    #[test]
    fn constant_offset_only_moves_position_term() {
        // Offsetting the root offset shifts every joint by the same vector.
        let s = chain3();
        let mut shifted = s.clone();
        shifted.offsets[0] = [1.0, 0.0, 0.0];
        let clip = MotionClip::rest(3, 5, 0.0, 30.0);
        let p_gt = forward_kinematics(&s, &clip).unwrap();
        let p_hat = forward_kinematics(&shifted, &clip).unwrap();
        let (pos, _) = l1_terms(&p_hat, &p_gt, None);
        let (v_hat, v_gt) = (diff(&p_hat), diff(&p_gt));
        let (vel, _) = l1_terms(&v_hat, &v_gt, None);
        let (acc, _) = l1_terms(&diff(&v_hat), &diff(&v_gt), None);
        assert!((pos - 1.0).abs() < 1e-12);
        assert_eq!((vel, acc), (0.0, 0.0));
    }

    fn random_clip(joints: usize, frames: usize, seed: u64) -> MotionClip {
        let mut rng = crate::seeded(seed);
        let mut t = Tensor::randn(frames, ROOT_CHANNELS + 6 * joints, 0.3, &mut rng);
        for f in 0..frames {
            for j in 0..joints {
                let s = ROOT_CHANNELS + 6 * j;
                t.row_mut(f)[s] += 1.0;
                t.row_mut(f)[s + 4] += 1.0;
            }
        }
        MotionClip::new(30.0, t).unwrap()
    }

    #[test]
    fn auxiliary_gradient_matches_central_differences() {
        let s = Skeleton {
            parents: vec![None, Some(0), Some(1), Some(1)],
            offsets: vec![[0.0, 0.0, 0.0], [0.0, 0.5, 0.1], [0.3, 0.2, 0.0], [-0.2, 0.4, 0.1]],
            joint_names: (0..4).map(|i| alloc::format!("j{i}")).collect(),
            foot_joints: vec![2, 3],
            upper_body_joints: vec![1],
        };
        let w = AuxWeights::default();
        let hat = random_clip(4, 8, 1);
        let gt = random_clip(4, 8, 2);
        let (_, grad) = auxiliary_loss_with_grad(&s, &hat, &gt, &w).unwrap();
        let h = 1e-4;
        for i in 0..hat.frames.len() {
            let eval = |d: f64| {
                let mut c = hat.clone();
                c.frames.data_mut()[i] += d;
                auxiliary_loss(&s, &c, &gt, &w).unwrap().total
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = grad.data()[i];
            let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
            assert!(rel < 1e-3 || (fd - a).abs() < 1e-8, "entry {i}: fd {fd} analytic {a}");
        }
    }

    #[test]
    fn mirror_twice_is_identity() {
        let s = Skeleton::humanoid();
        let clip = random_clip(s.num_joints(), 3, 5);
        let back = mirror_clip(&s, &mirror_clip(&s, &clip));
        let p0 = forward_kinematics(&s, &clip).unwrap();
        let p1 = forward_kinematics(&s, &back).unwrap();
        let err = p0.data.iter().zip(&p1.data).map(|(a, b)| norm3(sub(*a, *b))).fold(0.0, f64::max);
        assert!(err < 1e-9);
    }

    #[test]
    fn integrate_root_accumulates_velocity() {
        let mut clip = MotionClip::rest(1, 3, 0.5, 30.0);
        for t in 0..3 {
            clip.frames.row_mut(t)[0] = 1.0;
            clip.frames.row_mut(t)[1] = -0.5;
        }
        let path = integrate_root(&clip);
        assert_eq!(path, vec![[0.0, 0.5, 0.0], [1.0, 0.5, -0.5], [2.0, 0.5, -1.0]]);
    }

    proptest! {
        #[test]
        fn rotation_matrices_are_proper(r in prop::array::uniform6(-2.0f64..2.0)) {
            prop_assume!(norm3([r[0], r[1], r[2]]) > 0.1);
            let a = [r[0], r[1], r[2]];
            let b = [r[3], r[4], r[5]];
            prop_assume!(norm3(cross(a, b)) > 0.05 * norm3(a) * norm3(b));
            let m = rot6d_to_matrix(&r).unwrap();
            let mtm = mat_mul(&transpose(&m), &m);
            assert_mat_close(&mtm, &IDENTITY, 1e-6);
            prop_assert!((determinant(&m) - 1.0).abs() < 1e-6);
        }

        #[test]
        fn fk_is_rotation_equivariant(
            axis in prop::array::uniform3(-1.0f64..1.0),
            angle in -3.0f64..3.0,
            seed in 0u64..1000,
        ) {
            prop_assume!(norm3(axis) > 0.1);
            let s = Skeleton::humanoid();
            let clip = random_clip(s.num_joints(), 2, seed);
            let q = axis_angle(axis, angle);
            let mut rotated = clip.clone();
            for t in 0..clip.len() {
                let root = rot6d_to_matrix(&clip.rot6d(t, 0)).unwrap();
                rotated.set_rot6d(t, 0, matrix_to_rot6d(&mat_mul(&q, &root)));
            }
            let p = forward_kinematics(&s, &clip).unwrap().root_relative();
            let pr = forward_kinematics(&s, &rotated).unwrap().root_relative();
            for (a, b) in p.data.iter().zip(&pr.data) {
                prop_assert!(norm3(sub(mat_vec(&q, *a), *b)) < 1e-6);
            }
        }

        #[test]
        fn finite_difference_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..100) {
            let mut rng = crate::seeded(seed);
            let p = JointPositions { frames: 6, joints: 2, data: (0..12).map(|_| {
                let t = Tensor::randn(1, 3, 1.0, &mut rng);
                [t.data()[0], t.data()[1], t.data()[2]]
            }).collect() };
            let q = JointPositions { frames: 6, joints: 2, data: p.data.iter().map(|x| [x[2], x[0] * 2.0, -x[1]]).collect() };
            let (vl, al) = finite_difference(&p.combine(a, &q, b)).unwrap();
            let (vp, ap) = finite_difference(&p).unwrap();
            let (vq, aq) = finite_difference(&q).unwrap();
            let (vr, ar) = (vp.combine(a, &vq, b), ap.combine(a, &aq, b));
            for (x, y) in vl.data.iter().zip(&vr.data).chain(al.data.iter().zip(&ar.data)) {
                prop_assert!(norm3(sub(*x, *y)) < 1e-12);
            }
        }
    }
}
