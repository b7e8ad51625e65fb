//! Binary file formats. Everything little-endian; floats stored as f32.
//! Layouts are described in FORMATS.md at the repository root.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use motionstream_core::audio::AudioTokens;
use motionstream_core::graph::ParamStore;
use motionstream_core::kinematics::{MotionClip, Skeleton};
use motionstream_core::tensor::Tensor;
use motionstream_core::tokenizer::{Codebooks, TokenGrid};
use thiserror::Error;

pub const MOTION_EXT: &str = "msm";
pub const TOKENS_EXT: &str = "mtk";
pub const AUDIO_EXT: &str = "mat";
pub const CODEBOOK_EXT: &str = "mcb";
pub const CHECKPOINT_EXT: &str = "mck";

const MOTION_MAGIC: &[u8; 4] = b"MSMO";
const TOKENS_MAGIC: &[u8; 4] = b"MSTK";
const AUDIO_MAGIC: &[u8; 4] = b"MSAU";
const CODEBOOK_MAGIC: &[u8; 4] = b"MSCB";
const CHECKPOINT_MAGIC: &[u8; 4] = b"MSCK";

pub const MOTION_VERSION: u16 = 1;
pub const TOKENS_VERSION: u16 = 1;
pub const AUDIO_VERSION: u16 = 1;
pub const CODEBOOK_VERSION: u16 = 1;
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("not a {expected} file (bad magic)")]
    Magic { expected: &'static str },
    #[error("{kind} file version {found} is newer than supported {supported}")]
    Version { kind: &'static str, found: u16, supported: u16 },
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Core(#[from] motionstream_core::error::Error),
}

pub type Result<T> = std::result::Result<T, FormatError>;

fn malformed(msg: impl Into<String>) -> FormatError {
    FormatError::Malformed(msg.into())
}

// ---------------------------------------------------------------------------
// Primitive writers / readers

struct W<'a>(&'a mut Vec<u8>);

impl W<'_> {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) {
        self.bytes(&(v as u32).to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.bytes(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f64) {
        self.bytes(&(v as f32).to_le_bytes());
    }
    fn str16(&mut self, s: &str) {
        self.u16(s.len() as u16);
        self.bytes(s.as_bytes());
    }
    fn str32(&mut self, s: &str) {
        self.u32(s.len());
        self.bytes(s.as_bytes());
    }
}

struct R<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> R<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(malformed(format!("truncated at byte {} (need {n} more)", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64)
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| malformed("size overflow"))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect())
    }
    fn u16s(&mut self, n: usize) -> Result<Vec<u16>> {
        let raw = self.take(n.checked_mul(2).ok_or_else(|| malformed("size overflow"))?)?;
        Ok(raw.chunks_exact(2).map(|c| u16::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn str16(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| malformed("string is not utf-8"))
    }
    fn str32(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| malformed("string is not utf-8"))
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(malformed(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
    fn header(&mut self, magic: &[u8; 4], kind: &'static str, supported: u16) -> Result<u16> {
        if self.take(4).map_err(|_| FormatError::Magic { expected: kind })? != magic {
            return Err(FormatError::Magic { expected: kind });
        }
        let v = self.u16()?;
        if v > supported {
            return Err(FormatError::Version { kind, found: v, supported });
        }
        Ok(v)
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

fn write_all(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::File::create(path)?.write_all(bytes)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Motion clip

/// Skeleton plus frames, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionFile {
    pub skeleton: Skeleton,
    pub clip: MotionClip,
}

/// Foot and upper-body joint lists are not stored; they are recovered from
/// joint names.
fn skeleton_from_parts(names: Vec<String>, parents: Vec<Option<usize>>, offsets: Vec<[f64; 3]>) -> Result<Skeleton> {
    let humanoid = Skeleton::humanoid();
    if names == humanoid.joint_names && parents == humanoid.parents {
        return Ok(Skeleton { offsets, ..humanoid });
    }
    let has = |n: &str, keys: &[&str]| keys.iter().any(|k| n.contains(k));
    let feet = names.iter().enumerate().filter(|(_, n)| has(n, &["ankle", "toe", "heel", "foot"])).map(|(i, _)| i).collect();
    let upper = names
        .iter()
        .enumerate()
        .filter(|(_, n)| has(n, &["spine", "chest", "neck", "head", "shoulder", "elbow", "wrist", "hand"]))
        .map(|(i, _)| i)
        .collect();
    Ok(Skeleton::new(parents, offsets, names, feet, upper)?)
}

pub fn encode_motion(skeleton: &Skeleton, clip: &MotionClip) -> Result<Vec<u8>> {
    skeleton.validate()?;
    clip.validate()?;
    if clip.frames.cols() != skeleton.frame_dim() {
        return Err(malformed("frame width does not match the skeleton"));
    }
    let mut buf = Vec::with_capacity(64 + clip.frames.len() * 4);
    let mut w = W(&mut buf);
    w.bytes(MOTION_MAGIC);
    w.u16(MOTION_VERSION);
    w.f32(clip.fps);
    w.u32(skeleton.num_joints());
    w.u32(clip.len());
    for name in &skeleton.joint_names {
        w.str16(name);
    }
    for p in &skeleton.parents {
        w.i32(p.map(|p| p as i32).unwrap_or(-1));
    }
    for o in &skeleton.offsets {
        o.iter().for_each(|v| w.f32(*v));
    }
    clip.frames.data().iter().for_each(|v| w.f32(*v));
    Ok(buf)
}

pub fn decode_motion(bytes: &[u8]) -> Result<MotionFile> {
    let mut r = R::new(bytes);
    r.header(MOTION_MAGIC, "motion", MOTION_VERSION)?;
    let fps = r.f32()?;
    let j = r.u32()?;
    let n = r.u32()?;
    let names = (0..j).map(|_| r.str16()).collect::<Result<Vec<_>>>()?;
    let parents = (0..j)
        .map(|_| {
            let p = r.i32()?;
            Ok(if p < 0 { None } else { Some(p as usize) })
        })
        .collect::<Result<Vec<_>>>()?;
    let offsets = (0..j).map(|_| Ok([r.f32()?, r.f32()?, r.f32()?])).collect::<Result<Vec<_>>>()?;
    let skeleton = skeleton_from_parts(names, parents, offsets)?;
    let d = skeleton.frame_dim();
    let data = r.f32s(n * d)?;
    r.finish()?;
    let clip = MotionClip::new(fps, Tensor::from_vec(n, d, data))?;
    Ok(MotionFile { skeleton, clip })
}

pub fn write_motion(path: &Path, skeleton: &Skeleton, clip: &MotionClip) -> Result<()> {
    write_all(path, &encode_motion(skeleton, clip)?)
}

pub fn read_motion(path: &Path) -> Result<MotionFile> {
    decode_motion(&read_all(path)?)
}

// ---------------------------------------------------------------------------
// Token grid

pub fn encode_tokens(grid: &TokenGrid) -> Result<Vec<u8>> {
    grid.validate()?;
    let mut buf = Vec::with_capacity(22 + grid.indices.len() * 2);
    let mut w = W(&mut buf);
    w.bytes(TOKENS_MAGIC);
    w.u16(TOKENS_VERSION);
    w.u32(grid.steps);
    w.u32(grid.layers);
    w.u32(grid.parts);
    w.u32(grid.codebook_size);
    grid.indices.iter().for_each(|v| w.u16(*v));
    Ok(buf)
}

pub fn decode_tokens(bytes: &[u8]) -> Result<TokenGrid> {
    let mut r = R::new(bytes);
    r.header(TOKENS_MAGIC, "token grid", TOKENS_VERSION)?;
    let (n, q, p, k) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    let indices = r.u16s(n * q * p)?;
    r.finish()?;
    Ok(TokenGrid::new(n, q, p, k, indices)?)
}

pub fn write_tokens(path: &Path, grid: &TokenGrid) -> Result<()> {
    write_all(path, &encode_tokens(grid)?)
}

pub fn read_tokens(path: &Path) -> Result<TokenGrid> {
    decode_tokens(&read_all(path)?)
}

// ---------------------------------------------------------------------------
// Audio tokens

pub fn encode_audio(audio: &AudioTokens) -> Result<Vec<u8>> {
    audio.validate()?;
    let mut buf = Vec::with_capacity(18 + audio.ids.len() * 2);
    let mut w = W(&mut buf);
    w.bytes(AUDIO_MAGIC);
    w.u16(AUDIO_VERSION);
    w.u32(audio.frames());
    w.u32(audio.layers);
    w.u32(audio.codebook_size);
    audio.ids.iter().for_each(|v| w.u16(*v));
    Ok(buf)
}

pub fn decode_audio(bytes: &[u8]) -> Result<AudioTokens> {
    let mut r = R::new(bytes);
    r.header(AUDIO_MAGIC, "audio token", AUDIO_VERSION)?;
    let (frames, layers, k) = (r.u32()?, r.u32()?, r.u32()?);
    let ids = r.u16s(frames * layers)?;
    r.finish()?;
    let a = AudioTokens {
        layers,
        codebook_size: k,
        ids,
    };
    a.validate()?;
    Ok(a)
}

pub fn write_audio(path: &Path, audio: &AudioTokens) -> Result<()> {
    write_all(path, &encode_audio(audio)?)
}

pub fn read_audio(path: &Path) -> Result<AudioTokens> {
    decode_audio(&read_all(path)?)
}

// ---------------------------------------------------------------------------
// Codebooks

pub fn encode_codebooks(c: &Codebooks) -> Result<Vec<u8>> {
    c.validate()?;
    let mut buf = Vec::new();
    let mut w = W(&mut buf);
    w.bytes(CODEBOOK_MAGIC);
    w.u16(CODEBOOK_VERSION);
    w.u32(c.size);
    w.u32(c.dim);
    w.u32(c.depth);
    w.u32(c.parts);
    for t in &c.tables {
        t.data().iter().for_each(|v| w.f32(*v));
    }
    Ok(buf)
}

pub fn decode_codebooks(bytes: &[u8]) -> Result<Codebooks> {
    let mut r = R::new(bytes);
    r.header(CODEBOOK_MAGIC, "codebook", CODEBOOK_VERSION)?;
    let (size, dim, depth, parts) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    let tables = (0..depth * parts).map(|_| Ok(Tensor::from_vec(size, dim, r.f32s(size * dim)?))).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    let c = Codebooks {
        size,
        dim,
        depth,
        parts,
        tables,
    };
    c.validate()?;
    Ok(c)
}

pub fn write_codebooks(path: &Path, c: &Codebooks) -> Result<()> {
    write_all(path, &encode_codebooks(c)?)
}

pub fn read_codebooks(path: &Path) -> Result<Codebooks> {
    decode_codebooks(&read_all(path)?)
}

// ---------------------------------------------------------------------------
// Checkpoints

/// A model kind tag, JSON metadata (configs, dimensions) and named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.to_string(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push_store(&mut self, prefix: &str, store: &ParamStore) {
        for id in store.ids() {
            self.tensors.push((format!("{prefix}{}", store.name(id)), store.get(id).clone()));
        }
    }

    /// Copies stored tensors into `store`, matching names and shapes.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = format!("{prefix}{}", store.name(id));
            let t = self.tensor(&name)?;
            if t.shape() != store.get(id).shape() {
                return Err(malformed(format!("tensor {name} has shape {:?}, model expects {:?}", t.shape(), store.get(id).shape())));
            }
            *store.get_mut(id) = t.clone();
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t).ok_or_else(|| malformed(format!("missing tensor {name}")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(malformed(format!("checkpoint holds a {}, expected a {kind}", self.kind)));
        }
        Ok(())
    }

    pub fn meta_field<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self.meta.get(key).ok_or_else(|| malformed(format!("checkpoint metadata lacks {key}")))?;
        serde_json::from_value(v.clone()).map_err(|e| malformed(format!("checkpoint metadata {key}: {e}")))
    }
}

pub fn encode_checkpoint(c: &Checkpoint) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    let mut w = W(&mut buf);
    w.bytes(CHECKPOINT_MAGIC);
    w.u16(CHECKPOINT_VERSION);
    w.str16(&c.kind);
    w.str32(&serde_json::to_string(&c.meta).map_err(|e| malformed(e.to_string()))?);
    w.u32(c.tensors.len());
    for (name, t) in &c.tensors {
        w.str16(name);
        w.u32(t.rows());
        w.u32(t.cols());
        t.data().iter().for_each(|v| w.f32(*v));
    }
    Ok(buf)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = R::new(bytes);
    r.header(CHECKPOINT_MAGIC, "checkpoint", CHECKPOINT_VERSION)?;
    let kind = r.str16()?;
    let meta = serde_json::from_str(&r.str32()?).map_err(|e| malformed(format!("checkpoint metadata: {e}")))?;
    let n = r.u32()?;
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let name = r.str16()?;
        let (rows, cols) = (r.u32()?, r.u32()?);
        tensors.push((name, Tensor::from_vec(rows, cols, r.f32s(rows * cols)?)));
    }
    r.finish()?;
    Ok(Checkpoint { kind, meta, tensors })
}

pub fn write_checkpoint(path: &Path, c: &Checkpoint) -> Result<()> {
    write_all(path, &encode_checkpoint(c)?)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_all(path)?)
}

/// Rounds every value through f32, as a save/load cycle would.
pub fn f32_round(t: &Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}
