//! Binary artifact files and the configuration hash they embed.
//!
//! Both formats are little-endian and end with a SHA-256 digest of every
//! preceding byte, so truncation and corruption are caught on load.
//!
//! Echo profiles (`EPRF`):
//!
//! ```text
//! magic "EPRF" | version u16 | rows u32 | cols u32 | channels u16 | origin i32
//! | config_hash [u8; 32] | f32 data, channel by channel, each row-major
//! | sha256 [u8; 32]
//! ```
//!
//! Models (`GZMD`):
//!
//! ```text
//! magic "GZMD" | version u16 | kind u8 | frames u32 | rows u32 | channels u32
//! | config_hash [u8; 32] | normalization | calibration | parameters
//! | sha256 [u8; 32]
//! ```

use std::fs;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::echo::{ChannelId, EchoProfile, ProfileSet};
use crate::error::{Error, Result};
use crate::model::{
    Calibration, Ensemble, FeatureLayout, ModelArtifact, ModelKind, ModelParams, Normalization, Tree, TreeNode,
};

pub const EPRF_MAGIC: &[u8; 4] = b"EPRF";
pub const GZMD_MAGIC: &[u8; 4] = b"GZMD";
pub const FORMAT_VERSION: u16 = 1;

pub type ConfigHash = [u8; 32];

/// SHA-256 of the canonical JSON encoding of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<ConfigHash> {
    let bytes = serde_json::to_vec(value).map_err(|e| Error::config(format!("cannot encode config: {e}")))?;
    Ok(Sha256::digest(&bytes).into())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.bytes(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn len32(&mut self, n: usize) -> Result<()> {
        self.u32(u32::try_from(n).map_err(|_| Error::contract("length exceeds u32"))?);
        Ok(())
    }

    fn finish(mut self) -> Vec<u8> {
        let digest = Sha256::digest(&self.buf);
        self.buf.extend_from_slice(&digest);
        self.buf
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    /// Checks the trailing digest and the magic.
    fn open(bytes: &'a [u8], magic: &[u8; 4], path: &'a Path) -> Result<Self> {
        if bytes.len() < 4 + 32 {
            return Err(Error::format(path, "file too short"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if &body[..4] != magic {
            return Err(Error::format(path, format!("bad magic, expected {}", String::from_utf8_lossy(magic))));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::format(path, "checksum mismatch (truncated or corrupted)"));
        }
        Ok(Reader { buf: body, pos: 4, path })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(self.path, "unexpected end of data"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn hash(&mut self) -> Result<ConfigHash> {
        Ok(self.take(32)?.try_into().unwrap())
    }

    fn version(&mut self) -> Result<()> {
        let v = self.u16()?;
        if v != FORMAT_VERSION {
            return Err(Error::format(self.path, format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(self.path, "trailing bytes after payload"));
        }
        Ok(())
    }
}

fn check_hash(path: &Path, found: ConfigHash, expected: Option<&ConfigHash>) -> Result<()> {
    match expected {
        Some(e) if *e != found => Err(Error::format(
            path,
            format!("config hash {} does not match {}", hex::encode(found), hex::encode(e)),
        )),
        _ => Ok(()),
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_eprf(set: &ProfileSet, hash: &ConfigHash) -> Result<Vec<u8>> {
    let first = set
        .profiles
        .first()
        .ok_or_else(|| Error::EmptyInput("no profiles to write".into()))?;
    let (rows, cols) = (first.rows, first.cols);
    if set.profiles.iter().any(|p| p.rows != rows || p.cols != cols) {
        return Err(Error::contract("profiles differ in shape"));
    }
    let mut w = Writer::default();
    w.bytes(EPRF_MAGIC);
    w.u16(FORMAT_VERSION);
    w.len32(rows)?;
    w.len32(cols)?;
    w.u16(u16::try_from(set.profiles.len()).map_err(|_| Error::contract("too many channels"))?);
    w.i32(set.origin());
    w.bytes(hash);
    for p in &set.profiles {
        for &v in &p.data {
            w.f32(v);
        }
    }
    Ok(w.finish())
}

pub fn decode_eprf(bytes: &[u8], path: &Path, expected: Option<&ConfigHash>) -> Result<(ProfileSet, ConfigHash)> {
    let mut r = Reader::open(bytes, EPRF_MAGIC, path)?;
    r.version()?;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let channels = r.u16()? as usize;
    let origin = r.i32()?;
    let hash = r.hash()?;
    check_hash(path, hash, expected)?;
    let need = rows
        .checked_mul(cols)
        .and_then(|v| v.checked_mul(channels))
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::format(path, "header dimensions overflow"))?;
    if r.buf.len() - r.pos != need {
        return Err(Error::format(path, format!("payload holds {} bytes, header implies {need}", r.buf.len() - r.pos)));
    }
    let mut profiles = Vec::with_capacity(channels);
    for ch in 0..channels {
        let data = (0..rows * cols).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        profiles.push(EchoProfile {
            rows,
            cols,
            data,
            channel: ChannelId::from_index(ch),
            range_origin_px: origin,
        });
    }
    r.done()?;
    Ok((ProfileSet { profiles }, hash))
}

pub fn write_eprf(path: &Path, set: &ProfileSet, hash: &ConfigHash) -> Result<()> {
    write_file(path, &encode_eprf(set, hash)?)
}

pub fn read_eprf(path: &Path, expected: Option<&ConfigHash>) -> Result<(ProfileSet, ConfigHash)> {
    decode_eprf(&read_file(path)?, path, expected)
}

pub fn encode_model(model: &ModelArtifact, hash: &ConfigHash) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.bytes(GZMD_MAGIC);
    w.u16(FORMAT_VERSION);
    w.u8(model.kind().code());
    let l = model.layout;
    w.len32(l.frames)?;
    w.len32(l.rows)?;
    w.len32(l.channels)?;
    w.bytes(hash);
    let d = l.dims();
    if model.normalization.mean.len() != d || model.normalization.std.len() != d {
        return Err(Error::contract("normalization length differs from the layout"));
    }
    for &v in model.normalization.mean.iter().chain(&model.normalization.std) {
        w.f32(v);
    }
    let c = &model.calibration;
    for v in [c.matrix[0][0], c.matrix[0][1], c.matrix[1][0], c.matrix[1][1], c.offset[0], c.offset[1]] {
        w.f64(v);
    }
    w.u8(u8::from(c.offset_only));
    match &model.params {
        ModelParams::Linear { weights, intercept } => {
            if weights.len() != d {
                return Err(Error::contract("weight count differs from the layout"));
            }
            w.f64(intercept[0]);
            w.f64(intercept[1]);
            for wj in weights {
                w.f64(wj[0]);
                w.f64(wj[1]);
            }
        }
        ModelParams::Gbrt { ensembles } => {
            for e in ensembles {
                w.f64(e.base);
                w.f64(e.learning_rate);
                w.len32(e.trees.len())?;
                for t in &e.trees {
                    w.len32(t.nodes.len())?;
                    for node in &t.nodes {
                        match *node {
                            TreeNode::Leaf { value } => {
                                w.u8(0);
                                w.f64(value);
                            }
                            TreeNode::Split {
                                feature,
                                threshold,
                                left,
                                right,
                                gain,
                            } => {
                                w.u8(1);
                                w.u32(feature);
                                w.f64(threshold);
                                w.u32(left);
                                w.u32(right);
                                w.f64(gain);
                            }
                        }
                    }
                }
                w.len32(e.train_mse.len())?;
                for &v in &e.train_mse {
                    w.f64(v);
                }
            }
        }
    }
    Ok(w.finish())
}

pub fn decode_model(bytes: &[u8], path: &Path, expected: Option<&ConfigHash>) -> Result<(ModelArtifact, ConfigHash)> {
    let mut r = Reader::open(bytes, GZMD_MAGIC, path)?;
    r.version()?;
    let kind = ModelKind::from_code(r.u8()?).ok_or_else(|| Error::format(path, "unknown model kind"))?;
    let layout = FeatureLayout {
        frames: r.u32()? as usize,
        rows: r.u32()? as usize,
        channels: r.u32()? as usize,
    };
    let hash = r.hash()?;
    check_hash(path, hash, expected)?;
    let d = layout.dims();
    if d == 0 || d > r.buf.len() {
        return Err(Error::format(path, "implausible feature dimensions"));
    }
    let mean = (0..d).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
    let std = (0..d).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
    if std.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::format(path, "non-positive normalization std"));
    }
    let m = [r.f64()?, r.f64()?, r.f64()?, r.f64()?, r.f64()?, r.f64()?];
    let calibration = Calibration {
        matrix: [[m[0], m[1]], [m[2], m[3]]],
        offset: [m[4], m[5]],
        offset_only: r.u8()? != 0,
    };
    let params = match kind {
        ModelKind::Linear => {
            let intercept = [r.f64()?, r.f64()?];
            let weights = (0..d).map(|_| Ok([r.f64()?, r.f64()?])).collect::<Result<Vec<_>>>()?;
            ModelParams::Linear { weights, intercept }
        }
        ModelKind::Gbrt => {
            let mut read_ensemble = || -> Result<Ensemble> {
                let base = r.f64()?;
                let learning_rate = r.f64()?;
                let n_trees = r.u32()? as usize;
                if n_trees == 0 {
                    return Err(Error::format(path, "ensemble without trees"));
                }
                let mut trees = Vec::with_capacity(n_trees.min(1 << 16));
                for _ in 0..n_trees {
                    let n_nodes = r.u32()? as usize;
                    let mut nodes = Vec::with_capacity(n_nodes.min(1 << 16));
                    for _ in 0..n_nodes {
                        nodes.push(match r.u8()? {
                            0 => TreeNode::Leaf { value: r.f64()? },
                            1 => TreeNode::Split {
                                feature: r.u32()?,
                                threshold: r.f64()?,
                                left: r.u32()?,
                                right: r.u32()?,
                                gain: r.f64()?,
                            },
                            t => return Err(Error::format(path, format!("unknown node tag {t}"))),
                        });
                    }
                    validate_tree(&nodes, d).map_err(|e| Error::format(path, e))?;
                    trees.push(Tree { nodes });
                }
                let n_mse = r.u32()? as usize;
                let train_mse = (0..n_mse).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                Ok(Ensemble {
                    base,
                    learning_rate,
                    trees,
                    train_mse,
                })
            };
            let a = read_ensemble()?;
            let b = read_ensemble()?;
            ModelParams::Gbrt { ensembles: [a, b] }
        }
    };
    r.done()?;
    Ok((
        ModelArtifact {
            layout,
            normalization: Normalization { mean, std },
            params,
            calibration,
        },
        hash,
    ))
}

/// Children must point forward inside the node list, so every walk ends.
fn validate_tree(nodes: &[TreeNode], d: usize) -> std::result::Result<(), String> {
    if nodes.is_empty() {
        return Err("empty tree".into());
    }
    for (i, n) in nodes.iter().enumerate() {
        match *n {
            TreeNode::Leaf { value } if !value.is_finite() => return Err("non-finite leaf".into()),
            TreeNode::Split { feature, left, right, .. } => {
                let ok = |c: u32| (c as usize) > i && (c as usize) < nodes.len();
                if (feature as usize) >= d || !ok(left) || !ok(right) {
                    return Err(format!("node {i} has invalid links"));
                }
            }
            _ => {}
        }
    }
    Ok(())
}

pub fn write_model(path: &Path, model: &ModelArtifact, hash: &ConfigHash) -> Result<()> {
    write_file(path, &encode_model(model, hash)?)
}

pub fn read_model(path: &Path, expected: Option<&ConfigHash>) -> Result<(ModelArtifact, ConfigHash)> {
    decode_model(&read_file(path)?, path, expected)
}
