//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "IER1" | u32 version | 32-byte config hash | u8 stage | u32 block count
//! per block: u32 name length | name (UTF-8) | u32 rank | u32 dims… | f64 payload
//! ```
//!
//! Blocks are written in a fixed order so that saving a loaded checkpoint
//! reproduces the original bytes.

use std::fs;
use std::path::Path;

use crate::encoders::{Affine, EncoderParams};
use crate::error::{IerError, Result};
use crate::identifier::StepParams;
use crate::metrics::UNKNOWN_CATEGORY;
use crate::numerics::Matrix;
use crate::prototypes::{Modality, PrototypeBank, PrototypeSet};
use crate::referrer::Model;
use crate::tensor_io::ByteReader;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IER1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Training progress recorded in a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    /// Encoders after single-source correspondence training.
    Stage1 = 1,
    /// Prototypes and distinguishing steps added.
    Identifier = 2,
    /// Encoders refined on unconstrained scenes.
    Stage2 = 3,
}

impl Stage {
    fn from_u8(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Stage::Stage1),
            2 => Ok(Stage::Identifier),
            3 => Ok(Stage::Stage2),
            _ => Err(IerError::Format(format!("unknown checkpoint stage {v}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Identifier => "identifier",
            Stage::Stage2 => "stage2",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Block {
    fn new(name: &str, dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Block {
            name: name.to_string(),
            dims,
            data,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: [u8; 32],
    pub stage: Stage,
    pub blocks: Vec<Block>,
}

fn affine_blocks(prefix: &str, a: &Affine, out: &mut Vec<Block>) {
    out.push(Block::new(
        &format!("{prefix}.weight"),
        vec![a.weight.rows, a.weight.cols],
        a.weight.data.clone(),
    ));
    out.push(Block::new(&format!("{prefix}.bias"), vec![a.bias.len()], a.bias.clone()));
}

fn encoder_blocks(p: &EncoderParams) -> Vec<Block> {
    let mut out = Vec::new();
    affine_blocks("encoders.visual", &p.visual, &mut out);
    affine_blocks("encoders.audio_mid", &p.audio_mid, &mut out);
    affine_blocks("encoders.audio_out", &p.audio_out, &mut out);
    out
}

fn index_block(name: &str, values: &[usize]) -> Block {
    let data = values
        .iter()
        .map(|&v| if v == UNKNOWN_CATEGORY { -1.0 } else { v as f64 })
        .collect();
    Block::new(name, vec![values.len()], data)
}

impl Checkpoint {
    pub fn from_encoders(config_hash: [u8; 32], encoders: &EncoderParams) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config_hash,
            stage: Stage::Stage1,
            blocks: encoder_blocks(encoders),
        }
    }

    /// A full model plus the pseudo-class to category map used in evaluation.
    pub fn from_model(config_hash: [u8; 32], stage: Stage, model: &Model, clusters: &[usize]) -> Result<Self> {
        if stage == Stage::Stage1 {
            return Err(IerError::usage("a stage-1 checkpoint holds encoders only"));
        }
        model.check()?;
        if clusters.len() != model.k() {
            return Err(IerError::domain("one category per pseudo-class is required"));
        }
        let mut blocks = encoder_blocks(&model.encoders);
        let p = &model.prototypes;
        blocks.push(Block::new(
            "prototypes.visual",
            vec![p.visual.matrix.rows, p.visual.matrix.cols],
            p.visual.matrix.data.clone(),
        ));
        blocks.push(Block::new(
            "prototypes.audio",
            vec![p.audio.matrix.rows, p.audio.matrix.cols],
            p.audio.matrix.data.clone(),
        ));
        blocks.push(index_block("prototypes.assignments", &p.assignments));
        blocks.push(Block::new("prototypes.empty_clusters", vec![1], vec![p.empty_clusters as f64]));
        let (k, c, m) = (model.k(), model.encoders.embed_dim(), model.encoders.mid_dim());
        let weights = model.steps.steps.iter().flat_map(|a| a.weight.data.iter().copied()).collect();
        let biases = model.steps.steps.iter().flat_map(|a| a.bias.iter().copied()).collect();
        blocks.push(Block::new("steps.weight", vec![k, c, m], weights));
        blocks.push(Block::new("steps.bias", vec![k, c], biases));
        blocks.push(index_block("clusters.category", clusters));
        Ok(Checkpoint {
            version: CHECKPOINT_VERSION,
            config_hash,
            stage,
            blocks,
        })
    }

    pub fn block(&self, name: &str) -> Result<&Block> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| IerError::Format(format!("checkpoint has no block {name}")))
    }

    fn matrix(&self, name: &str) -> Result<Matrix> {
        let b = self.block(name)?;
        if b.dims.len() != 2 {
            return Err(IerError::Format(format!("block {name} is not a matrix")));
        }
        Ok(Matrix {
            rows: b.dims[0],
            cols: b.dims[1],
            data: b.data.clone(),
        })
    }

    fn vector(&self, name: &str) -> Result<Vec<f64>> {
        let b = self.block(name)?;
        if b.dims.len() != 1 {
            return Err(IerError::Format(format!("block {name} is not a vector")));
        }
        Ok(b.data.clone())
    }

    fn affine(&self, prefix: &str) -> Result<Affine> {
        let weight = self.matrix(&format!("{prefix}.weight"))?;
        let bias = self.vector(&format!("{prefix}.bias"))?;
        if bias.len() != weight.rows {
            return Err(IerError::Format(format!("{prefix}: bias does not match weight")));
        }
        Ok(Affine { weight, bias })
    }

    fn indices(&self, name: &str) -> Result<Vec<usize>> {
        self.vector(name)?
            .into_iter()
            .map(|v| {
                if v == -1.0 {
                    Ok(UNKNOWN_CATEGORY)
                } else if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(IerError::Format(format!("block {name} holds a non-index value {v}")))
                }
            })
            .collect()
    }

    pub fn encoders(&self) -> Result<EncoderParams> {
        let p = EncoderParams {
            visual: self.affine("encoders.visual")?,
            audio_mid: self.affine("encoders.audio_mid")?,
            audio_out: self.affine("encoders.audio_out")?,
        };
        p.check().map_err(|_| IerError::Format("encoder blocks have inconsistent shapes".into()))?;
        Ok(p)
    }

    pub fn model(&self) -> Result<Model> {
        if self.stage < Stage::Identifier {
            return Err(IerError::usage(format!(
                "checkpoint at {} holds no prototypes or steps; train the identifier first",
                self.stage.name()
            )));
        }
        let encoders = self.encoders()?;
        let prototypes = PrototypeSet {
            visual: PrototypeBank::new(Modality::Visual, self.matrix("prototypes.visual")?)?,
            audio: PrototypeBank::new(Modality::Audio, self.matrix("prototypes.audio")?)?,
            assignments: self.indices("prototypes.assignments")?,
            empty_clusters: self.indices("prototypes.empty_clusters")?.first().copied().unwrap_or(0),
        };
        let w = self.block("steps.weight")?;
        let bias = self.matrix("steps.bias")?;
        if w.dims.len() != 3 || bias.rows != w.dims[0] || bias.cols != w.dims[1] {
            return Err(IerError::Format("step blocks have inconsistent shapes".into()));
        }
        let (k, c, m) = (w.dims[0], w.dims[1], w.dims[2]);
        let steps = StepParams {
            steps: (0..k)
                .map(|n| Affine {
                    weight: Matrix {
                        rows: c,
                        cols: m,
                        data: w.data[n * c * m..(n + 1) * c * m].to_vec(),
                    },
                    bias: bias.row(n).to_vec(),
                })
                .collect(),
        };
        let model = Model {
            encoders,
            steps,
            prototypes,
        };
        model.check()?;
        Ok(model)
    }

    /// Category of every pseudo-class; `UNKNOWN_CATEGORY` for empty clusters.
    pub fn clusters(&self) -> Result<Vec<usize>> {
        self.indices("clusters.category")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.push(self.stage as u8);
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for b in &self.blocks {
            out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
            out.extend_from_slice(b.name.as_bytes());
            out.extend_from_slice(&(b.dims.len() as u32).to_le_bytes());
            for &d in &b.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &b.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(IerError::Format("not an IER1 checkpoint".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(IerError::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut config_hash = [0u8; 32];
        config_hash.copy_from_slice(r.take(32)?);
        let stage = Stage::from_u8(r.u8()?)?;
        let count = r.u32()? as usize;
        let mut blocks = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| IerError::Format("block name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| IerError::Format(format!("block {name} is too large")))?;
            if n.saturating_mul(8) > bytes.len() {
                return Err(IerError::Format(format!("block {name} exceeds the file")));
            }
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            blocks.push(Block { name, dims, data });
        }
        if !r.is_done() {
            return Err(IerError::Format("trailing bytes after the last block".into()));
        }
        Ok(Checkpoint {
            version,
            config_hash,
            stage,
            blocks,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| IerError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| IerError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
