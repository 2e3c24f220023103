//! Conditioning embeddings: deterministic toy text/image encoders, external
//! vector ingestion, and the cosine alignment loss.
//!
//! The toy encoders are frozen functions. The text side hashes whitespace
//! tokens to Gaussian vectors; the image side average-pools to 8×8 and applies
//! a fixed random projection. Both outputs are L2-normalized.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::autodiff::{self, PoolCells, Tape, Var};
use crate::error::{Error, Result};
use crate::image::{Image, SeededRng};
use crate::tensor_io::RawTensor;

pub const DEFAULT_EMBED_DIM: usize = 16;
/// Seed of the frozen image projection.
pub const IMAGE_PROJECTION_SEED: u64 = 0x5EED_1A6E;
const POOL: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingSource {
    ToyText,
    ToyImage,
    ExternalFile,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningEmbedding {
    values: Vec<f64>,
    source: EmbeddingSource,
}

impl ConditioningEmbedding {
    pub fn new(values: Vec<f64>, source: EmbeddingSource) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Parameter("embedding must be non-empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invariant("embedding has non-finite values".into()));
        }
        Ok(Self { values, source })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn source(&self) -> EmbeddingSource {
        self.source
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        RawTensor::new(vec![self.dim()], self.values.clone())?.write(path)
    }
}

/// A clinical label such as `"3 B-lines, irregular pleura"`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelPrompt(String);

impl LabelPrompt {
    pub fn new(text: &str) -> Result<Self> {
        let t = text.trim();
        if t.is_empty() {
            return Err(Error::Parameter("label is empty".into()));
        }
        Ok(Self(t.to_string()))
    }

    pub fn text(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for LabelPrompt {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn token_seed(token: &str) -> u64 {
    let digest = Sha256::digest(token.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn toy_text_embed(label: &LabelPrompt, dim: usize) -> Result<ConditioningEmbedding> {
    if dim == 0 {
        return Err(Error::Parameter("embedding dim must be positive".into()));
    }
    let tokens: Vec<&str> = label.text().split_whitespace().collect();
    let mut acc = vec![0.0; dim];
    for tok in &tokens {
        let mut rng = SeededRng::new(token_seed(tok));
        acc.iter_mut().for_each(|a| *a += rng.normal());
    }
    acc.iter_mut().for_each(|a| *a /= tokens.len() as f64);
    let norm = autodiff::l2(&acc);
    if norm == 0.0 {
        return Err(Error::UndefinedCosine);
    }
    ConditioningEmbedding::new(
        acc.into_iter().map(|a| a / norm).collect(),
        EmbeddingSource::ToyText,
    )
}

/// Frozen image encoder: 8×8 average pool, fixed Gaussian projection, L2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyImageEmbedder {
    dim: usize,
    /// Row-major `(dim, 64)`.
    projection: Vec<f64>,
}

impl ToyImageEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dim must be positive");
        let mut rng = SeededRng::new(seed);
        let scale = 1.0 / (POOL * POOL) as f64;
        let projection = (0..dim * POOL * POOL)
            .map(|_| rng.normal() * scale.sqrt())
            .collect();
        Self { dim, projection }
    }

    pub fn with_dim(dim: usize) -> Self {
        Self::new(dim, IMAGE_PROJECTION_SEED)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Records the embedding of `pixels`, a flat `(height, width)` node, on `tape`.
    pub fn embed_on_tape(&self, tape: &mut Tape, pixels: Var, width: usize, height: usize) -> Result<Var> {
        let pooled = tape.avg_pool(pixels, PoolCells::grid(height, width, POOL, POOL));
        let column = tape.reshape(pooled, vec![POOL * POOL, 1]);
        let proj = tape.constant(self.projection.clone(), vec![self.dim, POOL * POOL]);
        let z = tape.matmul(proj, column);
        let z = tape.reshape(z, vec![self.dim]);
        tape.l2_normalize(z)
    }

    pub fn embed(&self, img: &Image) -> Result<ConditioningEmbedding> {
        let mut tape = Tape::new();
        let x = tape.constant(img.pixels().to_vec(), vec![img.len()]);
        let z = self.embed_on_tape(&mut tape, x, img.width(), img.height())?;
        ConditioningEmbedding::new(tape.value(z).to_vec(), EmbeddingSource::ToyImage)
    }

    /// Vector-Jacobian product of the embedding with `upstream`, as an image.
    pub fn pixel_vjp(&self, img: &Image, upstream: &[f64]) -> Result<Image> {
        if upstream.len() != self.dim {
            return Err(Error::Invariant(format!(
                "upstream has {} entries, embedding dim is {}",
                upstream.len(),
                self.dim
            )));
        }
        let mut tape = Tape::new();
        let x = tape.param(img.pixels().to_vec(), vec![img.len()]);
        let z = self.embed_on_tape(&mut tape, x, img.width(), img.height())?;
        let mut grads = tape.backward(z, upstream);
        let g = grads.take(x).unwrap_or_else(|| vec![0.0; img.len()]);
        Ok(Image::from_parts(img.width(), img.height(), g))
    }
}

pub fn load_external_embedding(path: &Path, expected_dim: usize) -> Result<ConditioningEmbedding> {
    let t = RawTensor::read(path)?;
    if t.rank() != 1 {
        return Err(Error::Format(format!(
            "embedding file {} has rank {}, expected 1",
            path.display(),
            t.rank()
        )));
    }
    if t.dims[0] != expected_dim {
        return Err(Error::Format(format!(
            "embedding file {} has dim {}, config expects dim {expected_dim}",
            path.display(),
            t.dims[0]
        )));
    }
    ConditioningEmbedding::new(t.data, EmbeddingSource::ExternalFile)
}

/// `1 - cos(z_img, z_txt)`, in `[0, 2]`.
pub fn cosine_alignment_loss(z_img: &ConditioningEmbedding, z_txt: &ConditioningEmbedding) -> Result<f64> {
    check_dims(z_img, z_txt)?;
    autodiff::cosine_distance(z_img.values(), z_txt.values())
}

/// Gradient of [`cosine_alignment_loss`] with respect to `z_img`.
pub fn cosine_alignment_grad(z_img: &ConditioningEmbedding, z_txt: &ConditioningEmbedding) -> Result<Vec<f64>> {
    check_dims(z_img, z_txt)?;
    autodiff::cosine_distance_grad(z_img.values(), z_txt.values())
}

fn check_dims(a: &ConditioningEmbedding, b: &ConditioningEmbedding) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Invariant(format!(
            "embedding dims differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Reads `label<TAB>path` lines; relative paths resolve against the manifest's directory.
pub fn read_embedding_manifest(path: &Path) -> Result<Vec<(LabelPrompt, PathBuf)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|(n, line)| {
            let (label, file) = line.split_once('\t').ok_or_else(|| {
                Error::Format(format!("{}:{}: expected label<TAB>path", path.display(), n + 1))
            })?;
            Ok((LabelPrompt::new(label)?, base.join(file.trim())))
        })
        .collect()
}
