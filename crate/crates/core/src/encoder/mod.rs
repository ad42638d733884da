//! Slice encoders: map a 2D slice onto a grid of `T = gh * gw` tokens of width `d`.
//!
//! Two backends stand in for a pretrained image encoder:
//! - [`EncoderKind::PatchMean`]: hand-built patch statistics, analytically predictable.
//! - [`EncoderKind::ToyVit`]: patch embedding plus pre-norm transformer blocks with
//!   seeded, untrained weights.
//!
//! Both emit per-token standardised vectors (zero mean, unit variance across channels).

mod patch_mean;
mod toy_vit;

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{resize_slice, Grid2, Slice2};
use crate::tensor::Matrix;

pub use patch_mean::{patch_statistics, PATCH_STATS};
pub use toy_vit::ToyVit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EncoderKind {
    PatchMean,
    ToyVit,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    /// Slices are resized to `input_size x input_size` before encoding.
    pub input_size: usize,
    pub patch: usize,
    pub channels: usize,
    /// Transformer depth (ToyVit only).
    #[serde(default)]
    pub depth: usize,
    /// Attention heads (ToyVit only).
    #[serde(default = "one")]
    pub heads: usize,
    #[serde(default)]
    pub weight_seed: u64,
}

fn one() -> usize {
    1
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec::patch_mean()
    }
}

impl EncoderSpec {
    /// 64x64 input, 8x8 patches (64 tokens), 32 channels.
    pub fn patch_mean() -> Self {
        EncoderSpec {
            kind: EncoderKind::PatchMean,
            input_size: 64,
            patch: 8,
            channels: 32,
            depth: 0,
            heads: 1,
            weight_seed: 0,
        }
    }

    pub fn toy_vit(channels: usize, depth: usize, heads: usize, weight_seed: u64) -> Self {
        EncoderSpec {
            kind: EncoderKind::ToyVit,
            input_size: 64,
            patch: 8,
            channels,
            depth,
            heads,
            weight_seed,
        }
    }

    /// Named presets: `patchmean`, and the ToyVit size ladder `tiny`, `small`,
    /// `base_plus`, `large`.
    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name {
            "patchmean" | "patch_mean" => EncoderSpec::patch_mean(),
            "tiny" => EncoderSpec::toy_vit(32, 1, 2, 0),
            "small" => EncoderSpec::toy_vit(32, 2, 4, 0),
            "base_plus" | "base+" => EncoderSpec::toy_vit(48, 2, 4, 0),
            "large" => EncoderSpec::toy_vit(64, 4, 4, 0),
            other => return Err(Error::InvalidEncoderSpec(format!("unknown preset {other:?}"))),
        })
    }

    pub const PRESETS: [&'static str; 4] = ["tiny", "small", "base_plus", "large"];

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidEncoderSpec(m));
        if self.input_size == 0 || self.patch == 0 || self.channels == 0 {
            return bad("input_size, patch and channels must be positive".into());
        }
        if self.input_size % self.patch != 0 {
            return bad(format!("input_size {} not divisible by patch {}", self.input_size, self.patch));
        }
        match self.kind {
            EncoderKind::PatchMean if self.patch < 2 => bad("PatchMean needs patch >= 2".into()),
            EncoderKind::ToyVit if self.heads == 0 || self.channels % self.heads != 0 => {
                bad(format!("channels {} not divisible by heads {}", self.channels, self.heads))
            }
            _ => Ok(()),
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        let g = self.input_size / self.patch;
        (g, g)
    }

    pub fn tokens(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn fingerprint(&self) -> Fingerprint {
        let json = serde_json::to_vec(self).expect("spec serializes");
        let digest = Sha256::digest(&json);
        let mut b = [0u8; 8];
        b.copy_from_slice(&digest[..8]);
        Fingerprint(u64::from_be_bytes(b))
    }
}

/// Identity of an encoder configuration; embeddings from different fingerprints
/// are never compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Fingerprint(pub u64);

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

/// Provenance of a slice: (volume ordinal, slice index).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SliceRef {
    pub volume: u32,
    pub slice: u32,
}

/// Token-grid embedding of one slice. Tokens are stored row-major over the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMap {
    grid: (usize, usize),
    tokens: Matrix,
    fingerprint: Fingerprint,
    pub source: Option<SliceRef>,
}

impl EmbeddingMap {
    pub fn new(grid: (usize, usize), tokens: Matrix, fingerprint: Fingerprint) -> Result<Self> {
        if grid.0 * grid.1 == 0 || tokens.rows() != grid.0 * grid.1 {
            return Err(Error::ShapeMismatch(format!(
                "{} tokens for grid {grid:?}",
                tokens.rows()
            )));
        }
        if !tokens.is_finite() {
            return Err(Error::NonFiniteInput);
        }
        Ok(EmbeddingMap {
            grid,
            tokens,
            fingerprint,
            source: None,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn token_count(&self) -> usize {
        self.tokens.rows()
    }

    pub fn channels(&self) -> usize {
        self.tokens.cols()
    }

    pub fn tokens(&self) -> &Matrix {
        &self.tokens
    }

    pub fn fingerprint(&self) -> Fingerprint {
        self.fingerprint
    }

    /// Token-major flattening: token 0 channels, then token 1, ...
    pub fn flat(&self) -> &[f64] {
        self.tokens.data()
    }

    pub fn with_source(mut self, source: SliceRef) -> Self {
        self.source = Some(source);
        self
    }
}

/// An instantiated encoder. Immutable and shareable across threads.
#[derive(Debug, Clone)]
pub struct Encoder {
    spec: EncoderSpec,
    fingerprint: Fingerprint,
    vit: Option<ToyVit>,
}

impl Encoder {
    pub fn new(spec: EncoderSpec) -> Result<Self> {
        spec.validate()?;
        let vit = match spec.kind {
            EncoderKind::ToyVit => Some(ToyVit::new(&spec)),
            EncoderKind::PatchMean => None,
        };
        Ok(Encoder {
            fingerprint: spec.fingerprint(),
            spec,
            vit,
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn fingerprint(&self) -> Fingerprint {
        self.fingerprint
    }

    /// Resize to the encoder's input size (exact copy when already that size).
    pub fn prepare(&self, slice: &Slice2) -> Result<Grid2<f64>> {
        if slice.is_empty() {
            return Err(Error::ShapeMismatch("empty slice".into()));
        }
        if slice.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        Ok(resize_slice(slice, self.spec.input_size))
    }

    pub fn encode(&self, slice: &Slice2) -> Result<EmbeddingMap> {
        let img = self.prepare(slice)?;
        self.encode_prepared(&img)
    }

    /// Encode an image already at `input_size x input_size`.
    pub fn encode_prepared(&self, img: &Grid2<f64>) -> Result<EmbeddingMap> {
        let s = self.spec.input_size;
        if img.dims() != (s, s) {
            return Err(Error::ShapeMismatch(format!("expected {s}x{s} input, got {:?}", img.dims())));
        }
        if img.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        let tokens = match &self.vit {
            None => patch_mean::encode(img, self.spec.patch, self.spec.channels),
            Some(vit) => vit.forward(img),
        };
        EmbeddingMap::new(self.spec.grid(), tokens, self.fingerprint)
    }
}

/// Row-major `p x p` patches of an image as rows of a matrix.
pub(crate) fn patchify(img: &Grid2<f64>, p: usize) -> Matrix {
    let (gh, gw) = (img.rows() / p, img.cols() / p);
    let mut out = Matrix::zeros(gh * gw, p * p);
    for pr in 0..gh {
        for pc in 0..gw {
            let row = out.row_mut(pr * gw + pc);
            for y in 0..p {
                for x in 0..p {
                    row[y * p + x] = *img.get(pr * p + y, pc * p + x);
                }
            }
        }
    }
    out
}
