//! Memory encoding: a mask is pooled onto the token grid, lifted to `d`
//! channels by two seeded 3x3 convolutions and added to the slice embedding.
//! Memories from retrieved support slices and from the neighbouring predicted
//! slice are concatenated along the token axis.

use serde::{Deserialize, Serialize};

use crate::encoder::{EmbeddingMap, SliceRef};
use crate::error::{Error, Result};
use crate::grid::Mask2;
use crate::rng::truncated_normal_vec;
use crate::tensor::Matrix;

/// Fraction of positive pixels inside each token cell, with cells placed at
/// fractional pixel boundaries and partially covered pixels weighted by area.
pub fn downsample_mask(mask: &Mask2, grid: (usize, usize)) -> Result<Vec<f64>> {
    let (rows, cols) = mask.dims();
    let (gh, gw) = grid;
    if gh == 0 || gw == 0 || gh > rows || gw > cols {
        return Err(Error::GridLargerThanMask {
            grid,
            mask: (rows, cols),
        });
    }
    let row_w = overlap_weights(rows, gh);
    let col_w = overlap_weights(cols, gw);
    let cell_area = (rows as f64 / gh as f64) * (cols as f64 / gw as f64);
    let mut out = vec![0.0; gh * gw];
    for (tr, rw) in row_w.iter().enumerate() {
        for (tc, cw) in col_w.iter().enumerate() {
            let mut s = 0.0;
            for &(r, wr) in rw {
                for &(c, wc) in cw {
                    if *mask.get(r, c) {
                        s += wr * wc;
                    }
                }
            }
            out[tr * gw + tc] = (s / cell_area).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// For each of `cells` equal cells over `len` pixels: (pixel, covered length).
fn overlap_weights(len: usize, cells: usize) -> Vec<Vec<(usize, f64)>> {
    let step = len as f64 / cells as f64;
    (0..cells)
        .map(|k| {
            let (lo, hi) = (k as f64 * step, (k + 1) as f64 * step);
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(len);
            (first..last)
                .filter_map(|p| {
                    let w = (hi.min(p as f64 + 1.0) - lo.max(p as f64)).max(0.0);
                    (w > 0.0).then_some((p, w))
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryEncoderSpec {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_weight_std")]
    pub weight_std: f64,
    /// 0 gives exactly-zero biases.
    #[serde(default)]
    pub bias_std: f64,
}

fn default_weight_std() -> f64 {
    0.002
}

impl Default for MemoryEncoderSpec {
    fn default() -> Self {
        MemoryEncoderSpec {
            seed: 0,
            weight_std: default_weight_std(),
            bias_std: 0.0,
        }
    }
}

/// Two 3x3 convolutions over the token grid (1 -> d -> d channels, zero
/// padding, ReLU between).
#[derive(Debug, Clone)]
pub struct MemoryEncoder {
    d: usize,
    /// `[out][ky][kx]`
    w1: Vec<f64>,
    b1: Vec<f64>,
    /// `[out][in][ky][kx]`
    w2: Vec<f64>,
    b2: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryKind {
    Anatomical,
    Volumetric,
}

/// Memory tokens for one (mask, embedding) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEmbedding {
    pub grid: (usize, usize),
    pub tokens: Matrix,
    /// Per-token mask occupancy in [0, 1].
    pub mask_values: Vec<f64>,
    /// The binary mask the memory was built from, at its own resolution.
    pub mask: Mask2,
    pub kind: MemoryKind,
    pub source: Option<SliceRef>,
}

impl MemoryEncoder {
    pub fn new(d: usize, spec: &MemoryEncoderSpec) -> Self {
        let bias = |name: &str, n: usize| {
            if spec.bias_std > 0.0 {
                truncated_normal_vec(name, spec.seed, n, spec.bias_std)
            } else {
                vec![0.0; n]
            }
        };
        MemoryEncoder {
            d,
            w1: truncated_normal_vec("memory.conv1.weight", spec.seed, d * 9, spec.weight_std),
            b1: bias("memory.conv1.bias", d),
            w2: truncated_normal_vec("memory.conv2.weight", spec.seed, d * d * 9, spec.weight_std),
            b2: bias("memory.conv2.bias", d),
        }
    }

    pub fn channels(&self) -> usize {
        self.d
    }

    /// Convolution stack applied to a pooled mask; returns `T x d`.
    pub fn conv_stack(&self, occupancy: &[f64], grid: (usize, usize)) -> Matrix {
        let (gh, gw) = grid;
        let d = self.d;
        let t = gh * gw;
        assert_eq!(occupancy.len(), t);
        let mut hidden = Matrix::zeros(t, d);
        for r in 0..gh {
            for c in 0..gw {
                let h = hidden.row_mut(r * gw + c);
                for (o, ho) in h.iter_mut().enumerate() {
                    let mut s = self.b1[o];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            if let Some(i) = tap(r, c, ky, kx, gh, gw) {
                                s += self.w1[o * 9 + ky * 3 + kx] * occupancy[i];
                            }
                        }
                    }
                    *ho = s.max(0.0);
                }
            }
        }
        let mut out = Matrix::zeros(t, d);
        for r in 0..gh {
            for c in 0..gw {
                for o in 0..d {
                    let mut s = self.b2[o];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            if let Some(i) = tap(r, c, ky, kx, gh, gw) {
                                let hin = hidden.row(i);
                                let w = &self.w2[o * d * 9..(o + 1) * d * 9];
                                for (ci, hv) in hin.iter().enumerate() {
                                    s += w[ci * 9 + ky * 3 + kx] * hv;
                                }
                            }
                        }
                    }
                    out.set(r * gw + c, o, s);
                }
            }
        }
        out
    }

    /// Memory tokens: `conv_stack(pool(mask)) + f`.
    pub fn encode(&self, mask: &Mask2, f: &EmbeddingMap, kind: MemoryKind) -> Result<MemoryEmbedding> {
        if f.channels() != self.d {
            return Err(Error::ShapeMismatch(format!(
                "embedding has {} channels, memory encoder {}",
                f.channels(),
                self.d
            )));
        }
        let mask_values = downsample_mask(mask, f.grid())?;
        let mut tokens = self.conv_stack(&mask_values, f.grid());
        tokens.add_assign(f.tokens());
        Ok(MemoryEmbedding {
            grid: f.grid(),
            tokens,
            mask_values,
            mask: mask.clone(),
            kind,
            source: f.source,
        })
    }
}

/// Neighbour index for kernel tap (ky, kx) centred on (r, c); None in the padding.
fn tap(r: usize, c: usize, ky: usize, kx: usize, gh: usize, gw: usize) -> Option<usize> {
    let rr = (r + ky).checked_sub(1)?;
    let cc = (c + kx).checked_sub(1)?;
    (rr < gh && cc < gw).then_some(rr * gw + cc)
}

/// How an absent volumetric memory is represented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroBlockMode {
    /// Leave the block out entirely.
    #[default]
    Omit,
    /// Append a block of zero tokens with zero mask values.
    Materialize,
}

/// Concatenation of memory blocks along the token axis: anatomical blocks in
/// retrieval-rank order, then at most one volumetric block.
#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedMemory {
    blocks: Vec<MemoryEmbedding>,
    tokens: Matrix,
    mask_values: Vec<f64>,
}

impl UnifiedMemory {
    pub fn blocks(&self) -> &[MemoryEmbedding] {
        &self.blocks
    }

    pub fn total_tokens(&self) -> usize {
        self.tokens.rows()
    }

    /// All memory tokens, `total_tokens x d`.
    pub fn tokens(&self) -> &Matrix {
        &self.tokens
    }

    /// Per-token mask occupancy aligned with [`UnifiedMemory::tokens`].
    pub fn mask_values(&self) -> &[f64] {
        &self.mask_values
    }

    /// Block index and in-block token index of memory token `k`.
    pub fn locate(&self, k: usize) -> (usize, usize) {
        let t = self.blocks[0].tokens.rows();
        (k / t, k % t)
    }

    pub fn has_volumetric(&self) -> bool {
        self.blocks.iter().any(|b| b.kind == MemoryKind::Volumetric)
    }
}

pub fn fuse_memories(
    anatomical: Vec<MemoryEmbedding>,
    volumetric: Option<MemoryEmbedding>,
    zero_block: ZeroBlockMode,
) -> Result<UnifiedMemory> {
    let first = anatomical.first().ok_or(Error::EmptyAnatomicalSet)?;
    let shape = (first.grid, first.tokens.cols());
    let volumetric = match (volumetric, zero_block) {
        (Some(v), _) => Some(v),
        (None, ZeroBlockMode::Omit) => None,
        (None, ZeroBlockMode::Materialize) => Some(MemoryEmbedding {
            grid: shape.0,
            tokens: Matrix::zeros(first.tokens.rows(), shape.1),
            mask_values: vec![0.0; first.tokens.rows()],
            mask: Mask2::filled(shape.0 .0, shape.0 .1, false),
            kind: MemoryKind::Volumetric,
            source: None,
        }),
    };
    let mut blocks = anatomical;
    blocks.extend(volumetric);
    if blocks.iter().any(|b| (b.grid, b.tokens.cols()) != shape) {
        return Err(Error::HeterogeneousShapes);
    }
    let tokens = Matrix::vstack(&blocks.iter().map(|b| &b.tokens).collect::<Vec<_>>());
    let mask_values = blocks.iter().flat_map(|b| b.mask_values.iter().copied()).collect();
    Ok(UnifiedMemory {
        blocks,
        tokens,
        mask_values,
    })
}
