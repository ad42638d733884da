//! Mask decoding from the memory-guided embedding.

use serde::{Deserialize, Serialize};

use crate::attention::AttentionOutput;
use crate::error::{Error, Result};
use crate::grid::{resize_bilinear, Grid2, Mask2};
use crate::memory::UnifiedMemory;
use crate::rng::truncated_normal_vec;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    /// Fixed seeded linear head, d -> p*p logits per token.
    LinearSeeded,
    /// Attention-weighted vote over the memory masks.
    #[default]
    AttentionLabelTransfer,
}

/// Resolution at which label transfer reads the memory masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferResolution {
    /// Each output pixel reads the memory mask at the same relative offset
    /// inside the attended token's cell.
    #[default]
    Pixel,
    /// Token-level occupancies, bilinearly upsampled.
    Token,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderSpec {
    #[serde(default)]
    pub kind: DecoderKind,
    #[serde(default)]
    pub threshold: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub transfer: TransferResolution,
}

impl Default for DecoderSpec {
    fn default() -> Self {
        DecoderSpec {
            kind: DecoderKind::default(),
            threshold: 0.0,
            seed: 0,
            transfer: TransferResolution::default(),
        }
    }
}

/// Token grid and patch size of the embedding being decoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenLayout {
    pub grid: (usize, usize),
    pub patch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceMask {
    pub logits: Grid2<f64>,
    pub binary: Mask2,
}

impl SliceMask {
    pub fn from_logits(logits: Grid2<f64>, threshold: f64) -> Self {
        let binary = logits.map(|&v| v > threshold);
        SliceMask { logits, binary }
    }
}

pub fn decode(
    spec: &DecoderSpec,
    out: &AttentionOutput,
    mem: &UnifiedMemory,
    layout: TokenLayout,
    target: (usize, usize),
) -> Result<SliceMask> {
    if !spec.threshold.is_finite() {
        return Err(Error::InvalidConfig("decoder threshold must be finite".into()));
    }
    let (gh, gw) = layout.grid;
    let t = gh * gw;
    if target.0 < gh || target.1 < gw {
        return Err(Error::ShapeMismatch(format!("target {target:?} smaller than token grid {:?}", layout.grid)));
    }
    let logits = match spec.kind {
        DecoderKind::LinearSeeded => {
            if out.tokens.rows() != t {
                return Err(Error::ShapeMismatch(format!("{} tokens for a {gh}x{gw} grid", out.tokens.rows())));
            }
            linear_head(spec.seed, &out.tokens, layout, target)
        }
        DecoderKind::AttentionLabelTransfer => {
            let attn = out.attn.as_ref().ok_or(Error::MissingAttn)?;
            if attn.rows() != t || attn.cols() != mem.total_tokens() {
                return Err(Error::ShapeMismatch(format!(
                    "attention is {}x{}, want {t}x{}",
                    attn.rows(),
                    attn.cols(),
                    mem.total_tokens()
                )));
            }
            match spec.transfer {
                TransferResolution::Token => {
                    let tok = token_transfer(attn, mem.mask_values());
                    resize_bilinear(&Grid2::from_vec(gh, gw, tok), target.0, target.1)
                }
                TransferResolution::Pixel => pixel_transfer(attn, mem, layout.grid, target)?,
            }
        }
    };
    Ok(SliceMask::from_logits(logits, spec.threshold))
}

/// Per-token `sum_k attn[t, k] * (2 m_k - 1)`.
pub fn token_transfer(attn: &Matrix, mask_values: &[f64]) -> Vec<f64> {
    (0..attn.rows())
        .map(|t| {
            attn.row(t)
                .iter()
                .zip(mask_values)
                .map(|(a, m)| a * (2.0 * m - 1.0))
                .sum()
        })
        .collect()
}

fn pixel_transfer(attn: &Matrix, mem: &UnifiedMemory, grid: (usize, usize), target: (usize, usize)) -> Result<Grid2<f64>> {
    let (gh, gw) = grid;
    let (h, w) = target;
    for b in mem.blocks() {
        if b.grid != grid {
            return Err(Error::ShapeMismatch(format!("memory grid {:?} vs test grid {grid:?}", b.grid)));
        }
    }
    let per_block = gh * gw;
    let rows: Vec<(usize, f64)> = (0..h).map(|r| split(r, h, gh)).collect();
    let cols: Vec<(usize, f64)> = (0..w).map(|c| split(c, w, gw)).collect();
    let mut out = vec![0.0; h * w];
    for (r, &(tr, u)) in rows.iter().enumerate() {
        for (c, &(tc, v)) in cols.iter().enumerate() {
            let a = attn.row(tr * gw + tc);
            let mut s = 0.0;
            for (bi, b) in mem.blocks().iter().enumerate() {
                let (mr, mc) = b.mask.dims();
                for (k, &ak) in a[bi * per_block..(bi + 1) * per_block].iter().enumerate() {
                    if ak == 0.0 {
                        continue;
                    }
                    let (kr, kc) = (k / gw, k % gw);
                    let pr = (((kr as f64 + u) * mr as f64 / gh as f64) as usize).min(mr - 1);
                    let pc = (((kc as f64 + v) * mc as f64 / gw as f64) as usize).min(mc - 1);
                    s += if *b.mask.get(pr, pc) { ak } else { -ak };
                }
            }
            out[r * w + c] = s;
        }
    }
    Ok(Grid2::from_vec(h, w, out))
}

/// Token index and fractional offset inside it for the centre of pixel `i` of `n`.
fn split(i: usize, n: usize, cells: usize) -> (usize, f64) {
    let y = (i as f64 + 0.5) * cells as f64 / n as f64;
    let t = (y.floor() as usize).min(cells - 1);
    (t, y - t as f64)
}

fn linear_head(seed: u64, tokens: &Matrix, layout: TokenLayout, target: (usize, usize)) -> Grid2<f64> {
    let d = tokens.cols();
    let p = layout.patch;
    let (gh, gw) = layout.grid;
    let w = Matrix::from_vec(d, p * p, truncated_normal_vec("decoder.linear", seed, d * p * p, 0.02));
    let per_token = tokens.matmul(&w);
    let (sh, sw) = (gh * p, gw * p);
    let mut map = vec![0.0; sh * sw];
    for t in 0..gh * gw {
        let (tr, tc) = (t / gw, t % gw);
        for (i, &v) in per_token.row(t).iter().enumerate() {
            map[(tr * p + i / p) * sw + tc * p + i % p] = v;
        }
    }
    resize_bilinear(&Grid2::from_vec(sh, sw, map), target.0, target.1)
}
