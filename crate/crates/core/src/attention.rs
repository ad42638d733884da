//! Single-head self- and cross-attention with value-projection residuals, and
//! memory attention built from them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::UnifiedMemory;
use crate::rng::truncated_normal_vec;
use crate::tensor::Matrix;

/// How the three projection matrices are initialised.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttentionInit {
    /// `gain * I` for all three projections.
    ScaledIdentity { gain: f64 },
    /// Independent truncated-normal entries.
    TruncatedNormal { std: f64 },
    /// `gain * I` plus truncated-normal noise.
    IdentityPlusNoise { gain: f64, std: f64 },
}

impl Default for AttentionInit {
    fn default() -> Self {
        AttentionInit::ScaledIdentity { gain: 40.0 }
    }
}

/// Which tokens the memory is fed as in cross-attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaArgOrder {
    /// Test tokens query the memory.
    #[default]
    MemoryKv,
    /// Memory tokens query the self-attended test tokens.
    MemoryQuery,
}

/// Which value projection is added back after cross-attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    /// `+ v1 Wv` (query side).
    #[default]
    Query,
    /// `+ v2 Wv` (key side); needs as many keys as queries.
    Key,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionSpec {
    pub channels: usize,
    #[serde(default = "one")]
    pub layers: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub init: AttentionInit,
    #[serde(default)]
    pub residual_mode: ResidualMode,
    #[serde(default)]
    pub ca_arg_order: CaArgOrder,
}

fn one() -> usize {
    1
}

impl AttentionSpec {
    pub fn new(channels: usize) -> Self {
        AttentionSpec {
            channels,
            layers: 1,
            seed: 0,
            init: AttentionInit::default(),
            residual_mode: ResidualMode::default(),
            ca_arg_order: CaArgOrder::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub layers: usize,
    pub residual_mode: ResidualMode,
    pub ca_arg_order: CaArgOrder,
}

impl AttentionWeights {
    pub fn new(spec: &AttentionSpec) -> Result<Self> {
        let d = spec.channels;
        if d == 0 || spec.layers == 0 {
            return Err(Error::InvalidConfig("attention needs channels >= 1 and layers >= 1".into()));
        }
        let make = |name: &str| -> Result<Matrix> {
            let (gain, std) = match spec.init {
                AttentionInit::ScaledIdentity { gain } => (gain, 0.0),
                AttentionInit::TruncatedNormal { std } => (0.0, std),
                AttentionInit::IdentityPlusNoise { gain, std } => (gain, std),
            };
            if !gain.is_finite() || !std.is_finite() || std < 0.0 {
                return Err(Error::InvalidConfig(format!("bad attention init {:?}", spec.init)));
            }
            let mut m = if std > 0.0 {
                Matrix::from_vec(d, d, truncated_normal_vec(name, spec.seed, d * d, std))
            } else {
                Matrix::zeros(d, d)
            };
            for i in 0..d {
                m.set(i, i, m.get(i, i) + gain);
            }
            Ok(m)
        };
        Ok(AttentionWeights {
            wq: make("attention.wq")?,
            wk: make("attention.wk")?,
            wv: make("attention.wv")?,
            layers: spec.layers,
            residual_mode: spec.residual_mode,
            ca_arg_order: spec.ca_arg_order,
        })
    }

    /// Weights from explicit matrices (one layer, default modes).
    pub fn from_matrices(wq: Matrix, wk: Matrix, wv: Matrix) -> Result<Self> {
        let d = wq.rows();
        for m in [&wq, &wk, &wv] {
            if m.rows() != d || m.cols() != d {
                return Err(Error::ShapeMismatch(format!("projection is {}x{}, want {d}x{d}", m.rows(), m.cols())));
            }
            if !m.is_finite() {
                return Err(Error::NonFiniteInput);
            }
        }
        Ok(AttentionWeights {
            wq,
            wk,
            wv,
            layers: 1,
            residual_mode: ResidualMode::Query,
            ca_arg_order: CaArgOrder::MemoryKv,
        })
    }

    pub fn channels(&self) -> usize {
        self.wq.rows()
    }

    fn check(&self, v: &Matrix) -> Result<()> {
        if v.cols() != self.channels() {
            return Err(Error::ShapeMismatch(format!(
                "tokens have {} channels, attention expects {}",
                v.cols(),
                self.channels()
            )));
        }
        if !v.is_finite() {
            return Err(Error::NonFiniteInput);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub tokens: Matrix,
    /// Queries x keys, from the last cross-attention layer.
    pub attn: Option<Matrix>,
}

/// `softmax(Q K^T / sqrt(d)) V`, returning the product and the weights.
fn attend(q: &Matrix, k: &Matrix, v: &Matrix) -> (Matrix, Matrix) {
    let mut attn = q.matmul_t(k).scale(1.0 / (q.cols() as f64).sqrt());
    attn.softmax_rows();
    (attn.matmul(v), attn)
}

/// `softmax(Q K^T / sqrt(d)) V + V` with `Q, K, V = v Wq, v Wk, v Wv`.
pub fn self_attention(v: &Matrix, w: &AttentionWeights) -> Result<Matrix> {
    w.check(v)?;
    let val = v.matmul(&w.wv);
    let (mut out, _) = attend(&v.matmul(&w.wq), &v.matmul(&w.wk), &val);
    out.add_assign(&val);
    Ok(out)
}

/// Queries from `v1`, keys and values from `v2`. Returns tokens and the
/// pre-residual attention weights.
pub fn cross_attention(
    v1: &Matrix,
    v2: &Matrix,
    w: &AttentionWeights,
    mode: ResidualMode,
) -> Result<(Matrix, Matrix)> {
    w.check(v1)?;
    w.check(v2)?;
    if v2.rows() == 0 {
        return Err(Error::ShapeMismatch("cross-attention needs at least one key".into()));
    }
    if mode == ResidualMode::Key && v1.rows() != v2.rows() {
        return Err(Error::ResidualModeInvalid {
            queries: v1.rows(),
            keys: v2.rows(),
        });
    }
    let v2w = v2.matmul(&w.wv);
    let (mut out, attn) = attend(&v1.matmul(&w.wq), &v2.matmul(&w.wk), &v2w);
    match mode {
        ResidualMode::Query => out.add_assign(&v1.matmul(&w.wv)),
        ResidualMode::Key => out.add_assign(&v2w),
    }
    Ok((out, attn))
}

/// Self-attention over the test tokens, then `layers` cross-attention steps
/// against the memory.
pub fn memory_attention(mem: &UnifiedMemory, f: &Matrix, w: &AttentionWeights) -> Result<AttentionOutput> {
    let mut x = self_attention(f, w)?;
    let mut attn = None;
    for _ in 0..w.layers {
        let (next, a) = match w.ca_arg_order {
            CaArgOrder::MemoryKv => cross_attention(&x, mem.tokens(), w, w.residual_mode)?,
            CaArgOrder::MemoryQuery => cross_attention(mem.tokens(), &x, w, w.residual_mode)?,
        };
        x = next;
        attn = Some(a);
    }
    Ok(AttentionOutput { tokens: x, attn })
}
