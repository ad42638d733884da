use super::{patchify, EncoderSpec};
use crate::grid::Grid2;
use crate::rng::truncated_normal_vec;
use crate::tensor::{normalize_in_place, softmax_in_place, Matrix};

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
struct Block {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    w1: Matrix,
    w2: Matrix,
}

/// Patch embedding followed by pre-norm transformer blocks and a final norm.
/// Weights are truncated-normal draws, one stream per (seed, layer, matrix).
#[derive(Debug, Clone)]
pub struct ToyVit {
    patch: usize,
    heads: usize,
    embed: Matrix,
    blocks: Vec<Block>,
}

fn weights(name: &str, seed: u64, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, truncated_normal_vec(name, seed, rows * cols, INIT_STD))
}

impl ToyVit {
    pub fn new(spec: &EncoderSpec) -> Self {
        let d = spec.channels;
        let seed = spec.weight_seed;
        let p2 = spec.patch * spec.patch;
        let blocks = (0..spec.depth)
            .map(|l| Block {
                wq: weights(&format!("toyvit.block{l}.wq"), seed, d, d),
                wk: weights(&format!("toyvit.block{l}.wk"), seed, d, d),
                wv: weights(&format!("toyvit.block{l}.wv"), seed, d, d),
                wo: weights(&format!("toyvit.block{l}.wo"), seed, d, d),
                w1: weights(&format!("toyvit.block{l}.mlp1"), seed, d, 4 * d),
                w2: weights(&format!("toyvit.block{l}.mlp2"), seed, 4 * d, d),
            })
            .collect();
        ToyVit {
            patch: spec.patch,
            heads: spec.heads,
            embed: weights("toyvit.patch_embed", seed, p2, d),
            blocks,
        }
    }

    pub fn forward(&self, img: &Grid2<f64>) -> Matrix {
        let mut x = patchify(img, self.patch).matmul(&self.embed);
        for b in &self.blocks {
            let h = layer_norm(&x);
            x.add_assign(&self.attention(b, &h));
            let h = layer_norm(&x);
            let mid = h.matmul(&b.w1);
            let mid = Matrix::from_vec(mid.rows(), mid.cols(), mid.into_data().into_iter().map(gelu).collect());
            x.add_assign(&mid.matmul(&b.w2));
        }
        layer_norm(&x)
    }

    fn attention(&self, b: &Block, x: &Matrix) -> Matrix {
        let (t, d) = (x.rows(), x.cols());
        let hd = d / self.heads;
        let q = x.matmul(&b.wq);
        let k = x.matmul(&b.wk);
        let v = x.matmul(&b.wv);
        let scale = 1.0 / (hd as f64).sqrt();
        let mut out = Matrix::zeros(t, d);
        let mut logits = vec![0.0; t];
        for h in 0..self.heads {
            let cols = h * hd..(h + 1) * hd;
            for i in 0..t {
                let qi = &q.row(i)[cols.clone()];
                for (j, l) in logits.iter_mut().enumerate() {
                    let kj = &k.row(j)[cols.clone()];
                    *l = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                softmax_in_place(&mut logits);
                let o = &mut out.row_mut(i)[cols.clone()];
                for (j, &a) in logits.iter().enumerate() {
                    for (oc, vc) in o.iter_mut().zip(&v.row(j)[cols.clone()]) {
                        *oc += a * vc;
                    }
                }
            }
        }
        out.matmul(&b.wo)
    }
}

fn layer_norm(x: &Matrix) -> Matrix {
    let mut y = x.clone();
    for r in 0..y.rows() {
        normalize_in_place(y.row_mut(r), LN_EPS);
    }
    y
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

#[cfg(test)]
mod tests {
    use super::super::{Encoder, EncoderSpec};
    use crate::grid::Grid2;
    use crate::rng::Stream;

    #[test]
    fn token_magnitudes_stay_bounded() {
        for seed in 0..10u64 {
            let spec = EncoderSpec::toy_vit(32, 2, 4, seed);
            let enc = Encoder::new(spec).unwrap();
            let mut s = Stream::new("vit.input", seed);
            let img = Grid2::from_vec(64, 64, (0..4096).map(|_| s.uniform() as f32).collect());
            let e = enc.encode(&img).unwrap();
            let max = e.flat().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max.is_finite() && max < 1e3, "seed {seed}: max {max}");
        }
    }

    #[test]
    fn weight_seed_changes_output() {
        let img = Grid2::from_vec(64, 64, (0..4096).map(|i| (i % 13) as f32 / 13.0).collect());
        let a = Encoder::new(EncoderSpec::toy_vit(32, 1, 2, 0)).unwrap().encode(&img).unwrap();
        let b = Encoder::new(EncoderSpec::toy_vit(32, 1, 2, 1)).unwrap().encode(&img).unwrap();
        assert_ne!(a.flat(), b.flat());
    }
}
