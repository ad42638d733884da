use super::patchify;
use crate::grid::Grid2;
use crate::tensor::{normalize_in_place, Matrix};

/// Statistics per patch: mean, std, four quadrant means (tl, tr, bl, br),
/// mean horizontal and vertical forward difference, and a unit reference.
///
/// The reference channel keeps absolute intensity visible after per-token
/// standardisation; without it every flat patch maps to the same token.
pub const PATCH_STATS: usize = 9;

/// Statistics of one `p x p` patch given row-major.
pub fn patch_statistics(patch: &[f64], p: usize) -> [f64; PATCH_STATS] {
    debug_assert_eq!(patch.len(), p * p);
    let n = (p * p) as f64;
    let mean = patch.iter().sum::<f64>() / n;
    let var = patch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;

    let h = p / 2;
    let quad = |r0: usize, r1: usize, c0: usize, c1: usize| {
        let mut s = 0.0;
        for r in r0..r1 {
            for c in c0..c1 {
                s += patch[r * p + c];
            }
        }
        s / ((r1 - r0) * (c1 - c0)) as f64
    };

    let mut gx = 0.0;
    let mut gy = 0.0;
    for r in 0..p {
        for c in 0..p - 1 {
            gx += patch[r * p + c + 1] - patch[r * p + c];
        }
    }
    for r in 0..p - 1 {
        for c in 0..p {
            gy += patch[(r + 1) * p + c] - patch[r * p + c];
        }
    }
    let pairs = (p * (p - 1)) as f64;

    [
        mean,
        var.sqrt(),
        quad(0, h, 0, h),
        quad(0, h, h, p),
        quad(h, p, 0, h),
        quad(h, p, h, p),
        gx / pairs,
        gy / pairs,
        1.0,
    ]
}

pub(super) fn encode(img: &Grid2<f64>, p: usize, d: usize) -> Matrix {
    let patches = patchify(img, p);
    let mut tokens = Matrix::zeros(patches.rows(), d);
    for t in 0..patches.rows() {
        let stats = patch_statistics(patches.row(t), p);
        let row = tokens.row_mut(t);
        for (c, v) in row.iter_mut().enumerate() {
            *v = stats[c % PATCH_STATS];
        }
        normalize_in_place(row, 0.0);
    }
    tokens
}

#[cfg(test)]
mod tests {
    use super::super::{Encoder, EncoderSpec};
    use super::*;
    use crate::grid::Slice2;

    fn noise_slice(seed: u64) -> Slice2 {
        let mut s = crate::rng::Stream::new("test.slice", seed);
        Grid2::from_vec(64, 64, (0..64 * 64).map(|_| s.uniform() as f32).collect())
    }

    #[test]
    fn constant_slice_gives_identical_tokens() {
        let enc = Encoder::new(EncoderSpec::patch_mean()).unwrap();
        let e = enc.encode(&Grid2::filled(64, 64, 0.4f32)).unwrap();
        let first = e.tokens().row(0).to_vec();
        for t in 1..e.token_count() {
            assert_eq!(e.tokens().row(t), first.as_slice());
        }
    }

    #[test]
    fn flat_patches_keep_their_intensity() {
        let enc = Encoder::new(EncoderSpec::patch_mean()).unwrap();
        let a = enc.encode(&Grid2::filled(64, 64, 0.2f32)).unwrap();
        let b = enc.encode(&Grid2::filled(64, 64, 0.9f32)).unwrap();
        assert_ne!(a.tokens().row(0), b.tokens().row(0));
    }

    #[test]
    fn statistics_match_hand_values() {
        // 2x2 patch [[0, 1], [2, 3]]
        let s = patch_statistics(&[0.0, 1.0, 2.0, 3.0], 2);
        assert_eq!(s[0], 1.5);
        assert!((s[1] - 1.25f64.sqrt()).abs() < 1e-15);
        assert_eq!(&s[2..6], &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(s[6], 1.0);
        assert_eq!(s[7], 2.0);
        assert_eq!(s[8], 1.0);
    }

    #[test]
    fn local_change_touches_only_its_token() {
        let enc = Encoder::new(EncoderSpec::patch_mean()).unwrap();
        let a = noise_slice(1);
        let mut b = a.clone();
        // patch (row 2, col 5) spans rows 16..24, cols 40..48
        for (r, c) in [(17, 41), (20, 47), (23, 44)] {
            b.set(r, c, b.get(r, c) + 0.5);
        }
        let ea = enc.encode(&a).unwrap();
        let eb = enc.encode(&b).unwrap();
        let changed: Vec<usize> = (0..64).filter(|&t| ea.tokens().row(t) != eb.tokens().row(t)).collect();
        assert_eq!(changed, vec![2 * 8 + 5]);

        // brute-force recomputation of the changed token
        let mut patch = Vec::new();
        for r in 16..24 {
            for c in 40..48 {
                patch.push(*b.get(r, c) as f64);
            }
        }
        let stats = patch_statistics(&patch, 8);
        let mut expect: Vec<f64> = (0..32).map(|c| stats[c % PATCH_STATS]).collect();
        normalize_in_place(&mut expect, 0.0);
        assert_eq!(eb.tokens().row(21), expect.as_slice());
    }

    #[test]
    fn swapping_patches_swaps_tokens() {
        let enc = Encoder::new(EncoderSpec::patch_mean()).unwrap();
        let a = noise_slice(4);
        let mut b = a.clone();
        // swap patch (0, 0) with patch (3, 6)
        for y in 0..8 {
            for x in 0..8 {
                let (r0, c0, r1, c1) = (y, x, 24 + y, 48 + x);
                let v0 = *a.get(r0, c0);
                let v1 = *a.get(r1, c1);
                b.set(r0, c0, v1);
                b.set(r1, c1, v0);
            }
        }
        let ea = enc.encode(&a).unwrap();
        let eb = enc.encode(&b).unwrap();
        let (t0, t1) = (0, 3 * 8 + 6);
        assert_eq!(ea.tokens().row(t0), eb.tokens().row(t1));
        assert_eq!(ea.tokens().row(t1), eb.tokens().row(t0));
        for t in (0..64).filter(|&t| t != t0 && t != t1) {
            assert_eq!(ea.tokens().row(t), eb.tokens().row(t));
        }
    }
}
