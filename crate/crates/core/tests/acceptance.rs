//! Acceptance suite. Runs without the libtest harness so that every criterion
//! prints exactly one PASS/FAIL line; exits non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use fateseg::attention::{
    cross_attention, self_attention, AttentionInit, AttentionSpec, AttentionWeights, ResidualMode,
};
use fateseg::encoder::{EmbeddingMap, Encoder, EncoderSpec, SliceRef};
use fateseg::eval::{dice, run_ablation, AblationAxis, AblationPlan, Mask3};
use fateseg::grid::{Grid2, Mask2};
use fateseg::memory::{downsample_mask, fuse_memories, MemoryEncoder, MemoryEncoderSpec, MemoryKind, ZeroBlockMode};
use fateseg::pipeline::{initial_slice_index, Engine, InitialSlice, PipelineConfig};
use fateseg::retrieval::{
    build_library, retrieve_top_j, similarity, Query, RetrievalOptions, SimilarityMetric, SupportEntry,
    SupportLibrary,
};
use fateseg::rng::Stream;
use fateseg::tensor::Matrix;
use fateseg::volume::{
    jittered_dataset, load_volume, save_volume, standard_phantom_spec, AnyVolume, Geometry, LabelDtype, LabelVolume,
    PhantomDataset, SliceAxis, Volume,
};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn run(n: u32, name: &str, limit_s: Option<f64>, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    let outcome = match (outcome, limit_s) {
        (Ok(_), Some(l)) if secs >= l => Err(format!("took {secs:.1}s, limit {l}s")),
        (o, _) => o,
    };
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d.clone()),
        Err(d) => ("FAIL", d.clone()),
    };
    println!("criterion {n} [{name}]: {tag} ({detail}; {secs:.2}s)");
    outcome.is_ok()
}

// ---------------------------------------------------------------- helpers

fn random_rows(s: &mut Stream, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..cols).map(|_| s.normal()).collect()).collect()
}

fn to_matrix(rows: &[Vec<f64>]) -> Matrix {
    Matrix::from_rows(rows)
}

fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn project(x: &[Vec<f64>], w: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = w[0].len();
    x.iter()
        .map(|row| {
            (0..d)
                .map(|j| {
                    let mut s = 0.0;
                    for (i, xi) in row.iter().enumerate() {
                        s += xi * w[i][j];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

/// Triple-loop attention: returns (softmax(QK^T/sqrt d) V, attn).
fn brute_attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let d = q[0].len();
    let mut out = vec![vec![0.0; v[0].len()]; q.len()];
    let mut attn = vec![vec![0.0; k.len()]; q.len()];
    for a in 0..q.len() {
        let mut logits = vec![0.0; k.len()];
        for b in 0..k.len() {
            let mut s = 0.0;
            for c in 0..d {
                s += q[a][c] * k[b][c];
            }
            logits[b] = s / (d as f64).sqrt();
        }
        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for b in 0..k.len() {
            attn[a][b] = (logits[b] - m).exp() / z;
        }
        for c in 0..v[0].len() {
            for b in 0..k.len() {
                out[a][c] += attn[a][b] * v[b][c];
            }
        }
    }
    (out, attn)
}

fn rel_err(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (ra, rb) in a.iter().zip(b) {
        for (x, y) in ra.iter().zip(rb) {
            diff = diff.max((x - y).abs());
            scale = scale.max(y.abs());
        }
    }
    diff / scale.max(1e-300)
}

fn dataset(seed: u64) -> PhantomDataset {
    jittered_dataset(&standard_phantom_spec(), 10, 2.0, seed).expect("phantom family is valid")
}

fn object_dice(pred: &LabelVolume, truth: &LabelVolume, label: u16) -> f64 {
    dice(&Mask3::from_labels(pred, label), &Mask3::from_labels(truth, label)).unwrap()
}

// ---------------------------------------------------------------- criteria

fn attention_oracle() -> Check {
    let sizes = [1usize, 2, 4, 8, 16];
    let mut worst = 0.0f64;
    let mut checks = 0;
    for d in [4usize, 16, 32] {
        for seed in 0..10u64 {
            let spec = AttentionSpec {
                seed,
                init: AttentionInit::IdentityPlusNoise { gain: 0.5, std: 0.4 },
                ..AttentionSpec::new(d)
            };
            let w = AttentionWeights::new(&spec).unwrap();
            let (wq, wk, wv) = (rows_of(&w.wq), rows_of(&w.wk), rows_of(&w.wv));
            let mut s = Stream::new("acceptance.attention", seed * 1000 + d as u64);
            for &t in &sizes {
                let v = random_rows(&mut s, t, d);
                let got = rows_of(&self_attention(&to_matrix(&v), &w).unwrap());
                let val = project(&v, &wv);
                let (mut want, _) = brute_attention(&project(&v, &wq), &project(&v, &wk), &val);
                for (r, vr) in want.iter_mut().zip(&val) {
                    for (x, y) in r.iter_mut().zip(vr) {
                        *x += y;
                    }
                }
                worst = worst.max(rel_err(&got, &want));
                checks += 1;
            }
            for &tq in &sizes {
                for &tk in &sizes {
                    let v1 = random_rows(&mut s, tq, d);
                    let v2 = random_rows(&mut s, tk, d);
                    let (out, attn) = cross_attention(&to_matrix(&v1), &to_matrix(&v2), &w, ResidualMode::Query).unwrap();
                    let (mut want, want_attn) = brute_attention(&project(&v1, &wq), &project(&v2, &wk), &project(&v2, &wv));
                    for (r, vr) in want.iter_mut().zip(&project(&v1, &wv)) {
                        for (x, y) in r.iter_mut().zip(vr) {
                            *x += y;
                        }
                    }
                    worst = worst.max(rel_err(&rows_of(&out), &want));
                    worst = worst.max(rel_err(&rows_of(&attn), &want_attn));
                    for r in 0..attn.rows() {
                        let row = attn.row(r);
                        ensure(row.iter().all(|&a| a >= 0.0), || "negative attention weight".into())?;
                        let sum: f64 = row.iter().sum();
                        ensure((sum - 1.0).abs() <= 1e-6, || format!("row sums to {sum}"))?;
                    }
                    checks += 1;
                }
            }
        }
    }
    ensure(worst <= 1e-6, || format!("max relative error {worst:e}"))?;
    Ok(format!("{checks} shape/seed cases, max relative error {worst:.1e}"))
}

fn oracle_score(metric: SimilarityMetric, a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
    match metric {
        SimilarityMetric::CS => {
            let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            ab / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
        }
        SimilarityMetric::NCC | SimilarityMetric::PCC => {
            let (ma, mb) = (mean(a), mean(b));
            let ab: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
            let aa: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
            let bb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
            ab / (aa * bb).sqrt()
        }
        SimilarityMetric::MSE => a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n,
        SimilarityMetric::MD => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
        SimilarityMetric::ED => a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt(),
    }
}

fn random_library(s: &mut Stream, n: usize) -> (SupportLibrary, EncoderSpec) {
    let mut spec = EncoderSpec::patch_mean();
    spec.input_size = 8;
    spec.patch = 4;
    spec.channels = 4;
    let fp = spec.fingerprint();
    let volumes = 1 + s.below(5);
    let mut next_slice = vec![0u32; volumes];
    let mut entries: Vec<SupportEntry> = Vec::with_capacity(n);
    for _ in 0..n {
        let vol = s.below(volumes);
        let source = SliceRef {
            volume: vol as u32,
            slice: next_slice[vol],
        };
        next_slice[vol] += 1;
        // occasional exact duplicates exercise the tie-break
        let (tokens, image) = if !entries.is_empty() && s.uniform() < 0.1 {
            let e = &entries[s.below(entries.len())];
            (e.embedding.tokens().clone(), e.image.clone())
        } else {
            (
                Matrix::from_vec(4, 4, (0..16).map(|_| s.normal()).collect()),
                Grid2::from_vec(8, 8, (0..64).map(|_| s.uniform()).collect()),
            )
        };
        entries.push(SupportEntry {
            embedding: EmbeddingMap::new((2, 2), tokens, fp).unwrap().with_source(source),
            image,
            masks: BTreeMap::new(),
            source,
        });
    }
    let names = (0..volumes).map(|v| format!("v{v}")).collect();
    (SupportLibrary::from_parts(spec.clone(), SliceAxis::Z, names, vec![], entries).unwrap(), spec)
}

fn retrieval_suite() -> Check {
    let mut s = Stream::new("acceptance.retrieval", 0);
    for metric in SimilarityMetric::ALL {
        for trial in 0..50 {
            let n = 1 + s.below(200);
            let (lib, spec) = random_library(&mut s, n);
            let qt = Matrix::from_vec(4, 4, (0..16).map(|_| s.normal()).collect());
            let q = EmbeddingMap::new((2, 2), qt.clone(), spec.fingerprint()).unwrap();
            let img = Grid2::from_vec(8, 8, (0..64).map(|_| s.uniform()).collect::<Vec<f64>>());
            let j = 1 + s.below(n);
            let got = retrieve_top_j(&lib, Query { embedding: &q, image: &img }, j, metric, RetrievalOptions::default())
                .map_err(|e| e.to_string())?;
            let image_level = matches!(metric, SimilarityMetric::MSE | SimilarityMetric::NCC);
            let scores: Vec<f64> = lib
                .entries()
                .iter()
                .map(|e| {
                    if image_level {
                        oracle_score(metric, img.data(), e.image.data())
                    } else {
                        oracle_score(metric, q.flat(), e.embedding.flat())
                    }
                })
                .collect();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                let ord = if metric.larger_is_better() {
                    scores[b].total_cmp(&scores[a])
                } else {
                    scores[a].total_cmp(&scores[b])
                };
                ord.then(lib.entries()[a].source.cmp(&lib.entries()[b].source))
            });
            let got_idx: Vec<usize> = got.iter().map(|r| r.index).collect();
            ensure(got_idx == order[..j], || format!("{metric} trial {trial}: {got_idx:?} vs {:?}", &order[..j]))?;

            if metric == SimilarityMetric::CS {
                for c in [1e-3, 7.5, 1e4] {
                    let scaled = EmbeddingMap::new((2, 2), qt.scale(c), spec.fingerprint()).unwrap();
                    let again = retrieve_top_j(&lib, Query { embedding: &scaled, image: &img }, j, metric, RetrievalOptions::default())
                        .unwrap();
                    ensure(again.iter().map(|r| r.index).collect::<Vec<_>>() == got_idx, || {
                        format!("CS ranking changed under scale {c}")
                    })?;
                }
            }
        }
    }
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = 2 + s.below(60);
        let a: Vec<f64> = (0..n).map(|_| s.normal() * 3.0 + 1.0).collect();
        let b: Vec<f64> = (0..n).map(|_| s.normal() - 2.0).collect();
        let center = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| x - m).collect::<Vec<_>>()
        };
        let pcc = similarity(SimilarityMetric::PCC, &a, &b).unwrap();
        let cs = similarity(SimilarityMetric::CS, &center(&a), &center(&b)).unwrap();
        worst = worst.max((pcc - cs).abs());
    }
    ensure(worst <= 1e-12, || format!("PCC vs centred CS differ by {worst:e}"))?;
    Ok(format!("6 metrics x 50 trials match exhaustive scoring; PCC/CS gap {worst:.1e}"))
}

fn memory_suite() -> Check {
    let mut s = Stream::new("acceptance.memory", 0);
    let spec = EncoderSpec::patch_mean();
    let tokens = Matrix::from_vec(64, 32, (0..64 * 32).map(|_| s.normal()).collect());
    let f = EmbeddingMap::new((8, 8), tokens, spec.fingerprint()).unwrap();
    let enc = MemoryEncoder::new(32, &MemoryEncoderSpec::default());
    let zero = enc.encode(&Mask2::filled(64, 64, false), &f, MemoryKind::Anatomical).unwrap();
    ensure(&zero.tokens == f.tokens(), || "zero mask changed the embedding".into())?;

    let mut quad = Mask2::filled(16, 16, false);
    for r in 0..8 {
        for c in 0..8 {
            quad.set(r, c, true);
        }
    }
    let pooled = downsample_mask(&quad, (2, 2)).unwrap();
    ensure(pooled == [1.0, 0.0, 0.0, 0.0], || format!("quadrant pooled to {pooled:?}"))?;

    let mut mask = Mask2::filled(64, 64, false);
    mask.set(5, 9, true);
    let blocks: Vec<_> = (0..3)
        .map(|k| {
            let t = Matrix::from_vec(64, 32, (0..64 * 32).map(|_| s.normal()).collect());
            let e = EmbeddingMap::new((8, 8), t, spec.fingerprint())
                .unwrap()
                .with_source(SliceRef { volume: 0, slice: k });
            enc.encode(&mask, &e, MemoryKind::Anatomical).unwrap()
        })
        .collect();
    let vol = enc.encode(&mask, &f, MemoryKind::Volumetric).unwrap();
    let without = fuse_memories(blocks.clone(), None, ZeroBlockMode::Omit).unwrap();
    let with = fuse_memories(blocks.clone(), Some(vol.clone()), ZeroBlockMode::Omit).unwrap();
    ensure(without.total_tokens() == 192 && with.total_tokens() == 256, || {
        format!("token counts {} / {}", without.total_tokens(), with.total_tokens())
    })?;
    let order: Vec<_> = with.blocks().iter().map(|b| (b.kind, b.source)).collect();
    let want: Vec<_> = blocks
        .iter()
        .map(|b| (b.kind, b.source))
        .chain([(MemoryKind::Volumetric, None)])
        .collect();
    ensure(order == want, || format!("block order {order:?}"))?;
    for (k, b) in with.blocks().iter().enumerate() {
        ensure(with.tokens().data()[k * 64 * 32..(k + 1) * 64 * 32] == *b.tokens.data(), || {
            format!("block {k} tokens not at rows {}..{}", k * 64, (k + 1) * 64)
        })?;
    }
    Ok("zero-mask identity exact, quadrant [1,0,0,0], 192/256 tokens in rank order".into())
}

fn leak_test() -> Check {
    let ds = dataset(1);
    let enc = Encoder::new(EncoderSpec::patch_mean()).unwrap();
    let items: Vec<_> = ds.items.iter().map(|(n, v, l)| (n.clone(), v, l)).collect();
    let lib = build_library(&items, &enc, SliceAxis::Z).unwrap();
    let cfg = PipelineConfig {
        j: 1,
        ..PipelineConfig::default()
    };
    let engine = Engine::new(&lib, &cfg).unwrap();
    let mut worst = 1.0f64;
    for (k, (id, v, truth)) in ds.items.iter().enumerate() {
        let r = engine.segment_volume(v).unwrap();
        for t in &r.trace {
            let top = t.retrieved[0].source;
            ensure(top == SliceRef { volume: k as u32, slice: t.slice as u32 }, || {
                format!("{id} slice {} retrieved {top:?} first", t.slice)
            })?;
        }
        for &label in truth.label_set() {
            let d = object_dice(&r.labels, truth, label);
            worst = worst.min(d);
            ensure((d - 1.0).abs() <= 1e-9, || format!("{id} object {label}: dice {d}"))?;
        }
    }
    Ok(format!("10 volumes x 3 objects, top-1 always the twin slice, min dice {worst}"))
}

/// Nearest support slice by raw-intensity squared error; its labels are copied.
fn nearest_slice_oracle(test: &Volume, support: &[&(String, Volume, LabelVolume)]) -> LabelVolume {
    let axis = SliceAxis::Z;
    let slices: Vec<_> = (0..test.extent(axis))
        .map(|i| {
            let q = test.slice(axis, i).unwrap();
            let mut best = (f64::INFINITY, 0, 0);
            for (si, (_, sv, _)) in support.iter().enumerate() {
                for s in 0..sv.extent(axis) {
                    let c = sv.slice(axis, s).unwrap();
                    let e: f64 = q.data().iter().zip(c.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
                    if e < best.0 {
                        best = (e, si, s);
                    }
                }
            }
            support[best.1].2.slice(axis, best.2).unwrap()
        })
        .collect();
    LabelVolume::from_slices(test.geometry().clone(), axis, &slices).unwrap()
}

fn generalization() -> Check {
    let ds = dataset(1);
    let enc = Encoder::new(EncoderSpec::patch_mean()).unwrap();
    let spheres = [1u16, 2];
    let cfg = PipelineConfig {
        j: 3,
        metric: SimilarityMetric::CS,
        volumetric_consistency: true,
        ..PipelineConfig::default()
    };
    let mut oracle = BTreeMap::<u16, f64>::new();
    let mut pipeline = BTreeMap::<u16, f64>::new();
    let n = ds.items.len() as f64;
    for (k, (_, v, truth)) in ds.items.iter().enumerate() {
        let support: Vec<_> = ds.items.iter().enumerate().filter(|(i, _)| *i != k).map(|(_, it)| it).collect();
        let o = nearest_slice_oracle(v, &support);
        let items: Vec<_> = support.iter().map(|(n, v, l)| (n.clone(), v, l)).collect();
        let lib = build_library(&items, &enc, SliceAxis::Z).unwrap();
        let r = Engine::new(&lib, &cfg).unwrap().segment_volume(v).unwrap();
        for &label in truth.label_set() {
            *oracle.entry(label).or_default() += object_dice(&o, truth, label) / n;
            *pipeline.entry(label).or_default() += object_dice(&r.labels, truth, label) / n;
        }
    }
    let mean = |m: &BTreeMap<u16, f64>| spheres.iter().map(|l| m[l]).sum::<f64>() / spheres.len() as f64;
    let (om, pm) = (mean(&oracle), mean(&pipeline));
    let detail = format!(
        "sphere mean dice: oracle {om:.4}, pipeline {pm:.4}; shell oracle {:.4}, pipeline {:.4}",
        oracle[&3], pipeline[&3]
    );
    ensure(om >= 0.85, || format!("oracle below calibration bar: {detail}"))?;
    ensure(pm >= 0.80, || detail.clone())?;
    Ok(detail)
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_fateseg")
}

fn fateseg(args: &[&str]) -> Result<(), String> {
    let out = Command::new(bin()).args(args).env_remove("FATESEG_THREADS").output().map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("{args:?} exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr))
    })
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

fn determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |s: &str| tmp.path().join(s).display().to_string();
    fateseg(&["phantom", "--n", "4", "--seed", "3", "--out", &p("data")])?;
    fs::create_dir(p("support")).unwrap();
    for id in ["phantom_001", "phantom_002", "phantom_003"] {
        for ext in ["img.json", "img.raw", "lab.json", "lab.raw"] {
            fs::copy(tmp.path().join("data").join(format!("{id}.{ext}")), tmp.path().join("support").join(format!("{id}.{ext}"))).unwrap();
        }
    }
    fateseg(&["--threads", "1", "build-library", "--support", &p("support"), "--out", &p("lib1.bin")])?;
    fateseg(&["--threads", "8", "build-library", "--support", &p("support"), "--out", &p("lib8.bin")])?;
    ensure(fs::read(p("lib1.bin")).unwrap() == fs::read(p("lib8.bin")).unwrap(), || {
        "library differs between 1 and 8 threads".into()
    })?;
    let test = p("data/phantom_000.img.json");
    let seg = |threads: &str, out: &str| {
        fateseg(&["--threads", threads, "segment", "--test", &test, "--library", &p("lib1.bin"), "--logits", "--out", &p(out)])
    };
    seg("8", "a")?;
    seg("8", "b")?;
    seg("1", "c")?;
    let (a, b, c) = (dir_bytes(&tmp.path().join("a")), dir_bytes(&tmp.path().join("b")), dir_bytes(&tmp.path().join("c")));
    ensure(a == b, || "rerun output differs".into())?;
    ensure(a == c, || "--threads 1 output differs from --threads 8".into())?;
    Ok(format!("{} output files byte-identical across reruns and thread counts", a.len()))
}

fn pipeline_structure() -> Check {
    for (n, q1, q3) in [(1usize, 0usize, 0usize), (7, 1, 5), (100, 25, 75)] {
        let got = (
            initial_slice_index(InitialSlice::Q1, n).unwrap(),
            initial_slice_index(InitialSlice::Q3, n).unwrap(),
        );
        ensure(got == (q1, q3), || format!("n={n}: Q1/Q3 = {got:?}"))?;
        ensure(
            got.0 == (0.25 * n as f64).floor() as usize && got.1 == (0.75 * n as f64).floor() as usize,
            || format!("n={n}: not the 25%/75% slice"),
        )?;
    }

    let ds = dataset(5);
    let enc = Encoder::new(EncoderSpec::patch_mean()).unwrap();
    let items: Vec<_> = ds.items[1..5].iter().map(|(n, v, l)| (n.clone(), v, l)).collect();
    let lib = build_library(&items, &enc, SliceAxis::Z).unwrap();
    let test = &ds.items[0].1;
    let n = test.extent(SliceAxis::Z);
    for consistency in [true, false] {
        for start in [InitialSlice::First, InitialSlice::Q1, InitialSlice::Last] {
            let cfg = PipelineConfig {
                volumetric_consistency: consistency,
                initial_slice: start,
                ..PipelineConfig::default()
            };
            let r = Engine::new(&lib, &cfg).unwrap().segment_volume(test).unwrap();
            for &label in lib.object_labels() {
                let seen: Vec<usize> = r.trace.iter().filter(|t| t.object == label).map(|t| t.slice).collect();
                let set: BTreeSet<usize> = seen.iter().copied().collect();
                ensure(seen.len() == n && set.len() == n, || {
                    format!("object {label}: {} predictions over {} distinct slices", seen.len(), set.len())
                })?;
                let vol_mem = r.trace.iter().filter(|t| t.object == label && t.volumetric_from.is_some()).count();
                ensure(vol_mem == if consistency { n - 1 } else { 0 }, || {
                    format!("object {label}: {vol_mem} slices used volumetric memory")
                })?;
            }
        }
    }

    let cfg = PipelineConfig {
        volumetric_consistency: false,
        ..PipelineConfig::default()
    };
    let engine = Engine::new(&lib, &cfg).unwrap();
    let emb = engine.encode_volume(test).unwrap();
    let mut order: Vec<usize> = (0..n).collect();
    Stream::new("acceptance.schedule", 0).shuffle(&mut order);
    for &label in lib.object_labels() {
        let (run, _) = engine.segment_object(&emb, label).unwrap();
        let mut shuffled = vec![None; n];
        for &i in &order {
            shuffled[i] = Some(engine.predict_slice(&emb, label, i, None).unwrap().0);
        }
        for (i, m) in shuffled.into_iter().enumerate() {
            let m = m.unwrap();
            let same = m.binary == run.masks[i].binary
                && m.logits.data().iter().zip(run.masks[i].logits.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            ensure(same, || format!("object {label} slice {i} differs under a shuffled schedule"))?;
        }
    }
    Ok(format!("coverage exact on {n} slices x 3 objects, Q1/Q3 floor rule, shuffled schedule bit-identical"))
}

fn ablation() -> Check {
    let ds = jittered_dataset(&standard_phantom_spec(), 5, 2.0, 9).unwrap();
    let base = PipelineConfig::default();
    let plan = |axis: AblationAxis, values: &[&str]| AblationPlan {
        axis,
        values: values.iter().map(|v| axis.parse_value(v).unwrap()).collect(),
        base: base.clone(),
        support_fraction: 0.2,
        split_seed: 0,
    };
    let metric_plan = plan(AblationAxis::Metric, &["CS", "MSE", "NCC", "MD", "ED", "PCC"]);
    let (metrics, _) = run_ablation(&metric_plan, &ds.items).map_err(|e| e.to_string())?;
    ensure(metrics.rows.len() == 6, || format!("{} metric rows", metrics.rows.len()))?;
    let (again, _) = run_ablation(&metric_plan, &ds.items).map_err(|e| e.to_string())?;
    ensure(
        serde_json::to_vec(&metrics).unwrap() == serde_json::to_vec(&again).unwrap() && metrics.to_csv() == again.to_csv(),
        || "metric table rerun differs".into(),
    )?;

    let (examples, _) = run_ablation(&plan(AblationAxis::ExampleCount, &["1", "2", "3", "4", "5"]), &ds.items)
        .map_err(|e| e.to_string())?;
    ensure(examples.rows.len() == 5, || format!("{} example-count rows", examples.rows.len()))?;
    let work: Vec<usize> = examples.rows.iter().map(|r| r.memory_tokens).collect();
    ensure(work.windows(2).all(|w| w[0] <= w[1]), || format!("workload not monotone: {work:?}"))?;

    let (consistency, _) = run_ablation(&plan(AblationAxis::Consistency, &["off", "on"]), &ds.items)
        .map_err(|e| e.to_string())?;
    ensure(consistency.rows.len() == 2, || format!("{} consistency rows", consistency.rows.len()))?;
    let cons: Vec<String> = consistency
        .rows
        .iter()
        .map(|r| format!("{}={:.4}", r.axis_value, r.report.overall_mean))
        .collect();
    Ok(format!(
        "6 metric rows (rerun identical), 5 example-count rows with workload {work:?}, consistency {}",
        cons.join(" ")
    ))
}

fn dice_and_io() -> Check {
    let m = |v: Vec<bool>| Mask3 { dims: [v.len(), 1, 1], data: v };
    let a = m((0..300).map(|i| i < 100).collect());
    let b = m((0..300).map(|i| (50..150).contains(&i)).collect());
    let c = m((0..300).map(|i| i >= 200).collect());
    let e = m(vec![false; 300]);
    ensure(dice(&a, &b).unwrap() == 0.5, || "100/100/50 case".into())?;
    ensure(dice(&a, &b).unwrap() == dice(&b, &a).unwrap(), || "asymmetric".into())?;
    ensure(dice(&a, &a).unwrap() == 1.0 && dice(&e, &e).unwrap() == 1.0, || "self dice".into())?;
    ensure(dice(&a, &c).unwrap() == 0.0, || "disjoint".into())?;
    let mut s = Stream::new("acceptance.dice", 0);
    for _ in 0..500 {
        let n = 1 + s.below(64);
        let x = m((0..n).map(|_| s.uniform() < 0.3).collect());
        let y = m((0..n).map(|_| s.uniform() < 0.6).collect());
        ensure(dice(&x, &y).unwrap() == dice(&y, &x).unwrap(), || "asymmetric on random masks".into())?;
    }

    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let g = Geometry::new([5, 4, 3], [0.5, 1.0, 2.5]).unwrap();
    let vals: Vec<f32> = (0..60).map(|i| (i as f32 * 0.37).sin() * 1e3 + f32::EPSILON).collect();
    let vol = AnyVolume::Scalar(Volume::new(g.clone(), vals).unwrap());
    let labs: Vec<u16> = (0..60).map(|i| (i * 7 % 5) as u16).collect();
    let u8v = AnyVolume::Labels(LabelVolume::new(g.clone(), labs.clone()).unwrap().with_dtype(LabelDtype::U8).unwrap());
    let u16v = AnyVolume::Labels(LabelVolume::new(g, labs.iter().map(|l| l * 1000).collect()).unwrap());
    for (name, v) in [("f32", &vol), ("u8", &u8v), ("u16", &u16v)] {
        let p = tmp.path().join(format!("{name}.img.json"));
        save_volume(v, &p).unwrap();
        let back = load_volume(&p).unwrap();
        let same = match (v, &back) {
            (AnyVolume::Scalar(x), AnyVolume::Scalar(y)) => {
                x.geometry() == y.geometry() && x.data().iter().zip(y.data()).all(|(a, b)| a.to_bits() == b.to_bits())
            }
            (AnyVolume::Labels(x), AnyVolume::Labels(y)) => x == y,
            _ => false,
        };
        ensure(same, || format!("{name} round trip changed the volume"))?;
        let p2 = tmp.path().join(format!("{name}2.img.json"));
        save_volume(&back, &p2).unwrap();
        ensure(
            fs::read(tmp.path().join(format!("{name}.img.raw"))).unwrap() == fs::read(tmp.path().join(format!("{name}2.img.raw"))).unwrap(),
            || format!("{name} raw bytes changed on re-save"),
        )?;
    }
    Ok("dice symmetry/identity/disjoint/empty/0.5 hold; f32, u8, u16 round trips bit-exact".into())
}

fn main() {
    let results = [
        run(1, "attention oracle", Some(10.0), attention_oracle),
        run(2, "retrieval", Some(10.0), retrieval_suite),
        run(3, "memory", None, memory_suite),
        run(4, "leak test", Some(60.0), leak_test),
        run(5, "generalization", Some(300.0), generalization),
        run(6, "determinism", None, determinism),
        run(7, "pipeline structure", None, pipeline_structure),
        run(8, "ablation runner", None, ablation),
        run(9, "dice and i/o", None, dice_and_io),
    ];
    let passed = results.iter().filter(|&&r| r).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
