//! End-to-end segmentation of a test volume against a support library.
//!
//! Per object: the initial slice is predicted from retrieved support memories
//! alone, then two sweeps walk outwards to the first and last slice, each step
//! also remembering the neighbouring slice it just predicted. Objects are
//! merged voxel-wise by the largest positive logit.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{memory_attention, AttentionInit, AttentionSpec, AttentionWeights, CaArgOrder, ResidualMode};
use crate::decoder::{decode, DecoderSpec, SliceMask, TokenLayout};
use crate::encoder::{EmbeddingMap, Encoder, EncoderSpec};
use crate::error::{Error, Result};
use crate::grid::Grid2;
use crate::memory::{fuse_memories, MemoryEncoder, MemoryEncoderSpec, MemoryKind, ZeroBlockMode};
use crate::retrieval::{retrieve_top_j, Query, RetrievalOptions, Retrieved, SimilarityMetric, SupportLibrary};
use crate::volume::{LabelVolume, SliceAxis, Volume};

/// Where propagation starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialSlice {
    First,
    Q1,
    #[default]
    Center,
    Q3,
    Last,
    Index(usize),
}

impl InitialSlice {
    pub const NAMED: [InitialSlice; 5] = [
        InitialSlice::First,
        InitialSlice::Q1,
        InitialSlice::Center,
        InitialSlice::Q3,
        InitialSlice::Last,
    ];
}

impl fmt::Display for InitialSlice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitialSlice::First => f.write_str("first"),
            InitialSlice::Q1 => f.write_str("q1"),
            InitialSlice::Center => f.write_str("center"),
            InitialSlice::Q3 => f.write_str("q3"),
            InitialSlice::Last => f.write_str("last"),
            InitialSlice::Index(k) => write!(f, "index:{k}"),
        }
    }
}

impl FromStr for InitialSlice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        let named = InitialSlice::NAMED.into_iter().find(|n| n.to_string() == t);
        if let Some(n) = named {
            return Ok(n);
        }
        t.strip_prefix("index:")
            .unwrap_or(&t)
            .parse()
            .map(InitialSlice::Index)
            .map_err(|_| Error::Input(format!("unknown initial slice {s:?}")))
    }
}

pub fn initial_slice_index(strategy: InitialSlice, n: usize) -> Result<usize> {
    if n == 0 {
        return Err(Error::IndexOutOfRange { index: 0, extent: 0 });
    }
    Ok(match strategy {
        InitialSlice::First => 0,
        InitialSlice::Q1 => n / 4,
        InitialSlice::Center => n / 2,
        InitialSlice::Q3 => 3 * n / 4,
        InitialSlice::Last => n - 1,
        InitialSlice::Index(k) if k < n => k,
        InitialSlice::Index(k) => return Err(Error::IndexOutOfRange { index: k, extent: n }),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeRule {
    /// Highest logit among objects predicting the voxel; ties go to the lower label.
    #[default]
    MaxLogit,
}

/// Attention parameters; the channel count comes from the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionParams {
    #[serde(default = "one")]
    pub layers: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub init: AttentionInit,
}

impl Default for AttentionParams {
    fn default() -> Self {
        AttentionParams {
            layers: 1,
            seed: 0,
            init: AttentionInit::default(),
        }
    }
}

fn one() -> usize {
    1
}

fn three() -> usize {
    3
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "three")]
    pub j: usize,
    #[serde(default)]
    pub metric: SimilarityMetric,
    #[serde(default)]
    pub initial_slice: InitialSlice,
    #[serde(default = "yes")]
    pub volumetric_consistency: bool,
    #[serde(default)]
    pub encoder: EncoderSpec,
    #[serde(default)]
    pub decoder: DecoderSpec,
    #[serde(default)]
    pub attention: AttentionParams,
    #[serde(default)]
    pub memory: MemoryEncoderSpec,
    #[serde(default)]
    pub axis: SliceAxis,
    #[serde(default)]
    pub residual_mode: ResidualMode,
    #[serde(default)]
    pub ca_arg_order: CaArgOrder,
    #[serde(default)]
    pub zero_block_mode: ZeroBlockMode,
    #[serde(default)]
    pub normalize: bool,
    /// Number of previously predicted slices remembered; only 1 is supported.
    #[serde(default = "one")]
    pub memory_window: usize,
    #[serde(default)]
    pub merge_rule: MergeRule,
    /// Keep per-object logit volumes in the result.
    #[serde(default)]
    pub keep_logits: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.j == 0 {
            return Err(Error::InvalidConfig("j must be at least 1".into()));
        }
        if self.memory_window != 1 {
            return Err(Error::InvalidConfig(format!(
                "memory_window {} unsupported; only the adjacent slice is remembered",
                self.memory_window
            )));
        }
        if !self.decoder.threshold.is_finite() {
            return Err(Error::InvalidConfig("decoder threshold must be finite".into()));
        }
        if self.attention.layers == 0 {
            return Err(Error::InvalidConfig("attention layers must be at least 1".into()));
        }
        self.encoder.validate().map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// First 16 hex digits of the SHA-256 of the config JSON.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    fn attention_spec(&self) -> AttentionSpec {
        AttentionSpec {
            channels: self.encoder.channels,
            layers: self.attention.layers,
            seed: self.attention.seed,
            init: self.attention.init,
            residual_mode: self.residual_mode,
            ca_arg_order: self.ca_arg_order,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Initial,
    Forward,
    Backward,
}

/// What went into one slice prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceTrace {
    pub object: u16,
    pub slice: usize,
    pub direction: Direction,
    pub retrieved: Vec<Retrieved>,
    /// Slice whose prediction served as volumetric memory.
    pub volumetric_from: Option<usize>,
}

/// Encoded test slices, shared by all objects.
#[derive(Debug, Clone, PartialEq)]
pub struct TestEmbeddings {
    pub images: Vec<Grid2<f64>>,
    pub embeddings: Vec<EmbeddingMap>,
    pub slice_dims: (usize, usize),
}

impl TestEmbeddings {
    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectRun {
    pub label: u16,
    /// Indexed by slice.
    pub masks: Vec<SliceMask>,
    /// In prediction order: initial, forward sweep, backward sweep.
    pub trace: Vec<SliceTrace>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeSummary {
    pub rule: MergeRule,
    /// Voxels claimed by more than one object.
    pub contested_voxels: usize,
    /// Contested voxels settled by an exact logit tie.
    pub tied_voxels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationResult {
    pub labels: LabelVolume,
    pub per_object_logits: Option<BTreeMap<u16, Volume>>,
    pub trace: Vec<SliceTrace>,
    pub merge: MergeSummary,
    /// Total memory tokens attended to, summed over all slice predictions.
    pub memory_tokens: usize,
}

/// Everything needed to predict slices: library, configuration and the
/// weights derived from it.
pub struct Engine<'a> {
    lib: &'a SupportLibrary,
    cfg: PipelineConfig,
    encoder: Encoder,
    attention: AttentionWeights,
    memory: MemoryEncoder,
}

impl<'a> Engine<'a> {
    pub fn new(lib: &'a SupportLibrary, cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        if lib.is_empty() {
            return Err(Error::EmptyLibrary);
        }
        let encoder = Encoder::new(cfg.encoder.clone())?;
        if encoder.fingerprint() != lib.fingerprint() {
            return Err(Error::FingerprintMismatch {
                library: lib.fingerprint().to_string(),
                query: encoder.fingerprint().to_string(),
            });
        }
        if cfg.axis != lib.axis() {
            return Err(Error::InvalidConfig(format!(
                "configured axis {:?} but the library was built along {:?}",
                cfg.axis,
                lib.axis()
            )));
        }
        if cfg.j > lib.len() {
            return Err(Error::JTooLarge { j: cfg.j, available: lib.len() });
        }
        Ok(Engine {
            lib,
            attention: AttentionWeights::new(&cfg.attention_spec())?,
            memory: MemoryEncoder::new(cfg.encoder.channels, &cfg.memory),
            cfg: cfg.clone(),
            encoder,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn encode_volume(&self, test: &Volume) -> Result<TestEmbeddings> {
        let axis = self.cfg.axis;
        let n = test.extent(axis);
        let pairs = (0..n)
            .into_par_iter()
            .map(|i| {
                let img = self.encoder.prepare(&test.slice(axis, i)?)?;
                let emb = self.encoder.encode_prepared(&img)?;
                Ok((img, emb))
            })
            .collect::<Result<Vec<_>>>()?;
        let (images, embeddings) = pairs.into_iter().unzip();
        Ok(TestEmbeddings {
            images,
            embeddings,
            slice_dims: test.geometry().slice_dims(axis),
        })
    }

    /// Predict slice `i` of `label`, optionally remembering a neighbour's prediction.
    pub fn predict_slice(
        &self,
        test: &TestEmbeddings,
        label: u16,
        i: usize,
        previous: Option<(usize, &SliceMask)>,
    ) -> Result<(SliceMask, Vec<Retrieved>, usize)> {
        let emb = &test.embeddings[i];
        let query = Query {
            embedding: emb,
            image: &test.images[i],
        };
        let opts = RetrievalOptions {
            normalize: self.cfg.normalize,
        };
        let retrieved = retrieve_top_j(self.lib, query, self.cfg.j, self.cfg.metric, opts)?;
        let anatomical = retrieved
            .iter()
            .map(|r| {
                let entry = &self.lib.entries()[r.index];
                let mask = entry.mask(label).ok_or(Error::LabelUnknown(label))?;
                self.memory.encode(mask, &entry.embedding, MemoryKind::Anatomical)
            })
            .collect::<Result<Vec<_>>>()?;
        let volumetric = match previous {
            Some((p, m)) if self.cfg.volumetric_consistency => {
                Some(self.memory.encode(&m.binary, &test.embeddings[p], MemoryKind::Volumetric)?)
            }
            _ => None,
        };
        let mem = fuse_memories(anatomical, volumetric, self.cfg.zero_block_mode)?;
        let out = memory_attention(&mem, emb.tokens(), &self.attention)?;
        let layout = TokenLayout {
            grid: emb.grid(),
            patch: self.cfg.encoder.patch,
        };
        let mask = decode(&self.cfg.decoder, &out, &mem, layout, test.slice_dims)?;
        Ok((mask, retrieved, mem.total_tokens()))
    }

    /// Bidirectional propagation for one object.
    pub fn segment_object(&self, test: &TestEmbeddings, label: u16) -> Result<(ObjectRun, usize)> {
        if !self.lib.object_labels().contains(&label) {
            return Err(Error::LabelUnknown(label));
        }
        let n = test.len();
        let i0 = initial_slice_index(self.cfg.initial_slice, n)?;
        let trace_of = |slice, direction, retrieved, volumetric_from| SliceTrace {
            object: label,
            slice,
            direction,
            retrieved,
            volumetric_from,
        };

        if !self.cfg.volumetric_consistency {
            // every slice is independent
            let order: Vec<usize> = std::iter::once(i0).chain(i0 + 1..n).chain((0..i0).rev()).collect();
            let preds = order
                .par_iter()
                .map(|&i| self.predict_slice(test, label, i, None))
                .collect::<Result<Vec<_>>>()?;
            let mut masks: Vec<Option<SliceMask>> = vec![None; n];
            let mut trace = Vec::with_capacity(n);
            let mut tokens = 0;
            for (k, (&i, (m, r, t))) in order.iter().zip(preds).enumerate() {
                let dir = match k {
                    0 => Direction::Initial,
                    _ if i > i0 => Direction::Forward,
                    _ => Direction::Backward,
                };
                trace.push(trace_of(i, dir, r, None));
                masks[i] = Some(m);
                tokens += t;
            }
            let masks = masks.into_iter().map(|m| m.expect("every slice predicted")).collect();
            return Ok((ObjectRun { label, masks, trace }, tokens));
        }

        let (m0, r0, t0) = self.predict_slice(test, label, i0, None)?;
        let sweep = |range: Vec<usize>, dir: Direction| -> Result<(Vec<(usize, SliceMask, SliceTrace)>, usize)> {
            let mut out: Vec<(usize, SliceMask, SliceTrace)> = Vec::with_capacity(range.len());
            let mut tokens = 0;
            let mut prev_slice = i0;
            for i in range {
                let prev = out.last().map_or(&m0, |(_, m, _)| m);
                let (m, r, t) = self.predict_slice(test, label, i, Some((prev_slice, prev)))?;
                out.push((i, m, trace_of(i, dir, r, Some(prev_slice))));
                tokens += t;
                prev_slice = i;
            }
            Ok((out, tokens))
        };
        let (fwd, bwd) = rayon::join(
            || sweep((i0 + 1..n).collect(), Direction::Forward),
            || sweep((0..i0).rev().collect(), Direction::Backward),
        );
        let (fwd, tf) = fwd?;
        let (bwd, tb) = bwd?;

        let mut masks: Vec<Option<SliceMask>> = vec![None; n];
        let mut trace = vec![trace_of(i0, Direction::Initial, r0, None)];
        masks[i0] = Some(m0);
        for (i, m, t) in fwd.into_iter().chain(bwd) {
            masks[i] = Some(m);
            trace.push(t);
        }
        let masks = masks.into_iter().map(|m| m.expect("every slice predicted")).collect();
        Ok((ObjectRun { label, masks, trace }, t0 + tf + tb))
    }

    pub fn segment_volume(&self, test: &Volume) -> Result<SegmentationResult> {
        let emb = self.encode_volume(test)?;
        self.segment_encoded(test, &emb)
    }

    /// Segment all library objects using precomputed test embeddings.
    pub fn segment_encoded(&self, test: &Volume, emb: &TestEmbeddings) -> Result<SegmentationResult> {
        let runs = self
            .lib
            .object_labels()
            .par_iter()
            .map(|&l| self.segment_object(emb, l))
            .collect::<Result<Vec<_>>>()?;
        let memory_tokens = runs.iter().map(|(_, t)| t).sum();
        let runs: Vec<ObjectRun> = runs.into_iter().map(|(r, _)| r).collect();
        let (labels, merge) = merge_runs(test, self.cfg.axis, &runs)?;
        let per_object_logits = if self.cfg.keep_logits {
            let mut map = BTreeMap::new();
            for r in &runs {
                let slices: Vec<Grid2<f32>> = r.masks.iter().map(|m| m.logits.map(|&v| v as f32)).collect();
                map.insert(r.label, Volume::from_slices(test.geometry().clone(), self.cfg.axis, &slices)?);
            }
            Some(map)
        } else {
            None
        };
        Ok(SegmentationResult {
            labels,
            per_object_logits,
            trace: runs.into_iter().flat_map(|r| r.trace).collect(),
            merge,
            memory_tokens,
        })
    }
}

/// Voxel-wise merge by largest positive logit; runs must be in ascending label order.
pub fn merge_runs(test: &Volume, axis: SliceAxis, runs: &[ObjectRun]) -> Result<(LabelVolume, MergeSummary)> {
    let n = test.extent(axis);
    let (rows, cols) = test.geometry().slice_dims(axis);
    let mut summary = MergeSummary {
        rule: MergeRule::MaxLogit,
        contested_voxels: 0,
        tied_voxels: 0,
    };
    let mut slices = Vec::with_capacity(n);
    for i in 0..n {
        let mut out = Grid2::filled(rows, cols, 0u16);
        for r in 0..rows {
            for c in 0..cols {
                let mut best: Option<(u16, f64)> = None;
                let mut claimants = 0;
                let mut tie = false;
                for run in runs {
                    let m = &run.masks[i];
                    if !*m.binary.get(r, c) {
                        continue;
                    }
                    claimants += 1;
                    let v = *m.logits.get(r, c);
                    match best {
                        Some((_, b)) if v > b => {
                            best = Some((run.label, v));
                            tie = false;
                        }
                        Some((_, b)) if v == b => tie = true,
                        Some(_) => {}
                        None => best = Some((run.label, v)),
                    }
                }
                if claimants > 1 {
                    summary.contested_voxels += 1;
                    summary.tied_voxels += tie as usize;
                }
                if let Some((l, _)) = best {
                    out.set(r, c, l);
                }
            }
        }
        slices.push(out);
    }
    Ok((LabelVolume::from_slices(test.geometry().clone(), axis, &slices)?, summary))
}

/// Convenience wrapper: build the engine and segment one volume.
pub fn segment_volume(test: &Volume, lib: &SupportLibrary, cfg: &PipelineConfig) -> Result<SegmentationResult> {
    Engine::new(lib, cfg)?.segment_volume(test)
}
