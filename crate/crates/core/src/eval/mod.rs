//! Dice scoring, support/test splitting and per-volume evaluation.

mod ablation;

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{Engine, PipelineConfig};
use crate::retrieval::SupportLibrary;
use crate::rng::Stream;
use crate::volume::{LabelVolume, Volume};

pub use ablation::{run_ablation, AblationAxis, AblationPlan, AblationTable, AblationTimings, AxisValue};

/// A binary 3D mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask3 {
    pub dims: [usize; 3],
    pub data: Vec<bool>,
}

impl Mask3 {
    pub fn from_labels(labels: &LabelVolume, label: u16) -> Self {
        Mask3 {
            dims: labels.dims(),
            data: labels.mask(label),
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// `2|A and B| / (|A| + |B|)`, 1 when both masks are empty.
pub fn dice(a: &Mask3, b: &Mask3) -> Result<f64> {
    if a.dims != b.dims || a.data.len() != b.data.len() {
        return Err(Error::DimMismatch(a.dims.to_vec(), b.dims.to_vec()));
    }
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Seeded shuffle, then the first `round(fraction * N)` ids (at least one,
/// at most N - 1) become support.
pub fn split_support_test(ids: &[String], fraction: f64, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    let n = ids.len();
    if n < 2 {
        return Err(Error::TooFewVolumes(n));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidConfig(format!("support fraction {fraction} outside (0, 1)")));
    }
    let k = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    Ok(split_by_count(ids, k, seed))
}

pub(crate) fn split_by_count(ids: &[String], k: usize, seed: u64) -> (Vec<String>, Vec<String>) {
    let mut order = ids.to_vec();
    Stream::new("eval.split", seed).shuffle(&mut order);
    let test = order.split_off(k);
    (order, test)
}

/// Dice of one object in one test volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeRow {
    pub volume: String,
    pub object_label: u16,
    pub dice: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectStats {
    pub mean_dice: f64,
    /// Population standard deviation across test volumes.
    pub std_dice: f64,
    pub n_volumes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub per_object: BTreeMap<u16, ObjectStats>,
    /// Mean of the per-object means.
    pub overall_mean: f64,
    pub rows: Vec<VolumeRow>,
}

impl DiceReport {
    pub fn from_rows(rows: Vec<VolumeRow>) -> Self {
        let mut by_obj: BTreeMap<u16, Vec<f64>> = BTreeMap::new();
        for r in &rows {
            by_obj.entry(r.object_label).or_default().push(r.dice);
        }
        let per_object: BTreeMap<u16, ObjectStats> = by_obj
            .into_iter()
            .map(|(l, v)| {
                let n = v.len() as f64;
                let mean = v.iter().sum::<f64>() / n;
                let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                (
                    l,
                    ObjectStats {
                        mean_dice: mean,
                        std_dice: var.sqrt(),
                        n_volumes: v.len(),
                    },
                )
            })
            .collect();
        let overall_mean = if per_object.is_empty() {
            0.0
        } else {
            per_object.values().map(|s| s.mean_dice).sum::<f64>() / per_object.len() as f64
        };
        DiceReport {
            per_object,
            overall_mean,
            rows,
        }
    }
}

/// Per-object Dice between a prediction and ground truth. Objects are the
/// union of `objects` and the labels present in either volume.
pub fn score_labels(volume: &str, pred: &LabelVolume, truth: &LabelVolume, objects: &[u16]) -> Result<Vec<VolumeRow>> {
    if pred.dims() != truth.dims() {
        return Err(Error::DimMismatch(pred.dims().to_vec(), truth.dims().to_vec()));
    }
    let all: BTreeSet<u16> = objects
        .iter()
        .chain(pred.label_set())
        .chain(truth.label_set())
        .copied()
        .collect();
    all.into_iter()
        .map(|l| {
            Ok(VolumeRow {
                volume: volume.to_string(),
                object_label: l,
                dice: dice(&Mask3::from_labels(pred, l), &Mask3::from_labels(truth, l))?,
            })
        })
        .collect()
}

/// Segment each test volume and score it. Returns the rows (volume order,
/// then label order) and the total memory-token workload.
pub fn evaluate(
    tests: &[(String, &Volume, &LabelVolume)],
    lib: &SupportLibrary,
    cfg: &PipelineConfig,
) -> Result<(Vec<VolumeRow>, usize)> {
    let engine = Engine::new(lib, cfg)?;
    let per_volume = tests
        .par_iter()
        .map(|(id, v, truth)| {
            let res = engine.segment_volume(v)?;
            Ok((score_labels(id, &res.labels, truth, lib.object_labels())?, res.memory_tokens))
        })
        .collect::<Result<Vec<_>>>()?;
    let work = per_volume.iter().map(|(_, w)| w).sum();
    Ok((per_volume.into_iter().flat_map(|(r, _)| r).collect(), work))
}
