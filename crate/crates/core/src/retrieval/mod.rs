//! Support library construction and top-j retrieval.

mod metric;
mod store;

pub use metric::{better, similarity, MetricLevel, SimilarityMetric};
pub use store::{load_library, save_library};

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{EmbeddingMap, Encoder, EncoderSpec, Fingerprint, SliceRef};
use crate::error::{Error, Result};
use crate::grid::{Grid2, Mask2};
use crate::volume::{check_pair, LabelVolume, SliceAxis, Volume};

/// One support slice: its embedding, the encoder-sized image (for image-level
/// metrics) and one binary mask per library label at the slice's own resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportEntry {
    pub embedding: EmbeddingMap,
    pub image: Grid2<f64>,
    pub masks: BTreeMap<u16, Mask2>,
    pub source: SliceRef,
}

impl SupportEntry {
    pub fn mask(&self, label: u16) -> Option<&Mask2> {
        self.masks.get(&label)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupportLibrary {
    encoder: EncoderSpec,
    fingerprint: Fingerprint,
    axis: SliceAxis,
    volume_names: Vec<String>,
    labels: Vec<u16>,
    entries: Vec<SupportEntry>,
}

impl SupportLibrary {
    pub fn encoder_spec(&self) -> &EncoderSpec {
        &self.encoder
    }

    pub fn fingerprint(&self) -> Fingerprint {
        self.fingerprint
    }

    pub fn axis(&self) -> SliceAxis {
        self.axis
    }

    pub fn volume_names(&self) -> &[String] {
        &self.volume_names
    }

    pub fn volume_name(&self, ordinal: u32) -> &str {
        &self.volume_names[ordinal as usize]
    }

    /// Union of labels over all support volumes, sorted.
    pub fn object_labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn entries(&self) -> &[SupportEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Assemble a library from prebuilt entries, checking the shared-fingerprint
    /// and per-label mask invariants.
    pub fn from_parts(
        encoder: EncoderSpec,
        axis: SliceAxis,
        volume_names: Vec<String>,
        labels: Vec<u16>,
        entries: Vec<SupportEntry>,
    ) -> Result<Self> {
        let fingerprint = encoder.fingerprint();
        for e in &entries {
            if e.embedding.fingerprint() != fingerprint {
                return Err(Error::FingerprintMismatch {
                    library: fingerprint.to_string(),
                    query: e.embedding.fingerprint().to_string(),
                });
            }
            if e.masks.keys().copied().collect::<Vec<_>>() != labels {
                return Err(Error::ShapeMismatch(format!(
                    "entry {:?} masks do not cover labels {labels:?}",
                    e.source
                )));
            }
            if e.source.volume as usize >= volume_names.len() {
                return Err(Error::LibraryFormat(format!("entry refers to unknown volume {}", e.source.volume)));
            }
        }
        Ok(SupportLibrary {
            encoder,
            fingerprint,
            axis,
            volume_names,
            labels,
            entries,
        })
    }
}

/// Encode every slice of every support volume.
///
/// Entries are ordered by (volume ordinal, slice index); volume ordinals follow
/// the order of `support`.
pub fn build_library(support: &[(String, &Volume, &LabelVolume)], encoder: &Encoder, axis: SliceAxis) -> Result<SupportLibrary> {
    if support.is_empty() {
        return Err(Error::EmptySupportSet);
    }
    for (name, v, l) in support {
        check_pair(v, l).map_err(|e| Error::GeometryMismatch(format!("{name}: {e}")))?;
    }
    let labels: Vec<u16> = support
        .iter()
        .flat_map(|(_, _, l)| l.label_set().iter().copied())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    let jobs: Vec<(usize, usize)> = support
        .iter()
        .enumerate()
        .flat_map(|(vi, (_, v, _))| (0..v.extent(axis)).map(move |s| (vi, s)))
        .collect();

    let entries = jobs
        .par_iter()
        .map(|&(vi, s)| {
            let (_, vol, lab) = &support[vi];
            let slice = vol.slice(axis, s)?;
            let image = encoder.prepare(&slice)?;
            let source = SliceRef {
                volume: vi as u32,
                slice: s as u32,
            };
            let embedding = encoder.encode_prepared(&image)?.with_source(source);
            let label_slice = lab.slice(axis, s)?;
            let masks = labels.iter().map(|&l| (l, label_slice.map(|&v| v == l))).collect();
            Ok(SupportEntry {
                embedding,
                image,
                masks,
                source,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    SupportLibrary::from_parts(
        encoder.spec().clone(),
        axis,
        support.iter().map(|(n, ..)| n.clone()).collect(),
        labels,
        entries,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RetrievalOptions {
    /// L2-normalise flattened embeddings before feature-level scoring.
    #[serde(default)]
    pub normalize: bool,
}

/// What a test slice is compared with: its embedding and its encoder-sized image.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub embedding: &'a EmbeddingMap,
    pub image: &'a Grid2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Retrieved {
    /// Position in [`SupportLibrary::entries`].
    pub index: usize,
    pub source: SliceRef,
    pub score: f64,
}

fn l2_normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

/// Score every library entry against the query, in entry order.
///
/// Entries whose score is undefined (zero vector / zero variance) come back as `None`.
pub fn score_all(lib: &SupportLibrary, query: Query<'_>, metric: SimilarityMetric, opts: RetrievalOptions) -> Result<Vec<Option<f64>>> {
    if lib.is_empty() {
        return Err(Error::EmptyLibrary);
    }
    match metric.level() {
        MetricLevel::Feature => {
            if query.embedding.fingerprint() != lib.fingerprint() {
                return Err(Error::FingerprintMismatch {
                    library: lib.fingerprint().to_string(),
                    query: query.embedding.fingerprint().to_string(),
                });
            }
            let q = if opts.normalize {
                l2_normalized(query.embedding.flat())
            } else {
                query.embedding.flat().to_vec()
            };
            metric::check_query(metric, &q)?;
            Ok(lib
                .entries
                .iter()
                .map(|e| {
                    let s = if opts.normalize {
                        similarity(metric, &q, &l2_normalized(e.embedding.flat()))
                    } else {
                        similarity(metric, &q, e.embedding.flat())
                    };
                    s.ok()
                })
                .collect())
        }
        MetricLevel::Image => {
            let q = query.image.data();
            let want = lib.entries[0].image.dims();
            if query.image.dims() != want {
                return Err(Error::ShapeMismatch(format!(
                    "query image {:?} vs library {want:?}",
                    query.image.dims()
                )));
            }
            metric::check_query(metric, q)?;
            Ok(lib
                .entries
                .iter()
                .map(|e| similarity(metric, q, e.image.data()).ok())
                .collect())
        }
    }
}

/// The `j` entries most similar to `query`, best first. Ties (and undefined
/// scores, which rank last) fall back to ascending (volume, slice).
pub fn retrieve_top_j(
    lib: &SupportLibrary,
    query: Query<'_>,
    j: usize,
    metric: SimilarityMetric,
    opts: RetrievalOptions,
) -> Result<Vec<Retrieved>> {
    if lib.is_empty() {
        return Err(Error::EmptyLibrary);
    }
    if j == 0 || j > lib.len() {
        return Err(Error::JTooLarge { j, available: lib.len() });
    }
    let scores = score_all(lib, query, metric, opts)?;
    let mut order: Vec<usize> = (0..lib.len()).collect();
    let cmp = |a: &usize, b: &usize| -> Ordering {
        let by_score = match (scores[*a], scores[*b]) {
            (Some(x), Some(y)) => {
                if better(metric, x, y) {
                    Ordering::Less
                } else if better(metric, y, x) {
                    Ordering::Greater
                } else {
                    Ordering::Equal
                }
            }
            (Some(_), None) => Ordering::Less,
            (None, Some(_)) => Ordering::Greater,
            (None, None) => Ordering::Equal,
        };
        by_score.then_with(|| lib.entries[*a].source.cmp(&lib.entries[*b].source))
    };
    // partial selection then exact ordering of the head
    if j < order.len() {
        order.select_nth_unstable_by(j - 1, cmp);
        order.truncate(j);
    }
    order.sort_by(cmp);
    Ok(order
        .into_iter()
        .map(|i| Retrieved {
            index: i,
            source: lib.entries[i].source,
            score: scores[i].unwrap_or(f64::NAN),
        })
        .collect())
}
