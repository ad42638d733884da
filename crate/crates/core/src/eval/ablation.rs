use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{evaluate, split_by_count, DiceReport};
use crate::encoder::{Encoder, EncoderSpec};
use crate::error::{Error, Result};
use crate::pipeline::{InitialSlice, PipelineConfig};
use crate::retrieval::{build_library, SimilarityMetric, SupportLibrary};
use crate::volume::{LabelVolume, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    SupportSize,
    ExampleCount,
    Metric,
    InitialSlice,
    Consistency,
    EncoderSize,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 6] = [
        AblationAxis::SupportSize,
        AblationAxis::ExampleCount,
        AblationAxis::Metric,
        AblationAxis::InitialSlice,
        AblationAxis::Consistency,
        AblationAxis::EncoderSize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::SupportSize => "support_size",
            AblationAxis::ExampleCount => "example_count",
            AblationAxis::Metric => "metric",
            AblationAxis::InitialSlice => "initial_slice",
            AblationAxis::Consistency => "consistency",
            AblationAxis::EncoderSize => "encoder_size",
        }
    }

    /// Parse one grid value for this axis.
    pub fn parse_value(self, s: &str) -> Result<AxisValue> {
        let bad = || Error::InvalidAxisValue {
            axis: self.name().into(),
            value: s.into(),
        };
        let t = s.trim();
        Ok(match self {
            AblationAxis::SupportSize => {
                if let Ok(k) = t.parse::<usize>() {
                    if k == 0 {
                        return Err(bad());
                    }
                    AxisValue::SupportCount(k)
                } else {
                    let f: f64 = t.parse().map_err(|_| bad())?;
                    if !(f > 0.0 && f < 1.0) {
                        return Err(bad());
                    }
                    AxisValue::SupportFraction(f)
                }
            }
            AblationAxis::ExampleCount => match t.parse::<usize>() {
                Ok(j) if j >= 1 => AxisValue::ExampleCount(j),
                _ => return Err(bad()),
            },
            AblationAxis::Metric => AxisValue::Metric(t.parse().map_err(|_| bad())?),
            AblationAxis::InitialSlice => AxisValue::InitialSlice(t.parse().map_err(|_| bad())?),
            AblationAxis::Consistency => match t.to_ascii_lowercase().as_str() {
                "on" | "true" | "1" => AxisValue::Consistency(true),
                "off" | "false" | "0" => AxisValue::Consistency(false),
                _ => return Err(bad()),
            },
            AblationAxis::EncoderSize => {
                EncoderSpec::preset(t).map_err(|_| bad())?;
                AxisValue::EncoderSize(t.to_string())
            }
        })
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase().replace('-', "_");
        AblationAxis::ALL
            .into_iter()
            .find(|a| a.name() == t)
            .ok_or_else(|| Error::Input(format!("unknown ablation axis {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisValue {
    SupportCount(usize),
    SupportFraction(f64),
    ExampleCount(usize),
    Metric(SimilarityMetric),
    InitialSlice(InitialSlice),
    Consistency(bool),
    EncoderSize(String),
}

impl AxisValue {
    fn axis(&self) -> AblationAxis {
        match self {
            AxisValue::SupportCount(_) | AxisValue::SupportFraction(_) => AblationAxis::SupportSize,
            AxisValue::ExampleCount(_) => AblationAxis::ExampleCount,
            AxisValue::Metric(_) => AblationAxis::Metric,
            AxisValue::InitialSlice(_) => AblationAxis::InitialSlice,
            AxisValue::Consistency(_) => AblationAxis::Consistency,
            AxisValue::EncoderSize(_) => AblationAxis::EncoderSize,
        }
    }
}

impl fmt::Display for AxisValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AxisValue::SupportCount(k) => write!(f, "{k}"),
            AxisValue::SupportFraction(x) => write!(f, "{x}"),
            AxisValue::ExampleCount(j) => write!(f, "{j}"),
            AxisValue::Metric(m) => write!(f, "{m}"),
            AxisValue::InitialSlice(s) => write!(f, "{s}"),
            AxisValue::Consistency(on) => f.write_str(if *on { "on" } else { "off" }),
            AxisValue::EncoderSize(name) => f.write_str(name),
        }
    }
}

/// One ablation sweep: every grid value is applied to `base` on its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPlan {
    pub axis: AblationAxis,
    pub values: Vec<AxisValue>,
    pub base: PipelineConfig,
    /// Support share for axes other than support size.
    pub support_fraction: f64,
    pub split_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis_value: String,
    pub config_fingerprint: String,
    pub support: Vec<String>,
    pub test: Vec<String>,
    pub report: DiceReport,
    /// Memory tokens attended over the whole row; a deterministic workload measure.
    pub memory_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub base_config_fingerprint: String,
    pub split_seed: u64,
    pub support_fraction: f64,
    pub std_convention: String,
    pub empty_mask_convention: String,
    pub rows: Vec<AblationRow>,
}

/// Wall-clock time per row, kept apart from the table so reruns stay identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTimings {
    pub axis_values: Vec<String>,
    pub seconds: Vec<f64>,
}

impl AblationTable {
    /// `axis_value,object_label,mean_dice,std_dice,n_volumes`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("axis_value,object_label,mean_dice,std_dice,n_volumes\n");
        for row in &self.rows {
            for (label, s) in &row.report.per_object {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    row.axis_value, label, s.mean_dice, s.std_dice, s.n_volumes
                ));
            }
        }
        out
    }
}

pub fn run_ablation(plan: &AblationPlan, dataset: &[(String, Volume, LabelVolume)]) -> Result<(AblationTable, AblationTimings)> {
    let n = dataset.len();
    if n < 2 {
        return Err(Error::TooFewVolumes(n));
    }
    if !(plan.support_fraction > 0.0 && plan.support_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!("support fraction {} outside (0, 1)", plan.support_fraction)));
    }
    plan.base.validate()?;
    let ids: Vec<String> = dataset.iter().map(|(id, ..)| id.clone()).collect();
    let count_for = |f: f64| ((f * n as f64).round() as usize).clamp(1, n - 1);
    let mut libraries: BTreeMap<(Vec<String>, String), SupportLibrary> = BTreeMap::new();
    let mut rows = Vec::with_capacity(plan.values.len());
    let mut timings = AblationTimings {
        axis_values: Vec::new(),
        seconds: Vec::new(),
    };

    for value in &plan.values {
        let invalid = || Error::InvalidAxisValue {
            axis: plan.axis.name().into(),
            value: value.to_string(),
        };
        if value.axis() != plan.axis {
            return Err(invalid());
        }
        let start = Instant::now();
        let mut cfg = plan.base.clone();
        let mut k = count_for(plan.support_fraction);
        match value {
            AxisValue::SupportCount(c) => {
                if *c >= n {
                    return Err(invalid());
                }
                k = *c;
            }
            AxisValue::SupportFraction(f) => k = count_for(*f),
            AxisValue::ExampleCount(j) => cfg.j = *j,
            AxisValue::Metric(m) => cfg.metric = *m,
            AxisValue::InitialSlice(s) => cfg.initial_slice = *s,
            AxisValue::Consistency(on) => cfg.volumetric_consistency = *on,
            AxisValue::EncoderSize(name) => cfg.encoder = EncoderSpec::preset(name).map_err(|_| invalid())?,
        }
        cfg.validate()?;
        let (support, test) = split_by_count(&ids, k, plan.split_seed);
        let key = (support.clone(), serde_json::to_string(&cfg.encoder).expect("spec serializes"));
        if !libraries.contains_key(&key) {
            let encoder = Encoder::new(cfg.encoder.clone())?;
            let items: Vec<(String, &Volume, &LabelVolume)> = support
                .iter()
                .map(|id| {
                    let (_, v, l) = dataset.iter().find(|(i, ..)| i == id).expect("id from dataset");
                    (id.clone(), v, l)
                })
                .collect();
            libraries.insert(key.clone(), build_library(&items, &encoder, cfg.axis)?);
        }
        let lib = &libraries[&key];
        if cfg.j > lib.len() {
            return Err(invalid());
        }
        let tests: Vec<(String, &Volume, &LabelVolume)> = test
            .iter()
            .map(|id| {
                let (_, v, l) = dataset.iter().find(|(i, ..)| i == id).expect("id from dataset");
                (id.clone(), v, l)
            })
            .collect();
        let (vol_rows, work) = evaluate(&tests, lib, &cfg)?;
        rows.push(AblationRow {
            axis_value: value.to_string(),
            config_fingerprint: cfg.fingerprint(),
            support,
            test,
            report: DiceReport::from_rows(vol_rows),
            memory_tokens: work,
        });
        timings.axis_values.push(value.to_string());
        timings.seconds.push(Duration::as_secs_f64(&start.elapsed()));
    }

    Ok((
        AblationTable {
            axis: plan.axis,
            base_config_fingerprint: plan.base.fingerprint(),
            split_seed: plan.split_seed,
            support_fraction: plan.support_fraction,
            std_convention: "population standard deviation across test volumes".into(),
            empty_mask_convention: "dice = 1 when prediction and ground truth are both empty".into(),
            rows,
        },
        timings,
    ))
}
