//! Command-line front end.
//!
//! Exit codes: 0 success, 1 other failure, 2 bad input, 3 encoder fingerprint
//! mismatch, 4 bad configuration, 5 evaluation dimension mismatch.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::encoder::{Encoder, EncoderSpec};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate, run_ablation, score_labels, split_support_test, AblationAxis, AblationPlan, AxisValue, DiceReport,
};
use crate::pipeline::{Engine, PipelineConfig};
use crate::retrieval::{build_library, load_library, save_library};
use crate::volume::{
    checksum_file, jittered_dataset, load_labels, load_scalar, save_volume, standard_phantom_spec, AnyVolume,
    LabelVolume, PhantomSpec, SliceAxis, Volume,
};

pub const MANIFEST_SCHEMA: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "fateseg", version, about = "Training-free few-shot volumetric segmentation")]
pub struct Cli {
    /// Worker threads (falls back to FATESEG_THREADS, then all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Encode every slice of a support directory into a library file.
    BuildLibrary(BuildLibraryArgs),
    /// Segment one test volume against a library.
    Segment(SegmentArgs),
    /// Score predictions, or run the split/segment/score protocol on a dataset.
    Eval(EvalArgs),
    /// Sweep one configuration axis and tabulate Dice.
    Ablate(AblateArgs),
    /// Generate a synthetic phantom dataset.
    Phantom(PhantomArgs),
}

#[derive(Debug, Args)]
pub struct BuildLibraryArgs {
    /// Directory of `<id>.img.json` / `<id>.lab.json` pairs.
    #[arg(long)]
    pub support: PathBuf,
    /// Encoder preset name or path to an encoder spec JSON.
    #[arg(long, default_value = "patchmean")]
    pub encoder: String,
    #[arg(long, default_value = "z")]
    pub axis: SliceAxis,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    /// Test image header (`.img.json`).
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub library: PathBuf,
    /// Pipeline config JSON; defaults apply to omitted fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Disable memory of the neighbouring predicted slice.
    #[arg(long)]
    pub no_volumetric_consistency: bool,
    /// Also write one logit volume per object.
    #[arg(long)]
    pub logits: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predicted label volume header.
    #[arg(long, requires = "truth", conflicts_with = "data")]
    pub pred: Option<PathBuf>,
    /// Ground-truth label volume header.
    #[arg(long, requires = "pred")]
    pub truth: Option<PathBuf>,
    /// Dataset directory for the split protocol.
    #[arg(long, required_unless_present = "pred")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    pub fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub axis: String,
    /// Comma-separated grid values.
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    pub fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// Phantom spec JSON; the built-in spheres-and-shell family when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Maximum displacement of each object between volumes, in voxels.
    #[arg(long, default_value_t = 2.0)]
    pub jitter: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct FileDigest {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest {
    schema_version: u32,
    engine_version: &'static str,
    command: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<PipelineConfig>,
    parameters: BTreeMap<String, serde_json::Value>,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
}

impl Manifest {
    fn new(command: &'static str) -> Self {
        Manifest {
            schema_version: MANIFEST_SCHEMA,
            engine_version: env!("CARGO_PKG_VERSION"),
            command,
            config: None,
            parameters: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn param(&mut self, key: &str, value: impl Serialize) {
        self.parameters
            .insert(key.into(), serde_json::to_value(value).expect("parameter serializes"));
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: checksum_file(path)?,
        });
        Ok(())
    }

    /// Record outputs by name relative to `dir`, sorted.
    fn outputs_in(&mut self, dir: &Path, names: &[String]) -> Result<()> {
        let mut names = names.to_vec();
        names.sort();
        for n in names {
            self.outputs.push(FileDigest {
                sha256: checksum_file(dir.join(&n))?,
                path: n,
            });
        }
        Ok(())
    }

    fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        None => Ok(PipelineConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            PipelineConfig::from_json(&text)
        }
    }
}

fn load_encoder_spec(arg: &str) -> Result<EncoderSpec> {
    let path = Path::new(arg);
    if path.extension().is_some_and(|e| e == "json") {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: EncoderSpec = serde_json::from_str(&text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        spec.validate().map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok(spec)
    } else {
        EncoderSpec::preset(arg).map_err(|e| Error::InvalidConfig(e.to_string()))
    }
}

/// Paired `(id, image header, label header)` in id order. Unpaired files are an error.
pub fn scan_dataset(dir: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut images = BTreeMap::new();
    let mut labels = BTreeMap::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_suffix(".img.json") {
            images.insert(id.to_string(), entry.path());
        } else if let Some(id) = name.strip_suffix(".lab.json") {
            labels.insert(id.to_string(), entry.path());
        }
    }
    let orphans: Vec<String> = images
        .iter()
        .filter(|(id, _)| !labels.contains_key(*id))
        .chain(labels.iter().filter(|(id, _)| !images.contains_key(*id)))
        .map(|(_, p)| p.display().to_string())
        .collect();
    if !orphans.is_empty() {
        return Err(Error::Input(format!("unpaired files: {}", orphans.join(", "))));
    }
    if images.is_empty() {
        return Err(Error::EmptySupportSet);
    }
    Ok(images
        .into_iter()
        .map(|(id, img)| {
            let lab = labels.remove(&id).expect("paired");
            (id, img, lab)
        })
        .collect())
}

type Dataset = Vec<(String, Volume, LabelVolume)>;

fn load_dataset(dir: &Path, manifest: &mut Manifest) -> Result<Dataset> {
    scan_dataset(dir)?
        .into_iter()
        .map(|(id, img, lab)| {
            manifest.input(&img)?;
            manifest.input(&lab)?;
            let v = load_scalar(&img)?;
            let l = load_labels(&lab)?;
            crate::volume::check_pair(&v, &l).map_err(|e| Error::GeometryMismatch(format!("{id}: {e}")))?;
            Ok((id, v, l))
        })
        .collect()
}

fn cmd_build_library(a: &BuildLibraryArgs) -> Result<()> {
    let spec = load_encoder_spec(&a.encoder)?;
    let mut manifest = Manifest::new("build-library");
    let data = load_dataset(&a.support, &mut manifest)?;
    let encoder = Encoder::new(spec.clone())?;
    let items: Vec<(String, &Volume, &LabelVolume)> = data.iter().map(|(id, v, l)| (id.clone(), v, l)).collect();
    let lib = build_library(&items, &encoder, a.axis)?;
    save_library(&lib, &a.out)?;
    manifest.param("encoder", &spec);
    manifest.param("fingerprint", lib.fingerprint().to_string());
    manifest.param("axis", a.axis);
    manifest.param("entries", lib.len());
    manifest.outputs.push(FileDigest {
        path: a.out.display().to_string(),
        sha256: checksum_file(&a.out)?,
    });
    manifest.write(&sidecar(&a.out))
}

fn sidecar(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn cmd_segment(a: &SegmentArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if a.no_volumetric_consistency {
        cfg.volumetric_consistency = false;
    }
    if a.logits {
        cfg.keep_logits = true;
    }
    let mut manifest = Manifest::new("segment");
    manifest.input(&a.test)?;
    manifest.input(&a.library)?;
    let test = load_scalar(&a.test)?;
    let lib = load_library(&a.library)?;
    let result = Engine::new(&lib, &cfg)?.segment_volume(&test)?;

    create_dir(&a.out)?;
    let mut names = vec!["labels.lab.json".to_string(), "labels.lab.raw".to_string(), "trace.json".to_string()];
    save_volume(&AnyVolume::Labels(result.labels), a.out.join("labels.lab.json"))?;
    #[derive(Serialize)]
    struct Trace<'a> {
        merge: &'a crate::pipeline::MergeSummary,
        memory_tokens: usize,
        slices: &'a [crate::pipeline::SliceTrace],
    }
    write_json(
        &a.out.join("trace.json"),
        &Trace {
            merge: &result.merge,
            memory_tokens: result.memory_tokens,
            slices: &result.trace,
        },
    )?;
    if let Some(logits) = &result.per_object_logits {
        for (label, vol) in logits {
            let name = format!("logits_{label}.img.json");
            save_volume(&AnyVolume::Scalar(vol.clone()), a.out.join(&name))?;
            names.push(name);
            names.push(format!("logits_{label}.img.raw"));
        }
    }
    manifest.config = Some(cfg);
    manifest.outputs_in(&a.out, &names)?;
    manifest.write(&a.out.join("manifest.json"))
}

fn report_csv(report: &DiceReport) -> String {
    let mut out = String::from("object_label,mean_dice,std_dice,n_volumes\n");
    for (l, s) in &report.per_object {
        out.push_str(&format!("{l},{},{},{}\n", s.mean_dice, s.std_dice, s.n_volumes));
    }
    out
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let mut manifest = Manifest::new("eval");
    let report = match (&a.pred, &a.truth, &a.data) {
        (Some(pred), Some(truth), _) => {
            manifest.input(pred)?;
            manifest.input(truth)?;
            let p = load_labels(pred)?;
            let t = load_labels(truth)?;
            DiceReport::from_rows(score_labels(&pred.display().to_string(), &p, &t, &[])?)
        }
        (_, _, Some(dir)) => {
            let cfg = load_config(a.config.as_deref())?;
            let data = load_dataset(dir, &mut manifest)?;
            let ids: Vec<String> = data.iter().map(|(id, ..)| id.clone()).collect();
            let (support, test) = split_support_test(&ids, a.fraction, a.seed)?;
            let pick = |ids: &[String]| -> Vec<(String, &Volume, &LabelVolume)> {
                ids.iter()
                    .map(|id| {
                        let (_, v, l) = data.iter().find(|(i, ..)| i == id).expect("id from dataset");
                        (id.clone(), v, l)
                    })
                    .collect()
            };
            let lib = build_library(&pick(&support), &Encoder::new(cfg.encoder.clone())?, cfg.axis)?;
            let (rows, _) = evaluate(&pick(&test), &lib, &cfg)?;
            manifest.param("support", &support);
            manifest.param("test", &test);
            manifest.param("fraction", a.fraction);
            manifest.param("seed", a.seed);
            manifest.config = Some(cfg);
            DiceReport::from_rows(rows)
        }
        _ => return Err(Error::Input("eval needs --pred/--truth or --data".into())),
    };
    create_dir(&a.out)?;
    write_json(&a.out.join("report.json"), &report)?;
    write_text(&a.out.join("report.csv"), &report_csv(&report))?;
    manifest.param("std_convention", "population standard deviation across volumes");
    manifest.param("empty_mask_convention", "dice = 1 when both masks are empty");
    manifest.outputs_in(&a.out, &["report.json".into(), "report.csv".into()])?;
    manifest.write(&a.out.join("manifest.json"))
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let axis: AblationAxis = a.axis.parse()?;
    if a.values.is_empty() {
        return Err(Error::Input("--values is empty".into()));
    }
    let values = a
        .values
        .iter()
        .map(|v| axis.parse_value(v))
        .collect::<Result<Vec<AxisValue>>>()?;
    let base = load_config(a.config.as_deref())?;
    let mut manifest = Manifest::new("ablate");
    let data = load_dataset(&a.data, &mut manifest)?;
    let plan = AblationPlan {
        axis,
        values,
        base: base.clone(),
        support_fraction: a.fraction,
        split_seed: a.seed,
    };
    let (table, timings) = run_ablation(&plan, &data)?;
    create_dir(&a.out)?;
    write_text(&a.out.join("ablation.csv"), &table.to_csv())?;
    write_json(&a.out.join("ablation.json"), &table)?;
    // wall-clock numbers differ run to run; keep them out of the manifest
    write_json(&a.out.join("timings.json"), &timings)?;
    manifest.config = Some(base);
    manifest.param("axis", axis);
    manifest.param("values", &a.values);
    manifest.param("fraction", a.fraction);
    manifest.param("seed", a.seed);
    manifest.outputs_in(&a.out, &["ablation.csv".into(), "ablation.json".into()])?;
    manifest.write(&a.out.join("manifest.json"))
}

fn cmd_phantom(a: &PhantomArgs) -> Result<()> {
    let mut manifest = Manifest::new("phantom");
    let spec: PhantomSpec = match &a.spec {
        None => standard_phantom_spec(),
        Some(p) => {
            manifest.input(p)?;
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::ConfigParse(e.to_string()))?
        }
    };
    let ds = jittered_dataset(&spec, a.n, a.jitter, a.seed)?;
    create_dir(&a.out)?;
    let mut names = Vec::new();
    for (id, v, l) in &ds.items {
        save_volume(&AnyVolume::Scalar(v.clone()), a.out.join(format!("{id}.img.json")))?;
        save_volume(&AnyVolume::Labels(l.clone()), a.out.join(format!("{id}.lab.json")))?;
        for ext in ["img.json", "img.raw", "lab.json", "lab.raw"] {
            names.push(format!("{id}.{ext}"));
        }
    }
    manifest.param("spec", &spec);
    manifest.param("n", a.n);
    manifest.param("seed", a.seed);
    manifest.param("jitter", a.jitter);
    manifest.outputs_in(&a.out, &names)?;
    // the manifest lives beside the dataset but is not part of it
    manifest.write(&a.out.join("phantom.manifest.json"))
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>> {
    if let Some(n) = flag {
        return Ok(Some(n));
    }
    match std::env::var("FATESEG_THREADS") {
        Ok(s) if !s.trim().is_empty() => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::InvalidConfig(format!("FATESEG_THREADS={s:?} is not a thread count"))),
        _ => Ok(None),
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_count(cli.threads)? {
        if n == 0 {
            return Err(Error::InvalidConfig("thread count must be positive".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot start thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::BuildLibrary(a) => cmd_build_library(a),
        Command::Segment(a) => cmd_segment(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Phantom(a) => cmd_phantom(a),
    })
}

/// Parse arguments, run, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("fateseg: {e}");
            e.exit_code()
        }
    }
}
