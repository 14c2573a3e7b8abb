//! Experiment configuration and the pipeline commands behind the `forge` CLI.
//!
//! Output layout under the output root:
//!
//! ```text
//! corpus/manifest.json, corpus/{Source,GTS,RealMix,SynthMix}/
//! models/{synthetic,realistic}.ckpt, models/{synthetic,realistic}_curve.csv
//! reports/<model>-model_<testset>-test.{csv,json}, reports/comparison.csv
//! sweep.csv
//! verdict.json
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{
    build_corpus, capture_device, load_plan_sources, record_pair, CorpusConfig, Manifest, MixtureKind, RigConfig,
    Split, MANIFEST_FILE,
};
use crate::duplex::DeviceConfig;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_items, Aggregate, Condition, EvalItem, EvalReport};
use crate::separator::{checkpoint, separate, train_from_manifest, SeparatorConfig, TrainConfig, TrainOutcome};

pub const OUTPUT_ENV: &str = "FORGE_OUT";
pub const VERDICT_SCHEMA_VERSION: u32 = 1;
pub const MODELS: [MixtureKind; 2] = [MixtureKind::Synthetic, MixtureKind::Realistic];
/// Distances compared for the degradation check.
pub const MATCHED_DISTANCE_M: f64 = 2.0;
pub const FAR_DISTANCE_M: f64 = 3.0;

fn default_distances() -> Vec<f64> {
    vec![0.5, 1.0, 1.5, 2.0, 2.5, 3.0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub distances: Vec<f64>,
    pub test_sets: Vec<MixtureKind>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            distances: default_distances(),
            test_sets: MODELS.to_vec(),
        }
    }
}

fn default_device() -> DeviceConfig {
    DeviceConfig::ideal(0)
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("forge_out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarnessConfig {
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub rig: RigConfig,
    #[serde(default = "default_device")]
    pub device: DeviceConfig,
    #[serde(default)]
    pub model: SeparatorConfig,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            rig: RigConfig::default(),
            device: default_device(),
            model: SeparatorConfig::default(),
            training: TrainConfig::default(),
            eval: EvalConfig::default(),
            output_dir: default_output_dir(),
        }
    }
}

impl HarnessConfig {
    /// Parses a config document. Unknown keys and type errors report the
    /// dotted key path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config {
                path,
                message: e.into_inner().to_string(),
            }
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, message: String| Error::Config {
            path: path.into(),
            message,
        };
        self.device.validate().map_err(|e| bad("device", e.to_string()))?;
        self.model.validate().map_err(|e| bad("model", e.to_string()))?;
        self.training.validate().map_err(|e| bad("training", e.to_string()))?;
        if self.model.bins != 129 || self.model.speakers != 2 {
            return Err(bad("model", "the pipeline needs 129 bins and 2 speakers".into()));
        }
        if self.eval.distances.is_empty() || self.eval.distances.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(bad("eval.distances", format!("{:?}", self.eval.distances)));
        }
        if self.eval.test_sets.is_empty() {
            return Err(bad("eval.test_sets", "no test sets".into()));
        }
        Ok(())
    }

    /// Restores full-size model and training settings, keeping the seed.
    pub fn with_paper_scale(mut self) -> Self {
        self.model = SeparatorConfig::paper_scale();
        self.training = TrainConfig {
            seed: self.training.seed,
            ..TrainConfig::paper_scale()
        };
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.corpus.seed = seed;
        self
    }
}

/// Command-line switches shared by every command.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub force: bool,
    pub paper_scale: bool,
    /// Takes precedence over the config's `output_dir`.
    pub output_root: Option<PathBuf>,
}

/// Resolved configuration and output paths for one invocation.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub config: HarnessConfig,
    pub root: PathBuf,
    pub force: bool,
}

impl Workspace {
    pub fn new(config: HarnessConfig, options: &RunOptions) -> Self {
        let mut config = config;
        if options.paper_scale {
            config = config.with_paper_scale();
        }
        if let Some(seed) = options.seed {
            config = config.with_seed(seed);
        }
        let root = options.output_root.clone().unwrap_or_else(|| config.output_dir.clone());
        Self {
            config,
            root,
            force: options.force,
        }
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.corpus_dir().join(MANIFEST_FILE)
    }

    pub fn checkpoint_path(&self, model: MixtureKind) -> PathBuf {
        self.root.join("models").join(format!("{model}.ckpt"))
    }

    pub fn curve_path(&self, model: MixtureKind) -> PathBuf {
        self.root.join("models").join(format!("{model}_curve.csv"))
    }

    pub fn report_stem(&self, model: MixtureKind, test: MixtureKind) -> PathBuf {
        self.root.join("reports").join(format!("{model}-model_{test}-test"))
    }

    pub fn sweep_path(&self) -> PathBuf {
        self.root.join("sweep.csv")
    }

    pub fn verdict_path(&self) -> PathBuf {
        self.root.join("verdict.json")
    }

    fn manifest(&self) -> Result<Manifest> {
        Manifest::load(&self.manifest_path())
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn to_json_line<T: Serialize>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub entries: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub retried_captures: u32,
    pub realmix_seconds: f64,
}

pub fn build_corpus_cmd(ws: &Workspace) -> Result<CorpusSummary> {
    let manifest_path = ws.manifest_path();
    if manifest_path.exists() {
        if !ws.force {
            return Err(Error::Refused(format!(
                "{} exists; pass --force to rebuild",
                manifest_path.display()
            )));
        }
        fs::remove_dir_all(ws.corpus_dir())?;
    }
    let cfg = &ws.config;
    let manifest = build_corpus(&cfg.corpus, &cfg.rig, &cfg.device, &ws.corpus_dir())?;
    let mut seconds = 0.0;
    for e in &manifest.entries {
        let n = e.plan.a.length_samples.max(e.plan.b.length_samples);
        seconds += n as f64 / cfg.device.sample_rate as f64;
    }
    Ok(CorpusSummary {
        entries: manifest.entries.len(),
        train: manifest.split_len(Split::Train),
        validation: manifest.split_len(Split::Validation),
        test: manifest.split_len(Split::Test),
        retried_captures: manifest.entries.iter().map(|e| e.overruns_retried).sum(),
        realmix_seconds: seconds,
    })
}

pub fn train_cmd(ws: &Workspace, model: MixtureKind) -> Result<TrainOutcome> {
    let manifest = ws.manifest()?;
    let cfg = &ws.config;
    let outcome = train_from_manifest(&manifest, &ws.corpus_dir(), model, &cfg.training, &cfg.model)?;
    checkpoint::save(ws.checkpoint_path(model), &cfg.model, &model.to_string(), &outcome.params)?;
    checkpoint::save_curve(ws.curve_path(model), &outcome.curve)?;
    Ok(outcome)
}

fn condition_label(test: MixtureKind) -> String {
    format!("{test}-test")
}

fn model_label(model: MixtureKind) -> String {
    format!("{model}-model")
}

fn test_items(manifest: &Manifest, root: &Path, test: MixtureKind) -> Result<Vec<EvalItem>> {
    manifest
        .split(Split::Test)
        .map(|entry| {
            let ex = manifest.load_example(root, entry, test)?;
            Ok(EvalItem {
                mix_id: ex.mix_id,
                mixture: ex.mixture,
                references: ex.sources.to_vec(),
            })
        })
        .collect()
}

fn load_model(ws: &Workspace, model: MixtureKind) -> Result<checkpoint::Checkpoint> {
    let ckpt = checkpoint::load(ws.checkpoint_path(model))?;
    if ckpt.label != model.to_string() {
        return Err(Error::Checkpoint(format!(
            "{} holds the `{}` model",
            ws.checkpoint_path(model).display(),
            ckpt.label
        )));
    }
    Ok(ckpt)
}

fn evaluate_model(
    ckpt: &checkpoint::Checkpoint,
    model: MixtureKind,
    condition: Condition,
    items: &[EvalItem],
) -> Result<EvalReport> {
    evaluate_items(&model_label(model), condition, items, |mix| {
        separate(mix, &ckpt.params, &ckpt.config)
    })
}

/// One row of the model × test-set comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: MixtureKind,
    pub test_set: MixtureKind,
    pub aggregate: Aggregate,
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from("model,test_set,count,mean_si_sdr,stddev_si_sdr\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            model_label(r.model),
            condition_label(r.test_set),
            r.aggregate.count,
            r.aggregate.mean,
            r.aggregate.stddev
        );
    }
    out
}

/// Scores each model on each test set; writes the per-model reports and the
/// comparison table.
pub fn evaluate_cmd(ws: &Workspace, models: &[MixtureKind], test_sets: &[MixtureKind]) -> Result<Vec<ComparisonRow>> {
    let manifest = ws.manifest()?;
    let corpus = ws.corpus_dir();
    let checkpoints = models
        .iter()
        .map(|&m| load_model(ws, m))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for &test in test_sets {
        let items = test_items(&manifest, &corpus, test)?;
        for (&model, ckpt) in models.iter().zip(&checkpoints) {
            let condition = Condition {
                label: condition_label(test),
                distance_m: (test == MixtureKind::Realistic).then_some(ws.config.rig.mic_distance_m),
            };
            let report = evaluate_model(ckpt, model, condition, &items)?;
            let stem = ws.report_stem(model, test);
            write_text(&stem.with_extension("csv"), &report.to_csv())?;
            write_text(&stem.with_extension("json"), &to_json_line(&report)?)?;
            rows.push(ComparisonRow {
                model,
                test_set: test,
                aggregate: report.aggregate.clone(),
            });
        }
    }
    rows.sort_by_key(|r| (r.model as u8, r.test_set as u8));
    write_text(&ws.root.join("reports").join("comparison.csv"), &comparison_csv(&rows))?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub distance_m: f64,
    pub model: MixtureKind,
    pub mean_si_sdr: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("distance_m,model,mean_si_sdr\n");
    for r in rows {
        let _ = writeln!(out, "{:?},{},{}", r.distance_m, model_label(r.model), r.mean_si_sdr);
    }
    out
}

/// Re-records every test mixture with the microphone at each configured
/// distance and scores both models on the recordings.
pub fn distance_sweep_cmd(ws: &Workspace) -> Result<Vec<SweepRow>> {
    let manifest = ws.manifest()?;
    let cfg = &ws.config;
    let checkpoints = MODELS
        .iter()
        .map(|&m| load_model(ws, m))
        .collect::<Result<Vec<_>>>()?;
    let source_root = ws.corpus_dir().join(&manifest.source_dir);
    let mut rows = Vec::new();
    for &distance in &cfg.eval.distances {
        let (ch_a, ch_b) = cfg.rig.channels_at(distance)?;
        let mut items = Vec::new();
        for (i, entry) in manifest.entries.iter().enumerate() {
            if entry.split != Split::Test {
                continue;
            }
            let (a, b) = load_plan_sources(&entry.plan, &source_root)?;
            let dev = capture_device(&cfg.device, i);
            let gains = (entry.plan.gain_a, entry.plan.gain_b);
            let rec = record_pair(&a, &b, gains, &ch_a, &ch_b, &dev, cfg.corpus.max_retries)?;
            items.push(EvalItem {
                mix_id: entry.mix_id.clone(),
                mixture: rec.realmix,
                references: vec![rec.gts1, rec.gts2],
            });
        }
        for (&model, ckpt) in MODELS.iter().zip(&checkpoints) {
            let condition = Condition {
                label: condition_label(MixtureKind::Realistic),
                distance_m: Some(distance),
            };
            let report = evaluate_model(ckpt, model, condition, &items)?;
            log::info!("{distance} m, {}: {:.3} dB", model_label(model), report.aggregate.mean);
            rows.push(SweepRow {
                distance_m: distance,
                model,
                mean_si_sdr: report.aggregate.mean,
            });
        }
    }
    write_text(&ws.sweep_path(), &sweep_csv(&rows))?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSummary {
    pub model: MixtureKind,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_valid_loss: f64,
    pub final_train_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistanceDrop {
    pub from_m: f64,
    pub to_m: f64,
    pub synthetic_model_drop_db: f64,
    pub realistic_model_drop_db: f64,
    /// The synthetic-trained model loses at least as much as the
    /// realistic-trained one.
    pub direction_reproduced: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Verdict {
    pub schema_version: u32,
    pub config_hash: String,
    pub corpus_seed: u64,
    pub paper_scale: bool,
    pub corpus: CorpusSummary,
    pub training: Vec<TrainingSummary>,
    pub comparison: Vec<ComparisonRow>,
    pub sweep: Vec<SweepRow>,
    pub realistic_test_synthetic_model_db: f64,
    pub realistic_test_realistic_model_db: f64,
    pub realistic_test_gap_db: f64,
    pub paper_direction_reproduced: bool,
    /// Absent when the sweep does not include both comparison distances.
    pub distance_drop: Option<DistanceDrop>,
}

fn sweep_value(rows: &[SweepRow], model: MixtureKind, distance: f64) -> Option<f64> {
    rows.iter()
        .find(|r| r.model == model && (r.distance_m - distance).abs() < 1e-9)
        .map(|r| r.mean_si_sdr)
}

fn distance_drop(rows: &[SweepRow]) -> Option<DistanceDrop> {
    let drop = |m| Some(sweep_value(rows, m, MATCHED_DISTANCE_M)? - sweep_value(rows, m, FAR_DISTANCE_M)?);
    let synthetic = drop(MixtureKind::Synthetic)?;
    let realistic = drop(MixtureKind::Realistic)?;
    Some(DistanceDrop {
        from_m: MATCHED_DISTANCE_M,
        to_m: FAR_DISTANCE_M,
        synthetic_model_drop_db: synthetic,
        realistic_model_drop_db: realistic,
        direction_reproduced: synthetic >= realistic,
    })
}

/// Build, train both variants, evaluate, sweep, and write `verdict.json`.
pub fn twin_experiment_cmd(ws: &Workspace) -> Result<Verdict> {
    let corpus = build_corpus_cmd(ws)?;
    let mut training = Vec::new();
    for model in MODELS {
        let outcome = train_cmd(ws, model)?;
        training.push(TrainingSummary {
            model,
            epochs: outcome.curve.len(),
            best_epoch: outcome.best_epoch,
            best_valid_loss: outcome.best_valid_loss,
            final_train_loss: outcome.curve.last().map(|r| r.train_loss).unwrap_or(f64::NAN),
        });
    }
    let mut test_sets = ws.config.eval.test_sets.clone();
    if !test_sets.contains(&MixtureKind::Realistic) {
        test_sets.push(MixtureKind::Realistic);
    }
    let comparison = evaluate_cmd(ws, &MODELS, &test_sets)?;
    let sweep = distance_sweep_cmd(ws)?;
    let realistic_mean = |model| {
        comparison
            .iter()
            .find(|r| r.model == model && r.test_set == MixtureKind::Realistic)
            .map(|r| r.aggregate.mean)
            .expect("realistic test evaluated")
    };
    let syn = realistic_mean(MixtureKind::Synthetic);
    let real = realistic_mean(MixtureKind::Realistic);
    let manifest = ws.manifest()?;
    let verdict = Verdict {
        schema_version: VERDICT_SCHEMA_VERSION,
        config_hash: manifest.config_hash,
        corpus_seed: manifest.seed,
        paper_scale: ws.config.model == SeparatorConfig::paper_scale(),
        corpus,
        training,
        comparison,
        distance_drop: distance_drop(&sweep),
        sweep,
        realistic_test_synthetic_model_db: syn,
        realistic_test_realistic_model_db: real,
        realistic_test_gap_db: real - syn,
        paper_direction_reproduced: real >= syn,
    };
    write_text(&ws.verdict_path(), &to_json_line(&verdict)?)?;
    Ok(verdict)
}

/// Process exit code for a command result.
pub fn exit_code(result: &Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(Error::Refused(_)) => 2,
        Err(_) => 1,
    }
}
