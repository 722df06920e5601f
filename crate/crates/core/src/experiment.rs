//! Experiment sweeps: every (method, shots, seed) cell of a spec is run in
//! isolation, results are written under `runs/<spec-hash>/<method>/<shots>/<seed>/`
//! and summarized in `results.csv`.
//!
//! A spec is a JSON or TOML document:
//!
//! ```toml
//! dataset = "synthetic.bin"
//! vocab = "vocab.json"          # needed by every method except linear-probe
//! encoder = "encoder.bin"       # likewise
//! methods = ["coop", "zeroshot"]
//! shots = [1, 2, 4, 8, 16]
//! seeds = [1, 2, 3]
//! output_dir = "runs"
//!
//! [prompt]                      # context options for coop
//! n_ctx = 16
//!
//! [train]                       # optimizer and schedule
//! base_lr = 0.002
//! ```
//!
//! Relative paths are resolved against the spec file's directory.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archive::{sha256_hex, Archive};
use crate::classifier::EnsembleMode;
use crate::data::{sample_shots, FeatureDataset, PROTOCOL_SEEDS, PROTOCOL_SHOTS};
use crate::encoder::EncoderWeights;
use crate::error::{Error, Result};
use crate::probe::{train_linear_probe, ProbeConfig};
use crate::prompt::{ClassNameTable, PromptConfig};
use crate::tokenizer::Vocabulary;
use crate::train::{
    train_coop, train_text_bias, train_text_transform, zero_shot, Method, RunResult, TrainConfig,
};
use crate::words::{DEFAULT_TEMPLATE, ENSEMBLE_TEMPLATES};

pub const CSV_HEADER: &str = "dataset,method,shots,seed,accuracy";

fn default_methods() -> Vec<Method> {
    vec![Method::Coop, Method::Zeroshot]
}

fn default_shots() -> Vec<usize> {
    PROTOCOL_SHOTS.to_vec()
}

fn default_seeds() -> Vec<u64> {
    PROTOCOL_SEEDS.to_vec()
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

fn default_jobs() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub dataset: PathBuf,
    #[serde(default)]
    pub vocab: Option<PathBuf>,
    #[serde(default)]
    pub encoder: Option<PathBuf>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub prompt: PromptConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
    /// Hand-crafted template; defaults to the dataset's own, then to "a photo of a [CLASS].".
    #[serde(default)]
    pub template: Option<String>,
    /// Templates for the `ensemble` method.
    #[serde(default)]
    pub ensemble_templates: Option<Vec<String>>,
    #[serde(default)]
    pub ensemble_mode: EnsembleMode,
    #[serde(default = "default_shots")]
    pub shots: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub allow_any_shots: bool,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Upper bound on cells run concurrently.
    #[serde(default = "default_jobs")]
    pub jobs: usize,
}

impl ExperimentSpec {
    pub fn minimal(dataset: impl Into<PathBuf>) -> Self {
        Self {
            dataset: dataset.into(),
            vocab: None,
            encoder: None,
            methods: default_methods(),
            prompt: PromptConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            template: None,
            ensemble_templates: None,
            ensemble_mode: EnsembleMode::default(),
            shots: default_shots(),
            seeds: default_seeds(),
            allow_any_shots: false,
            output_dir: default_output(),
            jobs: 1,
        }
    }

    /// Parses JSON (`.json`) or TOML (anything else).
    pub fn parse(text: &str, json: bool) -> Result<Self> {
        if json {
            serde_json::from_str(text).map_err(|e| Error::Config(format!("experiment spec: {e}")))
        } else {
            toml::from_str(text).map_err(|e| Error::Config(format!("experiment spec: {e}")))
        }
    }

    /// Reads a spec file and resolves its relative paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read spec {}: {e}", path.display())))?;
        let json = path.extension().is_some_and(|x| x == "json");
        let mut spec = Self::parse(&text, json)?;
        spec.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(spec)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset);
        fix(&mut self.output_dir);
        if let Some(p) = self.vocab.as_mut() {
            fix(p);
        }
        if let Some(p) = self.encoder.as_mut() {
            fix(p);
        }
    }

    /// Short hash of every setting that can change a result. Paths,
    /// `output_dir` and `jobs` are excluded; input files enter through
    /// their checksums.
    pub fn hash(&self, inputs: &Inputs) -> Result<String> {
        let settings = serde_json::json!({
            "methods": self.methods,
            "prompt": self.prompt,
            "train": self.train,
            "probe": self.probe,
            "template": self.template,
            "ensemble_templates": self.ensemble_templates,
            "ensemble_mode": self.ensemble_mode,
            "shots": self.shots,
            "seeds": self.seeds,
            "allow_any_shots": self.allow_any_shots,
            "dataset": inputs.dataset.checksum(),
            "vocab": inputs.vocab.as_ref().map(|v| v.to_json()).transpose()?.map(|j| sha256_hex(j.as_bytes())),
            "encoder": inputs.encoder.as_ref().map(|e| e.checksum()).transpose()?,
        });
        Ok(sha256_hex(serde_json::to_string(&settings)?.as_bytes())[..16].to_string())
    }
}

/// Loaded and cross-checked inputs of a spec.
#[derive(Debug)]
pub struct Inputs {
    pub dataset_name: String,
    pub dataset: FeatureDataset,
    pub vocab: Option<Vocabulary>,
    pub encoder: Option<EncoderWeights>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct Cell {
    pub method: Method,
    pub shots: usize,
    pub seed: u64,
}

impl Cell {
    pub fn dir(&self, root: &Path) -> PathBuf {
        root.join(self.method.name()).join(self.shots.to_string()).join(self.seed.to_string())
    }
}

#[derive(Debug)]
pub struct Plan {
    pub spec: ExperimentSpec,
    pub inputs: Inputs,
    pub spec_hash: String,
    pub cells: Vec<Cell>,
}

impl Plan {
    pub fn run_dir(&self) -> PathBuf {
        self.spec.output_dir.join(&self.spec_hash)
    }

    fn template(&self) -> String {
        self.spec
            .template
            .clone()
            .or_else(|| self.inputs.dataset.template().map(str::to_string))
            .unwrap_or_else(|| DEFAULT_TEMPLATE.to_string())
    }

    fn ensemble_templates(&self) -> Vec<String> {
        self.spec
            .ensemble_templates
            .clone()
            .unwrap_or_else(|| ENSEMBLE_TEMPLATES.iter().map(|s| s.to_string()).collect())
    }
}

fn needs_text(m: Method) -> bool {
    m != Method::LinearProbe
}

/// Loads every referenced file and checks the whole spec without training.
pub fn plan(spec: ExperimentSpec) -> Result<Plan> {
    let cfg = |m: String| Err(Error::Config(m));
    if spec.methods.is_empty() || spec.shots.is_empty() || spec.seeds.is_empty() {
        return cfg("methods, shots and seeds must all be non-empty".into());
    }
    if spec.jobs == 0 {
        return cfg("jobs must be at least 1".into());
    }
    let mut seen = std::collections::BTreeSet::new();
    if let Some(m) = spec.methods.iter().find(|m| !seen.insert(**m)) {
        return cfg(format!("method {m} listed twice"));
    }
    spec.train.validate()?;
    let dataset = FeatureDataset::load(&spec.dataset)?;
    let dataset_name = spec
        .dataset
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let text = spec.methods.iter().any(|&m| needs_text(m));
    let (vocab, encoder) = if text {
        let (Some(vp), Some(ep)) = (&spec.vocab, &spec.encoder) else {
            return cfg("text-side methods need both `vocab` and `encoder`".into());
        };
        let vocab = Vocabulary::load(vp)?;
        let encoder = EncoderWeights::load(ep)?;
        encoder.check_vocab(&vocab)?;
        if encoder.config.embed_dim != dataset.dim() {
            return cfg(format!(
                "encoder emits {}-d features, dataset has {}-d features",
                encoder.config.embed_dim,
                dataset.dim()
            ));
        }
        let names = ClassNameTable::new(dataset.class_names(), &vocab)?;
        if spec.methods.contains(&Method::Coop) {
            spec.prompt.validate(encoder.config.context_length, &names)?;
            crate::prompt::ContextBank::init(&spec.prompt, &vocab, &encoder.token_embedding, names.len(), 0)?;
        }
        (Some(vocab), Some(encoder))
    } else {
        (None, None)
    };
    let inputs = Inputs {
        dataset_name,
        dataset,
        vocab,
        encoder,
    };
    for &shots in &spec.shots {
        spec.train.epochs_for(shots)?;
        for &seed in &spec.seeds {
            sample_shots(&inputs.dataset, shots, seed, spec.allow_any_shots)?;
        }
    }
    let mut cells = Vec::new();
    for &method in &spec.methods {
        for &shots in &spec.shots {
            for &seed in &spec.seeds {
                cells.push(Cell { method, shots, seed });
            }
        }
    }
    let spec_hash = spec.hash(&inputs)?;
    let mut plan = Plan {
        spec,
        inputs,
        spec_hash,
        cells,
    };
    if plan.spec.methods.contains(&Method::Zeroshot) || plan.spec.methods.contains(&Method::Ensemble) {
        if let (Some(v), Some(e)) = (&plan.inputs.vocab, &plan.inputs.encoder) {
            let t = plan.template();
            let names = plan.inputs.dataset.class_names();
            for n in names {
                v.encode(&crate::words::fill_template(&t, n), e.config.context_length)?;
            }
        }
    }
    plan.spec.template = Some(plan.template());
    Ok(plan)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellOutcome {
    pub cell: Cell,
    pub accuracy: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug)]
pub struct Summary {
    pub run_dir: PathBuf,
    pub csv: String,
    pub outcomes: Vec<CellOutcome>,
}

impl Summary {
    pub fn failures(&self) -> impl Iterator<Item = &CellOutcome> {
        self.outcomes.iter().filter(|o| o.error.is_some())
    }
}

fn run_cell(plan: &Plan, cell: Cell, dir: &Path) -> Result<RunResult> {
    let spec = &plan.spec;
    let ds = &plan.inputs.dataset;
    let text = || -> Result<(&Vocabulary, &EncoderWeights)> {
        match (&plan.inputs.vocab, &plan.inputs.encoder) {
            (Some(v), Some(e)) => Ok((v, e)),
            _ => Err(Error::Config("missing vocabulary or encoder".into())),
        }
    };
    let split = sample_shots(ds, cell.shots, cell.seed, spec.allow_any_shots)?;
    let train = TrainConfig {
        seed: cell.seed,
        ..spec.train.clone()
    };
    let template = plan.template();
    std::fs::create_dir_all(dir)?;
    let mut result = match cell.method {
        Method::Coop => {
            let (v, e) = text()?;
            let (mut r, bank) = train_coop(ds, &split, &spec.prompt, e, v, &train)?;
            bank.save(&dir.join("context.bin"), ds.class_names())?;
            r.checkpoint = Some("context.bin".into());
            r
        }
        Method::Zeroshot | Method::Ensemble => {
            let (v, e) = text()?;
            let templates = if cell.method == Method::Zeroshot {
                vec![template]
            } else {
                plan.ensemble_templates()
            };
            let refs: Vec<&str> = templates.iter().map(String::as_str).collect();
            let mode = if cell.method == Method::Zeroshot {
                EnsembleMode::Embedding
            } else {
                spec.ensemble_mode
            };
            let mut r = zero_shot(ds, e, v, &refs, mode, train.temperature)?;
            r.method = cell.method;
            r.shots = cell.shots;
            r.seed = cell.seed;
            r
        }
        Method::TextBias | Method::TextTransform => {
            let (v, e) = text()?;
            let (mut r, head) = if cell.method == Method::TextBias {
                train_text_bias(ds, &split, e, v, &template, &train)?
            } else {
                train_text_transform(ds, &split, e, v, &template, &train)?
            };
            let mut a = Archive::new("text-head", serde_json::json!({ "method": cell.method, "template": template }));
            a.push_tensor("head", &head);
            a.save(&dir.join("head.bin"))?;
            r.checkpoint = Some("head.bin".into());
            r
        }
        Method::LinearProbe => {
            let (mut r, probe) = train_linear_probe(ds, &split, &spec.probe)?;
            std::fs::write(dir.join("probe.json"), serde_json::to_string_pretty(&probe)?)?;
            r.checkpoint = Some("probe.json".into());
            r
        }
    };
    result.seed = cell.seed;
    std::fs::write(dir.join("result.json"), result.to_json()?)?;
    Ok(result)
}

/// Renders the results table: one row per cell in plan order, plus a
/// `mean` row after each (method, shots) group. Failed cells have an
/// empty accuracy and are left out of the mean.
pub fn render_csv(dataset: &str, outcomes: &[CellOutcome]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut write = |method: Method, shots: usize, seed: &str, acc: Option<f64>| {
        let acc = acc.map(|a| format!("{a:.6}")).unwrap_or_default();
        w.write_record([dataset, method.name(), &shots.to_string(), seed, &acc])
            .expect("writing to memory");
    };
    let mut i = 0;
    while i < outcomes.len() {
        let key = (outcomes[i].cell.method, outcomes[i].cell.shots);
        let group: Vec<&CellOutcome> = outcomes[i..]
            .iter()
            .take_while(|o| (o.cell.method, o.cell.shots) == key)
            .collect();
        i += group.len();
        for o in &group {
            write(key.0, key.1, &o.cell.seed.to_string(), o.accuracy);
        }
        let ok: Vec<f64> = group.iter().filter_map(|o| o.accuracy).collect();
        let mean = (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64);
        write(key.0, key.1, "mean", mean);
    }
    let body = String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8 fields");
    format!("{CSV_HEADER}\n{body}")
}

/// Runs every cell (up to `jobs` at a time) and writes `results.csv`,
/// `failures.json` (when any cell failed) and `spec.json` into the run directory.
pub fn execute(plan: &Plan) -> Result<Summary> {
    let run_dir = plan.run_dir();
    std::fs::create_dir_all(&run_dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.spec.jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let outcomes: Vec<CellOutcome> = pool.install(|| {
        plan.cells
            .par_iter()
            .map(|&cell| match run_cell(plan, cell, &cell.dir(&run_dir)) {
                Ok(r) => CellOutcome {
                    cell,
                    accuracy: Some(r.accuracy),
                    error: None,
                },
                Err(e) => {
                    log::error!("{} shots={} seed={}: {e}", cell.method, cell.shots, cell.seed);
                    CellOutcome {
                        cell,
                        accuracy: None,
                        error: Some(e.to_string()),
                    }
                }
            })
            .collect()
    });
    let csv = render_csv(&plan.inputs.dataset_name, &outcomes);
    std::fs::write(run_dir.join("results.csv"), &csv)?;
    let mut spec = plan.spec.clone();
    spec.jobs = 1;
    std::fs::write(run_dir.join("spec.json"), serde_json::to_string_pretty(&spec)?)?;
    let failures: Vec<&CellOutcome> = outcomes.iter().filter(|o| o.error.is_some()).collect();
    let failures_path = run_dir.join("failures.json");
    if failures.is_empty() {
        if failures_path.exists() {
            std::fs::remove_file(&failures_path)?;
        }
    } else {
        std::fs::write(&failures_path, serde_json::to_string_pretty(&failures)?)?;
    }
    Ok(Summary {
        run_dir,
        csv,
        outcomes,
    })
}

/// One accuracy-vs-shots point of a plot export.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub dataset: String,
    pub method: String,
    pub shots: usize,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

/// Aggregates per-seed rows of a results CSV into mean and sample standard
/// deviation per (dataset, method, shots). Mean rows and failed cells are skipped.
pub fn curve_points(text: &str) -> Result<Vec<CurvePoint>> {
    #[derive(Deserialize)]
    struct Row {
        dataset: String,
        method: String,
        shots: usize,
        seed: String,
        accuracy: Option<f64>,
    }
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| Error::Format(format!("results CSV: {e}")))?;
    if header.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
        return Err(Error::Format(format!("results CSV must have header '{CSV_HEADER}'")));
    }
    let mut groups: std::collections::BTreeMap<(String, String, usize), Vec<f64>> = Default::default();
    let mut order = Vec::new();
    for row in reader.deserialize::<Row>() {
        let row = row.map_err(|e| Error::Format(format!("results CSV: {e}")))?;
        let Some(acc) = row.accuracy else { continue };
        if row.seed == "mean" {
            continue;
        }
        let key = (row.dataset, row.method, row.shots);
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(acc);
    }
    Ok(order
        .into_iter()
        .map(|key| {
            let v = &groups[&key];
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let std = if v.len() > 1 {
                (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            CurvePoint {
                dataset: key.0,
                method: key.1,
                shots: key.2,
                mean,
                std,
                runs: v.len(),
            }
        })
        .collect())
}

pub fn render_curve_csv(points: &[CurvePoint]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["dataset", "method", "shots", "mean", "std", "runs"]).expect("writing to memory");
    for p in points {
        w.write_record([
            p.dataset.clone(),
            p.method.clone(),
            p.shots.to_string(),
            format!("{:.6}", p.mean),
            format!("{:.6}", p.std),
            p.runs.to_string(),
        ])
        .expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8 fields")
}
