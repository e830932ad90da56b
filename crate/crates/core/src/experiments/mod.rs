//! The experiment matrix: scratch models on roles B and C, then for every
//! (fraction, seed) a scratch model on a subset of role A and one transfer
//! model from each of B and C on the same subset.

pub mod report;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use log::info;
use serde::{Deserialize, Serialize};

use crate::data::manifest::{write_json, DatasetManifest};
use crate::data::subset::subset_manifest;
use crate::trainer::{self, Checkpoint, ModelSpecs, TrainConfig, CHECKPOINT_DIR, METRICS_FILE};
use crate::transfer::{transfer_weights, REPORT_FILE};
use crate::{Error, Result};

pub use report::{build_report, Report};

pub const RUNS_DIR: &str = "runs";
pub const RESULT_FILE: &str = "result.json";
pub const RESULTS_INDEX: &str = "results.json";
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";
pub const SETTINGS_FILE: &str = "plan.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    A,
    B,
    C,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::A => "A",
            Role::B => "B",
            Role::C => "C",
        })
    }
}

/// Manifest directories for the three roles.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoleDatasets {
    pub a: PathBuf,
    pub b: PathBuf,
    pub c: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSettings {
    pub datasets: RoleDatasets,
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Runs trained concurrently.
    pub jobs: usize,
    /// Role-A test samples rendered as mask grids in the report.
    pub report_samples: usize,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        Self {
            datasets: RoleDatasets::default(),
            fractions: vec![0.10, 0.25, 0.50, 0.75, 1.00],
            seeds: vec![1],
            jobs: 1,
            report_samples: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPlan {
    pub settings: ExperimentSettings,
    pub train_config: TrainConfig,
    /// Base architecture; channel counts are set per role from the data.
    pub specs: ModelSpecs,
    /// Echoed into each run directory when present.
    pub resolved_config: Option<String>,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        let s = &self.settings;
        if s.fractions.is_empty() || s.seeds.is_empty() {
            return Err(Error::Config(
                "experiment needs at least one fraction and one seed".into(),
            ));
        }
        if let Some(f) = s.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(Error::Config(format!(
                "experiment fraction {f} is outside (0, 1]"
            )));
        }
        let d = &s.datasets;
        if d.a == d.b || d.a == d.c || d.b == d.c {
            return Err(Error::Config(
                "experiment roles A, B and C must use distinct datasets".into(),
            ));
        }
        if s.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        self.train_config.validate()
    }

    /// All runs in execution order: the two pretrains first.
    pub fn runs(&self) -> Vec<RunSpec> {
        let s = &self.settings;
        let first = s.seeds[0];
        let mut out = vec![
            RunSpec::scratch(Role::B, 1.0, first),
            RunSpec::scratch(Role::C, 1.0, first),
        ];
        for &f in &s.fractions {
            for &seed in &s.seeds {
                out.push(RunSpec::scratch(Role::A, f, seed));
                out.push(RunSpec::transfer(Role::B, f, seed, first));
                out.push(RunSpec::transfer(Role::C, f, seed, first));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub model_id: String,
    pub family: String,
    /// Dataset the model is trained on.
    pub role: Role,
    /// Pretrained role the weights come from, for transfer runs.
    pub source: Option<(Role, String)>,
    pub fraction: f64,
    pub seed: u64,
}

impl RunSpec {
    fn scratch(role: Role, fraction: f64, seed: u64) -> Self {
        let family = format!("scratch:{role}");
        Self {
            model_id: format!("{family}@{fraction:.2}#seed{seed}"),
            family,
            role,
            source: None,
            fraction,
            seed,
        }
    }

    fn transfer(from: Role, fraction: f64, seed: u64, pretrain_seed: u64) -> Self {
        let family = format!("transfer:{from}→A");
        Self {
            model_id: format!("{family}@{fraction:.2}#seed{seed}"),
            family,
            role: Role::A,
            source: Some((from, Self::scratch(from, 1.0, pretrain_seed).model_id)),
            fraction,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub model_id: String,
    pub family: String,
    pub fraction: f64,
    pub seed: u64,
    pub final_val_ftl: f64,
    /// Relative to the experiment output directory.
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

pub fn run_dir(out_dir: &Path, model_id: &str) -> PathBuf {
    out_dir.join(RUNS_DIR).join(model_id)
}

struct Datasets {
    a: DatasetManifest,
    b: DatasetManifest,
    c: DatasetManifest,
}

impl Datasets {
    fn get(&self, r: Role) -> &DatasetManifest {
        match r {
            Role::A => &self.a,
            Role::B => &self.b,
            Role::C => &self.c,
        }
    }
}

fn execute(
    plan: &ExperimentPlan,
    data: &Datasets,
    run: &RunSpec,
    out_dir: &Path,
) -> Result<RunResult> {
    let dir = run_dir(out_dir, &run.model_id);
    let rel = PathBuf::from(RUNS_DIR).join(&run.model_id);
    let done = dir.join(RESULT_FILE);
    if done.exists() {
        let bytes = fs::read(&done).map_err(Error::io(&done))?;
        info!("{}: already complete, skipping", run.model_id);
        return serde_json::from_slice(&bytes).map_err(|e| Error::format("run result", &done, e));
    }
    info!("{}: training", run.model_id);
    fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
    if let Some(text) = &plan.resolved_config {
        crate::data::tensor_file::write_atomic(&dir.join(RESOLVED_CONFIG), text.as_bytes())?;
    }
    let full = data.get(run.role);
    let manifest = subset_manifest(full, run.fraction, run.seed)?;
    let mut specs = plan.specs.clone();
    specs.set_channels(full.channels());
    let config = TrainConfig {
        seed: run.seed,
        ..plan.train_config.clone()
    };
    let init = match &run.source {
        None => None,
        Some((_, source_id)) => {
            let source = Checkpoint::load(&run_dir(out_dir, source_id).join(CHECKPOINT_DIR))?;
            let (init, report) = transfer_weights(&source, &specs, run.seed)?;
            report.save(&dir.join(REPORT_FILE))?;
            Some(init)
        }
    };
    let outcome = trainer::train(&manifest, &specs, &config, init, Some(&dir))?;
    let last = outcome
        .metrics
        .last()
        .ok_or_else(|| Error::Training("training produced no epochs".into()))?;
    let result = RunResult {
        model_id: run.model_id.clone(),
        family: run.family.clone(),
        fraction: run.fraction,
        seed: run.seed,
        final_val_ftl: last.val_ftl,
        metrics_path: rel.join(METRICS_FILE),
        checkpoint_path: rel.join(CHECKPOINT_DIR),
    };
    write_json(&done, &result)?;
    Ok(result)
}

fn execute_all(
    plan: &ExperimentPlan,
    data: &Datasets,
    runs: &[RunSpec],
    out_dir: &Path,
) -> Result<Vec<RunResult>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<RunResult>>>> =
        Mutex::new((0..runs.len()).map(|_| None).collect());
    let workers = plan.settings.jobs.min(runs.len()).max(1);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= runs.len() {
                    break;
                }
                let r = execute(plan, data, &runs[i], out_dir).map_err(|e| Error::Run {
                    model_id: runs[i].model_id.clone(),
                    source: Box::new(e),
                });
                slots.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|r| r.expect("every run executed"))
        .collect()
}

/// Runs (or resumes) the full matrix under `out_dir` and writes the
/// results index.
pub fn run_experiment(plan: &ExperimentPlan, out_dir: &Path) -> Result<Vec<RunResult>> {
    plan.validate()?;
    let d = &plan.settings.datasets;
    let data = Datasets {
        a: DatasetManifest::load(&d.a)?,
        b: DatasetManifest::load(&d.b)?,
        c: DatasetManifest::load(&d.c)?,
    };
    fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;
    write_json(&out_dir.join(SETTINGS_FILE), &plan.settings)?;
    let runs = plan.runs();
    let (pretrain, rest) = runs.split_at(2);
    let mut results = execute_all(plan, &data, pretrain, out_dir)?;
    results.extend(execute_all(plan, &data, rest, out_dir)?);
    write_json(&out_dir.join(RESULTS_INDEX), &results)?;
    Ok(results)
}

pub fn load_results(out_dir: &Path) -> Result<Vec<RunResult>> {
    let path = out_dir.join(RESULTS_INDEX);
    let bytes = fs::read(&path).map_err(Error::io(&path))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format("results index", &path, e))
}

/// Settings recorded by [`run_experiment`].
pub fn load_settings(out_dir: &Path) -> Result<ExperimentSettings> {
    let path = out_dir.join(SETTINGS_FILE);
    let bytes = fs::read(&path).map_err(Error::io(&path))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format("experiment settings", &path, e))
}
