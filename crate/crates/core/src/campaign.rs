//! Benchmark campaigns: trials x modes x workflows, each trial with its own
//! repository log and fresh context.
//!
//! Layout under the output directory:
//!
//! ```text
//! campaign.json                       configuration fingerprint
//! manifest.jsonl                      one line per completed trial
//! trials/<workflow>/<mode>/<nnnn>/    repository.jsonl, trace.jsonl, outcome.json
//! report.json, report.txt
//! ```
//!
//! Rerunning with the same configuration skips trials already listed in the
//! manifest. The report depends only on per-trial results, sorted, so a
//! seeded mock campaign reproduces it byte for byte.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::info;

use crate::analysis::{compare, summarize, trial_seed, AnalysisError, BenchmarkReport, CellReport, TrialResult};
use crate::executor::{trace_to_jsonl, Executor, Mode, RunConfig};
use crate::generator::{GenerationError, Generator, GeneratorConfig, LiveGenerator, MockGenerator, MockGeneratorSpec};
use crate::guards::{Guard, GuardRegistry};
use crate::repository::{Repository, RepositoryError};
use crate::workflow::{WorkflowError, WorkflowSpec};

pub const DEFAULT_TRIALS: u32 = 50;
const MANIFEST: &str = "manifest.jsonl";
const FINGERPRINT: &str = "campaign.json";

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Repository(#[from] RepositoryError),
    #[error(transparent)]
    Workflow(#[from] WorkflowError),
    #[error(transparent)]
    Generator(#[from] GenerationError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("{0} holds a campaign with a different configuration; use a fresh output directory")]
    ConfigMismatch(PathBuf),
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("invalid campaign: {0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CampaignError + '_ {
    move |source| CampaignError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GeneratorSource {
    Mock(MockGeneratorSpec),
    Live(GeneratorConfig),
}

#[derive(Debug, Clone)]
pub struct CampaignConfig {
    pub workflows: Vec<WorkflowSpec>,
    pub generator: GeneratorSource,
    pub model_id: String,
    pub trials: u32,
    pub modes: Vec<Mode>,
    /// Per-run settings; `mode` is overridden per cell.
    pub run: RunConfig,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub jobs: usize,
}

impl CampaignConfig {
    pub fn new(workflows: Vec<WorkflowSpec>, generator: GeneratorSource, out_dir: impl Into<PathBuf>) -> Self {
        let model_id = match &generator {
            GeneratorSource::Mock(_) => "mock".to_string(),
            GeneratorSource::Live(c) => c.model_name.clone(),
        };
        Self {
            workflows,
            generator,
            model_id,
            trials: DEFAULT_TRIALS,
            modes: Mode::ALL.to_vec(),
            run: RunConfig::default(),
            out_dir: out_dir.into(),
            seed: 0,
            jobs: 1,
        }
    }

    fn fingerprint(&self) -> Value {
        let generator = match &self.generator {
            GeneratorSource::Mock(spec) => json!({ "mock": spec.with_seed(0) }),
            GeneratorSource::Live(c) => json!({
                "live": { "endpoint_url": c.endpoint_url, "model_name": c.model_name, "temperature": c.temperature }
            }),
        };
        json!({
            "seed": self.seed,
            "trials": self.trials,
            "modes": self.modes,
            "r_max": self.run.r_max,
            "feedback_byte_budget": self.run.feedback_byte_budget,
            "global_constraints": self.run.global_constraints,
            "model_id": self.model_id,
            "generator": generator,
            "workflows": self.workflows.iter().map(|w| {
                let doc: Value = serde_json::from_str(&w.to_document().to_json()).expect("document is JSON");
                json!({ "id": w.workflow_id, "document": doc })
            }).collect::<Vec<_>>(),
        })
    }
}

/// One completed trial as listed in the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub workflow_id: String,
    pub mode: Mode,
    pub trial: u32,
    pub result: TrialResult,
}

fn stream_seed(seed: u64, workflow_id: &str, mode: Mode) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(workflow_id.as_bytes());
    h.update([0]);
    h.update(mode.as_str().as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

pub fn trial_dir(out_dir: &Path, workflow_id: &str, mode: Mode, trial: u32) -> PathBuf {
    out_dir
        .join("trials")
        .join(workflow_id)
        .join(mode.as_str())
        .join(format!("{trial:04}"))
}

fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, CampaignError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut entries = Vec::new();
    let lines: Vec<&str> = text.split('\n').collect();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(e) => entries.push(e),
            // a torn final line from an interrupted run; that trial reruns
            Err(_) if i + 1 == lines.len() => {}
            Err(e) => {
                return Err(CampaignError::Manifest {
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(entries)
}

struct Cell<'a> {
    spec: &'a WorkflowSpec,
    guards: &'a IndexMap<String, Arc<dyn Guard>>,
    mode: Mode,
    trial: u32,
}

/// Run (or resume) a campaign and write its report files.
pub fn run_campaign(config: &CampaignConfig, registry: &GuardRegistry) -> Result<BenchmarkReport, CampaignError> {
    if config.trials == 0 {
        return Err(CampaignError::Invalid("trials must be at least 1".into()));
    }
    if config.modes.is_empty() {
        return Err(CampaignError::Invalid("no modes selected".into()));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = config.workflows.iter().find(|w| !seen.insert(&w.workflow_id)) {
        return Err(CampaignError::Invalid(format!("workflow `{}` listed twice", dup.workflow_id)));
    }
    let out = &config.out_dir;
    fs::create_dir_all(out).map_err(io_err(out))?;

    let fingerprint_path = out.join(FINGERPRINT);
    let fingerprint = config.fingerprint();
    match fs::read_to_string(&fingerprint_path) {
        Ok(existing) => {
            let existing: Value = serde_json::from_str(&existing)
                .map_err(|_| CampaignError::ConfigMismatch(out.clone()))?;
            if existing != fingerprint {
                return Err(CampaignError::ConfigMismatch(out.clone()));
            }
        }
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            let text = serde_json::to_string_pretty(&fingerprint).expect("fingerprint serializes");
            fs::write(&fingerprint_path, text + "\n").map_err(io_err(&fingerprint_path))?;
        }
        Err(e) => return Err(io_err(&fingerprint_path)(e)),
    }

    let manifest_path = out.join(MANIFEST);
    let mut entries = read_manifest(&manifest_path)?;
    let done: HashSet<(String, Mode, u32)> = entries
        .iter()
        .map(|e| (e.workflow_id.clone(), e.mode, e.trial))
        .collect();

    let guard_sets: Vec<IndexMap<String, Arc<dyn Guard>>> = config
        .workflows
        .iter()
        .map(|w| w.build_guards(registry))
        .collect::<Result<_, _>>()?;
    let interactive = guard_sets.iter().flat_map(|g| g.values()).any(|g| !g.is_replayable());
    let jobs = if interactive { 1 } else { config.jobs.max(1) };

    let live: Option<Arc<LiveGenerator>> = match &config.generator {
        GeneratorSource::Live(c) => Some(Arc::new(LiveGenerator::new(c.clone())?)),
        GeneratorSource::Mock(spec) => {
            spec.validate()?;
            None
        }
    };

    let mut pending = Vec::new();
    for (spec, guards) in config.workflows.iter().zip(&guard_sets) {
        for &mode in &config.modes {
            for trial in 1..=config.trials {
                if !done.contains(&(spec.workflow_id.clone(), mode, trial)) {
                    pending.push(Cell {
                        spec,
                        guards,
                        mode,
                        trial,
                    });
                }
            }
        }
    }
    info!(pending = pending.len(), skipped = done.len(), jobs, "running campaign");

    let manifest = Mutex::new(
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&manifest_path)
            .map_err(io_err(&manifest_path))?,
    );
    let run_cell = |cell: &Cell<'_>| -> Result<ManifestEntry, CampaignError> {
        let dir = trial_dir(out, &cell.spec.workflow_id, cell.mode, cell.trial);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
        }
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let repo = Repository::open(dir.join("repository.jsonl"))?;
        let run = RunConfig {
            mode: cell.mode,
            ..config.run.clone()
        };
        let outcome = match (&config.generator, &live) {
            (GeneratorSource::Mock(spec), _) => {
                let seed = trial_seed(stream_seed(config.seed, &cell.spec.workflow_id, cell.mode), cell.trial as u64);
                let generator = MockGenerator::new(spec.with_seed(seed))?;
                Executor::new(&generator, cell.guards, &repo, &run).execute_workflow(cell.spec)
            }
            (GeneratorSource::Live(_), Some(generator)) => {
                let generator: &dyn Generator = generator.as_ref();
                Executor::new(generator, cell.guards, &repo, &run).execute_workflow(cell.spec)
            }
            (GeneratorSource::Live(_), None) => unreachable!("live generator built above"),
        };
        let trace_path = dir.join("trace.jsonl");
        fs::write(&trace_path, trace_to_jsonl(&outcome.trace)).map_err(io_err(&trace_path))?;
        let outcome_path = dir.join("outcome.json");
        let summary = json!({
            "status": outcome.status,
            "final_state": outcome.final_state,
            "totals": outcome.totals,
            "failed_node": outcome.failed_node,
            "error": outcome.error,
        });
        fs::write(&outcome_path, serde_json::to_string_pretty(&summary).unwrap() + "\n")
            .map_err(io_err(&outcome_path))?;
        let entry = ManifestEntry {
            workflow_id: cell.spec.workflow_id.clone(),
            mode: cell.mode,
            trial: cell.trial,
            result: TrialResult::from(&outcome),
        };
        let mut line = serde_json::to_vec(&entry).expect("entry serializes");
        line.push(b'\n');
        let mut file = manifest.lock().expect("manifest lock");
        file.write_all(&line)
            .and_then(|_| file.flush())
            .map_err(io_err(&manifest_path))?;
        Ok(entry)
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CampaignError::Invalid(e.to_string()))?;
    let fresh: Vec<ManifestEntry> = pool.install(|| pending.par_iter().map(run_cell).collect::<Result<_, _>>())?;
    entries.extend(fresh);

    let report = build_report(config, &entries)?;
    let json_path = out.join("report.json");
    fs::write(&json_path, report.to_json()).map_err(io_err(&json_path))?;
    let txt_path = out.join("report.txt");
    fs::write(&txt_path, report.to_table()).map_err(io_err(&txt_path))?;
    Ok(report)
}

fn build_report(config: &CampaignConfig, entries: &[ManifestEntry]) -> Result<BenchmarkReport, CampaignError> {
    let mut by_cell: BTreeMap<(&str, Mode), BTreeMap<u32, TrialResult>> = BTreeMap::new();
    for e in entries {
        if e.trial >= 1 && e.trial <= config.trials {
            by_cell
                .entry((e.workflow_id.as_str(), e.mode))
                .or_default()
                .insert(e.trial, e.result);
        }
    }
    let mut report = BenchmarkReport {
        seed: config.seed,
        trials: config.trials as u64,
        r_max: config.run.r_max,
        cells: Vec::new(),
        unpaired: Vec::new(),
    };
    for spec in &config.workflows {
        let mut summaries = BTreeMap::new();
        for &mode in &config.modes {
            if let Some(results) = by_cell.get(&(spec.workflow_id.as_str(), mode)) {
                let results: Vec<TrialResult> = results.values().copied().collect();
                summaries.insert(mode, summarize(&spec.workflow_id, &config.model_id, mode, &results)?);
            }
        }
        match (summaries.remove(&Mode::Baseline), summaries.remove(&Mode::Guarded)) {
            (Some(baseline), Some(guarded)) => report.cells.push(CellReport {
                workflow_id: spec.workflow_id.clone(),
                model_id: config.model_id.clone(),
                comparison: compare(&baseline, &guarded)?,
                baseline,
                guarded,
            }),
            (one, other) => report.unpaired.extend(one.into_iter().chain(other)),
        }
    }
    Ok(report)
}

/// Open a trial's repository log for inspection.
pub fn open_trial_repository(out_dir: &Path, workflow_id: &str, mode: Mode, trial: u32) -> Result<Repository, CampaignError> {
    let path = trial_dir(out_dir, workflow_id, mode, trial).join("repository.jsonl");
    if !path.exists() {
        return Err(io_err(&path)(io::Error::new(io::ErrorKind::NotFound, "no such trial")));
    }
    Ok(Repository::load(path)?)
}
