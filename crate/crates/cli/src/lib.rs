//! Run orchestration for the `vdc-sim` binary: scenario loading, overrides,
//! log and plot-data emission, and comparison reports.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use vdc_core::scenario::{default_scenario, load_scenario, ControllerKind, ScenarioConfig};
use vdc_core::sim::{metrics, metrics_table, run, Metrics, SimLog, SimOptions};

/// Which controller(s) to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControllerChoice {
    Vdc,
    Pd,
    Both,
}

impl std::str::FromStr for ControllerChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vdc" => Ok(Self::Vdc),
            "pd" => Ok(Self::Pd),
            "both" => Ok(Self::Both),
            other => Err(format!("unknown controller {other:?}, expected vdc, pd or both")),
        }
    }
}

/// One scenario run, after command-line overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRequest {
    /// `None` runs the bundled default scenario.
    pub scenario: Option<PathBuf>,
    pub controller: Option<ControllerChoice>,
    pub duration: Option<f64>,
    pub dt: Option<f64>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub diagnostics: bool,
    pub decimate: usize,
}

impl RunRequest {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self {
            scenario: None,
            controller: None,
            duration: None,
            dt: None,
            out: out.into(),
            seed: None,
            diagnostics: false,
            decimate: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(p) = &self.scenario {
            if !p.is_file() {
                bail!("scenario file {} does not exist", p.display());
            }
        }
        if self.decimate < 1 {
            bail!("decimation factor must be at least 1");
        }
        Ok(())
    }

    /// Scenario with overrides applied and re-validated.
    pub fn config(&self) -> Result<ScenarioConfig> {
        let mut config = match &self.scenario {
            Some(p) => load_scenario(p)?,
            None => default_scenario(),
        };
        if let Some(d) = self.duration {
            config.run.duration = d;
        }
        if let Some(dt) = self.dt {
            config.run.dt = dt;
        }
        if let Some(seed) = self.seed {
            config.run.seed = seed;
        }
        let issues = config.issues();
        if !issues.is_empty() {
            bail!("invalid overrides:\n  - {}", issues.join("\n  - "));
        }
        Ok(config)
    }
}

/// Result of a successful request.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub out: PathBuf,
    pub runs: Vec<(ControllerKind, Metrics)>,
}

/// Plot-data groups: file stem and column prefixes.
const PLOT_GROUPS: &[(&str, &[&str])] = &[
    ("tracking", &["q", "qd"]),
    ("tracking_error", &["e"]),
    ("required_error", &["ea"]),
    ("torque", &["tau_cmd", "tau"]),
    (
        "estimator_norms",
        &["w_norm_b", "eps_norm_b", "phi_norm_b", "w_norm_j", "eps_norm_j", "inertia_j"],
    ),
    ("accompanying", &["nu"]),
];

fn plot_columns(log: &SimLog, prefixes: &[&str]) -> Vec<String> {
    let mut names = vec!["time".to_string()];
    for p in prefixes {
        if log.index(p).is_some() {
            names.push(p.to_string());
        }
        names.extend((1..).map(|i| format!("{p}{i}")).take_while(|n| log.index(n).is_some()));
    }
    names
}

/// Write `log.csv`, `metrics.txt` and `plotdata/*.csv` under `dir`.
pub fn write_artifacts(dir: &Path, log: &SimLog, m: Option<&Metrics>) -> Result<()> {
    fs::create_dir_all(dir.join("plotdata")).with_context(|| format!("cannot create {}", dir.display()))?;
    fs::write(dir.join("log.csv"), log.to_csv())?;
    if let Some(m) = m {
        fs::write(dir.join("metrics.txt"), metrics_table(&[("value", m)]))?;
    }
    for (stem, prefixes) in PLOT_GROUPS {
        let cols = plot_columns(log, prefixes);
        if cols.len() > 1 {
            fs::write(dir.join("plotdata").join(format!("{stem}.csv")), log.select(&cols).to_csv())?;
        }
    }
    Ok(())
}

fn run_one(req: &RunRequest, config: &ScenarioConfig, kind: ControllerKind, dir: &Path) -> Result<Metrics> {
    let mut config = config.clone();
    config.run.controller = kind;
    let opts = SimOptions {
        diagnostics: req.diagnostics,
        decimate: req.decimate,
    };
    let k_b = config.gains().k_b;
    match run(&config, &opts) {
        Ok(log) => {
            let m = metrics(&log, Some(k_b), 10.0);
            write_artifacts(dir, &log, Some(&m))?;
            Ok(m)
        }
        Err(failure) => {
            write_artifacts(dir, &failure.partial, None)?;
            bail!("{} ({kind}): {}", config.name.as_deref().unwrap_or("scenario"), failure.error)
        }
    }
}

/// Execute a request and write its artifacts. Compare mode writes one
/// subdirectory per controller plus a combined metrics table.
pub fn run_command(req: &RunRequest) -> Result<RunReport> {
    req.validate()?;
    let config = req.config()?;
    let choice = req.controller.unwrap_or(match config.run.controller {
        ControllerKind::Vdc => ControllerChoice::Vdc,
        ControllerKind::Pd => ControllerChoice::Pd,
    });
    let runs = match choice {
        ControllerChoice::Vdc => vec![(ControllerKind::Vdc, run_one(req, &config, ControllerKind::Vdc, &req.out)?)],
        ControllerChoice::Pd => vec![(ControllerKind::Pd, run_one(req, &config, ControllerKind::Pd, &req.out)?)],
        ControllerChoice::Both => {
            let mut runs = vec![];
            for kind in [ControllerKind::Vdc, ControllerKind::Pd] {
                runs.push((kind, run_one(req, &config, kind, &req.out.join(kind.to_string()))?));
            }
            let labels: Vec<String> = runs.iter().map(|(k, _)| k.to_string()).collect();
            let cols: Vec<(&str, &Metrics)> = labels.iter().map(|l| l.as_str()).zip(runs.iter().map(|(_, m)| m)).collect();
            fs::write(req.out.join("metrics.txt"), metrics_table(&cols))?;
            runs
        }
    };
    Ok(RunReport {
        out: req.out.clone(),
        runs,
    })
}

/// Run several requests, at most `jobs` at a time. Results keep the input order.
pub fn run_many(reqs: &[RunRequest], jobs: usize) -> Vec<Result<RunReport>> {
    if jobs <= 1 {
        return reqs.iter().map(run_command).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(|| reqs.par_iter().map(run_command).collect()),
        Err(e) => reqs.iter().map(|_| Err(anyhow::anyhow!("cannot start worker pool: {e}"))).collect(),
    }
}

/// Output directory of each scenario: the root itself for a single file,
/// otherwise one subdirectory per file stem.
pub fn output_dirs(root: &Path, scenarios: &[PathBuf]) -> Vec<PathBuf> {
    if scenarios.len() <= 1 {
        return vec![root.to_path_buf(); scenarios.len().max(1)];
    }
    scenarios
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| format!("scenario{i}"));
            root.join(format!("{i:02}-{stem}"))
        })
        .collect()
}
