//! Grids of runs with on-disk cell markers, and the CSV reports built from them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Method, Task};
use super::eval::mean_se;
use super::pipeline::{cached_references, evaluate, train_method, Fixture, References, Scores};
use crate::error::{Error, Result};
use crate::icil::{LossMask, LossTerm};

/// Which grid a cell belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Matrix,
    Ablation,
    NoiseSweep,
}

impl Experiment {
    pub const ALL: [Experiment; 3] = [Experiment::Matrix, Experiment::Ablation, Experiment::NoiseSweep];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Matrix => "matrix",
            Experiment::Ablation => "ablation",
            Experiment::NoiseSweep => "noise-sweep",
        }
    }
}

/// One `(method, n_traj, noise_dim, seed)` job.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub experiment: Experiment,
    pub method: Method,
    /// Loss terms removed from ICIL.
    pub removed: Option<LossTerm>,
    pub n_traj: usize,
    pub noise_dim: usize,
    pub seed: u64,
}

impl Cell {
    /// Method label used in reports, e.g. `icil-no-inv`.
    pub fn label(&self) -> String {
        match self.removed {
            None => self.method.name().to_string(),
            Some(t) => format!("{}-no-{}", self.method.name(), t.name()),
        }
    }

    fn mask(&self) -> LossMask {
        self.removed.map_or_else(LossMask::default, |t| LossMask::default().without(t))
    }

    fn marker_name(&self) -> String {
        format!("{}-{}-n{}-d{}-s{}.json", self.experiment.name(), self.label(), self.n_traj, self.noise_dim, self.seed)
    }
}

/// Stored outcome of a cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub experiment: Experiment,
    pub method: String,
    pub n_traj: usize,
    pub noise_dim: usize,
    pub seed: u64,
    pub config_hash: String,
    #[serde(default)]
    pub test_factors: Vec<f64>,
    #[serde(flatten)]
    pub scores: Scores,
    /// Set when the cell failed; failed cells are retried on the next run.
    #[serde(default)]
    pub error: Option<String>,
}

/// Seeds of the runs: `base, base + 1, …`.
pub fn run_seeds(cfg: &ExperimentConfig, base: u64) -> Vec<u64> {
    (0..cfg.seeds).map(|i| base.wrapping_add(i)).collect()
}

fn default_noise_dim(cfg: &ExperimentConfig) -> usize {
    match cfg.task {
        Task::Cartpole => cfg.cartpole.noise_dim,
        Task::OfflineClinical => cfg.clinical.generator.spurious_dim,
    }
}

/// Cells of the method × trajectory-count × seed grid.
pub fn matrix_cells(cfg: &ExperimentConfig, base_seed: u64) -> Vec<Cell> {
    let d = default_noise_dim(cfg);
    let mut cells = Vec::new();
    for &n in &cfg.n_traj_grid {
        for seed in run_seeds(cfg, base_seed) {
            for &method in &cfg.methods {
                cells.push(Cell { experiment: Experiment::Matrix, method, removed: None, n_traj: n, noise_dim: d, seed });
            }
        }
    }
    cells
}

/// Full ICIL and ICIL with each loss term removed in turn.
pub fn ablation_cells(cfg: &ExperimentConfig, base_seed: u64) -> Vec<Cell> {
    let d = default_noise_dim(cfg);
    let mut cells = Vec::new();
    for seed in run_seeds(cfg, base_seed) {
        for removed in std::iter::once(None).chain(LossTerm::ALL.map(Some)) {
            let n_traj = cfg.ablation_n_traj;
            cells.push(Cell { experiment: Experiment::Ablation, method: Method::Icil, removed, n_traj, noise_dim: d, seed });
        }
    }
    cells
}

/// Every configured method at each number of spurious copies.
pub fn noise_cells(cfg: &ExperimentConfig, base_seed: u64) -> Result<Vec<Cell>> {
    if cfg.task != Task::Cartpole {
        return Err(Error::invalid("the noise sweep varies CartPole spurious copies; set task to cartpole"));
    }
    let mut cells = Vec::new();
    for &d in &cfg.noise_grid {
        for seed in run_seeds(cfg, base_seed) {
            for &method in &cfg.methods {
                let n_traj = cfg.noise_n_traj;
                cells.push(Cell { experiment: Experiment::NoiseSweep, method, removed: None, n_traj, noise_dim: d, seed });
            }
        }
    }
    Ok(cells)
}

fn cells_dir(out: &Path) -> PathBuf {
    out.join("cells")
}

fn read_marker(path: &Path) -> Option<CellRecord> {
    serde_json::from_str(&fs::read_to_string(path).ok()?).ok()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Progress callback: `(cell, record, skipped)`.
pub type Progress<'a> = &'a mut dyn FnMut(&Cell, &CellRecord, bool);

/// Runs every pending cell, sharing data and energy models between cells of
/// the same run, and returns all records in cell order.
///
/// Cells whose marker already holds a successful result for the same
/// configuration are skipped. A failing cell is recorded and the grid goes on.
pub fn run_cells(cfg: &ExperimentConfig, cells: &[Cell], out: &Path, progress: Progress<'_>) -> Result<Vec<CellRecord>> {
    cfg.validate()?;
    let dir = cells_dir(out);
    fs::create_dir_all(&dir)?;
    let hash = cfg.hash();
    let refs = match cfg.task {
        Task::Cartpole => Some(references(cfg, out)?),
        Task::OfflineClinical => None,
    };
    let mut records = Vec::with_capacity(cells.len());
    let mut fixture: Option<Fixture> = None;
    for cell in cells {
        let marker = dir.join(cell.marker_name());
        if let Some(rec) = read_marker(&marker) {
            if rec.config_hash == hash && rec.error.is_none() {
                progress(cell, &rec, true);
                records.push(rec);
                continue;
            }
        }
        let same_run = |f: &Fixture| f.n_traj == cell.n_traj && f.noise_dim == cell.noise_dim && f.seed == cell.seed;
        if !fixture.as_ref().is_some_and(same_run) {
            fixture = None;
        }
        let outcome = (|| {
            if fixture.is_none() {
                fixture = Some(Fixture::build(cfg, cell.n_traj, cell.noise_dim, cell.seed)?);
            }
            let f = fixture.as_mut().expect("built above");
            let policy = train_method(cfg, f, cell.method, cell.mask())?;
            evaluate(cfg, f, &policy, refs.as_ref(), cfg.eval_train_env)
        })();
        let test_factors = match fixture.as_ref().map(|f| &f.test) {
            Some(super::pipeline::TestTarget::Online(spec)) => spec.intervention.factors().to_vec(),
            _ => Vec::new(),
        };
        let (scores, error) = match outcome {
            Ok(s) => (s, None),
            Err(e) => (Scores::default(), Some(e.to_string())),
        };
        let rec = CellRecord {
            experiment: cell.experiment,
            method: cell.label(),
            n_traj: cell.n_traj,
            noise_dim: cell.noise_dim,
            seed: cell.seed,
            config_hash: hash.clone(),
            test_factors,
            scores,
            error,
        };
        write_atomic(&marker, serde_json::to_string_pretty(&rec)?.as_bytes())?;
        progress(cell, &rec, false);
        records.push(rec);
    }
    Ok(records)
}

/// Reference returns for the configured episode count, cached in `out`.
pub fn references(cfg: &ExperimentConfig, out: &Path) -> Result<References> {
    cached_references(&out.join("references.json"), cfg.reference_episodes, 0)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

/// Rank of a method label in report order.
fn method_rank(label: &str) -> (usize, String) {
    const ORDER: [&str; 5] = ["bc", "rcal", "bc-irm", "rcal-irm", "icil"];
    let base = ORDER.iter().position(|m| *m == label).unwrap_or_else(|| {
        ORDER.iter().position(|m| label.starts_with(&format!("{m}-"))).map_or(ORDER.len(), |p| p)
    });
    (base, label.to_string())
}

fn sort_records(records: &mut [CellRecord]) {
    records.sort_by(|a, b| {
        (method_rank(&a.method), a.noise_dim, a.n_traj, a.seed).cmp(&(method_rank(&b.method), b.noise_dim, b.n_traj, b.seed))
    });
}

const METRICS: [&str; 8] =
    ["raw_return", "scaled_return", "train_raw_return", "train_scaled_return", "acc", "auc", "apr", "classifier_entropy"];

fn metric(s: &Scores, name: &str) -> Option<f64> {
    match name {
        "raw_return" => s.raw_return,
        "scaled_return" => s.scaled_return,
        "train_raw_return" => s.train_raw_return,
        "train_scaled_return" => s.train_scaled_return,
        "acc" => s.acc,
        "auc" => s.auc,
        "apr" => s.apr,
        "classifier_entropy" => s.classifier_entropy,
        _ => None,
    }
}

/// Tidy per-run CSV. Offline results add `acc,auc,apr`; the noise sweep adds
/// `noise_dim`.
pub fn tidy_csv(records: &[CellRecord], experiment: Experiment) -> String {
    let offline = records.iter().any(|r| r.scores.acc.is_some());
    let noise = experiment == Experiment::NoiseSweep;
    let mut out = String::from("method,");
    if noise {
        out.push_str("noise_dim,");
    }
    out.push_str("n_traj,seed,raw_return,scaled_return");
    if offline {
        out.push_str(",acc,auc,apr");
    }
    out.push_str(",config_hash\n");
    for r in records.iter().filter(|r| r.error.is_none()) {
        let _ = write!(out, "{},", r.method);
        if noise {
            let _ = write!(out, "{},", r.noise_dim);
        }
        let _ = write!(out, "{},{},{},{}", r.n_traj, r.seed, fmt_opt(r.scores.raw_return), fmt_opt(r.scores.scaled_return));
        if offline {
            let _ = write!(out, ",{},{},{}", fmt_opt(r.scores.acc), fmt_opt(r.scores.auc), fmt_opt(r.scores.apr));
        }
        let _ = writeln!(out, ",{}", r.config_hash);
    }
    out
}

/// Mean and standard error over seeds of every metric, per method and grid point.
pub fn summary_csv(records: &[CellRecord]) -> Result<String> {
    // (noise_dim, n_traj, method rank)
    type Key = (usize, usize, (usize, String));
    let mut groups: BTreeMap<Key, Vec<&CellRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.error.is_none()) {
        groups.entry((r.noise_dim, r.n_traj, method_rank(&r.method))).or_default().push(r);
    }
    let mut out = String::from("method,noise_dim,n_traj,metric,mean,se,n,seeds,config_hash\n");
    for ((d, n, (_, method)), rs) in groups {
        let hashes: Vec<&str> = {
            let mut h: Vec<&str> = rs.iter().map(|r| r.config_hash.as_str()).collect();
            h.dedup();
            h
        };
        let seeds = rs.iter().map(|r| r.seed.to_string()).collect::<Vec<_>>().join(" ");
        for name in METRICS {
            let xs: Vec<f64> = rs.iter().filter_map(|r| metric(&r.scores, name)).collect();
            if xs.is_empty() {
                continue;
            }
            let m = mean_se(&xs)?;
            let _ = writeln!(out, "{method},{d},{n},{name},{:.6},{:.6},{},{seeds},{}", m.mean, m.se, m.n, hashes.join(" "));
        }
    }
    Ok(out)
}

/// Per-run returns on a training environment next to the test environment.
pub fn train_vs_test_csv(records: &[CellRecord]) -> String {
    let mut out = String::from("method,n_traj,seed,train_scaled_return,test_scaled_return,gap,config_hash\n");
    for r in records.iter().filter(|r| r.error.is_none()) {
        if let (Some(tr), Some(te)) = (r.scores.train_scaled_return, r.scores.scaled_return) {
            let _ = writeln!(out, "{},{},{},{tr:.6},{te:.6},{:.6},{}", r.method, r.n_traj, r.seed, tr - te, r.config_hash);
        }
    }
    out
}

/// Files written by [`report`].
#[derive(Clone, Debug, Default)]
pub struct ReportFiles {
    pub written: Vec<PathBuf>,
    pub failed_cells: usize,
}

/// Reads every cell marker under `dir` and (re)writes the CSV reports:
/// `<experiment>.csv`, `<experiment>_summary.csv`, `<experiment>_train_vs_test.csv`
/// and `failures.csv` when any cell failed.
pub fn report(dir: &Path) -> Result<ReportFiles> {
    let cells = cells_dir(dir);
    let mut paths: Vec<PathBuf> = match fs::read_dir(&cells) {
        Ok(rd) => rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.extension().is_some_and(|x| x == "json")).collect(),
        Err(_) => Vec::new(),
    };
    paths.sort();
    let mut records = Vec::with_capacity(paths.len());
    for p in &paths {
        let rec = read_marker(p).ok_or_else(|| Error::Format { path: p.clone(), reason: "unreadable cell record".into() })?;
        records.push(rec);
    }
    if records.is_empty() {
        return Err(Error::invalid(format!("no completed cells under {}", dir.display())));
    }
    let mut files = ReportFiles::default();
    let mut write = |name: String, body: String| -> Result<()> {
        let path = dir.join(name);
        write_atomic(&path, body.as_bytes())?;
        files.written.push(path);
        Ok(())
    };
    for exp in Experiment::ALL {
        let mut rs: Vec<CellRecord> = records.iter().filter(|r| r.experiment == exp).cloned().collect();
        if rs.is_empty() {
            continue;
        }
        sort_records(&mut rs);
        let name = exp.name().replace('-', "_");
        write(format!("{name}.csv"), tidy_csv(&rs, exp))?;
        write(format!("{name}_summary.csv"), summary_csv(&rs)?)?;
        if rs.iter().any(|r| r.scores.train_scaled_return.is_some()) {
            write(format!("{name}_train_vs_test.csv"), train_vs_test_csv(&rs))?;
        }
    }
    let failed: Vec<&CellRecord> = records.iter().filter(|r| r.error.is_some()).collect();
    files.failed_cells = failed.len();
    if !failed.is_empty() {
        let mut body = String::from("experiment,method,n_traj,noise_dim,seed,error\n");
        for r in failed {
            let msg = r.error.as_deref().unwrap_or_default().replace(['"', '\n'], " ");
            let _ = writeln!(body, "{},{},{},{},{},\"{msg}\"", r.experiment.name(), r.method, r.n_traj, r.noise_dim, r.seed);
        }
        write("failures.csv".into(), body)?;
    }
    Ok(files)
}
