use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use icil_core::baselines::train_baseline;
use icil_core::ebm::{train_ebm, EnergyModel};
use icil_core::envsuite::{Dataset, EnvironmentSpec};
use icil_core::harness::{
    ablation_cells, evaluate, matrix_cells, noise_cells, references, report, run_cells, Cell, CellRecord, ExperimentConfig,
    Fixture, Method, Scores, Task, TestTarget, Trained,
};
use icil_core::icil::{train_icil, write_history_csv};
use icil_core::rng;
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "icil", version, about = "Strictly batch imitation learning lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment configuration; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate expert demonstrations and the matching test environment.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Trajectories per training environment (default: first grid entry).
        #[arg(long)]
        n_traj: Option<usize>,
        /// CartPole spurious copies (default: from the config).
        #[arg(long)]
        noise_dim: Option<usize>,
    },
    /// Train the energy model on generated demonstrations.
    TrainEbm {
        #[command(flatten)]
        common: Common,
    },
    /// Train one imitation method on generated demonstrations.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: Method,
    },
    /// Evaluate a trained method on the test environment.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: Method,
    },
    /// Run the method × trajectories × seed grid.
    Matrix {
        #[command(flatten)]
        common: Common,
    },
    /// Remove ICIL loss terms one at a time.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Vary the number of spurious copies.
    NoiseSweep {
        #[command(flatten)]
        common: Common,
    },
    /// Rebuild the CSV reports from the cell records in `--out`.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

/// Identifies the run that `gen-data` produced in an output directory.
#[derive(Serialize, Deserialize)]
struct RunInfo {
    task: Task,
    n_traj: usize,
    noise_dim: usize,
    seed: u64,
    config_hash: String,
}

const RUN_INFO: &str = "run.json";
const DATASET: &str = "dataset.bin";
const TEST_ENV: &str = "test_env.json";
const TEST_DATASET: &str = "test_dataset.bin";
const EBM: &str = "ebm.ckpt";

fn load_config(common: &Common) -> anyhow::Result<ExperimentConfig> {
    match &common.config {
        Some(p) => Ok(ExperimentConfig::load(p)?),
        None => Ok(ExperimentConfig::default()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn gen_data(common: &Common, n_traj: Option<usize>, noise_dim: Option<usize>) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let n_traj = n_traj.unwrap_or(cfg.n_traj_grid[0]);
    let noise_dim = match cfg.task {
        Task::Cartpole => noise_dim.unwrap_or(cfg.cartpole.noise_dim),
        Task::OfflineClinical => cfg.clinical.generator.spurious_dim,
    };
    let fixture = Fixture::build(&cfg, n_traj, noise_dim, common.seed)?;
    fs::create_dir_all(&common.out)?;
    fixture.train.save(&common.out.join(DATASET))?;
    let mut w = create(&common.out.join("dataset.csv"))?;
    fixture.train.write_csv(&mut w)?;
    w.flush()?;
    match &fixture.test {
        TestTarget::Online(spec) => write_json(&common.out.join(TEST_ENV), spec)?,
        TestTarget::Offline(ds) => ds.save(&common.out.join(TEST_DATASET))?,
    }
    write_json(&common.out.join("config.json"), &cfg)?;
    let info = RunInfo { task: cfg.task, n_traj, noise_dim, seed: common.seed, config_hash: cfg.hash() };
    write_json(&common.out.join(RUN_INFO), &info)?;
    println!("{} transitions from {} trajectories written to {}", fixture.train.num_transitions(), fixture.train.trajectories.len(), common.out.display());
    Ok(())
}

fn run_info(out: &Path) -> anyhow::Result<RunInfo> {
    let path = out.join(RUN_INFO);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}; run `gen-data` first", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn load_dataset(out: &Path) -> anyhow::Result<Dataset> {
    let path = out.join(DATASET);
    Dataset::load(&path).with_context(|| format!("loading {}; run `gen-data` first", path.display()))
}

fn fit_ebm(cfg: &ExperimentConfig, info: &RunInfo, ds: &Dataset, out: &Path) -> anyhow::Result<EnergyModel> {
    let mut r = rng::stream(info.seed, "ebm", &[info.n_traj as u64, info.noise_dim as u64]);
    let (model, history) = train_ebm(&ds.transitions()?.obs, &cfg.ebm, &mut r)?;
    model.save(&out.join(EBM))?;
    let mut w = create(&out.join("ebm_history.csv"))?;
    history.write_csv(&mut w)?;
    w.flush()?;
    Ok(model)
}

fn train_ebm_cmd(common: &Common) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let info = run_info(&common.out)?;
    let ds = load_dataset(&common.out)?;
    fit_ebm(&cfg, &info, &ds, &common.out)?;
    println!("energy model written to {}", common.out.join(EBM).display());
    Ok(())
}

fn checkpoint_path(out: &Path, method: Method) -> PathBuf {
    out.join(format!("{method}.ckpt"))
}

fn train_cmd(common: &Common, method: Method) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let info = run_info(&common.out)?;
    let ds = load_dataset(&common.out)?;
    let history_path = common.out.join(format!("{method}_history.csv"));
    let trained = match method {
        Method::Icil => {
            let ebm = if cfg.icil.losses.energy {
                let path = common.out.join(EBM);
                Some(if path.exists() { EnergyModel::load(&path)? } else { fit_ebm(&cfg, &info, &ds, &common.out)? })
            } else {
                None
            };
            let (model, history) = train_icil(&ds, ebm.as_ref(), &cfg.icil, info.seed)?;
            let mut w = create(&history_path)?;
            write_history_csv(&history, &mut w)?;
            w.flush()?;
            Trained::Icil(model)
        }
        Method::Baseline(kind) => {
            let (policy, history) = train_baseline(kind, &ds, &cfg.baseline, info.seed)?;
            let mut w = create(&history_path)?;
            writeln!(w, "iter,objective")?;
            for (i, v) in history.iter().enumerate() {
                writeln!(w, "{i},{v}")?;
            }
            w.flush()?;
            Trained::Baseline(policy)
        }
    };
    let path = checkpoint_path(&common.out, method);
    trained.save(&path)?;
    println!("{method} checkpoint written to {}", path.display());
    Ok(())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

fn eval_cmd(common: &Common, method: Method) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let info = run_info(&common.out)?;
    let path = checkpoint_path(&common.out, method);
    let policy = Trained::load(&path).with_context(|| format!("loading {}; run `train --method {method}` first", path.display()))?;
    let test = match info.task {
        Task::Cartpole => {
            let text = fs::read_to_string(common.out.join(TEST_ENV))?;
            TestTarget::Online(serde_json::from_str::<EnvironmentSpec>(&text)?)
        }
        Task::OfflineClinical => TestTarget::Offline(Dataset::load(&common.out.join(TEST_DATASET))?),
    };
    let mut fixture = Fixture::build(&cfg, info.n_traj, info.noise_dim, info.seed)?;
    fixture.test = test;
    let refs = match info.task {
        Task::Cartpole => Some(references(&cfg, &common.out)?),
        Task::OfflineClinical => None,
    };
    let s: Scores = evaluate(&cfg, &mut fixture, &policy, refs.as_ref(), cfg.eval_train_env)?;
    let csv = common.out.join(format!("eval_{method}.csv"));
    let mut w = create(&csv)?;
    writeln!(w, "method,n_traj,seed,raw_return,scaled_return,train_raw_return,train_scaled_return,acc,auc,apr,classifier_entropy,config_hash")?;
    writeln!(
        w,
        "{method},{},{},{},{},{},{},{},{},{},{},{}",
        info.n_traj,
        info.seed,
        fmt_opt(s.raw_return),
        fmt_opt(s.scaled_return),
        fmt_opt(s.train_raw_return),
        fmt_opt(s.train_scaled_return),
        fmt_opt(s.acc),
        fmt_opt(s.auc),
        fmt_opt(s.apr),
        fmt_opt(s.classifier_entropy),
        cfg.hash()
    )?;
    w.flush()?;
    match (s.scaled_return, s.acc) {
        (Some(sc), _) => println!("{method}: test scaled return {sc:.4}"),
        (_, Some(acc)) => println!("{method}: test ACC {acc:.4} AUC {} APR {}", fmt_opt(s.auc), fmt_opt(s.apr)),
        _ => {}
    }
    Ok(())
}

fn run_grid(common: &Common, cells: impl FnOnce(&ExperimentConfig, u64) -> anyhow::Result<Vec<Cell>>) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let cells = cells(&cfg, common.seed)?;
    fs::create_dir_all(&common.out)?;
    write_json(&common.out.join("config.json"), &cfg)?;
    let total = cells.len();
    let mut done = 0;
    let mut progress = |cell: &Cell, rec: &CellRecord, skipped: bool| {
        done += 1;
        let status = match (&rec.error, skipped) {
            (Some(e), _) => format!("failed: {e}"),
            (None, true) => "skipped (done)".into(),
            (None, false) => "ok".into(),
        };
        eprintln!("[{done}/{total}] {} n_traj={} noise_dim={} seed={} {status}", cell.label(), cell.n_traj, cell.noise_dim, cell.seed);
    };
    let records = run_cells(&cfg, &cells, &common.out, &mut progress)?;
    let files = report(&common.out)?;
    for f in &files.written {
        println!("{}", f.display());
    }
    let failed = records.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        bail!("{failed} of {total} cells failed; see failures.csv");
    }
    Ok(())
}

fn report_cmd(common: &Common) -> anyhow::Result<()> {
    let files = report(&common.out)?;
    for f in &files.written {
        println!("{}", f.display());
    }
    Ok(())
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    match e.downcast_ref::<icil_core::Error>() {
        Some(icil_core::Error::Shape { .. }) => "shape",
        Some(icil_core::Error::NonFinite(_)) => "non-finite",
        Some(icil_core::Error::NotEvaluated(_)) => "not-evaluated",
        Some(icil_core::Error::InvalidArgument(_)) => "invalid-argument",
        Some(icil_core::Error::Diverged { .. }) => "diverged",
        Some(icil_core::Error::Format { .. }) => "format",
        Some(icil_core::Error::Io(_)) => "io",
        Some(icil_core::Error::Json(_)) => "json",
        None if e.downcast_ref::<std::io::Error>().is_some() => "io",
        None => "other",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData { common, n_traj, noise_dim } => gen_data(common, *n_traj, *noise_dim),
        Command::TrainEbm { common } => train_ebm_cmd(common),
        Command::Train { common, method } => train_cmd(common, *method),
        Command::Eval { common, method } => eval_cmd(common, *method),
        Command::Matrix { common } => run_grid(common, |c, s| Ok(matrix_cells(c, s))),
        Command::Ablate { common } => run_grid(common, |c, s| Ok(ablation_cells(c, s))),
        Command::NoiseSweep { common } => run_grid(common, |c, s| Ok(noise_cells(c, s)?)),
        Command::Report { common } => report_cmd(common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({
                "error": {
                    "kind": error_kind(&e),
                    "message": format!("{e:#}"),
                }
            });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
