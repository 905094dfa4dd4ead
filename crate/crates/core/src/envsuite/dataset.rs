use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::cartpole::{self, CartPole};
use super::expert::Expert;
use super::intervention::InterventionSpec;
use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::rng;

pub const DATASET_MAGIC: &[u8; 9] = b"ICILDATA\n";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaseTask {
    Cartpole,
    Tabular,
    OfflineClinical,
}

/// One member of an environment family: base task plus intervention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    pub env_id: usize,
    pub task: BaseTask,
    pub intervention: InterventionSpec,
    pub gamma: f64,
    pub horizon: usize,
    pub action_count: usize,
    /// Append the environment id as an extra observation coordinate.
    #[serde(default)]
    pub env_feature: bool,
    /// Binary features that copy the action (offline clinical task only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action_copies: Option<ActionCopies>,
}

/// `dim` binary features, each equal to the current action with probability
/// `agreement` and to its complement otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionCopies {
    pub dim: usize,
    pub agreement: f64,
}

/// CartPole coordinates copied by the spurious variables: velocity, angle, angular velocity.
pub const CARTPOLE_NOISE_SOURCES: [usize; 3] = [1, 2, 3];

impl EnvironmentSpec {
    pub fn new(
        env_id: usize,
        task: BaseTask,
        intervention: InterventionSpec,
        gamma: f64,
        horizon: usize,
        action_count: usize,
    ) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::invalid(format!("discount {gamma} must lie in (0, 1)")));
        }
        if horizon == 0 || action_count == 0 {
            return Err(Error::invalid("horizon and action count must be positive"));
        }
        Ok(Self { env_id, task, intervention, gamma, horizon, action_count, env_feature: false, action_copies: None })
    }

    pub fn cartpole(env_id: usize, intervention: InterventionSpec) -> Self {
        Self::new(env_id, BaseTask::Cartpole, intervention, 0.99, cartpole::MAX_STEPS, cartpole::ACTIONS)
            .expect("constant CartPole settings are valid")
    }

    pub fn with_env_feature(mut self, on: bool) -> Self {
        self.env_feature = on;
        self
    }

    pub fn base_dim(&self) -> usize {
        match self.task {
            BaseTask::Cartpole => cartpole::STATE_DIM,
            BaseTask::Tabular => 1,
            BaseTask::OfflineClinical => super::clinical::BASE_DIM,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.base_dim()
            + self.intervention.noise_dim()
            + self.action_copies.map_or(0, |c| c.dim)
            + usize::from(self.env_feature)
    }

    pub fn observe(&self, base: &[f64]) -> Result<Vec<f64>> {
        self.intervention.augment(base, self.env_feature.then_some(self.env_id as f64))
    }
}

/// Two CartPole training environments with 1× and 2× spurious copies.
pub fn cartpole_train_family(noise_dim: usize, env_feature: bool) -> Result<Vec<EnvironmentSpec>> {
    [1.0, 2.0]
        .iter()
        .enumerate()
        .map(|(e, &f)| {
            let iv = InterventionSpec::constant(noise_dim, f, &CARTPOLE_NOISE_SOURCES)?;
            Ok(EnvironmentSpec::cartpole(e, iv).with_env_feature(env_feature))
        })
        .collect()
}

/// CartPole test environment with factors drawn from `U(-1, 1)`.
pub fn cartpole_test_env<R: Rng>(env_id: usize, noise_dim: usize, env_feature: bool, rng: &mut R) -> Result<EnvironmentSpec> {
    let iv = InterventionSpec::sample_uniform(noise_dim, &CARTPOLE_NOISE_SOURCES, rng)?;
    Ok(EnvironmentSpec::cartpole(env_id, iv).with_env_feature(env_feature))
}

/// Checks that a family shares its action space and has distinct ids.
pub fn validate_family(specs: &[EnvironmentSpec]) -> Result<()> {
    let first = specs.first().ok_or_else(|| Error::invalid("empty environment family"))?;
    for s in specs {
        if s.action_count != first.action_count {
            return Err(Error::invalid("action spaces differ across environments"));
        }
        if s.obs_dim() != first.obs_dim() {
            return Err(Error::invalid("observation sizes differ across environments"));
        }
    }
    let mut ids: Vec<usize> = specs.iter().map(|s| s.env_id).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != specs.len() {
        return Err(Error::invalid("duplicate environment ids"));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub obs: Vec<f64>,
    pub action: usize,
    pub next_obs: Vec<f64>,
    /// The episode ended by failure at this step (not by the step limit).
    pub terminal: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub env_id: usize,
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub env_specs: Vec<EnvironmentSpec>,
    pub seed: u64,
    /// Trajectory count per environment id.
    pub counts: BTreeMap<usize, usize>,
    pub obs_dim: usize,
    pub base_dim: usize,
    pub action_count: usize,
}

/// Expert trajectories grouped by environment.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn new(env_specs: Vec<EnvironmentSpec>, seed: u64, mut trajectories: Vec<Trajectory>) -> Result<Self> {
        validate_family(&env_specs)?;
        trajectories.sort_by_key(|t| t.env_id);
        let mut counts = BTreeMap::new();
        for t in &trajectories {
            *counts.entry(t.env_id).or_insert(0) += 1;
        }
        let first = &env_specs[0];
        let header = DatasetHeader {
            format_version: DATASET_VERSION,
            obs_dim: first.obs_dim(),
            base_dim: first.base_dim(),
            action_count: first.action_count,
            env_specs,
            seed,
            counts,
        };
        let ds = Self { header, trajectories };
        ds.validate()?;
        Ok(ds)
    }

    pub fn env_ids(&self) -> Vec<usize> {
        self.header.counts.keys().copied().collect()
    }

    pub fn num_transitions(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn obs_dim(&self) -> usize {
        self.header.obs_dim
    }

    pub fn action_count(&self) -> usize {
        self.header.action_count
    }

    /// Chaining, action range, and dimension checks.
    pub fn validate(&self) -> Result<()> {
        let d = self.header.obs_dim;
        for (ti, t) in self.trajectories.iter().enumerate() {
            if !self.header.env_specs.iter().any(|s| s.env_id == t.env_id) {
                return Err(Error::invalid(format!("trajectory {ti} has unknown env id {}", t.env_id)));
            }
            for (k, s) in t.steps.iter().enumerate() {
                if s.obs.len() != d || s.next_obs.len() != d {
                    return Err(Error::invalid(format!("trajectory {ti} step {k}: observation size mismatch")));
                }
                if s.action >= self.header.action_count {
                    return Err(Error::invalid(format!("trajectory {ti} step {k}: action {} out of range", s.action)));
                }
                if let Some(next) = t.steps.get(k + 1) {
                    if next.obs != s.next_obs {
                        return Err(Error::invalid(format!("trajectory {ti} breaks chaining at step {k}")));
                    }
                }
            }
        }
        Ok(())
    }

    /// All transitions flattened into matrices, environments in ascending id order.
    pub fn transitions(&self) -> Result<Transitions> {
        let env_ids = self.env_ids();
        let n = self.num_transitions();
        if n == 0 {
            return Err(Error::invalid("dataset has no transitions"));
        }
        let d = self.header.obs_dim;
        let mut obs = Vec::with_capacity(n * d);
        let mut next = Vec::with_capacity(n * d);
        let mut actions = Vec::with_capacity(n);
        let mut terminal = Vec::with_capacity(n);
        let mut env = Vec::with_capacity(n);
        for t in &self.trajectories {
            let e = env_ids.binary_search(&t.env_id).expect("ids collected from trajectories");
            for s in &t.steps {
                obs.extend_from_slice(&s.obs);
                next.extend_from_slice(&s.next_obs);
                actions.push(s.action);
                terminal.push(s.terminal);
                env.push(e);
            }
        }
        Transitions::new(
            Array::matrix(n, d, obs)?,
            actions,
            Array::matrix(n, d, next)?,
            terminal,
            env,
            env_ids,
            self.header.action_count,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(json.len() + self.num_transitions() * (2 * self.obs_dim() + 2) * 8);
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.trajectories {
            out.extend_from_slice(&(t.env_id as u64).to_le_bytes());
            out.extend_from_slice(&(t.steps.len() as u64).to_le_bytes());
            for s in &t.steps {
                let record = s.obs.iter().copied().chain([s.action as f64]).chain(s.next_obs.iter().copied()).chain([f64::from(u8::from(s.terminal))]);
                for v in record {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        fs::File::create(path)?.write_all(&out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let bad = |reason: String| Error::Format { path: path.to_path_buf(), reason };
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(DATASET_MAGIC.len()).map_err(&bad)? != DATASET_MAGIC {
            return Err(bad("not a trajectory dataset".into()));
        }
        let len = cur.u64().map_err(&bad)? as usize;
        let header: DatasetHeader = serde_json::from_slice(cur.take(len).map_err(&bad)?)?;
        if header.format_version != DATASET_VERSION {
            return Err(bad(format!("unsupported format version {}", header.format_version)));
        }
        let d = header.obs_dim;
        let total: usize = header.counts.values().sum();
        let mut trajectories = Vec::with_capacity(total);
        for _ in 0..total {
            let env_id = cur.u64().map_err(&bad)? as usize;
            let n = cur.u64().map_err(&bad)? as usize;
            let mut steps = Vec::with_capacity(n);
            for _ in 0..n {
                let rec = cur.f64s(2 * d + 2).map_err(&bad)?;
                steps.push(Step {
                    obs: rec[..d].to_vec(),
                    action: rec[d] as usize,
                    next_obs: rec[d + 1..2 * d + 1].to_vec(),
                    terminal: rec[2 * d + 1] != 0.0,
                });
            }
            trajectories.push(Trajectory { env_id, steps });
        }
        if cur.pos != bytes.len() {
            return Err(bad("trailing bytes after the last trajectory".into()));
        }
        let ds = Self { header, trajectories };
        ds.validate()?;
        Ok(ds)
    }

    /// Inspection CSV: `env_id,traj_id,t,x_0..,a,x'_0..`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let d = self.obs_dim();
        let mut head = vec!["env_id".to_string(), "traj_id".into(), "t".into()];
        head.extend((0..d).map(|i| format!("x_{i}")));
        head.push("a".into());
        head.extend((0..d).map(|i| format!("x'_{i}")));
        writeln!(w, "{}", head.join(","))?;
        let mut per_env: BTreeMap<usize, usize> = BTreeMap::new();
        for t in &self.trajectories {
            let traj_id = per_env.entry(t.env_id).or_insert(0);
            for (k, s) in t.steps.iter().enumerate() {
                let mut row = vec![t.env_id.to_string(), traj_id.to_string(), k.to_string()];
                row.extend(s.obs.iter().map(f64::to_string));
                row.push(s.action.to_string());
                row.extend(s.next_obs.iter().map(f64::to_string));
                writeln!(w, "{}", row.join(","))?;
            }
            *traj_id += 1;
        }
        Ok(())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.pos + n > self.bytes.len() {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        Ok(self.take(8 * n)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

/// Flattened transitions ready for minibatch training.
#[derive(Clone, Debug)]
pub struct Transitions {
    pub obs: Array,
    pub actions: Vec<usize>,
    pub next_obs: Array,
    pub terminal: Vec<bool>,
    /// Index into `env_ids` for every row.
    pub env: Vec<usize>,
    pub env_ids: Vec<usize>,
    pub action_count: usize,
    by_env: Vec<Vec<usize>>,
}

impl Transitions {
    pub fn new(
        obs: Array,
        actions: Vec<usize>,
        next_obs: Array,
        terminal: Vec<bool>,
        env: Vec<usize>,
        env_ids: Vec<usize>,
        action_count: usize,
    ) -> Result<Self> {
        let n = obs.rows();
        if next_obs.rows() != n || actions.len() != n || terminal.len() != n || env.len() != n || next_obs.cols() != obs.cols() {
            return Err(Error::shape("transitions", "column lengths disagree"));
        }
        let mut by_env = vec![Vec::new(); env_ids.len()];
        for (i, &e) in env.iter().enumerate() {
            let bucket = by_env.get_mut(e).ok_or_else(|| Error::invalid(format!("env index {e} out of range")))?;
            bucket.push(i);
        }
        if let Some(a) = actions.iter().find(|&&a| a >= action_count) {
            return Err(Error::invalid(format!("action {a} out of range")));
        }
        Ok(Self { obs, actions, next_obs, terminal, env, env_ids, action_count, by_env })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn num_envs(&self) -> usize {
        self.env_ids.len()
    }

    pub fn rows_of_env(&self, e: usize) -> &[usize] {
        &self.by_env[e]
    }

    /// Same transitions with both observation matrices standardized.
    pub fn normalized(&self, n: &super::Normalizer) -> Result<Self> {
        let mut out = self.clone();
        out.obs = n.apply(&self.obs)?;
        out.next_obs = n.apply(&self.next_obs)?;
        Ok(out)
    }

    /// Environment-stratified minibatch: `batch / num_envs` rows (with
    /// replacement) from each environment, grouped in environment order.
    pub fn sample_stratified<R: Rng>(&self, batch: usize, rng: &mut R) -> Result<Batch> {
        let k = self.num_envs();
        if batch < k {
            return Err(Error::invalid(format!("batch of {batch} cannot cover {k} environments")));
        }
        let per = batch / k;
        let mut rows = Vec::with_capacity(per * k);
        let mut groups = Vec::with_capacity(k);
        for e in 0..k {
            let pool = &self.by_env[e];
            if pool.is_empty() {
                return Err(Error::invalid(format!("environment {} has no transitions", self.env_ids[e])));
            }
            let start = rows.len();
            rows.extend((0..per).map(|_| pool[rng.random_range(0..pool.len())]));
            groups.push(start..rows.len());
        }
        Ok(self.batch(rows, groups))
    }

    fn batch(&self, rows: Vec<usize>, groups: Vec<std::ops::Range<usize>>) -> Batch {
        Batch {
            obs: self.obs.select_rows(&rows),
            next_obs: self.next_obs.select_rows(&rows),
            actions: rows.iter().map(|&i| self.actions[i]).collect(),
            terminal: rows.iter().map(|&i| self.terminal[i]).collect(),
            env: rows.iter().map(|&i| self.env[i]).collect(),
            groups,
        }
    }

    /// Every transition as one batch, grouped by environment.
    pub fn full_batch(&self) -> Batch {
        let mut rows = Vec::with_capacity(self.len());
        let mut groups = Vec::with_capacity(self.num_envs());
        for pool in &self.by_env {
            let start = rows.len();
            rows.extend_from_slice(pool);
            groups.push(start..rows.len());
        }
        self.batch(rows, groups)
    }
}

/// A minibatch whose rows are contiguous per environment.
#[derive(Clone, Debug)]
pub struct Batch {
    pub obs: Array,
    pub next_obs: Array,
    pub actions: Vec<usize>,
    pub terminal: Vec<bool>,
    pub env: Vec<usize>,
    /// Row range of each environment index (possibly empty).
    pub groups: Vec<std::ops::Range<usize>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn envs_present(&self) -> usize {
        self.groups.iter().filter(|g| !g.is_empty()).count()
    }
}

/// Rolls out `expert` in every environment, `n_traj` episodes each.
///
/// Episode `i` of environment `e` draws its initial state from a stream
/// derived from `(seed, e, i)`, so generation order does not matter.
pub fn generate_dataset(specs: &[EnvironmentSpec], expert: &dyn Expert, n_traj: usize, seed: u64) -> Result<Dataset> {
    if n_traj == 0 {
        return Err(Error::invalid("at least one trajectory per environment is required"));
    }
    validate_family(specs)?;
    let mut trajectories = Vec::with_capacity(specs.len() * n_traj);
    for spec in specs {
        if spec.task != BaseTask::Cartpole {
            return Err(Error::invalid(format!("generate_dataset rolls out CartPole, got {:?}", spec.task)));
        }
        for i in 0..n_traj {
            let mut r = rng::stream(seed, "trajectory", &[spec.env_id as u64, i as u64]);
            trajectories.push(rollout_cartpole(spec, expert, &mut r)?);
        }
    }
    Dataset::new(specs.to_vec(), seed, trajectories)
}

fn rollout_cartpole<R: Rng>(spec: &EnvironmentSpec, expert: &dyn Expert, rng: &mut R) -> Result<Trajectory> {
    let mut env = CartPole::reset(rng);
    let mut steps = Vec::with_capacity(spec.horizon);
    let mut obs = spec.observe(&env.state)?;
    while steps.len() < spec.horizon {
        let action = expert.act(&env.state);
        let out = env.step(action);
        let next_obs = spec.observe(&out.next)?;
        steps.push(Step { obs, action, next_obs: next_obs.clone(), terminal: out.terminated });
        if out.terminated || out.truncated {
            break;
        }
        obs = next_obs;
    }
    Ok(Trajectory { env_id: spec.env_id, steps })
}
