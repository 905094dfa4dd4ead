//! Small tabular MDPs with exact occupancy measures.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::dataset::{BaseTask, EnvironmentSpec};
use crate::error::{Error, Result};

pub const MAX_STATES: usize = 64;
pub const MAX_ACTIONS: usize = 4;
const ROW_TOL: f64 = 1e-9;

/// Finite MDP without rewards: `P(s' | s, a)` and an initial distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    /// Row-major `[s][a][s']`.
    transitions: Vec<f64>,
    initial: Vec<f64>,
}

impl TabularMdp {
    pub fn new(n_states: usize, n_actions: usize, transitions: Vec<f64>, initial: Vec<f64>) -> Result<Self> {
        if n_states == 0 || n_states > MAX_STATES || n_actions == 0 || n_actions > MAX_ACTIONS {
            return Err(Error::invalid(format!(
                "tabular MDPs support 1..={MAX_STATES} states and 1..={MAX_ACTIONS} actions, got {n_states}×{n_actions}"
            )));
        }
        if transitions.len() != n_states * n_actions * n_states || initial.len() != n_states {
            return Err(Error::shape("tabular_mdp", "transition table or initial distribution has the wrong size"));
        }
        for (k, row) in transitions.chunks_exact(n_states).enumerate() {
            check_distribution(row).map_err(|why| {
                Error::invalid(format!("transition row (s={}, a={}) is not stochastic: {why}", k / n_actions, k % n_actions))
            })?;
        }
        check_distribution(&initial).map_err(|why| Error::invalid(format!("initial distribution: {why}")))?;
        Ok(Self { n_states, n_actions, transitions, initial })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transitions[(s * self.n_actions + a) * self.n_states + next]
    }

    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transitions[start..start + self.n_states]
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    fn check_policy(&self, policy: &[f64]) -> Result<()> {
        if policy.len() != self.n_states * self.n_actions {
            return Err(Error::shape("policy", format!("{} entries for {}×{}", policy.len(), self.n_states, self.n_actions)));
        }
        for (s, row) in policy.chunks_exact(self.n_actions).enumerate() {
            check_distribution(row).map_err(|why| Error::invalid(format!("policy row {s}: {why}")))?;
        }
        Ok(())
    }

    /// Exact discounted occupancy `ρ(s, a)` (row-major `[s][a]`) from the
    /// flow equations `d = (1-γ)μ₀ + γ P_πᵀ d`.
    pub fn occupancy_measure(&self, policy: &[f64], gamma: f64) -> Result<Vec<f64>> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::invalid(format!("discount {gamma} must lie in (0, 1)")));
        }
        self.check_policy(policy)?;
        let n = self.n_states;
        let mut a = DMatrix::<f64>::identity(n, n);
        for s in 0..n {
            for act in 0..self.n_actions {
                let pa = policy[s * self.n_actions + act];
                if pa == 0.0 {
                    continue;
                }
                for (next, &p) in self.row(s, act).iter().enumerate() {
                    a[(next, s)] -= gamma * pa * p;
                }
            }
        }
        let b = DVector::from_iterator(n, self.initial.iter().map(|&m| (1.0 - gamma) * m));
        let d = a.lu().solve(&b).ok_or_else(|| Error::invalid("singular flow system"))?;
        let mut rho = Vec::with_capacity(n * self.n_actions);
        for s in 0..n {
            rho.extend(policy[s * self.n_actions..(s + 1) * self.n_actions].iter().map(|&pa| d[s] * pa));
        }
        Ok(rho)
    }

    /// Monte-Carlo estimate of `ρ` and its per-cell standard error.
    ///
    /// Each sample runs the chain for a geometric number of steps
    /// (`P(t) = (1-γ)γᵗ`) and records the state-action pair reached.
    pub fn monte_carlo_occupancy<R: Rng>(&self, policy: &[f64], gamma: f64, samples: usize, rng: &mut R) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_policy(policy)?;
        if samples == 0 {
            return Err(Error::invalid("need at least one sample"));
        }
        let mut counts = vec![0usize; self.n_states * self.n_actions];
        for _ in 0..samples {
            let mut s = sample_index(&self.initial, rng);
            loop {
                let a = sample_index(&policy[s * self.n_actions..(s + 1) * self.n_actions], rng);
                if rng.random::<f64>() >= gamma {
                    counts[s * self.n_actions + a] += 1;
                    break;
                }
                s = sample_index(self.row(s, a), rng);
            }
        }
        let n = samples as f64;
        let est: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
        let se = est.iter().map(|&p| (p * (1.0 - p) / n).sqrt()).collect();
        Ok((est, se))
    }

    /// MDP over tuples of components with independent component kernels:
    /// `P(x' | x, a) = Πᵢ kernel(i, x, a)[x'ᵢ]`.
    pub fn factored(
        sizes: &[usize],
        n_actions: usize,
        initial: Vec<f64>,
        kernel: impl Fn(usize, &[usize], usize) -> Vec<f64>,
    ) -> Result<Self> {
        let n: usize = sizes.iter().product();
        let mut transitions = Vec::with_capacity(n * n_actions * n);
        for s in 0..n {
            let x = decode(s, sizes);
            for a in 0..n_actions {
                let parts: Vec<Vec<f64>> = (0..sizes.len()).map(|i| kernel(i, &x, a)).collect();
                for next in 0..n {
                    let y = decode(next, sizes);
                    transitions.push(y.iter().enumerate().map(|(i, &v)| parts[i][v]).product());
                }
            }
        }
        Self::new(n, n_actions, transitions, initial)
    }

    /// Largest conditional mutual information `I(x'ᵢ; x'ⱼ | x, a)` over all
    /// component pairs and all `(x, a)`, in nats.
    pub fn max_next_component_cmi(&self, sizes: &[usize]) -> Result<f64> {
        if sizes.iter().product::<usize>() != self.n_states {
            return Err(Error::shape("cmi", "component sizes do not factor the state space"));
        }
        let mut worst: f64 = 0.0;
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let row = self.row(s, a);
                for i in 0..sizes.len() {
                    for j in i + 1..sizes.len() {
                        let mut joint = vec![0.0; sizes[i] * sizes[j]];
                        for (next, &p) in row.iter().enumerate() {
                            let y = decode(next, sizes);
                            joint[y[i] * sizes[j] + y[j]] += p;
                        }
                        worst = worst.max(mutual_information(&joint, sizes[i], sizes[j]));
                    }
                }
            }
        }
        Ok(worst)
    }
}

fn check_distribution(row: &[f64]) -> std::result::Result<(), String> {
    if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err("negative or non-finite entry".into());
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > ROW_TOL {
        return Err(format!("sums to {total}"));
    }
    Ok(())
}

fn sample_index<R: Rng>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &w) in p.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|&w| w > 0.0).unwrap_or(p.len() - 1)
}

/// Mixed-radix decoding, first component most significant.
pub fn decode(mut s: usize, sizes: &[usize]) -> Vec<usize> {
    let mut out = vec![0; sizes.len()];
    for (k, &n) in sizes.iter().enumerate().rev() {
        out[k] = s % n;
        s /= n;
    }
    out
}

pub fn encode(x: &[usize], sizes: &[usize]) -> usize {
    x.iter().zip(sizes).fold(0, |acc, (&v, &n)| acc * n + v)
}

fn mutual_information(joint: &[f64], n: usize, m: usize) -> f64 {
    let pu: Vec<f64> = (0..n).map(|u| (0..m).map(|v| joint[u * m + v]).sum()).collect();
    let pv: Vec<f64> = (0..m).map(|v| (0..n).map(|u| joint[u * m + v]).sum()).collect();
    let mut mi = 0.0;
    for u in 0..n {
        for v in 0..m {
            let p = joint[u * m + v];
            if p > 0.0 {
                mi += p * (p / (pu[u] * pv[v])).ln();
            }
        }
    }
    mi.max(0.0)
}

/// Positions of the causal chain in [`tabular_mdp`].
pub const TABULAR_POSITIONS: usize = 4;
/// Component sizes `(position, spurious bit)` of [`tabular_mdp`].
pub const TABULAR_SIZES: [usize; 2] = [TABULAR_POSITIONS, 2];

/// Tabular member of an environment family.
///
/// The causal component is a position on a ring of four cells that the
/// action moves clockwise (1) or anticlockwise (0), succeeding with
/// probability 0.8. The spurious bit reports "position ≥ 2" with
/// probability `q = |f| / (1 + |f|)` for the environment's first factor `f`
/// (a soft intervention on the bit's mechanism) and is flipped otherwise.
pub fn tabular_mdp(spec: &EnvironmentSpec) -> Result<TabularMdp> {
    if spec.task != BaseTask::Tabular {
        return Err(Error::invalid(format!("expected a tabular spec, got {:?}", spec.task)));
    }
    if spec.action_count != 2 || spec.intervention.noise_dim() != 1 {
        return Err(Error::invalid("the tabular task has 2 actions and one spurious bit"));
    }
    let f = spec.intervention.factors()[0].abs();
    let q = f / (1.0 + f);
    let n = TABULAR_POSITIONS;
    let mut initial = vec![0.0; n * 2];
    initial[encode(&[0, 0], &TABULAR_SIZES)] = 0.5;
    initial[encode(&[0, 1], &TABULAR_SIZES)] = 0.5;
    TabularMdp::factored(&TABULAR_SIZES, 2, initial, |component, x, a| {
        let pos = x[0];
        match component {
            0 => {
                let mut p = vec![0.0; n];
                let moved = if a == 1 { (pos + 1) % n } else { (pos + n - 1) % n };
                p[moved] += 0.8;
                p[pos] += 0.2;
                p
            }
            _ => {
                let report = usize::from(pos >= n / 2);
                let mut p = vec![0.0; 2];
                p[report] = q;
                p[1 - report] = 1.0 - q;
                p
            }
        }
    })
}

/// Expert for [`tabular_mdp`]: deterministic in the position only.
pub fn tabular_expert_policy() -> Vec<f64> {
    let mut pi = Vec::with_capacity(TABULAR_POSITIONS * 2 * 2);
    for s in 0..TABULAR_POSITIONS * 2 {
        let pos = decode(s, &TABULAR_SIZES)[0];
        if pos < TABULAR_POSITIONS / 2 {
            pi.extend([0.0, 1.0]);
        } else {
            pi.extend([1.0, 0.0]);
        }
    }
    pi
}
