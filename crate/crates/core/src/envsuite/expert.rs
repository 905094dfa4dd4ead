use super::cartpole::State;

/// A demonstrator that sees only the base (causal) state.
pub trait Expert {
    fn act(&self, base: &[f64]) -> usize;
}

/// Linear feedback controller for CartPole.
///
/// Pushes right when `k·(angle, angular velocity, position, velocity) ≥ 0`;
/// a zero control signal therefore selects action 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScriptedExpert {
    pub gains: [f64; 4],
}

impl Default for ScriptedExpert {
    fn default() -> Self {
        Self { gains: [1.0, 0.5, 0.1, 0.2] }
    }
}

impl ScriptedExpert {
    pub fn control(&self, s: &State) -> f64 {
        let [x, x_dot, theta, theta_dot] = *s;
        let k = self.gains;
        k[0] * theta + k[1] * theta_dot + k[2] * x + k[3] * x_dot
    }
}

impl Expert for ScriptedExpert {
    fn act(&self, base: &[f64]) -> usize {
        let s: State = base[..4].try_into().expect("CartPole base state has 4 coordinates");
        usize::from(self.control(&s) >= 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upright_at_rest_breaks_tie_right() {
        assert_eq!(ScriptedExpert::default().act(&[0.0; 4]), 1);
    }

    #[test]
    fn falling_right_pushes_right() {
        let e = ScriptedExpert::default();
        assert_eq!(e.act(&[0.0, 0.0, 0.05, 0.1]), 1);
        assert_eq!(e.act(&[0.0, 0.0, -0.05, -0.1]), 0);
    }
}
