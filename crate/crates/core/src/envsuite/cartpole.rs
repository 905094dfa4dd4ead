//! CartPole-v1 physics (Euler integration, 500-step episodes).

use rand::Rng;

pub const GRAVITY: f64 = 9.8;
pub const CART_MASS: f64 = 1.0;
pub const POLE_MASS: f64 = 0.1;
pub const TOTAL_MASS: f64 = CART_MASS + POLE_MASS;
pub const HALF_LENGTH: f64 = 0.5;
pub const POLE_MASS_LENGTH: f64 = POLE_MASS * HALF_LENGTH;
pub const FORCE: f64 = 10.0;
pub const DT: f64 = 0.02;
pub const ANGLE_LIMIT: f64 = 12.0 * 2.0 * std::f64::consts::PI / 360.0;
pub const POSITION_LIMIT: f64 = 2.4;
pub const MAX_STEPS: usize = 500;
pub const STATE_DIM: usize = 4;
pub const ACTIONS: usize = 2;

/// `[cart position, cart velocity, pole angle, pole angular velocity]`.
pub type State = [f64; STATE_DIM];

/// One physics step; the flag is true when the pole fell or the cart left the track.
pub fn cartpole_step(state: &State, action: usize) -> (State, bool) {
    let [x, x_dot, theta, theta_dot] = *state;
    let force = if action == 1 { FORCE } else { -FORCE };
    let (sin, cos) = theta.sin_cos();
    let temp = (force + POLE_MASS_LENGTH * theta_dot * theta_dot * sin) / TOTAL_MASS;
    let theta_acc = (GRAVITY * sin - cos * temp) / (HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos * cos / TOTAL_MASS));
    let x_acc = temp - POLE_MASS_LENGTH * theta_acc * cos / TOTAL_MASS;
    let next = [x + DT * x_dot, x_dot + DT * x_acc, theta + DT * theta_dot, theta_dot + DT * theta_acc];
    let failed = next[0] < -POSITION_LIMIT || next[0] > POSITION_LIMIT || next[2] < -ANGLE_LIMIT || next[2] > ANGLE_LIMIT;
    (next, failed)
}

pub fn initial_state<R: Rng>(rng: &mut R) -> State {
    std::array::from_fn(|_| rng.random_range(-0.05..0.05))
}

/// Episode wrapper adding the step limit.
#[derive(Clone, Debug)]
pub struct CartPole {
    pub state: State,
    pub steps: usize,
}

/// Outcome of [`CartPole::step`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub next: State,
    /// Pole fell or cart left the track.
    pub terminated: bool,
    /// Step limit reached without failure.
    pub truncated: bool,
}

impl CartPole {
    pub fn reset<R: Rng>(rng: &mut R) -> Self {
        Self { state: initial_state(rng), steps: 0 }
    }

    pub fn step(&mut self, action: usize) -> StepOutcome {
        let (next, terminated) = cartpole_step(&self.state, action);
        self.state = next;
        self.steps += 1;
        StepOutcome { next, terminated, truncated: !terminated && self.steps >= MAX_STEPS }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn push_right_from_rest() {
        let (next, done) = cartpole_step(&[0.0; 4], 1);
        assert!(next[1] > 0.0);
        assert!(next[3] < 0.0);
        assert!(!done);
    }

    #[test]
    fn terminates_past_angle_limit() {
        let (_, done) = cartpole_step(&[0.0, 0.0, 0.25, 0.0], 0);
        assert!(done);
        let (_, done) = cartpole_step(&[2.39, 1.0, 0.0, 0.0], 1);
        assert!(done);
    }

    proptest! {
        #[test]
        fn reflection_symmetry(s in proptest::array::uniform4(-1.0f64..1.0), a in 0usize..2) {
            let (n1, d1) = cartpole_step(&s, a);
            let neg = s.map(|v| -v);
            let (n2, d2) = cartpole_step(&neg, 1 - a);
            prop_assert_eq!(d1, d2);
            for k in 0..4 {
                prop_assert!((n1[k] + n2[k]).abs() < 1e-12);
            }
        }
    }
}
