use serde::{Deserialize, Serialize};

/// Binary action, embedded as the real coordinate `-1.0` or `+1.0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    Neg,
    Pos,
}

impl Action {
    pub const ALL: [Action; 2] = [Action::Neg, Action::Pos];

    #[inline]
    pub fn value(self) -> f64 {
        match self {
            Action::Neg => -1.0,
            Action::Pos => 1.0,
        }
    }

    pub fn as_i8(self) -> i8 {
        match self {
            Action::Neg => -1,
            Action::Pos => 1,
        }
    }

    pub fn from_i64(v: i64) -> Option<Action> {
        match v {
            -1 => Some(Action::Neg),
            1 => Some(Action::Pos),
            _ => None,
        }
    }

    /// `sign(x)` with `sign(0) = +1`.
    #[inline]
    pub fn sign_of(x: f64) -> Action {
        if x < 0.0 {
            Action::Neg
        } else {
            Action::Pos
        }
    }

    pub fn flip(self) -> Action {
        match self {
            Action::Neg => Action::Pos,
            Action::Pos => Action::Neg,
        }
    }
}

/// A (possibly time-dependent) stochastic policy over the binary action set
/// that conditions on the observed state only.
///
/// `t` is the 1-based decision time.
pub trait Policy: Sync {
    fn prob(&self, t: usize, state: &[f64], action: Action) -> f64;

    fn actions(&self) -> &[Action] {
        &Action::ALL
    }
}

/// Uniform over both actions.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformPolicy;

impl Policy for UniformPolicy {
    fn prob(&self, _t: usize, _state: &[f64], _action: Action) -> f64 {
        0.5
    }
}

/// Always plays the same action.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPolicy(pub Action);

impl Policy for ConstantPolicy {
    fn prob(&self, _t: usize, _state: &[f64], action: Action) -> f64 {
        if action == self.0 {
            1.0
        } else {
            0.0
        }
    }
}

/// `1 - eps + eps/2` on the greedy action, `eps/2` on the other.
pub fn epsilon_greedy_prob(greedy: Action, epsilon: f64, action: Action) -> f64 {
    if action == greedy {
        1.0 - epsilon + 0.5 * epsilon
    } else {
        0.5 * epsilon
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_convention() {
        assert_eq!(Action::sign_of(0.0), Action::Pos);
        assert_eq!(Action::sign_of(-1e-300), Action::Neg);
        assert_eq!(Action::sign_of(2.0), Action::Pos);
    }

    #[test]
    fn epsilon_greedy_mass() {
        assert!((epsilon_greedy_prob(Action::Pos, 0.2, Action::Pos) - 0.9).abs() < 1e-15);
        assert!((epsilon_greedy_prob(Action::Pos, 0.2, Action::Neg) - 0.1).abs() < 1e-15);
        for eps in [0.0, 0.3, 1.0] {
            let s: f64 = Action::ALL
                .iter()
                .map(|&a| epsilon_greedy_prob(Action::Neg, eps, a))
                .sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
