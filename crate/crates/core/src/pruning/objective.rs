use crate::error::{Error, Result};
use crate::numerics::Var;

/// Bound on `|λ₁|`.
pub const LAMBDA1_BOUND: f64 = 100.0;
/// Upper bound on `λ₂`.
pub const LAMBDA2_MAX: f64 = 100.0;

/// Multipliers of the sparsity penalty `λ₁(ŝ−t) + λ₂(ŝ−t)²`.
#[derive(Clone, Debug, PartialEq)]
pub struct LagrangeState {
    pub lambda1: f64,
    pub lambda2: f64,
    pub target: f64,
}

impl LagrangeState {
    pub fn new(target: f64) -> Result<Self> {
        check_target(target)?;
        Ok(Self {
            lambda1: 0.0,
            lambda2: 0.0,
            target,
        })
    }

    /// One ascent step on both multipliers. `λ₁` may go negative so that
    /// an overshooting `ŝ` is pulled back; `λ₂` only grows.
    pub fn ascend(&mut self, s_hat: f64, lr: f64) {
        let gap = s_hat - self.target;
        self.lambda1 = (self.lambda1 + lr * gap).clamp(-LAMBDA1_BOUND, LAMBDA1_BOUND);
        self.lambda2 = (self.lambda2 + lr * gap * gap).clamp(0.0, LAMBDA2_MAX);
    }
}

pub(crate) fn check_target(t: f64) -> Result<()> {
    if !(0.0..1.0).contains(&t) {
        return Err(Error::Contract(format!("target sparsity {t} outside [0, 1)")));
    }
    Ok(())
}

pub fn pruning_loss(s_hat: f64, state: &LagrangeState) -> f64 {
    let gap = s_hat - state.target;
    state.lambda1 * gap + state.lambda2 * gap * gap
}

/// [`pruning_loss`] recorded on the tape of `s_hat`.
pub fn pruning_loss_var<'t>(s_hat: Var<'t>, state: &LagrangeState) -> Var<'t> {
    let gap = s_hat - s_hat.tape().scalar(state.target);
    gap.scale(state.lambda1) + gap.powi(2).scale(state.lambda2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    #[test]
    fn loss_arithmetic() {
        let s = LagrangeState {
            lambda1: 1.0,
            lambda2: 10.0,
            target: 0.4,
        };
        assert_eq!(pruning_loss(0.4, &s), 0.0);
        assert!((pruning_loss(0.5, &s) - 0.2).abs() < 1e-12);
        let tape = Tape::new();
        assert!((pruning_loss_var(tape.scalar(0.5), &s).item() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn multipliers_move_and_clip() {
        let mut s = LagrangeState::new(0.5).unwrap();
        s.ascend(0.3, 0.1);
        assert!(s.lambda1 < 0.0 && s.lambda2 > 0.0);
        for _ in 0..100_000 {
            s.ascend(1.0, 0.1);
        }
        assert_eq!((s.lambda1, s.lambda2), (LAMBDA1_BOUND, LAMBDA2_MAX));
    }

    #[test]
    fn infeasible_targets() {
        assert!(matches!(LagrangeState::new(1.0), Err(Error::Contract(_))));
        assert!(matches!(LagrangeState::new(-0.1), Err(Error::Contract(_))));
        assert!(LagrangeState::new(0.0).is_ok());
    }
}
