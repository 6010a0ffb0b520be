//! Discrete PID control of the multiplicative loss weight `w(t)` that steers
//! the mean intervention bias norm toward a target magnitude.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    pub alpha_smooth: f64,
    pub w_min: f64,
    pub w_max: f64,
    pub b_target: f64,
    /// Starting loss weight.
    pub w_init: f64,
}

impl Default for PidGains {
    fn default() -> Self {
        Self {
            kp: 1e-1,
            ki: 1e-4,
            kd: 1e-2,
            alpha_smooth: 5.0,
            w_min: 1e-5,
            w_max: 1e-1,
            b_target: 1.0,
            w_init: 1e-2,
        }
    }
}

impl PidGains {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_min > 0.0
            && self.w_min <= self.w_init
            && self.w_init <= self.w_max
            && self.b_target > 0.0)
        {
            return Err(Error::Config(format!(
                "invalid PID gains: need 0 < w_min <= w_init <= w_max and b_target > 0, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn initial_weight(&self) -> f64 {
        self.w_init
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidState {
    pub w: f64,
    pub integral: f64,
    /// `None` until the first error is observed.
    pub prev_error: Option<f64>,
    pub step: u64,
}

impl PidState {
    pub fn new(w: f64) -> Self {
        Self {
            w,
            integral: 0.0,
            prev_error: None,
            step: 0,
        }
    }
}

pub fn pid_error(b_current: f64, gains: &PidGains) -> f64 {
    gains.b_target - b_current
}

/// One controller step with `Δt = 1`: rectangle-rule integral, backward
/// difference derivative. The first observed error seeds `prev_error`, so
/// the derivative term starts at zero.
pub fn pid_step(state: &PidState, e: f64, gains: &PidGains) -> Result<(f64, PidState)> {
    if !e.is_finite() {
        return Err(Error::Numeric {
            what: format!("PID error {e}"),
            layer: None,
        });
    }
    let integral = state.integral + e;
    let derivative = e - state.prev_error.unwrap_or(e);
    let dw = gains.kp * e + gains.ki * integral + gains.kd * derivative;
    let next = PidState {
        w: state.w,
        integral,
        prev_error: Some(e),
        step: state.step + 1,
    };
    Ok((dw, next))
}

/// `clip(w · (1 + α Δw), w_min, w_max)`.
pub fn update_weight(w: f64, dw: f64, gains: &PidGains) -> f64 {
    (w * (1.0 + gains.alpha_smooth * dw)).clamp(gains.w_min, gains.w_max)
}

pub fn total_loss(w: f64, loss_ce: f64) -> f64 {
    w * loss_ce
}

/// One logged controller step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidTrace {
    pub bias_norm: f64,
    pub error: f64,
    pub dw: f64,
    pub w_next: f64,
}

/// Stateful wrapper used by the training loop.
#[derive(Debug, Clone)]
pub struct PidController {
    pub gains: PidGains,
    pub state: PidState,
}

impl PidController {
    pub fn new(gains: PidGains) -> Result<Self> {
        gains.validate()?;
        Ok(Self {
            state: PidState::new(gains.initial_weight()),
            gains,
        })
    }

    pub fn weight(&self) -> f64 {
        self.state.w
    }

    /// Feeds the current bias norm and advances `w`.
    pub fn observe(&mut self, bias_norm: f64) -> Result<PidTrace> {
        let e = pid_error(bias_norm, &self.gains);
        let (dw, mut next) = pid_step(&self.state, e, &self.gains)?;
        next.w = update_weight(self.state.w, dw, &self.gains);
        self.state = next;
        Ok(PidTrace {
            bias_norm,
            error: e,
            dw,
            w_next: next.w,
        })
    }
}

/// Recomputes `w(t)` from a logged error sequence, starting at `w0`.
pub fn replay(errors: &[f64], w0: f64, gains: &PidGains) -> Result<Vec<f64>> {
    let mut state = PidState::new(w0);
    let mut out = Vec::with_capacity(errors.len());
    for &e in errors {
        let (dw, mut next) = pid_step(&state, e, gains)?;
        next.w = update_weight(state.w, dw, gains);
        out.push(next.w);
        state = next;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn error_examples() {
        let g = PidGains::default();
        assert_eq!(pid_error(1.0, &g), 0.0);
        assert_eq!(pid_error(0.5, &g), 0.5);
        let qwen = PidGains {
            b_target: 1.5,
            ..g
        };
        assert_eq!(pid_error(0.25, &qwen), 1.25);
    }

    #[test]
    fn step_examples() {
        let g = PidGains::default();
        let (dw, s) = pid_step(&PidState::new(0.01), 0.0, &g).unwrap();
        assert_eq!(dw, 0.0);
        assert_eq!(s.step, 1);

        let (dw, s) = pid_step(&PidState::new(0.01), 0.5, &g).unwrap();
        assert!((dw - 0.05005).abs() < 1e-12);
        assert_eq!(s.prev_error, Some(0.5));
        assert_eq!(s.integral, 0.5);

        assert!(pid_step(&PidState::new(0.01), f64::NAN, &g).is_err());
    }

    #[test]
    fn constant_error_accumulates_linearly() {
        let g = PidGains::default();
        let c = 0.3;
        let mut s = PidState::new(0.01);
        for t in 1..=500u32 {
            let (dw, next) = pid_step(&s, c, &g).unwrap();
            let integral = c * t as f64;
            assert!((next.integral - integral).abs() < 1e-9);
            // derivative term is zero from the first step on
            assert!((dw - (g.kp * c + g.ki * integral)).abs() < 1e-12);
            s = next;
        }
    }

    #[test]
    fn weight_update_examples() {
        let g = PidGains::default();
        assert_eq!(update_weight(0.02, 0.0, &g), 0.02);
        assert!((update_weight(0.01, 0.05005, &g) - 0.0125025).abs() < 1e-12);
        assert_eq!(update_weight(1e-4, -0.2, &g), 1e-5);
        assert_eq!(update_weight(0.09, 1.0, &g), 0.1);
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(0.05, 0.0), 0.0);
        assert!((total_loss(0.1, 2.0) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn initial_weight_default() {
        assert_eq!(PidGains::default().initial_weight(), 1e-2);
        let bad = PidGains {
            w_init: 0.5,
            ..PidGains::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn invalid_gains_rejected() {
        let g = PidGains {
            w_min: 0.0,
            ..PidGains::default()
        };
        assert!(g.validate().is_err());
    }

    proptest! {
        #[test]
        fn weight_stays_bounded(errors in proptest::collection::vec(-5.0f64..5.0, 1..300)) {
            let g = PidGains::default();
            let ws = replay(&errors, g.initial_weight(), &g).unwrap();
            for w in ws {
                prop_assert!(w >= g.w_min && w <= g.w_max);
            }
        }

        #[test]
        fn sign_follows_error_from_rest(e in 1e-6f64..10.0) {
            let g = PidGains::default();
            let (up, _) = pid_step(&PidState::new(0.01), e, &g).unwrap();
            let (down, _) = pid_step(&PidState::new(0.01), -e, &g).unwrap();
            prop_assert!(up > 0.0 && down < 0.0);
        }

        #[test]
        fn integral_finite_for_bounded_errors(errors in proptest::collection::vec(-1e3f64..1e3, 1..2000)) {
            let g = PidGains::default();
            let mut s = PidState::new(0.01);
            for e in errors {
                s = pid_step(&s, e, &g).unwrap().1;
            }
            prop_assert!(s.integral.is_finite());
        }
    }
}
