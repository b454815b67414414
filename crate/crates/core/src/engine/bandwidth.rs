use crate::error::EngineError;

/// Available bus bandwidth as a function of simulated time.
///
/// Rates are piecewise constant; `next_change_after` lets the simulator step
/// exactly from one rate change to the next instead of sampling.
pub trait Bandwidth {
    /// Bytes per second at time `t_ms`.
    fn rate_at(&self, t_ms: f64) -> f64;
    /// Earliest time strictly after `t_ms` at which the rate changes.
    fn next_change_after(&self, t_ms: f64) -> Option<f64>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Constant(f64);

impl Constant {
    pub fn new(bytes_per_s: f64) -> Result<Self, EngineError> {
        if bytes_per_s.is_finite() && bytes_per_s > 0.0 {
            Ok(Constant(bytes_per_s))
        } else {
            Err(EngineError::Bandwidth(bytes_per_s))
        }
    }

    pub fn bytes_per_s(&self) -> f64 {
        self.0
    }
}

impl Bandwidth for Constant {
    fn rate_at(&self, _t_ms: f64) -> f64 {
        self.0
    }

    fn next_change_after(&self, _t_ms: f64) -> Option<f64> {
        None
    }
}

/// Step function: `steps[k] = (from_ms, bytes_per_s)`, the first starting at 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Piecewise {
    steps: Vec<(f64, f64)>,
}

impl Piecewise {
    pub fn new(steps: Vec<(f64, f64)>) -> Result<Self, EngineError> {
        let valid_start = steps.first().is_some_and(|s| s.0 == 0.0);
        let increasing = steps.windows(2).all(|w| w[0].0 < w[1].0);
        if !valid_start || !increasing {
            return Err(EngineError::InvalidPlan(
                "bandwidth steps must start at 0 ms and strictly increase".into(),
            ));
        }
        if let Some(&(_, r)) = steps.iter().find(|s| !(s.1.is_finite() && s.1 > 0.0)) {
            return Err(EngineError::Bandwidth(r));
        }
        Ok(Piecewise { steps })
    }
}

impl Bandwidth for Piecewise {
    fn rate_at(&self, t_ms: f64) -> f64 {
        let k = self.steps.partition_point(|s| s.0 <= t_ms);
        self.steps[k.saturating_sub(1)].1
    }

    fn next_change_after(&self, t_ms: f64) -> Option<f64> {
        let k = self.steps.partition_point(|s| s.0 <= t_ms);
        self.steps.get(k).map(|s| s.0)
    }
}
