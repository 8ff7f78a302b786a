use crate::error::{invalid, Result};
use crate::numerics::{ParameterSet, Real};

/// Exponential moving average of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaTracker<T> {
    pub decay: f64,
    pub shadow: ParameterSet<T>,
}

impl<T: Real> EmaTracker<T> {
    pub fn new(decay: f64, initial: ParameterSet<T>) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(invalid(format!("EMA decay must lie in [0, 1], got {decay}")));
        }
        Ok(Self {
            decay,
            shadow: initial,
        })
    }

    /// `shadow ← decay·shadow + (1 − decay)·params`.
    pub fn update(&mut self, params: &ParameterSet<T>) -> Result<()> {
        self.shadow.check_structure(params)?;
        let d = T::of(self.decay);
        self.shadow.scale(d);
        self.shadow.add_scaled(params, T::one() - d)
    }
}
