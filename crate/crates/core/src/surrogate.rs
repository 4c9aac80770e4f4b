//! Pseudo-derivatives for the Heaviside spike function.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Surrogate {
    /// Box of half-width `a` and height `1 / (2a)`.
    Rectangular { width: f64 },
    /// `(1/a) / (1 + |x|/a)^2`.
    FastSigmoid { width: f64 },
}

impl Default for Surrogate {
    fn default() -> Self {
        Surrogate::Rectangular { width: 0.5 }
    }
}

impl Surrogate {
    pub fn new(kind: &str, width: f64) -> Result<Self> {
        if !(width > 0.0 && width.is_finite()) {
            return Err(Error::validation(format!("surrogate width {width} must be > 0")));
        }
        match kind {
            "rectangular" => Ok(Surrogate::Rectangular { width }),
            "fast-sigmoid" => Ok(Surrogate::FastSigmoid { width }),
            _ => Err(Error::validation(format!("unknown surrogate `{kind}`"))),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Surrogate::Rectangular { .. } => "rectangular",
            Surrogate::FastSigmoid { .. } => "fast-sigmoid",
        }
    }

    pub fn width(&self) -> f64 {
        match *self {
            Surrogate::Rectangular { width } | Surrogate::FastSigmoid { width } => width,
        }
    }

    /// Backward-pass stand-in for `d/dx Heaviside(x)`.
    pub fn grad(&self, x: f64) -> f64 {
        match *self {
            Surrogate::Rectangular { width } => {
                if x.abs() <= width {
                    1.0 / (2.0 * width)
                } else {
                    0.0
                }
            }
            Surrogate::FastSigmoid { width } => {
                let d = 1.0 + x.abs() / width;
                1.0 / (width * d * d)
            }
        }
    }

    /// Antiderivative of [`Surrogate::grad`] anchored at 0.5 for `x = 0`.
    ///
    /// Used as the smoothed forward when checking gradients against finite
    /// differences; the regular forward always emits exact Heaviside spikes.
    pub fn soft(&self, x: f64) -> f64 {
        match *self {
            Surrogate::Rectangular { width } => (0.5 + x / (2.0 * width)).clamp(0.0, 1.0),
            Surrogate::FastSigmoid { width } => 0.5 + x / (width + x.abs()),
        }
    }
}

/// `spike_backward` for a membrane offset `v - v_th`.
pub fn spike_backward(v_minus_vth: f64, surrogate: Surrogate) -> f64 {
    surrogate.grad(v_minus_vth)
}
