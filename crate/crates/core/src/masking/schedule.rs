use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const DEFAULT_EXP_LAMBDA: f64 = 6.0;

/// Masking schedule `γ(r)`: fraction of tokens masked at normalized time `r`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Schedule {
    /// `√(1 − r²)`
    Circle,
    /// `cos(πr/2)`
    Cosine,
    /// `(1 − e^{−λ(1−r)}) / (1 − e^{−λ})`: reveals few tokens early and
    /// accelerates toward the end.
    Exponential { lambda: f64 },
}

impl Schedule {
    pub fn gamma(&self, r: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::invalid(format!("schedule time {r} outside [0, 1]")));
        }
        // pin the boundaries so ⌈γ·L·D⌉ hits L·D and 0 exactly
        if r == 0.0 {
            return Ok(1.0);
        }
        if r == 1.0 {
            return Ok(0.0);
        }
        Ok(match *self {
            Schedule::Circle => (1.0 - r * r).sqrt(),
            Schedule::Cosine => (FRAC_PI_2 * r).cos(),
            Schedule::Exponential { lambda } => {
                (-(-lambda * (1.0 - r)).exp_m1()) / (-(-lambda).exp_m1())
            }
        })
    }

    /// `⌈γ(r)·L·D⌉` clamped to `[0, L·D]`.
    pub fn mask_count(&self, r: f64, len: usize, depth: usize) -> Result<usize> {
        let total = len * depth;
        let raw = self.gamma(r)? * total as f64;
        // absorb representation error so exact products are not pushed up by one
        let n = (raw - 1e-9).ceil().max(0.0) as usize;
        Ok(n.min(total))
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Schedule::Circle => write!(f, "circle"),
            Schedule::Cosine => write!(f, "cosine"),
            Schedule::Exponential { lambda } => write!(f, "exp:{lambda}"),
        }
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "circle" => Ok(Schedule::Circle),
            "cosine" => Ok(Schedule::Cosine),
            "exp" => Ok(Schedule::Exponential {
                lambda: DEFAULT_EXP_LAMBDA,
            }),
            _ => {
                let lambda = s
                    .strip_prefix("exp:")
                    .and_then(|l| l.parse::<f64>().ok())
                    .filter(|l| l.is_finite() && *l > 0.0)
                    .ok_or_else(|| Error::invalid(format!("unknown schedule `{s}`")))?;
                Ok(Schedule::Exponential { lambda })
            }
        }
    }
}
