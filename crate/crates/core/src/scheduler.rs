//! Temperature schedules mapping a training chunk to the progressive
//! quantizer's `t`.

use serde::{Deserialize, Serialize};

use crate::error::{domain_err, Result};

pub const DEFAULT_T_MIN: f64 = 0.05;
pub const DEFAULT_T_MAX: f64 = 1000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Uniform,
    Logarithm,
    #[default]
    Exponential,
    DegreeUniform,
}

impl std::str::FromStr for Family {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Family::Uniform),
            "logarithm" => Ok(Family::Logarithm),
            "exponential" => Ok(Family::Exponential),
            "degree_uniform" => Ok(Family::DegreeUniform),
            other => Err(crate::error::Error::Config(format!(
                "unknown scheduler family `{other}`"
            ))),
        }
    }
}

/// `1.3·e^{0.22c} − 1.3`, before any clamping.
pub fn exponential_raw(c: f64) -> f64 {
    1.3 * (0.22 * c).exp() - 1.3
}

/// Slope of the progressive function at the origin, `t / tanh(t)`.
fn slope_at_origin(t: f64) -> f64 {
    if t < 1e-6 {
        1.0 + t * t / 3.0
    } else {
        t / t.tanh()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scheduler {
    pub family: Family,
    pub total_chunks: usize,
    pub t_min: f64,
    pub t_max: f64,
}

impl Scheduler {
    pub fn new(family: Family, total_chunks: usize) -> Result<Self> {
        Self::with_bounds(family, total_chunks, DEFAULT_T_MIN, DEFAULT_T_MAX)
    }

    pub fn with_bounds(
        family: Family,
        total_chunks: usize,
        t_min: f64,
        t_max: f64,
    ) -> Result<Self> {
        if total_chunks == 0 {
            return Err(domain_err!("scheduler needs at least one chunk"));
        }
        if !(t_min > 0.0 && t_max >= t_min && t_max.is_finite()) {
            return Err(domain_err!("invalid temperature bounds [{t_min}, {t_max}]"));
        }
        Ok(Self {
            family,
            total_chunks,
            t_min,
            t_max,
        })
    }

    /// Shared end point of every family: the exponential curve at the last chunk boundary.
    pub fn t_end(&self) -> f64 {
        exponential_raw(self.total_chunks as f64).clamp(self.t_min, self.t_max)
    }

    /// Temperature for chunk `c ∈ [0, total_chunks]`.
    pub fn temperature(&self, c: usize) -> Result<f64> {
        if c > self.total_chunks {
            return Err(domain_err!("chunk {c} outside [0, {}]", self.total_chunks));
        }
        let cf = c as f64;
        let total = self.total_chunks as f64;
        let end = self.t_end();
        let raw = match self.family {
            Family::Exponential => exponential_raw(cf),
            Family::Uniform => self.t_min + (end - self.t_min) * cf / total,
            Family::Logarithm => end * (1.0 + cf).ln() / (1.0 + total).ln(),
            Family::DegreeUniform => {
                let a0 = slope_at_origin(self.t_min).atan();
                let a1 = slope_at_origin(end).atan();
                let target = (a0 + (a1 - a0) * cf / total).tan();
                invert_slope(target, self.t_min, end)
            }
        };
        Ok(raw.clamp(self.t_min, self.t_max))
    }

    /// `(chunk, t)` for every trained chunk `0..total_chunks`.
    pub fn table(&self) -> Vec<(usize, f64)> {
        (0..self.total_chunks)
            .map(|c| (c, self.temperature(c).expect("chunk in range")))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("chunk,t\n");
        for (c, t) in self.table() {
            s.push_str(&format!("{c},{t}\n"));
        }
        s
    }
}

/// Solves `t / tanh(t) = target` for `t ∈ [lo, hi]` by bisection.
fn invert_slope(target: f64, lo: f64, hi: f64) -> f64 {
    let (mut a, mut b) = (lo, hi);
    if target <= slope_at_origin(a) {
        return a;
    }
    if target >= slope_at_origin(b) {
        return b;
    }
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if slope_at_origin(m) < target {
            a = m;
        } else {
            b = m;
        }
        if b - a <= 1e-14 * b {
            break;
        }
    }
    0.5 * (a + b)
}
