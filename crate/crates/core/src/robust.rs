//! Huber capping of squared quantities.
//!
//! Squares `v^2` are replaced by `rho(v^2)` with
//! `rho(s) = s` for `s <= delta^2` and `2 delta sqrt(s) - delta^2` above it,
//! i.e. the Huber cost scaled so that it agrees with the square in the core.

/// How the Huber threshold is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HuberConfig {
    Fixed { delta: f64 },
    /// `delta = max(factor * median |v|, floor)` over the capped values.
    Adaptive { factor: f64, floor: f64 },
}

impl Default for HuberConfig {
    fn default() -> Self {
        Self::Adaptive { factor: 2.0, floor: 1.0 }
    }
}

impl HuberConfig {
    /// Threshold for a batch of values. The threshold is treated as a
    /// constant by every gradient in the crate.
    pub fn delta_for(&self, values: &[f64]) -> f64 {
        match *self {
            Self::Fixed { delta } => delta,
            Self::Adaptive { factor, floor } => (factor * median_abs(values)).max(floor),
        }
    }
}

pub fn median_abs(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v: Vec<f64> = values.iter().map(|x| x.abs()).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `rho(v^2)` and its derivative with respect to `v`.
#[inline]
pub fn capped_square(v: f64, delta: f64) -> (f64, f64) {
    let a = v.abs();
    if a <= delta {
        (v * v, 2.0 * v)
    } else {
        (2.0 * delta * a - delta * delta, 2.0 * delta * v.signum())
    }
}

/// IRLS multiplier `psi(e) / e` of the Huber cost.
#[inline]
pub fn irls_weight(e: f64, delta: f64) -> f64 {
    let a = e.abs();
    if a <= delta {
        1.0
    } else {
        delta / a
    }
}

/// Huber cost with the same scaling as `0.5 e^2` in the core.
#[inline]
pub fn huber_cost(e: f64, delta: f64) -> f64 {
    0.5 * capped_square(e, delta).0
}

/// Squares of `values`, optionally Huber capped, with their derivatives.
pub fn squares(values: &[f64], huber: Option<&HuberConfig>) -> (Vec<f64>, Vec<f64>) {
    match huber {
        None => (values.iter().map(|v| v * v).collect(), values.iter().map(|v| 2.0 * v).collect()),
        Some(cfg) => {
            let delta = cfg.delta_for(values);
            values.iter().map(|&v| capped_square(v, delta)).unzip()
        }
    }
}
