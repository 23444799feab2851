//! Primary-capsule activation functions.
//!
//! All three are radial: `f(s) = h(‖s‖)·s`, so they keep the direction of
//! `s` and only reshape its length. The vector-Jacobian product of such a
//! map is `h·g + (h'(r)/r)·(s·g)·s`, which is what the `*_vjp` functions
//! compute. At `s = 0` every function returns the zero vector and its
//! gradient is taken to be zero.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CI_BAR: f64 = 6.5;
pub const DEFAULT_CI_EXPONENT: f64 = 3.0;
pub const DEFAULT_PA_POWER: u32 = 6;

/// Activation applied to the sliced convolution features of the primary
/// capsule layer. Routing iterations always use [`squash`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActivationFn {
    #[default]
    OriginalSquash,
    /// Cubic growth up to `bar`, saturating at length 1 beyond it.
    /// `exponent` generalizes the cube; 3 is the standard form.
    CiSquash { bar: f64, exponent: f64 },
    /// `Power_n(squash(s))`.
    PoweredActivation { n: u32 },
}

impl ActivationFn {
    pub fn ci_squash(bar: f64) -> Result<Self> {
        Self::ci_squash_with_exponent(bar, DEFAULT_CI_EXPONENT)
    }

    pub fn ci_squash_with_exponent(bar: f64, exponent: f64) -> Result<Self> {
        let a = ActivationFn::CiSquash { bar, exponent };
        a.validate()?;
        Ok(a)
    }

    pub fn powered(n: u32) -> Result<Self> {
        let a = ActivationFn::PoweredActivation { n };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ActivationFn::OriginalSquash => Ok(()),
            ActivationFn::CiSquash { bar, exponent } => {
                if !(bar.is_finite() && bar > 0.0) {
                    return Err(Error::InvalidArgument(format!("CI-squash bar must be positive, got {bar}")));
                }
                if !(exponent.is_finite() && exponent >= 1.0) {
                    return Err(Error::InvalidArgument(format!("CI-squash exponent must be >= 1, got {exponent}")));
                }
                Ok(())
            }
            ActivationFn::PoweredActivation { n } => {
                if n == 0 {
                    return Err(Error::InvalidArgument("powered activation needs n >= 1".into()));
                }
                Ok(())
            }
        }
    }

    /// Short name used on the command line and in file names.
    pub fn short_name(&self) -> &'static str {
        match self {
            ActivationFn::OriginalSquash => "squash",
            ActivationFn::CiSquash { .. } => "ci",
            ActivationFn::PoweredActivation { .. } => "pa",
        }
    }

    pub fn apply(&self, s: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; s.len()];
        self.apply_into(s, &mut out);
        out
    }

    pub fn apply_into(&self, s: &[f64], out: &mut [f64]) {
        match *self {
            ActivationFn::OriginalSquash => squash_into(s, out),
            ActivationFn::CiSquash { bar, exponent } => ci_squash_into(s, bar, exponent, out),
            ActivationFn::PoweredActivation { n } => {
                squash_into(s, out);
                let r = norm(out);
                let h = power_gain(r, n);
                out.iter_mut().for_each(|v| *v *= h);
            }
        }
    }

    /// Gradient wrt `s` given the upstream gradient `g` of the output.
    pub fn vjp(&self, s: &[f64], g: &[f64], grad_in: &mut [f64]) {
        match *self {
            ActivationFn::OriginalSquash => squash_vjp(s, g, grad_in),
            ActivationFn::CiSquash { bar, exponent } => ci_squash_vjp(s, bar, exponent, g, grad_in),
            ActivationFn::PoweredActivation { n } => {
                let u = squash(s);
                let mut gu = vec![0.0; s.len()];
                power_vjp(&u, n, g, &mut gu);
                squash_vjp(s, &gu, grad_in);
            }
        }
    }

    /// Output length as a function of the input length.
    pub fn output_norm(&self, r: f64) -> f64 {
        match *self {
            ActivationFn::OriginalSquash => squash_norm(r),
            ActivationFn::CiSquash { bar, exponent } => (r / bar).min(1.0).powf(exponent),
            ActivationFn::PoweredActivation { n } => squash_norm(r).powi(n as i32),
        }
    }
}

impl fmt::Display for ActivationFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActivationFn::OriginalSquash => write!(f, "squash"),
            ActivationFn::CiSquash { bar, exponent } if *exponent == DEFAULT_CI_EXPONENT => write!(f, "ci(bar={bar})"),
            ActivationFn::CiSquash { bar, exponent } => write!(f, "ci(bar={bar},p={exponent})"),
            ActivationFn::PoweredActivation { n } => write!(f, "pa(n={n})"),
        }
    }
}

/// Parses `squash`, `ci`, `pa` with default hyperparameters.
impl FromStr for ActivationFn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "squash" | "original" | "original_squash" => Ok(ActivationFn::OriginalSquash),
            "ci" | "ci_squash" | "ci-squash" => ActivationFn::ci_squash(DEFAULT_CI_BAR),
            "pa" | "powered" | "powered_activation" => ActivationFn::powered(DEFAULT_PA_POWER),
            other => Err(Error::InvalidArgument(format!(
                "unknown activation '{other}' (expected squash, ci or pa)"
            ))),
        }
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `‖s‖² / (1 + ‖s‖²)`.
pub fn squash_norm(r: f64) -> f64 {
    let r2 = r * r;
    r2 / (1.0 + r2)
}

pub fn squash(s: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; s.len()];
    squash_into(s, &mut out);
    out
}

pub fn squash_into(s: &[f64], out: &mut [f64]) {
    let r = norm(s);
    let h = r / (1.0 + r * r);
    s.iter().zip(out.iter_mut()).for_each(|(x, o)| *o = h * x);
}

pub fn squash_vjp(s: &[f64], g: &[f64], grad_in: &mut [f64]) {
    let r = norm(s);
    if r == 0.0 {
        grad_in.fill(0.0);
        return;
    }
    let d = 1.0 + r * r;
    let h = r / d;
    let k = (1.0 - r * r) / (d * d) / r;
    radial_vjp(s, g, h, k, grad_in);
}

pub fn ci_squash(s: &[f64], bar: f64) -> Vec<f64> {
    let mut out = vec![0.0; s.len()];
    ci_squash_into(s, bar, DEFAULT_CI_EXPONENT, &mut out);
    out
}

pub fn ci_squash_into(s: &[f64], bar: f64, exponent: f64, out: &mut [f64]) {
    let r = norm(s);
    let h = if r == 0.0 {
        0.0
    } else if r < bar {
        (r / bar).powf(exponent) / r
    } else {
        1.0 / r
    };
    s.iter().zip(out.iter_mut()).for_each(|(x, o)| *o = h * x);
}

pub fn ci_squash_vjp(s: &[f64], bar: f64, exponent: f64, g: &[f64], grad_in: &mut [f64]) {
    let r = norm(s);
    if r == 0.0 {
        grad_in.fill(0.0);
        return;
    }
    let (h, k) = if r < bar {
        let h = (r / bar).powf(exponent) / r;
        (h, (exponent - 1.0) * h / (r * r))
    } else {
        (1.0 / r, -1.0 / (r * r * r))
    };
    radial_vjp(s, g, h, k, grad_in);
}

fn power_gain(r: f64, n: u32) -> f64 {
    if n == 1 {
        1.0
    } else {
        r.powi(n as i32 - 1)
    }
}

/// `Power_n(x) = ‖x‖ⁿ · x/‖x‖`.
pub fn powered_activation(u: &[f64], n: u32) -> Vec<f64> {
    let h = power_gain(norm(u), n);
    u.iter().map(|x| h * x).collect()
}

pub fn power_vjp(u: &[f64], n: u32, g: &[f64], grad_in: &mut [f64]) {
    let r = norm(u);
    if n == 1 {
        grad_in.copy_from_slice(g);
        return;
    }
    if r == 0.0 {
        grad_in.fill(0.0);
        return;
    }
    let h = r.powi(n as i32 - 1);
    let k = f64::from(n - 1) * h / (r * r);
    radial_vjp(u, g, h, k, grad_in);
}

/// `grad_in = h·g + k·(s·g)·s` where `k = h'(r)/r`.
fn radial_vjp(s: &[f64], g: &[f64], h: f64, k: f64, grad_in: &mut [f64]) {
    let sg = dot(s, g);
    for ((o, &gi), &si) in grad_in.iter_mut().zip(g).zip(s) {
        *o = h * gi + k * sg * si;
    }
}
