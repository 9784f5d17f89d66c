//! Boxed kernels.
//!
//! A boxed kernel maps `R^p` into `[0, 1]`, vanishes outside the unit
//! sup-norm ball and does not increase with `‖v‖_∞`. Multivariate values are
//! obtained by applying a univariate profile to the sup-norm radius.

use serde::{Deserialize, Serialize};

use crate::error::{domain_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    /// `exp(-1 / (1 - r^2))` on `r < 1`.
    #[default]
    Bump,
    /// `1 - r`.
    Triangle,
    /// `1 - r^2`, scaled so the peak is 1.
    Epanechnikov,
}

impl KernelFamily {
    /// Profile value at radius `r >= 0`.
    #[inline]
    pub fn profile(self, r: f64) -> f64 {
        if r >= 1.0 {
            return 0.0;
        }
        match self {
            KernelFamily::Bump => (-1.0 / (1.0 - r * r)).exp(),
            KernelFamily::Triangle => 1.0 - r,
            KernelFamily::Epanechnikov => 1.0 - r * r,
        }
    }

    /// Natural log of the profile; `-inf` outside the support.
    #[inline]
    pub fn log_profile(self, r: f64) -> f64 {
        if r >= 1.0 {
            return f64::NEG_INFINITY;
        }
        match self {
            KernelFamily::Bump => -1.0 / (1.0 - r * r),
            KernelFamily::Triangle => (1.0 - r).ln(),
            KernelFamily::Epanechnikov => (1.0 - r * r).ln(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KernelFamily::Bump => "bump",
            KernelFamily::Triangle => "triangle",
            KernelFamily::Epanechnikov => "epanechnikov",
        }
    }
}

impl std::str::FromStr for KernelFamily {
    type Err = crate::error::KmpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bump" => Ok(KernelFamily::Bump),
            "triangle" => Ok(KernelFamily::Triangle),
            "epanechnikov" => Ok(KernelFamily::Epanechnikov),
            other => Err(crate::error::config_err(format!("unknown kernel family '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub bandwidth: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, bandwidth: f64) -> Result<Self> {
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(domain_err(format!("bandwidth must be positive and finite, got {bandwidth}")));
        }
        Ok(Self { family, bandwidth })
    }

    /// `φ(‖v‖_∞ / h)`.
    pub fn eval(&self, v: &[f64]) -> Result<f64> {
        let r = sup_norm(v)?;
        Ok(self.family.profile(r / self.bandwidth))
    }
}

pub(crate) fn sup_norm(v: &[f64]) -> Result<f64> {
    let mut r = 0.0_f64;
    for &c in v {
        if !c.is_finite() {
            return Err(domain_err(format!("non-finite kernel argument {c}")));
        }
        r = r.max(c.abs());
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bump_values() {
        let k = KernelSpec::new(KernelFamily::Bump, 1.0).unwrap();
        assert!((k.eval(&[0.0]).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(k.eval(&[1.0]).unwrap(), 0.0);
        // exp(-1/(1 - 1/4)) = exp(-4/3)
        let v = k.eval(&[0.5]).unwrap();
        assert!((v - 0.263_597_138_115_727_7).abs() < 1e-12, "{v}");
    }

    #[test]
    fn sup_norm_radius() {
        let k = KernelSpec::new(KernelFamily::Triangle, 2.0).unwrap();
        assert_eq!(k.eval(&[0.5, -1.0]).unwrap(), 0.5);
        assert_eq!(k.eval(&[0.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn non_finite_is_domain_error() {
        let k = KernelSpec::new(KernelFamily::Bump, 1.0).unwrap();
        assert!(k.eval(&[f64::NAN]).is_err());
        assert!(k.eval(&[f64::INFINITY, 0.0]).is_err());
        assert!(KernelSpec::new(KernelFamily::Bump, 0.0).is_err());
    }

    #[test]
    fn profiles_are_bounded_and_nonincreasing() {
        for fam in [KernelFamily::Bump, KernelFamily::Triangle, KernelFamily::Epanechnikov] {
            let mut prev = f64::INFINITY;
            for i in 0..=1000 {
                let r = i as f64 / 800.0;
                let v = fam.profile(r);
                assert!((0.0..=1.0).contains(&v));
                assert!(v <= prev);
                if r >= 1.0 {
                    assert_eq!(v, 0.0);
                } else {
                    assert!(v > 0.0 || fam == KernelFamily::Bump);
                    assert!((fam.log_profile(r).exp() - v).abs() < 1e-14);
                }
                prev = v;
            }
        }
    }
}
