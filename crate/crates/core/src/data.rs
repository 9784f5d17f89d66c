use serde::{Deserialize, Serialize};

use crate::error::{config_err, KmpError, Result};

/// Regression data: design points `x ∈ [0, 1]^p`, optional linear covariates
/// `z ∈ R^q`, and responses `y`. Matrices are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Vec<f64>,
    pub p: usize,
    pub z: Vec<f64>,
    pub q: usize,
    pub y: Vec<f64>,
    pub x_names: Vec<String>,
    pub z_names: Vec<String>,
    pub y_name: String,
    /// Free-form provenance note carried into run manifests.
    pub note: String,
}

impl Dataset {
    pub fn new(x: Vec<f64>, p: usize, y: Vec<f64>) -> Result<Self> {
        let ds = Self {
            x_names: (1..=p).map(|j| format!("x{j}")).collect(),
            x,
            p,
            z: Vec::new(),
            q: 0,
            y,
            z_names: Vec::new(),
            y_name: "y".into(),
            note: String::new(),
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Univariate design.
    pub fn univariate(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        Self::new(x, 1, y)
    }

    pub fn with_z(mut self, z: Vec<f64>, q: usize) -> Result<Self> {
        self.z = z;
        self.q = q;
        self.z_names = (1..=q).map(|j| format!("z{j}")).collect();
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.y.len();
        if self.p == 0 {
            return Err(config_err("design dimension must be positive"));
        }
        if self.x.len() != n * self.p {
            return Err(config_err(format!("x has {} entries, expected {} × {}", self.x.len(), n, self.p)));
        }
        if self.z.len() != n * self.q {
            return Err(config_err(format!("z has {} entries, expected {} × {}", self.z.len(), n, self.q)));
        }
        if self.x_names.len() != self.p || self.z_names.len() != self.q {
            return Err(config_err("column name count does not match the data"));
        }
        for (i, row) in self.x.chunks(self.p).enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if !(v.is_finite() && (0.0..=1.0).contains(&v)) {
                    return Err(KmpError::Data {
                        row: i + 2,
                        column: self.x_names[j].clone(),
                        message: format!("design value {v} outside (0, 1]"),
                    });
                }
            }
        }
        let check_finite = |vals: &[f64], width: usize, names: &[String]| -> Result<()> {
            for (i, &v) in vals.iter().enumerate() {
                if !v.is_finite() {
                    return Err(KmpError::Data {
                        row: i / width + 2,
                        column: names[i % width].clone(),
                        message: format!("non-finite value {v}"),
                    });
                }
            }
            Ok(())
        };
        if self.q > 0 {
            check_finite(&self.z, self.q, &self.z_names)?;
        }
        check_finite(&self.y, 1, std::slice::from_ref(&self.y_name))?;
        Ok(())
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.y.len()
    }

    #[inline]
    pub fn x_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    #[inline]
    pub fn z_row(&self, i: usize) -> &[f64] {
        &self.z[i * self.q..(i + 1) * self.q]
    }

    /// Rows selected by `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        let mut out = Self {
            x: Vec::with_capacity(idx.len() * self.p),
            z: Vec::with_capacity(idx.len() * self.q),
            y: Vec::with_capacity(idx.len()),
            ..self.clone()
        };
        for &i in idx {
            out.x.extend_from_slice(self.x_row(i));
            out.z.extend_from_slice(self.z_row(i));
            out.y.push(self.y[i]);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_checks() {
        assert!(Dataset::univariate(vec![0.1, 0.2], vec![1.0]).is_err());
        assert!(Dataset::univariate(vec![0.1, 1.2], vec![1.0, 2.0]).is_err());
        let ds = Dataset::univariate(vec![0.1, 0.2], vec![1.0, 2.0]).unwrap();
        assert!(ds.clone().with_z(vec![1.0], 1).is_err());
        let ds = ds.with_z(vec![1.0, -1.0], 1).unwrap();
        assert_eq!(ds.z_row(1), &[-1.0]);
        let sub = ds.subset(&[1]);
        assert_eq!(sub.y, vec![2.0]);
        assert_eq!(sub.x, vec![0.2]);
    }

    #[test]
    fn data_error_location() {
        let err = Dataset::univariate(vec![0.1, 0.2, 7.0], vec![1.0, 2.0, 3.0]).unwrap_err();
        match err {
            KmpError::Data { row, column, .. } => {
                assert_eq!(row, 4);
                assert_eq!(column, "x1");
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
