//! Dimensional data model for spatio-temporal field tensors.
//!
//! Every tensor is dense, `f64`, row-major in `(t, x, y, var)` order, so the
//! flat offset of a cell is `((t·nx + x)·ny + y)·nvar + v`.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape and labels of a forecast tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub t_out: usize,
    pub nx: usize,
    pub ny: usize,
    pub nvar: usize,
    pub variable_names: Vec<String>,
    /// Lead time of each forecast step, in hours.
    pub lead_hours: Vec<f64>,
}

impl GridSpec {
    pub fn new(
        t_out: usize,
        nx: usize,
        ny: usize,
        nvar: usize,
        variable_names: Vec<String>,
        lead_hours: Vec<f64>,
    ) -> Result<Self> {
        let spec = GridSpec {
            t_out,
            nx,
            ny,
            nvar,
            variable_names,
            lead_hours,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Spec with variables named `var0, var1, …` and leads every `step_hours`.
    pub fn with_defaults(
        t_out: usize,
        nx: usize,
        ny: usize,
        nvar: usize,
        step_hours: f64,
    ) -> Result<Self> {
        let names = (0..nvar).map(|v| format!("var{v}")).collect();
        let leads = (1..=t_out).map(|t| t as f64 * step_hours).collect();
        Self::new(t_out, nx, ny, nvar, names, leads)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_out == 0 || self.nx == 0 || self.ny == 0 || self.nvar == 0 {
            return Err(Error::InvalidSpec(format!(
                "all dimensions must be >= 1, got {:?}",
                self.dims()
            )));
        }
        if self.variable_names.len() != self.nvar {
            return Err(Error::InvalidSpec(format!(
                "{} variable names for nvar = {}",
                self.variable_names.len(),
                self.nvar
            )));
        }
        let unique: HashSet<&str> = self.variable_names.iter().map(String::as_str).collect();
        if unique.len() != self.nvar {
            return Err(Error::InvalidSpec("variable names must be unique".into()));
        }
        if self.lead_hours.len() != self.t_out {
            return Err(Error::InvalidSpec(format!(
                "{} lead times for t_out = {}",
                self.lead_hours.len(),
                self.t_out
            )));
        }
        if self.lead_hours.iter().any(|h| !h.is_finite()) {
            return Err(Error::InvalidSpec("lead hours must be finite".into()));
        }
        if self.lead_hours.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidSpec(
                "lead hours must be strictly increasing".into(),
            ));
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.t_out, self.nx, self.ny, self.nvar]
    }

    /// Number of cells, `t_out·nx·ny·nvar`.
    pub fn len(&self) -> usize {
        self.t_out * self.nx * self.ny * self.nvar
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cells per lead time.
    pub fn cells_per_lead(&self) -> usize {
        self.nx * self.ny * self.nvar
    }

    /// Inverse of [`cell_index`].
    pub fn coords(&self, flat: usize) -> (usize, usize, usize, usize) {
        let v = flat % self.nvar;
        let rest = flat / self.nvar;
        let y = rest % self.ny;
        let rest = rest / self.ny;
        let x = rest % self.nx;
        let t = rest / self.nx;
        (t, x, y, v)
    }

    pub fn variable_index(&self, name: &str) -> Option<usize> {
        self.variable_names.iter().position(|n| n == name)
    }

    pub(crate) fn ensure_same(&self, other: &GridSpec, what: &str) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::SpecMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )))
        }
    }
}

/// Flat row-major offset of cell `(t, x, y, v)`.
pub fn cell_index(spec: &GridSpec, t: usize, x: usize, y: usize, v: usize) -> Result<usize> {
    if t >= spec.t_out || x >= spec.nx || y >= spec.ny || v >= spec.nvar {
        return Err(Error::IndexOutOfRange {
            t,
            x,
            y,
            v,
            dims: spec.dims(),
        });
    }
    Ok(((t * spec.nx + x) * spec.ny + y) * spec.nvar + v)
}

/// Returns the first non-finite entry, if any.
pub(crate) fn first_non_finite(data: &[f64]) -> Option<(usize, f64)> {
    data.iter()
        .enumerate()
        .find(|(_, v)| !v.is_finite())
        .map(|(i, v)| (i, *v))
}

/// A dense 4D field of finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldTensor {
    spec: GridSpec,
    data: Vec<f64>,
}

impl FieldTensor {
    pub fn new(spec: GridSpec, data: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if data.len() != spec.len() {
            return Err(Error::LengthMismatch {
                expected: spec.len() as u64 * 8,
                found: data.len() as u64 * 8,
            });
        }
        if let Some((index, value)) = first_non_finite(&data) {
            return Err(Error::NonFinite { index, value });
        }
        Ok(FieldTensor { spec, data })
    }

    pub fn filled(spec: GridSpec, value: f64) -> Result<Self> {
        let n = spec.len();
        Self::new(spec, vec![value; n])
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, t: usize, x: usize, y: usize, v: usize) -> Result<f64> {
        Ok(self.data[cell_index(&self.spec, t, x, y, v)?])
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bits_eq(&self, other: &FieldTensor) -> bool {
        self.spec == other.spec
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
