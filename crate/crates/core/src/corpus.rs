//! The observed data: categorical code columns across databases, plus
//! optional regression columns with per-component availability.

use thiserror::Error;

use crate::partition::{DbLayout, RecordId};

#[derive(Debug, Error, PartialEq)]
pub enum CorpusError {
    #[error("column length {got} does not match record count {expected}")]
    ColumnLength { expected: usize, got: usize },
    #[error("code {code} out of range for feature {feature} (cardinality {cardinality})")]
    CodeOutOfRange {
        feature: usize,
        code: u32,
        cardinality: usize,
    },
    #[error("regression columns have inconsistent dimensions")]
    BadRegressionShape,
}

/// Per-record regression observations; `None` marks a missing component.
#[derive(Debug, Clone, Default)]
pub struct RegressionData {
    pub n_covariates: usize,
    pub y: Vec<Option<f64>>,
    pub x: Vec<Vec<Option<f64>>>,
}

impl RegressionData {
    pub fn observed_components(&self, flat: usize) -> Vec<usize> {
        let mut comps = Vec::new();
        if self.y[flat].is_some() {
            comps.push(0);
        }
        for (i, xi) in self.x[flat].iter().enumerate() {
            if xi.is_some() {
                comps.push(i + 1);
            }
        }
        comps
    }

    pub fn component_value(&self, flat: usize, comp: usize) -> f64 {
        if comp == 0 {
            self.y[flat].expect("observed component")
        } else {
            self.x[flat][comp - 1].expect("observed component")
        }
    }
}

/// Immutable view of all observed records.
#[derive(Debug, Clone)]
pub struct Corpus {
    layout: DbLayout,
    cardinalities: Vec<usize>,
    /// Feature-major code columns, indexed `[feature][flat record]`.
    codes: Vec<Vec<u32>>,
    regression: Option<RegressionData>,
}

impl Corpus {
    pub fn new(
        db_sizes: &[usize],
        cardinalities: Vec<usize>,
        codes: Vec<Vec<u32>>,
        regression: Option<RegressionData>,
    ) -> Result<Self, CorpusError> {
        let layout = DbLayout::new(db_sizes);
        let n = layout.n_records();
        if codes.len() != cardinalities.len() {
            return Err(CorpusError::ColumnLength {
                expected: cardinalities.len(),
                got: codes.len(),
            });
        }
        for (l, column) in codes.iter().enumerate() {
            if column.len() != n {
                return Err(CorpusError::ColumnLength {
                    expected: n,
                    got: column.len(),
                });
            }
            for &code in column {
                if code as usize >= cardinalities[l] {
                    return Err(CorpusError::CodeOutOfRange {
                        feature: l,
                        code,
                        cardinality: cardinalities[l],
                    });
                }
            }
        }
        if let Some(reg) = &regression {
            if reg.y.len() != n || reg.x.len() != n {
                return Err(CorpusError::BadRegressionShape);
            }
            if reg.x.iter().any(|row| row.len() != reg.n_covariates) {
                return Err(CorpusError::BadRegressionShape);
            }
        }
        Ok(Corpus {
            layout,
            cardinalities,
            codes,
            regression,
        })
    }

    pub fn layout(&self) -> &DbLayout {
        &self.layout
    }

    pub fn n_records(&self) -> usize {
        self.layout.n_records()
    }

    pub fn n_features(&self) -> usize {
        self.cardinalities.len()
    }

    pub fn cardinalities(&self) -> &[usize] {
        &self.cardinalities
    }

    pub fn codes(&self) -> &[Vec<u32>] {
        &self.codes
    }

    pub fn code(&self, feature: usize, r: RecordId) -> u32 {
        let flat = self.layout.flat(r).expect("record in range");
        self.codes[feature][flat]
    }

    pub fn regression(&self) -> Option<&RegressionData> {
        self.regression.as_ref()
    }

    /// Drops the regression columns (linkage-only runs).
    pub fn without_regression(&self) -> Corpus {
        Corpus {
            layout: self.layout.clone(),
            cardinalities: self.cardinalities.clone(),
            codes: self.codes.clone(),
            regression: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validates_code_range() {
        let err = Corpus::new(&[2], vec![2], vec![vec![0, 2]], None).unwrap_err();
        assert!(matches!(err, CorpusError::CodeOutOfRange { .. }));
    }

    #[test]
    fn observed_components_ordering() {
        let reg = RegressionData {
            n_covariates: 2,
            y: vec![Some(1.0), None],
            x: vec![vec![None, Some(2.0)], vec![Some(3.0), None]],
        };
        assert_eq!(reg.observed_components(0), vec![0, 2]);
        assert_eq!(reg.observed_components(1), vec![1]);
        assert_eq!(reg.component_value(0, 2), 2.0);
    }
}
