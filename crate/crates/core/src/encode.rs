//! Numeric encoding of records and the standard scaler.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{AttrValue, CaseRecord, Dataset};
use crate::par::{self, Execution};
use crate::schema::{Attribute, AttributeKind};

/// One column of the encoded feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Column {
    Numeric { attribute: Attribute },
    Flag { attribute: Attribute },
    OneHot { attribute: Attribute, category: String },
}

impl Column {
    pub fn attribute(&self) -> Attribute {
        match self {
            Column::Numeric { attribute } | Column::Flag { attribute } | Column::OneHot { attribute, .. } => {
                *attribute
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            Column::OneHot { attribute, category } => format!("{}={}", attribute.label(), category),
            other => other.attribute().label().to_string(),
        }
    }
}

/// Categorical encoding table: numeric and flag attributes map to one column
/// each, categorical attributes to one 0/1 column per category observed in
/// the fitting data (declared vocabulary order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub columns: Vec<Column>,
}

/// Encoded vector plus the attributes whose category was not in the table.
/// Those attributes' one-hot columns hold NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub values: Vec<f64>,
    pub unknown: Vec<Attribute>,
}

impl Encoder {
    pub fn fit(data: &Dataset) -> Encoder {
        let mut columns = Vec::new();
        for attr in Attribute::ALL {
            match attr.kind() {
                AttributeKind::Integer | AttributeKind::Real => {
                    columns.push(Column::Numeric { attribute: attr })
                }
                AttributeKind::Flag => columns.push(Column::Flag { attribute: attr }),
                AttributeKind::Categorical => {
                    let vocab = data.schema.vocabulary(attr).expect("categorical");
                    for cat in vocab {
                        let seen = data.records.iter().any(|r| match r.value(attr) {
                            AttrValue::Category(c) => c == cat,
                            _ => false,
                        });
                        if seen {
                            columns.push(Column::OneHot {
                                attribute: attr,
                                category: cat.clone(),
                            });
                        }
                    }
                }
            }
        }
        Encoder { columns }
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn column_names(&self) -> Vec<String> {
        self.columns.iter().map(Column::name).collect()
    }

    pub fn encode(&self, record: &CaseRecord) -> Encoded {
        let mut unknown = Vec::new();
        for attr in Attribute::ALL {
            if attr.kind() != AttributeKind::Categorical {
                continue;
            }
            if let AttrValue::Category(c) = record.value(attr) {
                let known = self.columns.iter().any(|col| {
                    matches!(col, Column::OneHot { attribute, category } if *attribute == attr && category == c)
                });
                if !known {
                    unknown.push(attr);
                }
            }
        }
        let values = self
            .columns
            .iter()
            .map(|col| match (col, record.value(col.attribute())) {
                (Column::Numeric { .. }, AttrValue::Number(x)) => x,
                (Column::Flag { .. }, AttrValue::Flag(b)) => f64::from(u8::from(b)),
                (Column::OneHot { attribute, category }, AttrValue::Category(c)) => {
                    if unknown.contains(attribute) {
                        f64::NAN
                    } else {
                        f64::from(u8::from(c == category))
                    }
                }
                _ => unreachable!("column kind matches attribute kind"),
            })
            .collect();
        Encoded { values, unknown }
    }

    /// Column indices grouped by source attribute, in [`Attribute::ALL`] order.
    pub fn attribute_groups(&self) -> Vec<(Attribute, Vec<usize>)> {
        Attribute::ALL
            .iter()
            .map(|&a| {
                let cols = self
                    .columns
                    .iter()
                    .enumerate()
                    .filter(|(_, c)| c.attribute() == a)
                    .map(|(i, _)| i)
                    .collect();
                (a, cols)
            })
            .collect()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ScalerError {
    #[error("cannot fit a scaler on an empty dataset")]
    Empty,
}

/// Per-column mean and population standard deviation over encoded columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub encoder: Encoder,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// Columns whose deviation was zero and was stored as 1.
    pub warnings: Vec<String>,
}

/// Mean and population deviation per column of a row-major matrix.
/// Zero deviations are replaced by 1; their column indices are returned.
pub fn column_stats(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    let n = rows.len() as f64;
    let width = rows.first().map_or(0, Vec::len);
    let mut means = vec![0.0; width];
    for r in rows {
        for (m, x) in means.iter_mut().zip(r) {
            *m += x;
        }
    }
    means.iter_mut().for_each(|m| *m /= n);
    let mut vars = vec![0.0; width];
    for r in rows {
        for ((v, x), m) in vars.iter_mut().zip(r).zip(&means) {
            *v += (x - m) * (x - m);
        }
    }
    let mut constant = Vec::new();
    let stds = vars
        .iter()
        .enumerate()
        .map(|(j, v)| {
            let s = (v / n).sqrt();
            if s > 0.0 {
                s
            } else {
                constant.push(j);
                1.0
            }
        })
        .collect();
    (means, stds, constant)
}

impl Scaler {
    pub fn fit(train: &Dataset) -> Result<Scaler, ScalerError> {
        if train.is_empty() {
            return Err(ScalerError::Empty);
        }
        let encoder = Encoder::fit(train);
        let rows: Vec<Vec<f64>> = train.records.iter().map(|r| encoder.encode(r).values).collect();
        let (means, stds, constant) = column_stats(&rows);
        let warnings = constant
            .into_iter()
            .map(|j| format!("column `{}` is constant; deviation stored as 1", encoder.columns[j].name()))
            .collect();
        Ok(Scaler {
            encoder,
            means,
            stds,
            warnings,
        })
    }

    pub fn width(&self) -> usize {
        self.means.len()
    }

    /// Standardized encoding. Unknown categories count as all-zero one-hot.
    pub fn transform(&self, record: &CaseRecord) -> Vec<f64> {
        let enc = self.encoder.encode(record);
        self.standardize(&enc.values)
    }

    pub fn standardize(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(&self.means)
            .zip(&self.stds)
            .map(|((x, m), s)| {
                let x = if x.is_nan() { 0.0 } else { *x };
                (x - m) / s
            })
            .collect()
    }

    pub fn transform_all(&self, data: &Dataset, exec: Execution) -> Vec<Vec<f64>> {
        par::map_slice(exec, &data.records, |r| self.transform(r))
    }
}

/// Fits a [`Scaler`] on the training set.
pub fn fit_scaler(train: &Dataset) -> Result<Scaler, ScalerError> {
    Scaler::fit(train)
}
