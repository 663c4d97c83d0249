//! Similar-case retrieval: standardized encodings projected by PCA, then
//! Euclidean nearest neighbours among the training cases.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{CaseRecord, Dataset, Label};
use crate::digest;
use crate::encode::Scaler;
use crate::par::{self, Execution};

pub type Embedding = Vec<f64>;

#[derive(Debug, Error, PartialEq)]
pub enum SimilarityError {
    #[error("cannot fit PCA on an empty matrix")]
    Empty,
    #[error("rows have inconsistent widths")]
    Ragged,
    #[error("requested {requested} components but the data has rank {rank}")]
    RankDeficient { requested: usize, rank: usize },
    #[error("requested {requested} components; at most min(rows, features) = {max} are possible")]
    TooManyComponents { requested: usize, max: usize },
    #[error("embedding dimension {got} does not match model dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("reference set is empty")]
    EmptyReference,
}

/// Principal axes of a standardized training matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    /// `n_components` rows, each of length `n_features`, orthonormal.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
    pub mean: Vec<f64>,
    pub n_components: usize,
    pub fitted_on: String,
}

const RANK_TOLERANCE: f64 = 1e-10;

/// Fits the top `n_components` eigenvectors of the population covariance.
///
/// Each component is flipped so that its largest-magnitude entry is positive
/// (the lowest index wins among equal magnitudes).
pub fn fit_pca(rows: &[Vec<f64>], n_components: usize) -> Result<PcaModel, SimilarityError> {
    let n = rows.len();
    if n == 0 {
        return Err(SimilarityError::Empty);
    }
    let d = rows[0].len();
    if d == 0 {
        return Err(SimilarityError::Empty);
    }
    if rows.iter().any(|r| r.len() != d) {
        return Err(SimilarityError::Ragged);
    }
    let max = n.min(d);
    if n_components > max {
        return Err(SimilarityError::TooManyComponents { requested: n_components, max });
    }
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for r in rows {
        let c: Vec<f64> = r.iter().zip(&mean).map(|(x, m)| x - m).collect();
        for i in 0..d {
            for j in i..d {
                cov[(i, j)] += c[i] * c[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / n as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let total: f64 = values.iter().sum();
    let top = values.first().copied().unwrap_or(0.0);
    let rank = values.iter().filter(|v| **v > RANK_TOLERANCE * top.max(1.0)).count();
    if n_components > rank {
        return Err(SimilarityError::RankDeficient { requested: n_components, rank });
    }
    let components: Vec<Vec<f64>> = order[..n_components]
        .iter()
        .map(|&i| {
            let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
            orient(&mut v);
            v
        })
        .collect();
    let explained_variance = values[..n_components].to_vec();
    let explained_variance_ratio = explained_variance
        .iter()
        .map(|v| if total > 0.0 { v / total } else { 0.0 })
        .collect();
    Ok(PcaModel {
        components,
        explained_variance,
        explained_variance_ratio,
        mean,
        n_components,
        fitted_on: matrix_hash(rows),
    })
}

/// Flips `v` so that its largest-magnitude entry is positive.
pub fn orient(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|x| *x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Digest of a matrix's little-endian f64 bytes.
pub fn matrix_hash(rows: &[Vec<f64>]) -> String {
    let mut bytes = Vec::with_capacity(rows.len() * rows.first().map_or(0, Vec::len) * 8 + 16);
    bytes.extend_from_slice(&(rows.len() as u64).to_be_bytes());
    for r in rows {
        for x in r {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    digest::sha256_hex(&bytes)
}

impl PcaModel {
    pub fn n_features(&self) -> usize {
        self.mean.len()
    }

    pub fn project(&self, x: &[f64]) -> Result<Embedding, SimilarityError> {
        if x.len() != self.n_features() {
            return Err(SimilarityError::DimensionMismatch { expected: self.n_features(), got: x.len() });
        }
        Ok(self
            .components
            .iter()
            .map(|c| c.iter().zip(x).zip(&self.mean).map(|((w, v), m)| w * (v - m)).sum())
            .collect())
    }
}

/// `components · (scale(case) − mean)`.
pub fn embed(pca: &PcaModel, scaler: &Scaler, case: &CaseRecord) -> Result<Embedding, SimilarityError> {
    pca.project(&scaler.transform(case))
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceEntry {
    pub case_id: u64,
    pub label: Option<Label>,
    pub embedding: Embedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub case_id: u64,
    pub original_label: Option<Label>,
    pub distance: f64,
    pub embedding: Embedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborSet {
    pub neighbors: Vec<Neighbor>,
    pub k: usize,
    /// Set when the reference had fewer than `k` entries.
    pub short: bool,
}

/// The `k` nearest entries by Euclidean distance, ties to the lower case id.
pub fn top_k_similar(
    query: &[f64],
    reference: &[ReferenceEntry],
    k: usize,
    exec: Execution,
) -> Result<NeighborSet, SimilarityError> {
    if reference.is_empty() {
        return Err(SimilarityError::EmptyReference);
    }
    if let Some(bad) = reference.iter().find(|e| e.embedding.len() != query.len()) {
        return Err(SimilarityError::DimensionMismatch { expected: query.len(), got: bad.embedding.len() });
    }
    let distances = par::map_slice(exec, reference, |e| euclidean(query, &e.embedding));
    let mut idx: Vec<usize> = (0..reference.len()).collect();
    let key = |i: usize| (distances[i], reference[i].case_id);
    let take = k.min(reference.len());
    let cmp = |a: &usize, b: &usize| {
        let (da, ia) = key(*a);
        let (db, ib) = key(*b);
        da.total_cmp(&db).then(ia.cmp(&ib))
    };
    if take < idx.len() && take > 0 {
        idx.select_nth_unstable_by(take - 1, cmp);
        idx.truncate(take);
    }
    idx.truncate(take);
    idx.sort_by(cmp);
    Ok(NeighborSet {
        neighbors: idx
            .into_iter()
            .map(|i| Neighbor {
                case_id: reference[i].case_id,
                original_label: reference[i].label,
                distance: distances[i],
                embedding: reference[i].embedding.clone(),
            })
            .collect(),
        k,
        short: reference.len() < k,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub case_id: u64,
    pub x: f64,
    pub y: f64,
}

/// Neighbours as offsets from the query on the first two components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub query: [f64; 2],
    pub points: Vec<PlotPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotNotice {
    pub message: String,
}

pub fn relative_distance_plot(neighbors: &NeighborSet, query: &[f64]) -> Result<PlotData, PlotNotice> {
    if query.len() < 2 {
        return Err(PlotNotice {
            message: format!("plot omitted: embedding has {} component(s), two are needed", query.len()),
        });
    }
    Ok(PlotData {
        query: [0.0, 0.0],
        points: neighbors
            .neighbors
            .iter()
            .map(|n| PlotPoint {
                case_id: n.case_id,
                x: n.embedding[0] - query[0],
                y: n.embedding[1] - query[1],
            })
            .collect(),
    })
}

/// Scaler, PCA and the embedded training set, fitted together.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityIndex {
    pub scaler: Scaler,
    pub pca: PcaModel,
    pub reference: Vec<ReferenceEntry>,
    pub train_hash: String,
}

impl SimilarityIndex {
    pub fn fit(train: &Dataset, n_components: usize, exec: Execution) -> Result<SimilarityIndex, SimilarityError> {
        let scaler = Scaler::fit(train).map_err(|_| SimilarityError::Empty)?;
        let rows = scaler.transform_all(train, exec);
        let pca = fit_pca(&rows, n_components)?;
        let embedded = par::map_slice(exec, &rows, |r| pca.project(r));
        let reference = train
            .records
            .iter()
            .zip(embedded)
            .map(|(rec, e)| {
                e.map(|embedding| ReferenceEntry { case_id: rec.row_id, label: rec.label, embedding })
            })
            .collect::<Result<_, _>>()?;
        Ok(SimilarityIndex { scaler, pca, reference, train_hash: train.content_hash.clone() })
    }

    pub fn embed(&self, case: &CaseRecord) -> Result<Embedding, SimilarityError> {
        embed(&self.pca, &self.scaler, case)
    }

    pub fn query(&self, case: &CaseRecord, k: usize, exec: Execution) -> Result<(Embedding, NeighborSet), SimilarityError> {
        let q = self.embed(case)?;
        let set = top_k_similar(&q, &self.reference, k, exec)?;
        Ok((q, set))
    }
}
