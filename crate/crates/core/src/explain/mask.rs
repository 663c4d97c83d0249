//! Randomized-mask importance for black-box scorers.
//!
//! For masks `M_j` with entries drawn independently from Bernoulli(p):
//!
//! ```text
//! score_i = 1 / (p · N) · Σ_j f(x ⊙ M_j + (1 − M_j) ⊙ b) · M_{j,i}
//! ```
//!
//! where `f` is the scorer's output for the class it ranks highest on the
//! unmasked input and `b` is the baseline. Each mask is generated from its
//! own ChaCha stream (`stream = mask index`), and per-mask responses are
//! summed in mask-index order, so results are bit-identical across runs and
//! across sequential and parallel execution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ExplainError;
use crate::par::{self, Execution};

/// Why a scorer could not produce an answer.
#[derive(Debug, Clone, PartialEq)]
pub enum PredictorFailure {
    Timeout,
    Other(String),
}

impl std::fmt::Display for PredictorFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PredictorFailure::Timeout => f.write_str("timeout"),
            PredictorFailure::Other(m) => f.write_str(m),
        }
    }
}

/// A scorer over real vectors returning one score per class.
pub trait BlackBox: Sync {
    fn score(&self, x: &[f64]) -> Result<Vec<f64>, PredictorFailure>;

    /// Stable identifier recorded alongside results (e.g. a model hash).
    fn predictor_hash(&self) -> String;
}

/// Adapts a closure into a [`BlackBox`].
pub struct FnBlackBox<F> {
    pub f: F,
    pub id: String,
}

impl<F> FnBlackBox<F>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync,
{
    pub fn new(id: impl Into<String>, f: F) -> Self {
        FnBlackBox { f, id: id.into() }
    }
}

impl<F> BlackBox for FnBlackBox<F>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync,
{
    fn score(&self, x: &[f64]) -> Result<Vec<f64>, PredictorFailure> {
        Ok((self.f)(x))
    }

    fn predictor_hash(&self) -> String {
        self.id.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSampling {
    /// `n_masks` independent Bernoulli masks.
    Random,
    /// Every one of the `2^d` masks, weighted by its probability. Exact.
    Exhaustive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub n_masks: usize,
    pub mask_prob: f64,
    pub sampling: MaskSampling,
    pub baseline_id: String,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            n_masks: 1500,
            mask_prob: 0.5,
            sampling: MaskSampling::Random,
            baseline_id: "training-mean".into(),
        }
    }
}

pub const MAX_EXHAUSTIVE_FEATURES: usize = 20;

/// Importance scores and everything needed to regenerate them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Saliency {
    pub scores: Vec<f64>,
    pub n_masks: usize,
    pub mask_prob: f64,
    pub seed: u64,
    pub sampling: MaskSampling,
    pub baseline_id: String,
    pub predictor_hash: String,
    /// Class whose score was explained. Kept out of user-facing views.
    pub explained_class: usize,
}

impl Saliency {
    /// Feature indices ordered by decreasing score; ties keep index order.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        idx
    }
}

/// Random Bernoulli mask `index` for a `d`-dimensional input.
pub fn random_mask(seed: u64, index: usize, d: usize, p: f64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    (0..d).map(|_| rng.random::<f64>() < p).collect()
}

fn exhaustive_mask(index: usize, d: usize) -> Vec<bool> {
    (0..d).map(|i| (index >> i) & 1 == 1).collect()
}

pub(crate) fn validate(n_masks: usize, p: f64) -> Result<(), ExplainError> {
    if n_masks == 0 {
        return Err(ExplainError::InvalidConfig("n_masks must be at least 1".into()));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(ExplainError::InvalidConfig(format!("mask_prob {p} outside (0, 1]")));
    }
    Ok(())
}

/// Computes mask importance of `case` under `predictor`.
///
/// `groups`, when given, maps each maskable feature to the input columns it
/// covers; masking a feature blends all of its columns toward the baseline.
/// Without groups every input column is its own feature.
pub fn mask_importance(
    predictor: &dyn BlackBox,
    case: &[f64],
    baseline: &[f64],
    groups: Option<&[Vec<usize>]>,
    config: &MaskConfig,
    seed: u64,
    exec: Execution,
) -> Result<Saliency, ExplainError> {
    if baseline.len() != case.len() {
        return Err(ExplainError::InvalidConfig(format!(
            "baseline has {} entries, case has {}",
            baseline.len(),
            case.len()
        )));
    }
    let identity: Vec<Vec<usize>>;
    let groups = match groups {
        Some(g) => g,
        None => {
            identity = (0..case.len()).map(|i| vec![i]).collect();
            &identity
        }
    };
    let d = groups.len();
    let p = config.mask_prob;
    let n_masks = match config.sampling {
        MaskSampling::Random => config.n_masks,
        MaskSampling::Exhaustive => {
            if d > MAX_EXHAUSTIVE_FEATURES {
                return Err(ExplainError::InvalidConfig(format!(
                    "exhaustive masking supports at most {MAX_EXHAUSTIVE_FEATURES} features, got {d}"
                )));
            }
            1usize << d
        }
    };
    validate(n_masks, p)?;

    let reference = predictor.score(case).map_err(|e| match e {
        PredictorFailure::Timeout => ExplainError::Timeout { endpoint: predictor.predictor_hash(), mask_index: None },
        PredictorFailure::Other(message) => ExplainError::ReferenceFailed { predictor: predictor.predictor_hash(), message },
    })?;
    let target = argmax(&reference);

    let evaluate = |j: usize| -> Result<(f64, Vec<bool>), (usize, PredictorFailure)> {
        let mask = match config.sampling {
            MaskSampling::Random => random_mask(seed, j, d, p),
            MaskSampling::Exhaustive => exhaustive_mask(j, d),
        };
        let mut x = baseline.to_vec();
        for (keep, cols) in mask.iter().zip(groups) {
            if *keep {
                for &c in cols {
                    x[c] = case[c];
                }
            }
        }
        let out = predictor.score(&x).map_err(|e| (j, e))?;
        let f = out.get(target).copied().unwrap_or(0.0);
        let weight = match config.sampling {
            MaskSampling::Random => 1.0,
            MaskSampling::Exhaustive => {
                let on = mask.iter().filter(|m| **m).count() as i32;
                p.powi(on) * (1.0 - p).powi(d as i32 - on) * n_masks as f64
            }
        };
        Ok((f * weight, mask))
    };
    let results = par::map_indexed(exec, n_masks, evaluate);

    let mut sums = vec![0.0; d];
    for r in results {
        match r {
            Ok((f, mask)) => {
                for (s, m) in sums.iter_mut().zip(&mask) {
                    if *m {
                        *s += f;
                    }
                }
            }
            Err((j, PredictorFailure::Timeout)) => {
                return Err(ExplainError::Timeout {
                    endpoint: predictor.predictor_hash(),
                    mask_index: Some(j),
                })
            }
            Err((j, PredictorFailure::Other(message))) => {
                return Err(ExplainError::PredictorFailed {
                    predictor: predictor.predictor_hash(),
                    mask_index: j,
                    message,
                })
            }
        }
    }
    let norm = p * n_masks as f64;
    Ok(Saliency {
        scores: sums.into_iter().map(|s| s / norm).collect(),
        n_masks,
        mask_prob: p,
        seed,
        sampling: config.sampling,
        baseline_id: config.baseline_id.clone(),
        predictor_hash: predictor.predictor_hash(),
        explained_class: target,
    })
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(w: Vec<f64>) -> FnBlackBox<impl Fn(&[f64]) -> Vec<f64> + Sync> {
        FnBlackBox::new("linear", move |x: &[f64]| vec![x.iter().zip(&w).map(|(a, b)| a * b).sum()])
    }

    fn exhaustive() -> MaskConfig {
        MaskConfig {
            sampling: MaskSampling::Exhaustive,
            ..MaskConfig::default()
        }
    }

    #[test]
    fn enumerated_two_feature_linear() {
        // Masks 00, 10, 01, 11 give f = 0, 1, 0, 1.
        let s = mask_importance(&linear(vec![1.0, 0.0]), &[1.0, 1.0], &[0.0, 0.0], None, &exhaustive(), 0, Execution::Sequential).unwrap();
        assert_eq!(s.n_masks, 4);
        assert_eq!(s.scores, vec![1.0, 0.5]);
    }

    #[test]
    fn constant_predictor_ties() {
        let f = FnBlackBox::new("const", |_: &[f64]| vec![0.3, 0.7]);
        let s = mask_importance(&f, &[1.0; 5], &[0.0; 5], None, &exhaustive(), 0, Execution::Sequential).unwrap();
        for v in &s.scores {
            assert!((v - 0.7).abs() < 1e-12);
        }
        assert_eq!(s.explained_class, 1);
    }

    #[test]
    fn default_records_1500_masks() {
        let f = FnBlackBox::new("const", |_: &[f64]| vec![1.0]);
        let s = mask_importance(&f, &[1.0; 3], &[0.0; 3], None, &MaskConfig::default(), 9, Execution::default()).unwrap();
        assert_eq!(s.n_masks, 1500);
        assert_eq!(s.mask_prob, 0.5);
    }

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let f = linear(vec![0.3, -1.2, 2.0, 0.1]);
        let cfg = MaskConfig { n_masks: 777, ..MaskConfig::default() };
        let a = mask_importance(&f, &[1.0; 4], &[0.0; 4], None, &cfg, 5, Execution::Sequential).unwrap();
        let b = mask_importance(&f, &[1.0; 4], &[0.0; 4], None, &cfg, 5, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    struct FailsAt(usize);
    impl BlackBox for FailsAt {
        fn score(&self, x: &[f64]) -> Result<Vec<f64>, PredictorFailure> {
            // The unmasked case is all ones; mask index is smuggled via x[0].
            if x[1] == self.0 as f64 {
                Err(PredictorFailure::Other("boom".into()))
            } else {
                Ok(vec![1.0])
            }
        }
        fn predictor_hash(&self) -> String {
            "fails".into()
        }
    }

    #[test]
    fn failure_carries_mask_index() {
        // Two features, exhaustive: mask 2 (binary 01 -> feature 1 kept) yields x[1] = 7.
        let err = mask_importance(&FailsAt(7), &[0.0, 7.0], &[0.0, 0.0], None, &exhaustive(), 0, Execution::Sequential);
        // The unmasked input also has x[1] = 7, so this fails on the reference.
        assert!(matches!(err, Err(ExplainError::ReferenceFailed { .. })));
        let err = mask_importance(&FailsAt(0), &[0.0, 7.0], &[0.0, 0.0], None, &exhaustive(), 0, Execution::Sequential);
        assert_eq!(
            err,
            Err(ExplainError::PredictorFailed { predictor: "fails".into(), mask_index: 0, message: "boom".into() })
        );
    }

    #[test]
    fn groups_blend_whole_blocks() {
        // Feature 0 covers columns 0 and 1.
        let f = linear(vec![1.0, 1.0, 0.0]);
        let groups = vec![vec![0, 1], vec![2]];
        let s = mask_importance(&f, &[1.0, 1.0, 1.0], &[0.0; 3], Some(&groups), &exhaustive(), 0, Execution::Sequential).unwrap();
        assert_eq!(s.scores.len(), 2);
        assert_eq!(s.scores, vec![2.0, 1.0]);
    }

    #[test]
    fn rejects_bad_config() {
        let f = linear(vec![1.0]);
        let cfg = MaskConfig { n_masks: 0, ..MaskConfig::default() };
        assert!(matches!(mask_importance(&f, &[1.0], &[0.0], None, &cfg, 0, Execution::Sequential), Err(ExplainError::InvalidConfig(_))));
    }
}
