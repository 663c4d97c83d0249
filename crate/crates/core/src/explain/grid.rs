//! Grid-cell mask importance for image predictors that live behind the
//! external adapter. Masks are generated here and sent as grid
//! specifications; the remote upsamples them with [`GridMask::upsample`]
//! semantics and applies them multiplicatively to its own image.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::mask::{argmax, validate, MaskSampling, PredictorFailure, Saliency};
use super::ExplainError;
use crate::par::{self, Execution};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub n_masks: usize,
    pub mask_prob: f64,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            n_masks: 1500,
            mask_prob: 0.5,
            grid_h: 7,
            grid_w: 7,
        }
    }
}

/// One low-resolution mask with its sub-cell shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMask {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Row-major cell values, each 0 or 1.
    pub cells: Vec<u8>,
    /// Shift as a fraction of one upsampled cell, in `[0, 1)`.
    pub shift_y: f64,
    pub shift_x: f64,
    pub seed: u64,
    pub index: usize,
}

impl GridMask {
    /// Mask `index` of the sequence determined by `seed`.
    pub fn generate(seed: u64, index: usize, grid_h: usize, grid_w: usize, p: f64) -> GridMask {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64);
        let cells = (0..grid_h * grid_w)
            .map(|_| u8::from(rng.random::<f64>() < p))
            .collect();
        let shift_y = rng.random::<f64>();
        let shift_x = rng.random::<f64>();
        GridMask {
            grid_h,
            grid_w,
            cells,
            shift_y,
            shift_x,
            seed,
            index,
        }
    }

    pub fn cell(&self, gy: usize, gx: usize) -> f64 {
        f64::from(self.cells[gy * self.grid_w + gx])
    }

    /// Row-major soft mask of `height × width` values in `[0, 1]`.
    ///
    /// The grid is stretched over `(grid + 1)` upsampled cells of size
    /// `ceil(dim / grid)`, offset by the shift, and sampled bilinearly with
    /// clamped edges.
    pub fn upsample(&self, height: usize, width: usize) -> Vec<f64> {
        let ys = axis_samples(height, self.grid_h, self.shift_y);
        let xs = axis_samples(width, self.grid_w, self.shift_x);
        let mut out = Vec::with_capacity(height * width);
        for &(y0, y1, ty) in &ys {
            for &(x0, x1, tx) in &xs {
                let top = self.cell(y0, x0) * (1.0 - tx) + self.cell(y0, x1) * tx;
                let bottom = self.cell(y1, x0) * (1.0 - tx) + self.cell(y1, x1) * tx;
                out.push(top * (1.0 - ty) + bottom * ty);
            }
        }
        out
    }
}

fn axis_samples(pixels: usize, grid: usize, shift: f64) -> Vec<(usize, usize, f64)> {
    let cell = pixels.div_ceil(grid).max(1) as f64;
    let span = (grid + 1) as f64 * cell;
    (0..pixels)
        .map(|p| {
            let up = p as f64 + 0.5 + shift * cell;
            let g = (up * grid as f64 / span - 0.5).clamp(0.0, (grid - 1) as f64);
            let lo = g.floor() as usize;
            let hi = (lo + 1).min(grid - 1);
            (lo, hi, g - lo as f64)
        })
        .collect()
}

/// An image scorer that applies grid masks itself.
pub trait MaskedImagePredictor: Sync {
    fn endpoint(&self) -> String;
    fn predictor_hash(&self) -> String;
    fn score(&self, payload: &Value) -> Result<Vec<f64>, PredictorFailure>;
    fn score_masked(&self, payload: &Value, mask: &GridMask) -> Result<Vec<f64>, PredictorFailure>;
}

/// Per-cell importance: `score_c = 1/(p·N) · Σ_j f_j · cell_c(M_j)`.
pub fn mask_importance_grid(
    predictor: &dyn MaskedImagePredictor,
    payload: &Value,
    config: &GridConfig,
    seed: u64,
    exec: Execution,
) -> Result<Saliency, ExplainError> {
    validate(config.n_masks, config.mask_prob)?;
    if config.grid_h == 0 || config.grid_w == 0 {
        return Err(ExplainError::InvalidConfig("grid dimensions must be positive".into()));
    }
    let fail = |j: Option<usize>, e: PredictorFailure| match (j, e) {
        (mask_index, PredictorFailure::Timeout) => ExplainError::Timeout {
            endpoint: predictor.endpoint(),
            mask_index,
        },
        (Some(mask_index), PredictorFailure::Other(message)) => ExplainError::PredictorFailed {
            predictor: predictor.endpoint(),
            mask_index,
            message,
        },
        (None, PredictorFailure::Other(message)) => ExplainError::ReferenceFailed {
            predictor: predictor.endpoint(),
            message,
        },
    };
    let reference = predictor.score(payload).map_err(|e| fail(None, e))?;
    let target = argmax(&reference);
    let p = config.mask_prob;
    let results = par::map_indexed(exec, config.n_masks, |j| {
        let mask = GridMask::generate(seed, j, config.grid_h, config.grid_w, p);
        predictor
            .score_masked(payload, &mask)
            .map(|out| (out.get(target).copied().unwrap_or(0.0), mask))
            .map_err(|e| (j, e))
    });
    let mut sums = vec![0.0; config.grid_h * config.grid_w];
    for r in results {
        let (f, mask) = r.map_err(|(j, e)| fail(Some(j), e))?;
        for (s, c) in sums.iter_mut().zip(&mask.cells) {
            if *c == 1 {
                *s += f;
            }
        }
    }
    let norm = p * config.n_masks as f64;
    Ok(Saliency {
        scores: sums.into_iter().map(|s| s / norm).collect(),
        n_masks: config.n_masks,
        mask_prob: p,
        seed,
        sampling: MaskSampling::Random,
        baseline_id: format!("grid-{}x{}-zero", config.grid_h, config.grid_w),
        predictor_hash: predictor.predictor_hash(),
        explained_class: target,
    })
}

/// Renders the synthetic image described by a `region` payload: ones inside
/// the rectangle `[y0, x0, y1, x1)`, zeros elsewhere, and reports the mean
/// brightness of the masked rectangle as `[b, 1 - b]`.
#[derive(Debug, Clone)]
pub struct RegionBrightness;

impl RegionBrightness {
    pub fn payload(height: usize, width: usize, region: [usize; 4]) -> Value {
        serde_json::json!({"kind": "region", "height": height, "width": width, "region": region})
    }

    pub fn evaluate(payload: &Value, mask: Option<&GridMask>) -> Result<Vec<f64>, PredictorFailure> {
        let bad = || PredictorFailure::Other("malformed region payload".into());
        let h = payload["height"].as_u64().ok_or_else(bad)? as usize;
        let w = payload["width"].as_u64().ok_or_else(bad)? as usize;
        let r: Vec<usize> = payload["region"]
            .as_array()
            .ok_or_else(bad)?
            .iter()
            .map(|v| v.as_u64().map(|x| x as usize))
            .collect::<Option<_>>()
            .ok_or_else(bad)?;
        if r.len() != 4 || r[0] >= r[2] || r[1] >= r[3] || r[2] > h || r[3] > w {
            return Err(bad());
        }
        let soft = mask.map(|m| m.upsample(h, w));
        let mut total = 0.0;
        for y in r[0]..r[2] {
            for x in r[1]..r[3] {
                total += soft.as_ref().map_or(1.0, |s| s[y * w + x]);
            }
        }
        let b = total / ((r[2] - r[0]) * (r[3] - r[1])) as f64;
        Ok(vec![b, 1.0 - b])
    }
}

impl MaskedImagePredictor for RegionBrightness {
    fn endpoint(&self) -> String {
        "in-process:region-brightness".into()
    }
    fn predictor_hash(&self) -> String {
        crate::digest::sha256_hex(b"region-brightness-v1")
    }
    fn score(&self, payload: &Value) -> Result<Vec<f64>, PredictorFailure> {
        Self::evaluate(payload, None)
    }
    fn score_masked(&self, payload: &Value, mask: &GridMask) -> Result<Vec<f64>, PredictorFailure> {
        Self::evaluate(payload, Some(mask))
    }
}
