//! Deterministic construction of step payloads and the records logged for
//! them. The engine and the replayer share these builders, so a replayed
//! payload is byte-identical to the one served.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::config::ExplainerConfig;
use crate::dataset::{CaseRecord, Dataset, Label};
use crate::digest::{digest_of, sha256};
use crate::explain::rules::render_rules_outcome_hidden;
use crate::explain::{extract_rule_path, mask_importance, ExplainError, FnBlackBox, MaskConfig, MaskSampling, RuleExplanation, Saliency};
use crate::par::Execution;
use crate::schema::Schema;
use crate::session::{CaseView, Decision, FeatureScore, NeighborView, SaliencyView, StepFlags, StepPayload};
use crate::similarity::{relative_distance_plot, SimilarityError, SimilarityIndex};
use crate::tree::{ClassDistribution, TreeModel};

/// First eight bytes of `SHA-256("{base}/{tag}")`, big-endian.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let h = sha256(format!("{base}/{tag}").as_bytes());
    u64::from_be_bytes(h[..8].try_into().expect("eight bytes"))
}

/// The training set the similarity step retrieves from.
#[derive(Debug)]
pub struct Reference {
    pub dataset: Dataset,
    pub index: SimilarityIndex,
    by_id: HashMap<u64, usize>,
}

impl Reference {
    pub fn fit(dataset: Dataset, n_components: usize, exec: Execution) -> Result<Reference, SimilarityError> {
        let index = SimilarityIndex::fit(&dataset, n_components, exec)?;
        let by_id = dataset.records.iter().enumerate().map(|(i, r)| (r.row_id, i)).collect();
        Ok(Reference { dataset, index, by_id })
    }

    pub fn record(&self, row_id: u64) -> Option<&CaseRecord> {
        self.by_id.get(&row_id).map(|&i| &self.dataset.records[i])
    }

    pub fn hash(&self) -> &str {
        &self.dataset.content_hash
    }
}

pub struct Context<'a> {
    pub model: &'a TreeModel,
    pub reference: &'a Reference,
    pub schema: &'a Schema,
    pub explainer: &'a ExplainerConfig,
    pub k: usize,
    pub flags: StepFlags,
    pub exec: Execution,
}

pub fn case_view(case_id: u64, record: &CaseRecord, schema: &Schema) -> CaseView {
    CaseView { case_id, attributes: record.display_values(schema) }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub case_id: u64,
    pub model_hash: String,
    pub rules: RuleExplanation,
    pub rules_digest: String,
    pub features: Vec<String>,
    pub saliency: Option<Saliency>,
    pub saliency_digest: Option<String>,
    pub palette: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborRecord {
    pub case_id: u64,
    pub outcome: Option<Label>,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborsRecord {
    pub case_id: u64,
    pub reference_hash: String,
    pub n_components: usize,
    pub k: usize,
    pub neighbors: Vec<NeighborRecord>,
    pub short: bool,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceRecord {
    pub case_id: u64,
    pub model_hash: String,
    pub distribution: ClassDistribution,
    pub predicted_class: String,
    pub leaf: usize,
    pub unknown_routes: Vec<String>,
}

/// Mask importance of each attribute of `record` under `model`.
pub fn tabular_saliency(model: &TreeModel, record: &CaseRecord, config: &MaskConfig, seed: u64, exec: Execution) -> Result<(Vec<String>, Saliency), ExplainError> {
    let (x, _) = model.encode(record);
    let groups: Vec<(crate::schema::Attribute, Vec<usize>)> =
        model.encoder.attribute_groups().into_iter().filter(|(_, cols)| !cols.is_empty()).collect();
    let names = groups.iter().map(|(a, _)| a.label().to_string()).collect();
    let cols: Vec<Vec<usize>> = groups.into_iter().map(|(_, c)| c).collect();
    let scorer = FnBlackBox::new(model.model_hash.clone(), |v: &[f64]| model.predict_encoded(v));
    let s = mask_importance(&scorer, &x, &model.column_means, Some(&cols), config, seed, exec)?;
    Ok((names, s))
}

pub fn mask_config(explainer: &ExplainerConfig) -> MaskConfig {
    MaskConfig {
        n_masks: explainer.n_masks,
        mask_prob: explainer.mask_prob,
        sampling: MaskSampling::Random,
        baseline_id: "training-mean".into(),
    }
}

pub fn explanation(ctx: &Context, case_id: u64, record: &CaseRecord, mask_seed: u64) -> Result<(StepPayload, ExplanationRecord), ExplainError> {
    let rules = extract_rule_path(ctx.model, record);
    let styled = render_rules_outcome_hidden(&rules, &ctx.explainer.palette)?;
    let (features, saliency) = if ctx.flags.saliency {
        let (names, s) = tabular_saliency(ctx.model, record, &mask_config(ctx.explainer), mask_seed, ctx.exec)?;
        (names, Some(s))
    } else {
        (Vec::new(), None)
    };
    let view = saliency.as_ref().map(|s| SaliencyView {
        scores: features.iter().zip(&s.scores).map(|(f, v)| FeatureScore { feature: f.clone(), score: *v }).collect(),
        n_masks: s.n_masks,
        mask_prob: s.mask_prob,
        seed: s.seed,
    });
    let payload = StepPayload::Explanation { case: case_view(case_id, record, ctx.schema), rules: Some(styled), saliency: view };
    let record = ExplanationRecord {
        case_id,
        model_hash: ctx.model.model_hash.clone(),
        rules_digest: digest_of(&rules),
        rules,
        saliency_digest: saliency.as_ref().map(|s| digest_of(&s.scores)),
        features,
        saliency,
        palette: ctx.explainer.palette.clone(),
    };
    Ok((payload, record))
}

pub fn similarity(ctx: &Context, case_id: u64, record: &CaseRecord) -> Result<(StepPayload, NeighborsRecord), SimilarityError> {
    let (query, set) = ctx.reference.index.query(record, ctx.k, ctx.exec)?;
    let (plot, plot_notice) = match relative_distance_plot(&set, &query) {
        Ok(p) => (Some(p), None),
        Err(n) => (None, Some(n.message)),
    };
    let neighbors: Vec<NeighborView> = set
        .neighbors
        .iter()
        .map(|n| NeighborView {
            case_id: n.case_id,
            outcome: n.original_label,
            distance: n.distance,
            attributes: ctx.reference.record(n.case_id).map(|r| r.display_values(ctx.schema)).unwrap_or_default(),
        })
        .collect();
    let records: Vec<NeighborRecord> = set
        .neighbors
        .iter()
        .map(|n| NeighborRecord { case_id: n.case_id, outcome: n.original_label, distance: n.distance })
        .collect();
    let payload = StepPayload::Similarity { case: case_view(case_id, record, ctx.schema), neighbors, short: set.short, plot, plot_notice };
    Ok((
        payload,
        NeighborsRecord {
            case_id,
            reference_hash: ctx.reference.hash().to_string(),
            n_components: ctx.reference.index.pca.n_components,
            k: ctx.k,
            digest: digest_of(&records),
            neighbors: records,
            short: set.short,
        },
    ))
}

pub fn confidence(ctx: &Context, case_id: u64, record: &CaseRecord) -> (StepPayload, ConfidenceRecord) {
    let p = ctx.model.predict_distribution(record);
    let predicted_class = ctx.model.classes[p.predicted].clone();
    let payload = StepPayload::Confidence {
        case: case_view(case_id, record, ctx.schema),
        distribution: p.distribution.clone(),
        predicted_class: predicted_class.clone(),
    };
    (
        payload,
        ConfidenceRecord {
            case_id,
            model_hash: ctx.model.model_hash.clone(),
            distribution: p.distribution,
            predicted_class,
            leaf: p.leaf,
            unknown_routes: p.unknown_routes.iter().map(|a| a.label().to_string()).collect(),
        },
    )
}

pub fn decision_payload(case_id: u64, record: &CaseRecord, schema: &Schema, decision: &Decision) -> StepPayload {
    StepPayload::Decision { case: case_view(case_id, record, schema), decision: decision.clone() }
}
