use std::collections::BTreeSet;

use deliberate::audit::{stepping_clock, verify_bytes, AuditLog, LogKind, MemorySink, Verification};
use deliberate::dataset::Label;
use deliberate::explain::mask::{mask_importance, FnBlackBox, MaskConfig, MaskSampling};
use deliberate::finetune::{accumulate, merge_rehearsal, FinetuneSet, Labeled, SamplingPolicy, TemporaryPool};
use deliberate::par::Execution;
use deliberate::session::{Action, FinalLabel, GateError, SessionState, Step, StepFlags};
use deliberate::similarity::{euclidean, fit_pca, orient, top_k_similar, ReferenceEntry};
use deliberate::tree::best_split;
use proptest::prelude::*;
use serde_json::json;

fn vec_in(d: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, d)
}

fn linear(weights: Vec<f64>, offset: f64) -> impl Fn(&[f64]) -> Vec<f64> + Sync {
    move |x: &[f64]| {
        let s: f64 = offset + weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        vec![s, -s - 1e6]
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mask_scores_scale_with_the_scorer(
        (case, base, w) in (2usize..7).prop_flat_map(|d| (vec_in(d, -3.0, 3.0), vec_in(d, -3.0, 3.0), vec_in(d, -2.0, 2.0))),
        a in 0.1f64..20.0,
        seed in any::<u64>(),
    ) {
        let config = MaskConfig { n_masks: 64, ..MaskConfig::default() };
        let f = FnBlackBox::new("f", linear(w.clone(), 5.0));
        let wa: Vec<f64> = w.iter().map(|x| x * a).collect();
        let g = FnBlackBox::new("g", linear(wa, 5.0 * a));
        let s1 = mask_importance(&f, &case, &base, None, &config, seed, Execution::Sequential).unwrap();
        let s2 = mask_importance(&g, &case, &base, None, &config, seed, Execution::Sequential).unwrap();
        for (x, y) in s1.scores.iter().zip(&s2.scores) {
            prop_assert!((x * a - y).abs() <= 1e-9 * (1.0 + y.abs()), "{x} * {a} vs {y}");
        }
    }

    #[test]
    fn exhaustive_scores_shift_with_the_scorer(
        (case, base, w) in (1usize..6).prop_flat_map(|d| (vec_in(d, -3.0, 3.0), vec_in(d, -3.0, 3.0), vec_in(d, -2.0, 2.0))),
        b in -50.0f64..50.0,
        p in 0.1f64..0.9,
    ) {
        let config = MaskConfig { mask_prob: p, sampling: MaskSampling::Exhaustive, ..MaskConfig::default() };
        let f = FnBlackBox::new("f", linear(w.clone(), 0.0));
        let g = FnBlackBox::new("g", linear(w, b));
        let s1 = mask_importance(&f, &case, &base, None, &config, 0, Execution::Sequential).unwrap();
        let s2 = mask_importance(&g, &case, &base, None, &config, 0, Execution::Sequential).unwrap();
        for (x, y) in s1.scores.iter().zip(&s2.scores) {
            prop_assert!((x + b - y).abs() <= 1e-9, "{x} + {b} vs {y}");
        }
    }

    #[test]
    fn mask_scores_are_reproducible_across_execution_modes(
        case in vec_in(6, -2.0, 2.0),
        seed in any::<u64>(),
    ) {
        let f = FnBlackBox::new("f", |x: &[f64]| vec![x.iter().map(|v| v.sin()).sum::<f64>(), 0.0]);
        let base = vec![0.0; 6];
        let config = MaskConfig { n_masks: 100, ..MaskConfig::default() };
        let a = mask_importance(&f, &case, &base, None, &config, seed, Execution::Sequential).unwrap();
        let b = mask_importance(&f, &case, &base, None, &config, seed, Execution::Parallel).unwrap();
        prop_assert_eq!(a, b);
    }
}

fn brute_gini(columns: &[Vec<f64>], labels: &[usize], n_classes: usize) -> Option<f64> {
    let n = labels.len();
    let gini = |idx: &[usize]| {
        let m = idx.len() as f64;
        let mut c = vec![0.0; n_classes];
        idx.iter().for_each(|&i| c[labels[i]] += 1.0);
        1.0 - c.iter().map(|k| (k / m) * (k / m)).sum::<f64>()
    };
    let mut best: Option<f64> = None;
    for col in columns {
        let distinct: BTreeSet<u64> = col.iter().map(|x| x.to_bits()).collect();
        let mut vals: Vec<f64> = distinct.into_iter().map(f64::from_bits).collect();
        vals.sort_by(f64::total_cmp);
        for pair in vals.windows(2) {
            let t = (pair[0] + pair[1]) / 2.0;
            let left: Vec<usize> = (0..n).filter(|&i| col[i] <= t).collect();
            let right: Vec<usize> = (0..n).filter(|&i| col[i] > t).collect();
            let g = (left.len() as f64 * gini(&left) + right.len() as f64 * gini(&right)) / n as f64;
            best = Some(best.map_or(g, |b: f64| b.min(g)));
        }
    }
    best
}

fn split_problem() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>, usize)> {
    (2usize..4, 1usize..4, 2usize..14).prop_flat_map(|(k, c, n)| {
        (
            prop::collection::vec(prop::collection::vec((0u8..5).prop_map(f64::from), n), c),
            prop::collection::vec(0..k, n),
            Just(k),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn best_split_is_optimal_against_enumeration((columns, labels, k) in split_problem()) {
        let rows: Vec<usize> = (0..labels.len()).collect();
        let found = best_split(&columns, &labels, k, &rows);
        let oracle = brute_gini(&columns, &labels, k);
        match (found, oracle) {
            (None, None) => {}
            (Some(s), Some(g)) => {
                prop_assert!((s.weighted_gini(labels.len()) - g).abs() < 1e-12);
                let col = &columns[s.column];
                prop_assert!(col.iter().any(|x| *x <= s.threshold) && col.iter().any(|x| *x > s.threshold));
            }
            other => prop_assert!(false, "mismatch {other:?}"),
        }
    }

    #[test]
    fn top_k_matches_full_sort(
        (points, query) in (1usize..5).prop_flat_map(|d| (prop::collection::vec(vec_in(d, -4.0, 4.0), 1..60), vec_in(d, -4.0, 4.0))),
        k in 1usize..12,
    ) {
        let reference: Vec<ReferenceEntry> = points
            .iter()
            .enumerate()
            .map(|(i, e)| ReferenceEntry { case_id: (i as u64 * 7919) % 1000, label: Some(Label::Grant), embedding: e.clone() })
            .collect();
        let got = top_k_similar(&query, &reference, k, Execution::Sequential).unwrap();
        let mut all: Vec<(f64, u64)> = reference.iter().map(|r| (euclidean(&query, &r.embedding), r.case_id)).collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        all.truncate(k);
        let ids: Vec<(f64, u64)> = got.neighbors.iter().map(|n| (n.distance, n.case_id)).collect();
        prop_assert_eq!(ids, all);
        prop_assert_eq!(got.short, reference.len() < k);
    }
}

/// Cyclic Jacobi rotations on a small symmetric matrix.
#[allow(clippy::needless_range_loop)]
fn jacobi(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = a.len();
    let mut v: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for _ in 0..100 {
        let off: f64 = (0..d).flat_map(|i| (0..d).filter(move |j| *j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let values = (0..d).map(|i| a[i][i]).collect();
    let vectors = (0..d).map(|j| (0..d).map(|i| v[i][j]).collect()).collect();
    (values, vectors)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pca_agrees_with_jacobi(rows in (2usize..6).prop_flat_map(|d| prop::collection::vec(vec_in(d, -5.0, 5.0), 8..30))) {
        let d = rows[0].len();
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let cov: Vec<Vec<f64>> = (0..d)
            .map(|i| (0..d).map(|j| rows.iter().map(|r| (r[i] - mean[i]) * (r[j] - mean[j])).sum::<f64>() / n).collect())
            .collect();
        let (values, vectors) = jacobi(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
        let k = d.min(3);
        let model = fit_pca(&rows, k).unwrap();
        let total: f64 = values.iter().map(|v| v.max(0.0)).sum();
        for c in 0..k {
            let lam = values[order[c]];
            prop_assert!((model.explained_variance[c] - lam).abs() < 1e-9 * (1.0 + lam));
            prop_assert!((model.explained_variance_ratio[c] - lam / total).abs() < 1e-9);
            let gap_prev = if c == 0 { f64::INFINITY } else { values[order[c - 1]] - lam };
            let gap_next = if c + 1 < d { lam - values[order[c + 1]] } else { f64::INFINITY };
            if gap_prev.min(gap_next) > 1e-3 {
                let mut v = vectors[order[c]].clone();
                orient(&mut v);
                for (x, y) in model.components[c].iter().zip(&v) {
                    prop_assert!((x - y).abs() < 1e-6, "component {c}: {:?} vs {v:?}", model.components[c]);
                }
            }
        }
        for (i, a) in model.components.iter().enumerate() {
            for (j, b) in model.components.iter().enumerate() {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                prop_assert!((dot - f64::from(u8::from(i == j))).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn euclidean_is_a_metric(
        (a, b, c) in (1usize..6).prop_flat_map(|d| (vec_in(d, -1e3, 1e3), vec_in(d, -1e3, 1e3), vec_in(d, -1e3, 1e3))),
    ) {
        prop_assert_eq!(euclidean(&a, &a), 0.0);
        prop_assert_eq!(euclidean(&a, &b), euclidean(&b, &a));
        prop_assert!(euclidean(&a, &c) <= euclidean(&a, &b) + euclidean(&b, &c) + 1e-9);
    }
}

fn action() -> impl Strategy<Value = Action> {
    let label = prop::option::of(prop_oneof![Just(Label::Grant), Just(Label::Deny)]);
    let decision = prop_oneof![Just(FinalLabel::Grant), Just(FinalLabel::Deny), Just(FinalLabel::Abstain)];
    prop_oneof![
        label.clone().prop_map(|label| Action::Impression { label, note: "n".into() }),
        Just(Action::Advance),
        Just(Action::Advance),
        Just(Action::Back),
        Just(Action::Skip),
        label.prop_map(|label| Action::Annotate { label, note: "a".into() }),
        decision.prop_map(|decision| Action::Finalize { decision, note: None }),
    ]
}

fn flags() -> impl Strategy<Value = StepFlags> {
    (any::<bool>(), any::<bool>(), any::<bool>(), any::<bool>()).prop_map(|(explanation, similarity, saliency, early_abstention)| {
        StepFlags { explanation, similarity, saliency, early_abstention }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn session_gating_invariants(flags in flags(), actions in prop::collection::vec(action(), 1..40)) {
        let mut s = SessionState::new("s".into(), 3, flags, "m".into(), "t0");
        let enabled = s.enabled_steps();
        for (i, a) in actions.iter().enumerate() {
            let before = s.clone();
            let now = format!("t{}", i + 1);
            match s.apply(a, &now) {
                Ok(t) => {
                    prop_assert_eq!(t.from, before.step);
                    prop_assert_eq!(t.to, s.step);
                    prop_assert_eq!(s.seq, before.seq + 1);
                    prop_assert!(enabled.contains(&s.step));
                    if matches!(a, Action::Skip) {
                        prop_assert!(!before.suggestions_seen);
                        prop_assert_eq!(s.step, Step::ConfidenceShown);
                    }
                    if s.step == Step::Finalized {
                        let early = before.step != Step::ConfidenceShown;
                        if early {
                            prop_assert!(flags.early_abstention);
                            let abstained = matches!(a, Action::Finalize { decision: FinalLabel::Abstain, .. });
                            prop_assert!(abstained);
                        }
                        prop_assert!(s.decision.is_some());
                    }
                    if s.step > Step::FirstImpression && s.step < Step::ConfidenceShown {
                        prop_assert!(s.suggestions_seen);
                    }
                }
                Err(e) => {
                    prop_assert_eq!(&s, &before);
                    if before.step == Step::Finalized {
                        prop_assert!(matches!(e, GateError::Terminal { .. }), "{e:?}");
                    } else {
                        prop_assert_eq!(e.current(), before.step);
                    }
                }
            }
            prop_assert_eq!(s.legal_actions().is_empty(), s.step == Step::Finalized);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Item {
    id: u64,
    class: Option<usize>,
}

impl Labeled for Item {
    fn case_id(&self) -> u64 {
        self.id
    }
    fn class_index(&self) -> Option<usize> {
        self.class
    }
    fn with_class(&self, class: usize) -> Self {
        Item { id: self.id, class: Some(class) }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn binary_pairs_stay_balanced_while_the_pool_lasts(
        user_classes in prop::collection::vec(0usize..2, 1..60),
        pool_per_class in 0usize..40,
        seed in any::<u64>(),
    ) {
        let pool_items: Vec<Item> = (0..2 * pool_per_class).map(|i| Item { id: 10_000 + i as u64, class: Some(i % 2) }).collect();
        let mut pool = TemporaryPool::new(pool_items);
        let mut set = FinetuneSet::new(usize::MAX);
        let mut drawn = BTreeSet::new();
        let mut unpaired = 0usize;
        for (n, &c) in user_classes.iter().enumerate() {
            let other_left = pool.count_of(1 - c);
            let before = pool.len();
            let delta = accumulate(&mut set, &mut pool, &Item { id: n as u64, class: None }, c, &format!("s{n}"), 2, SamplingPolicy::BinaryPair, seed ^ n as u64);
            if other_left > 0 {
                prop_assert_eq!(delta.entries.len(), 2);
                prop_assert_eq!(delta.entries[1].class, 1 - c);
                prop_assert!(drawn.insert(delta.entries[1].case.id));
                prop_assert_eq!(pool.len(), before - 1);
            } else {
                prop_assert_eq!(delta.entries.len(), 1);
                prop_assert_eq!(delta.warnings.len(), 1);
                unpaired += 1;
            }
        }
        let counts = set.class_counts(2);
        prop_assert!(counts[0].abs_diff(counts[1]) <= unpaired);
        if unpaired == 0 {
            prop_assert_eq!(counts[0], counts[1]);
        }
        prop_assert_eq!(set.sessions(), user_classes.len());
    }

    #[test]
    fn rehearsal_merge_keeps_base_order_and_adds_new_ids(
        base_n in 0usize..20,
        updates in prop::collection::vec((0u64..40, 0usize..2), 0..30),
    ) {
        let base: Vec<Item> = (0..base_n as u64).map(|id| Item { id, class: Some(0) }).collect();
        let mut set = FinetuneSet::new(usize::MAX);
        let mut pool = TemporaryPool::new(Vec::new());
        for (n, (id, c)) in updates.iter().enumerate() {
            accumulate(&mut set, &mut pool, &Item { id: *id, class: None }, *c, &format!("s{n}"), 2, SamplingPolicy::BinaryPair, 0);
        }
        let merged = merge_rehearsal(&base, &set.entries);
        let new_ids: BTreeSet<u64> = updates.iter().map(|u| u.0).filter(|id| *id >= base_n as u64).collect();
        prop_assert_eq!(merged.len(), base_n + new_ids.len());
        for (i, m) in merged.iter().take(base_n).enumerate() {
            prop_assert_eq!(m.id, i as u64);
        }
        for m in &merged {
            if let Some(last) = updates.iter().rev().find(|u| u.0 == m.id) {
                prop_assert_eq!(m.class, Some(last.1));
            }
        }
        prop_assert_eq!(merge_rehearsal(&merged, &[]), merged);
    }
}

fn build_log(n: usize) -> Vec<u8> {
    let sink = MemorySink::new();
    let mut log = AuditLog::with_clock(Box::new(sink.clone()), stepping_clock(1_600_000_000_000_000, 17));
    for i in 0..n {
        log.append(LogKind::SessionEvent, json!({"i": i, "note": format!("entry {i}"), "score": i as f64 / 3.0}))
            .unwrap();
    }
    sink.bytes()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn any_single_byte_change_is_located(line in 0usize..12, offset in any::<prop::sample::Index>(), byte in 0x20u8..0x7f) {
        let bytes = build_log(12);
        let starts: Vec<usize> = std::iter::once(0).chain(bytes.iter().enumerate().filter(|(_, b)| **b == b'\n').map(|(i, _)| i + 1)).collect();
        let (lo, hi) = (starts[line], starts[line + 1] - 1);
        let pos = lo + offset.index(hi - lo);
        prop_assume!(bytes[pos] != byte);
        let mut tampered = bytes.clone();
        tampered[pos] = byte;
        prop_assert_eq!(verify_bytes(&tampered), Verification::FirstBadIndex(line as u64));
    }

    #[test]
    fn truncation_keeps_a_valid_prefix(keep in 0usize..12) {
        let bytes = build_log(12);
        let cut: Vec<u8> = bytes.split_inclusive(|b| *b == b'\n').take(keep).flatten().copied().collect();
        let ok = matches!(verify_bytes(&cut), Verification::Ok { entries, .. } if entries == keep as u64);
        prop_assert!(ok);
    }
}
