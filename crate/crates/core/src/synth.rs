//! Synthetic applicants laid out like the public loan approval file.
//!
//! Used for demos, benchmarks and tests when the real file is not at hand.
//! Marginals are rough approximations; the outcome follows a logistic rule in
//! which a previous default always means denial, and a high loan-to-income
//! ratio, a high rate and renting favour approval.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, LogNormal, Normal};

use crate::dataset::{CaseRecord, Dataset, Label};
use crate::schema::Schema;

fn pick<'a>(rng: &mut ChaCha8Rng, options: &'a [(&'a str, f64)]) -> &'a str {
    let total: f64 = options.iter().map(|o| o.1).sum();
    let mut u = rng.random::<f64>() * total;
    for (name, w) in options {
        if u < *w {
            return name;
        }
        u -= w;
    }
    options[options.len() - 1].0
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Generates `n` labeled applicants deterministically from `seed`.
pub fn loan_like(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let age_extra = Gamma::<f64>::new(2.0, 3.5).expect("valid gamma");
    let amount = LogNormal::<f64>::new(8.9, 0.6).expect("valid lognormal");
    let score = Normal::<f64>::new(632.0, 50.0).expect("valid normal");
    let noise = Normal::<f64>::new(0.0, 2.0).expect("valid normal");

    let records = (0..n)
        .map(|i| {
            let age = (20.0 + age_extra.sample(&mut rng)).round().min(80.0) as u32;
            let gender = pick(&mut rng, &[("female", 0.45), ("male", 0.55)]);
            let education = pick(
                &mut rng,
                &[
                    ("Associate", 0.27),
                    ("Bachelor", 0.30),
                    ("Doctorate", 0.014),
                    ("High School", 0.27),
                    ("Master", 0.146),
                ],
            );
            let exp = ((age as f64 - 20.0) * rng.random_range(0.3..1.0)).round().max(0.0) as u32;
            let edu_bonus = match education {
                "Master" | "Doctorate" => 0.2,
                "Bachelor" => 0.1,
                _ => 0.0,
            };
            let income = LogNormal::<f64>::new(10.9 + 0.015 * exp as f64 + edu_bonus, 0.5)
                .expect("valid lognormal")
                .sample(&mut rng)
                .max(8000.0)
                .round();
            let home = pick(
                &mut rng,
                &[("MORTGAGE", 0.41), ("OTHER", 0.004), ("OWN", 0.066), ("RENT", 0.52)],
            );
            let mut loan = amount.sample(&mut rng).clamp(500.0, 35000.0).round();
            if loan / income > 0.66 {
                loan = (income * rng.random_range(0.02..0.6)).round().max(500.0);
            }
            let intent = pick(
                &mut rng,
                &[
                    ("DEBTCONSOLIDATION", 0.16),
                    ("EDUCATION", 0.2),
                    ("HOMEIMPROVEMENT", 0.11),
                    ("MEDICAL", 0.19),
                    ("PERSONAL", 0.17),
                    ("VENTURE", 0.17),
                ],
            );
            let credit_score = score.sample(&mut rng).clamp(390.0, 850.0).round() as u32;
            let rate = round2(
                (11.0 + (650.0 - credit_score as f64) / 40.0 + noise.sample(&mut rng)).clamp(5.42, 20.0),
            );
            let hist = ((age as f64 - 20.0) * 0.6 + rng.random_range(0.0..4.0)).round().clamp(2.0, 30.0);
            let defaults = rng.random::<f64>() < 0.5;
            let pct = round2(loan / income);

            let grant = if defaults {
                false
            } else {
                let home_term = match home {
                    "RENT" => 1.1,
                    "OWN" => -1.5,
                    "MORTGAGE" => -0.4,
                    _ => 0.3,
                };
                let intent_term = match intent {
                    "MEDICAL" | "DEBTCONSOLIDATION" => 0.3,
                    "VENTURE" | "EDUCATION" => -0.3,
                    _ => 0.0,
                };
                let logit = -0.5 + 10.0 * (pct - 0.15) + 0.3 * (rate - 11.0) + home_term + intent_term
                    - (income - 60000.0) / 100000.0;
                rng.random::<f64>() < 1.0 / (1.0 + (-logit).exp())
            };

            CaseRecord {
                row_id: i as u64,
                age,
                gender: gender.into(),
                education: education.into(),
                income,
                employment_experience: exp,
                home_ownership: home.into(),
                loan_amount: loan,
                loan_intent: intent.into(),
                loan_interest_rate: rate,
                loan_percent_income: pct,
                credit_history_length: hist,
                credit_score,
                previous_loan_defaults: defaults,
                label: Some(if grant { Label::Grant } else { Label::Deny }),
            }
        })
        .collect();
    Dataset::new(records, Schema::loan())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_consistent() {
        let a = loan_like(500, 3);
        let b = loan_like(500, 3);
        assert_eq!(a.content_hash, b.content_hash);
        assert!(a.records.iter().all(|r| r.percent_income_consistent()));
        assert!(a.records.iter().all(|r| r.loan_percent_income <= 1.0 && r.age >= 18));
        let counts = a.label_counts();
        assert!(counts[&Label::Grant] > 50 && counts[&Label::Deny] > 200);
    }
}
