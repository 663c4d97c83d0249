//! Loan application records, CSV ingest, canonical form and balanced splits.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest;
use crate::par::{self, Execution};
use crate::schema::{Attribute, AttributeKind, Schema};

/// Binary loan outcome. Class index order is `[deny, grant]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Deny,
    Grant,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Deny, Label::Grant];

    pub fn class_index(self) -> usize {
        match self {
            Label::Deny => 0,
            Label::Grant => 1,
        }
    }

    pub fn from_class_index(idx: usize) -> Option<Label> {
        Label::ALL.get(idx).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Deny => "deny",
            Label::Grant => "grant",
        }
    }

    pub fn opposite(self) -> Label {
        match self {
            Label::Deny => Label::Grant,
            Label::Grant => Label::Deny,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Names of the two loan classes in class-index order.
pub fn class_names() -> Vec<String> {
    Label::ALL.iter().map(|l| l.as_str().to_string()).collect()
}

/// One applicant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    /// Position of the row in the source file; stable across splits.
    pub row_id: u64,
    pub age: u32,
    pub gender: String,
    pub education: String,
    pub income: f64,
    pub employment_experience: u32,
    pub home_ownership: String,
    pub loan_amount: f64,
    pub loan_intent: String,
    pub loan_interest_rate: f64,
    pub loan_percent_income: f64,
    pub credit_history_length: f64,
    pub credit_score: u32,
    pub previous_loan_defaults: bool,
    pub label: Option<Label>,
}

/// A single attribute value borrowed from a record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttrValue<'a> {
    Number(f64),
    Category(&'a str),
    Flag(bool),
}

impl CaseRecord {
    pub fn value(&self, attr: Attribute) -> AttrValue<'_> {
        use Attribute::*;
        match attr {
            Age => AttrValue::Number(self.age as f64),
            Gender => AttrValue::Category(&self.gender),
            Education => AttrValue::Category(&self.education),
            Income => AttrValue::Number(self.income),
            EmploymentExperience => AttrValue::Number(self.employment_experience as f64),
            HomeOwnership => AttrValue::Category(&self.home_ownership),
            LoanAmount => AttrValue::Number(self.loan_amount),
            LoanIntent => AttrValue::Category(&self.loan_intent),
            LoanInterestRate => AttrValue::Number(self.loan_interest_rate),
            LoanPercentIncome => AttrValue::Number(self.loan_percent_income),
            CreditHistoryLength => AttrValue::Number(self.credit_history_length),
            CreditScore => AttrValue::Number(self.credit_score as f64),
            PreviousLoanDefaults => AttrValue::Flag(self.previous_loan_defaults),
        }
    }

    /// Attribute values as display strings, in canonical attribute order.
    pub fn display_values(&self, schema: &Schema) -> Vec<(String, String)> {
        Attribute::ALL
            .iter()
            .map(|&a| {
                let v = match self.value(a) {
                    AttrValue::Number(x) => format_number(x),
                    AttrValue::Category(c) => c.to_string(),
                    AttrValue::Flag(b) => schema.flag_text(b).to_string(),
                };
                (a.label().to_string(), v)
            })
            .collect()
    }

    /// `loan_amount / income` agrees with the stored ratio within 1e-2.
    pub fn percent_income_consistent(&self) -> bool {
        if self.income <= 0.0 {
            return true;
        }
        (self.loan_amount / self.income - self.loan_percent_income).abs() <= 1e-2
    }

    fn canonical_line(&self, schema: &Schema, out: &mut String) {
        use std::fmt::Write;
        let _ = write!(out, "{}", self.row_id);
        for attr in Attribute::ALL {
            out.push(',');
            match self.value(attr) {
                AttrValue::Number(x) => out.push_str(&format_number(x)),
                AttrValue::Category(c) => out.push_str(c),
                AttrValue::Flag(b) => out.push_str(schema.flag_text(b)),
            }
        }
        out.push(',');
        if let Some(l) = self.label {
            out.push_str(l.as_str());
        }
        out.push('\n');
    }
}

/// Shortest decimal form that round-trips through `f64`.
pub fn format_number(x: f64) -> String {
    format!("{x}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestWarning {
    pub row: usize,
    pub message: String,
}

/// An ordered collection of records plus the digest of its canonical form.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<CaseRecord>,
    pub schema: Schema,
    pub content_hash: String,
    /// Consistency flags raised on ingest. Not part of the content hash.
    pub warnings: Vec<IngestWarning>,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("schema error: missing column `{0}`")]
    MissingColumn(String),
    #[error("dataset has no records")]
    Empty,
    #[error("row {row}: column `{column}`: {message}")]
    Row {
        row: usize,
        column: String,
        message: String,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid split request: {0}")]
    InvalidSplit(String),
    #[error(
        "insufficient rows for label {label}: need {needed} per label, have {available}; \
         max feasible sizes with this case/temporary request: train_n={max_train}, case_n={max_case}"
    )]
    Capacity {
        label: Label,
        needed: usize,
        available: usize,
        max_train: usize,
        max_case: usize,
    },
    #[error("unlabeled rows present at indices {0:?}")]
    Unlabeled(Vec<usize>),
}

impl Dataset {
    pub fn new(records: Vec<CaseRecord>, schema: Schema) -> Self {
        let content_hash = digest::sha256_hex(canonical_text(&records, &schema).as_bytes());
        Dataset {
            records,
            schema,
            content_hash,
            warnings: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn schema_version(&self) -> &str {
        &self.schema.version
    }

    /// The canonical serialization the content hash is computed over.
    pub fn canonical(&self) -> String {
        canonical_text(&self.records, &self.schema)
    }

    pub fn label_counts(&self) -> BTreeMap<Label, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            if let Some(l) = r.label {
                *counts.entry(l).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Equal counts for both labels and no unlabeled rows.
    pub fn is_balanced(&self) -> bool {
        let counts = self.label_counts();
        let labeled: usize = counts.values().sum();
        labeled == self.len()
            && Label::ALL
                .iter()
                .all(|l| counts.get(l).copied().unwrap_or(0) == self.len() / 2)
            && self.len().is_multiple_of(2)
    }

    pub fn unlabeled_indices(&self) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.label.is_none())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn require_labeled(&self) -> Result<(), DatasetError> {
        let missing = self.unlabeled_indices();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(DatasetError::Unlabeled(missing))
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let io = |source| DatasetError::Io { path: path.display().to_string(), source };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io)?;
        }
        fs::write(path, self.canonical()).map_err(io)
    }

    pub fn find_row(&self, row_id: u64) -> Option<&CaseRecord> {
        self.records.iter().find(|r| r.row_id == row_id)
    }
}

fn canonical_text(records: &[CaseRecord], schema: &Schema) -> String {
    let mut out = String::with_capacity(64 + records.len() * 128);
    out.push_str("row_id");
    for c in &schema.columns {
        out.push(',');
        out.push_str(c);
    }
    out.push(',');
    out.push_str(&schema.target);
    out.push('\n');
    for r in records {
        r.canonical_line(schema, &mut out);
    }
    out
}

/// Reads a comma-separated file laid out per `schema`.
///
/// An optional leading `row_id` column is honoured; otherwise rows are
/// numbered from zero in file order. The target column accepts `grant`/`deny`
/// or the source encoding `1`/`0`; an empty cell means unlabeled.
pub fn load_dataset(path: &Path, schema: &Schema) -> Result<Dataset, DatasetError> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_dataset(&text, schema)
}

pub fn parse_dataset(text: &str, schema: &Schema) -> Result<Dataset, DatasetError> {
    if text.trim().is_empty() {
        return Err(DatasetError::Empty);
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let position = |name: &str| headers.iter().position(|h| h == name);

    let mut attr_cols = Vec::with_capacity(Attribute::ALL.len());
    for attr in Attribute::ALL {
        let name = schema.column(attr);
        attr_cols.push(position(name).ok_or_else(|| DatasetError::MissingColumn(name.into()))?);
    }
    let target_col =
        position(&schema.target).ok_or_else(|| DatasetError::MissingColumn(schema.target.clone()))?;
    let id_col = position("row_id");

    let rows: Vec<csv::StringRecord> = reader.records().collect::<Result<_, _>>()?;
    if rows.is_empty() {
        return Err(DatasetError::Empty);
    }

    let indexed: Vec<(usize, &csv::StringRecord)> = rows.iter().enumerate().collect();
    let parsed = par::map_slice(Execution::default(), &indexed, |(i, row)| {
        parse_row(*i, row, schema, &attr_cols, target_col, id_col)
    });
    let records = parsed.into_iter().collect::<Result<Vec<_>, _>>()?;

    let warnings = records
        .iter()
        .enumerate()
        .filter(|(_, r)| !r.percent_income_consistent())
        .map(|(row, r)| IngestWarning {
            row,
            message: format!(
                "loan_percent_income {} differs from loan_amount/income {:.4}",
                r.loan_percent_income,
                r.loan_amount / r.income
            ),
        })
        .collect();

    let mut ds = Dataset::new(records, schema.clone());
    ds.warnings = warnings;
    Ok(ds)
}

fn parse_row(
    row: usize,
    rec: &csv::StringRecord,
    schema: &Schema,
    attr_cols: &[usize],
    target_col: usize,
    id_col: Option<usize>,
) -> Result<CaseRecord, DatasetError> {
    let cell = |col: usize| rec.get(col).unwrap_or("");
    let err = |column: &str, message: String| DatasetError::Row {
        row,
        column: column.to_string(),
        message,
    };

    let mut numbers = [0.0f64; 13];
    let mut cats: [&str; 13] = [""; 13];
    let mut flag = false;
    for (k, attr) in Attribute::ALL.iter().enumerate() {
        let name = schema.column(*attr);
        let raw = cell(attr_cols[k]);
        match attr.kind() {
            AttributeKind::Integer | AttributeKind::Real => {
                let v: f64 = raw
                    .parse()
                    .map_err(|_| err(name, format!("cannot parse `{raw}` as a number")))?;
                if !v.is_finite() {
                    return Err(err(name, format!("non-finite value `{raw}`")));
                }
                if attr.kind() == AttributeKind::Integer && v.fract() != 0.0 {
                    return Err(err(name, format!("expected an integer, got `{raw}`")));
                }
                check_range(*attr, v).map_err(|m| err(name, m))?;
                numbers[k] = v;
            }
            AttributeKind::Categorical => {
                let vocab = schema.vocabulary(*attr).expect("categorical has vocabulary");
                if !vocab.iter().any(|v| v == raw) {
                    return Err(err(name, format!("`{raw}` is not in the declared vocabulary")));
                }
                cats[k] = raw;
            }
            AttributeKind::Flag => {
                flag = if raw == schema.flag_values.1 {
                    true
                } else if raw == schema.flag_values.0 {
                    false
                } else {
                    return Err(err(name, format!("`{raw}` is not a recognised flag value")));
                };
            }
        }
    }

    let label = parse_label(cell(target_col)).map_err(|m| err(&schema.target, m))?;
    let row_id = match id_col {
        Some(c) => cell(c)
            .parse::<u64>()
            .map_err(|_| err("row_id", format!("cannot parse `{}`", cell(c))))?,
        None => row as u64,
    };

    use Attribute::*;
    Ok(CaseRecord {
        row_id,
        age: numbers[Age.index()] as u32,
        gender: cats[Gender.index()].to_string(),
        education: cats[Education.index()].to_string(),
        income: numbers[Income.index()],
        employment_experience: numbers[EmploymentExperience.index()] as u32,
        home_ownership: cats[HomeOwnership.index()].to_string(),
        loan_amount: numbers[LoanAmount.index()],
        loan_intent: cats[LoanIntent.index()].to_string(),
        loan_interest_rate: numbers[LoanInterestRate.index()],
        loan_percent_income: numbers[LoanPercentIncome.index()],
        credit_history_length: numbers[CreditHistoryLength.index()],
        credit_score: numbers[CreditScore.index()] as u32,
        previous_loan_defaults: flag,
        label,
    })
}

fn check_range(attr: Attribute, v: f64) -> Result<(), String> {
    use Attribute::*;
    let ok = match attr {
        Age => v >= 18.0,
        LoanAmount => v > 0.0,
        LoanPercentIncome => (0.0..=1.0).contains(&v),
        _ => v >= 0.0,
    };
    if ok {
        Ok(())
    } else {
        Err(format!("value {v} out of range"))
    }
}

fn parse_label(raw: &str) -> Result<Option<Label>, String> {
    match raw {
        "" => Ok(None),
        "grant" | "1" | "1.0" => Ok(Some(Label::Grant)),
        "deny" | "0" | "0.0" => Ok(Some(Label::Deny)),
        other => Err(format!("unknown label `{other}`")),
    }
}

/// The three disjoint outputs of [`balance_and_split`].
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub case_study: Dataset,
    pub temporary: Dataset,
}

/// Draws a balanced training set, a balanced case-study set and a temporary
/// pool from `dataset`, discarding the excess rows.
///
/// The temporary pool takes `temp_n / 2` rows per label; an odd remainder goes
/// to the label with more rows left over. Each output keeps file order.
pub fn balance_and_split(
    dataset: &Dataset,
    train_n: usize,
    case_n: usize,
    temp_n: usize,
    seed: u64,
) -> Result<Splits, DatasetError> {
    if !train_n.is_multiple_of(2) || !case_n.is_multiple_of(2) {
        return Err(DatasetError::InvalidSplit(format!(
            "train_n ({train_n}) and case_n ({case_n}) must be even to be label-balanced"
        )));
    }
    dataset.require_labeled()?;

    let mut by_label: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
    for (i, r) in dataset.records.iter().enumerate() {
        by_label.entry(r.label.expect("checked")).or_default().push(i);
    }
    let available = |l: Label| by_label.get(&l).map_or(0, Vec::len);

    let half_train = train_n / 2;
    let half_case = case_n / 2;
    let base = half_train + half_case;
    let mut temp_share: BTreeMap<Label, usize> = Label::ALL.iter().map(|&l| (l, temp_n / 2)).collect();
    if temp_n % 2 == 1 {
        let left = |l: Label| available(l).saturating_sub(base + temp_n / 2);
        let extra = if left(Label::Grant) > left(Label::Deny) {
            Label::Grant
        } else {
            Label::Deny
        };
        *temp_share.get_mut(&extra).expect("present") += 1;
    }

    for l in Label::ALL {
        let needed = base + temp_share[&l];
        let have = available(l);
        if have < needed {
            let room = have.saturating_sub(temp_share[&l]);
            let max_case = (2 * room.min(half_case)).min(case_n);
            let max_train = 2 * room.saturating_sub(max_case / 2);
            return Err(DatasetError::Capacity {
                label: l,
                needed,
                available: have,
                max_train,
                max_case,
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut case, mut temp) = (Vec::new(), Vec::new(), Vec::new());
    for l in Label::ALL {
        let mut idx = by_label.remove(&l).unwrap_or_default();
        idx.shuffle(&mut rng);
        train.extend_from_slice(&idx[..half_train]);
        case.extend_from_slice(&idx[half_train..base]);
        temp.extend_from_slice(&idx[base..base + temp_share[&l]]);
    }

    let build = |mut picks: Vec<usize>| {
        picks.sort_unstable();
        let records = picks.iter().map(|&i| dataset.records[i].clone()).collect();
        Dataset::new(records, dataset.schema.clone())
    };
    Ok(Splits {
        train: build(train),
        case_study: build(case),
        temporary: build(temp),
    })
}
