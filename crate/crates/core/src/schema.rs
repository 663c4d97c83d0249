//! Attribute schema for loan applications.

use serde::{Deserialize, Serialize};

/// The thirteen applicant attributes, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Age,
    Gender,
    Education,
    Income,
    EmploymentExperience,
    HomeOwnership,
    LoanAmount,
    LoanIntent,
    LoanInterestRate,
    LoanPercentIncome,
    CreditHistoryLength,
    CreditScore,
    PreviousLoanDefaults,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttributeKind {
    Integer,
    Real,
    Categorical,
    Flag,
}

impl Attribute {
    pub const ALL: [Attribute; 13] = [
        Attribute::Age,
        Attribute::Gender,
        Attribute::Education,
        Attribute::Income,
        Attribute::EmploymentExperience,
        Attribute::HomeOwnership,
        Attribute::LoanAmount,
        Attribute::LoanIntent,
        Attribute::LoanInterestRate,
        Attribute::LoanPercentIncome,
        Attribute::CreditHistoryLength,
        Attribute::CreditScore,
        Attribute::PreviousLoanDefaults,
    ];

    pub fn kind(self) -> AttributeKind {
        use Attribute::*;
        match self {
            Age | EmploymentExperience | CreditScore => AttributeKind::Integer,
            Income | LoanAmount | LoanInterestRate | LoanPercentIncome | CreditHistoryLength => {
                AttributeKind::Real
            }
            Gender | Education | HomeOwnership | LoanIntent => AttributeKind::Categorical,
            PreviousLoanDefaults => AttributeKind::Flag,
        }
    }

    /// Short human-facing name used in rule text and tables.
    pub fn label(self) -> &'static str {
        use Attribute::*;
        match self {
            Age => "age",
            Gender => "gender",
            Education => "education",
            Income => "income",
            EmploymentExperience => "employment experience",
            HomeOwnership => "home ownership",
            LoanAmount => "loan amount",
            LoanIntent => "loan intent",
            LoanInterestRate => "loan interest rate",
            LoanPercentIncome => "loan percent income",
            CreditHistoryLength => "credit history length",
            CreditScore => "credit score",
            PreviousLoanDefaults => "previous loan defaults",
        }
    }

    pub fn index(self) -> usize {
        Attribute::ALL.iter().position(|a| *a == self).expect("attribute listed")
    }
}

/// Column names and vocabularies for reading a tabular file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub version: String,
    /// Column name per attribute, in [`Attribute::ALL`] order.
    pub columns: Vec<String>,
    pub target: String,
    pub gender: Vec<String>,
    pub education: Vec<String>,
    pub home_ownership: Vec<String>,
    pub loan_intent: Vec<String>,
    /// Spellings accepted for the defaults flag, `(false, true)`.
    pub flag_values: (String, String),
}

fn strings(values: &[&str]) -> Vec<String> {
    values.iter().map(|s| s.to_string()).collect()
}

impl Schema {
    /// The layout of the public loan approval CSV.
    pub fn loan() -> Self {
        Schema {
            version: "loan-v1".into(),
            columns: strings(&[
                "person_age",
                "person_gender",
                "person_education",
                "person_income",
                "person_emp_exp",
                "person_home_ownership",
                "loan_amnt",
                "loan_intent",
                "loan_int_rate",
                "loan_percent_income",
                "cb_person_cred_hist_length",
                "credit_score",
                "previous_loan_defaults_on_file",
            ]),
            target: "loan_status".into(),
            gender: strings(&["female", "male"]),
            education: strings(&["Associate", "Bachelor", "Doctorate", "High School", "Master"]),
            home_ownership: strings(&["MORTGAGE", "OTHER", "OWN", "RENT"]),
            loan_intent: strings(&[
                "DEBTCONSOLIDATION",
                "EDUCATION",
                "HOMEIMPROVEMENT",
                "MEDICAL",
                "PERSONAL",
                "VENTURE",
            ]),
            flag_values: ("No".into(), "Yes".into()),
        }
    }

    pub fn column(&self, attr: Attribute) -> &str {
        &self.columns[attr.index()]
    }

    /// Declared vocabulary of a categorical attribute.
    pub fn vocabulary(&self, attr: Attribute) -> Option<&[String]> {
        match attr {
            Attribute::Gender => Some(&self.gender),
            Attribute::Education => Some(&self.education),
            Attribute::HomeOwnership => Some(&self.home_ownership),
            Attribute::LoanIntent => Some(&self.loan_intent),
            _ => None,
        }
    }

    pub fn flag_text(&self, value: bool) -> &str {
        if value {
            &self.flag_values.1
        } else {
            &self.flag_values.0
        }
    }
}

impl Default for Schema {
    fn default() -> Self {
        Schema::loan()
    }
}
