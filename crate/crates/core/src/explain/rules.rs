//! Rule-path explanations: the split predicates a case satisfies on its way
//! from the root to its leaf.

use serde::{Deserialize, Serialize};

use super::palette::Palette;
use super::ExplainError;
use crate::dataset::{AttrValue, CaseRecord, Label};
use crate::encode::Column;
use crate::schema::Attribute;
use crate::tree::{argmax_counts, Node, TreeModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparator {
    AtMost,
    Above,
    Is,
    IsNot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum Operand {
    Number(f64),
    Category(String),
    Flag(bool),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clause {
    pub attribute: Attribute,
    pub comparator: Comparator,
    pub operand: Operand,
    pub satisfied: bool,
}

impl Clause {
    /// Evaluates the predicate against the record's raw attribute value.
    pub fn holds(&self, case: &CaseRecord) -> bool {
        match (case.value(self.attribute), self.comparator, &self.operand) {
            (AttrValue::Number(x), Comparator::AtMost, Operand::Number(t)) => x <= *t,
            (AttrValue::Number(x), Comparator::Above, Operand::Number(t)) => x > *t,
            (AttrValue::Category(c), Comparator::Is, Operand::Category(k)) => c == k,
            (AttrValue::Category(c), Comparator::IsNot, Operand::Category(k)) => c != k,
            (AttrValue::Flag(b), Comparator::Is, Operand::Flag(f)) => b == *f,
            (AttrValue::Flag(b), Comparator::IsNot, Operand::Flag(f)) => b != *f,
            _ => false,
        }
    }

    /// Predicate for one side of a split on an encoded column.
    pub fn for_split(column: &Column, threshold: f64, went_right: bool) -> Clause {
        let (comparator, operand) = match column {
            Column::Numeric { .. } => (
                if went_right { Comparator::Above } else { Comparator::AtMost },
                Operand::Number(threshold),
            ),
            Column::Flag { .. } => (Comparator::Is, Operand::Flag(went_right)),
            Column::OneHot { category, .. } => (
                if went_right { Comparator::Is } else { Comparator::IsNot },
                Operand::Category(category.clone()),
            ),
        };
        Clause {
            attribute: column.attribute(),
            comparator,
            operand,
            satisfied: false,
        }
    }

    pub fn text(&self) -> String {
        let name = self.attribute.label();
        match (&self.comparator, &self.operand) {
            (Comparator::AtMost, Operand::Number(t)) => format!("{name} is at most {}", short_number(*t)),
            (Comparator::Above, Operand::Number(t)) => format!("{name} is higher than {}", short_number(*t)),
            (Comparator::Is, Operand::Category(c)) => format!("{name} is {c}"),
            (Comparator::IsNot, Operand::Category(c)) => format!("{name} is not {c}"),
            (Comparator::Is, Operand::Flag(true)) | (Comparator::IsNot, Operand::Flag(false)) => {
                format!("there are {name} on file")
            }
            (Comparator::Is, Operand::Flag(false)) | (Comparator::IsNot, Operand::Flag(true)) => {
                format!("there are no {name} on file")
            }
            (c, o) => format!("{name} {c:?} {o:?}"),
        }
    }
}

fn short_number(x: f64) -> String {
    let s = format!("{x:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleExplanation {
    pub clauses: Vec<Clause>,
    pub leaf_class_counts: Vec<usize>,
    pub source_model_hash: String,
}

impl RuleExplanation {
    /// Class of the leaf the clauses lead to.
    pub fn leaf_class(&self) -> usize {
        argmax_counts(&self.leaf_class_counts)
    }
}

pub fn extract_rule_path(model: &TreeModel, case: &CaseRecord) -> RuleExplanation {
    let (x, _) = model.encode(case);
    let traversal = model.tree.traverse(&x);
    let clauses = traversal
        .path
        .iter()
        .map(|&(node, right)| match &model.tree.nodes[node] {
            Node::Split { column, threshold, .. } => {
                let mut c = Clause::for_split(&model.encoder.columns[*column], *threshold, right);
                c.satisfied = c.holds(case);
                c
            }
            Node::Leaf { .. } => unreachable!("paths only pass through splits"),
        })
        .collect();
    RuleExplanation {
        clauses,
        leaf_class_counts: model.tree.nodes[traversal.leaf].class_counts().to_vec(),
        source_model_hash: model.model_hash.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyledLine {
    pub text: String,
    pub color: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyledRuleText {
    /// Framing shown before the lines.
    pub preamble: String,
    pub lines: Vec<StyledLine>,
    pub palette_id: String,
}

pub const PREAMBLE: &str = "Keep in mind that";

fn styled(texts: Vec<String>, palette: &Palette) -> StyledRuleText {
    StyledRuleText {
        preamble: PREAMBLE.into(),
        lines: texts
            .into_iter()
            .enumerate()
            .map(|(i, text)| StyledLine {
                text,
                color: palette.color(i).to_string(),
            })
            .collect(),
        palette_id: palette.id.clone(),
    }
}

/// One coloured line per clause in path order. A path with no clauses
/// (single-leaf tree) renders as one line naming the unconditional class.
pub fn render_rules(rules: &RuleExplanation, palette_id: &str) -> Result<StyledRuleText, ExplainError> {
    let palette = Palette::by_id(palette_id)?;
    let texts = if rules.clauses.is_empty() {
        let class = Label::from_class_index(rules.leaf_class()).map_or("the majority class", Label::as_str);
        vec![format!("the model assigns {class} to every case, without conditions")]
    } else {
        rules.clauses.iter().map(Clause::text).collect()
    };
    Ok(styled(texts, &palette))
}

/// Same as [`render_rules`], but a clause-free path does not name the class.
/// Used before the confidence step, where the outcome stays hidden.
pub fn render_rules_outcome_hidden(
    rules: &RuleExplanation,
    palette_id: &str,
) -> Result<StyledRuleText, ExplainError> {
    if rules.clauses.is_empty() {
        let palette = Palette::by_id(palette_id)?;
        Ok(styled(vec!["the model applies no conditions to this case".into()], &palette))
    } else {
        render_rules(rules, palette_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clause(attribute: Attribute, comparator: Comparator, operand: Operand) -> Clause {
        Clause {
            attribute,
            comparator,
            operand,
            satisfied: true,
        }
    }

    #[test]
    fn three_clauses_three_colors() {
        let rules = RuleExplanation {
            clauses: vec![
                clause(Attribute::PreviousLoanDefaults, Comparator::Is, Operand::Flag(false)),
                clause(Attribute::LoanPercentIncome, Comparator::Above, Operand::Number(0.235)),
                clause(Attribute::HomeOwnership, Comparator::Is, Operand::Category("RENT".into())),
            ],
            leaf_class_counts: vec![3, 300],
            source_model_hash: "h".into(),
        };
        let text = render_rules(&rules, "vivid6").unwrap();
        assert_eq!(text.preamble, "Keep in mind that");
        assert_eq!(text.lines.len(), 3);
        let mut colors: Vec<_> = text.lines.iter().map(|l| l.color.clone()).collect();
        colors.dedup();
        assert_eq!(colors.len(), 3);
        assert_eq!(text.lines[0].text, "there are no previous loan defaults on file");
        assert_eq!(text.lines[1].text, "loan percent income is higher than 0.235");
        assert_eq!(text.lines[2].text, "home ownership is RENT");
    }

    #[test]
    fn empty_path_names_majority() {
        let rules = RuleExplanation {
            clauses: vec![],
            leaf_class_counts: vec![2, 5],
            source_model_hash: "h".into(),
        };
        let text = render_rules(&rules, "vivid6").unwrap();
        assert_eq!(text.lines.len(), 1);
        assert!(text.lines[0].text.contains("grant"));
        let hidden = render_rules_outcome_hidden(&rules, "vivid6").unwrap();
        assert!(!hidden.lines[0].text.contains("grant"));
    }

    #[test]
    fn unknown_palette_is_error() {
        let rules = RuleExplanation {
            clauses: vec![],
            leaf_class_counts: vec![1, 0],
            source_model_hash: "h".into(),
        };
        assert!(matches!(render_rules(&rules, "nope"), Err(ExplainError::UnknownPalette(_))));
    }
}
