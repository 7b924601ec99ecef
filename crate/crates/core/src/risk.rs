//! Risk classification over a controlled vocabulary.
//!
//! A [`RuleTable`] is an ordered list of rules, each mapping a conjunction of
//! term-set conditions to a [`RiskClass`]. Rules are evaluated in severity
//! order (Unacceptable, High, Limited, Minimal; file order within a tier).
//! The first rule that fires decides the class and every rule that fires is
//! reported as rationale. Tables must contain an unconditional rule.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

/// Training compute above which a general-purpose model carries systemic
/// risk.
pub const SYSTEMIC_RISK_FLOPS: f64 = 1e25;

/// Ordered from most to least severe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RiskClass {
    Unacceptable,
    High,
    Limited,
    Minimal,
}

impl fmt::Display for RiskClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RiskClass::Unacceptable => "Unacceptable",
            RiskClass::High => "High",
            RiskClass::Limited => "Limited",
            RiskClass::Minimal => "Minimal",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Domain,
    Purpose,
    Capability,
    AiUser,
    AiSubject,
}

impl Field {
    pub const ALL: [Field; 5] = [Field::Domain, Field::Purpose, Field::Capability, Field::AiUser, Field::AiSubject];

    pub fn name(self) -> &'static str {
        match self {
            Field::Domain => "domain",
            Field::Purpose => "purpose",
            Field::Capability => "capability",
            Field::AiUser => "ai_user",
            Field::AiSubject => "ai_subject",
        }
    }
}

/// Allowed terms per field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabularyTerms {
    pub version: String,
    pub domain: Vec<String>,
    pub purpose: Vec<String>,
    pub capability: Vec<String>,
    pub ai_user: Vec<String>,
    pub ai_subject: Vec<String>,
}

impl VocabularyTerms {
    pub fn terms(&self, field: Field) -> &[String] {
        match field {
            Field::Domain => &self.domain,
            Field::Purpose => &self.purpose,
            Field::Capability => &self.capability,
            Field::AiUser => &self.ai_user,
            Field::AiSubject => &self.ai_subject,
        }
    }

    pub fn contains(&self, field: Field, term: &str) -> bool {
        self.terms(field).iter().any(|t| t == term)
    }

    /// Terms of `field` sharing a word with `term`; all terms of the field
    /// when none do.
    pub fn suggestions(&self, field: Field, term: &str) -> Vec<String> {
        let words: BTreeSet<String> = term.split_whitespace().map(str::to_lowercase).collect();
        let related: Vec<String> =
            self.terms(field).iter().filter(|t| t.split_whitespace().any(|w| words.contains(w))).cloned().collect();
        if related.is_empty() {
            self.terms(field).to_vec()
        } else {
            related
        }
    }
}

/// Conditions are conjunctive across fields; within a field the input must
/// be one of the listed terms (for capabilities: any input capability). An
/// empty list places no condition on that field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub name: String,
    pub class: RiskClass,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub domain: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub purpose: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub capability: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ai_user: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ai_subject: Vec<String>,
}

impl Rule {
    pub fn condition(&self, field: Field) -> &[String] {
        match field {
            Field::Domain => &self.domain,
            Field::Purpose => &self.purpose,
            Field::Capability => &self.capability,
            Field::AiUser => &self.ai_user,
            Field::AiSubject => &self.ai_subject,
        }
    }

    pub fn is_unconditional(&self) -> bool {
        Field::ALL.iter().all(|&f| self.condition(f).is_empty())
    }

    pub fn fires(&self, input: &RiskInput) -> bool {
        let one_of = |set: &[String], value: &str| set.is_empty() || set.iter().any(|t| t == value);
        one_of(&self.domain, &input.domain)
            && one_of(&self.purpose, &input.purpose)
            && (self.capability.is_empty() || input.capabilities.iter().any(|c| self.capability.contains(c)))
            && one_of(&self.ai_user, &input.ai_user)
            && one_of(&self.ai_subject, &input.ai_subject)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleTable {
    pub version: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
    pub rules: Vec<Rule>,
}

impl RuleTable {
    /// Checks that rule names are unique, every condition term is in
    /// `vocab`, and an unconditional rule exists.
    pub fn validate(&self, vocab: &VocabularyTerms) -> Result<(), RiskError> {
        let mut names = BTreeSet::new();
        for rule in &self.rules {
            if !names.insert(rule.name.as_str()) {
                return Err(RiskError::InvalidTable(alloc::format!("duplicate rule name `{}`", rule.name)));
            }
            for field in Field::ALL {
                if let Some(t) = rule.condition(field).iter().find(|t| !vocab.contains(field, t)) {
                    return Err(RiskError::InvalidTable(alloc::format!(
                        "rule `{}` uses {} term `{t}` missing from the vocabulary",
                        rule.name,
                        field.name()
                    )));
                }
            }
        }
        if !self.rules.iter().any(Rule::is_unconditional) {
            return Err(RiskError::InvalidTable("no unconditional fallback rule".to_string()));
        }
        Ok(())
    }

    /// Rules in evaluation order.
    pub fn ordered(&self) -> Vec<&Rule> {
        let mut rules: Vec<&Rule> = self.rules.iter().collect();
        rules.sort_by_key(|r| r.class);
        rules
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskInput {
    pub domain: String,
    pub purpose: String,
    pub capabilities: Vec<String>,
    pub ai_user: String,
    pub ai_subject: String,
    #[serde(default)]
    pub is_gpai: bool,
    #[serde(default)]
    pub training_flops: Option<f64>,
}

impl RiskInput {
    /// Trimmed, lowercased copy; vocabulary terms are stored this way.
    pub fn normalized(&self) -> RiskInput {
        let norm = |s: &str| s.trim().to_lowercase();
        RiskInput {
            domain: norm(&self.domain),
            purpose: norm(&self.purpose),
            capabilities: self.capabilities.iter().map(|c| norm(c)).collect(),
            ai_user: norm(&self.ai_user),
            ai_subject: norm(&self.ai_subject),
            is_gpai: self.is_gpai,
            training_flops: self.training_flops,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Classification {
    pub risk_class: RiskClass,
    pub systemic_risk: bool,
    /// Names of every rule that fired, in evaluation order.
    pub rationale: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RiskError {
    UnknownTerm { field: Field, term: String, suggestions: Vec<String> },
    InvalidTable(String),
}

impl fmt::Display for RiskError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RiskError::UnknownTerm { field, term, suggestions } => {
                write!(f, "unknown {} term `{term}`; expected one of: {}", field.name(), suggestions.join(", "))
            }
            RiskError::InvalidTable(msg) => write!(f, "invalid rule table: {msg}"),
        }
    }
}

pub fn systemic_risk(is_gpai: bool, training_flops: Option<f64>) -> bool {
    is_gpai && training_flops.is_some_and(|f| f >= SYSTEMIC_RISK_FLOPS)
}

/// Classifies `input` after normalizing it and checking every term against
/// `vocab`.
pub fn classify(table: &RuleTable, vocab: &VocabularyTerms, input: &RiskInput) -> Result<Classification, RiskError> {
    let input = input.normalized();
    let singles = [
        (Field::Domain, &input.domain),
        (Field::Purpose, &input.purpose),
        (Field::AiUser, &input.ai_user),
        (Field::AiSubject, &input.ai_subject),
    ];
    let capabilities = input.capabilities.iter().map(|c| (Field::Capability, c));
    for (field, term) in singles.into_iter().chain(capabilities) {
        if !vocab.contains(field, term) {
            return Err(RiskError::UnknownTerm { field, term: term.clone(), suggestions: vocab.suggestions(field, term) });
        }
    }

    let fired: Vec<&Rule> = table.ordered().into_iter().filter(|r| r.fires(&input)).collect();
    let risk_class = fired
        .first()
        .map(|r| r.class)
        .ok_or_else(|| RiskError::InvalidTable("no rule fired; the table lacks a fallback".to_string()))?;
    Ok(Classification {
        risk_class,
        systemic_risk: systemic_risk(input.is_gpai, input.training_flops),
        rationale: fired.iter().map(|r| r.name.clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    fn vocab() -> VocabularyTerms {
        VocabularyTerms {
            version: "t".into(),
            domain: s(&["health", "retail", "mail"]),
            purpose: s(&["scoring people", "spam detection", "chat"]),
            capability: s(&["chatbot", "classifier"]),
            ai_user: s(&["business"]),
            ai_subject: s(&["consumer"]),
        }
    }

    fn rule(name: &str, class: RiskClass) -> Rule {
        Rule {
            name: name.into(),
            class,
            description: String::new(),
            domain: vec![],
            purpose: vec![],
            capability: vec![],
            ai_user: vec![],
            ai_subject: vec![],
        }
    }

    fn table() -> RuleTable {
        // Deliberately out of severity order.
        RuleTable {
            version: "t".into(),
            note: String::new(),
            rules: vec![
                rule("fallback", RiskClass::Minimal),
                Rule { capability: s(&["chatbot"]), ..rule("chatbot", RiskClass::Limited) },
                Rule { domain: s(&["health"]), ..rule("health", RiskClass::High) },
                Rule { purpose: s(&["scoring people"]), ..rule("scoring", RiskClass::Unacceptable) },
            ],
        }
    }

    fn input(domain: &str, purpose: &str, caps: &[&str]) -> RiskInput {
        RiskInput {
            domain: domain.into(),
            purpose: purpose.into(),
            capabilities: s(caps),
            ai_user: "business".into(),
            ai_subject: "consumer".into(),
            is_gpai: false,
            training_flops: None,
        }
    }

    #[test]
    fn severity_order_and_rationale() {
        let c = classify(&table(), &vocab(), &input("health", "scoring people", &["chatbot"])).unwrap();
        assert_eq!(c.risk_class, RiskClass::Unacceptable);
        assert_eq!(c.rationale, ["scoring", "health", "chatbot", "fallback"]);
        let c = classify(&table(), &vocab(), &input("retail", "chat", &["chatbot"])).unwrap();
        assert_eq!(c.risk_class, RiskClass::Limited);
        let c = classify(&table(), &vocab(), &input("mail", "spam detection", &[])).unwrap();
        assert_eq!(c.risk_class, RiskClass::Minimal);
        assert_eq!(c.rationale, ["fallback"]);
    }

    #[test]
    fn input_is_normalized() {
        let c = classify(&table(), &vocab(), &input(" Health ", "chat", &[])).unwrap();
        assert_eq!(c.risk_class, RiskClass::High);
    }

    #[test]
    fn unknown_terms_get_suggestions() {
        let err = classify(&table(), &vocab(), &input("retail", "social scoring", &[])).unwrap_err();
        match err {
            RiskError::UnknownTerm { field, term, suggestions } => {
                assert_eq!(field, Field::Purpose);
                assert_eq!(term, "social scoring");
                assert_eq!(suggestions, ["scoring people"]);
            }
            other => panic!("{other:?}"),
        }
        let err = classify(&table(), &vocab(), &input("retail", "chat", &["robot"])).unwrap_err();
        assert!(
            matches!(err, RiskError::UnknownTerm { field: Field::Capability, ref suggestions, .. } if suggestions.len() == 2)
        );
    }

    #[test]
    fn systemic_threshold() {
        assert!(systemic_risk(true, Some(2e25)));
        assert!(systemic_risk(true, Some(1e25)));
        assert!(!systemic_risk(true, Some(9.9e24)));
        assert!(!systemic_risk(false, Some(2e25)));
        assert!(!systemic_risk(true, None));
    }

    #[test]
    fn validation() {
        assert!(table().validate(&vocab()).is_ok());
        let mut t = table();
        t.rules.remove(0);
        assert!(t.validate(&vocab()).is_err());
        let mut t = table();
        t.rules.push(Rule { domain: s(&["space"]), ..rule("space", RiskClass::High) });
        assert!(t.validate(&vocab()).is_err());
        let mut t = table();
        t.rules.push(rule("fallback", RiskClass::High));
        assert!(t.validate(&vocab()).is_err());
    }
}
