//! Rule-base file parsing and validation.
//!
//! The file format is TOML: a schema version, per-level scores, three
//! five-term variables, and the weighted rules. Loading refuses any file
//! that fails validation, so an engine can only be built from a rule
//! base whose partitions, weights, and coverage have all been checked.

use super::{
    AxisScale, FuzzyEngine, FuzzyError, FuzzyRule, LevelScores, LinguisticVariable,
    MembershipFunction, SafetyLevel, Term, VariableId,
};
use serde::Deserialize;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

pub(crate) const DEFAULT_RULE_BASE: &str = include_str!("../../data/fuzzy_rules.toml");

const SUPPORTED_SCHEMA: u32 = 1;
const EXPECTED_RULE_COUNT: usize = 45;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleBaseFile {
    schema_version: u32,
    scores: ScoresFile,
    variables: Vec<VariableFile>,
    rules: Vec<RuleFile>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoresFile {
    emergency_stop: f64,
    critical: f64,
    warning: f64,
    caution: f64,
    safe: f64,
    optimal: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct VariableFile {
    name: String,
    scale: String,
    range: [f64; 2],
    terms: Vec<TermFile>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TermFile {
    name: String,
    points: [f64; 3],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleFile {
    id: u32,
    when: BTreeMap<String, String>,
    then: String,
    weight: f64,
    description: String,
}

/// A single problem found while validating a rule base.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Violation {
    #[error("unsupported schema_version {found}, expected {SUPPORTED_SCHEMA}")]
    UnsupportedSchemaVersion { found: u32 },
    #[error("rule base has {found} rules, expected {EXPECTED_RULE_COUNT}")]
    RuleCount { found: usize },
    #[error("rule id {id} appears more than once")]
    DuplicateRuleId { id: u32 },
    #[error("rule {rule} references unknown variable '{name}'")]
    UnknownVariable { rule: u32, name: String },
    #[error("rule {rule} references unknown term '{term}' of variable '{variable}'")]
    UnknownTerm { rule: u32, variable: String, term: String },
    #[error("rule {rule} concludes unknown level '{name}'")]
    UnknownLevel { rule: u32, name: String },
    #[error("rule {rule} has no conditions")]
    NoConditions { rule: u32 },
    #[error("rule {rule} weight {weight} is outside (0, 1]")]
    WeightOutOfRange { rule: u32, weight: f64 },
    #[error("rule {rule} weight {weight} is outside the {lo}..={hi} band for '{conclusion}' conclusions")]
    WeightOutsideBand { rule: u32, conclusion: SafetyLevel, weight: f64, lo: f64, hi: f64 },
    #[error("no rule fires at the ({manipulability}, {condition_quality}, {velocity}) term cores")]
    CoverageHole {
        manipulability: String,
        condition_quality: String,
        velocity: String,
    },
    #[error("missing variable '{name}'")]
    MissingVariable { name: &'static str },
    #[error("variable '{name}' is defined more than once")]
    DuplicateVariable { name: String },
    #[error("variable '{variable}' has unknown scale '{scale}'")]
    BadScale { variable: String, scale: String },
    #[error("variable '{variable}' has {found} terms, expected 5")]
    TermCount { variable: String, found: usize },
    #[error("variable '{variable}' range [{lo}, {hi}] is not an increasing finite interval")]
    BadRange { variable: String, lo: f64, hi: f64 },
    #[error("term '{term}' of variable '{variable}' has unordered or non-finite breakpoints")]
    BadBreakpoints { variable: String, term: String },
    #[error("term cores of variable '{variable}' are not strictly increasing")]
    CoresNotIncreasing { variable: String },
    #[error("variable '{variable}' terms do not tile the axis: term '{term}' breaks the partition structure")]
    BrokenPartitionStructure { variable: String, term: String },
    #[error("variable '{variable}' memberships sum to {sum} at axis point {axis_point}, expected 1")]
    NotPartition { variable: String, axis_point: f64, sum: f64 },
    #[error("level scores must increase strictly from emergency_stop to optimal")]
    ScoresNotIncreasing,
}

/// Everything wrong with a candidate rule base. Loading succeeds only
/// when this is empty.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(f, "- {v}")?;
        }
        Ok(())
    }
}

fn weight_band(level: SafetyLevel) -> (f64, f64) {
    match level {
        SafetyLevel::EmergencyStop => (1.0, 1.0),
        SafetyLevel::Critical => (0.8, 0.9),
        SafetyLevel::Warning => (0.5, 0.8),
        SafetyLevel::Caution => (0.6, 0.7),
        SafetyLevel::Safe => (0.6, 0.8),
        SafetyLevel::Optimal => (0.9, 1.0),
    }
}

pub(crate) fn parse_and_validate(text: &str) -> Result<FuzzyEngine, FuzzyError> {
    let file: RuleBaseFile = toml::from_str(text)?;
    let mut report = ValidationReport::default();

    if file.schema_version != SUPPORTED_SCHEMA {
        report.violations.push(Violation::UnsupportedSchemaVersion {
            found: file.schema_version,
        });
    }

    let scores = LevelScores([
        file.scores.emergency_stop,
        file.scores.critical,
        file.scores.warning,
        file.scores.caution,
        file.scores.safe,
        file.scores.optimal,
    ]);
    if scores.0.iter().any(|s| !s.is_finite())
        || scores.0.windows(2).any(|w| w[0] >= w[1])
    {
        report.violations.push(Violation::ScoresNotIncreasing);
    }

    let variables = resolve_variables(&file.variables, &mut report);
    let rules = match &variables {
        Some(vars) => resolve_rules(&file.rules, vars, &mut report),
        None => None,
    };

    if let (Some(vars), Some(rules)) = (&variables, &rules) {
        check_coverage(rules, vars, &mut report);
    }

    if report.is_empty() {
        // Both are present: a missing piece would have left a violation.
        Ok(FuzzyEngine::from_validated_parts(
            variables.unwrap(),
            rules.unwrap(),
            scores,
        ))
    } else {
        Err(FuzzyError::InvalidRuleBase(report))
    }
}

fn resolve_variables(
    files: &[VariableFile],
    report: &mut ValidationReport,
) -> Option<[LinguisticVariable; 3]> {
    let mut seen = BTreeSet::new();
    for vf in files {
        if !seen.insert(vf.name.clone()) {
            report
                .violations
                .push(Violation::DuplicateVariable { name: vf.name.clone() });
        }
    }

    let mut out = Vec::with_capacity(3);
    for id in VariableId::ALL {
        let Some(vf) = files.iter().find(|v| v.name == id.name()) else {
            report
                .violations
                .push(Violation::MissingVariable { name: id.name() });
            continue;
        };
        if let Some(var) = resolve_one_variable(id, vf, report) {
            out.push(var);
        }
    }

    let arr: [LinguisticVariable; 3] = out.try_into().ok()?;
    Some(arr)
}

fn resolve_one_variable(
    id: VariableId,
    vf: &VariableFile,
    report: &mut ValidationReport,
) -> Option<LinguisticVariable> {
    let before = report.violations.len();

    let scale = match vf.scale.as_str() {
        "linear" => AxisScale::Linear,
        "log10" => AxisScale::Log10,
        other => {
            report.violations.push(Violation::BadScale {
                variable: vf.name.clone(),
                scale: other.to_string(),
            });
            AxisScale::Linear
        }
    };
    let transform = |x: f64| match scale {
        AxisScale::Linear => x,
        AxisScale::Log10 => x.max(f64::MIN_POSITIVE).log10(),
    };

    let (lo, hi) = (transform(vf.range[0]), transform(vf.range[1]));
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        report.violations.push(Violation::BadRange {
            variable: vf.name.clone(),
            lo: vf.range[0],
            hi: vf.range[1],
        });
        return None;
    }

    if vf.terms.len() != 5 {
        report.violations.push(Violation::TermCount {
            variable: vf.name.clone(),
            found: vf.terms.len(),
        });
        return None;
    }

    let mut terms = Vec::with_capacity(5);
    for tf in &vf.terms {
        let [a, b, c] = tf.points.map(transform);
        if !(a.is_finite() && b.is_finite() && c.is_finite() && a <= b && b <= c) {
            report.violations.push(Violation::BadBreakpoints {
                variable: vf.name.clone(),
                term: tf.name.clone(),
            });
            return None;
        }
        terms.push(Term { name: tf.name.clone(), mf: MembershipFunction { a, b, c } });
    }

    if terms.windows(2).any(|w| w[0].mf.b >= w[1].mf.b) {
        report
            .violations
            .push(Violation::CoresNotIncreasing { variable: vf.name.clone() });
    }

    // Partition structure: shoulder ends pinned to the range, every foot
    // on the neighboring core.
    let structure_ok = |k: usize, t: &Term| -> bool {
        let left_ok = if k == 0 {
            t.mf.a == lo && t.mf.b == lo
        } else {
            t.mf.a == terms[k - 1].mf.b
        };
        let right_ok = if k == 4 {
            t.mf.b == hi && t.mf.c == hi
        } else {
            t.mf.c == terms[k + 1].mf.b
        };
        left_ok && right_ok
    };
    for k in 0..5 {
        if !structure_ok(k, &terms[k]) {
            report.violations.push(Violation::BrokenPartitionStructure {
                variable: vf.name.clone(),
                term: terms[k].name.clone(),
            });
        }
    }

    let var = LinguisticVariable {
        id,
        scale,
        range: (lo, hi),
        terms: terms.try_into().expect("checked length 5"),
    };

    // Numeric cross-check of the partition over a fine sweep.
    for k in 0..=1000 {
        let x = lo + (hi - lo) * k as f64 / 1000.0;
        let sum: f64 = var.terms.iter().map(|t| super::triangular_mf(x, &t.mf)).sum();
        if (sum - 1.0).abs() > 1e-9 {
            report.violations.push(Violation::NotPartition {
                variable: vf.name.clone(),
                axis_point: x,
                sum,
            });
            break;
        }
    }

    if report.violations.len() > before {
        None
    } else {
        Some(var)
    }
}

fn resolve_rules(
    files: &[RuleFile],
    vars: &[LinguisticVariable; 3],
    report: &mut ValidationReport,
) -> Option<Vec<FuzzyRule>> {
    if files.len() != EXPECTED_RULE_COUNT {
        report.violations.push(Violation::RuleCount { found: files.len() });
    }

    let mut ids = BTreeSet::new();
    let mut rules = Vec::with_capacity(files.len());
    let mut ok = true;

    for rf in files {
        if !ids.insert(rf.id) {
            report.violations.push(Violation::DuplicateRuleId { id: rf.id });
        }

        if rf.when.is_empty() {
            report.violations.push(Violation::NoConditions { rule: rf.id });
            ok = false;
        }

        let mut conditions = Vec::with_capacity(rf.when.len());
        for (var_name, term_name) in &rf.when {
            let Some(var) = vars.iter().find(|v| v.id.name() == var_name.as_str()) else {
                report.violations.push(Violation::UnknownVariable {
                    rule: rf.id,
                    name: var_name.clone(),
                });
                ok = false;
                continue;
            };
            let Some(term) = var.term_index(term_name) else {
                report.violations.push(Violation::UnknownTerm {
                    rule: rf.id,
                    variable: var_name.clone(),
                    term: term_name.clone(),
                });
                ok = false;
                continue;
            };
            conditions.push((var.id, term));
        }

        let Some(conclusion) = SafetyLevel::from_name(&rf.then) else {
            report
                .violations
                .push(Violation::UnknownLevel { rule: rf.id, name: rf.then.clone() });
            ok = false;
            continue;
        };

        if !(rf.weight.is_finite() && rf.weight > 0.0 && rf.weight <= 1.0) {
            report
                .violations
                .push(Violation::WeightOutOfRange { rule: rf.id, weight: rf.weight });
            ok = false;
        } else {
            let (lo, hi) = weight_band(conclusion);
            if rf.weight < lo || rf.weight > hi {
                report.violations.push(Violation::WeightOutsideBand {
                    rule: rf.id,
                    conclusion,
                    weight: rf.weight,
                    lo,
                    hi,
                });
                ok = false;
            }
        }

        rules.push(FuzzyRule {
            id: rf.id,
            conditions,
            conclusion,
            weight: rf.weight,
            description: rf.description.clone(),
        });
    }

    ok.then_some(rules)
}

/// Every combination of term cores must fire at least one rule. At a
/// core, a term has full membership and its neighbors have none, so a
/// rule fires there exactly when each of its conditions names that
/// cell's term.
fn check_coverage(
    rules: &[FuzzyRule],
    vars: &[LinguisticVariable; 3],
    report: &mut ValidationReport,
) {
    for mi in 0..5 {
        for ci in 0..5 {
            for vi in 0..5 {
                let cell = [mi, ci, vi];
                let fired = rules.iter().any(|r| {
                    r.conditions
                        .iter()
                        .all(|&(var, term)| cell[var as usize] == term)
                });
                if !fired {
                    report.violations.push(Violation::CoverageHole {
                        manipulability: vars[0].terms[mi].name.clone(),
                        condition_quality: vars[1].terms[ci].name.clone(),
                        velocity: vars[2].terms[vi].name.clone(),
                    });
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn expect_violation(text: &str, pred: impl Fn(&Violation) -> bool, what: &str) {
        match parse_and_validate(text) {
            Err(FuzzyError::InvalidRuleBase(report)) => {
                assert!(
                    report.violations.iter().any(pred),
                    "expected {what}, got:\n{report}"
                );
            }
            Err(other) => panic!("expected validation failure, got parse error: {other}"),
            Ok(_) => panic!("expected validation failure ({what}), but the base loaded"),
        }
    }

    #[test]
    fn default_base_is_clean() {
        parse_and_validate(DEFAULT_RULE_BASE).unwrap();
    }

    #[test]
    fn dropping_a_rule_breaks_the_count() {
        let idx = DEFAULT_RULE_BASE.rfind("[[rules]]").unwrap();
        let text = &DEFAULT_RULE_BASE[..idx];
        expect_violation(
            text,
            |v| matches!(v, Violation::RuleCount { found: 44 }),
            "rule count violation",
        );
    }

    #[test]
    fn unknown_term_is_reported() {
        let text = DEFAULT_RULE_BASE.replacen(
            "condition_quality = \"critical\" }",
            "condition_quality = \"awful\" }",
            1,
        );
        expect_violation(
            &text,
            |v| matches!(v, Violation::UnknownTerm { rule: 1, .. }),
            "unknown term violation",
        );
    }

    #[test]
    fn emergency_weight_below_band_is_reported() {
        let text = DEFAULT_RULE_BASE.replacen("weight = 1.0", "weight = 0.4", 1);
        expect_violation(
            &text,
            |v| matches!(v, Violation::WeightOutsideBand { rule: 1, .. }),
            "weight band violation",
        );
    }

    #[test]
    fn removing_a_coverage_rule_leaves_a_hole() {
        // Re-pointing rule 34 at good conditioning uncovers the
        // (very_high, fair, very_slow..medium) cells.
        let text = DEFAULT_RULE_BASE.replacen(
            "when = { manipulability = \"very_high\", condition_quality = \"fair\" }",
            "when = { manipulability = \"very_high\", condition_quality = \"good\" }",
            1,
        );
        expect_violation(
            &text,
            |v| matches!(v, Violation::CoverageHole { .. }),
            "coverage hole violation",
        );
    }

    #[test]
    fn non_increasing_scores_are_reported() {
        let text = DEFAULT_RULE_BASE.replacen("optimal = 100.0", "optimal = 50.0", 1);
        expect_violation(
            &text,
            |v| matches!(v, Violation::ScoresNotIncreasing),
            "scores violation",
        );
    }

    #[test]
    fn broken_partition_is_reported() {
        // Moving an interior foot off the neighboring core breaks the
        // partition structure.
        let text = DEFAULT_RULE_BASE.replacen(
            "points = [0.005, 0.01, 0.05]",
            "points = [0.005, 0.01, 0.04]",
            1,
        );
        expect_violation(
            &text,
            |v| {
                matches!(
                    v,
                    Violation::BrokenPartitionStructure { .. } | Violation::NotPartition { .. }
                )
            },
            "partition violation",
        );
    }

    #[test]
    fn unknown_top_level_key_is_a_parse_error() {
        let text = format!("{DEFAULT_RULE_BASE}\nextra_key = 1\n");
        assert!(matches!(parse_and_validate(&text), Err(FuzzyError::Parse(_))));
    }
}
