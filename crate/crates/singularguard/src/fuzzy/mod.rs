//! Weighted fuzzy safety classification.
//!
//! Three linguistic variables — manipulability, condition quality (on a
//! log10 axis), and mean joint speed — each carry five triangular terms
//! forming a partition of unity. A rule's firing strength is the minimum
//! of its condition memberships times its confidence weight; per-level
//! activations aggregate by maximum; the safety score is the
//! activation-weighted mean of the level scores and the classification is
//! the argmax level, ties resolved toward the more dangerous level.

mod rules;

pub use rules::{ValidationReport, Violation};

use crate::kinematics::JointVelocities;
use crate::metrics::SingularityMetrics;
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Discrete safety levels, ordered most dangerous first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SafetyLevel {
    EmergencyStop,
    Critical,
    Warning,
    Caution,
    Safe,
    Optimal,
}

impl SafetyLevel {
    pub const ALL: [SafetyLevel; 6] = [
        SafetyLevel::EmergencyStop,
        SafetyLevel::Critical,
        SafetyLevel::Warning,
        SafetyLevel::Caution,
        SafetyLevel::Safe,
        SafetyLevel::Optimal,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SafetyLevel::EmergencyStop => "emergency_stop",
            SafetyLevel::Critical => "critical",
            SafetyLevel::Warning => "warning",
            SafetyLevel::Caution => "caution",
            SafetyLevel::Safe => "safe",
            SafetyLevel::Optimal => "optimal",
        }
    }

    pub fn from_name(name: &str) -> Option<SafetyLevel> {
        SafetyLevel::ALL.iter().copied().find(|l| l.name() == name)
    }

    fn index(&self) -> usize {
        *self as usize
    }
}

impl fmt::Display for SafetyLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Numeric score per level, strictly increasing from most dangerous to
/// safest. Defaults: 0, 20, 40, 60, 80, 100.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevelScores(pub [f64; 6]);

impl Default for LevelScores {
    fn default() -> Self {
        LevelScores([0.0, 20.0, 40.0, 60.0, 80.0, 100.0])
    }
}

impl LevelScores {
    pub fn score(&self, level: SafetyLevel) -> f64 {
        self.0[level.index()]
    }
}

/// The three input variables of the safety classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VariableId {
    Manipulability,
    ConditionQuality,
    Velocity,
}

impl VariableId {
    pub const ALL: [VariableId; 3] = [
        VariableId::Manipulability,
        VariableId::ConditionQuality,
        VariableId::Velocity,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            VariableId::Manipulability => "manipulability",
            VariableId::ConditionQuality => "condition_quality",
            VariableId::Velocity => "velocity",
        }
    }

    fn index(&self) -> usize {
        *self as usize
    }
}

/// Triangular membership function with breakpoints `a <= b <= c`.
/// Zero outside `[a, c]`, one at `b`, linear in between. A degenerate
/// side (`a == b` or `b == c`) makes a shoulder that returns one at the
/// flat boundary.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MembershipFunction {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl MembershipFunction {
    pub fn new(a: f64, b: f64, c: f64) -> Self {
        assert!(
            a.is_finite() && b.is_finite() && c.is_finite() && a <= b && b <= c,
            "membership breakpoints must be finite and ordered: {a}, {b}, {c}"
        );
        MembershipFunction { a, b, c }
    }
}

pub fn triangular_mf(x: f64, mf: &MembershipFunction) -> f64 {
    if x < mf.a || x > mf.c {
        0.0
    } else if x == mf.b {
        1.0
    } else if x < mf.b {
        (x - mf.a) / (mf.b - mf.a)
    } else {
        (mf.c - x) / (mf.c - mf.b)
    }
}

/// How raw inputs map onto a variable's axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AxisScale {
    Linear,
    /// The axis is log10 of the raw value (used for the condition number).
    Log10,
}

/// One named term of a linguistic variable.
#[derive(Clone, Debug)]
pub struct Term {
    pub name: String,
    pub mf: MembershipFunction,
}

/// A five-term linguistic variable over a bounded axis. Inputs are
/// clamped into the axis range before membership evaluation, so values
/// beyond the end cores take the end term at full membership.
#[derive(Clone, Debug)]
pub struct LinguisticVariable {
    pub id: VariableId,
    pub scale: AxisScale,
    /// Axis range after scale transform.
    pub range: (f64, f64),
    pub terms: [Term; 5],
}

impl LinguisticVariable {
    /// Transforms, clamps, and evaluates all five term memberships.
    pub fn fuzzify(&self, raw: f64) -> [f64; 5] {
        let x = match self.scale {
            AxisScale::Linear => raw,
            AxisScale::Log10 => raw.max(f64::MIN_POSITIVE).log10(),
        };
        let x = x.clamp(self.range.0, self.range.1);
        let mut out = [0.0; 5];
        for (i, t) in self.terms.iter().enumerate() {
            out[i] = triangular_mf(x, &t.mf);
        }
        out
    }

    pub fn term_index(&self, name: &str) -> Option<usize> {
        self.terms.iter().position(|t| t.name == name)
    }

    /// Core (peak position) of a term on the transformed axis.
    pub fn core(&self, term: usize) -> f64 {
        self.terms[term].mf.b
    }

    /// Core of a term in raw input units.
    pub fn raw_core(&self, term: usize) -> f64 {
        match self.scale {
            AxisScale::Linear => self.terms[term].mf.b,
            AxisScale::Log10 => 10f64.powf(self.terms[term].mf.b),
        }
    }
}

/// A rule: up to three (variable, term) conditions, a conclusion level,
/// and a confidence weight.
#[derive(Clone, Debug)]
pub struct FuzzyRule {
    pub id: u32,
    /// Resolved (variable, term-index) pairs, at most one per variable.
    pub conditions: Vec<(VariableId, usize)>,
    pub conclusion: SafetyLevel,
    pub weight: f64,
    pub description: String,
}

/// Outcome of one assessment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SafetyAssessment {
    pub classification: SafetyLevel,
    /// Activation-weighted mean of the level scores.
    pub safety_score: f64,
    /// Per-level aggregated activation, indexed by `SafetyLevel::ALL` order.
    pub activations: [f64; 6],
    /// Mean absolute joint speed used as the velocity input, rad/s.
    pub mean_speed: f64,
}

#[derive(Debug, Error)]
pub enum FuzzyError {
    #[error("rule base failed validation:\n{0}")]
    InvalidRuleBase(ValidationReport),
    #[error("rule base file is not valid TOML: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("no rule fired for inputs mu={mu}, kappa={kappa}, speed={speed}; the rule base has a coverage hole")]
    NoRuleFired { mu: f64, kappa: f64, speed: f64 },
    #[error("non-finite assessment input: {0}")]
    NonFiniteInput(&'static str),
}

/// Validated rule base plus its variables and level scores.
#[derive(Clone, Debug)]
pub struct FuzzyEngine {
    variables: [LinguisticVariable; 3],
    rules: Vec<FuzzyRule>,
    scores: LevelScores,
}

impl FuzzyEngine {
    /// The rule base shipped with the crate.
    pub fn load_default() -> Self {
        FuzzyEngine::from_toml_str(rules::DEFAULT_RULE_BASE)
            .expect("shipped rule base must validate")
    }

    /// Parses and validates a rule base from TOML text.
    pub fn from_toml_str(text: &str) -> Result<Self, FuzzyError> {
        rules::parse_and_validate(text)
    }

    pub(crate) fn from_validated_parts(
        variables: [LinguisticVariable; 3],
        rules: Vec<FuzzyRule>,
        scores: LevelScores,
    ) -> Self {
        FuzzyEngine { variables, rules, scores }
    }

    pub fn variables(&self) -> &[LinguisticVariable; 3] {
        &self.variables
    }

    pub fn variable(&self, id: VariableId) -> &LinguisticVariable {
        &self.variables[id.index()]
    }

    pub fn rules(&self) -> &[FuzzyRule] {
        &self.rules
    }

    pub fn scores(&self) -> &LevelScores {
        &self.scores
    }

    /// Classifies a configuration's metrics together with its joint
    /// velocities.
    pub fn assess(
        &self,
        metrics: &SingularityMetrics,
        qdot: &JointVelocities,
    ) -> Result<SafetyAssessment, FuzzyError> {
        self.assess_values(metrics.mu, metrics.kappa, qdot.mean_abs())
    }

    /// Classifies raw metric inputs; `mean_speed` is the mean absolute
    /// joint speed in rad/s.
    pub fn assess_values(
        &self,
        mu: f64,
        kappa: f64,
        mean_speed: f64,
    ) -> Result<SafetyAssessment, FuzzyError> {
        if !mu.is_finite() {
            return Err(FuzzyError::NonFiniteInput("mu"));
        }
        if !kappa.is_finite() {
            return Err(FuzzyError::NonFiniteInput("kappa"));
        }
        if !mean_speed.is_finite() {
            return Err(FuzzyError::NonFiniteInput("mean_speed"));
        }

        let memberships = [
            self.variables[0].fuzzify(mu),
            self.variables[1].fuzzify(kappa),
            self.variables[2].fuzzify(mean_speed),
        ];

        let mut activations = [0.0f64; 6];
        for rule in &self.rules {
            let mut strength = 1.0f64;
            for &(var, term) in &rule.conditions {
                strength = strength.min(memberships[var.index()][term]);
            }
            let fired = strength * rule.weight;
            let slot = &mut activations[rule.conclusion.index()];
            if fired > *slot {
                *slot = fired;
            }
        }

        let total: f64 = activations.iter().sum();
        if total <= 0.0 {
            return Err(FuzzyError::NoRuleFired { mu, kappa, speed: mean_speed });
        }
        let weighted: f64 = activations
            .iter()
            .zip(self.scores.0.iter())
            .map(|(a, s)| a * s)
            .sum();
        let safety_score = weighted / total;

        // Argmax with ties resolved toward the more dangerous level:
        // the scan goes dangerous-to-safe and only strict improvement moves it.
        let mut best = 0;
        for i in 1..6 {
            if activations[i] > activations[best] {
                best = i;
            }
        }

        Ok(SafetyAssessment {
            classification: SafetyLevel::ALL[best],
            safety_score,
            activations,
            mean_speed,
        })
    }
}
