//! Joint-space workspace scanning.
//!
//! Samples in-limit joint configurations with a deterministic
//! low-discrepancy sequence, computes the conditioning metrics at every
//! sample, and summarizes the result as percentile tables plus the
//! fraction of the workspace falling in each safety tier. The scan is
//! how the metric thresholds can be recalibrated for a different arm:
//! run it, look at where the distribution mass sits, pick cutoffs.

use std::io::{self, Write};

use serde::Serialize;

use crate::kinematics::{forward_kinematics, JointConfig, KinematicModel, DOF};
use crate::metrics::{compute_metrics, SingularityMetrics};
use crate::monitor::{emergency_decision, EmergencyAction, MonitorConfig};

/// Percentile levels reported for every metric, in percent.
pub const PERCENTILE_LEVELS: [u8; 9] = [1, 5, 10, 25, 50, 75, 90, 95, 99];

/// First line of the scan CSV.
pub const SCAN_SCHEMA: &str = "# schema: singularguard-scan v1";

/// One scanned configuration with its metrics and tier decision.
#[derive(Clone, Debug, Serialize)]
pub struct ScanRow {
    pub q: [f64; DOF],
    pub tcp: [f64; 3],
    pub mu: f64,
    pub kappa: f64,
    pub sigma_min: f64,
    /// Decision-tree tier at rest (zero joint speed).
    pub action: &'static str,
}

/// Nearest-rank percentile table for one metric.
#[derive(Clone, Debug, Serialize)]
pub struct PercentileTable {
    pub metric: &'static str,
    /// (percent level, value) pairs, levels ascending.
    pub entries: Vec<(u8, f64)>,
}

/// Fraction of samples whose rest-pose decision lands in each tier.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct TierFractions {
    pub emergency_stop: f64,
    pub critical_warning: f64,
    pub warning: f64,
    pub normal: f64,
}

/// Fraction of samples with manipulability strictly below a cutoff.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct MuTailFraction {
    pub below: f64,
    pub fraction: f64,
}

/// Everything the scan produces.
#[derive(Clone, Debug, Serialize)]
pub struct ScanReport {
    /// Number of low-discrepancy samples (the probe row is extra).
    pub samples: usize,
    /// Zero-pose probe row; the arm is exactly singular there, so this
    /// row demonstrates the most severe tier without relying on the
    /// sampler hitting a singular set of measure zero.
    pub zero_pose: ScanRow,
    pub rows: Vec<ScanRow>,
    pub percentiles: Vec<PercentileTable>,
    pub tier_fractions: TierFractions,
    /// Mass below each manipulability cutoff; cutoffs ascending, so the
    /// fractions are non-decreasing (nested sets).
    pub mu_tails: Vec<MuTailFraction>,
}

/// Generator for the 6-dimensional additive-recurrence sequence
/// x[n][j] = frac(1/2 + (n+1)·alpha^(j+1)), where alpha is the inverse
/// of the unique real root of x^(d+1) = x + 1. Deterministic, no RNG.
#[derive(Clone, Debug)]
pub struct LowDiscrepancySequence {
    alphas: [f64; DOF],
    state: [f64; DOF],
}

impl LowDiscrepancySequence {
    pub fn new() -> Self {
        // Newton's method on f(x) = x^(d+1) - x - 1 for d = 6; the root
        // is ~1.1938 and the iteration converges in a handful of steps.
        let mut phi = 1.2f64;
        for _ in 0..64 {
            let f = phi.powi(DOF as i32 + 1) - phi - 1.0;
            let fp = (DOF as f64 + 1.0) * phi.powi(DOF as i32) - 1.0;
            let next = phi - f / fp;
            if (next - phi).abs() < 1e-15 {
                phi = next;
                break;
            }
            phi = next;
        }
        let mut alphas = [0.0; DOF];
        for (j, a) in alphas.iter_mut().enumerate() {
            *a = phi.powi(-(j as i32 + 1)).fract();
        }
        LowDiscrepancySequence { alphas, state: [0.5; DOF] }
    }

    /// Next point in the open unit cube (0, 1)^6.
    pub fn next_point(&mut self) -> [f64; DOF] {
        for (s, a) in self.state.iter_mut().zip(self.alphas) {
            *s = (*s + a).fract();
        }
        self.state
    }
}

impl Default for LowDiscrepancySequence {
    fn default() -> Self {
        Self::new()
    }
}

fn action_name(a: &EmergencyAction) -> &'static str {
    a.name()
}

fn scan_row(model: &KinematicModel, monitor: &MonitorConfig, q: JointConfig) -> ScanRow {
    let m: SingularityMetrics = compute_metrics(model, &q);
    let tcp = forward_kinematics(model, &q).position;
    let action = emergency_decision(m.mu, m.kappa, 0.0, monitor);
    ScanRow {
        q: q.0,
        tcp: [tcp.x, tcp.y, tcp.z],
        mu: m.mu,
        kappa: m.kappa,
        sigma_min: m.sigma_min,
        action: action_name(&action),
    }
}

/// Nearest-rank percentile: the value at rank ceil(p/100 · n) of the
/// ascending order statistics (1-based), so the result is always an
/// observed sample.
fn nearest_rank(sorted: &[f64], percent: u8) -> f64 {
    debug_assert!(!sorted.is_empty());
    let n = sorted.len();
    let rank = ((percent as f64 / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

fn percentile_table(metric: &'static str, values: &[f64]) -> PercentileTable {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let entries =
        PERCENTILE_LEVELS.iter().map(|&p| (p, nearest_rank(&sorted, p))).collect();
    PercentileTable { metric, entries }
}

/// Scan `samples` low-discrepancy joint configurations inside the
/// model's limits and summarize the metric distributions.
pub fn workspace_scan(
    model: &KinematicModel,
    monitor: &MonitorConfig,
    samples: usize,
) -> ScanReport {
    assert!(samples > 0, "scan needs at least one sample");
    let limits = model.joint_limits();
    let mut seq = LowDiscrepancySequence::new();
    let mut rows = Vec::with_capacity(samples);
    for _ in 0..samples {
        let u = seq.next_point();
        let mut q = [0.0; DOF];
        for j in 0..DOF {
            q[j] = limits[j].lo + u[j] * (limits[j].hi - limits[j].lo);
        }
        rows.push(scan_row(model, monitor, JointConfig(q)));
    }

    let mus: Vec<f64> = rows.iter().map(|r| r.mu).collect();
    let kappas: Vec<f64> = rows.iter().map(|r| r.kappa).collect();
    let sigmas: Vec<f64> = rows.iter().map(|r| r.sigma_min).collect();
    let percentiles = vec![
        percentile_table("mu", &mus),
        percentile_table("kappa", &kappas),
        percentile_table("sigma_min", &sigmas),
    ];

    let n = samples as f64;
    let mut tf = TierFractions::default();
    for r in &rows {
        match r.action {
            "EMERGENCY_STOP" => tf.emergency_stop += 1.0,
            "CRITICAL_WARNING" => tf.critical_warning += 1.0,
            "WARNING" => tf.warning += 1.0,
            _ => tf.normal += 1.0,
        }
    }
    tf.emergency_stop /= n;
    tf.critical_warning /= n;
    tf.warning /= n;
    tf.normal /= n;

    let t = &monitor.tiers;
    let mut cutoffs = [t.mu_stop, t.mu_critical, t.mu_warning];
    cutoffs.sort_by(f64::total_cmp);
    let mu_tails = cutoffs
        .iter()
        .map(|&c| MuTailFraction {
            below: c,
            fraction: mus.iter().filter(|&&m| m < c).count() as f64 / n,
        })
        .collect();

    let zero_pose = scan_row(model, monitor, JointConfig::zeros());
    ScanReport { samples, zero_pose, rows, percentiles, tier_fractions: tf, mu_tails }
}

/// Write the per-row CSV: schema comment, header, probe row (index 0),
/// then the sampled rows.
pub fn write_scan_csv<W: Write>(report: &ScanReport, mut w: W) -> io::Result<()> {
    writeln!(w, "{SCAN_SCHEMA}")?;
    writeln!(
        w,
        "index,q0,q1,q2,q3,q4,q5,tcp_x,tcp_y,tcp_z,mu,kappa,sigma_min,safety_action"
    )?;
    let mut write_row = |idx: usize, r: &ScanRow| -> io::Result<()> {
        write!(w, "{idx}")?;
        for v in r.q.iter().chain(r.tcp.iter()).chain([&r.mu, &r.kappa, &r.sigma_min]) {
            write!(w, ",{v:.17e}")?;
        }
        writeln!(w, ",{}", r.action)
    };
    write_row(0, &report.zero_pose)?;
    for (i, r) in report.rows.iter().enumerate() {
        write_row(i + 1, r)?;
    }
    Ok(())
}
