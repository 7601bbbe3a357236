//! Continuous safety monitoring.
//!
//! The heart of the module is [`emergency_decision`], a pure four-tier
//! decision function over (manipulability, condition number, joint
//! speed). Around it sits a wall-clock loop that samples a pluggable
//! state source at a configurable frequency, escalates that frequency
//! while the decision sits in the warning tier, and emits one structured
//! event per tick. A newline-delimited JSON layer exposes the same
//! pipeline as a request/response or timed-sampling service over any
//! byte stream (the CLI binds it to TCP and stdin/stdout).

use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::fuzzy::{FuzzyEngine, SafetyAssessment};
use crate::kinematics::{forward_kinematics, JointConfig, KinematicModel, DOF};
use crate::metrics::{compute_metrics, SingularityMetrics, KAPPA_CAP};

/// Velocity scale directive attached to the critical-warning tier.
pub const VELOCITY_SCALE_CRITICAL: f64 = 0.10;
/// Velocity scale directive attached to the warning tier.
pub const VELOCITY_SCALE_WARNING: f64 = 0.50;

/// Boundaries of the four decision tiers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecisionTiers {
    pub mu_stop: f64,
    pub kappa_stop: f64,
    pub mu_critical: f64,
    pub kappa_critical: f64,
    pub qdot_stop: f64,
    pub mu_warning: f64,
    pub kappa_warning: f64,
}

impl Default for DecisionTiers {
    fn default() -> Self {
        DecisionTiers {
            mu_stop: 0.005,
            kappa_stop: 500.0,
            mu_critical: 0.01,
            kappa_critical: 100.0,
            qdot_stop: 0.5,
            mu_warning: 0.05,
            kappa_warning: 50.0,
        }
    }
}

/// Monitor loop settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonitorConfig {
    /// Baseline sampling frequency, Hz.
    pub f_monitor: f64,
    /// Frequency while the decision sits in the warning tier, Hz.
    pub f_elevated: f64,
    /// Joint-speed bound (rad/s) above which a velocity warning flag is set.
    pub v_threshold: f64,
    pub tiers: DecisionTiers,
    /// Consecutive non-warning ticks before the loop drops back to f_monitor.
    pub deescalate_after: u32,
    /// Missed source intervals before events carry the stale flag.
    pub stale_after_intervals: u32,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig {
            f_monitor: 10.0,
            f_elevated: 20.0,
            v_threshold: 0.8,
            tiers: DecisionTiers::default(),
            deescalate_after: 10,
            stale_after_intervals: 3,
        }
    }
}

impl MonitorConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.f_monitor > 0.0 && self.f_monitor.is_finite()) {
            return Err(format!("f_monitor must be positive, got {}", self.f_monitor));
        }
        if !(self.f_elevated > 0.0 && self.f_elevated.is_finite()) {
            return Err(format!("f_elevated must be positive, got {}", self.f_elevated));
        }
        if !(self.v_threshold > 0.0 && self.v_threshold.is_finite()) {
            return Err(format!("v_threshold must be positive, got {}", self.v_threshold));
        }
        let t = &self.tiers;
        for (name, v) in [
            ("mu_stop", t.mu_stop),
            ("kappa_stop", t.kappa_stop),
            ("mu_critical", t.mu_critical),
            ("kappa_critical", t.kappa_critical),
            ("qdot_stop", t.qdot_stop),
            ("mu_warning", t.mu_warning),
            ("kappa_warning", t.kappa_warning),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("tier bound {name} must be positive, got {v}"));
            }
        }
        if !(t.mu_stop < t.mu_critical && t.mu_critical < t.mu_warning) {
            return Err("mu tier bounds must increase: stop < critical < warning".into());
        }
        if !(t.kappa_stop > t.kappa_critical && t.kappa_critical > t.kappa_warning) {
            return Err("kappa tier bounds must decrease: stop > critical > warning".into());
        }
        Ok(())
    }
}

/// Outcome of the decision tree. Directive payloads exist exactly on the
/// two intermediate tiers, so "directive present iff critical-warning or
/// warning" holds by construction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EmergencyAction {
    EmergencyStop,
    CriticalWarning { velocity_scale: f64 },
    Warning { velocity_scale: f64, monitor_hz: f64 },
    Normal,
}

impl EmergencyAction {
    pub fn name(&self) -> &'static str {
        match self {
            EmergencyAction::EmergencyStop => "EMERGENCY_STOP",
            EmergencyAction::CriticalWarning { .. } => "CRITICAL_WARNING",
            EmergencyAction::Warning { .. } => "WARNING",
            EmergencyAction::Normal => "NORMAL",
        }
    }

    /// Event severity for structured logging.
    pub fn severity(&self) -> &'static str {
        match self {
            EmergencyAction::EmergencyStop => "critical",
            EmergencyAction::CriticalWarning { .. } => "high",
            EmergencyAction::Warning { .. } => "elevated",
            EmergencyAction::Normal => "info",
        }
    }

    pub fn velocity_scale(&self) -> Option<f64> {
        match self {
            EmergencyAction::CriticalWarning { velocity_scale }
            | EmergencyAction::Warning { velocity_scale, .. } => Some(*velocity_scale),
            _ => None,
        }
    }
}

/// Four-tier first-match decision over the current metrics and joint
/// speeds. Total and pure: every finite input lands in exactly one tier.
pub fn emergency_decision(
    mu: f64,
    kappa: f64,
    max_abs_qdot: f64,
    cfg: &MonitorConfig,
) -> EmergencyAction {
    let t = &cfg.tiers;
    if mu < t.mu_stop || kappa > t.kappa_stop {
        return EmergencyAction::EmergencyStop;
    }
    if mu < t.mu_critical || kappa > t.kappa_critical {
        if max_abs_qdot > t.qdot_stop {
            return EmergencyAction::EmergencyStop;
        }
        return EmergencyAction::CriticalWarning { velocity_scale: VELOCITY_SCALE_CRITICAL };
    }
    if mu < t.mu_warning || kappa > t.kappa_warning {
        return EmergencyAction::Warning {
            velocity_scale: VELOCITY_SCALE_WARNING,
            monitor_hz: cfg.f_elevated,
        };
    }
    EmergencyAction::Normal
}

/// One emitted assessment. `tcp` is None only on data-fault events,
/// where no finite pose exists.
#[derive(Clone, Debug)]
pub struct MonitorEvent {
    /// Unix timestamp, seconds.
    pub ts: f64,
    pub q: [f64; DOF],
    pub qdot: [f64; DOF],
    pub tcp: Option<[f64; 3]>,
    pub metrics: SingularityMetrics,
    pub assessment: SafetyAssessment,
    pub action: EmergencyAction,
    pub velocity_warning: bool,
    /// Set when the sample contained non-finite values; metrics are then
    /// pessimistic substitutes.
    pub data_fault: bool,
    /// Set when the source has missed enough intervals that this event
    /// reuses an old sample.
    pub stale: bool,
    /// Sampling frequency in effect after this event.
    pub monitor_hz: f64,
}

/// What a state source yields per poll.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SourceRead {
    Sample { q: [f64; DOF], qdot: [f64; DOF] },
    /// Nothing new since last poll; the loop reuses its latest sample.
    Empty,
    /// Source finished; the loop terminates cleanly.
    Closed,
}

pub trait StateSource {
    fn poll(&mut self) -> SourceRead;
}

pub trait EventSink {
    fn emit(&mut self, event: &MonitorEvent);
}

impl<F: FnMut(&MonitorEvent)> EventSink for F {
    fn emit(&mut self, event: &MonitorEvent) {
        self(event)
    }
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Assess one raw sample. Non-finite samples trip the data-fault path:
/// the decision runs on worst-case substitute metrics, which lands in
/// the emergency-stop tier by construction.
pub fn assess_sample(
    model: &KinematicModel,
    engine: &FuzzyEngine,
    cfg: &MonitorConfig,
    q: [f64; DOF],
    qdot: [f64; DOF],
    stale: bool,
) -> MonitorEvent {
    let finite = q.iter().chain(qdot.iter()).all(|v| v.is_finite());
    let (tcp, metrics, mean_speed, max_speed, data_fault) = if finite {
        let qc = JointConfig(q);
        let tcp = forward_kinematics(model, &qc).position;
        let metrics = compute_metrics(model, &qc);
        let mean = qdot.iter().map(|v| v.abs()).sum::<f64>() / DOF as f64;
        let max = qdot.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        (Some([tcp.x, tcp.y, tcp.z]), metrics, mean, max, false)
    } else {
        let metrics = SingularityMetrics { mu: 0.0, kappa: KAPPA_CAP, sigma_min: 0.0 };
        (None, metrics, 0.0, f64::INFINITY, true)
    };

    // Inputs are finite (substitutes included) and the shipped rule base
    // covers the whole clamped input range, so assessment cannot fail.
    let assessment = engine
        .assess_values(metrics.mu, metrics.kappa, mean_speed)
        .expect("validated rule base covers all finite inputs");
    let action = emergency_decision(metrics.mu, metrics.kappa, max_speed, cfg);
    let velocity_warning = max_speed > cfg.v_threshold;

    MonitorEvent {
        ts: unix_now(),
        q,
        qdot,
        tcp,
        metrics,
        assessment,
        action,
        velocity_warning,
        data_fault,
        stale,
        monitor_hz: cfg.f_monitor,
    }
}

/// Timed assessment loop. Polls `source` once per tick at the current
/// frequency, emits exactly one event per tick once a sample exists, and
/// runs until the source closes or `cancel` is set (checked at least
/// every 2 ms, so cancellation lands well within one tick).
///
/// Frequency control: a warning-tier tick switches the loop to
/// `f_elevated` starting with the very next tick; `deescalate_after`
/// consecutive non-warning ticks switch it back. Deadlines are absolute
/// (each is the previous one plus the period in effect), so tick spacing
/// does not accumulate sleep jitter.
pub fn monitor_loop(
    model: &KinematicModel,
    engine: &FuzzyEngine,
    cfg: &MonitorConfig,
    source: &mut dyn StateSource,
    sink: &mut dyn EventSink,
    cancel: &AtomicBool,
) {
    let base = Duration::from_secs_f64(1.0 / cfg.f_monitor);
    let elevated = Duration::from_secs_f64(1.0 / cfg.f_elevated);
    let mut period = base;
    let mut calm_ticks = 0u32;
    let mut latest: Option<([f64; DOF], [f64; DOF])> = None;
    let mut missed = 0u32;
    let mut deadline = Instant::now();

    loop {
        if cancel.load(Ordering::Relaxed) {
            return;
        }
        let now = Instant::now();
        if now < deadline {
            std::thread::sleep((deadline - now).min(Duration::from_millis(2)));
            continue;
        }

        match source.poll() {
            SourceRead::Closed => return,
            SourceRead::Sample { q, qdot } => {
                latest = Some((q, qdot));
                missed = 0;
            }
            SourceRead::Empty => missed = missed.saturating_add(1),
        }
        let Some((q, qdot)) = latest else {
            // No sample ever received: nothing to assess yet.
            deadline += period;
            continue;
        };

        let stale = missed >= cfg.stale_after_intervals;
        let mut event = assess_sample(model, engine, cfg, q, qdot, stale);

        if matches!(event.action, EmergencyAction::Warning { .. }) {
            period = elevated;
            calm_ticks = 0;
        } else if period == elevated {
            calm_ticks += 1;
            if calm_ticks >= cfg.deescalate_after {
                period = base;
                calm_ticks = 0;
            }
        }
        event.monitor_hz = 1.0 / period.as_secs_f64();

        sink.emit(&event);
        deadline += period;
    }
}

// ---------------------------------------------------------------------------
// Newline-delimited JSON service layer.

/// One request line: a raw joint state.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireRequest {
    pub q: [f64; DOF],
    pub qdot: [f64; DOF],
}

/// One response line. Field names are the stable wire schema.
#[derive(Debug, Serialize)]
pub struct WireResponse {
    pub ts: f64,
    pub q: [f64; DOF],
    pub qdot: [f64; DOF],
    pub tcp: Option<[f64; 3]>,
    pub mu: f64,
    pub kappa: f64,
    pub sigma_min: f64,
    pub safety_level: &'static str,
    pub safety_score: f64,
    pub action: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub velocity_scale: Option<f64>,
    pub monitor_hz: f64,
    pub severity: &'static str,
    pub velocity_warning: bool,
    pub data_fault: bool,
    pub stale: bool,
}

impl From<&MonitorEvent> for WireResponse {
    fn from(e: &MonitorEvent) -> Self {
        WireResponse {
            ts: e.ts,
            q: e.q,
            qdot: e.qdot,
            tcp: e.tcp,
            mu: e.metrics.mu,
            kappa: e.metrics.kappa,
            sigma_min: e.metrics.sigma_min,
            safety_level: e.assessment.classification.name(),
            safety_score: e.assessment.safety_score,
            action: e.action.name(),
            velocity_scale: e.action.velocity_scale(),
            monitor_hz: e.monitor_hz,
            severity: e.action.severity(),
            velocity_warning: e.velocity_warning,
            data_fault: e.data_fault,
            stale: e.stale,
        }
    }
}

/// Stateless request/response and timed services over byte streams.
pub struct MonitorService<'a> {
    pub model: &'a KinematicModel,
    pub engine: &'a FuzzyEngine,
    pub cfg: MonitorConfig,
}

impl MonitorService<'_> {
    /// Assess one request as the streaming service would.
    pub fn respond(&self, req: &WireRequest) -> MonitorEvent {
        let mut event = assess_sample(self.model, self.engine, &self.cfg, req.q, req.qdot, false);
        // Stateless mode: report the frequency the timed loop would run
        // at after seeing this state.
        if matches!(event.action, EmergencyAction::Warning { .. }) {
            event.monitor_hz = self.cfg.f_elevated;
        }
        event
    }

    /// One response per request line. Malformed lines produce an
    /// `{"error": …}` line and the service keeps reading. Emergency-stop
    /// events additionally write an operator notice to `notify`.
    pub fn run_streaming(
        &self,
        reader: impl BufRead,
        mut writer: impl Write,
        mut notify: impl Write,
    ) -> std::io::Result<()> {
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<WireRequest>(&line) {
                Ok(req) => {
                    let event = self.respond(&req);
                    notify_operator(&mut notify, &event)?;
                    serde_json::to_writer(&mut writer, &WireResponse::from(&event))?;
                    writer.write_all(b"\n")?;
                    writer.flush()?;
                }
                Err(err) => {
                    let msg = serde_json::json!({ "error": err.to_string() });
                    serde_json::to_writer(&mut writer, &msg)?;
                    writer.write_all(b"\n")?;
                    writer.flush()?;
                }
            }
        }
        Ok(())
    }

    /// Timed mode: a reader thread keeps only the newest request line
    /// while the monitor loop samples it at the loop frequency and
    /// writes one response per tick. Returns when the input closes or
    /// `cancel` is set.
    pub fn run_timed(
        &self,
        reader: impl BufRead + Send,
        mut writer: impl Write,
        mut notify: impl Write,
        cancel: &AtomicBool,
    ) -> std::io::Result<()> {
        struct Slot {
            fresh: Option<([f64; DOF], [f64; DOF])>,
            closed: bool,
        }
        let slot = Mutex::new(Slot { fresh: None, closed: false });

        std::thread::scope(|scope| {
            scope.spawn(|| {
                for line in reader.lines() {
                    let Ok(line) = line else { break };
                    if line.trim().is_empty() {
                        continue;
                    }
                    if let Ok(req) = serde_json::from_str::<WireRequest>(&line) {
                        slot.lock().unwrap().fresh = Some((req.q, req.qdot));
                    }
                    if cancel.load(Ordering::Relaxed) {
                        break;
                    }
                }
                slot.lock().unwrap().closed = true;
            });

            struct SlotSource<'s> {
                slot: &'s Mutex<Slot>,
            }
            impl StateSource for SlotSource<'_> {
                fn poll(&mut self) -> SourceRead {
                    let mut slot = self.slot.lock().unwrap();
                    if let Some((q, qdot)) = slot.fresh.take() {
                        SourceRead::Sample { q, qdot }
                    } else if slot.closed {
                        SourceRead::Closed
                    } else {
                        SourceRead::Empty
                    }
                }
            }

            let mut source = SlotSource { slot: &slot };
            let mut io_error: Option<std::io::Error> = None;
            let mut sink = |event: &MonitorEvent| {
                if io_error.is_some() {
                    return;
                }
                let write = notify_operator(&mut notify, event).and_then(|_| {
                    serde_json::to_writer(&mut writer, &WireResponse::from(event))?;
                    writer.write_all(b"\n")?;
                    writer.flush()
                });
                if let Err(err) = write {
                    io_error = Some(err);
                    cancel.store(true, Ordering::Relaxed);
                }
            };
            monitor_loop(self.model, self.engine, &self.cfg, &mut source, &mut sink, cancel);
            // Unblock: the reader thread exits when its stream closes.
            match io_error {
                Some(err) => Err(err),
                None => Ok(()),
            }
        })
    }
}

fn notify_operator(notify: &mut impl Write, event: &MonitorEvent) -> std::io::Result<()> {
    if event.action == EmergencyAction::EmergencyStop {
        writeln!(
            notify,
            "OPERATOR NOTICE: emergency stop (mu={:.6}, kappa={:.1}, data_fault={})",
            event.metrics.mu, event.metrics.kappa, event.data_fault
        )?;
    }
    Ok(())
}

/// Serve connections on `listener` one at a time until `cancel` is set.
/// Each connection runs the streaming protocol (or the timed loop when
/// `timed` is set) until the peer closes it.
pub fn serve_tcp(
    listener: TcpListener,
    service: &MonitorService<'_>,
    timed: bool,
    cancel: &AtomicBool,
) -> std::io::Result<()> {
    listener.set_nonblocking(true)?;
    loop {
        if cancel.load(Ordering::Relaxed) {
            return Ok(());
        }
        match listener.accept() {
            Ok((stream, _addr)) => {
                stream.set_nonblocking(false)?;
                let reader = BufReader::new(stream.try_clone()?);
                let result = if timed {
                    service.run_timed(reader, stream, std::io::stderr(), cancel)
                } else {
                    service.run_streaming(reader, stream, std::io::stderr())
                };
                // A dropped connection should not kill the server.
                if let Err(err) = result {
                    eprintln!("monitor: connection ended with error: {err}");
                }
            }
            Err(ref e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_millis(10));
            }
            Err(err) => return Err(err),
        }
    }
}
