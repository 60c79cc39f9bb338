use std::fmt::Write as _;

use super::record::RecordRow;
use super::Scenario;
use crate::model::PlantParams;

/// A stretch of constant set point and constant true solvent flow.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentMetrics {
    pub start: f64,
    pub end: f64,
    pub y_set: f64,
    pub q_true: f64,
    /// Hours from segment start until y enters the band for good; `None`
    /// if it never settles.
    pub settling_time: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Violations {
    /// z above its tolerance.
    pub raffinate: usize,
    /// Overshoot above OS_max.
    pub overshoot: usize,
    /// Feed flow outside its box.
    pub input_bounds: usize,
    /// Rate bound exceeded on a step the controller did not flag.
    pub rate_unflagged: usize,
    /// Rate bound exceeded on a flagged relaxation step.
    pub rate_flagged: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub segments: Vec<SegmentMetrics>,
    pub max_overshoot: f64,
    pub violations: Violations,
    pub iae: f64,
    /// Periods from each solvent-flow step until |q̂ − q| < 5 % q.
    pub estimation_delays: Vec<Option<usize>>,
    /// Time of the first STEADY_HOLD period.
    pub first_hold: Option<f64>,
    /// STEADY_HOLD → NMPC transitions while the targets did not change.
    pub hold_exits: usize,
}

fn in_band(y: f64, y_set: f64, eps: f64) -> bool {
    (y - y_set).abs() <= eps * y_set
}

/// Summary of a record against the scenario's schedules.
///
/// Overshoot is only counted once y has come from below or reached the
/// band; the decay after a set-point decrease is not overshoot.
pub fn compute_metrics(
    rows: &[RecordRow],
    scenario: &Scenario,
    params: &PlantParams,
    epsilon: f64,
    os_max: f64,
) -> Metrics {
    let dt = params.sampling_time;
    let mut bounds: Vec<usize> = vec![0];
    for i in 1..rows.len() {
        if rows[i].y_set != rows[i - 1].y_set || rows[i].q_true != rows[i - 1].q_true {
            bounds.push(i);
        }
    }
    bounds.push(rows.len());
    let mut segments = Vec::new();
    let mut max_overshoot = f64::NEG_INFINITY;
    let mut v = Violations::default();
    for w in bounds.windows(2) {
        let (a, b) = (w[0], w[1]);
        if a == b {
            continue;
        }
        let seg = &rows[a..b];
        let y_set = seg[0].y_set;
        let mut settled_from = None;
        for (i, r) in seg.iter().enumerate().rev() {
            if in_band(r.y_m, y_set, epsilon) {
                settled_from = Some(i);
            } else {
                break;
            }
        }
        segments.push(SegmentMetrics {
            start: seg[0].t,
            end: seg[seg.len() - 1].t + dt,
            y_set,
            q_true: seg[0].q_true,
            settling_time: settled_from.map(|i| seg[i].t - seg[0].t),
        });
        let mut counting = seg[0].y_m <= y_set * (1.0 + epsilon);
        for r in seg {
            counting |= r.y_m <= y_set * (1.0 + epsilon);
            if counting {
                let os = r.y_m / y_set - 1.0;
                max_overshoot = max_overshoot.max(os);
                if os > os_max {
                    v.overshoot += 1;
                }
            }
        }
    }
    let mut iae = 0.0;
    for (i, r) in rows.iter().enumerate() {
        iae += (r.y_m - r.y_set).abs() * dt;
        if r.z > params.z_tol {
            v.raffinate += 1;
        }
        if r.u < params.u_min || r.u > params.u_max {
            v.input_bounds += 1;
        }
        if i > 0 && (r.u - rows[i - 1].u).abs() > params.du_max * (1.0 + 1e-9) {
            if r.flags.rate_relaxed {
                v.rate_flagged += 1;
            } else {
                v.rate_unflagged += 1;
            }
        }
    }
    let estimation_delays = scenario
        .q_true
        .change_times()
        .map(|ts| {
            let s = rows.iter().position(|r| r.t >= ts - 1e-9)?;
            rows[s..]
                .iter()
                .position(|r| (r.q_hat - r.q_true).abs() < 0.05 * r.q_true)
        })
        .collect();
    let first_hold = rows.iter().find(|r| r.mode == "STEADY_HOLD").map(|r| r.t);
    let hold_exits = rows
        .windows(2)
        .filter(|w| w[0].mode == "STEADY_HOLD" && w[1].mode == "NMPC" && w[0].u_set == w[1].u_set)
        .count();
    Metrics {
        segments,
        max_overshoot: if max_overshoot.is_finite() {
            max_overshoot
        } else {
            0.0
        },
        violations: v,
        iae,
        estimation_delays,
        first_hold,
        hold_exits,
    }
}

impl Metrics {
    /// key = value lines, readable by the config parser.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_else(|| "inf".into());
        let _ = writeln!(s, "max_overshoot = {}", self.max_overshoot);
        let _ = writeln!(s, "iae = {}", self.iae);
        let _ = writeln!(s, "violations.raffinate = {}", self.violations.raffinate);
        let _ = writeln!(s, "violations.overshoot = {}", self.violations.overshoot);
        let _ = writeln!(
            s,
            "violations.input_bounds = {}",
            self.violations.input_bounds
        );
        let _ = writeln!(
            s,
            "violations.rate_unflagged = {}",
            self.violations.rate_unflagged
        );
        let _ = writeln!(
            s,
            "violations.rate_flagged = {}",
            self.violations.rate_flagged
        );
        let _ = writeln!(s, "first_hold = {}", opt(self.first_hold));
        let _ = writeln!(s, "hold_exits = {}", self.hold_exits);
        for (i, seg) in self.segments.iter().enumerate() {
            let _ = writeln!(s, "segment.{i}.start = {}", seg.start);
            let _ = writeln!(s, "segment.{i}.end = {}", seg.end);
            let _ = writeln!(s, "segment.{i}.y_set = {}", seg.y_set);
            let _ = writeln!(s, "segment.{i}.q_true = {}", seg.q_true);
            let _ = writeln!(s, "segment.{i}.settling_time = {}", opt(seg.settling_time));
        }
        for (i, d) in self.estimation_delays.iter().enumerate() {
            let d = d.map(|v| v.to_string()).unwrap_or_else(|| "inf".into());
            let _ = writeln!(s, "estimation_delay.{i} = {d}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nmpc::ControlFlags;
    use crate::scenario::{InitialCondition, ScenarioKind, Schedule};

    fn row(step: usize, y_m: f64, y_set: f64) -> RecordRow {
        RecordRow {
            step,
            t: step as f64 * 0.5,
            y_set,
            y_m,
            z: 0.0,
            zbar_pred: Some(true),
            u: 1.0,
            u_set: 1.0,
            q_true: 10.0,
            q_hat: 10.0,
            mode: "NMPC",
            overshoot: y_m / y_set - 1.0,
            flags: ControlFlags::default(),
            mhe_at_bound: false,
        }
    }

    fn scenario() -> Scenario {
        Scenario {
            kind: ScenarioKind::Custom,
            duration: 5.0,
            y_set: Schedule::constant(0.2),
            q_true: Schedule::constant(10.0),
            initial: InitialCondition::SteadyAtSetPoint,
        }
    }

    #[test]
    fn constant_record_is_settled_at_once() {
        let rows: Vec<_> = (0..10).map(|k| row(k, 0.2, 0.2)).collect();
        let m = compute_metrics(&rows, &scenario(), &PlantParams::nominal(), 0.05, 0.2);
        assert_eq!(m.segments[0].settling_time, Some(0.0));
        assert_eq!(m.max_overshoot, 0.0);
        assert_eq!(m.iae, 0.0);
        assert_eq!(m.violations, Violations::default());
    }

    #[test]
    fn single_peak_overshoot() {
        let mut rows: Vec<_> = (0..10).map(|k| row(k, 0.2, 0.2)).collect();
        rows[4].y_m = 0.25;
        let m = compute_metrics(&rows, &scenario(), &PlantParams::nominal(), 0.05, 0.2);
        assert!((m.max_overshoot - 0.25).abs() < 1e-12);
        assert_eq!(m.violations.overshoot, 1);
        assert_eq!(m.segments[0].settling_time, Some(2.5));
    }

    #[test]
    fn never_settled_and_unflagged_rate() {
        let mut rows: Vec<_> = (0..6).map(|k| row(k, 0.1, 0.2)).collect();
        rows[3].u = 2.5;
        let m = compute_metrics(&rows, &scenario(), &PlantParams::nominal(), 0.05, 0.2);
        assert_eq!(m.segments[0].settling_time, None);
        assert_eq!(m.violations.rate_unflagged, 2);
        assert!(m.to_text().contains("segment.0.settling_time = inf"));
    }
}
