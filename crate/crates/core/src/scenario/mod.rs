//! Closed-loop case studies: schedules, the measure/estimate/control loop,
//! records and metrics.

mod metrics;
mod record;
mod run;

pub use metrics::{compute_metrics, Metrics, SegmentMetrics, Violations};
pub use record::{edge_index, ClosedLoopRecord, ProfileRow, RecordRow, TimingRow};
pub use run::{run_scenario, write_plot_script, RunOptions, ScenarioAbort, ScenarioOutput};

use std::fmt;
use std::str::FromStr;

use crate::config::KeyValues;
use crate::dae::{sweep, SteadyStateSolver};
use crate::error::{Error, Result};
use crate::model::PlantParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioKind {
    Startup,
    Critical,
    Perturbed,
    Custom,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] = [
        ScenarioKind::Startup,
        ScenarioKind::Critical,
        ScenarioKind::Perturbed,
        ScenarioKind::Custom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Startup => "startup",
            ScenarioKind::Critical => "critical",
            ScenarioKind::Perturbed => "perturbed",
            ScenarioKind::Custom => "custom",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScenarioKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown scenario `{s}` (startup, critical, perturbed, custom)"
                ))
            })
    }
}

/// Piecewise-constant signal: `value_at(t)` is the last level whose start ≤ t.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    steps: Vec<(f64, f64)>,
}

impl Schedule {
    pub fn constant(v: f64) -> Self {
        Schedule {
            steps: vec![(0.0, v)],
        }
    }

    /// `steps` must start at t = 0 and have strictly increasing times.
    pub fn new(steps: Vec<(f64, f64)>) -> Result<Self> {
        if steps.first().map(|s| s.0) != Some(0.0) {
            return Err(Error::Config("a schedule must start at t = 0".into()));
        }
        if steps.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Config(
                "schedule times must increase strictly".into(),
            ));
        }
        if steps.iter().any(|s| !s.1.is_finite() || !s.0.is_finite()) {
            return Err(Error::Config("schedule entries must be finite".into()));
        }
        Ok(Schedule { steps })
    }

    pub fn value_at(&self, t: f64) -> f64 {
        let eps = 1e-9;
        self.steps
            .iter()
            .take_while(|(s, _)| *s <= t + eps)
            .last()
            .map(|s| s.1)
            .unwrap_or(self.steps[0].1)
    }

    pub fn steps(&self) -> &[(f64, f64)] {
        &self.steps
    }

    /// Step times after t = 0.
    pub fn change_times(&self) -> impl Iterator<Item = f64> + '_ {
        self.steps.iter().skip(1).map(|s| s.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitialCondition {
    /// Only acid and TBP in the cascade; uranium feed switched on at t = 0.
    Startup,
    /// Steady state at the set point's feed flow.
    SteadyAtSetPoint,
}

/// A fully resolved case study.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub duration: f64,
    pub y_set: Schedule,
    pub q_true: Schedule,
    pub initial: InitialCondition,
}

/// Scenario timings and levels. Set points are fractions of the plateau
/// output; flows are fractions of the nominal solvent flow.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub startup_duration: f64,
    pub critical_duration: f64,
    pub critical_up: f64,
    pub critical_down: f64,
    pub perturbed_duration: f64,
    pub perturbed_times: Vec<f64>,
    pub perturbed_factors: Vec<f64>,
    pub custom_duration: f64,
    pub custom_startup: bool,
    pub custom_y_times: Vec<f64>,
    pub custom_y_levels: Vec<f64>,
    pub custom_q_times: Vec<f64>,
    pub custom_q_factors: Vec<f64>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            startup_duration: 30.0,
            critical_duration: 150.0,
            critical_up: 25.0,
            critical_down: 100.0,
            perturbed_duration: 80.0,
            perturbed_times: vec![20.0, 40.0, 60.0],
            perturbed_factors: vec![1.1, 1.0, 0.9],
            custom_duration: 40.0,
            custom_startup: false,
            custom_y_times: vec![0.0],
            custom_y_levels: vec![0.375],
            custom_q_times: vec![0.0],
            custom_q_factors: vec![1.0],
        }
    }
}

impl ScenarioConfig {
    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let d = Self::default();
        let c = ScenarioConfig {
            startup_duration: kv.or("scenario.startup_duration", d.startup_duration)?,
            critical_duration: kv.or("scenario.critical_duration", d.critical_duration)?,
            critical_up: kv.or("scenario.critical_up", d.critical_up)?,
            critical_down: kv.or("scenario.critical_down", d.critical_down)?,
            perturbed_duration: kv.or("scenario.perturbed_duration", d.perturbed_duration)?,
            perturbed_times: kv
                .list("scenario.perturbed_times")?
                .unwrap_or(d.perturbed_times),
            perturbed_factors: kv
                .list("scenario.perturbed_factors")?
                .unwrap_or(d.perturbed_factors),
            custom_duration: kv.or("scenario.custom_duration", d.custom_duration)?,
            custom_startup: kv.or("scenario.custom_startup", d.custom_startup)?,
            custom_y_times: kv
                .list("scenario.custom_y_times")?
                .unwrap_or(d.custom_y_times),
            custom_y_levels: kv
                .list("scenario.custom_y_levels")?
                .unwrap_or(d.custom_y_levels),
            custom_q_times: kv
                .list("scenario.custom_q_times")?
                .unwrap_or(d.custom_q_times),
            custom_q_factors: kv
                .list("scenario.custom_q_factors")?
                .unwrap_or(d.custom_q_factors),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, d) in [
            ("startup_duration", self.startup_duration),
            ("critical_duration", self.critical_duration),
            ("perturbed_duration", self.perturbed_duration),
            ("custom_duration", self.custom_duration),
        ] {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::Config(format!("scenario.{name} must be positive")));
            }
        }
        if !(0.0 < self.critical_up && self.critical_up < self.critical_down) {
            return Err(Error::Config(
                "scenario.critical_up must precede critical_down".into(),
            ));
        }
        for (a, b, what) in [
            (&self.perturbed_times, &self.perturbed_factors, "perturbed"),
            (&self.custom_y_times, &self.custom_y_levels, "custom_y"),
            (&self.custom_q_times, &self.custom_q_factors, "custom_q"),
        ] {
            if a.len() != b.len() {
                return Err(Error::Config(format!(
                    "scenario.{what} times and values differ in length"
                )));
            }
            if b.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::Config(format!(
                    "scenario.{what} values must be positive"
                )));
            }
        }
        Ok(())
    }
}

/// Steady-state landmarks the schedules are expressed in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SetPoints {
    pub y_nominal: f64,
    pub y_plateau: f64,
}

impl SetPoints {
    pub fn compute(solver: &mut SteadyStateSolver) -> Result<Self> {
        let q0 = solver.params.q_nominal;
        let s = sweep(solver, q0, 8)?;
        Ok(SetPoints {
            y_nominal: s.y_nominal,
            y_plateau: s.y_plateau,
        })
    }
}

fn prepend_zero(times: &[f64], values: &[f64], base: f64) -> Result<Schedule> {
    let mut steps: Vec<(f64, f64)> = times
        .iter()
        .copied()
        .zip(values.iter().map(|v| v * base))
        .collect();
    if steps.first().map(|s| s.0) != Some(0.0) {
        steps.insert(0, (0.0, base));
    }
    Schedule::new(steps)
}

impl Scenario {
    pub fn build(
        kind: ScenarioKind,
        cfg: &ScenarioConfig,
        params: &PlantParams,
        sp: SetPoints,
    ) -> Result<Self> {
        let q0 = params.q_nominal;
        let s = match kind {
            ScenarioKind::Startup => Scenario {
                kind,
                duration: cfg.startup_duration,
                y_set: Schedule::constant(sp.y_nominal),
                q_true: Schedule::constant(q0),
                initial: InitialCondition::Startup,
            },
            ScenarioKind::Critical => Scenario {
                kind,
                duration: cfg.critical_duration,
                y_set: Schedule::new(vec![
                    (0.0, sp.y_nominal),
                    (cfg.critical_up, sp.y_plateau),
                    (cfg.critical_down, sp.y_nominal),
                ])?,
                q_true: Schedule::constant(q0),
                initial: InitialCondition::SteadyAtSetPoint,
            },
            ScenarioKind::Perturbed => Scenario {
                kind,
                duration: cfg.perturbed_duration,
                y_set: Schedule::constant(sp.y_nominal),
                q_true: prepend_zero(&cfg.perturbed_times, &cfg.perturbed_factors, q0)?,
                initial: InitialCondition::SteadyAtSetPoint,
            },
            ScenarioKind::Custom => Scenario {
                kind,
                duration: cfg.custom_duration,
                y_set: prepend_zero(&cfg.custom_y_times, &cfg.custom_y_levels, sp.y_plateau)?,
                q_true: prepend_zero(&cfg.custom_q_times, &cfg.custom_q_factors, q0)?,
                initial: if cfg.custom_startup {
                    InitialCondition::Startup
                } else {
                    InitialCondition::SteadyAtSetPoint
                },
            },
        };
        s.validate(params)?;
        Ok(s)
    }

    pub fn validate(&self, params: &PlantParams) -> Result<()> {
        if !(self.duration >= params.sampling_time) {
            return Err(Error::Config(
                "scenario shorter than one control period".into(),
            ));
        }
        Ok(())
    }

    /// Number of control periods.
    pub fn periods(&self, sampling_time: f64) -> usize {
        (self.duration / sampling_time + 1e-9).floor() as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_lookup_is_left_continuous_at_steps() {
        let s = Schedule::new(vec![(0.0, 1.0), (2.0, 3.0), (5.0, 4.0)]).unwrap();
        assert_eq!(s.value_at(0.0), 1.0);
        assert_eq!(s.value_at(1.999), 1.0);
        assert_eq!(s.value_at(2.0), 3.0);
        assert_eq!(s.value_at(100.0), 4.0);
        assert!(Schedule::new(vec![(1.0, 1.0)]).is_err());
        assert!(Schedule::new(vec![(0.0, 1.0), (0.0, 2.0)]).is_err());
    }

    #[test]
    fn perturbed_schedule_scales_nominal_flow() {
        let p = PlantParams::nominal();
        let sp = SetPoints {
            y_nominal: 0.25,
            y_plateau: 0.68,
        };
        let s =
            Scenario::build(ScenarioKind::Perturbed, &ScenarioConfig::default(), &p, sp).unwrap();
        assert_eq!(s.q_true.value_at(10.0), p.q_nominal);
        assert!((s.q_true.value_at(25.0) - 1.1 * p.q_nominal).abs() < 1e-12);
        assert!((s.q_true.value_at(70.0) - 0.9 * p.q_nominal).abs() < 1e-12);
        assert_eq!(s.periods(p.sampling_time), 160);
        assert_eq!(
            "critical".parse::<ScenarioKind>().unwrap(),
            ScenarioKind::Critical
        );
        assert!("bogus".parse::<ScenarioKind>().is_err());
    }
}
