use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::N_STAGES;
use crate::nmpc::ControlFlags;

/// One control period of a closed-loop run.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordRow {
    pub step: usize,
    pub t: f64,
    pub y_set: f64,
    pub y_m: f64,
    pub z: f64,
    /// Classifier verdict for the next period under the applied move.
    pub zbar_pred: Option<bool>,
    pub u: f64,
    pub u_set: f64,
    pub q_true: f64,
    pub q_hat: f64,
    /// "NMPC", "STEADY_HOLD" or "OPEN_LOOP".
    pub mode: &'static str,
    pub overshoot: f64,
    pub flags: ControlFlags,
    pub mhe_at_bound: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileRow {
    pub step: usize,
    pub t: f64,
    /// Aqueous uranium in the settlers, stage 1 first.
    pub u_aq: [f64; N_STAGES],
    pub edge: Option<usize>,
}

/// Wall-clock seconds spent per period. Kept apart from the record so the
/// record stays reproducible.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingRow {
    pub step: usize,
    pub mhe: f64,
    pub nmpc: f64,
    pub plant: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClosedLoopRecord {
    pub rows: Vec<RecordRow>,
    pub profiles: Vec<ProfileRow>,
    pub timings: Vec<TimingRow>,
}

pub const RECORD_HEADER: &str = "step,t,y_set,y_m,z,zbar_pred,u,u_set,q_true,q_hat,mode,overshoot,\
rate_relaxed,infeasible_hold,overshoot_suspended,mhe_at_bound";

fn b(v: bool) -> u8 {
    v as u8
}

/// 1-based stage where the aqueous uranium profile first reaches half its
/// maximum, scanning from the raffinate end. `None` for an empty profile.
pub fn edge_index(profile: &[f64]) -> Option<usize> {
    let max = profile.iter().copied().fold(0.0, f64::max);
    if max <= 1e-9 {
        return None;
    }
    profile.iter().position(|v| *v >= 0.5 * max).map(|i| i + 1)
}

impl ClosedLoopRecord {
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "{RECORD_HEADER}")?;
        for r in &self.rows {
            let zbar = match r.zbar_pred {
                Some(v) => b(v).to_string(),
                None => String::new(),
            };
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.step,
                r.t,
                r.y_set,
                r.y_m,
                r.z,
                zbar,
                r.u,
                r.u_set,
                r.q_true,
                r.q_hat,
                r.mode,
                r.overshoot,
                b(r.flags.rate_relaxed),
                b(r.flags.infeasible_hold),
                b(r.flags.overshoot_suspended),
                b(r.mhe_at_bound),
            )?;
        }
        Ok(())
    }

    pub fn write_profiles_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        let cols: Vec<String> = (1..=N_STAGES).map(|i| format!("u_aq_{i}")).collect();
        writeln!(w, "step,t,{},edge", cols.join(","))?;
        for p in &self.profiles {
            let vals: Vec<String> = p.u_aq.iter().map(|v| v.to_string()).collect();
            let edge = p.edge.map(|e| e.to_string()).unwrap_or_default();
            writeln!(w, "{},{},{},{}", p.step, p.t, vals.join(","), edge)?;
        }
        Ok(())
    }

    pub fn write_timings_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "step,mhe_s,nmpc_s,plant_s")?;
        for t in &self.timings {
            writeln!(w, "{},{:.6e},{:.6e},{:.6e}", t.step, t.mhe, t.nmpc, t.plant)?;
        }
        Ok(())
    }

    /// record.csv, profiles.csv and timings.csv in `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, f: &dyn Fn(&mut Vec<u8>) -> std::io::Result<()>| -> Result<()> {
            let path = dir.join(name);
            let mut buf = Vec::new();
            f(&mut buf).map_err(|e| Error::io(&path, e))?;
            std::fs::write(&path, buf).map_err(|e| Error::io(&path, e))
        };
        write("record.csv", &|w| self.write_csv(w))?;
        write("profiles.csv", &|w| self.write_profiles_csv(w))?;
        write("timings.csv", &|w| self.write_timings_csv(w))
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii output")
    }
}
