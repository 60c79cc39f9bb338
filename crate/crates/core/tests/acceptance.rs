//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use purex_nmpc::dae::{solve_algebraic, step, step_with_stats, sweep, SteadyStateSolver};
use purex_nmpc::mhe::EstimatorState;
use purex_nmpc::model::{
    boundary_flux, inventory, tbp_free, wire_flows, Block, PlantParams, PlantState, Species,
    N_STAGES, N_STATES,
};
use purex_nmpc::pipeline::train;
use purex_nmpc::pso::{optimize, BoxedProblem};
use purex_nmpc::scenario::{
    run_scenario, RunOptions, Scenario, ScenarioKind, ScenarioOutput, SetPoints,
};
use purex_nmpc::surrogate::{startup_state, RecurrentResidualNet, SurrogateModel};
use purex_nmpc::Config;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// Interface equilibrium oracle

/// Free TBP from the TBP balance by plain bisection.
fn oracle_tbp(u: f64, h: f64, p: &PlantParams) -> f64 {
    let n = 2.0 * u + h;
    let bound =
        |f: f64| f + 2.0 * p.k_eq_u * u * n * n * f * f + p.k_eq_h * h * n * f - p.tbp_total;
    let (mut lo, mut hi) = (0.0, p.tbp_total);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if bound(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-16 {
            break;
        }
    }
    0.5 * (lo + hi)
}

fn eq_org(u: f64, h: f64, p: &PlantParams) -> (f64, f64) {
    let n = 2.0 * u + h;
    let f = oracle_tbp(u, h, p);
    (p.k_eq_u * u * n * n * f * f, p.k_eq_h * h * n * f)
}

fn bisect(lo: f64, hi: f64, g: impl Fn(f64) -> f64) -> f64 {
    let (mut a, mut b) = (lo, hi);
    let ga = g(a);
    if ga == 0.0 {
        return a;
    }
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        let gm = g(m);
        if gm == 0.0 {
            return m;
        }
        if (gm > 0.0) == (ga > 0.0) {
            a = m;
        } else {
            b = m;
        }
        if b - a <= 1e-15 * b.max(1.0) {
            break;
        }
    }
    0.5 * (a + b)
}

/// (U*, H*) from a grid scan over H* with nested bisections.
fn oracle_interface(c: [f64; 4], p: &PlantParams) -> (f64, f64) {
    let [u_aq, u_org, h_aq, h_org] = c;
    let (u_max, h_max) = (u_aq + 2.0 * u_org, h_aq + 2.0 * h_org);
    let u_of_h = |h: f64| {
        bisect(0.0, u_max, |u| {
            0.5 * u_aq + u_org - 0.5 * u - eq_org(u, h, p).0
        })
    };
    let g_h = |h: f64| {
        let u = u_of_h(h);
        0.5 * h_aq + h_org - 0.5 * h - eq_org(u, h, p).1
    };
    if h_max == 0.0 {
        return (u_of_h(0.0), 0.0);
    }
    let grid = 64;
    let mut lo = 0.0;
    let mut g_lo = g_h(lo);
    for i in 1..=grid {
        let h = h_max * i as f64 / grid as f64;
        let g = g_h(h);
        if g_lo == 0.0 || (g > 0.0) != (g_lo > 0.0) {
            break;
        }
        lo = h;
        g_lo = g;
    }
    let h = bisect(lo, (lo + h_max / grid as f64).min(h_max), g_h);
    (u_of_h(h), h)
}

fn chemistry_oracle(cfg: &Config) -> Outcome {
    let start = Instant::now();
    let p = &cfg.plant;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    let mut worst_tbp: f64 = 0.0;
    let sets = 100;
    let mut done = 0;
    while done < sets {
        let mut x = [0.0; N_STATES];
        let mut stages = Vec::new();
        for n in 0..N_STAGES.min(sets - done) {
            let c = [
                rng.random_range(0.0..1.5),
                rng.random_range(0.0..0.6),
                rng.random_range(0.0..4.0),
                rng.random_range(0.0..0.4),
            ];
            x[Block::UAqMixer.at(n)] = c[0];
            x[Block::UOrgMixer.at(n)] = c[1];
            x[Block::HAqMixer.at(n)] = c[2];
            x[Block::HOrgMixer.at(n)] = c[3];
            stages.push(c);
        }
        let alg = solve_algebraic(&x, p, &cfg.integrator).map_err(|e| e.to_string())?;
        for (n, c) in stages.iter().enumerate() {
            let (u_ref, h_ref) = oracle_interface(*c, p);
            let (u, h) = (alg[n], alg[N_STAGES + n]);
            worst = worst.max((u - u_ref).abs()).max((h - h_ref).abs());
            let free = tbp_free(u, h, p).map_err(|e| e.to_string())?;
            let nit = 2.0 * u + h;
            let bound = 2.0 * p.k_eq_u * u * nit * nit * free * free + p.k_eq_h * h * nit * free;
            worst_tbp = worst_tbp.max((free + bound - p.tbp_total).abs());
        }
        done += stages.len();
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst <= 1e-8 && worst_tbp <= 1e-10 && secs < 10.0,
        format!("{sets} sets, max |dev| {worst:.2e}, TBP balance {worst_tbp:.2e}, {secs:.2} s"),
    )
}

fn mole_balance(cfg: &Config) -> Outcome {
    let (p, o) = (&cfg.plant, &cfg.integrator);
    let (u, q) = (p.u_nominal, p.q_nominal);
    let flows = wire_flows(p, u, q).map_err(|e| e.to_string())?;
    let mut s = startup_state(u, q, p, o).map_err(|e| e.to_string())?;
    let h = o.dt_internal;
    let steps = (50.0 / h).round() as usize;
    let mut worst: f64 = 0.0;
    let mut min_c = s.min_concentration();
    for _ in 0..steps {
        let (next, stats) = step_with_stats(&s, u, q, h, o, p).map_err(|e| e.to_string())?;
        if stats.substeps != 1 {
            return Err(format!("step split into {} substeps", stats.substeps));
        }
        for sp in [Species::Uranium, Species::Acid] {
            let change = inventory(&next.x, &flows, p, sp) - inventory(&s.x, &flows, p, sp);
            let flux = h * boundary_flux(&next.x, &flows, sp);
            let scale = inventory(&next.x, &flows, p, sp)
                .abs()
                .max(flux.abs())
                .max(1e-300);
            worst = worst.max((change - flux).abs() / scale);
        }
        min_c = min_c.min(next.min_concentration());
        s = next;
    }
    check(
        worst <= 1e-6 && min_c >= -1e-9,
        format!("{steps} steps, max relative imbalance {worst:.2e}, min concentration {min_c:.2e}"),
    )
}

fn steady_curve(cfg: &Config) -> Outcome {
    let mut solver = SteadyStateSolver::new(cfg.plant.clone(), cfg.integrator.clone());
    let s = sweep(&mut solver, cfg.plant.q_nominal, 36).map_err(|e| e.to_string())?;
    let increasing = s.points.windows(2).all(|w| w[1].y > w[0].y);
    let slope =
        |a: usize, b: usize| (s.points[b].y - s.points[a].y) / (s.points[b].u - s.points[a].u);
    let n = s.points.len();
    let (first, last) = (slope(0, 1), slope(n - 2, n - 1));
    let plateau = last < 0.1 * first;
    check(
        increasing && plateau && (s.nominal_ratio - 0.375).abs() <= 0.01,
        format!(
            "increasing {increasing}, end/start slope {:.3}, u_knee {:.4}, ratio {:.4}",
            last / first,
            s.u_knee,
            s.nominal_ratio
        ),
    )
}

fn bptt_gradients(cfg: &Config) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let steps = cfg.dataset.n_hist + 1;
    let mut net =
        RecurrentResidualNet::new(3, cfg.train.lstm_hidden, cfg.train.lstm_layers, &mut rng);
    let seqs: Vec<Vec<f64>> = (0..8)
        .map(|_| (0..3 * steps).map(|_| rng.random_range(0.0..1.0)).collect())
        .collect();
    let refs: Vec<&[f64]> = seqs.iter().map(|s| s.as_slice()).collect();
    let targets: Vec<f64> = (0..seqs.len())
        .map(|_| rng.random_range(-0.2..0.2))
        .collect();
    let (_, grad) = net.loss_and_grad(&refs, &targets);
    let eps = 1e-5;
    let probes = 40;
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let i = rng.random_range(0..net.params.len());
        let keep = net.params[i];
        net.params[i] = keep + eps;
        let (lp, _) = net.loss_and_grad(&refs, &targets);
        net.params[i] = keep - eps;
        let (lm, _) = net.loss_and_grad(&refs, &targets);
        net.params[i] = keep;
        let fd = (lp - lm) / (2.0 * eps);
        let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-7);
        worst = worst.max(rel);
    }
    check(
        worst < 1e-4,
        format!("{probes} probes, max relative error {worst:.2e}"),
    )
}

struct Runs {
    cfg: Config,
    model: SurrogateModel,
    sp: SetPoints,
}

impl Runs {
    fn run(
        &self,
        kind: ScenarioKind,
        open_loop: bool,
    ) -> Result<(Scenario, ScenarioOutput), String> {
        let scenario = Scenario::build(kind, &self.cfg.scenario, &self.cfg.plant, self.sp)
            .map_err(|e| e.to_string())?;
        let out = run_scenario(
            &scenario,
            &self.cfg,
            &self.model,
            RunOptions {
                open_loop,
                seed: None,
            },
        )
        .map_err(|a| format!("{kind} aborted: {}", a.error))?;
        Ok((scenario, out))
    }
}

fn startup_loop(r: &Runs) -> Outcome {
    let (_, closed) = r.run(ScenarioKind::Startup, false)?;
    let (_, open) = r.run(ScenarioKind::Startup, true)?;
    let m = &closed.metrics;
    let ts_closed = m.segments[0]
        .settling_time
        .ok_or("closed loop never settles")?;
    let ts_open = open.metrics.segments[0]
        .settling_time
        .ok_or("open loop never settles")?;
    let v = m.violations;
    let ratio = ts_open / ts_closed;
    check(
        v.raffinate == 0
            && v.overshoot == 0
            && v.input_bounds == 0
            && v.rate_unflagged == 0
            && ratio >= 3.0
            && m.first_hold.is_some()
            && m.hold_exits == 0,
        format!(
            "settling {ts_closed} h vs {ts_open} h open loop (ratio {ratio:.2}), violations {v:?}, first hold {:?}, hold exits {}",
            m.first_hold, m.hold_exits
        ),
    )
}

fn critical_loop(r: &Runs) -> Outcome {
    let (scenario, out) = r.run(ScenarioKind::Critical, false)?;
    let m = &out.metrics;
    let settled = m.segments.iter().all(|s| s.settling_time.is_some());
    let up = r.cfg.scenario.critical_up;
    let down = r.cfg.scenario.critical_down;
    let seg_up = m
        .segments
        .iter()
        .find(|s| s.start == up)
        .ok_or("no segment at the upward step")?;
    let seg_down = m
        .segments
        .iter()
        .find(|s| s.start == down)
        .ok_or("no segment at the downward step")?;
    let edges = |from: f64, to: f64| -> Vec<usize> {
        out.record
            .profiles
            .iter()
            .filter(|p| p.t >= from && p.t <= to)
            .filter_map(|p| p.edge)
            .collect()
    };
    let nominal_edge = *edges(0.0, up).last().ok_or("no profile before the step")?;
    let rise = edges(up, up + seg_up.settling_time.unwrap_or(0.0));
    let fall = edges(down, down + seg_down.settling_time.unwrap_or(0.0));
    let rise_monotone = rise.windows(2).all(|w| w[1] <= w[0]);
    let fall_monotone = fall.windows(2).all(|w| w[1] >= w[0]);
    let lowest = rise.iter().copied().min().unwrap_or(nominal_edge);
    let os_max = r.cfg.nmpc.os_max;
    check(
        settled
            && m.max_overshoot <= os_max
            && m.violations.overshoot == 0
            && rise_monotone
            && fall_monotone
            && lowest < nominal_edge,
        format!(
            "settling {:?} h, max overshoot {:.1}%, edge {nominal_edge} -> {lowest} (rise monotone {rise_monotone}, fall monotone {fall_monotone}), y_set {:.4} -> {:.4}",
            m.segments.iter().map(|s| s.settling_time).collect::<Vec<_>>(),
            100.0 * m.max_overshoot,
            scenario.y_set.value_at(0.0),
            scenario.y_set.value_at(up)
        ),
    )
}

fn perturbed_loop(r: &Runs) -> (Outcome, Option<ScenarioOutput>) {
    let out = match r.run(ScenarioKind::Perturbed, false) {
        Ok((_, out)) => out,
        Err(e) => return (Err(e), None),
    };
    let m = &out.metrics;
    let delays_ok = !m.estimation_delays.is_empty()
        && m.estimation_delays
            .iter()
            .all(|d| matches!(d, Some(k) if *k <= 2));
    let settled = m.segments.iter().all(|s| s.settling_time.is_some());
    let detail = format!(
        "estimation delays {:?} periods, settling {:?} h",
        m.estimation_delays,
        m.segments
            .iter()
            .map(|s| s.settling_time)
            .collect::<Vec<_>>()
    );
    (check(delays_ok && settled, detail), Some(out))
}

// Full-state moving-horizon baseline: decision variables are the 128 states
// at the start of the window plus the N_e solvent flows.

fn mhe_economy(r: &Runs) -> Outcome {
    let (cfg, model) = (&r.cfg, &r.model);
    let (p, o) = (&cfg.plant, &cfg.integrator);
    let ne = cfg.mhe.horizon;
    let n = model.n_hist;
    let dt = p.sampling_time;

    // A short excitation so the window carries information.
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let periods = n + ne + 4;
    let mut state = purex_nmpc::dae::steady_state(p.u_nominal, p.q_nominal, None, p, o)
        .map_err(|e| e.to_string())?;
    let mut states: Vec<PlantState> = vec![state];
    let mut ys = vec![state.y()];
    let mut us = Vec::new();
    let q_true = 1.05 * p.q_nominal;
    for _ in 0..periods {
        let u = p.u_nominal * rng.random_range(0.9..1.1);
        state = step(&state, u, q_true, dt, o, p).map_err(|e| e.to_string())?;
        us.push(u);
        ys.push(state.y());
        states.push(state);
    }

    let mut pso = cfg.pso.clone();
    pso.max_iter = 20;
    pso.stall_patience = pso.max_iter;

    let mut est =
        EstimatorState::new(n, cfg.mhe.clone(), p.q_nominal).map_err(|e| e.to_string())?;
    est.prefill(ys[0], p.u_nominal, p.q_nominal);
    for k in 0..periods {
        est.push_control(us[k]);
        est.push_measurement(ys[k + 1]);
    }
    let repeats = 5;
    let start = Instant::now();
    for _ in 0..repeats {
        let mut e = est.clone();
        e.estimate(model, &pso).map_err(|e| e.to_string())?;
    }
    let t_surrogate = start.elapsed().as_secs_f64() / repeats as f64;

    let k0 = periods - ne;
    let x0 = states[k0].x;
    let window_u: Vec<f64> = us[k0..].to_vec();
    let window_y: Vec<f64> = ys[k0 + 1..].to_vec();
    let mut lower: Vec<f64> = x0.iter().map(|v| 0.9 * v).collect();
    let mut upper: Vec<f64> = x0.iter().map(|v| 1.1 * v + 1e-6).collect();
    lower.extend(std::iter::repeat_n(cfg.mhe.q_lo * p.q_nominal, ne));
    upper.extend(std::iter::repeat_n(cfg.mhe.q_hi * p.q_nominal, ne));
    let lambda = cfg.mhe.forgetting;
    let objective = |z: &[f64]| -> f64 {
        let mut s = PlantState::default();
        s.x.copy_from_slice(&z[..N_STATES]);
        let mut total = 0.0;
        for i in 0..ne {
            s = match step(&s, window_u[i], z[N_STATES + i], dt, o, p) {
                Ok(next) => next,
                Err(_) => return f64::INFINITY,
            };
            total += lambda.powi((ne - 1 - i) as i32) * (s.y() - window_y[i]).powi(2);
        }
        total
    };
    let feasible = |_: &[f64]| true;
    let problem = BoxedProblem {
        lower,
        upper,
        objective: &objective,
        feasible: &feasible,
    };
    let start = Instant::now();
    let res = optimize(&problem, &pso, &[]).map_err(|e| e.to_string())?;
    let t_full = start.elapsed().as_secs_f64();
    let ratio = t_full / t_surrogate;
    check(
        ratio >= 10.0,
        format!(
            "surrogate {:.2} ms ({ne} unknowns) vs full-state {:.2} s ({} unknowns, {} evaluations): {ratio:.0}x",
            1e3 * t_surrogate,
            t_full,
            N_STATES + ne,
            res.evaluations
        ),
    )
}

fn determinism(r: &Runs, first: &ScenarioOutput) -> Outcome {
    let (_, again) = r.run(ScenarioKind::Perturbed, false)?;
    let profiles = |o: &ScenarioOutput| {
        let mut buf = Vec::new();
        o.record
            .write_profiles_csv(&mut buf)
            .map(|_| buf)
            .map_err(|e| e.to_string())
    };
    let same_record = first.record.to_csv_string() == again.record.to_csv_string();
    let same_profiles = profiles(first)? == profiles(&again)?;
    check(
        same_record && same_profiles,
        format!(
            "record identical {same_record}, profiles identical {same_profiles} ({} rows)",
            again.record.rows.len()
        ),
    )
}

fn report(results: &mut Vec<bool>, label: &str, outcome: Outcome) {
    let (ok, detail) = match outcome {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    println!(
        "{} {:>2} {label}: {detail}",
        if ok { "PASS" } else { "FAIL" },
        results.len() + 1
    );
    results.push(ok);
}

fn main() -> ExitCode {
    let cfg = Config::nominal();
    let mut results = Vec::new();
    report(
        &mut results,
        "interface equilibrium oracle",
        chemistry_oracle(&cfg),
    );
    report(&mut results, "start-up mole balance", mole_balance(&cfg));
    report(&mut results, "steady-state curve", steady_curve(&cfg));
    report(&mut results, "BPTT gradients", bptt_gradients(&cfg));

    let trained = train(&cfg);
    let model = match trained {
        Ok((model, _, rep)) => {
            let ok = rep.samples >= 100_000
                && rep.residual.val_mae <= 5e-3
                && rep.classifier.val_accuracy >= 0.85
                && rep.test_accuracy >= 0.85
                && rep.seconds < 1800.0;
            let detail = format!(
                "{} samples, val MAE {:.2e}, accuracy {:.3} val / {:.3} test, {:.0} s",
                rep.samples,
                rep.residual.val_mae,
                rep.classifier.val_accuracy,
                rep.test_accuracy,
                rep.seconds
            );
            report(&mut results, "surrogate accuracy", check(ok, detail));
            Some(model)
        }
        Err(e) => {
            report(&mut results, "surrogate accuracy", Err(e.to_string()));
            None
        }
    };

    let later = [
        "start-up closed loop",
        "critical scenario",
        "perturbed scenario",
        "MHE economy",
        "determinism",
    ];
    let setpoints = SetPoints::compute(&mut SteadyStateSolver::new(
        cfg.plant.clone(),
        cfg.integrator.clone(),
    ));
    match (model, setpoints) {
        (Some(model), Ok(sp)) => {
            let runs = Runs { cfg, model, sp };
            report(&mut results, later[0], startup_loop(&runs));
            report(&mut results, later[1], critical_loop(&runs));
            let (outcome, first) = perturbed_loop(&runs);
            report(&mut results, later[2], outcome);
            report(&mut results, later[3], mhe_economy(&runs));
            match first {
                Some(out) => report(&mut results, later[4], determinism(&runs, &out)),
                None => report(
                    &mut results,
                    later[4],
                    Err("perturbed run unavailable".into()),
                ),
            }
        }
        (_, sp) => {
            let why = sp
                .err()
                .map(|e| e.to_string())
                .unwrap_or_else(|| "no trained surrogate".into());
            for label in later {
                report(&mut results, label, Err(why.clone()));
            }
        }
    }

    let passed = results.iter().filter(|r| **r).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
