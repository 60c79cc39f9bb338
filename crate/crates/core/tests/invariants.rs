use proptest::prelude::*;

use purex_nmpc::dae::solve_algebraic;
use purex_nmpc::model::{tbp_free, Block, PlantParams, StageConc, N_STAGES, N_STATES};
use purex_nmpc::pso::{optimize, BoxedProblem, PsoOptions};
use purex_nmpc::scenario::{edge_index, Schedule};
use purex_nmpc::surrogate::{Normalizer, Signal, ThetaVector};
use purex_nmpc::Config;

fn stage() -> impl Strategy<Value = [f64; 4]> {
    (0.0..2.0f64, 0.0..0.8f64, 0.0..5.0f64, 0.0..0.5f64).prop_map(|(a, b, c, d)| [a, b, c, d])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn interface_concentrations_stay_physical(stages in prop::collection::vec(stage(), N_STAGES)) {
        let cfg = Config::nominal();
        let p: &PlantParams = &cfg.plant;
        let mut x = [0.0; N_STATES];
        for (n, c) in stages.iter().enumerate() {
            x[Block::UAqMixer.at(n)] = c[0];
            x[Block::UOrgMixer.at(n)] = c[1];
            x[Block::HAqMixer.at(n)] = c[2];
            x[Block::HOrgMixer.at(n)] = c[3];
        }
        let alg = solve_algebraic(&x, p, &cfg.integrator).unwrap();
        for n in 0..N_STAGES {
            let conc = StageConc::of(&x, n);
            let (u, h) = (alg[n], alg[N_STAGES + n]);
            prop_assert!(u >= 0.0 && u <= conc.u_star_max() + 1e-12);
            prop_assert!(h >= 0.0 && h <= conc.h_star_max() + 1e-12);
            prop_assert!(conc.u_org_interface(u) >= -1e-12);
            prop_assert!(conc.h_org_interface(h) >= -1e-12);
            let free = tbp_free(u, h, p).unwrap();
            prop_assert!(free > 0.0 && free <= p.tbp_total);
        }
    }

    #[test]
    fn swarm_result_is_inside_the_box_and_feasible(
        centre in prop::collection::vec(-3.0..3.0f64, 1..5),
        width in 0.5..4.0f64,
        seed in 0u64..1000,
    ) {
        let lower: Vec<f64> = centre.iter().map(|c| c - width).collect();
        let upper: Vec<f64> = centre.iter().map(|c| c + width).collect();
        let target = centre.clone();
        let objective = |x: &[f64]| x.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let first = centre[0];
        let feasible = |x: &[f64]| x[0] >= first - 0.5 * width;
        let problem = BoxedProblem { lower, upper, objective: &objective, feasible: &feasible };
        let opts = PsoOptions { seed, max_iter: 40, ..PsoOptions::default() };
        let res = optimize(&problem, &opts, &[]).unwrap();
        prop_assert!(problem.in_box(&res.best_point));
        prop_assert!(feasible(&res.best_point));
        prop_assert!(res.history.windows(2).all(|w| w[1] <= w[0]));
        prop_assert_eq!(res.best_value, objective(&res.best_point));
    }

    #[test]
    fn normalization_round_trips(lo in -10.0..10.0f64, span in 1e-3..50.0f64, v in -100.0..100.0f64) {
        let norm = Normalizer::new([lo; 3], [lo + span; 3]).unwrap();
        for s in [Signal::Y, Signal::U, Signal::Q] {
            let back = norm.denormalize(s, norm.normalize(s, v));
            prop_assert!((back - v).abs() <= 1e-9 * (1.0 + v.abs()));
        }
        let inside = lo + 0.5 * span;
        prop_assert!((norm.normalize(Signal::Y, inside) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn theta_flattening_round_trips(
        rows in prop::collection::vec((0.0..1.0f64, 0.5..4.0f64, 5.0..15.0f64), 2..6),
        next in (0.0..1.0f64, 0.5..4.0f64, 5.0..15.0f64),
    ) {
        let (y, (u, q)): (Vec<f64>, (Vec<f64>, Vec<f64>)) =
            rows.iter().map(|(a, b, c)| (*a, (*b, *c))).unzip();
        let mut th = ThetaVector::new(y.clone(), u, q).unwrap();
        prop_assert_eq!(ThetaVector::from_flat(&th.to_flat()).unwrap(), th.clone());
        th.shift(next.0, next.1, next.2);
        prop_assert_eq!(th.window(), y.len());
        prop_assert_eq!(th.y[..y.len() - 1].to_vec(), y[1..].to_vec());
        prop_assert_eq!(*th.q.last().unwrap(), next.2);
    }

    #[test]
    fn schedule_returns_the_latest_level(
        gaps in prop::collection::vec(0.5..10.0f64, 0..6),
        t in 0.0..80.0f64,
    ) {
        let mut steps = vec![(0.0, 0.0)];
        for (i, g) in gaps.iter().enumerate() {
            let at = steps.last().unwrap().0 + g;
            steps.push((at, (i + 1) as f64));
        }
        let sched = Schedule::new(steps.clone()).unwrap();
        let want = steps.iter().rfind(|s| s.0 <= t).unwrap().1;
        prop_assert_eq!(sched.value_at(t), want);
        prop_assert_eq!(sched.change_times().count(), gaps.len());
    }

    #[test]
    fn edge_lies_on_the_profile(profile in prop::collection::vec(0.0..1.0f64, N_STAGES)) {
        let max = profile.iter().copied().fold(0.0, f64::max);
        match edge_index(&profile) {
            None => prop_assert!(max <= 1e-9),
            Some(e) => {
                prop_assert!((1..=N_STAGES).contains(&e));
                prop_assert!(profile[e - 1] >= 0.5 * max);
                prop_assert!(profile[..e - 1].iter().all(|v| *v < 0.5 * max));
            }
        }
    }
}

#[test]
fn schedules_reject_bad_step_lists() {
    assert!(Schedule::new(vec![(1.0, 2.0)]).is_err());
    assert!(Schedule::new(vec![(0.0, 1.0), (3.0, 2.0), (3.0, 4.0)]).is_err());
    assert!(Schedule::new(vec![(0.0, f64::NAN)]).is_err());
}
