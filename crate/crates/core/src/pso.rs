//! Box-constrained particle swarm optimisation with re-initialisation of
//! particles that leave the feasible set.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PsoOptions {
    pub swarm_size: usize,
    pub max_iter: usize,
    pub inertia: f64,
    pub cognitive: f64,
    pub social: f64,
    /// Velocity bound as a fraction of each box width.
    pub velocity_clamp: f64,
    /// Stop when the global best improves by less than this...
    pub stall_tol: f64,
    /// ...for this many consecutive iterations.
    pub stall_patience: usize,
    /// Draws allowed per re-initialisation before a particle is given up.
    pub reinit_budget: usize,
    pub seed: u64,
}

impl Default for PsoOptions {
    fn default() -> Self {
        PsoOptions {
            swarm_size: 30,
            max_iter: 100,
            inertia: 0.72,
            cognitive: 1.49,
            social: 1.49,
            velocity_clamp: 0.2,
            stall_tol: 1e-8,
            stall_patience: 15,
            reinit_budget: 1000,
            seed: 7,
        }
    }
}

impl PsoOptions {
    pub fn validate(&self) -> Result<()> {
        if self.swarm_size < 2 {
            return Err(Error::Config("pso.swarm_size must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.inertia) {
            return Err(Error::Config("pso.inertia must lie in [0, 1)".into()));
        }
        if !(self.cognitive > 0.0 && self.social > 0.0) {
            return Err(Error::Config("pso.c1 and pso.c2 must be positive".into()));
        }
        if !(self.velocity_clamp > 0.0 && self.velocity_clamp <= 1.0) {
            return Err(Error::Config(
                "pso.velocity_clamp must lie in (0, 1]".into(),
            ));
        }
        if self.max_iter == 0 || self.reinit_budget == 0 || self.stall_patience == 0 {
            return Err(Error::Config(
                "pso iteration limits must be positive".into(),
            ));
        }
        if !(self.stall_tol >= 0.0) {
            return Err(Error::Config("pso.stall_tol must be non-negative".into()));
        }
        Ok(())
    }
}

/// Minimise `objective` over the box [lower, upper] subject to `feasible`.
pub struct BoxedProblem<'a> {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub objective: &'a dyn Fn(&[f64]) -> f64,
    pub feasible: &'a dyn Fn(&[f64]) -> bool,
}

impl<'a> BoxedProblem<'a> {
    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    fn validate(&self) -> Result<()> {
        if self.lower.is_empty() || self.lower.len() != self.upper.len() {
            return Err(Error::Dimension {
                expected: self.lower.len(),
                got: self.upper.len(),
            });
        }
        for (l, u) in self.lower.iter().zip(&self.upper) {
            if !(l.is_finite() && u.is_finite() && l < u) {
                return Err(Error::Config(format!("invalid PSO bounds [{l}, {u}]")));
            }
        }
        Ok(())
    }

    pub fn in_box(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (l, u))| *v >= *l && *v <= *u)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Particle {
    pub position: Vec<f64>,
    pub velocity: Vec<f64>,
    pub best_position: Vec<f64>,
    pub best_value: f64,
    /// False once a re-initialisation exhausted its budget.
    pub active: bool,
}

/// Redraws `particle` uniformly in the box until `feasible` accepts it.
///
/// On success the personal best is reset to the new position (value left
/// at +∞ for the caller to evaluate) and the number of draws is returned.
pub fn reinitialize_particle(
    particle: &mut Particle,
    lower: &[f64],
    upper: &[f64],
    feasible: &dyn Fn(&[f64]) -> bool,
    rng: &mut ChaCha8Rng,
    budget: usize,
    velocity_clamp: f64,
) -> Result<usize> {
    let dim = lower.len();
    particle.position.resize(dim, 0.0);
    particle.velocity.resize(dim, 0.0);
    for draws in 1..=budget {
        for d in 0..dim {
            particle.position[d] = rng.random_range(lower[d]..=upper[d]);
        }
        if feasible(&particle.position) {
            for d in 0..dim {
                let vmax = velocity_clamp * (upper[d] - lower[d]);
                particle.velocity[d] = rng.random_range(-vmax..=vmax);
            }
            particle.best_position = particle.position.clone();
            particle.best_value = f64::INFINITY;
            particle.active = true;
            return Ok(draws);
        }
    }
    particle.active = false;
    Err(Error::Infeasible { draws: budget })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsoResult {
    pub best_point: Vec<f64>,
    pub best_value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub reinitializations: usize,
    /// Global best after initialisation and after every iteration.
    pub history: Vec<f64>,
}

/// Runs the swarm. `seeds` are candidate points placed first (if feasible).
pub fn optimize(
    problem: &BoxedProblem,
    options: &PsoOptions,
    seeds: &[Vec<f64>],
) -> Result<PsoResult> {
    options.validate()?;
    problem.validate()?;
    let dim = problem.dim();
    let (lo, hi) = (&problem.lower, &problem.upper);
    let vmax: Vec<f64> = (0..dim)
        .map(|d| options.velocity_clamp * (hi[d] - lo[d]))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut evaluations = 0usize;
    let mut reinits = 0usize;
    let mut total_draws = 0usize;

    let mut swarm: Vec<Particle> = Vec::with_capacity(options.swarm_size);
    for i in 0..options.swarm_size {
        let mut p = Particle {
            position: vec![0.0; dim],
            velocity: vec![0.0; dim],
            best_position: vec![0.0; dim],
            best_value: f64::INFINITY,
            active: false,
        };
        let seeded = seeds
            .get(i)
            .filter(|s| s.len() == dim)
            .map(|s| {
                (0..dim)
                    .map(|d| s[d].clamp(lo[d], hi[d]))
                    .collect::<Vec<_>>()
            })
            .filter(|s| (problem.feasible)(s));
        match seeded {
            Some(s) => {
                p.position = s.clone();
                p.best_position = s;
                p.active = true;
                for d in 0..dim {
                    p.velocity[d] = rng.random_range(-vmax[d]..=vmax[d]);
                }
            }
            None => match reinitialize_particle(
                &mut p,
                lo,
                hi,
                problem.feasible,
                &mut rng,
                options.reinit_budget,
                options.velocity_clamp,
            ) {
                Ok(d) => total_draws += d,
                Err(_) => total_draws += options.reinit_budget,
            },
        }
        if p.active {
            p.best_value = (problem.objective)(&p.position);
            evaluations += 1;
        }
        swarm.push(p);
    }

    let mut best: Option<(Vec<f64>, f64)> = None;
    let update_global = |swarm: &[Particle], best: &mut Option<(Vec<f64>, f64)>| {
        for p in swarm.iter().filter(|p| p.active) {
            if best
                .as_ref()
                .map(|(_, v)| p.best_value < *v)
                .unwrap_or(true)
            {
                *best = Some((p.best_position.clone(), p.best_value));
            }
        }
    };
    update_global(&swarm, &mut best);
    if best.is_none() {
        return Err(Error::Infeasible { draws: total_draws });
    }
    let mut history = vec![best.as_ref().unwrap().1];

    let mut stall = 0usize;
    let mut iterations = 0usize;
    for _ in 0..options.max_iter {
        iterations += 1;
        let g = best.as_ref().unwrap().0.clone();
        for p in swarm.iter_mut() {
            if !p.active {
                continue;
            }
            for d in 0..dim {
                let r1: f64 = rng.random();
                let r2: f64 = rng.random();
                let v = options.inertia * p.velocity[d]
                    + options.cognitive * r1 * (p.best_position[d] - p.position[d])
                    + options.social * r2 * (g[d] - p.position[d]);
                p.velocity[d] = v.clamp(-vmax[d], vmax[d]);
                let x = p.position[d] + p.velocity[d];
                if x < lo[d] || x > hi[d] {
                    p.velocity[d] = 0.0;
                }
                p.position[d] = x.clamp(lo[d], hi[d]);
            }
            if !(problem.feasible)(&p.position) {
                reinits += 1;
                if reinitialize_particle(
                    p,
                    lo,
                    hi,
                    problem.feasible,
                    &mut rng,
                    options.reinit_budget,
                    options.velocity_clamp,
                )
                .is_err()
                {
                    continue;
                }
                p.best_value = (problem.objective)(&p.position);
                evaluations += 1;
                continue;
            }
            let val = (problem.objective)(&p.position);
            evaluations += 1;
            if val < p.best_value {
                p.best_value = val;
                p.best_position.copy_from_slice(&p.position);
            }
        }
        let before = best.as_ref().unwrap().1;
        update_global(&swarm, &mut best);
        let after = best.as_ref().unwrap().1;
        history.push(after);
        if before - after < options.stall_tol {
            stall += 1;
            if stall >= options.stall_patience {
                break;
            }
        } else {
            stall = 0;
        }
    }

    let (best_point, best_value) = best.unwrap();
    Ok(PsoResult {
        best_point,
        best_value,
        iterations,
        evaluations,
        reinitializations: reinits,
        history,
    })
}
