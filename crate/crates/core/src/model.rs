//! Mixer-settler cascade model: flow topology, interfacial equilibrium and
//! the uranium/nitric-acid mass balances.
//!
//! Stages are numbered 1..=16 in the public API and 0..16 internally.
//! Aqueous phase flows from stage 16 down to stage 1 (scrub acid enters at
//! 16, feed joins at the feed stage, raffinate leaves stage 1); organic
//! phase flows from stage 1 (fresh solvent) up to stage 16 (loaded solvent).
//!
//! Units: hours, litres, L/h, mol/L. Mass-transfer coefficients are given in
//! m/s and droplet diameters in m; [`PlantParams::transfer_rate_u`] converts.

use crate::config::KeyValues;
use crate::error::{Error, Result};

pub const N_STAGES: usize = 16;
/// Differential states: eight blocks of [`N_STAGES`].
pub const N_STATES: usize = 8 * N_STAGES;
/// Algebraic states: U* for every stage, then H* for every stage.
pub const N_ALG: usize = 2 * N_STAGES;

/// Position of the controlled variable (U_aq^D at stage 9) in the state.
pub const Y_INDEX: usize = Block::UAqSettler as usize * N_STAGES + 8;
/// Position of the constrained variable (U_aq^D at stage 1, raffinate).
pub const Z_INDEX: usize = Block::UAqSettler as usize * N_STAGES;

/// The eight state blocks, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    UAqMixer = 0,
    UOrgMixer = 1,
    UAqSettler = 2,
    UOrgSettler = 3,
    HAqMixer = 4,
    HOrgMixer = 5,
    HAqSettler = 6,
    HOrgSettler = 7,
}

impl Block {
    pub const ALL: [Block; 8] = [
        Block::UAqMixer,
        Block::UOrgMixer,
        Block::UAqSettler,
        Block::UOrgSettler,
        Block::HAqMixer,
        Block::HOrgMixer,
        Block::HAqSettler,
        Block::HOrgSettler,
    ];

    /// Index into the state vector for a 0-based stage.
    #[inline]
    pub fn at(self, stage: usize) -> usize {
        self as usize * N_STAGES + stage
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Species {
    Uranium,
    Acid,
}

/// Physical constants and flowsheet values.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantParams {
    /// 1-based stage receiving the feed solution.
    pub feed_stage: usize,
    /// Uranium equilibrium constant K_U, (L/mol)^4.
    pub k_eq_u: f64,
    /// Acid equilibrium constant K_H, (L/mol)^2.
    pub k_eq_h: f64,
    /// Mass-transfer coefficients, m/s.
    pub k_transfer_u: f64,
    pub k_transfer_h: f64,
    /// Droplet diameter, m.
    pub droplet_diameter: f64,
    /// Total mixer volume per stage, L.
    pub v_mix_total: f64,
    pub v_settler_aq: f64,
    pub v_settler_org: f64,
    /// Scrubbing acid flow A_E (L/h) and its acid concentration (mol/L).
    pub scrub_flow: f64,
    pub scrub_acid: f64,
    /// Feed solution concentrations, mol/L.
    pub feed_uranium: f64,
    pub feed_acid: f64,
    /// Total TBP concentration in the solvent, mol/L.
    pub tbp_total: f64,
    /// Bounds on the feed flow A_F and its per-period rate, L/h.
    pub u_min: f64,
    pub u_max: f64,
    pub du_max: f64,
    /// Nominal fresh solvent flow O_E, L/h.
    pub q_nominal: f64,
    /// Control sampling time, h.
    pub sampling_time: f64,
    /// Nominal feed flow of the flowsheet, L/h.
    pub u_nominal: f64,
    /// Raffinate uranium tolerance U_aq^D_1,tol, mol/L.
    pub z_tol: f64,
    /// Fraction of y(u_max) that marks the saturation knee.
    pub knee_fraction: f64,
}

impl PlantParams {
    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        if let Some(n) = kv.get::<usize>("plant.n_stages")? {
            if n != N_STAGES {
                return Err(Error::Config(format!(
                    "plant.n_stages must be {N_STAGES}, got {n}"
                )));
            }
        }
        let p = PlantParams {
            feed_stage: kv.require("plant.feed_stage")?,
            k_eq_u: kv.require("plant.K_U")?,
            k_eq_h: kv.require("plant.K_H")?,
            k_transfer_u: kv.require("plant.k_U")?,
            k_transfer_h: kv.require("plant.k_H")?,
            droplet_diameter: kv.require("plant.d")?,
            v_mix_total: kv.require("plant.V_mix_total")?,
            v_settler_aq: kv.require("plant.V_settler_aq")?,
            v_settler_org: kv.require("plant.V_settler_og")?,
            scrub_flow: kv.require("plant.A_E")?,
            scrub_acid: kv.require("plant.H_aq_E")?,
            feed_uranium: kv.require("plant.U_aq_F")?,
            feed_acid: kv.require("plant.H_aq_F")?,
            tbp_total: kv.require("plant.TBP_total")?,
            u_min: kv.require("plant.u_min")?,
            u_max: kv.require("plant.u_max")?,
            du_max: kv.require("plant.du_max")?,
            q_nominal: kv.require("plant.q_nominal")?,
            sampling_time: kv.require("plant.T")?,
            u_nominal: kv.require("plant.u_nominal")?,
            z_tol: kv.require("plant.z_tol")?,
            knee_fraction: kv.require("plant.knee_fraction")?,
        };
        p.validate()?;
        Ok(p)
    }

    /// Parameters from the shipped `nominal.cfg`.
    pub fn nominal() -> Self {
        crate::config::Config::nominal().plant
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("K_U", self.k_eq_u),
            ("K_H", self.k_eq_h),
            ("k_U", self.k_transfer_u),
            ("k_H", self.k_transfer_h),
            ("d", self.droplet_diameter),
            ("V_mix_total", self.v_mix_total),
            ("V_settler_aq", self.v_settler_aq),
            ("V_settler_og", self.v_settler_org),
            ("A_E", self.scrub_flow),
            ("H_aq_E", self.scrub_acid),
            ("U_aq_F", self.feed_uranium),
            ("H_aq_F", self.feed_acid),
            ("TBP_total", self.tbp_total),
            ("u_min", self.u_min),
            ("du_max", self.du_max),
            ("q_nominal", self.q_nominal),
            ("T", self.sampling_time),
            ("u_nominal", self.u_nominal),
            ("z_tol", self.z_tol),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Domain(format!("{name} must be positive, got {v}")));
            }
        }
        if self.u_min >= self.u_max {
            return Err(Error::Domain(format!(
                "u_min ({}) must be below u_max ({})",
                self.u_min, self.u_max
            )));
        }
        if !(self.feed_stage > 1 && self.feed_stage < N_STAGES) {
            return Err(Error::Domain(format!(
                "feed_stage must lie strictly inside 1..{N_STAGES}, got {}",
                self.feed_stage
            )));
        }
        if !(self.knee_fraction > 0.0 && self.knee_fraction < 1.0) {
            return Err(Error::Domain("knee_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Uranium interfacial transfer rate 3·k_U/d converted to 1/h.
    #[inline]
    pub fn transfer_rate_u(&self) -> f64 {
        3.0 * self.k_transfer_u * 3600.0 / self.droplet_diameter
    }

    #[inline]
    pub fn transfer_rate_h(&self) -> f64 {
        3.0 * self.k_transfer_h * 3600.0 / self.droplet_diameter
    }

    #[inline]
    fn feed_index(&self) -> usize {
        self.feed_stage - 1
    }
}

/// Differential and algebraic concentrations of the cascade.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantState {
    pub x: [f64; N_STATES],
    pub x_alg: [f64; N_ALG],
}

impl Default for PlantState {
    fn default() -> Self {
        PlantState {
            x: [0.0; N_STATES],
            x_alg: [0.0; N_ALG],
        }
    }
}

impl PlantState {
    /// Controlled variable: aqueous uranium in the stage-9 settler.
    #[inline]
    pub fn y(&self) -> f64 {
        self.x[Y_INDEX]
    }

    /// Constrained variable: aqueous uranium in the stage-1 settler.
    #[inline]
    pub fn z(&self) -> f64 {
        self.x[Z_INDEX]
    }

    /// Concentration in `block` at 1-based `stage`.
    pub fn get(&self, block: Block, stage: usize) -> f64 {
        self.x[block.at(stage - 1)]
    }

    /// U* at 1-based `stage`.
    pub fn u_star(&self, stage: usize) -> f64 {
        self.x_alg[stage - 1]
    }

    pub fn h_star(&self, stage: usize) -> f64 {
        self.x_alg[N_STAGES + stage - 1]
    }

    /// Aqueous uranium in each settler, stage 1 first.
    pub fn settler_aq_uranium(&self) -> [f64; N_STAGES] {
        let mut out = [0.0; N_STAGES];
        out.copy_from_slice(&self.x[Block::UAqSettler.at(0)..Block::UAqSettler.at(0) + N_STAGES]);
        out
    }

    pub fn min_concentration(&self) -> f64 {
        self.x.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Flows, mixer hold-ups and external streams for one (u, q) operating point.
#[derive(Debug, Clone, PartialEq)]
pub struct StageFlows {
    /// Aqueous flow through mixer and settler of each stage.
    pub aq: [f64; N_STAGES],
    /// Organic flow through mixer and settler of each stage.
    pub org: [f64; N_STAGES],
    /// Mixer aqueous volume V^M and organic volume W^M.
    pub v_mix_aq: [f64; N_STAGES],
    pub v_mix_org: [f64; N_STAGES],
    /// Aqueous streams entering from outside the cascade (feed, scrub).
    pub ext_aq_flow: [f64; N_STAGES],
    pub ext_aq_u: [f64; N_STAGES],
    pub ext_aq_h: [f64; N_STAGES],
    /// Organic streams entering from outside (fresh solvent at stage 1).
    pub ext_org_flow: [f64; N_STAGES],
    pub ext_org_u: [f64; N_STAGES],
    pub ext_org_h: [f64; N_STAGES],
    /// Feed flow these flows were wired for.
    pub feed_flow: f64,
}

/// Mixer inlet concentrations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Inlets {
    pub aq_u: [f64; N_STAGES],
    pub aq_h: [f64; N_STAGES],
    pub org_u: [f64; N_STAGES],
    pub org_h: [f64; N_STAGES],
}

/// Builds the flow network for feed flow `u` and fresh solvent flow `q`.
pub fn wire_flows(params: &PlantParams, u: f64, q: f64) -> Result<StageFlows> {
    if !(u.is_finite() && u > 0.0) {
        return Err(Error::Domain(format!(
            "feed flow must be positive, got {u}"
        )));
    }
    if !(q.is_finite() && q > 0.0) {
        return Err(Error::Domain(format!(
            "solvent flow must be positive, got {q}"
        )));
    }
    let mut f = StageFlows {
        aq: [0.0; N_STAGES],
        org: [0.0; N_STAGES],
        v_mix_aq: [0.0; N_STAGES],
        v_mix_org: [0.0; N_STAGES],
        ext_aq_flow: [0.0; N_STAGES],
        ext_aq_u: [0.0; N_STAGES],
        ext_aq_h: [0.0; N_STAGES],
        ext_org_flow: [0.0; N_STAGES],
        ext_org_u: [0.0; N_STAGES],
        ext_org_h: [0.0; N_STAGES],
        feed_flow: u,
    };
    let top = N_STAGES - 1;
    let feed = params.feed_index();
    f.ext_aq_flow[top] = params.scrub_flow;
    f.ext_aq_h[top] = params.scrub_acid;
    f.ext_aq_flow[feed] = u;
    f.ext_aq_u[feed] = params.feed_uranium;
    f.ext_aq_h[feed] = params.feed_acid;
    f.ext_org_flow[0] = q;

    // No accumulation: each stage passes on what enters it.
    let mut carried = 0.0;
    for n in (0..N_STAGES).rev() {
        carried += f.ext_aq_flow[n];
        f.aq[n] = carried;
    }
    let mut carried = 0.0;
    for n in 0..N_STAGES {
        carried += f.ext_org_flow[n];
        f.org[n] = carried;
    }
    for n in 0..N_STAGES {
        let (v, w) = mixer_split(params.v_mix_total, f.aq[n], f.org[n]);
        f.v_mix_aq[n] = v;
        f.v_mix_org[n] = w;
    }
    Ok(f)
}

/// Perfect-mixing split of the mixer volume: A·W = O·V and V + W = total.
pub fn mixer_split(total: f64, aq_in: f64, org_in: f64) -> (f64, f64) {
    let v = total * aq_in / (aq_in + org_in);
    (v, total - v)
}

impl StageFlows {
    /// Mixer inlet concentrations given the current settler contents.
    pub fn inlets(&self, x: &[f64; N_STATES]) -> Inlets {
        let mut inl = Inlets {
            aq_u: [0.0; N_STAGES],
            aq_h: [0.0; N_STAGES],
            org_u: [0.0; N_STAGES],
            org_h: [0.0; N_STAGES],
        };
        for n in 0..N_STAGES {
            let (mut nu, mut nh) = (
                self.ext_aq_flow[n] * self.ext_aq_u[n],
                self.ext_aq_flow[n] * self.ext_aq_h[n],
            );
            if n + 1 < N_STAGES {
                nu += self.aq[n + 1] * x[Block::UAqSettler.at(n + 1)];
                nh += self.aq[n + 1] * x[Block::HAqSettler.at(n + 1)];
            }
            inl.aq_u[n] = nu / self.aq[n];
            inl.aq_h[n] = nh / self.aq[n];

            let (mut nu, mut nh) = (
                self.ext_org_flow[n] * self.ext_org_u[n],
                self.ext_org_flow[n] * self.ext_org_h[n],
            );
            if n > 0 {
                nu += self.org[n - 1] * x[Block::UOrgSettler.at(n - 1)];
                nh += self.org[n - 1] * x[Block::HOrgSettler.at(n - 1)];
            }
            inl.org_u[n] = nu / self.org[n];
            inl.org_h[n] = nh / self.org[n];
        }
        inl
    }
}

/// Free TBP at the interface from the closed-form root of the TBP balance.
pub fn tbp_free(u_star: f64, h_star: f64, params: &PlantParams) -> Result<f64> {
    if !(u_star >= 0.0 && h_star >= 0.0) {
        return Err(Error::Domain(format!(
            "interface concentrations must be non-negative, got U*={u_star}, H*={h_star}"
        )));
    }
    if !(params.tbp_total > 0.0) {
        return Err(Error::Domain("TBP_total must be positive".into()));
    }
    Ok(tbp_free_unchecked(
        u_star,
        h_star,
        params.k_eq_u,
        params.k_eq_h,
        params.tbp_total,
    ))
}

#[inline]
pub(crate) fn tbp_free_unchecked(u: f64, h: f64, k_u: f64, k_h: f64, tbp: f64) -> f64 {
    let nitrate = 2.0 * u + h;
    let a = 2.0 * k_u * u * nitrate * nitrate;
    let b = 1.0 + k_h * h * nitrate;
    2.0 * tbp / (b + (b * b + 4.0 * a * tbp).sqrt())
}

/// Mixer concentrations of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StageConc {
    pub u_aq: f64,
    pub u_org: f64,
    pub h_aq: f64,
    pub h_org: f64,
}

impl StageConc {
    pub fn of(x: &[f64; N_STATES], stage: usize) -> Self {
        StageConc {
            u_aq: x[Block::UAqMixer.at(stage)],
            u_org: x[Block::UOrgMixer.at(stage)],
            h_aq: x[Block::HAqMixer.at(stage)],
            h_org: x[Block::HOrgMixer.at(stage)],
        }
    }

    /// Organic interface concentration as a function of U*, from the
    /// negligible-resistance two-film relation: 0.5·U_aq + U_org − 0.5·U*.
    #[inline]
    pub fn u_org_interface(&self, u_star: f64) -> f64 {
        0.5 * self.u_aq + self.u_org - 0.5 * u_star
    }

    #[inline]
    pub fn h_org_interface(&self, h_star: f64) -> f64 {
        0.5 * self.h_aq + self.h_org - 0.5 * h_star
    }

    /// Largest U* keeping the organic interface concentration non-negative.
    #[inline]
    pub fn u_star_max(&self) -> f64 {
        self.u_aq + 2.0 * self.u_org
    }

    #[inline]
    pub fn h_star_max(&self) -> f64 {
        self.h_aq + 2.0 * self.h_org
    }

    fn check(&self) -> Result<()> {
        let ok = [self.u_aq, self.u_org, self.h_aq, self.h_org]
            .iter()
            .all(|v| *v >= 0.0 && v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "negative or non-finite stage concentration: {self:?}"
            )))
        }
    }
}

/// Interface equilibrium residual (g_U, g_H) for a guess (U*, H*).
pub fn interface_equilibrium_residual(
    conc: &StageConc,
    guess: (f64, f64),
    params: &PlantParams,
) -> Result<(f64, f64)> {
    conc.check()?;
    if !(guess.0 >= 0.0 && guess.1 >= 0.0) {
        return Err(Error::Domain(format!(
            "negative equilibrium guess {guess:?}"
        )));
    }
    let (g, _) = residual_and_jacobian(conc, guess.0, guess.1, params);
    Ok(g)
}

/// Residual and its 2×2 Jacobian with respect to (U*, H*).
#[inline]
pub(crate) fn residual_and_jacobian(
    conc: &StageConc,
    u: f64,
    h: f64,
    params: &PlantParams,
) -> ((f64, f64), [[f64; 2]; 2]) {
    let (ku, kh, tbp) = (params.k_eq_u, params.k_eq_h, params.tbp_total);
    let n = 2.0 * u + h;
    let a = 2.0 * ku * u * n * n;
    let b = 1.0 + kh * h * n;
    let s = (b * b + 4.0 * a * tbp).sqrt();
    let f = 2.0 * tbp / (b + s);

    // f solves a·f² + b·f − c = 0; differentiate implicitly.
    let da_du = 2.0 * ku * (n * n + 4.0 * u * n);
    let da_dh = 4.0 * ku * u * n;
    let db_du = 2.0 * kh * h;
    let db_dh = kh * (n + h);
    let denom = 2.0 * a * f + b;
    let df_du = -(f * f * da_du + f * db_du) / denom;
    let df_dh = -(f * f * da_dh + f * db_dh) / denom;

    let eq_u = ku * u * n * n * f * f;
    let eq_h = kh * h * n * f;
    let deq_u_du = ku * (n * n + 4.0 * u * n) * f * f + 2.0 * ku * u * n * n * f * df_du;
    let deq_u_dh = ku * 2.0 * u * n * f * f + 2.0 * ku * u * n * n * f * df_dh;
    let deq_h_du = 2.0 * kh * h * f + kh * h * n * df_du;
    let deq_h_dh = kh * (n + h) * f + kh * h * n * df_dh;

    let g_u = conc.u_org_interface(u) - eq_u;
    let g_h = conc.h_org_interface(h) - eq_h;
    (
        (g_u, g_h),
        [[-0.5 - deq_u_du, -deq_u_dh], [-deq_h_du, -0.5 - deq_h_dh]],
    )
}

/// Time derivatives of all 128 concentrations.
pub fn mass_balance_rhs(
    x: &[f64; N_STATES],
    x_alg: &[f64; N_ALG],
    flows: &StageFlows,
    params: &PlantParams,
) -> Result<[f64; N_STATES]> {
    for n in 0..N_STAGES {
        if !(flows.v_mix_aq[n] > 0.0 && flows.v_mix_org[n] > 0.0) {
            return Err(Error::Domain(format!(
                "zero mixer phase volume at stage {}",
                n + 1
            )));
        }
    }
    if !(params.v_settler_aq > 0.0 && params.v_settler_org > 0.0) {
        return Err(Error::Domain("zero settler volume".into()));
    }
    let mut out = [0.0; N_STATES];
    rhs_into(x, x_alg, flows, params, &mut out);
    Ok(out)
}

/// Unchecked right-hand side. Mixer and settler volumes must be positive.
pub(crate) fn rhs_into(
    x: &[f64; N_STATES],
    x_alg: &[f64; N_ALG],
    flows: &StageFlows,
    params: &PlantParams,
    out: &mut [f64; N_STATES],
) {
    let inl = flows.inlets(x);
    let (ru, rh) = (params.transfer_rate_u(), params.transfer_rate_h());
    for n in 0..N_STAGES {
        let (a, o) = (flows.aq[n], flows.org[n]);
        let (v, w) = (flows.v_mix_aq[n], flows.v_mix_org[n]);
        let u_aq = x[Block::UAqMixer.at(n)];
        let u_org = x[Block::UOrgMixer.at(n)];
        let h_aq = x[Block::HAqMixer.at(n)];
        let h_org = x[Block::HOrgMixer.at(n)];
        let phi_u = ru * v * (u_aq - x_alg[n]);
        let phi_h = rh * v * (h_aq - x_alg[N_STAGES + n]);

        out[Block::UAqMixer.at(n)] = (a * inl.aq_u[n] - a * u_aq - phi_u) / v;
        out[Block::UOrgMixer.at(n)] = (o * inl.org_u[n] - o * u_org + phi_u) / w;
        out[Block::HAqMixer.at(n)] = (a * inl.aq_h[n] - a * h_aq - phi_h) / v;
        out[Block::HOrgMixer.at(n)] = (o * inl.org_h[n] - o * h_org + phi_h) / w;

        out[Block::UAqSettler.at(n)] =
            a * (u_aq - x[Block::UAqSettler.at(n)]) / params.v_settler_aq;
        out[Block::UOrgSettler.at(n)] =
            o * (u_org - x[Block::UOrgSettler.at(n)]) / params.v_settler_org;
        out[Block::HAqSettler.at(n)] =
            a * (h_aq - x[Block::HAqSettler.at(n)]) / params.v_settler_aq;
        out[Block::HOrgSettler.at(n)] =
            o * (h_org - x[Block::HOrgSettler.at(n)]) / params.v_settler_org;
    }
}

/// Total moles of a species held in all vessels.
pub fn inventory(
    x: &[f64; N_STATES],
    flows: &StageFlows,
    params: &PlantParams,
    species: Species,
) -> f64 {
    let (am, om, ad, od) = match species {
        Species::Uranium => (
            Block::UAqMixer,
            Block::UOrgMixer,
            Block::UAqSettler,
            Block::UOrgSettler,
        ),
        Species::Acid => (
            Block::HAqMixer,
            Block::HOrgMixer,
            Block::HAqSettler,
            Block::HOrgSettler,
        ),
    };
    (0..N_STAGES)
        .map(|n| {
            flows.v_mix_aq[n] * x[am.at(n)]
                + flows.v_mix_org[n] * x[om.at(n)]
                + params.v_settler_aq * x[ad.at(n)]
                + params.v_settler_org * x[od.at(n)]
        })
        .sum()
}

/// Net boundary flux (in − out, mol/h) of a species: feed, scrub and solvent
/// in; raffinate (stage 1 aqueous) and loaded solvent (stage 16 organic) out.
pub fn boundary_flux(x: &[f64; N_STATES], flows: &StageFlows, species: Species) -> f64 {
    let (ext_aq, ext_org, ad, od) = match species {
        Species::Uranium => (
            &flows.ext_aq_u,
            &flows.ext_org_u,
            Block::UAqSettler,
            Block::UOrgSettler,
        ),
        Species::Acid => (
            &flows.ext_aq_h,
            &flows.ext_org_h,
            Block::HAqSettler,
            Block::HOrgSettler,
        ),
    };
    let inflow: f64 = (0..N_STAGES)
        .map(|n| flows.ext_aq_flow[n] * ext_aq[n] + flows.ext_org_flow[n] * ext_org[n])
        .sum();
    let top = N_STAGES - 1;
    let outflow = flows.aq[0] * x[ad.at(0)] + flows.org[top] * x[od.at(top)];
    inflow - outflow
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn p() -> PlantParams {
        PlantParams::nominal()
    }

    #[test]
    fn state_layout_matches_named_outputs() {
        // 1-based x_41 and x_33.
        assert_eq!(Y_INDEX, 40);
        assert_eq!(Z_INDEX, 32);
        let mut s = PlantState::default();
        s.x[40] = 0.3;
        s.x[32] = 0.01;
        assert_eq!(s.get(Block::UAqSettler, 9), 0.3);
        assert_eq!(s.y(), 0.3);
        assert_eq!(s.z(), 0.01);
        assert_eq!(Block::HOrgSettler.at(15), 127);
    }

    #[test]
    fn flows_above_feed_carry_only_scrub() {
        let p = p();
        let f = wire_flows(&p, p.u_nominal, p.q_nominal).unwrap();
        for n in 8..N_STAGES {
            assert_eq!(f.aq[n], p.scrub_flow);
        }
        for n in 0..8 {
            assert_relative_eq!(f.aq[n], p.scrub_flow + p.u_nominal);
        }
        for n in 0..N_STAGES {
            assert_eq!(f.org[n], p.q_nominal);
            assert_relative_eq!(f.v_mix_aq[n] + f.v_mix_org[n], p.v_mix_total);
            assert_relative_eq!(
                f.aq[n] * f.v_mix_org[n],
                f.org[n] * f.v_mix_aq[n],
                max_relative = 1e-14
            );
        }
    }

    #[test]
    fn mixer_split_two_to_one() {
        let (v, w) = mixer_split(30.0, 100.0, 50.0);
        assert_relative_eq!(v, 20.0);
        assert_relative_eq!(w, 10.0);
    }

    #[test]
    fn flow_network_matches_hand_balance() {
        // Hand balance: aqueous carries A_E above the feed stage, A_E + u at
        // and below it; every stage sees the full solvent flow.
        let mut p = p();
        p.scrub_flow = 2.0;
        p.v_mix_total = 1.0;
        let f = wire_flows(&p, 3.0, 6.0).unwrap();
        let expected_aq = [
            5.0, 5.0, 5.0, 5.0, 5.0, 5.0, 5.0, 5.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0,
        ];
        assert_eq!(f.aq, expected_aq);
        assert_relative_eq!(f.v_mix_aq[0], 5.0 / 11.0);
        assert_relative_eq!(f.v_mix_aq[15], 0.25);
        assert_relative_eq!(f.v_mix_org[15], 0.75);
    }

    #[test]
    fn inlets_at_special_stages() {
        let p = p();
        let u = 2.0;
        let f = wire_flows(&p, u, p.q_nominal).unwrap();
        let mut x = [0.0; N_STATES];
        for (i, v) in x.iter_mut().enumerate() {
            *v = 0.01 * (i as f64 + 1.0);
        }
        let inl = f.inlets(&x);
        let feed = p.feed_stage - 1;
        let a9 = f.aq[feed + 1];
        let expect_u = (u * p.feed_uranium + a9 * x[Block::UAqSettler.at(feed + 1)]) / (u + a9);
        let expect_h = (u * p.feed_acid + a9 * x[Block::HAqSettler.at(feed + 1)]) / (u + a9);
        assert_relative_eq!(inl.aq_u[feed], expect_u, max_relative = 1e-14);
        assert_relative_eq!(inl.aq_h[feed], expect_h, max_relative = 1e-14);
        assert_eq!(inl.aq_u[15], 0.0);
        assert_eq!(inl.aq_h[15], p.scrub_acid);
        assert_eq!(inl.org_u[0], 0.0);
        assert_eq!(inl.org_h[0], 0.0);
        assert_eq!(inl.aq_u[3], x[Block::UAqSettler.at(4)]);
        assert_eq!(inl.org_h[3], x[Block::HOrgSettler.at(2)]);
    }

    #[test]
    fn non_positive_flow_is_domain_error() {
        let p = p();
        assert!(matches!(wire_flows(&p, 0.0, 1.0), Err(Error::Domain(_))));
        assert!(matches!(wire_flows(&p, 1.0, -1.0), Err(Error::Domain(_))));
        assert!(matches!(
            wire_flows(&p, f64::NAN, 1.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn tbp_free_limits() {
        let p = p();
        assert_eq!(tbp_free(0.0, 0.0, &p).unwrap(), p.tbp_total);
        let h = 2.0;
        assert_relative_eq!(
            tbp_free(0.0, h, &p).unwrap(),
            p.tbp_total / (1.0 + p.k_eq_h * h * h),
            max_relative = 1e-14
        );
        assert!(tbp_free(-1.0, 0.0, &p).is_err());
    }

    /// Bisection on the TBP balance f + 2·U_og,i + H_og,i = TBP_total with
    /// the equilibrium expressions substituted.
    fn tbp_free_bisect(u: f64, h: f64, p: &PlantParams) -> f64 {
        let n = 2.0 * u + h;
        let balance =
            |f: f64| f + 2.0 * p.k_eq_u * u * n * n * f * f + p.k_eq_h * h * n * f - p.tbp_total;
        let (mut lo, mut hi) = (0.0, p.tbp_total);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if balance(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn tbp_free_matches_bisection_and_conserves_tbp() {
        let p = p();
        for &(u, h) in &[(0.1, 1.0), (0.8, 3.0), (0.01, 0.2), (1.5, 4.0), (0.3, 0.0)] {
            let f = tbp_free(u, h, &p).unwrap();
            assert_relative_eq!(f, tbp_free_bisect(u, h, &p), max_relative = 1e-12);
            let n = 2.0 * u + h;
            let total = f + 2.0 * p.k_eq_u * u * n * n * f * f + p.k_eq_h * h * n * f;
            assert!((total - p.tbp_total).abs() < 1e-12, "{total}");
            assert!(f > 0.0 && f <= p.tbp_total);
        }
    }

    #[test]
    fn residual_of_empty_stage_is_zero() {
        let g = interface_equilibrium_residual(&StageConc::default(), (0.0, 0.0), &p()).unwrap();
        assert_eq!(g, (0.0, 0.0));
    }

    #[test]
    fn residual_without_extraction_equals_organic_side() {
        let mut p = p();
        p.k_eq_u = 0.0;
        p.k_eq_h = 0.0;
        let c = StageConc {
            u_aq: 0.4,
            u_org: 0.1,
            h_aq: 2.0,
            h_org: 0.3,
        };
        // Guess U* = U_aq makes U_og,i equal to the bulk organic value.
        let g = interface_equilibrium_residual(&c, (0.4, 2.0), &p).unwrap();
        assert_relative_eq!(g.0, 0.1);
        assert_relative_eq!(g.1, 0.3);
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let p = p();
        let c = StageConc {
            u_aq: 0.5,
            u_org: 0.2,
            h_aq: 2.5,
            h_org: 0.1,
        };
        for &(u, h) in &[(0.3, 2.0), (0.05, 0.7), (0.9, 3.1)] {
            let (_, jac) = residual_and_jacobian(&c, u, h, &p);
            let e = 1e-6;
            let gp = residual_and_jacobian(&c, u + e, h, &p).0;
            let gm = residual_and_jacobian(&c, u - e, h, &p).0;
            let hp = residual_and_jacobian(&c, u, h + e, &p).0;
            let hm = residual_and_jacobian(&c, u, h - e, &p).0;
            assert_relative_eq!(jac[0][0], (gp.0 - gm.0) / (2.0 * e), max_relative = 1e-7);
            assert_relative_eq!(jac[1][0], (gp.1 - gm.1) / (2.0 * e), max_relative = 1e-7);
            assert_relative_eq!(jac[0][1], (hp.0 - hm.0) / (2.0 * e), max_relative = 1e-7);
            assert_relative_eq!(jac[1][1], (hp.1 - hm.1) / (2.0 * e), max_relative = 1e-7);
        }
    }

    #[test]
    fn zero_transfer_driving_force_leaves_pure_dilution() {
        let p = p();
        let f = wire_flows(&p, 2.0, p.q_nominal).unwrap();
        let mut x = [0.0; N_STATES];
        for (i, v) in x.iter_mut().enumerate() {
            *v = 0.05 + 0.001 * i as f64;
        }
        let mut alg = [0.0; N_ALG];
        for n in 0..N_STAGES {
            alg[n] = x[Block::UAqMixer.at(n)];
            alg[N_STAGES + n] = x[Block::HAqMixer.at(n)];
        }
        let d = mass_balance_rhs(&x, &alg, &f, &p).unwrap();
        let inl = f.inlets(&x);
        let n = 4;
        let expect = f.aq[n] * (inl.aq_u[n] - x[Block::UAqMixer.at(n)]) / f.v_mix_aq[n];
        assert_relative_eq!(d[Block::UAqMixer.at(n)], expect, max_relative = 1e-14);
    }

    #[test]
    fn inventory_derivative_equals_boundary_flux() {
        let p = p();
        let f = wire_flows(&p, 2.3, 9.0).unwrap();
        let mut x = [0.0; N_STATES];
        let mut alg = [0.0; N_ALG];
        for i in 0..N_STATES {
            x[i] = 0.1 + 0.37 * ((i * 7919) % 101) as f64 / 101.0;
        }
        for i in 0..N_ALG {
            alg[i] = 0.2 + 0.5 * ((i * 104729) % 53) as f64 / 53.0;
        }
        let d = mass_balance_rhs(&x, &alg, &f, &p).unwrap();
        for species in [Species::Uranium, Species::Acid] {
            let di = inventory(&d, &f, &p, species);
            let bf = boundary_flux(&x, &f, species);
            assert_relative_eq!(di, bf, max_relative = 1e-10, epsilon = 1e-10);
        }
    }
}
