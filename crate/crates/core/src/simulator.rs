//! Coupled IMEX time loop for FAK/RhoA signalling and cell mechanics.
//!
//! Each step solves, in order: mechanics with the previous concentrations,
//! inactive FAK (stress activation and membrane flux implicit), active FAK
//! (deactivation implicit, activation sources from the new inactive FAK), and
//! membrane RhoA (nonlinear coefficients frozen at the new active FAK).

use log::{debug, warn};

use crate::elasticity::{self, Displacement, ElasticSolver, ElasticityError};
use crate::fem::{self, NodalField, SparseMatrix, SurfaceField, Unit};
use crate::linsolve::{self, SolveError, DEFAULT_TOL};
use crate::mesh::{Mesh, MeshError, Region, BOTTOM_TAG};
use crate::model::{
    self, k_tilde3, k_tilde4, k_tilde5, lame, youngs_modulus, Lame, Material, ModelError, ModelParams, Scenario,
    Stimulus,
};

/// Window and relative threshold of the steady-state test.
pub const STEADY_WINDOW: f64 = 10.0;
pub const STEADY_RTOL: f64 = 1e-3;
/// Concentrations below this trigger a warning (they are never clipped).
pub const NEGATIVE_WARN: f64 = -1e-8;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("mechanics: {0}")]
    Elasticity(#[from] ElasticityError),
    #[error("{stage} solve failed at t = {t}: {source}")]
    Solve {
        stage: &'static str,
        t: f64,
        source: SolveError,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Stat {
    fn weighted(values: &[f64], weights: &[f64]) -> Self {
        let total: f64 = weights.iter().sum();
        let mean = values.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() / total;
        Self {
            mean,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Observables {
    pub t: f64,
    /// Young's modulus of the cell, kPa
    pub ec: Stat,
    pub divu: Stat,
    pub phia: Stat,
    pub rhoa: Stat,
    /// ∫(φ_d + φ_a)
    pub fak_mass: f64,
    /// ∫φ_a
    pub phia_mass: f64,
    pub max_u: f64,
    /// smallest nodal value over φ_d, φ_a and ρ_a
    pub min_concentration: f64,
    pub steady: bool,
}

#[derive(Clone, Debug)]
pub struct SimState {
    pub t: f64,
    pub step: usize,
    pub phi_d: NodalField,
    pub phi_a: NodalField,
    pub rho_a: SurfaceField,
    pub u: Displacement,
    pub tr_plus: Vec<f64>,
    pub div_u: Vec<f64>,
    pub history: Vec<Observables>,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub observables: Vec<Observables>,
    pub final_state: SimState,
    pub dt: f64,
    /// smallest concentration seen during the run
    pub min_concentration: f64,
}

impl Trajectory {
    pub fn last(&self) -> &Observables {
        self.observables.last().expect("trajectory always holds the initial observables")
    }

    pub fn steady(&self) -> bool {
        self.last().steady
    }
}

/// Change in total FAK over the run, and the amount predicted by the
/// explicit/implicit split of the k₁ exchange.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FakLedger {
    pub defect: f64,
    pub predicted_defect: f64,
    pub initial_mass: f64,
}

pub fn fak_mass_ledger(traj: &Trajectory, k1: f64) -> FakLedger {
    let first = &traj.observables[0];
    let last = traj.last();
    FakLedger {
        defect: last.fak_mass - first.fak_mass,
        predicted_defect: traj.dt * k1 * (first.phia_mass - last.phia_mass),
        initial_mass: first.fak_mass,
    }
}

/// Whether all four means changed by at most `rtol` (relative) between two
/// observations.
pub fn means_steady(now: &Observables, then: &Observables, rtol: f64) -> bool {
    [
        (now.ec.mean, then.ec.mean),
        (now.divu.mean, then.divu.mean),
        (now.phia.mean, then.phia.mean),
        (now.rhoa.mean, then.rhoa.mean),
    ]
    .iter()
    .all(|&(a, b)| (a - b).abs() <= rtol * a.abs().max(b.abs()))
}

pub struct Simulator<'m> {
    mesh: &'m Mesh,
    scenario: Scenario,
    params: ModelParams,
    tol: f64,
    mass: SparseMatrix,
    stiff: SparseMatrix,
    robin: SparseMatrix,
    active_lhs: SparseMatrix,
    surf_mass: SparseMatrix,
    surf_stiff: SparseMatrix,
    reaction_region: Region<'static>,
    reaction_mass: SparseMatrix,
    bulk_weights: Vec<f64>,
    surf_weights: Vec<f64>,
    n_r: f64,
    m_rho_per_volume: f64,
    elastic: Option<ElasticSolver<'m>>,
}

impl<'m> Simulator<'m> {
    pub fn new(mesh: &'m Mesh, scenario: Scenario, params: ModelParams) -> Result<Self, SimError> {
        Self::with_tolerance(mesh, scenario, params, DEFAULT_TOL)
    }

    pub fn with_tolerance(mesh: &'m Mesh, scenario: Scenario, params: ModelParams, tol: f64) -> Result<Self, SimError> {
        scenario.validate(&params, Some(mesh))?;
        let geom = mesh.geometry();
        let n_r = geom.n_r;
        let maps = model::stimulus_region(scenario.stimulus, mesh)?;
        let robin_coeff: Vec<f64> = maps
            .local_stiffness(params.e)
            .iter()
            .map(|&e| n_r * k_tilde3(e, &params))
            .collect();
        let robin = fem::surface_mass_bulk(mesh, Region::Membrane, Some(&robin_coeff))?;
        let mass = fem::bulk_mass(mesh);
        let stiff = fem::bulk_stiffness(mesh, &vec![1.0; mesh.n_tets()]);
        let dt = scenario.dt;
        let mut active_lhs =
            SparseMatrix::linear_combination(&[(1.0 / dt, &mass), (params.d2, &stiff), (params.k1, &mass)]);
        active_lhs.set_spd(true);
        let surf_mass = fem::surface_mass(mesh, Region::Membrane, None)?;
        let surf_stiff = fem::surface_stiffness(mesh);
        let reaction_region = match scenario.stimulus {
            Stimulus::TwoD => Region::Tag(BOTTOM_TAG),
            Stimulus::TwoXD | Stimulus::ThreeD => Region::Membrane,
        };
        let reaction_mass = fem::surface_mass(mesh, reaction_region, None)?;
        let bulk_weights = fem::bulk_lumped_mass(mesh);
        let surf_weights: Vec<f64> = (0..mesh.n_surface_vertices())
            .map(|i| surf_mass.row(i).1.iter().sum())
            .collect();
        let m_rho_per_volume = model::total_rho_mass(geom.volume, geom.surface_area, &params) / geom.volume;
        let elastic = if scenario.mechanics_enabled {
            let omega = match scenario.nucleus {
                model::NucleusMode::None => None,
                model::NucleusMode::Robin => params.omega,
            };
            Some(ElasticSolver::new(mesh, scenario.bc_mode, omega, tol)?)
        } else {
            None
        };
        Ok(Self {
            mesh,
            scenario,
            params,
            tol,
            mass,
            stiff,
            robin,
            active_lhs,
            surf_mass,
            surf_stiff,
            reaction_region,
            reaction_mass,
            bulk_weights,
            surf_weights,
            n_r,
            m_rho_per_volume,
            elastic,
        })
    }

    pub fn mesh(&self) -> &'m Mesh {
        self.mesh
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn n_r(&self) -> f64 {
        self.n_r
    }

    pub fn m_rho_per_volume(&self) -> f64 {
        self.m_rho_per_volume
    }

    /// Element Lamé constants from the element mean of φₐ.
    pub fn element_lame(&self, phi_a: &[f64]) -> Result<Vec<Lame>, SimError> {
        fem::element_means(self.mesh, phi_a)
            .into_iter()
            .map(|p| Ok(lame(youngs_modulus(p, self.scenario.ec_mode, &self.params), self.params.nu_c)?))
            .collect()
    }

    fn viscoelastic(&self) -> bool {
        self.scenario.material == Material::Viscoelastic
    }

    /// Uniform initial fields; for elastic runs U is the equilibrium for them.
    pub fn initial_state(&mut self) -> Result<SimState, SimError> {
        let p = &self.params;
        let phi_d = NodalField::uniform(self.mesh, p.phi_d0, Unit::MicromolarBulk);
        let phi_a = NodalField::uniform(self.mesh, p.phi_a0, Unit::MicromolarBulk);
        let rho_a = SurfaceField::uniform(self.mesh, p.rho_a0, Unit::MicromolarSurface);
        let lame = self.element_lame(&phi_a.values)?;
        let mut state = SimState {
            t: 0.0,
            step: 0,
            phi_d,
            phi_a,
            rho_a,
            u: Displacement::zero(self.mesh, lame.clone()),
            tr_plus: vec![0.0; self.mesh.n_tets()],
            div_u: vec![0.0; self.mesh.n_tets()],
            history: Vec::new(),
        };
        if self.elastic.is_some() && !self.viscoelastic() {
            let k6 = self.params.k6;
            let solver = self.elastic.as_mut().unwrap();
            let u = solver.solve(&lame, &state.rho_a.values, k6, None)?;
            let s = elasticity::stress_summary(self.mesh, &u.u.values, &lame);
            state.tr_plus = s.tr_sigma_plus;
            state.div_u = s.div_u;
            state.u = u;
        }
        let obs = self.observe(&state);
        state.history.push(obs);
        Ok(state)
    }

    fn solve(&self, stage: &'static str, t: f64, a: &SparseMatrix, b: &[f64], x0: &[f64]) -> Result<Vec<f64>, SimError> {
        linsolve::solve_spd(a, b, Some(x0), self.tol)
            .map(|(x, rep)| {
                debug!("{stage}: {} iterations, residual {:.2e}", rep.iterations, rep.residual);
                x
            })
            .map_err(|source| SimError::Solve { stage, t, source })
    }

    /// Advances the state by one time step and records its observables.
    pub fn step(&mut self, state: &mut SimState) -> Result<(), SimError> {
        let dt = self.scenario.dt;
        let t_new = state.t + dt;
        let p = self.params.clone();

        // (1) mechanics with Φₐⁿ⁻¹, Pₐⁿ⁻¹
        if self.elastic.is_some() {
            let lame = self.element_lame(&state.phi_a.values)?;
            let solver = self.elastic.as_mut().unwrap();
            if self.scenario.material == Material::Viscoelastic {
                let (tl, tm) = (p.theta_lambda.unwrap_or(0.0), p.theta_mu.unwrap_or(0.0));
                let u = solver.step_viscoelastic(&lame, &state.rho_a.values, p.k6, &state.u.u.values, dt, tl, tm)?;
                let s = elasticity::viscous_stress_summary(self.mesh, &u.u.values, &state.u.u.values, dt, &lame, tl, tm);
                state.tr_plus = s.tr_sigma_plus;
                state.div_u = s.div_u;
                state.u = u;
            } else {
                let u = solver.solve(&lame, &state.rho_a.values, p.k6, Some(&state.u.u.values))?;
                let s = elasticity::stress_summary(self.mesh, &u.u.values, &lame);
                state.tr_plus = s.tr_sigma_plus;
                state.div_u = s.div_u;
                state.u = u;
            }
        }

        // (2) inactive FAK
        let stress_mass = fem::bulk_weighted_mass(self.mesh, Some(&state.tr_plus));
        let mut lhs_d = SparseMatrix::linear_combination(&[
            (1.0 / dt, &self.mass),
            (p.d1, &self.stiff),
            (p.c1, &stress_mass),
            (1.0, &self.robin),
        ]);
        lhs_d.set_spd(true);
        let m_phid = self.mass.mul_vec(&state.phi_d.values);
        let m_phia = self.mass.mul_vec(&state.phi_a.values);
        let rhs_d: Vec<f64> = m_phid.iter().zip(&m_phia).map(|(d, a)| d / dt + p.k1 * a).collect();
        let phi_d = self.solve("inactive FAK", t_new, &lhs_d, &rhs_d, &state.phi_d.values)?;

        // (3) active FAK
        let stress_src = stress_mass.mul_vec(&phi_d);
        let robin_src = self.robin.mul_vec(&phi_d);
        let rhs_a: Vec<f64> = m_phia
            .iter()
            .zip(&stress_src)
            .zip(&robin_src)
            .map(|((a, s), r)| a / dt + p.c1 * s + r)
            .collect();
        let phi_a = self.solve("active FAK", t_new, &self.active_lhs, &rhs_a, &state.phi_a.values)?;

        // (4) membrane RhoA with coefficients at Φₐⁿ
        let phi_a_surf = fem::restrict_to_surface(self.mesh, &phi_a);
        let k4: Vec<f64> = phi_a_surf.iter().map(|&v| k_tilde4(v, &p)).collect();
        let k5: Vec<f64> = phi_a_surf
            .iter()
            .map(|&v| self.n_r * k_tilde5(v, self.m_rho_per_volume, &p))
            .collect();
        let decay = fem::surface_mass_p1_weighted(self.mesh, self.reaction_region, &k4)?;
        let mut lhs_r = SparseMatrix::linear_combination(&[
            (1.0 / dt, &self.surf_mass),
            (p.d3, &self.surf_stiff),
            (1.0, &decay),
        ]);
        lhs_r.set_spd(true);
        let m_rho = self.surf_mass.mul_vec(&state.rho_a.values);
        let src = self.reaction_mass.mul_vec(&k5);
        let rhs_r: Vec<f64> = m_rho.iter().zip(&src).map(|(m, s)| m / dt + s).collect();
        let rho_a = self.solve("RhoA", t_new, &lhs_r, &rhs_r, &state.rho_a.values)?;

        state.phi_d.values = phi_d;
        state.phi_a.values = phi_a;
        state.rho_a.values = rho_a;
        state.t = t_new;
        state.step += 1;
        let mut obs = self.observe(state);
        let lag = (STEADY_WINDOW / dt).round() as usize;
        if lag > 0 && state.history.len() >= lag {
            let then = &state.history[state.history.len() - lag];
            obs.steady = means_steady(&obs, then, STEADY_RTOL);
        }
        if obs.min_concentration < NEGATIVE_WARN {
            warn!(
                "negative concentration {:.3e} at t = {:.3} (values are not clipped)",
                obs.min_concentration, obs.t
            );
        }
        state.history.push(obs);
        Ok(())
    }

    pub fn observe(&self, state: &SimState) -> Observables {
        let ec_nodal: Vec<f64> = state
            .phi_a
            .values
            .iter()
            .map(|&v| youngs_modulus(v, self.scenario.ec_mode, &self.params))
            .collect();
        let vols: Vec<f64> = self.mesh.tet_geometry().iter().map(|g| g.volume).collect();
        let phia_mass: f64 = state.phi_a.values.iter().zip(&self.bulk_weights).map(|(v, w)| v * w).sum();
        let phid_mass: f64 = state.phi_d.values.iter().zip(&self.bulk_weights).map(|(v, w)| v * w).sum();
        let min_concentration = state
            .phi_d
            .values
            .iter()
            .chain(&state.phi_a.values)
            .chain(&state.rho_a.values)
            .copied()
            .fold(f64::INFINITY, f64::min);
        Observables {
            t: state.t,
            ec: Stat::weighted(&ec_nodal, &self.bulk_weights),
            divu: Stat::weighted(&state.div_u, &vols),
            phia: Stat::weighted(&state.phi_a.values, &self.bulk_weights),
            rhoa: Stat::weighted(&state.rho_a.values, &self.surf_weights),
            fak_mass: phid_mass + phia_mass,
            phia_mass,
            max_u: state.u.max_norm(),
            min_concentration,
            steady: false,
        }
    }

    /// Runs ⌈T/Δt⌉ steps from the initial state.
    pub fn run(&mut self) -> Result<Trajectory, SimError> {
        self.run_with(|_| {})
    }

    /// Like [`run`](Self::run), calling `on_step` after the initial state and
    /// after every step.
    pub fn run_with(&mut self, mut on_step: impl FnMut(&SimState)) -> Result<Trajectory, SimError> {
        let mut state = self.initial_state()?;
        on_step(&state);
        for _ in 0..self.scenario.n_steps() {
            self.step(&mut state)?;
            on_step(&state);
        }
        let observables = std::mem::take(&mut state.history);
        let min_concentration = observables
            .iter()
            .map(|o| o.min_concentration)
            .fold(f64::INFINITY, f64::min);
        Ok(Trajectory {
            observables,
            final_state: state,
            dt: self.scenario.dt,
            min_concentration,
        })
    }
}

/// Convenience: build a simulator for the scenario and run it.
pub fn run(scenario: &Scenario, params: &ModelParams, mesh: &Mesh) -> Result<Trajectory, SimError> {
    Simulator::new(mesh, scenario.clone(), params.clone())?.run()
}
