//! Model parameters, coefficient functions, scenarios and unit conversion.
//!
//! Values are used exactly as tabulated: lengths in μm, time in s, bulk
//! concentrations in μmol/dm³, surface concentrations in μmol/dm², stiffness
//! in kPa.

use std::fmt;
use std::path::PathBuf;

use crate::mesh::{Mesh, MeshError, Region, BOTTOM_TAG, NUCLEUS_TAG};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error("parameter {name} = {value} is invalid: {reason}")]
    InvalidParam {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("unknown parameter '{0}'")]
    UnknownParam(String),
    #[error("unknown preset '{0}' (known: table1-default, appendix-d10, converted-rho)")]
    UnknownPreset(String),
    #[error("Poisson ratio {0} is too close to 1/2 (incompressible)")]
    Incompressible(f64),
    #[error("scenario is inconsistent: {0}")]
    Scenario(String),
}

/// (#/μm²) per (μmol/dm²).
pub const SURFACE_UNIT_FACTOR: f64 = 5930.0 / (11.0 * 1e-5);

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// μm²/s
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
    /// s⁻¹
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub k4: f64,
    pub k5: f64,
    pub k6: f64,
    /// kPa
    pub k7: f64,
    /// dm³/μmol
    pub k8: f64,
    pub p: f64,
    /// (kPa·s)⁻¹
    pub c1: f64,
    /// kPa
    pub c: f64,
    pub n: f64,
    /// dm³/μmol
    pub gamma: f64,
    /// substrate stiffness, kPa
    pub e: f64,
    pub nu_c: f64,
    pub phi_d0: f64,
    pub phi_a0: f64,
    /// μmol/dm²
    pub rho_a0: f64,
    pub rho_d0: f64,
    /// nucleus rigidity
    pub omega: Option<f64>,
    /// retardation times, s
    pub theta_lambda: Option<f64>,
    pub theta_mu: Option<f64>,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            d1: 4.0,
            d2: 4.0,
            d3: 0.3,
            k1: 0.035,
            k2: 0.015,
            k3: 0.379,
            k4: 0.625,
            k5: 0.0168,
            k6: 0.1,
            k7: 0.2,
            k8: 2.4245,
            p: 2.6,
            c1: 0.1,
            c: 3.25,
            n: 5.0,
            gamma: 8.8068,
            e: 5.7,
            nu_c: 0.3,
            phi_d0: 0.7,
            phi_a0: 0.3,
            rho_a0: 6e-7,
            rho_d0: 1.0,
            omega: None,
            theta_lambda: None,
            theta_mu: None,
        }
    }
}

/// Substrate stiffness values explored in the experiments, kPa.
pub const STIFFNESS_LEVELS: [f64; 3] = [0.1, 5.7, 7e6];

/// Names accepted by [`ModelParams::set`] and [`ModelParams::get`].
pub const PARAM_NAMES: &[&str] = &[
    "D1", "D2", "D3", "k1", "k2", "k3", "k4", "k5", "k6", "k7", "k8", "p", "C1", "C", "n", "gamma", "E",
    "nu_c", "phi_d0", "phi_a0", "rho_a0", "rho_d0", "omega", "theta_lambda", "theta_mu",
];

impl ModelParams {
    pub fn preset(name: &str) -> Result<Self, ModelError> {
        let mut p = Self::default();
        match name {
            "table1-default" => {}
            "appendix-d10" => {
                p.d1 = 10.0;
                p.d2 = 10.0;
            }
            "converted-rho" => {
                p.rho_a0 = convert_surface_units(33.6, SurfaceUnit::MicromolPerDm2);
            }
            other => return Err(ModelError::UnknownPreset(other.to_string())),
        }
        Ok(p)
    }

    fn slot(&mut self, name: &str) -> Option<&mut f64> {
        Some(match name {
            "D1" => &mut self.d1,
            "D2" => &mut self.d2,
            "D3" => &mut self.d3,
            "k1" => &mut self.k1,
            "k2" => &mut self.k2,
            "k3" => &mut self.k3,
            "k4" => &mut self.k4,
            "k5" => &mut self.k5,
            "k6" => &mut self.k6,
            "k7" => &mut self.k7,
            "k8" => &mut self.k8,
            "p" => &mut self.p,
            "C1" => &mut self.c1,
            "C" => &mut self.c,
            "n" => &mut self.n,
            "gamma" => &mut self.gamma,
            "E" => &mut self.e,
            "nu_c" => &mut self.nu_c,
            "phi_d0" => &mut self.phi_d0,
            "phi_a0" => &mut self.phi_a0,
            "rho_a0" => &mut self.rho_a0,
            "rho_d0" => &mut self.rho_d0,
            _ => return None,
        })
    }

    pub fn set(&mut self, name: &str, value: f64) -> Result<(), ModelError> {
        match name {
            "omega" => self.omega = Some(value),
            "theta_lambda" => self.theta_lambda = Some(value),
            "theta_mu" => self.theta_mu = Some(value),
            _ => *self.slot(name).ok_or_else(|| ModelError::UnknownParam(name.to_string()))? = value,
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<Option<f64>, ModelError> {
        match name {
            "omega" => Ok(self.omega),
            "theta_lambda" => Ok(self.theta_lambda),
            "theta_mu" => Ok(self.theta_mu),
            _ => {
                let mut copy = self.clone();
                let v = *copy.slot(name).ok_or_else(|| ModelError::UnknownParam(name.to_string()))?;
                Ok(Some(v))
            }
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for &name in PARAM_NAMES {
            if let Some(v) = self.get(name)? {
                if !v.is_finite() || v < 0.0 {
                    return Err(ModelError::InvalidParam {
                        name,
                        value: v,
                        reason: "must be finite and non-negative",
                    });
                }
            }
        }
        if !(self.nu_c < 0.5) {
            return Err(ModelError::InvalidParam {
                name: "nu_c",
                value: self.nu_c,
                reason: "must lie in [0, 0.5)",
            });
        }
        Ok(())
    }
}

/// k̃₃(E) = k₂ + k₃E/(C+E)
pub fn k_tilde3(e_local: f64, p: &ModelParams) -> f64 {
    if e_local <= 0.0 {
        return p.k2;
    }
    p.k2 + p.k3 * e_local / (p.c + e_local)
}

fn activation(phi_a: f64, p: &ModelParams) -> f64 {
    (p.gamma * phi_a.max(0.0)).powf(p.n) + 1.0
}

/// k̃₄(φₐ) = k₄ + k₅((γφₐ)ⁿ + 1)
pub fn k_tilde4(phi_a: f64, p: &ModelParams) -> f64 {
    p.k4 + p.k5 * activation(phi_a, p)
}

/// k̃₅(φₐ) = k₅((γφₐ)ⁿ + 1)·M_ρ/|Y|
pub fn k_tilde5(phi_a: f64, m_rho_per_volume: f64, p: &ModelParams) -> f64 {
    p.k5 * activation(phi_a, p) * m_rho_per_volume
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EcMode {
    /// fixed Young's modulus, kPa
    Constant(f64),
    /// E_c = k₇(1 + (k₈φₐ)^p)
    Coupled,
}

/// Young's modulus of the cell, kPa.
pub fn youngs_modulus(phi_a: f64, mode: EcMode, p: &ModelParams) -> f64 {
    match mode {
        EcMode::Constant(e) => e,
        EcMode::Coupled => p.k7 * (1.0 + (p.k8 * phi_a.max(0.0)).powf(p.p)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lame {
    pub lambda: f64,
    pub mu: f64,
}

pub fn lame(e_c: f64, nu_c: f64) -> Result<Lame, ModelError> {
    if (0.5 - nu_c).abs() < 1e-6 || nu_c > 0.5 {
        return Err(ModelError::Incompressible(nu_c));
    }
    Ok(Lame {
        lambda: e_c * nu_c / ((1.0 + nu_c) * (1.0 - 2.0 * nu_c)),
        mu: e_c / (2.0 * (1.0 + nu_c)),
    })
}

/// M_ρ = ρ_d⁰|Y| + ρ_a⁰|Γ|
pub fn total_rho_mass(volume: f64, surface_area: f64, p: &ModelParams) -> f64 {
    p.rho_d0 * volume + p.rho_a0 * surface_area
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SurfaceUnit {
    CountPerUm2,
    MicromolPerDm2,
}

/// Converts a surface concentration into `to`, from the other unit.
pub fn convert_surface_units(value: f64, to: SurfaceUnit) -> f64 {
    match to {
        SurfaceUnit::CountPerUm2 => value * SURFACE_UNIT_FACTOR,
        SurfaceUnit::MicromolPerDm2 => value / SURFACE_UNIT_FACTOR,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stimulus {
    /// stiffness and RhoA reactions on the substrate contact only
    TwoD,
    /// stiffness on the contact, RhoA reactions on the whole membrane
    TwoXD,
    /// both on the whole membrane
    ThreeD,
}

impl fmt::Display for Stimulus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stimulus::TwoD => "2D",
            Stimulus::TwoXD => "2xD",
            Stimulus::ThreeD => "3D",
        })
    }
}

impl std::str::FromStr for Stimulus {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, ModelError> {
        match s.to_ascii_lowercase().as_str() {
            "2d" => Ok(Stimulus::TwoD),
            "2xd" => Ok(Stimulus::TwoXD),
            "3d" => Ok(Stimulus::ThreeD),
            _ => Err(ModelError::Scenario(format!("unknown stimulus '{s}' (2D, 2xD, 3D)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BcMode {
    /// cell resting on a rigid substrate: u₃ = 0 on the contact set
    PartiallyFixed,
    /// traction everywhere, rigid motions factored out
    PureTraction,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Material {
    Elastic,
    Viscoelastic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NucleusMode {
    None,
    /// σ(u)ν = −ωu on the nucleus surface, ω from the parameters
    Robin,
}

#[derive(Clone, Debug, PartialEq)]
pub enum MeshSource {
    Dome {
        base_radius: f64,
        height: f64,
        refinement: usize,
    },
    UnitBall {
        level: usize,
    },
    File(PathBuf),
}

impl Default for MeshSource {
    fn default() -> Self {
        MeshSource::Dome {
            base_radius: crate::mesh::DOME_BASE_RADIUS,
            height: crate::mesh::DOME_HEIGHT,
            refinement: crate::mesh::DOME_DEFAULT_REFINEMENT,
        }
    }
}

impl MeshSource {
    /// Generates or loads the mesh. Files without a bottom tag get one from
    /// the facets lying in the lowest z plane.
    pub fn build(&self) -> Result<Mesh, MeshError> {
        match self {
            MeshSource::Dome {
                base_radius,
                height,
                refinement,
            } => crate::mesh::generate_cell_dome(*base_radius, *height, *refinement),
            MeshSource::UnitBall { level } => Ok(crate::mesh::generate_unit_ball(*level)),
            MeshSource::File(path) => {
                let mut mesh = crate::mesh::load_msh(path)?;
                if mesh.region_tag(BOTTOM_TAG).is_err() {
                    let tol = mesh.default_bottom_tol();
                    mesh.tag_bottom(tol);
                }
                Ok(mesh)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub stimulus: Stimulus,
    pub bc_mode: BcMode,
    pub ec_mode: EcMode,
    pub material: Material,
    pub nucleus: NucleusMode,
    pub mechanics_enabled: bool,
    pub mesh: MeshSource,
    /// final time, s
    pub t_end: f64,
    /// time step, s
    pub dt: f64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            stimulus: Stimulus::ThreeD,
            bc_mode: BcMode::PureTraction,
            ec_mode: EcMode::Coupled,
            material: Material::Elastic,
            nucleus: NucleusMode::None,
            mechanics_enabled: true,
            mesh: MeshSource::default(),
            t_end: 100.0,
            dt: 0.5,
        }
    }
}

impl Scenario {
    /// Mechanics-free reduced model.
    pub fn reduced(stimulus: Stimulus) -> Self {
        Self {
            stimulus,
            mechanics_enabled: false,
            ..Self::default()
        }
    }

    pub fn n_steps(&self) -> usize {
        if self.t_end <= 0.0 {
            0
        } else {
            // tolerate T/Δt landing a rounding error above an integer
            (self.t_end / self.dt - 1e-9).ceil() as usize
        }
    }

    pub fn validate(&self, params: &ModelParams, mesh: Option<&Mesh>) -> Result<(), ModelError> {
        params.validate()?;
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(ModelError::Scenario(format!("time step must be positive, got {}", self.dt)));
        }
        if !(self.t_end >= 0.0) || !self.t_end.is_finite() {
            return Err(ModelError::Scenario(format!("final time must be non-negative, got {}", self.t_end)));
        }
        if let EcMode::Constant(e) = self.ec_mode {
            if !(e >= 0.0) {
                return Err(ModelError::Scenario(format!("constant E_c must be non-negative, got {e}")));
            }
        }
        if self.mechanics_enabled && self.material == Material::Viscoelastic {
            if params.theta_lambda.is_none() || params.theta_mu.is_none() {
                return Err(ModelError::Scenario(
                    "viscoelastic material requires theta_lambda and theta_mu".into(),
                ));
            }
        }
        if self.mechanics_enabled && self.nucleus == NucleusMode::Robin && params.omega.is_none() {
            return Err(ModelError::Scenario("nucleus Robin condition requires omega".into()));
        }
        if let Some(mesh) = mesh {
            let needs_bottom = matches!(self.stimulus, Stimulus::TwoD | Stimulus::TwoXD)
                || (self.mechanics_enabled && self.bc_mode == BcMode::PartiallyFixed);
            let has_bottom = mesh.region_tag(BOTTOM_TAG).is_ok_and(|t| !t.tris.is_empty());
            if needs_bottom && !has_bottom {
                return Err(ModelError::Scenario(format!(
                    "stimulus {} / boundary mode {:?} needs a nonempty '{BOTTOM_TAG}' region",
                    self.stimulus, self.bc_mode
                )));
            }
            if self.mechanics_enabled
                && self.nucleus == NucleusMode::Robin
                && !mesh.region_tag(NUCLEUS_TAG).is_ok_and(|t| !t.tris.is_empty())
            {
                return Err(ModelError::Scenario(format!("nucleus mode needs a '{NUCLEUS_TAG}' region")));
            }
        }
        Ok(())
    }
}

/// Per boundary triangle: whether the substrate stiffness acts there and
/// whether RhoA reactions act there. Both are false off the membrane.
#[derive(Clone, Debug, PartialEq)]
pub struct StimulusMaps {
    pub stiffness: Vec<bool>,
    pub reactions: Vec<bool>,
}

impl StimulusMaps {
    pub fn stiffness_area(&self, mesh: &Mesh) -> f64 {
        area_of(mesh, &self.stiffness)
    }

    pub fn reaction_area(&self, mesh: &Mesh) -> f64 {
        area_of(mesh, &self.reactions)
    }

    /// Substrate stiffness seen by each boundary triangle (0 off the map).
    pub fn local_stiffness(&self, e: f64) -> Vec<f64> {
        self.stiffness.iter().map(|&on| if on { e } else { 0.0 }).collect()
    }
}

fn area_of(mesh: &Mesh, mask: &[bool]) -> f64 {
    mesh.boundary()
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(t, _)| t.area)
        .sum()
}

pub fn stimulus_region(stimulus: Stimulus, mesh: &Mesh) -> Result<StimulusMaps, ModelError> {
    let nb = mesh.boundary().len();
    let mask = |region: Region<'_>| -> Result<Vec<bool>, ModelError> {
        let mut m = vec![false; nb];
        let tris = mesh
            .region_tris(region)
            .map_err(|e| ModelError::Scenario(e.to_string()))?;
        for t in tris {
            m[t] = true;
        }
        Ok(m)
    };
    let membrane = mask(Region::Membrane)?;
    let bottom = || -> Result<Vec<bool>, ModelError> {
        match mesh.region_tag(BOTTOM_TAG) {
            Ok(tag) if !tag.tris.is_empty() => mask(Region::Tag(BOTTOM_TAG)),
            _ => Err(ModelError::Scenario(format!(
                "stimulus needs a nonempty '{BOTTOM_TAG}' region"
            ))),
        }
    };
    Ok(match stimulus {
        Stimulus::TwoD => {
            let b = bottom()?;
            StimulusMaps {
                stiffness: b.clone(),
                reactions: b,
            }
        }
        Stimulus::TwoXD => StimulusMaps {
            stiffness: bottom()?,
            reactions: membrane,
        },
        Stimulus::ThreeD => StimulusMaps {
            stiffness: membrane.clone(),
            reactions: membrane,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{generate_cell_dome, generate_unit_ball};
    use approx::assert_relative_eq;

    #[test]
    fn k_tilde3_values() {
        let p = ModelParams::default();
        assert_eq!(k_tilde3(0.0, &p), 0.015);
        assert_relative_eq!(k_tilde3(5.7, &p), 0.015 + 0.379 * 5.7 / 8.95, epsilon = 1e-15);
        assert_relative_eq!(k_tilde3(5.7, &p), 0.256374, epsilon = 1e-6);
        let sat = k_tilde3(7e6, &p);
        assert!(sat < 0.394 && sat > 0.393999);
    }

    #[test]
    fn k_tilde4_and_5_values() {
        let p = ModelParams::default();
        assert_relative_eq!(k_tilde4(0.0, &p), 0.6418, epsilon = 1e-15);
        let expected = 0.625 + 0.0168 * (2.64204f64.powi(5) + 1.0);
        assert_relative_eq!(k_tilde4(0.3, &p), expected, max_relative = 1e-9);
        assert!((k_tilde4(0.3, &p) - 2.805).abs() < 1e-3);
        assert_relative_eq!(k_tilde5(0.0, 1.0, &p), 0.0168, epsilon = 1e-15);
    }

    #[test]
    fn youngs_modulus_values() {
        let p = ModelParams::default();
        assert_eq!(youngs_modulus(0.0, EcMode::Coupled, &p), 0.2);
        let v = youngs_modulus(0.3, EcMode::Coupled, &p);
        assert_relative_eq!(v, 0.2 * (1.0 + 0.72735f64.powf(2.6)), max_relative = 1e-12);
        assert!((v - 0.2874).abs() < 1e-4);
        assert_eq!(youngs_modulus(0.9, EcMode::Constant(0.6), &p), 0.6);
    }

    #[test]
    fn lame_values() {
        let l = lame(0.6, 0.3).unwrap();
        assert_relative_eq!(l.lambda, 0.18 / (1.3 * 0.4), epsilon = 1e-15);
        assert!((l.lambda - 0.346154).abs() < 1e-6);
        assert!((l.mu - 0.230769).abs() < 1e-6);
        assert_eq!(lame(0.0, 0.3).unwrap(), Lame { lambda: 0.0, mu: 0.0 });
        let l0 = lame(2.0, 0.0).unwrap();
        assert_eq!((l0.lambda, l0.mu), (0.0, 1.0));
        assert!(matches!(lame(1.0, 0.4999999), Err(ModelError::Incompressible(_))));
    }

    #[test]
    fn rho_mass() {
        let p = ModelParams::default();
        assert_relative_eq!(total_rho_mass(1193.0, 1020.0, &p), 1193.000612, epsilon = 1e-9);
        let mut z = p.clone();
        z.rho_a0 = 0.0;
        z.rho_d0 = 0.0;
        assert_eq!(total_rho_mass(1193.0, 1020.0, &z), 0.0);
        let ball = generate_unit_ball(2);
        let mut q = p.clone();
        q.rho_a0 = 0.0;
        let g = ball.geometry();
        let m = total_rho_mass(g.volume, g.surface_area, &q);
        assert!((m / (4.0 * std::f64::consts::PI / 3.0) - 1.0).abs() < 0.03);
    }

    #[test]
    fn unit_conversion() {
        let c = convert_surface_units(1e-5, SurfaceUnit::CountPerUm2);
        assert_relative_eq!(c, 539.090909090909, max_relative = 1e-13);
        let back = convert_surface_units(33.6, SurfaceUnit::MicromolPerDm2);
        assert!((back - 6.233e-7).abs() < 1e-10);
        assert_eq!(convert_surface_units(0.0, SurfaceUnit::CountPerUm2), 0.0);
    }

    #[test]
    fn defaults_and_presets() {
        let p = ModelParams::default();
        p.validate().unwrap();
        assert_eq!((p.phi_d0, p.phi_a0, p.rho_a0, p.rho_d0), (0.7, 0.3, 6e-7, 1.0));
        let d10 = ModelParams::preset("appendix-d10").unwrap();
        assert_eq!((d10.d1, d10.d2, d10.d3), (10.0, 10.0, 0.3));
        assert!(matches!(ModelParams::preset("nope"), Err(ModelError::UnknownPreset(_))));
    }

    #[test]
    fn set_get_and_validate() {
        let mut p = ModelParams::default();
        for &name in PARAM_NAMES {
            p.set(name, 0.25).unwrap();
            assert_eq!(p.get(name).unwrap(), Some(0.25));
        }
        assert!(matches!(p.set("k9", 1.0), Err(ModelError::UnknownParam(_))));
        p.set("nu_c", 0.5).unwrap();
        assert!(p.validate().is_err());
        p.set("nu_c", 0.3).unwrap();
        p.set("k1", -1.0).unwrap();
        assert!(p.validate().is_err());
    }

    #[test]
    fn stimulus_maps() {
        let ball = generate_unit_ball(1);
        let m = stimulus_region(Stimulus::ThreeD, &ball).unwrap();
        assert_eq!(m.stiffness, m.reactions);
        assert!(m.stiffness.iter().all(|&b| b));
        assert!(stimulus_region(Stimulus::TwoXD, &ball).is_err());

        let dome = generate_cell_dome(5.0, 2.0, 0).unwrap();
        let g = dome.geometry();
        let xd = stimulus_region(Stimulus::TwoXD, &dome).unwrap();
        assert_relative_eq!(xd.stiffness_area(&dome), g.bottom_area, max_relative = 1e-12);
        assert_relative_eq!(xd.reaction_area(&dome), g.surface_area, max_relative = 1e-12);
        let d2 = stimulus_region(Stimulus::TwoD, &dome).unwrap();
        assert_relative_eq!(d2.reaction_area(&dome), g.bottom_area, max_relative = 1e-12);
        assert_relative_eq!(d2.stiffness_area(&dome), g.bottom_area, max_relative = 1e-12);
    }

    #[test]
    fn scenario_validation() {
        let p = ModelParams::default();
        let ball = generate_unit_ball(0);
        let mut s = Scenario::default();
        s.validate(&p, Some(&ball)).unwrap();
        s.stimulus = Stimulus::TwoD;
        assert!(s.validate(&p, Some(&ball)).is_err());
        s.stimulus = Stimulus::ThreeD;
        s.material = Material::Viscoelastic;
        assert!(s.validate(&p, None).is_err());
        s.material = Material::Elastic;
        s.dt = 0.0;
        assert!(s.validate(&p, None).is_err());
        s.dt = 0.5;
        assert_eq!(s.n_steps(), 200);
        s.t_end = 0.0;
        assert_eq!(s.n_steps(), 0);
    }
}
