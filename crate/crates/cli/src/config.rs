//! INI run configuration.
//!
//! ```ini
//! [mesh]
//! source = dome            ; dome | ball | file
//! base_radius = 12.1723    ; dome only
//! height = 3.8445
//! refinement = 2
//! level = 3                ; ball only
//! path = cell.msh          ; file only
//!
//! [scenario]
//! stimulus = 3D            ; 2D | 2xD | 3D
//! bc_mode = pure-traction  ; pure-traction | partially-fixed
//! ec_mode = coupled        ; coupled | constant | constant:<kPa>
//! ec_constant = 0.6        ; value used by a bare `constant`
//! material = elastic       ; elastic | viscoelastic
//! nucleus = none           ; none | robin
//! mechanics = true
//! t_end = 100
//! dt = 0.5
//! tol = 1e-10
//!
//! [params]
//! preset = table1-default
//! C1 = 0.1                 ; any model parameter name
//!
//! [sweep]
//! E = 0.1, 5.7, 7e6
//! C1 = 0, 0.1, 0.5, 2
//! ec_mode = coupled, constant
//! stimulus = 3D
//! shape = dome             ; dome | ball | ball:<level> | path to .msh
//! parameters = C1, k6, k7, k8, p, nu_c
//! deltas = -0.2, -0.1, 0.1, 0.2
//! levels = 0, 1, 2, 3
//! dt_factor = 0.25
//! benchmark_t_end = 1
//!
//! [output]
//! dir = out
//! cadence = 20             ; steps between snapshots, 0 = first and last only
//! vtk = true
//! ```
//!
//! `;` and `#` start comments (inline ones after whitespace). Every key is optional;
//! unknown sections and keys are errors.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use cellmech::linsolve::DEFAULT_TOL;
use cellmech::mesh::{DOME_BASE_RADIUS, DOME_DEFAULT_REFINEMENT, DOME_HEIGHT};
use cellmech::model::{
    BcMode, EcMode, Material, MeshSource, ModelParams, NucleusMode, Scenario, Stimulus, STIFFNESS_LEVELS,
};
use cellmech::verification::DtPolicy;
use ini::{Ini, ParseOption};

/// Constant E_c used when `constant` is given without a value, kPa.
pub const DEFAULT_EC_CONSTANT: f64 = 0.6;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("unknown section [{0}]")]
    UnknownSection(String),
    #[error("unknown key '{key}' in [{section}]")]
    UnknownKey { section: String, key: String },
    #[error("key '{key}' in [{section}] given more than once")]
    DuplicateKey { section: String, key: String },
    #[error("invalid value '{value}' for '{key}' in [{section}]: {reason}")]
    Value {
        section: String,
        key: String,
        value: String,
        reason: String,
    },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub cadence: usize,
    pub vtk: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            cadence: 20,
            vtk: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub e: Vec<f64>,
    pub c1: Vec<f64>,
    pub ec_modes: Vec<EcMode>,
    /// empty means the scenario's stimulus
    pub stimuli: Vec<Stimulus>,
    /// empty means the configured mesh
    pub shapes: Vec<MeshSource>,
    pub parameters: Vec<String>,
    pub deltas: Vec<f64>,
    pub levels: Vec<usize>,
    pub dt_policy: DtPolicy,
    pub benchmark_t_end: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            e: STIFFNESS_LEVELS.to_vec(),
            c1: vec![0.0, 0.1, 0.5, 2.0],
            ec_modes: vec![EcMode::Coupled, EcMode::Constant(DEFAULT_EC_CONSTANT)],
            stimuli: Vec::new(),
            shapes: Vec::new(),
            parameters: ["C1", "k6", "k7", "k8", "p", "nu_c"].map(String::from).to_vec(),
            deltas: vec![-0.2, -0.1, 0.1, 0.2],
            levels: vec![0, 1, 2, 3],
            dt_policy: DtPolicy::default(),
            benchmark_t_end: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub params: ModelParams,
    pub tol: f64,
    pub output: OutputConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::default(),
            params: ModelParams::default(),
            tol: DEFAULT_TOL,
            output: OutputConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

const SECTIONS: [&str; 5] = ["mesh", "scenario", "params", "sweep", "output"];
const MESH_KEYS: [&str; 6] = ["source", "base_radius", "height", "refinement", "level", "path"];
const SCENARIO_KEYS: [&str; 10] = [
    "stimulus",
    "bc_mode",
    "ec_mode",
    "ec_constant",
    "material",
    "nucleus",
    "mechanics",
    "t_end",
    "dt",
    "tol",
];
const SWEEP_KEYS: [&str; 10] = [
    "E",
    "C1",
    "ec_mode",
    "stimulus",
    "shape",
    "parameters",
    "deltas",
    "levels",
    "dt_factor",
    "benchmark_t_end",
];
const OUTPUT_KEYS: [&str; 3] = ["dir", "cadence", "vtk"];

/// Key lookup for one section that tracks which keys were consumed.
struct Section<'a> {
    name: &'a str,
    entries: Vec<(&'a str, &'a str)>,
}

impl<'a> Section<'a> {
    fn get(&self, key: &str) -> Option<&'a str> {
        self.entries.iter().find(|(k, _)| *k == key).map(|(_, v)| *v)
    }

    fn err(&self, key: &str, value: &str, reason: impl Into<String>) -> ConfigError {
        ConfigError::Value {
            section: self.name.to_string(),
            key: key.to_string(),
            value: value.to_string(),
            reason: reason.into(),
        }
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| v.parse::<T>().map_err(|e| self.err(key, v, e.to_string())))
            .transpose()
    }

    fn list<T>(&self, key: &str, item: impl Fn(&str) -> Result<T, String>) -> Result<Option<Vec<T>>, ConfigError> {
        let Some(v) = self.get(key) else { return Ok(None) };
        let items: Vec<T> = v
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| item(s).map_err(|r| self.err(key, v, r)))
            .collect::<Result<_, _>>()?;
        if items.is_empty() {
            return Err(self.err(key, v, "list must not be empty"));
        }
        Ok(Some(items))
    }
}

fn parse_f64(s: &str) -> Result<f64, String> {
    s.parse::<f64>().map_err(|e| e.to_string())
}

pub fn parse_ec_mode(s: &str, constant: f64) -> Result<EcMode, String> {
    let lower = s.to_ascii_lowercase();
    match lower.split_once(':') {
        None if lower == "coupled" => Ok(EcMode::Coupled),
        None if lower == "constant" => Ok(EcMode::Constant(constant)),
        Some(("constant", v)) => Ok(EcMode::Constant(parse_f64(v.trim())?)),
        _ => Err("expected coupled, constant or constant:<kPa>".into()),
    }
}

pub fn ec_mode_label(mode: EcMode) -> String {
    match mode {
        EcMode::Coupled => "coupled".into(),
        EcMode::Constant(v) => format!("constant:{v}"),
    }
}

fn parse_bc(s: &str) -> Result<BcMode, String> {
    match s.to_ascii_lowercase().as_str() {
        "pure-traction" | "pure_traction" => Ok(BcMode::PureTraction),
        "partially-fixed" | "partially_fixed" => Ok(BcMode::PartiallyFixed),
        _ => Err("expected pure-traction or partially-fixed".into()),
    }
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err("expected true or false".into()),
    }
}

/// `dome`, `ball`, `ball:<level>` or a mesh file path.
pub fn parse_shape(s: &str) -> Result<MeshSource, String> {
    match s {
        "dome" => Ok(MeshSource::default()),
        "ball" => Ok(MeshSource::UnitBall { level: 2 }),
        _ => match s.strip_prefix("ball:") {
            Some(l) => Ok(MeshSource::UnitBall {
                level: l.parse().map_err(|e| format!("{e}"))?,
            }),
            None => Ok(MeshSource::File(PathBuf::from(s))),
        },
    }
}

pub fn shape_label(m: &MeshSource) -> String {
    match m {
        MeshSource::Dome { .. } => "dome".into(),
        MeshSource::UnitBall { level } => format!("ball:{level}"),
        MeshSource::File(p) => p.display().to_string(),
    }
}

impl RunConfig {
    pub fn load(path: &Path, preset: Option<&str>) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_ini(&text, preset)
    }

    /// Parses a configuration; `preset` overrides a preset named in the file.
    /// Parameter overrides are applied on top of the preset.
    pub fn from_ini(text: &str, preset: Option<&str>) -> Result<Self, ConfigError> {
        let opts = ParseOption {
            enabled_escape: false,
            ..ParseOption::default()
        };
        let ini = Ini::load_from_str_opt(text, opts).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        let mut sections: Vec<Section> = Vec::new();
        for (name, props) in ini.iter() {
            let name = match name {
                None if props.is_empty() => continue,
                None => return Err(ConfigError::Invalid("keys must follow a [section] header".into())),
                Some(n) => n,
            };
            if !SECTIONS.contains(&name) {
                return Err(ConfigError::UnknownSection(name.to_string()));
            }
            let mut entries: Vec<(&str, &str)> = Vec::new();
            for (k, v) in props.iter() {
                if entries.iter().any(|(e, _)| *e == k) {
                    return Err(ConfigError::DuplicateKey {
                        section: name.into(),
                        key: k.into(),
                    });
                }
                entries.push((k, v));
            }
            if let Some(s) = sections.iter_mut().find(|s| s.name == name) {
                s.entries.extend(entries);
            } else {
                sections.push(Section { name, entries });
            }
        }
        let empty = |name| Section { name, entries: Vec::new() };
        let take = |name: &'static str| -> Section {
            sections
                .iter()
                .find(|s| s.name == name)
                .map(|s| Section {
                    name: s.name,
                    entries: s.entries.clone(),
                })
                .unwrap_or_else(|| empty(name))
        };
        let mut cfg = RunConfig::default();

        let mesh = take("mesh");
        check_keys(&mesh, &MESH_KEYS)?;
        cfg.scenario.mesh = parse_mesh(&mesh)?;

        let sc = take("scenario");
        check_keys(&sc, &SCENARIO_KEYS)?;
        let ec_constant = sc.parse::<f64>("ec_constant")?.unwrap_or(DEFAULT_EC_CONSTANT);
        if let Some(v) = sc.get("stimulus") {
            cfg.scenario.stimulus = v.parse().map_err(|e: cellmech::model::ModelError| sc.err("stimulus", v, e.to_string()))?;
        }
        if let Some(v) = sc.get("bc_mode") {
            cfg.scenario.bc_mode = parse_bc(v).map_err(|r| sc.err("bc_mode", v, r))?;
        }
        if let Some(v) = sc.get("ec_mode") {
            cfg.scenario.ec_mode = parse_ec_mode(v, ec_constant).map_err(|r| sc.err("ec_mode", v, r))?;
        }
        if let Some(v) = sc.get("material") {
            cfg.scenario.material = match v.to_ascii_lowercase().as_str() {
                "elastic" => Material::Elastic,
                "viscoelastic" => Material::Viscoelastic,
                _ => return Err(sc.err("material", v, "expected elastic or viscoelastic")),
            };
        }
        if let Some(v) = sc.get("nucleus") {
            cfg.scenario.nucleus = match v.to_ascii_lowercase().as_str() {
                "none" => NucleusMode::None,
                "robin" => NucleusMode::Robin,
                _ => return Err(sc.err("nucleus", v, "expected none or robin")),
            };
        }
        if let Some(v) = sc.get("mechanics") {
            cfg.scenario.mechanics_enabled = parse_bool(v).map_err(|r| sc.err("mechanics", v, r))?;
        }
        if let Some(v) = sc.parse("t_end")? {
            cfg.scenario.t_end = v;
        }
        if let Some(v) = sc.parse("dt")? {
            cfg.scenario.dt = v;
        }
        if let Some(v) = sc.parse::<f64>("tol")? {
            if !(v > 0.0 && v < 1.0) {
                return Err(sc.err("tol", &v.to_string(), "must lie in (0, 1)"));
            }
            cfg.tol = v;
        }

        let params = take("params");
        let preset = preset.or(params.get("preset"));
        if let Some(name) = preset {
            cfg.params = ModelParams::preset(name).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        for &(k, v) in &params.entries {
            if k == "preset" {
                continue;
            }
            let value = parse_f64(v).map_err(|r| params.err(k, v, r))?;
            cfg.params.set(k, value).map_err(|_| ConfigError::UnknownKey {
                section: "params".into(),
                key: k.into(),
            })?;
        }

        let sw = take("sweep");
        check_keys(&sw, &SWEEP_KEYS)?;
        let s = &mut cfg.sweep;
        if let Some(v) = sw.list("E", parse_f64)? {
            s.e = v;
        }
        if let Some(v) = sw.list("C1", parse_f64)? {
            s.c1 = v;
        }
        if let Some(v) = sw.list("ec_mode", |x| parse_ec_mode(x, ec_constant))? {
            s.ec_modes = v;
        }
        if let Some(v) = sw.list("stimulus", |x| x.parse::<Stimulus>().map_err(|e| e.to_string()))? {
            s.stimuli = v;
        }
        if let Some(v) = sw.list("shape", parse_shape)? {
            s.shapes = v;
        }
        if let Some(v) = sw.list("parameters", |x| {
            cellmech::model::PARAM_NAMES
                .contains(&x)
                .then(|| x.to_string())
                .ok_or_else(|| format!("unknown parameter '{x}'"))
        })? {
            s.parameters = v;
        }
        if let Some(v) = sw.list("deltas", parse_f64)? {
            s.deltas = v;
        }
        if let Some(v) = sw.list("levels", |x| x.parse::<usize>().map_err(|e| e.to_string()))? {
            s.levels = v;
        }
        if let Some(c) = sw.parse::<f64>("dt_factor")? {
            if !(c > 0.0) {
                return Err(sw.err("dt_factor", &c.to_string(), "must be positive"));
            }
            s.dt_policy = DtPolicy { c };
        }
        if let Some(v) = sw.parse("benchmark_t_end")? {
            s.benchmark_t_end = v;
        }

        let out = take("output");
        check_keys(&out, &OUTPUT_KEYS)?;
        if let Some(v) = out.get("dir") {
            cfg.output.dir = PathBuf::from(v);
        }
        if let Some(v) = out.parse("cadence")? {
            cfg.output.cadence = v;
        }
        if let Some(v) = out.get("vtk") {
            cfg.output.vtk = parse_bool(v).map_err(|r| out.err("vtk", v, r))?;
        }

        cfg.scenario
            .validate(&cfg.params, None)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }
}

fn check_keys(s: &Section, allowed: &[&str]) -> Result<(), ConfigError> {
    match s.entries.iter().find(|(k, _)| !allowed.contains(k)) {
        Some((k, _)) => Err(ConfigError::UnknownKey {
            section: s.name.to_string(),
            key: k.to_string(),
        }),
        None => Ok(()),
    }
}

fn parse_mesh(s: &Section) -> Result<MeshSource, ConfigError> {
    let source = s.get("source").unwrap_or("dome");
    let only = |keys: &[&str]| -> Result<(), ConfigError> {
        match s.entries.iter().find(|(k, _)| *k != "source" && !keys.contains(k)) {
            Some((k, v)) => Err(s.err(k, v, format!("not used by mesh source '{source}'"))),
            None => Ok(()),
        }
    };
    match source {
        "dome" => {
            only(&["base_radius", "height", "refinement"])?;
            Ok(MeshSource::Dome {
                base_radius: s.parse("base_radius")?.unwrap_or(DOME_BASE_RADIUS),
                height: s.parse("height")?.unwrap_or(DOME_HEIGHT),
                refinement: s.parse("refinement")?.unwrap_or(DOME_DEFAULT_REFINEMENT),
            })
        }
        "ball" => {
            only(&["level"])?;
            Ok(MeshSource::UnitBall {
                level: s.parse("level")?.unwrap_or(2),
            })
        }
        "file" => {
            only(&["path"])?;
            let path = s
                .get("path")
                .ok_or_else(|| s.err("path", "", "a file mesh needs 'path'"))?;
            Ok(MeshSource::File(PathBuf::from(path)))
        }
        other => Err(s.err("source", other, "expected dome, ball or file")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        assert_eq!(RunConfig::from_ini("", None).unwrap(), RunConfig::default());
    }

    #[test]
    fn full_config() {
        let text = "
; comment
[mesh]
source = ball   ; inline comment
level = 1       # another

[scenario]
stimulus = 2xD
bc_mode = partially-fixed
ec_mode = constant:0.6
t_end = 10
dt = 0.25

[params]
preset = appendix-d10
C1 = 0.5

[sweep]
E = 0.1, 7e6
ec_mode = coupled, constant
shape = dome, ball:0

[output]
dir = results
cadence = 0
";
        let c = RunConfig::from_ini(text, None).unwrap();
        assert_eq!(c.scenario.mesh, MeshSource::UnitBall { level: 1 });
        assert_eq!(c.scenario.stimulus, Stimulus::TwoXD);
        assert_eq!(c.scenario.bc_mode, BcMode::PartiallyFixed);
        assert_eq!(c.scenario.ec_mode, EcMode::Constant(0.6));
        assert_eq!(c.scenario.n_steps(), 40);
        assert_eq!(c.params.d1, 10.0);
        assert_eq!(c.params.c1, 0.5);
        assert_eq!(c.sweep.e, vec![0.1, 7e6]);
        assert_eq!(c.sweep.ec_modes, vec![EcMode::Coupled, EcMode::Constant(0.6)]);
        assert_eq!(c.sweep.shapes[1], MeshSource::UnitBall { level: 0 });
        assert_eq!(c.output.dir, PathBuf::from("results"));
        assert_eq!(c.output.cadence, 0);
    }

    #[test]
    fn preset_flag_overrides_file() {
        let c = RunConfig::from_ini("[params]\npreset = appendix-d10\n", Some("table1-default")).unwrap();
        assert_eq!(c.params.d1, 4.0);
    }

    #[test]
    fn unknown_parameter_is_named() {
        let e = RunConfig::from_ini("[params]\nk99 = 1\n", None).unwrap_err();
        assert!(e.to_string().contains("k99"), "{e}");
    }

    #[test]
    fn unknown_keys_and_sections() {
        assert!(matches!(
            RunConfig::from_ini("[scenario]\nstimuls = 3D\n", None),
            Err(ConfigError::UnknownKey { .. })
        ));
        assert!(matches!(
            RunConfig::from_ini("[solver]\ntol = 1\n", None),
            Err(ConfigError::UnknownSection(_))
        ));
        assert!(matches!(
            RunConfig::from_ini("[mesh]\nsource = ball\nrefinement = 2\n", None),
            Err(ConfigError::Value { .. })
        ));
    }

    #[test]
    fn bad_values() {
        assert!(RunConfig::from_ini("[scenario]\nstimulus = 4D\n", None).is_err());
        assert!(RunConfig::from_ini("[scenario]\ndt = -1\n", None).is_err());
        assert!(RunConfig::from_ini("[sweep]\nE =\n", None).is_err());
        assert!(RunConfig::from_ini("[params]\nnu_c = 0.5\n", None).is_err());
        assert!(RunConfig::from_ini("[params]\npreset = nope\n", None).is_err());
    }

    #[test]
    fn duplicate_key() {
        assert!(matches!(
            RunConfig::from_ini("[scenario]\ndt = 1\ndt = 2\n", None),
            Err(ConfigError::DuplicateKey { .. })
        ));
    }

    #[test]
    fn ec_mode_labels_roundtrip() {
        for m in [EcMode::Coupled, EcMode::Constant(0.6)] {
            assert_eq!(parse_ec_mode(&ec_mode_label(m), 1.0).unwrap(), m);
        }
    }
}
