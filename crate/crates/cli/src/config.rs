use std::ops::Range;

use anyhow::{anyhow, bail, Context, Result};
use parafio::fio::SymbolField;
use parafio::grid::{GridSpec, PolarFrequencyGrid, SpatialGrid};
use parafio::parametrix::{default_mu, DataPreset, RandomData, SystemEngine};
use parafio::phase::{PhaseField, TrigPolynomial, TrigTerm};
use serde::{Deserialize, Serialize};
use toml::Spanned;

pub const COMMANDS: [&str; 12] = [
    "check-assumptions",
    "norm",
    "ortho-freq",
    "ortho-angle",
    "diag",
    "kernel-decay",
    "schur",
    "compare-sjnu",
    "solve",
    "flat-roundtrip",
    "evolve-flat",
    "suite",
];

/// The commands `suite` runs, in order.
pub const SUITE: [&str; 11] = [
    "check-assumptions",
    "norm",
    "ortho-freq",
    "ortho-angle",
    "diag",
    "kernel-decay",
    "schur",
    "compare-sjnu",
    "solve",
    "flat-roundtrip",
    "evolve-flat",
];

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    command: Spanned<String>,
    seed: Option<u64>,
    out: Option<String>,
    #[serde(default)]
    phase: RawPhase,
    #[serde(default)]
    grid: GridSection,
    #[serde(default)]
    dyadic: RawDyadic,
    #[serde(default)]
    params: Params,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPhase {
    kind: Option<Spanned<String>>,
    epsilon: Option<Spanned<f64>>,
    preset: Option<Spanned<String>>,
    terms: Option<Vec<TrigTerm>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDyadic {
    j_max: Option<i32>,
    delta: Option<Spanned<f64>>,
    alpha: Option<Spanned<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSection {
    /// `flat` or `perturbed`
    pub kind: String,
    pub epsilon: f64,
    pub preset: String,
    /// explicit profile terms; replace the preset when non-empty
    #[serde(default)]
    pub terms: Vec<TrigTerm>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub j_min: i32,
    pub radial_per_octave: usize,
    pub angular_count: usize,
    pub spatial_l: f64,
    pub lattice_n: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { j_min: -4, radial_per_octave: 8, angular_count: 2048, spatial_l: 3.0, lattice_n: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DyadicSection {
    pub j_max: i32,
    pub delta: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "kind")]
pub enum DataSection {
    Gaussian { width: f64, amplitude0: f64, amplitude1: f64 },
    Random { bumps: usize, center_radius: f64, width_lo: f64, width_hi: f64 },
}

impl DataSection {
    pub fn preset(&self) -> DataPreset {
        match *self {
            Self::Gaussian { width, amplitude0, amplitude1 } => DataPreset::Gaussian { width, amplitude0, amplitude1 },
            Self::Random { bumps, center_radius, width_lo, width_hi } => {
                DataPreset::Random(RandomData { bumps, center_radius, width_lo, width_hi })
            }
        }
    }
}

/// Command parameters; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Params {
    /// `unit`, `lapse_inverse` or `lapse_inverse_minus_one`
    pub symbol: String,
    pub ensemble_size: usize,
    pub power_iters: usize,
    /// upper bound on operator_norm / baseline
    pub norm_bound: f64,
    /// frequency-scan windows [j_lo, j_hi]; empty means derived from the grid
    pub windows: Vec<[i32; 2]>,
    /// octave of the angular scan; defaults to j_max
    pub angle_octave: Option<i32>,
    /// octaves of the kernel commands
    pub octaves: Vec<i32>,
    pub nu: usize,
    pub pairs_per_shell: usize,
    pub max_distance: f64,
    pub anchor: [f64; 3],
    pub lower_bound_size: usize,
    pub data: DataSection,
    pub samples: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub mu: Option<f64>,
    /// `tabulated` or `direct`
    pub engine: String,
    pub step_factor: f64,
    pub times: Vec<f64>,
    /// relative L² tolerance of the flat comparisons
    pub tolerance: f64,
    pub slack: f64,
    pub directions: usize,
}

impl Default for Params {
    fn default() -> Self {
        Self {
            symbol: "unit".into(),
            ensemble_size: 2,
            power_iters: 8,
            norm_bound: 2.0,
            windows: Vec::new(),
            angle_octave: None,
            octaves: vec![4, 5, 6],
            nu: 0,
            pairs_per_shell: 8,
            max_distance: 8.0,
            anchor: [0.1, -0.2, 0.15],
            lower_bound_size: 8,
            data: DataSection::Gaussian { width: 0.7, amplitude0: 1.0, amplitude1: 1.0 },
            samples: 1,
            tol: 1e-6,
            max_iter: 400,
            mu: None,
            engine: "tabulated".into(),
            step_factor: 0.4,
            times: vec![0.0, 0.5],
            tolerance: 1e-3,
            slack: 20.0,
            directions: 8,
        }
    }
}

/// Fully resolved configuration, echoed into every summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub command: String,
    pub seed: u64,
    pub out: String,
    pub phase: PhaseSection,
    pub grid: GridSection,
    pub dyadic: DyadicSection,
    pub params: Params,
}

/// Command-line overrides applied after parsing.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<String>,
    pub command: Option<String>,
}

fn line_of(text: &str, span: Range<usize>) -> usize {
    text[..span.start.min(text.len())].matches('\n').count() + 1
}

fn at<T>(text: &str, s: &Spanned<T>, msg: impl std::fmt::Display) -> anyhow::Error {
    anyhow!("config line {}: {msg}", line_of(text, s.span()))
}

/// Parses and validates a TOML config. Errors carry the offending line.
pub fn parse(text: &str, overrides: &Overrides) -> Result<ExperimentConfig> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| {
        let line = e.span().map(|s| line_of(text, s)).unwrap_or(0);
        anyhow!("config line {line}: {}", e.message())
    })?;
    let command = overrides.command.clone().unwrap_or_else(|| raw.command.get_ref().clone());
    if !COMMANDS.contains(&command.as_str()) {
        return Err(at(text, &raw.command, format!("unknown command '{command}'")));
    }

    let kind = raw.phase.kind.as_ref().map_or("perturbed", |k| k.get_ref().as_str()).to_string();
    if kind != "flat" && kind != "perturbed" {
        return Err(at(text, raw.phase.kind.as_ref().expect("set"), format!("phase kind must be flat or perturbed, got '{kind}'")));
    }
    let epsilon = match (&raw.phase.epsilon, kind.as_str()) {
        (Some(e), _) => *e.get_ref(),
        (None, "flat") => 0.0,
        (None, _) => 0.05,
    };
    if !(0.0..1.0).contains(&epsilon) {
        return Err(at(text, raw.phase.epsilon.as_ref().expect("set"), format!("epsilon must lie in [0, 1), got {epsilon}")));
    }
    if kind == "flat" && epsilon != 0.0 {
        return Err(at(text, raw.phase.epsilon.as_ref().expect("set"), "a flat phase has epsilon = 0"));
    }
    let preset = raw.phase.preset.as_ref().map_or("default", |p| p.get_ref().as_str()).to_string();
    if TrigPolynomial::preset(&preset).is_none() {
        return Err(at(
            text,
            raw.phase.preset.as_ref().expect("set"),
            format!("unknown phase preset '{preset}' (known: {})", TrigPolynomial::PRESETS.join(", ")),
        ));
    }

    let delta = raw.dyadic.delta.as_ref().map_or(0.5, |d| *d.get_ref());
    if epsilon > 0.0 && delta <= epsilon.sqrt() {
        let msg = format!("delta = {delta} must exceed sqrt(epsilon) = {:.6}", epsilon.sqrt());
        return Err(match (&raw.dyadic.delta, &raw.phase.epsilon) {
            (Some(d), _) => at(text, d, msg),
            (None, Some(e)) => at(text, e, msg),
            (None, None) => anyhow!("config: {msg}"),
        });
    }
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(at(text, raw.dyadic.delta.as_ref().expect("set"), format!("delta must lie in (0, 1], got {delta}")));
    }
    let alpha = raw.dyadic.alpha.as_ref().map_or(0.125, |a| *a.get_ref());
    if !(alpha > 0.0 && alpha < 0.2) {
        return Err(at(text, raw.dyadic.alpha.as_ref().expect("set"), format!("alpha must lie in (0, 0.2), got {alpha}")));
    }
    let dyadic = DyadicSection { j_max: raw.dyadic.j_max.unwrap_or(2), delta, alpha };

    let p = &raw.params;
    if parse_symbol(&p.symbol).is_none() {
        bail!("config: unknown symbol '{}'", p.symbol);
    }
    if p.engine != "tabulated" && p.engine != "direct" {
        bail!("config: engine must be tabulated or direct, got '{}'", p.engine);
    }
    let mut params = p.clone();
    if params.angle_octave.is_none() {
        params.angle_octave = Some(dyadic.j_max);
    }
    if params.mu.is_none() {
        params.mu = Some(default_mu());
    }
    if params.windows.is_empty() {
        let (lo, hi) = (raw.grid.j_min, dyadic.j_max);
        params.windows = if hi - lo >= 4 { vec![[lo, hi - 1], [lo + 1, hi]] } else { vec![[lo, hi]] };
    }

    let cfg = ExperimentConfig {
        command,
        seed: overrides.seed.or(raw.seed).unwrap_or(0),
        out: overrides.out.clone().or(raw.out).unwrap_or_else(|| "out".into()),
        phase: PhaseSection { kind, epsilon, preset, terms: raw.phase.terms.unwrap_or_default() },
        grid: raw.grid,
        dyadic,
        params,
    };
    cfg.grids().context("config: invalid grid")?;
    Ok(cfg)
}

pub fn parse_symbol(name: &str) -> Option<SymbolField> {
    match name {
        "unit" => Some(SymbolField::Unit),
        "lapse_inverse" => Some(SymbolField::LapseInverse),
        "lapse_inverse_minus_one" => Some(SymbolField::LapseInverseMinusOne),
        _ => None,
    }
}

impl ExperimentConfig {
    pub fn grid_spec(&self) -> GridSpec {
        GridSpec {
            j_min: self.grid.j_min,
            j_max: self.dyadic.j_max,
            radial_per_octave: self.grid.radial_per_octave,
            angular_count: self.grid.angular_count,
            spatial_half_width: self.grid.spatial_l,
            lattice_n: self.grid.lattice_n,
        }
    }

    pub fn grids(&self) -> Result<(PolarFrequencyGrid, SpatialGrid)> {
        Ok(self.grid_spec().build()?)
    }

    pub fn phase(&self) -> Result<PhaseField> {
        if self.phase.kind == "flat" {
            return Ok(PhaseField::flat());
        }
        let profile = if self.phase.terms.is_empty() {
            TrigPolynomial::preset(&self.phase.preset).ok_or_else(|| anyhow!("unknown preset"))?
        } else {
            TrigPolynomial { terms: self.phase.terms.clone() }
        };
        Ok(PhaseField::perturbed(self.phase.epsilon, profile)?)
    }

    pub fn symbol(&self) -> SymbolField {
        parse_symbol(&self.params.symbol).expect("validated at load")
    }

    pub fn engine(&self) -> SystemEngine {
        match self.params.engine.as_str() {
            "direct" => SystemEngine::Direct,
            _ => SystemEngine::Tabulated { step_factor: self.params.step_factor },
        }
    }

    pub fn mu(&self) -> f64 {
        self.params.mu.unwrap_or_else(default_mu)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_materialized() {
        let cfg = parse("command = \"norm\"\n", &Overrides::default()).unwrap();
        assert_eq!(cfg.phase.kind, "perturbed");
        assert_eq!(cfg.phase.epsilon, 0.05);
        assert_eq!(cfg.params.angle_octave, Some(2));
        assert_eq!(cfg.params.windows, vec![[-4, 1], [-3, 2]]);
        assert!(cfg.params.mu.is_some());
    }

    #[test]
    fn delta_below_sqrt_epsilon_names_its_line() {
        let text = "command = \"norm\"\n[phase]\nepsilon = 0.09\n[dyadic]\ndelta = 0.3\n";
        let err = parse(text, &Overrides::default()).unwrap_err().to_string();
        assert!(err.contains("line 5"), "{err}");
    }

    #[test]
    fn syntax_errors_name_their_line() {
        let err = parse("command = \"norm\"\nseed = \n", &Overrides::default()).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn explicit_terms_replace_the_preset() {
        let text = "command = \"norm\"\n[[phase.terms]]\namplitude = 0.5\ns_freq = 2.0\nomega_freq = [0.0, 1.0, 0.0]\nshift = 0.1\n";
        let cfg = parse(text, &Overrides::default()).unwrap();
        assert_eq!(cfg.phase.terms.len(), 1);
        assert!(!cfg.phase().unwrap().is_flat());
    }

    #[test]
    fn shipped_configs_parse() {
        let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs");
        let mut n = 0;
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.extension().is_some_and(|e| e == "toml") {
                let text = std::fs::read_to_string(&path).unwrap();
                parse(&text, &Overrides::default()).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
                n += 1;
            }
        }
        assert!(n > 0);
    }

    #[test]
    fn unknown_preset_is_rejected() {
        let text = "command = \"norm\"\n[phase]\npreset = \"wavy\"\n";
        let err = parse(text, &Overrides::default()).unwrap_err().to_string();
        assert!(err.contains("line 3") && err.contains("wavy"), "{err}");
    }
}
