//! Experiment configuration files and their resolution into runtime objects.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::FieldSpec;
use crate::geometry::{AngleGenerator, SamplingRule, ScanGeometry};
use crate::phantom::{build_thorax_like_phantom, uniform_disk, Phantom};
use crate::spectra::{
    load_attenuation_table, load_spectrum, normalize_spectrum, synth_bremsstrahlung, EnergyGrid, MaterialTable,
    SpectrumTable,
};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    NoiseFree,
    Sparse,
    Poisson,
    GeoInconsistent,
    SingleSpectrum,
    Highres,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [
        Scenario::NoiseFree,
        Scenario::Sparse,
        Scenario::Poisson,
        Scenario::GeoInconsistent,
        Scenario::SingleSpectrum,
        Scenario::Highres,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::NoiseFree => "noise_free",
            Scenario::Sparse => "sparse",
            Scenario::Poisson => "poisson",
            Scenario::GeoInconsistent => "geo_inconsistent",
            Scenario::SingleSpectrum => "single_spectrum",
            Scenario::Highres => "highres",
        }
    }
}

/// Per-spectrum angles: an explicit list or a generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AngleSpec {
    Explicit { angles_rad: Vec<f64> },
    Generated(AngleGenerator),
}

impl AngleSpec {
    pub fn angles(&self) -> Result<Vec<f64>> {
        match self {
            AngleSpec::Explicit { angles_rad } => Ok(angles_rad.clone()),
            AngleSpec::Generated(g) => g.angles(),
        }
    }

    pub fn n_angles(&self) -> usize {
        match self {
            AngleSpec::Explicit { angles_rad } => angles_rad.len(),
            AngleSpec::Generated(g) => g.count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub sod_mm: f64,
    pub sdd_mm: f64,
    pub n_det: usize,
    pub det_size_mm: f64,
    /// One entry per spectrum.
    pub angles: Vec<AngleSpec>,
}

impl GeometryConfig {
    pub fn build(&self) -> Result<ScanGeometry> {
        let sets = self.angles.iter().map(AngleSpec::angles).collect::<Result<Vec<_>>>()?;
        ScanGeometry::new(self.sod_mm, self.sdd_mm, self.n_det, self.det_size_mm, sets)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub e_min_kev: f64,
    pub e_max_kev: f64,
    pub delta_kev: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { e_min_kev: 10.0, e_max_kev: 150.0, delta_kev: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    /// Built-in material name.
    pub material: String,
    pub thickness_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpectrumConfig {
    Synthetic {
        kvp: f64,
        #[serde(default)]
        filter: Option<FilterConfig>,
        #[serde(default)]
        label: Option<String>,
    },
    /// Two-column CSV `energy_kev,value`.
    File { path: PathBuf, label: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MaterialConfig {
    Builtin { name: String },
    /// Mass attenuation CSV `energy_kev,value` (cm^2/g).
    File { path: PathBuf, name: String, density: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PhantomConfig {
    /// The bundled water/bone thorax-like slice, optionally scaled.
    Thorax {
        #[serde(default = "unit")]
        scale: f64,
    },
    Disk { radius_mm: f64, density: f64, material: usize },
    File { path: PathBuf },
}

fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    /// Sampling step of the simulator (mm), independent of the training step.
    pub step_mm: f64,
    pub sampling: SamplingRule,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig { step_mm: 0.25, sampling: SamplingRule::Midpoint }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub i0: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub resolution: usize,
    /// Profile rows at `resolution`; scaled for higher resolutions.
    pub rows: Vec<usize>,
    /// Extra extraction resolutions as multiples of `resolution`.
    pub highres_factors: Vec<usize>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig { resolution: 512, rows: vec![290], highres_factors: vec![] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    #[serde(default)]
    pub description: String,
    pub geometry: GeometryConfig,
    #[serde(default)]
    pub energy_grid: GridConfig,
    pub spectra: Vec<SpectrumConfig>,
    pub materials: Vec<MaterialConfig>,
    pub phantom: PhantomConfig,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub noise: Option<NoiseConfig>,
    /// Defaults to the reference eight-layer network.
    #[serde(default)]
    pub network: Option<FieldSpec>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    pub output_dir: PathBuf,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    /// Parses a config file; relative paths inside it are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        for s in &mut self.spectra {
            if let SpectrumConfig::File { path, .. } = s {
                fix(path);
            }
        }
        for m in &mut self.materials {
            if let MaterialConfig::File { path, .. } = m {
                fix(path);
            }
        }
        if let PhantomConfig::File { path } = &mut self.phantom {
            fix(path);
        }
    }

    pub fn n_spectra(&self) -> usize {
        self.spectra.len()
    }

    pub fn n_materials(&self) -> usize {
        self.materials.len()
    }

    pub fn network(&self) -> FieldSpec {
        self.network.clone().unwrap_or_else(|| FieldSpec::reference(self.n_materials()))
    }

    /// Copy with every default written out.
    pub fn resolved(&self) -> Self {
        ExperimentConfig { network: Some(self.network()), ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.n_spectra();
        let m = self.n_materials();
        if k == 0 || m == 0 {
            return Err(config_err("at least one spectrum and one material are required"));
        }
        if self.geometry.angles.len() != k {
            return Err(config_err(format!("{} angle sets for {k} spectra", self.geometry.angles.len())));
        }
        let net = self.network();
        if net.n_materials != m {
            return Err(config_err(format!("network outputs {} materials, config lists {m}", net.n_materials)));
        }
        net.validate().map_err(|e| config_err(format!("network: {e}")))?;
        self.train.validate()?;
        if !(self.simulation.step_mm.is_finite() && self.simulation.step_mm > 0.0) {
            return Err(config_err("simulation.step_mm must be positive"));
        }
        if self.evaluation.resolution == 0 || self.evaluation.highres_factors.iter().any(|f| *f == 0) {
            return Err(config_err("evaluation resolution and factors must be positive"));
        }
        if let Some(r) = self.evaluation.rows.iter().find(|r| **r >= self.evaluation.resolution) {
            return Err(config_err(format!("profile row {r} outside a {}-row image", self.evaluation.resolution)));
        }
        if let Some(n) = &self.noise {
            if !(n.i0.is_finite() && n.i0 > 0.0) {
                return Err(config_err(format!("noise.i0 must be positive, got {}", n.i0)));
            }
        }
        let files = self
            .spectra
            .iter()
            .filter_map(|s| match s {
                SpectrumConfig::File { path, .. } => Some(path),
                _ => None,
            })
            .chain(self.materials.iter().filter_map(|s| match s {
                MaterialConfig::File { path, .. } => Some(path),
                _ => None,
            }))
            .chain(match &self.phantom {
                PhantomConfig::File { path } => Some(path),
                _ => None,
            });
        for path in files {
            if !path.is_file() {
                return Err(config_err(format!("referenced file {} does not exist", path.display())));
            }
        }
        let geom = self.geometry.build().map_err(|e| config_err(format!("geometry: {e}")))?;
        self.check_scenario(&geom)
    }

    fn check_scenario(&self, geom: &ScanGeometry) -> Result<()> {
        let name = self.scenario.name();
        match self.scenario {
            Scenario::NoiseFree | Scenario::Sparse | Scenario::GeoInconsistent if self.noise.is_some() => {
                Err(config_err(format!("scenario {name} is noise-free; remove the noise block")))
            }
            Scenario::Poisson if self.noise.is_none() => Err(config_err("scenario poisson needs a noise block")),
            Scenario::SingleSpectrum if self.n_spectra() != 1 => {
                Err(config_err(format!("scenario single_spectrum needs exactly one spectrum, got {}", self.n_spectra())))
            }
            Scenario::Highres if self.evaluation.highres_factors.is_empty() => {
                Err(config_err("scenario highres needs evaluation.highres_factors"))
            }
            Scenario::GeoInconsistent => {
                let sets = geom.angle_sets();
                if sets.len() < 2 {
                    return Err(config_err("scenario geo_inconsistent needs at least two spectra"));
                }
                for i in 0..sets.len() {
                    for j in i + 1..sets.len() {
                        if sets[i].iter().any(|a| sets[j].iter().any(|b| (a - b).abs() < 1e-9)) {
                            return Err(config_err(format!("angle sets {i} and {j} share angles; they must be disjoint")));
                        }
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Validates and materializes geometry, spectra, materials and phantom.
    pub fn build(&self) -> Result<Experiment> {
        self.validate()?;
        let geometry = self.geometry.build()?;
        let g = &self.energy_grid;
        let grid = EnergyGrid::new(g.e_min_kev, g.e_max_kev, g.delta_kev)?;
        let mut materials = Vec::new();
        for mc in &self.materials {
            materials.push(match mc {
                MaterialConfig::Builtin { name } => MaterialTable::builtin(name, grid)?,
                MaterialConfig::File { path, name, density } => load_attenuation_table(path, grid, name.clone(), *density)?,
            });
        }
        let mut spectra = Vec::new();
        for sc in &self.spectra {
            spectra.push(match sc {
                SpectrumConfig::Synthetic { kvp, filter, label } => {
                    let label = label.clone().unwrap_or_else(|| format!("{kvp}kVp"));
                    let raw = match filter {
                        Some(f) => {
                            let table = MaterialTable::builtin(&f.material, grid)?;
                            synth_bremsstrahlung(*kvp, Some((&table, 0.1 * f.thickness_mm)), grid)?
                        }
                        None => synth_bremsstrahlung(*kvp, None, grid)?,
                    };
                    normalize_spectrum(&raw, grid, label)?
                }
                SpectrumConfig::File { path, label } => load_spectrum(path, grid, label.clone())?,
            });
        }
        let m = self.n_materials();
        let phantom = match &self.phantom {
            PhantomConfig::Thorax { scale } => build_thorax_like_phantom(m)?.scaled(*scale)?,
            PhantomConfig::Disk { radius_mm, density, material } => uniform_disk(*radius_mm, *density, *material, m)?,
            PhantomConfig::File { path } => Phantom::load(path)?,
        };
        if phantom.n_materials() != m {
            return Err(config_err(format!("phantom has {} materials, config lists {m}", phantom.n_materials())));
        }
        phantom.check_within_fov(&geometry).map_err(|e| config_err(format!("phantom: {e}")))?;
        Ok(Experiment {
            material_names: materials.iter().map(|t| t.name.clone()).collect(),
            config: self.resolved(),
            geometry,
            spectra,
            materials,
            phantom,
        })
    }
}

/// A validated configuration with everything loaded.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub geometry: ScanGeometry,
    pub spectra: Vec<SpectrumTable>,
    pub materials: Vec<MaterialTable>,
    pub material_names: Vec<String>,
    pub phantom: Phantom,
}
