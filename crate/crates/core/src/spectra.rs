//! Energy grids, normalized spectra and mass-attenuation tables.
//!
//! Every table used in one projection shares a single [`EnergyGrid`]. Bin `j`
//! is sampled at its lower edge, `e_min + j * delta_e`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyGrid {
    pub e_min: f64,
    pub e_max: f64,
    pub delta_e: f64,
    pub n_bins: usize,
}

impl EnergyGrid {
    pub fn new(e_min: f64, e_max: f64, delta_e: f64) -> Result<Self> {
        if !(e_min.is_finite() && e_min > 0.0) {
            return Err(invalid(format!("e_min must be positive, got {e_min}")));
        }
        if !(delta_e.is_finite() && delta_e > 0.0) {
            return Err(invalid(format!("delta_e must be positive, got {delta_e}")));
        }
        if !(e_max.is_finite() && e_max > e_min) {
            return Err(invalid(format!("e_max ({e_max}) must exceed e_min ({e_min})")));
        }
        let bins = (e_max - e_min) / delta_e;
        let n_bins = bins.round();
        if (bins - n_bins).abs() > 1e-9 * bins.max(1.0) {
            return Err(invalid(format!(
                "energy range [{e_min}, {e_max}] is not a whole number of {delta_e} keV bins"
            )));
        }
        Ok(EnergyGrid { e_min, e_max, delta_e, n_bins: n_bins as usize })
    }

    /// 1 keV bins from 10 to 150 keV.
    pub fn diagnostic() -> Self {
        EnergyGrid::new(10.0, 150.0, 1.0).expect("static grid")
    }

    pub fn energy(&self, bin: usize) -> f64 {
        self.e_min + bin as f64 * self.delta_e
    }

    pub fn energies(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_bins).map(|j| self.energy(j))
    }
}

/// Normalized equivalent spectrum: `sum(weights) * delta_e == 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumTable {
    pub grid: EnergyGrid,
    pub weights: Vec<f64>,
    pub label: String,
}

impl SpectrumTable {
    /// Per-bin quadrature weights `S_E * delta_e`; they sum to one.
    pub fn bin_weights(&self) -> Vec<f64> {
        self.weights.iter().map(|w| w * self.grid.delta_e).collect()
    }

    pub fn mean_energy(&self) -> f64 {
        self.grid
            .energies()
            .zip(&self.weights)
            .map(|(e, w)| e * w * self.grid.delta_e)
            .sum()
    }

    /// A spectrum concentrated in one bin.
    pub fn monochromatic(grid: EnergyGrid, bin: usize, label: impl Into<String>) -> Result<Self> {
        if bin >= grid.n_bins {
            return Err(invalid(format!("bin {bin} outside grid of {} bins", grid.n_bins)));
        }
        let mut raw = vec![0.0; grid.n_bins];
        raw[bin] = 1.0;
        normalize_spectrum(&raw, grid, label)
    }
}

/// Mass attenuation `theta(E)` in cm^2/g of one basis material on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialTable {
    pub grid: EnergyGrid,
    pub theta: Vec<f64>,
    pub name: String,
    /// Nominal density in g/cm^3, used when the material acts as a filter.
    pub density: f64,
}

impl MaterialTable {
    pub fn new(grid: EnergyGrid, theta: Vec<f64>, name: impl Into<String>, density: f64) -> Result<Self> {
        let name = name.into();
        if theta.len() != grid.n_bins {
            return Err(Error::Shape(format!(
                "material {name}: {} values for {} bins",
                theta.len(),
                grid.n_bins
            )));
        }
        if let Some(v) = theta.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(invalid(format!("material {name}: attenuation {v} is not positive")));
        }
        Ok(MaterialTable { grid, theta, name, density })
    }

    /// One of the tables shipped with the crate: `water`, `bone` or `copper`.
    pub fn builtin(name: &str, grid: EnergyGrid) -> Result<Self> {
        let (text, density) = match name {
            "water" => (include_str!("../data/water.csv"), WATER_DENSITY),
            "bone" | "bone_cortical" => (include_str!("../data/bone_cortical.csv"), BONE_DENSITY),
            "copper" => (include_str!("../data/copper.csv"), COPPER_DENSITY),
            other => return Err(invalid(format!("no built-in attenuation table named {other:?}"))),
        };
        let table = TabulatedCurve::parse(text, Path::new(name))?;
        let theta = table.resample_loglog(&grid)?;
        MaterialTable::new(grid, theta, name, density)
    }
}

pub const WATER_DENSITY: f64 = 1.0;
pub const BONE_DENSITY: f64 = 1.92;
pub const COPPER_DENSITY: f64 = 8.96;

/// Two-column `energy_kev,value` table with strictly increasing energies.
#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedCurve {
    pub energies: Vec<f64>,
    pub values: Vec<f64>,
}

impl TabulatedCurve {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, source: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let parse_err = |line: usize, msg: String| Error::Parse { path: source.to_path_buf(), line, msg };
        let mut energies = Vec::new();
        let mut values = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line() as usize);
                parse_err(line, e.to_string())
            })?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            if rec.len() != 2 {
                return Err(parse_err(line, format!("expected 2 columns, found {}", rec.len())));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_err(line, format!("not a number: {s:?}")))
            };
            let (e, v) = (num(&rec[0])?, num(&rec[1])?);
            if let Some(&prev) = energies.last() {
                if e <= prev {
                    return Err(parse_err(line, format!("energy {e} not above previous {prev}")));
                }
            }
            energies.push(e);
            values.push(v);
        }
        if energies.is_empty() {
            return Err(parse_err(1, "table has no rows".into()));
        }
        Ok(TabulatedCurve { energies, values })
    }

    fn check_covers(&self, grid: &EnergyGrid, what: &str) -> Result<()> {
        let (lo, hi) = (grid.energy(0), grid.energy(grid.n_bins - 1));
        let (tlo, thi) = (self.energies[0], *self.energies.last().unwrap());
        if lo < tlo || hi > thi {
            return Err(Error::Range { what: what.into(), lo, hi, table_lo: tlo, table_hi: thi });
        }
        Ok(())
    }

    /// Bracketing node index `i` with `energies[i] <= e <= energies[i + 1]`.
    fn bracket(&self, e: f64) -> usize {
        let i = self.energies.partition_point(|&x| x <= e);
        i.saturating_sub(1).min(self.energies.len().saturating_sub(2))
    }

    /// Log-log linear interpolation onto the grid energies.
    pub fn resample_loglog(&self, grid: &EnergyGrid) -> Result<Vec<f64>> {
        self.check_covers(grid, "attenuation table")?;
        if let Some(v) = self.values.iter().find(|v| **v <= 0.0) {
            return Err(invalid(format!("attenuation value {v} must be positive for log-log interpolation")));
        }
        Ok(grid.energies().map(|e| self.loglog_at(e)).collect())
    }

    pub fn loglog_at(&self, e: f64) -> f64 {
        if self.energies.len() == 1 {
            return self.values[0];
        }
        let i = self.bracket(e);
        let (e0, e1) = (self.energies[i].ln(), self.energies[i + 1].ln());
        let (v0, v1) = (self.values[i].ln(), self.values[i + 1].ln());
        (v0 + (e.ln() - e0) / (e1 - e0) * (v1 - v0)).exp()
    }

    /// Linear interpolation; grid energies outside the table get zero weight.
    pub fn resample_linear_or_zero(&self, grid: &EnergyGrid) -> Vec<f64> {
        let (tlo, thi) = (self.energies[0], *self.energies.last().unwrap());
        grid.energies()
            .map(|e| {
                if e < tlo || e > thi {
                    0.0
                } else if self.energies.len() == 1 {
                    self.values[0]
                } else {
                    let i = self.bracket(e);
                    let (e0, e1) = (self.energies[i], self.energies[i + 1]);
                    let w = (e - e0) / (e1 - e0);
                    self.values[i] * (1.0 - w) + self.values[i + 1] * w
                }
            })
            .collect()
    }
}

pub fn load_attenuation_table(
    path: &Path,
    grid: EnergyGrid,
    name: impl Into<String>,
    density: f64,
) -> Result<MaterialTable> {
    let table = TabulatedCurve::read(path)?;
    MaterialTable::new(grid, table.resample_loglog(&grid)?, name, density)
}

/// Tabulated spectrum file, linearly resampled and normalized.
pub fn load_spectrum(path: &Path, grid: EnergyGrid, label: impl Into<String>) -> Result<SpectrumTable> {
    let table = TabulatedCurve::read(path)?;
    if let Some(v) = table.values.iter().find(|v| **v < 0.0) {
        return Err(invalid(format!("{}: negative spectrum weight {v}", path.display())));
    }
    normalize_spectrum(&table.resample_linear_or_zero(&grid), grid, label)
}

pub fn normalize_spectrum(raw: &[f64], grid: EnergyGrid, label: impl Into<String>) -> Result<SpectrumTable> {
    if raw.len() != grid.n_bins {
        return Err(Error::Shape(format!("{} spectrum bins for a {}-bin grid", raw.len(), grid.n_bins)));
    }
    if let Some(v) = raw.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(invalid(format!("spectrum weight {v} must be finite and nonnegative")));
    }
    let area: f64 = raw.iter().sum::<f64>() * grid.delta_e;
    if area <= 0.0 {
        return Err(invalid("spectrum has no positive weight"));
    }
    Ok(SpectrumTable {
        grid,
        weights: raw.iter().map(|w| w / area).collect(),
        label: label.into(),
    })
}

/// Unnormalized Kramers-law tube spectrum `E (kvp - E)` attenuated by an optional filter.
pub fn synth_bremsstrahlung(
    kvp: f64,
    filter: Option<(&MaterialTable, f64)>,
    grid: EnergyGrid,
) -> Result<Vec<f64>> {
    if !(kvp > grid.e_min) {
        return Err(invalid(format!("kvp {kvp} leaves no bins above e_min {}", grid.e_min)));
    }
    if kvp > grid.e_max {
        return Err(invalid(format!("kvp {kvp} exceeds grid e_max {}", grid.e_max)));
    }
    if let Some((table, thickness)) = filter {
        if !(thickness.is_finite() && thickness >= 0.0) {
            return Err(invalid(format!("filter thickness must be >= 0, got {thickness}")));
        }
        if table.grid != grid {
            return Err(Error::Shape(format!("filter {} is on a different energy grid", table.name)));
        }
    }
    Ok(grid
        .energies()
        .enumerate()
        .map(|(j, e)| {
            if e >= kvp {
                return 0.0;
            }
            let shape = (e * (kvp - e)).max(0.0);
            let transmission = filter.map_or(1.0, |(table, thickness)| {
                (-table.theta[j] * table.density * thickness).exp()
            });
            shape * transmission
        })
        .collect())
}
