//! Ray-driven polychromatic forward model.
//!
//! A projection is `p = -ln sum_E w_E exp(-sum_m theta_m(E) g_m)` where
//! `g_m` is the line integral of material `m` (g/cm^2) and `w_E = S_E dE`
//! are the normalized spectrum's bin weights. Line integrals are midpoint
//! sums over the ray's [`SamplePlan`] with the step converted to cm.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{Ray, SamplePlan, SamplingRule, ScanGeometry, Vec3};
use crate::spectra::{MaterialTable, SpectrumTable};

/// Anything that maps points (mm) to `M` material densities (g/cm^3).
pub trait MaterialField: Sync {
    fn n_materials(&self) -> usize;

    /// Writes `points.len() * M` values, point-major.
    fn eval_into(&self, points: &[Vec3], out: &mut [f64]) -> Result<()>;

    fn eval(&self, points: &[Vec3]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; points.len() * self.n_materials()];
        self.eval_into(points, &mut out)?;
        Ok(out)
    }
}

pub fn line_integrals(field: &dyn MaterialField, ray: &Ray, plan: &SamplePlan) -> Result<Vec<f64>> {
    let points: Vec<Vec3> = plan.points(ray).collect();
    let m = field.n_materials();
    let values = field.eval(&points)?;
    let mut g = vec![0.0; m];
    for chunk in values.chunks_exact(m) {
        for (acc, v) in g.iter_mut().zip(chunk) {
            *acc += v;
        }
    }
    let dt = plan.step_cm();
    g.iter_mut().for_each(|x| *x *= dt);
    Ok(g)
}

/// Spectra and basis materials flattened for repeated projection.
#[derive(Debug, Clone)]
pub struct SpectralModel {
    n_materials: usize,
    /// Per spectrum: the bins with positive weight and their weights.
    bins: Vec<Vec<(usize, f64)>>,
    /// `theta[bin * M + m]`.
    theta: Vec<f64>,
}

impl SpectralModel {
    pub fn new(spectra: &[SpectrumTable], materials: &[MaterialTable]) -> Result<Self> {
        if spectra.is_empty() || materials.is_empty() {
            return Err(invalid("need at least one spectrum and one material"));
        }
        let grid = spectra[0].grid;
        for s in spectra {
            if s.grid != grid {
                return Err(Error::Shape(format!("spectrum {} is on a different energy grid", s.label)));
            }
            let total: f64 = s.bin_weights().iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(invalid(format!("spectrum {} is not normalized (sum {total})", s.label)));
            }
        }
        for m in materials {
            if m.grid != grid {
                return Err(Error::Shape(format!("material {} is on a different energy grid", m.name)));
            }
        }
        let n_materials = materials.len();
        let mut theta = vec![0.0; grid.n_bins * n_materials];
        for (mi, mat) in materials.iter().enumerate() {
            for (bin, t) in mat.theta.iter().enumerate() {
                theta[bin * n_materials + mi] = *t;
            }
        }
        let bins = spectra
            .iter()
            .map(|s| {
                s.bin_weights()
                    .into_iter()
                    .enumerate()
                    .filter(|(_, w)| *w > 0.0)
                    .collect()
            })
            .collect();
        Ok(SpectralModel { n_materials, bins, theta })
    }

    pub fn n_spectra(&self) -> usize {
        self.bins.len()
    }

    pub fn n_materials(&self) -> usize {
        self.n_materials
    }

    fn exponent(&self, bin: usize, g: &[f64]) -> f64 {
        let m = self.n_materials;
        self.theta[bin * m..(bin + 1) * m].iter().zip(g).map(|(t, x)| t * x).sum()
    }

    fn check(&self, k: usize, g: &[f64]) -> Result<()> {
        if k >= self.bins.len() {
            return Err(invalid(format!("spectrum index {k} out of range")));
        }
        if g.len() != self.n_materials {
            return Err(Error::Shape(format!("{} line integrals for {} materials", g.len(), self.n_materials)));
        }
        if g.iter().any(|x| x.is_nan()) {
            return Err(invalid("NaN line integral"));
        }
        Ok(())
    }

    pub fn project(&self, k: usize, g: &[f64]) -> Result<f64> {
        self.check(k, g)?;
        Ok(self.project_unchecked(k, g, None))
    }

    /// Projection and its gradient `dp/dg_m`, the spectrum-and-transmission
    /// weighted mean of `theta_m(E)`.
    pub fn project_with_grad(&self, k: usize, g: &[f64], grad: &mut [f64]) -> Result<f64> {
        self.check(k, g)?;
        if grad.len() != self.n_materials {
            return Err(Error::Shape("gradient buffer length differs from material count".into()));
        }
        Ok(self.project_unchecked(k, g, Some(grad)))
    }

    pub(crate) fn project_unchecked(&self, k: usize, g: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let bins = &self.bins[k];
        // shift by the smallest exponent among weighted bins so the largest term is exp(0)
        let shift = bins
            .iter()
            .map(|&(bin, _)| self.exponent(bin, g))
            .fold(f64::INFINITY, f64::min);
        let mut total = 0.0;
        match grad {
            None => {
                for &(bin, w) in bins {
                    total += w * (shift - self.exponent(bin, g)).exp();
                }
            }
            Some(grad) => {
                grad.fill(0.0);
                let m = self.n_materials;
                for &(bin, w) in bins {
                    let term = w * (shift - self.exponent(bin, g)).exp();
                    total += term;
                    for (gr, t) in grad.iter_mut().zip(&self.theta[bin * m..(bin + 1) * m]) {
                        *gr += term * t;
                    }
                }
                grad.iter_mut().for_each(|x| *x /= total);
            }
        }
        shift - total.ln()
    }
}

pub fn poly_projection(spectrum: &SpectrumTable, materials: &[MaterialTable], g: &[f64]) -> Result<f64> {
    SpectralModel::new(std::slice::from_ref(spectrum), materials)?.project(0, g)
}

/// Polychromatic projections, one `n_angles x n_det` block per spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    pub geometry: ScanGeometry,
    pub spectra: Vec<SpectrumSinogram>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumSinogram {
    pub label: String,
    pub n_angles: usize,
    pub n_det: usize,
    /// Row-major `[angle][detector]`.
    pub data: Vec<f64>,
    pub i0: Option<f64>,
    pub seed: Option<u64>,
}

impl SpectrumSinogram {
    pub fn get(&self, angle: usize, det: usize) -> f64 {
        self.data[angle * self.n_det + det]
    }
}

impl Sinogram {
    pub fn n_spectra(&self) -> usize {
        self.spectra.len()
    }

    pub fn total_rays(&self) -> usize {
        self.spectra.iter().map(|s| s.data.len()).sum()
    }

    /// Rounds every value to single precision, the on-disk representation.
    pub fn quantize_f32(&mut self) {
        for s in &mut self.spectra {
            s.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.spectra.iter().all(|s| s.data.iter().all(|v| v.is_finite()))
    }
}

/// Forward model settings shared by simulation and training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionSettings {
    pub step_mm: f64,
    pub rule: SamplingRule,
}

pub fn simulate_sinogram(
    field: &dyn MaterialField,
    geom: &ScanGeometry,
    spectra: &[SpectrumTable],
    materials: &[MaterialTable],
    settings: ProjectionSettings,
) -> Result<Sinogram> {
    if spectra.len() != geom.n_spectra() {
        return Err(Error::Shape(format!(
            "{} spectra but {} angle sets",
            spectra.len(),
            geom.n_spectra()
        )));
    }
    if materials.len() != field.n_materials() {
        return Err(Error::Shape(format!(
            "{} material tables but the field has {} channels",
            materials.len(),
            field.n_materials()
        )));
    }
    let model = SpectralModel::new(spectra, materials)?;
    let plan = geom.sample_plan(settings.step_mm, settings.rule)?;
    let n_det = geom.n_det();
    let mut out = Vec::with_capacity(spectra.len());
    for (k, (spectrum, angles)) in spectra.iter().zip(geom.angle_sets()).enumerate() {
        let mut data = vec![0.0; angles.len() * n_det];
        data.par_chunks_mut(n_det)
            .zip(angles.par_iter())
            .try_for_each(|(row, &phi)| -> Result<()> {
                for (j, slot) in row.iter_mut().enumerate() {
                    let ray = geom.ray_for(phi, j)?;
                    let g = line_integrals(field, &ray, &plan)?;
                    *slot = model.project(k, &g)?;
                }
                Ok(())
            })?;
        out.push(SpectrumSinogram {
            label: spectrum.label.clone(),
            n_angles: angles.len(),
            n_det,
            data,
            i0: None,
            seed: None,
        });
    }
    Ok(Sinogram { geometry: geom.clone(), spectra: out })
}

/// Poisson-noisy copy of `sino`; also returns how many zero counts were clamped to one.
///
/// Entry `i` (flattened across spectra) draws from its own ChaCha stream, so
/// the result does not depend on evaluation order.
pub fn add_poisson_noise(sino: &Sinogram, i0: f64, seed: u64) -> Result<(Sinogram, usize)> {
    if !(i0.is_finite() && i0 > 0.0) {
        return Err(invalid(format!("photon count must be positive, got {i0}")));
    }
    let mut noisy = sino.clone();
    let mut clamped = 0usize;
    let mut offset = 0u64;
    for s in &mut noisy.spectra {
        let base = offset;
        let counts: Vec<(f64, bool)> = s
            .data
            .par_iter()
            .enumerate()
            .map(|(i, &p)| {
                let n = sample_count(i0 * (-p).exp(), seed, base + i as u64);
                let is_zero = n == 0.0;
                (-(n.max(1.0) / i0).ln(), is_zero)
            })
            .collect();
        clamped += counts.iter().filter(|c| c.1).count();
        s.data = counts.into_iter().map(|c| c.0).collect();
        s.i0 = Some(i0);
        s.seed = Some(seed);
        offset += s.data.len() as u64;
    }
    Ok((noisy, clamped))
}

fn sample_count(mean: f64, seed: u64, stream: u64) -> f64 {
    if !(mean > 0.0) {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    // rand_distr can return -1 for vanishing means
    Poisson::new(mean).map(|d| d.sample(&mut rng).max(0.0)).unwrap_or(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinogramSidecar {
    pub format: String,
    pub data_file: String,
    pub spectrum_index: usize,
    pub n_spectra: usize,
    pub label: String,
    pub n_angles: usize,
    pub n_det: usize,
    pub angles_rad: Vec<f64>,
    pub i0: Option<f64>,
    pub seed: Option<u64>,
    pub geometry: ScanGeometry,
}

const SINOGRAM_FORMAT: &str = "f32le";

fn sidecar_path(dir: &Path, stem: &str, k: usize) -> PathBuf {
    dir.join(format!("{stem}_k{k}.json"))
}

/// Writes `<stem>_k<k>.f32` (little-endian f32, row-major) and a JSON sidecar per spectrum.
pub fn write_sinogram(sino: &Sinogram, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for (k, s) in sino.spectra.iter().enumerate() {
        let data_file = format!("{stem}_k{k}.f32");
        let bytes: Vec<u8> = s.data.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
        let data_path = dir.join(&data_file);
        std::fs::write(&data_path, bytes).map_err(|e| Error::io(&data_path, e))?;
        let sidecar = SinogramSidecar {
            format: SINOGRAM_FORMAT.into(),
            data_file,
            spectrum_index: k,
            n_spectra: sino.spectra.len(),
            label: s.label.clone(),
            n_angles: s.n_angles,
            n_det: s.n_det,
            angles_rad: sino.geometry.angle_sets()[k].clone(),
            i0: s.i0,
            seed: s.seed,
            geometry: sino.geometry.clone(),
        };
        let path = sidecar_path(dir, stem, k);
        std::fs::write(&path, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&path, e))?;
        written.push(data_path);
        written.push(path);
    }
    Ok(written)
}

pub fn read_sinogram(dir: &Path, stem: &str) -> Result<Sinogram> {
    let read_sidecar = |k: usize| -> Result<SinogramSidecar> {
        let path = sidecar_path(dir, stem, k);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    };
    let first = read_sidecar(0)?;
    let geometry = first.geometry.clone();
    let mut spectra = Vec::with_capacity(first.n_spectra);
    for k in 0..first.n_spectra {
        let sc = if k == 0 { first.clone() } else { read_sidecar(k)? };
        if sc.format != SINOGRAM_FORMAT {
            return Err(Error::Mismatch(format!("unsupported sinogram format {:?}", sc.format)));
        }
        if sc.spectrum_index != k || sc.geometry != geometry {
            return Err(Error::Mismatch(format!("sidecar {k} disagrees with sidecar 0")));
        }
        if sc.angles_rad != geometry.angle_sets()[k] || sc.n_det != geometry.n_det() {
            return Err(Error::Mismatch(format!("sidecar {k}: angles or detector count differ from its geometry")));
        }
        let path = dir.join(&sc.data_file);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != sc.n_angles * sc.n_det * 4 {
            return Err(Error::Mismatch(format!(
                "{}: {} bytes, expected {}",
                path.display(),
                bytes.len(),
                sc.n_angles * sc.n_det * 4
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        spectra.push(SpectrumSinogram {
            label: sc.label,
            n_angles: sc.n_angles,
            n_det: sc.n_det,
            data,
            i0: sc.i0,
            seed: sc.seed,
        });
    }
    Ok(Sinogram { geometry, spectra })
}

/// `angle_index,angle_rad,d0,d1,...` rows for one spectrum.
pub fn write_sinogram_csv(sino: &Sinogram, k: usize, path: &Path) -> Result<()> {
    let s = sino.spectra.get(k).ok_or_else(|| invalid(format!("no spectrum {k}")))?;
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let mut header = vec!["angle_index".to_string(), "angle_rad".to_string()];
    header.extend((0..s.n_det).map(|j| format!("d{j}")));
    let io = |e: csv::Error| Error::io(path, e.into());
    w.write_record(&header).map_err(io)?;
    for (a, phi) in sino.geometry.angle_sets()[k].iter().enumerate() {
        let mut row = vec![a.to_string(), phi.to_string()];
        row.extend((0..s.n_det).map(|j| s.get(a, j).to_string()));
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
