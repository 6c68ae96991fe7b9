//! Command implementations behind the `nbmf` binary.
//!
//! Every command works on an output directory laid out as
//!
//! ```text
//! config.resolved.json
//! sinogram/clean/sino_k*.{f32,json}   noise-free projections
//! sinogram/noisy/sino_k*.{f32,json}   Poisson-corrupted copy, when configured
//! truth/image.json (+ .f64, .png)     rasterized phantom at the evaluation size
//! model/final.ckpt, model/train_log.csv, model/summary.json
//! recon_<n>/image.json (+ .f64, .png, profiles.csv)
//! eval_<n>/report.csv, eval_<n>/profile_row<r>.csv
//! summary.json
//! ```

pub mod config;
pub mod presets;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use config::{Experiment, ExperimentConfig, Scenario};

use crate::error::{Error, Result};
use crate::field::{load_checkpoint, save_checkpoint, NeuralField};
use crate::metrics::{
    bilinear_resample, evaluate, extract_image_extent, read_image, row_profile, write_image, write_png16,
    write_profiles_csv, MetricReport,
};
use crate::phantom::{rasterize, DensityImage};
use crate::projector::{add_poisson_noise, read_sinogram, simulate_sinogram, write_sinogram, ProjectionSettings, Sinogram};
use crate::trainer::{train, write_training_log, CheckpointSink};

const SINO_STEM: &str = "sino";
const IMAGE_STEM: &str = "image";

pub fn clean_dir(out: &Path) -> PathBuf {
    out.join("sinogram").join("clean")
}

pub fn noisy_dir(out: &Path) -> PathBuf {
    out.join("sinogram").join("noisy")
}

pub fn truth_dir(out: &Path) -> PathBuf {
    out.join("truth")
}

pub fn model_dir(out: &Path) -> PathBuf {
    out.join("model")
}

pub fn recon_dir(out: &Path, n: usize) -> PathBuf {
    out.join(format!("recon_{n}"))
}

pub fn eval_dir(out: &Path, n: usize) -> PathBuf {
    out.join(format!("eval_{n}"))
}

fn write_json<S: Serialize>(value: &S, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_config_echo(exp: &Experiment) -> Result<()> {
    write_json(&exp.config, &exp.config.output_dir.join("config.resolved.json"))
}

/// Writes a density image with one PNG per material, each scaled to its own maximum.
fn write_image_bundle(img: &DensityImage, names: &[String], dir: &Path) -> Result<PathBuf> {
    let sidecar = write_image(img, names, dir, IMAGE_STEM)?;
    for (ch, name) in img.channels.iter().zip(names) {
        let max = ch.iter().cloned().fold(0.0, f64::max);
        write_png16(ch, img.n, max, &dir.join(format!("{IMAGE_STEM}_{name}.png")))?;
    }
    Ok(sidecar)
}

#[derive(Debug, Clone)]
pub struct SimulateOutput {
    pub clean: Sinogram,
    pub noisy: Option<Sinogram>,
    /// Measurements clamped to one count by the noise model.
    pub clamped: usize,
}

/// Simulates sinograms and the ground-truth image for `exp`.
pub fn cmd_simulate(exp: &Experiment) -> Result<SimulateOutput> {
    let cfg = &exp.config;
    let out = &cfg.output_dir;
    write_config_echo(exp)?;
    let settings = ProjectionSettings { step_mm: cfg.simulation.step_mm, rule: cfg.simulation.sampling };
    let mut clean = simulate_sinogram(&exp.phantom, &exp.geometry, &exp.spectra, &exp.materials, settings)?;
    // keep memory identical to what a reader of the files sees
    clean.quantize_f32();
    write_sinogram(&clean, &clean_dir(out), SINO_STEM)?;
    let (noisy, clamped) = match &cfg.noise {
        Some(n) => {
            let (mut noisy, clamped) = add_poisson_noise(&clean, n.i0, n.seed)?;
            noisy.quantize_f32();
            write_sinogram(&noisy, &noisy_dir(out), SINO_STEM)?;
            if clamped > 0 {
                log::warn!("{clamped} measurements recorded zero counts and were clamped");
            }
            (Some(noisy), clamped)
        }
        None => (None, 0),
    };
    let truth = rasterize(&exp.phantom, &exp.geometry, cfg.evaluation.resolution)?;
    write_image_bundle(&truth, &exp.material_names, &truth_dir(out))?;
    Ok(SimulateOutput { clean, noisy, clamped })
}

/// The sinogram training consumes: the noisy copy when noise is configured.
pub fn load_training_sinogram(exp: &Experiment) -> Result<Sinogram> {
    let out = &exp.config.output_dir;
    let dir = if exp.config.noise.is_some() { noisy_dir(out) } else { clean_dir(out) };
    let sino = read_sinogram(&dir, SINO_STEM)?;
    check_sinogram(exp, &sino)?;
    Ok(sino)
}

/// Refuses sinograms whose sidecars disagree with the configuration.
pub fn check_sinogram(exp: &Experiment, sino: &Sinogram) -> Result<()> {
    if sino.geometry != exp.geometry {
        return Err(Error::Mismatch("sinogram geometry differs from the configured geometry".into()));
    }
    if sino.n_spectra() != exp.spectra.len() {
        return Err(Error::Mismatch(format!(
            "sinogram has {} spectra, configuration {}",
            sino.n_spectra(),
            exp.spectra.len()
        )));
    }
    for (s, t) in sino.spectra.iter().zip(&exp.spectra) {
        if s.label != t.label {
            return Err(Error::Mismatch(format!("sinogram spectrum {:?} where {:?} is configured", s.label, t.label)));
        }
    }
    match (&exp.config.noise, sino.spectra.first().and_then(|s| s.i0)) {
        (Some(n), Some(i0)) if n.i0 == i0 => Ok(()),
        (None, None) => Ok(()),
        _ => Err(Error::Mismatch("sinogram noise level differs from the configured noise block".into())),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub wall_seconds: f64,
    pub n_rays: usize,
    pub arch_hash: String,
}

/// Trains the configured network on the simulated data and writes the model directory.
pub fn cmd_train(exp: &Experiment) -> Result<(NeuralField<f64>, TrainSummary)> {
    let cfg = &exp.config;
    let sino = load_training_sinogram(exp)?;
    write_config_echo(exp)?;
    let dir = model_dir(&cfg.output_dir);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let sink = CheckpointSink { dir: Some(dir.clone()) };
    let outcome = train(&sino, &exp.spectra, &exp.materials, exp.config.network(), &cfg.train, &sink)?;
    save_checkpoint(&outcome.field, &dir.join("final.ckpt"))?;
    write_training_log(&outcome.log, &dir.join("train_log.csv"))?;
    let summary = TrainSummary {
        epochs: outcome.log.len(),
        initial_loss: outcome.log.first().map(|r| r.mean_loss),
        final_loss: outcome.log.last().map(|r| r.mean_loss),
        wall_seconds: outcome.wall_seconds,
        n_rays: sino.total_rays(),
        arch_hash: outcome.field.spec().arch_hash(),
    };
    write_json(&summary, &dir.join("summary.json"))?;
    Ok((outcome.field, summary))
}

/// Samples a field on an `n x n` grid over its field of view and writes the images
/// plus a row-profile CSV for every requested row.
pub fn extract_to_dir(field: &NeuralField<f64>, n: usize, names: &[String], rows: &[usize], dir: &Path) -> Result<DensityImage> {
    if names.len() != field.n_materials() {
        return Err(Error::Config(format!("{} material names for a {}-channel field", names.len(), field.n_materials())));
    }
    let img = extract_image_extent(field, field.fov_radius(), n)?;
    write_image_bundle(&img, names, dir)?;
    for &row in rows {
        let profiles = names
            .iter()
            .zip(&img.channels)
            .map(|(name, ch)| Ok((name.clone(), row_profile(ch, n, row)?)))
            .collect::<Result<Vec<_>>>()?;
        let cols: Vec<(&str, &[f64])> = profiles.iter().map(|(a, b)| (a.as_str(), b.as_slice())).collect();
        write_profiles_csv(&dir.join(format!("profile_row{row}.csv")), &cols)?;
    }
    Ok(img)
}

pub fn cmd_extract(checkpoint: &Path, n: usize, names: &[String], rows: &[usize], dir: &Path) -> Result<DensityImage> {
    let field: NeuralField<f64> = load_checkpoint(checkpoint, None)?;
    extract_to_dir(&field, n, names, rows, dir)
}

/// Profile row at resolution `n` matching row `row` of a `base`-row image.
pub fn scale_row(row: usize, base: usize, n: usize) -> usize {
    if n == base {
        row
    } else {
        (((row as f64 + 0.5) * n as f64 / base as f64) as usize).min(n - 1)
    }
}

/// Compares a reconstruction against ground truth and writes `report.csv` plus
/// truth/reconstruction profile CSVs into `out`. A ground truth of different size
/// is bilinearly resampled when `resample` is set and rejected otherwise; `rows`
/// refer to the reconstruction grid.
pub fn cmd_evaluate(recon: &Path, truth: &Path, rows: &[usize], resample: bool, out: &Path) -> Result<MetricReport> {
    let (img, names) = read_image(&image_sidecar(recon))?;
    let (mut reference, ref_names) = read_image(&image_sidecar(truth))?;
    if names != ref_names {
        return Err(Error::Mismatch(format!("reconstruction materials {names:?} vs ground truth {ref_names:?}")));
    }
    if reference.n != img.n {
        if !resample {
            return Err(Error::Mismatch(format!(
                "reconstruction is {0} x {0} but ground truth is {1} x {1}; pass the resample option to interpolate",
                img.n, reference.n
            )));
        }
        reference = bilinear_resample(&reference, img.n)?;
    }
    let report = evaluate(&img, &reference, &names)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    report.write_csv(&out.join("report.csv"))?;
    for &row in rows {
        let mut cols = Vec::new();
        for (m, name) in names.iter().enumerate() {
            cols.push((format!("{name}_recon"), row_profile(img.channel(m), img.n, row)?));
            cols.push((format!("{name}_truth"), row_profile(reference.channel(m), img.n, row)?));
        }
        let view: Vec<(&str, &[f64])> = cols.iter().map(|(a, b)| (a.as_str(), b.as_slice())).collect();
        write_profiles_csv(&out.join(format!("profile_row{row}.csv")), &view)?;
    }
    Ok(report)
}

/// Accepts either an image directory or the sidecar itself.
fn image_sidecar(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(format!("{IMAGE_STEM}.json"))
    } else {
        path.to_path_buf()
    }
}

/// `psnr_db` of identical images serializes as `null`; `psnr_infinite` carries the flag.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub scenario: Scenario,
    pub train: TrainSummary,
    pub clamped_measurements: usize,
    pub reports: Vec<MetricReport>,
}

/// Simulate, train, extract at every configured resolution and evaluate.
pub fn cmd_run_all(exp: &Experiment) -> Result<RunSummary> {
    let cfg = &exp.config;
    let out = &cfg.output_dir;
    let sim = cmd_simulate(exp)?;
    let (field, train_summary) = cmd_train(exp)?;
    let base = cfg.evaluation.resolution;
    let truth = truth_dir(out);
    let mut reports = Vec::new();
    for factor in std::iter::once(1).chain(cfg.evaluation.highres_factors.iter().copied()) {
        let n = base * factor;
        let rows: Vec<usize> = cfg.evaluation.rows.iter().map(|r| scale_row(*r, base, n)).collect();
        extract_to_dir(&field, n, &exp.material_names, &rows, &recon_dir(out, n))?;
        let report = cmd_evaluate(&recon_dir(out, n), &truth, &rows, factor != 1, &eval_dir(out, n))?;
        log::info!("evaluation at {n} x {n}:\n{report}");
        reports.push(report);
    }
    let summary = RunSummary {
        scenario: cfg.scenario,
        train: train_summary,
        clamped_measurements: sim.clamped,
        reports,
    };
    write_json(&summary, &out.join("summary.json"))?;
    Ok(summary)
}
