//! Fitting a neural field to measured polychromatic projections.
//!
//! Each epoch visits every ray of every spectrum once in a seeded random
//! order. A batch is split into fixed chunks of rays; each chunk runs one
//! batched forward/backward pass and the chunk gradients are summed in chunk
//! order, so results do not depend on the thread count. The loss is the mean
//! absolute projection residual and parameters are updated with Adam.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::field::{save_checkpoint, FieldSpec, ForwardCache, GradientBundle, NeuralField, Real, Workspace};
use crate::geometry::{Ray, SamplePlan, SamplingRule, ScanGeometry, Vec3};
use crate::projector::{Sinogram, SpectralModel};
use crate::spectra::{MaterialTable, SpectrumTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub rays_per_batch: usize,
    /// Sampling step along rays during training (mm).
    pub step_mm: f64,
    pub sampling: SamplingRule,
    pub learning_rate: f64,
    /// Learning rate of the last epoch relative to the first; the rate decays
    /// geometrically in between (1: constant).
    pub lr_final_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub seed: u64,
    pub precision: Precision,
    /// Ordered gradient reduction; off lets rayon merge chunks in any order.
    pub deterministic: bool,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    /// Upper bound on sample points per batched network call.
    pub points_per_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1200,
            rays_per_batch: 1024,
            step_mm: 0.2581,
            sampling: SamplingRule::Midpoint,
            learning_rate: 1e-3,
            lr_final_ratio: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            seed: 0,
            precision: Precision::F32,
            deterministic: true,
            checkpoint_every: 0,
            points_per_chunk: 2048,
        }
    }
}

impl TrainConfig {
    /// `epochs = 0` is allowed and leaves the initialization untouched.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.rays_per_batch == 0 {
            return bad("rays_per_batch must be at least 1".into());
        }
        if !(self.step_mm.is_finite() && self.step_mm > 0.0) {
            return bad(format!("step_mm must be positive, got {}", self.step_mm));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.lr_final_ratio.is_finite() && self.lr_final_ratio > 0.0 && self.lr_final_ratio <= 1.0) {
            return bad(format!("lr_final_ratio must lie in (0, 1], got {}", self.lr_final_ratio));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps_adam.is_finite() && self.eps_adam > 0.0) {
            return bad(format!("eps_adam must be positive, got {}", self.eps_adam));
        }
        if self.points_per_chunk == 0 {
            return bad("points_per_chunk must be at least 1".into());
        }
        Ok(())
    }

    /// Learning rate used throughout epoch `epoch` (1-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 || self.lr_final_ratio == 1.0 {
            return self.learning_rate;
        }
        let frac = (epoch.saturating_sub(1)) as f64 / (self.epochs - 1) as f64;
        self.learning_rate * self.lr_final_ratio.powf(frac.min(1.0))
    }
}

/// One measured ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayRecord {
    pub k: usize,
    pub angle_index: usize,
    pub angle: f64,
    pub det: usize,
    pub p: f64,
}

/// All rays of a sinogram, spectrum-major then angle then detector.
pub fn records_from_sinogram(sino: &Sinogram) -> Result<Vec<RayRecord>> {
    let geom = &sino.geometry;
    if sino.spectra.len() != geom.n_spectra() {
        return Err(Error::Mismatch(format!(
            "{} sinogram blocks for {} angle sets",
            sino.spectra.len(),
            geom.n_spectra()
        )));
    }
    let mut out = Vec::with_capacity(sino.total_rays());
    for (k, (s, angles)) in sino.spectra.iter().zip(geom.angle_sets()).enumerate() {
        if s.n_angles != angles.len() || s.n_det != geom.n_det() || s.data.len() != s.n_angles * s.n_det {
            return Err(Error::Mismatch(format!("sinogram block {k} does not match its geometry")));
        }
        for (a, &angle) in angles.iter().enumerate() {
            for det in 0..s.n_det {
                let p = s.get(a, det);
                if !p.is_finite() {
                    return Err(invalid(format!("non-finite projection at spectrum {k}, angle {a}, detector {det}")));
                }
                out.push(RayRecord { k, angle_index: a, angle, det, p });
            }
        }
    }
    Ok(out)
}

/// Geometry, spectral model and sampling plan used to predict projections.
#[derive(Debug, Clone)]
pub struct ForwardModel {
    pub geometry: ScanGeometry,
    pub spectral: SpectralModel,
    pub plan: SamplePlan,
}

impl ForwardModel {
    pub fn new(
        geometry: &ScanGeometry,
        spectra: &[SpectrumTable],
        materials: &[MaterialTable],
        step_mm: f64,
        rule: SamplingRule,
    ) -> Result<Self> {
        if spectra.len() != geometry.n_spectra() {
            return Err(Error::Mismatch(format!(
                "{} spectra but {} angle sets",
                spectra.len(),
                geometry.n_spectra()
            )));
        }
        Ok(ForwardModel {
            geometry: geometry.clone(),
            spectral: SpectralModel::new(spectra, materials)?,
            plan: geometry.sample_plan(step_mm, rule)?,
        })
    }

    pub fn ray(&self, rec: &RayRecord) -> Result<Ray> {
        self.geometry.ray_for(rec.angle, rec.det)
    }

    fn check(&self, n_materials: usize, rec: &RayRecord) -> Result<()> {
        if n_materials != self.spectral.n_materials() {
            return Err(Error::Shape(format!(
                "field has {n_materials} channels, spectral model {}",
                self.spectral.n_materials()
            )));
        }
        if rec.k >= self.spectral.n_spectra() {
            return Err(invalid(format!("ray refers to spectrum {} of {}", rec.k, self.spectral.n_spectra())));
        }
        Ok(())
    }

    fn push_points(&self, rec: &RayRecord, out: &mut Vec<Vec3>) -> Result<()> {
        let ray = self.ray(rec)?;
        out.extend(self.plan.points(&ray));
        Ok(())
    }

    /// Appends the encoded sample points of `rec`'s ray; `offset` overrides the
    /// in-cell position of the plan's rule.
    fn push_features<T: Real>(
        &self,
        field: &NeuralField<T>,
        rec: &RayRecord,
        offset: Option<f64>,
        out: &mut Vec<T>,
    ) -> Result<()> {
        let ray = self.ray(rec)?;
        let d = ray.direction;
        let h = self.plan.step;
        let t0 = offset.map_or(self.plan.t(0), |o| self.plan.t_at(0, o));
        field.encode_line(&ray.at(t0), &[d[0] * h, d[1] * h, d[2] * h], self.plan.n_points, out);
        Ok(())
    }
}

/// What [`grad_projection`] needs from [`predict_projection`].
#[derive(Debug, Clone)]
pub struct ProjectionCache<T> {
    pub points: Vec<Vec3>,
    /// Point-major densities.
    pub densities: Vec<f64>,
    pub line_integrals: Vec<f64>,
    /// `dp/dg_m`.
    pub dp_dg: Vec<f64>,
    pub dt_cm: f64,
    pub forward: ForwardCache<T>,
}

pub fn predict_projection<T: Real>(
    field: &NeuralField<T>,
    rec: &RayRecord,
    model: &ForwardModel,
) -> Result<(f64, ProjectionCache<T>)> {
    let m = field.n_materials();
    model.check(m, rec)?;
    let mut points = Vec::with_capacity(model.plan.n_points);
    model.push_points(rec, &mut points)?;
    let mut features = Vec::new();
    model.push_features(field, rec, None, &mut features)?;
    let forward = field.forward_features(features, points.len())?;
    let densities: Vec<f64> = forward.output().iter().map(|v| v.as_f64()).collect();
    let dt_cm = model.plan.step_cm();
    let mut g = vec![0.0; m];
    for row in densities.chunks_exact(m) {
        g.iter_mut().zip(row).for_each(|(a, v)| *a += v);
    }
    g.iter_mut().for_each(|x| *x *= dt_cm);
    let mut dp_dg = vec![0.0; m];
    let p = model.spectral.project_with_grad(rec.k, &g, &mut dp_dg)?;
    Ok((p, ProjectionCache { points, densities, line_integrals: g, dp_dg, dt_cm, forward }))
}

/// `dp/df_m(x_i)` for every sample point, point-major.
pub fn grad_projection<T>(cache: &ProjectionCache<T>) -> Vec<f64> {
    let per_point: Vec<f64> = cache.dp_dg.iter().map(|d| d * cache.dt_cm).collect();
    per_point.iter().copied().cycle().take(cache.points.len() * per_point.len()).collect()
}

/// Mean absolute difference.
pub fn loss(predicted: &[f64], measured: &[f64]) -> Result<f64> {
    if predicted.is_empty() || predicted.len() != measured.len() {
        return Err(invalid(format!(
            "loss needs equal non-empty batches, got {} and {}",
            predicted.len(),
            measured.len()
        )));
    }
    let total: f64 = predicted.iter().zip(measured).map(|(a, b)| (a - b).abs()).sum();
    Ok(total / predicted.len() as f64)
}

/// Subgradient of `|r|` with 0 at `r = 0`.
fn l1_slope(r: f64) -> f64 {
    if r > 0.0 {
        1.0
    } else if r < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Sum of absolute residuals of `recs`; adds `scale * d(sum |r|)/dTheta` into `grads`.
#[allow(clippy::too_many_arguments)]
fn chunk_loss_grad<T: Real>(
    field: &NeuralField<T>,
    model: &ForwardModel,
    recs: &[RayRecord],
    offsets: Option<&[f64]>,
    scale: f64,
    grads: &mut GradientBundle<T>,
    ws: &mut Workspace<T>,
) -> Result<f64> {
    let m = field.n_materials();
    let n = model.plan.n_points;
    let mut features = Vec::with_capacity(recs.len() * n * field.spec().encoding.width());
    for (i, rec) in recs.iter().enumerate() {
        model.check(m, rec)?;
        model.push_features(field, rec, offsets.map(|o| o[i]), &mut features)?;
    }
    let cache = field.forward_features(features, recs.len() * n)?;
    let out = cache.output();
    let dt_cm = model.plan.step_cm();
    let mut upstream = vec![T::zero(); out.len()];
    let mut g = vec![0.0; m];
    let mut dp_dg = vec![0.0; m];
    let mut abs_sum = 0.0;
    for (r, rec) in recs.iter().enumerate() {
        let rows = &out[r * n * m..(r + 1) * n * m];
        g.fill(0.0);
        for row in rows.chunks_exact(m) {
            g.iter_mut().zip(row).for_each(|(a, v)| *a += v.as_f64());
        }
        g.iter_mut().for_each(|x| *x *= dt_cm);
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!("non-finite line integral on ray {rec:?}")));
        }
        let p = model.spectral.project_unchecked(rec.k, &g, Some(&mut dp_dg));
        let residual = p - rec.p;
        abs_sum += residual.abs();
        let s = l1_slope(residual) * scale * dt_cm;
        let up: Vec<T> = dp_dg.iter().map(|d| T::from_f64(s * d)).collect();
        for row in upstream[r * n * m..(r + 1) * n * m].chunks_exact_mut(m) {
            row.copy_from_slice(&up);
        }
    }
    field.mlp().backward_accumulate(&cache, &upstream, grads, ws)?;
    Ok(abs_sum)
}

/// Mean absolute residual over `recs` and its gradient with respect to every parameter.
pub fn loss_and_gradient<T: Real>(
    field: &NeuralField<T>,
    model: &ForwardModel,
    recs: &[RayRecord],
    points_per_chunk: usize,
    deterministic: bool,
) -> Result<(f64, GradientBundle<T>)> {
    loss_and_gradient_at(field, model, recs, None, points_per_chunk, deterministic)
}

/// [`loss_and_gradient`] with an explicit in-cell sample offset per ray.
pub fn loss_and_gradient_at<T: Real>(
    field: &NeuralField<T>,
    model: &ForwardModel,
    recs: &[RayRecord],
    offsets: Option<&[f64]>,
    points_per_chunk: usize,
    deterministic: bool,
) -> Result<(f64, GradientBundle<T>)> {
    if recs.is_empty() {
        return Err(invalid("empty ray batch"));
    }
    if offsets.is_some_and(|o| o.len() != recs.len()) {
        return Err(Error::Shape("one sample offset per ray is required".into()));
    }
    let arch = field.spec().architecture();
    let rays_per_chunk = (points_per_chunk / model.plan.n_points).max(1);
    let scale = 1.0 / recs.len() as f64;
    let run = |(c, chunk): (usize, &[RayRecord])| -> Result<(f64, GradientBundle<T>)> {
        let mut grads = GradientBundle::zeros(&arch);
        let mut ws = Workspace::default();
        let offs = offsets.map(|o| &o[c * rays_per_chunk..c * rays_per_chunk + chunk.len()]);
        let s = chunk_loss_grad(field, model, chunk, offs, scale, &mut grads, &mut ws)?;
        Ok((s, grads))
    };
    let (abs_sum, grads) = if deterministic {
        let parts: Vec<(f64, GradientBundle<T>)> =
            recs.par_chunks(rays_per_chunk).enumerate().map(run).collect::<Result<_>>()?;
        let mut iter = parts.into_iter();
        let (mut total, mut grads) = iter.next().expect("non-empty batch");
        for (s, g) in iter {
            total += s;
            grads.add_assign(&g);
        }
        (total, grads)
    } else {
        recs.par_chunks(rays_per_chunk).enumerate().map(run).try_reduce(
            || (0.0, GradientBundle::zeros(&arch)),
            |(s1, mut g1), (s2, g2)| {
                g1.add_assign(&g2);
                Ok((s1 + s2, g1))
            },
        )?
    };
    Ok((abs_sum * scale, grads))
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: GradientBundle<T>,
    pub v: GradientBundle<T>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(field: &NeuralField<T>) -> Self {
        let arch = field.spec().architecture();
        AdamState { m: GradientBundle::zeros(&arch), v: GradientBundle::zeros(&arch), step: 0 }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<T: Real>(
    field: &mut NeuralField<T>,
    grads: &GradientBundle<T>,
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    let arch = field.spec().architecture();
    if !grads.is_congruent(&arch) || !state.m.is_congruent(&arch) || !state.v.is_congruent(&arch) {
        return Err(Error::Shape("gradient or optimizer state does not match the field".into()));
    }
    if !grads.is_finite() {
        return Err(Error::Numerical(format!("non-finite gradient at optimizer step {}", state.step + 1)));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 / (1.0 - b1.powi(t));
    let c2 = 1.0 / (1.0 - b2.powi(t));
    let (b1t, b2t) = (T::from_f64(b1), T::from_f64(b2));
    let (ob1, ob2) = (T::from_f64(1.0 - b1), T::from_f64(1.0 - b2));
    let (c1t, c2t) = (T::from_f64(c1), T::from_f64(c2));
    let (lr, eps) = (T::from_f64(cfg.learning_rate), T::from_f64(cfg.eps_adam));
    let slices = field
        .mlp_mut()
        .param_slices_mut()
        .zip(grads.slices())
        .zip(state.m.slices_mut())
        .zip(state.v.slices_mut());
    for (((theta, g), m), v) in slices {
        for i in 0..theta.len() {
            m[i] = b1t * m[i] + ob1 * g[i];
            v[i] = b2t * v[i] + ob2 * g[i] * g[i];
            let m_hat = m[i] * c1t;
            let v_hat = v[i] * c2t;
            theta[i] = theta[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub field: NeuralField<f64>,
    pub log: Vec<EpochRecord>,
    pub wall_seconds: f64,
}

/// Where intermediate and emergency checkpoints go.
#[derive(Debug, Clone, Default)]
pub struct CheckpointSink {
    pub dir: Option<PathBuf>,
}

impl CheckpointSink {
    fn save<T: Real>(&self, field: &NeuralField<T>, name: &str) -> Result<Option<PathBuf>> {
        match &self.dir {
            None => Ok(None),
            Some(dir) => {
                let path = dir.join(name);
                save_checkpoint(field, &path)?;
                Ok(Some(path))
            }
        }
    }
}

/// Trains a freshly initialized field on `sino`.
pub fn train(
    sino: &Sinogram,
    spectra: &[SpectrumTable],
    materials: &[MaterialTable],
    spec: FieldSpec,
    cfg: &TrainConfig,
    sink: &CheckpointSink,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let field = NeuralField::init(spec, sino.geometry.fov_radius(), cfg.seed)?;
    match cfg.precision {
        Precision::F32 => train_field::<f32>(field.cast(), sino, spectra, materials, cfg, sink),
        Precision::F64 => train_field::<f64>(field, sino, spectra, materials, cfg, sink),
    }
}

/// Continues training `field` for `cfg.epochs` epochs.
pub fn train_field<T: Real>(
    mut field: NeuralField<T>,
    sino: &Sinogram,
    spectra: &[SpectrumTable],
    materials: &[MaterialTable],
    cfg: &TrainConfig,
    sink: &CheckpointSink,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = ForwardModel::new(&sino.geometry, spectra, materials, cfg.step_mm, cfg.sampling)?;
    if field.n_materials() != materials.len() {
        return Err(Error::Shape(format!(
            "field has {} channels for {} materials",
            field.n_materials(),
            materials.len()
        )));
    }
    let records = records_from_sinogram(sino)?;
    if records.is_empty() {
        return Err(invalid("sinogram holds no rays"));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut adam = AdamState::new(&field);
    let mut log = Vec::with_capacity(cfg.epochs);
    let start = Instant::now();
    let mut batch = Vec::with_capacity(cfg.rays_per_batch);
    let mut step_cfg = cfg.clone();
    let mut offsets = Vec::new();
    for epoch in 1..=cfg.epochs {
        step_cfg.learning_rate = cfg.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        let mut abs_sum = 0.0;
        for idx in order.chunks(cfg.rays_per_batch) {
            batch.clear();
            batch.extend(idx.iter().map(|&i| records[i]));
            let offs = (cfg.sampling == SamplingRule::Jittered).then(|| {
                offsets.clear();
                offsets.extend((0..batch.len()).map(|_| rng.gen::<f64>()));
                offsets.as_slice()
            });
            let step = loss_and_gradient_at(&field, &model, &batch, offs, cfg.points_per_chunk, cfg.deterministic)
                .and_then(|(l, g)| {
                    if l.is_finite() {
                        Ok((l, g))
                    } else {
                        Err(Error::Numerical(format!("loss became {l}")))
                    }
                })
                .and_then(|(l, g)| {
                    let backup = field.clone();
                    adam_step(&mut field, &g, &mut adam, &step_cfg).map_err(|e| {
                        field = backup;
                        e
                    })?;
                    Ok(l)
                });
            match step {
                Ok(l) => abs_sum += l * batch.len() as f64,
                Err(Error::Numerical(msg)) => {
                    let saved = sink.save(&field, "last_good.ckpt")?;
                    let note = saved.map(|p| format!("; last good parameters in {}", p.display())).unwrap_or_default();
                    return Err(Error::Numerical(format!("epoch {epoch}: {msg}{note}")));
                }
                Err(e) => return Err(e),
            }
        }
        let rec = EpochRecord {
            epoch,
            mean_loss: abs_sum / records.len() as f64,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        log::debug!("epoch {epoch}: loss {:.6e} ({:.1} s)", rec.mean_loss, rec.wall_seconds);
        if epoch % 50 == 0 || epoch == cfg.epochs {
            log::info!("epoch {epoch}/{}: loss {:.6e} ({:.1} s)", cfg.epochs, rec.mean_loss, rec.wall_seconds);
        }
        log.push(rec);
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
            sink.save(&field, &format!("epoch_{epoch:05}.ckpt"))?;
        }
    }
    Ok(TrainOutcome { field: field.cast(), log, wall_seconds: start.elapsed().as_secs_f64() })
}

/// `epoch,mean_loss,wall_seconds` CSV.
pub fn write_training_log(log: &[EpochRecord], path: &Path) -> Result<()> {
    let io = |e: std::io::Error| Error::io(path, e);
    let mut w = csv::Writer::from_path(path).map_err(|e| io(e.into()))?;
    for rec in log {
        w.serialize(rec).map_err(|e| io(e.into()))?;
    }
    w.flush().map_err(io)
}

/// Human-readable one-line summary of a finished run.
pub fn write_summary(outcome: &TrainOutcome, out: &mut dyn std::io::Write) -> std::io::Result<()> {
    let first = outcome.log.first().map(|r| r.mean_loss).unwrap_or(f64::NAN);
    let last = outcome.log.last().map(|r| r.mean_loss).unwrap_or(f64::NAN);
    writeln!(
        out,
        "{} epochs, loss {first:.4e} -> {last:.4e}, {:.1} s",
        outcome.log.len(),
        outcome.wall_seconds
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::EncodingConfig;
    use crate::phantom::uniform_disk;
    use crate::projector::{line_integrals, simulate_sinogram, MaterialField, ProjectionSettings};
    use crate::spectra::{normalize_spectrum, synth_bremsstrahlung, EnergyGrid};
    use rand::Rng;

    fn grid() -> EnergyGrid {
        EnergyGrid::new(20.0, 120.0, 5.0).unwrap()
    }

    fn setup(n_angles: usize, n_det: usize) -> (ScanGeometry, Vec<SpectrumTable>, Vec<MaterialTable>) {
        let angles = |off: f64| (0..n_angles).map(|i| (i as f64 + off) * std::f64::consts::TAU / n_angles as f64).collect();
        let geom = ScanGeometry::new(1000.0, 1536.0, n_det, 409.6 / n_det as f64, vec![angles(0.0), angles(0.5)]).unwrap();
        let g = grid();
        let spectra = vec![
            normalize_spectrum(&synth_bremsstrahlung(80.0, None, g).unwrap(), g, "80").unwrap(),
            normalize_spectrum(&synth_bremsstrahlung(120.0, None, g).unwrap(), g, "120").unwrap(),
        ];
        let materials = vec![MaterialTable::builtin("water", g).unwrap(), MaterialTable::builtin("bone", g).unwrap()];
        (geom, spectra, materials)
    }

    fn small_spec() -> FieldSpec {
        FieldSpec {
            encoding: EncodingConfig { d_freq: 3, include_raw: false, n_coords: 2 },
            hidden: vec![12, 10],
            skip_at: vec![1],
            n_materials: 2,
        }
    }

    #[test]
    fn loss_examples() {
        assert_eq!(loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((loss(&[1.5, 2.5], &[1.0, 2.0]).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(loss(&[1.0, 2.0], &[0.0, 4.0]).unwrap(), 1.5);
        assert!(loss(&[], &[]).is_err());
        assert!(loss(&[1.0], &[1.0, 2.0]).is_err());
        assert_eq!(l1_slope(0.0), 0.0);
    }

    #[test]
    fn zero_field_predicts_zero_and_constant_field_matches_projector() {
        let (geom, spectra, materials) = setup(4, 8);
        let model = ForwardModel::new(&geom, &spectra, &materials, 2.0, SamplingRule::Midpoint).unwrap();
        let rec = RayRecord { k: 1, angle_index: 1, angle: geom.angle_sets()[1][1], det: 3, p: 0.0 };

        let zero = NeuralField::<f64>::zeros(small_spec(), geom.fov_radius()).unwrap();
        assert!(predict_projection(&zero, &rec, &model).unwrap().0.abs() < 1e-12);

        // output bias alone sets a constant density field
        let mut c = zero.clone();
        let last = c.mlp_mut().layers_mut().last_mut().unwrap();
        last.bias.copy_from_slice(&[0.7, 0.2]);
        let (p, _) = predict_projection(&c, &rec, &model).unwrap();
        let g = line_integrals(&c, &model.ray(&rec).unwrap(), &model.plan).unwrap();
        let direct = model.spectral.project(1, &g).unwrap();
        assert!((p - direct).abs() < 1e-12);
        let g_expected = model.plan.n_points as f64 * model.plan.step_cm();
        assert!((g[0] - 0.7 * g_expected).abs() < 1e-12);
    }

    #[test]
    fn prediction_matches_pipeline_recomposition() {
        let (geom, spectra, materials) = setup(6, 16);
        let model = ForwardModel::new(&geom, &spectra, &materials, 1.7, SamplingRule::Midpoint).unwrap();
        let field = NeuralField::<f64>::init(small_spec(), geom.fov_radius(), 5).unwrap();
        let rec = RayRecord { k: 0, angle_index: 2, angle: geom.angle_sets()[0][2], det: 11, p: 0.0 };
        let (p, cache) = predict_projection(&field, &rec, &model).unwrap();

        // rays, sample points, field values and spectral sum assembled by hand
        let ray = geom.ray_for(rec.angle, rec.det).unwrap();
        let plan = geom.sample_plan(1.7, SamplingRule::Midpoint).unwrap();
        let mut g = [0.0; 2];
        for i in 0..plan.n_points {
            let t = geom.sod() - geom.fov_radius() + (i as f64 + 0.5) * 1.7;
            let v = field.eval(&[ray.at(t)]).unwrap();
            g[0] += v[0] * 0.17;
            g[1] += v[1] * 0.17;
        }
        let s = &spectra[0];
        let mut total = 0.0;
        for (bin, w) in s.bin_weights().iter().enumerate() {
            total += w * (-(materials[0].theta[bin] * g[0] + materials[1].theta[bin] * g[1])).exp();
        }
        assert!((p - -total.ln()).abs() < 1e-10, "{p} vs {}", -total.ln());
        assert_eq!(cache.points.len(), plan.n_points);
    }

    #[test]
    fn projection_gradient_is_constant_along_ray() {
        let (geom, spectra, materials) = setup(4, 8);
        let model = ForwardModel::new(&geom, &spectra, &materials, 3.0, SamplingRule::Midpoint).unwrap();
        let field = NeuralField::<f64>::init(small_spec(), geom.fov_radius(), 2).unwrap();
        let rec = RayRecord { k: 0, angle_index: 0, angle: 0.0, det: 4, p: 0.0 };
        let (_, cache) = predict_projection(&field, &rec, &model).unwrap();
        let grad = grad_projection(&cache);
        assert_eq!(grad.len(), cache.points.len() * 2);
        for row in grad.chunks_exact(2) {
            assert_eq!(row, &grad[..2]);
        }
        // bounded by the attenuation range times the step
        for (m, mat) in materials.iter().enumerate() {
            let lo = mat.theta.iter().cloned().fold(f64::INFINITY, f64::min) * cache.dt_cm;
            let hi = mat.theta.iter().cloned().fold(0.0, f64::max) * cache.dt_cm;
            assert!(grad[m] >= lo && grad[m] <= hi);
        }
    }

    fn perturbed(field: &NeuralField<f64>, idx: usize, h: f64) -> NeuralField<f64> {
        let mut f = field.clone();
        let mut seen = 0;
        for s in f.mlp_mut().param_slices_mut() {
            if idx < seen + s.len() {
                s[idx - seen] += h;
                break;
            }
            seen += s.len();
        }
        f
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let (geom, spectra, materials) = setup(6, 16);
        let model = ForwardModel::new(&geom, &spectra, &materials, 2.5, SamplingRule::Midpoint).unwrap();
        let field = NeuralField::<f64>::init(small_spec(), geom.fov_radius(), 17).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let recs: Vec<RayRecord> = (0..4)
            .map(|i| {
                let k = i % 2;
                let a = rng.gen_range(0..6);
                RayRecord { k, angle_index: a, angle: geom.angle_sets()[k][a], det: rng.gen_range(0..16), p: rng.gen_range(-2.0..2.0) }
            })
            .collect();
        let (_, grads) = loss_and_gradient(&field, &model, &recs, 40, true).unwrap();
        let analytic = grads.flatten();
        let f = |fd: &NeuralField<f64>| loss_and_gradient(fd, &model, &recs, 1 << 20, true).unwrap().0;
        let h = 1e-6;
        let numeric: Vec<f64> =
            (0..analytic.len()).map(|i| (f(&perturbed(&field, i, h)) - f(&perturbed(&field, i, -h))) / (2.0 * h)).collect();
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
        assert!(norm > 0.0);
        assert!(diff / norm < 1e-5, "relative error {}", diff / norm);
    }

    #[test]
    fn chunking_and_reduction_mode_do_not_change_the_gradient_much() {
        let (geom, spectra, materials) = setup(6, 16);
        let model = ForwardModel::new(&geom, &spectra, &materials, 2.5, SamplingRule::Midpoint).unwrap();
        let field = NeuralField::<f64>::init(small_spec(), geom.fov_radius(), 3).unwrap();
        let recs: Vec<RayRecord> = (0..20)
            .map(|i| RayRecord { k: i % 2, angle_index: i % 6, angle: geom.angle_sets()[i % 2][i % 6], det: i % 16, p: 1.0 })
            .collect();
        let (l1, g1) = loss_and_gradient(&field, &model, &recs, 1, true).unwrap();
        let (l2, g2) = loss_and_gradient(&field, &model, &recs, 1 << 20, false).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.flatten().iter().zip(g2.flatten()) {
            assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0), "{a} vs {b}");
        }
        let (l3, g3) = loss_and_gradient(&field, &model, &recs, 1, true).unwrap();
        assert_eq!((l1, g1), (l3, g3));
    }

    fn scalar_field(theta: f64) -> NeuralField<f64> {
        let spec = FieldSpec {
            encoding: EncodingConfig { d_freq: 1, include_raw: false, n_coords: 2 },
            hidden: vec![],
            skip_at: vec![],
            n_materials: 1,
        };
        let mut f = NeuralField::<f64>::zeros(spec, 1.0).unwrap();
        f.mlp_mut().layers_mut()[0].bias[0] = theta;
        f
    }

    fn only_bias_grad(field: &NeuralField<f64>, g: f64) -> GradientBundle<f64> {
        let mut grads = GradientBundle::zeros(&field.spec().architecture());
        grads.layers[0].bias[0] = g;
        grads
    }

    #[test]
    fn adam_zero_gradient_and_first_step() {
        let cfg = TrainConfig { learning_rate: 0.01, ..TrainConfig::default() };
        let mut f = scalar_field(0.3);
        let mut st = AdamState::new(&f);
        let before = f.mlp().flatten();
        let g = only_bias_grad(&f, 0.0);
        adam_step(&mut f, &g, &mut st, &cfg).unwrap();
        assert_eq!(f.mlp().flatten(), before);
        assert_eq!(st.step, 1);

        let mut f = scalar_field(0.3);
        let mut st = AdamState::new(&f);
        let g = only_bias_grad(&f, -4.0);
        adam_step(&mut f, &g, &mut st, &cfg).unwrap();
        assert!((f.mlp().layers()[0].bias[0] - 0.31).abs() < 1e-9);

        let nan = only_bias_grad(&f, f64::NAN);
        assert!(matches!(adam_step(&mut f, &nan, &mut st, &cfg), Err(Error::Numerical(_))));
    }

    #[test]
    fn adam_matches_reference_trace_on_quadratic() {
        // minimize 0.5 * a * (x - c)^2 from x = 2
        let (a, c) = (3.0, -1.0);
        let cfg = TrainConfig { learning_rate: 0.05, beta1: 0.8, beta2: 0.95, eps_adam: 1e-6, ..TrainConfig::default() };
        let mut f = scalar_field(2.0);
        let mut st = AdamState::new(&f);

        let (mut x, mut m, mut v) = (2.0f64, 0.0f64, 0.0f64);
        for t in 1..=10 {
            let g = a * (f.mlp().layers()[0].bias[0] - c);
            let gb = only_bias_grad(&f, g);
            adam_step(&mut f, &gb, &mut st, &cfg).unwrap();

            let gr = a * (x - c);
            m = 0.8 * m + 0.2 * gr;
            v = 0.95 * v + 0.05 * gr * gr;
            let mh = m / (1.0 - 0.8f64.powi(t));
            let vh = v / (1.0 - 0.95f64.powi(t));
            x -= 0.05 * mh / (vh.sqrt() + 1e-6);
            assert!((f.mlp().layers()[0].bias[0] - x).abs() < 1e-12, "step {t}");
        }
        assert!(x < 2.0);
    }

    fn smoke_problem() -> (Sinogram, Vec<SpectrumTable>, Vec<MaterialTable>) {
        let (geom, spectra, materials) = setup(36, 32);
        let ph = uniform_disk(60.0, 1.0, 0, 2).unwrap();
        let sino = simulate_sinogram(
            &ph,
            &geom,
            &spectra,
            &materials,
            ProjectionSettings { step_mm: 2.0, rule: SamplingRule::Midpoint },
        )
        .unwrap();
        (sino, spectra, materials)
    }

    fn smoke_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            rays_per_batch: 128,
            step_mm: 8.0,
            learning_rate: 5e-3,
            seed: 9,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_the_initialization() {
        let (sino, spectra, materials) = smoke_problem();
        let out = train(&sino, &spectra, &materials, small_spec(), &smoke_cfg(0), &CheckpointSink::default()).unwrap();
        let init = NeuralField::<f64>::init(small_spec(), sino.geometry.fov_radius(), 9).unwrap();
        let as_f32: NeuralField<f32> = init.cast();
        assert_eq!(out.field.mlp().flatten(), as_f32.mlp().flatten());
        assert!(out.log.is_empty());
    }

    #[test]
    fn smoke_training_reduces_loss_and_is_reproducible() {
        let (sino, spectra, materials) = smoke_problem();
        let cfg = smoke_cfg(40);
        let a = train(&sino, &spectra, &materials, small_spec(), &cfg, &CheckpointSink::default()).unwrap();
        let first: f64 = a.log[..10].iter().map(|r| r.mean_loss).sum();
        let second: f64 = a.log[10..20].iter().map(|r| r.mean_loss).sum();
        assert!(second < first);
        assert!(a.log.last().unwrap().mean_loss < 0.1 * a.log[0].mean_loss, "{:?}", a.log.last());
        let b = train(&sino, &spectra, &materials, small_spec(), &cfg, &CheckpointSink::default()).unwrap();
        assert_eq!(a.field.mlp().flatten(), b.field.mlp().flatten());
        let la: Vec<f64> = a.log.iter().map(|r| r.mean_loss).collect();
        let lb: Vec<f64> = b.log.iter().map(|r| r.mean_loss).collect();
        assert_eq!(la, lb);
    }

    #[test]
    fn divergence_aborts_with_checkpoint() {
        let (mut sino, spectra, materials) = smoke_problem();
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { learning_rate: 1e300, ..smoke_cfg(3) };
        sino.spectra[0].data[0] = 1e300;
        let sink = CheckpointSink { dir: Some(dir.path().to_path_buf()) };
        let err = train(&sino, &spectra, &materials, small_spec(), &TrainConfig { precision: Precision::F64, ..cfg }, &sink)
            .unwrap_err();
        assert!(matches!(err, Error::Numerical(_)), "{err}");
        assert!(dir.path().join("last_good.ckpt").exists());
    }

    #[test]
    fn half_cell_offsets_reproduce_the_midpoint_rule() {
        let (geom, spectra, materials) = setup(6, 16);
        let model = ForwardModel::new(&geom, &spectra, &materials, 2.5, SamplingRule::Jittered).unwrap();
        let field = NeuralField::<f64>::init(small_spec(), geom.fov_radius(), 3).unwrap();
        let recs: Vec<RayRecord> = (0..6)
            .map(|i| RayRecord { k: i % 2, angle_index: i, angle: geom.angle_sets()[i % 2][i], det: 2 * i + 1, p: 0.3 })
            .collect();
        let (base, g0) = loss_and_gradient(&field, &model, &recs, 40, true).unwrap();
        let (same, g1) = loss_and_gradient_at(&field, &model, &recs, Some(&[0.5; 6]), 40, true).unwrap();
        assert_eq!(base, same);
        assert_eq!(g0.flatten(), g1.flatten());
        let (moved, _) = loss_and_gradient_at(&field, &model, &recs, Some(&[0.1; 6]), 40, true).unwrap();
        assert_ne!(base, moved);
        assert!(loss_and_gradient_at(&field, &model, &recs, Some(&[0.5; 5]), 40, true).is_err());
    }

    #[test]
    fn records_cover_every_ray_once() {
        let (sino, _, _) = smoke_problem();
        let recs = records_from_sinogram(&sino).unwrap();
        assert_eq!(recs.len(), 2 * 36 * 32);
        let mut keys: Vec<(usize, usize, usize)> = recs.iter().map(|r| (r.k, r.angle_index, r.det)).collect();
        keys.dedup();
        assert_eq!(keys.len(), recs.len());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { beta2: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { rays_per_batch: 0, ..TrainConfig::default() }.validate().is_err());
        let json = r#"{"epochs": 3, "learning_rate": 0.01}"#;
        let cfg: TrainConfig = serde_json::from_str(json).unwrap();
        assert_eq!((cfg.epochs, cfg.rays_per_batch), (3, 1024));
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
        assert!(TrainConfig { lr_final_ratio: 0.0, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn learning_rate_schedule_is_geometric() {
        let cfg = TrainConfig { epochs: 5, learning_rate: 1e-2, lr_final_ratio: 1e-2, ..TrainConfig::default() };
        let rates: Vec<f64> = (1..=5).map(|e| cfg.learning_rate_at(e)).collect();
        let want = [1e-2, 10f64.powf(-2.5), 1e-3, 10f64.powf(-3.5), 1e-4];
        for (r, w) in rates.iter().zip(want) {
            assert!((r / w - 1.0).abs() < 1e-12, "{rates:?}");
        }
        let flat = TrainConfig { epochs: 5, ..TrainConfig::default() };
        assert!((1..=5).all(|e| flat.learning_rate_at(e) == flat.learning_rate));
    }
}
