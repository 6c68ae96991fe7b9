//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines come out in order. The desk
//! reconstructions dominate the runtime; their artifacts stay under the cargo
//! target tmp dir (`acceptance/`) for inspection. `NBMF_ACCEPTANCE_EPOCHS`
//! shortens the desk trainings for development runs. The exit status reflects
//! the criteria only with `NBMF_ACCEPTANCE_STRICT=1`.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nbmf::cli::presets::{preset, Scale};
use nbmf::cli::{self, ExperimentConfig, RunSummary, Scenario};
use nbmf::field::{EncodingConfig, FieldSpec, GradientBundle, NeuralField};
use nbmf::geometry::{AngleGenerator, SamplingRule, ScanGeometry};
use nbmf::metrics::{read_image, ssim};
use nbmf::phantom::{build_thorax_like_phantom, uniform_disk, Phantom};
use nbmf::projector::{add_poisson_noise, line_integrals, simulate_sinogram, ProjectionSettings, Sinogram, SpectralModel, SpectrumSinogram};
use nbmf::spectra::{normalize_spectrum, EnergyGrid, MaterialTable, SpectrumTable};
use nbmf::trainer::{adam_step, loss_and_gradient, AdamState, ForwardModel, RayRecord, TrainConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

struct Suite {
    failures: usize,
}

impl Suite {
    fn run(&mut self, id: usize, name: &str, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let o = f();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        if !o.pass {
            self.failures += 1;
        }
        println!("[{verdict}] {id:>2} {name}: {} ({:.1} s)", o.detail, start.elapsed().as_secs_f64());
    }
}

fn full_scan_geometry() -> ScanGeometry {
    let a = AngleGenerator::full(720).angles().unwrap();
    ScanGeometry::new(1000.0, 1536.0, 512, 0.8, vec![a.clone(), a]).unwrap()
}

fn grid() -> EnergyGrid {
    EnergyGrid::new(10.0, 150.0, 1.0).unwrap()
}

fn shipped_spectra() -> Vec<SpectrumTable> {
    let exp = preset(Scale::Full, Scenario::NoiseFree, "unused").build().unwrap();
    exp.spectra
}

fn criterion_1() -> Outcome {
    let r = full_scan_geometry().fov_radius();
    outcome((r - 132.16).abs() <= 0.01, format!("R = {r:.4} mm"))
}

fn criterion_2() -> Outcome {
    let g = grid();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let bin = rng.gen_range(0..g.n_bins);
        let spectrum = SpectrumTable::monochromatic(g, bin, "mono").unwrap();
        let mats: Vec<MaterialTable> = (0..2)
            .map(|m| {
                let theta: Vec<f64> = (0..g.n_bins).map(|_| rng.gen_range(0.01..10.0)).collect();
                MaterialTable::new(g, theta, format!("m{m}"), 1.0).unwrap()
            })
            .collect();
        let gs = [rng.gen_range(0.0..20.0), rng.gen_range(0.0..20.0)];
        let p = SpectralModel::new(&[spectrum], &mats).unwrap().project(0, &gs).unwrap();
        let linear = mats[0].theta[bin] * gs[0] + mats[1].theta[bin] * gs[1];
        worst = worst.max((p - linear).abs());
    }
    outcome(worst <= 1e-12, format!("max |p - sum theta g| = {worst:.2e} over 1000 draws"))
}

fn criterion_3() -> Outcome {
    let g = grid();
    let mats = vec![MaterialTable::builtin("water", g).unwrap(), MaterialTable::builtin("bone", g).unwrap()];
    let spectra = shipped_spectra();
    let model = SpectralModel::new(&spectra, &mats).unwrap();
    let worst = (0..spectra.len()).map(|k| model.project(k, &[0.0, 0.0]).unwrap().abs()).fold(0.0, f64::max);
    outcome(worst <= 1e-12, format!("max |p(0)| = {worst:.2e} over {} spectra", spectra.len()))
}

fn criterion_4() -> Outcome {
    let g = grid();
    let water = MaterialTable::builtin("water", g).unwrap();
    let bin = 50; // 60 keV
    let theta = water.theta[bin];
    let model = SpectralModel::new(&[SpectrumTable::monochromatic(g, bin, "60keV").unwrap()], &[water]).unwrap();
    let disk = uniform_disk(50.0, 1.0, 0, 1).unwrap();
    let geom = full_scan_geometry();
    let plan = geom.sample_plan(0.25, SamplingRule::Midpoint).unwrap();
    let ray = geom.ray_at_u(0.0, 0.0);
    let gs = line_integrals(&disk, &ray, &plan).unwrap();
    let p = model.project(0, &gs).unwrap();
    let want = theta * 1.0 * 10.0;
    let tol = 2.0 * 0.025 * theta * 1.0;
    outcome((p - want).abs() <= tol, format!("p = {p:.6}, exact {want:.6}, |diff| {:.2e} <= {tol:.2e}", (p - want).abs()))
}

fn fd_spec() -> FieldSpec {
    FieldSpec {
        encoding: EncodingConfig { d_freq: 3, include_raw: true, n_coords: 2 },
        hidden: vec![12, 10],
        skip_at: vec![],
        n_materials: 2,
    }
}

fn perturbed(field: &NeuralField<f64>, index: usize, h: f64) -> NeuralField<f64> {
    let mut f = field.clone();
    let mut seen = 0;
    for s in f.mlp_mut().param_slices_mut() {
        if index < seen + s.len() {
            s[index - seen] += h;
            break;
        }
        seen += s.len();
    }
    f
}

fn criterion_5() -> Outcome {
    let g = grid();
    let mats = vec![MaterialTable::builtin("water", g).unwrap(), MaterialTable::builtin("bone", g).unwrap()];
    let spectra = shipped_spectra();
    let a = AngleGenerator::full(8).angles().unwrap();
    let geom = ScanGeometry::new(1000.0, 1536.0, 16, 25.6, vec![a.clone(), a]).unwrap();
    let model = ForwardModel::new(&geom, &spectra, &mats, 3.0, SamplingRule::Midpoint).unwrap();
    let field = NeuralField::<f64>::init(fd_spec(), geom.fov_radius(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let recs: Vec<RayRecord> = (0..4)
        .map(|i| {
            let k = i % 2;
            let ai = rng.gen_range(0..8);
            RayRecord { k, angle_index: ai, angle: geom.angle_sets()[k][ai], det: rng.gen_range(0..16), p: rng.gen_range(-1.0..1.0) }
        })
        .collect();
    let (_, grads) = loss_and_gradient(&field, &model, &recs, 64, true).unwrap();
    let analytic = grads.flatten();
    let loss = |f: &NeuralField<f64>| loss_and_gradient(f, &model, &recs, 1 << 20, true).unwrap().0;
    let h = 1e-6;
    let numeric: Vec<f64> =
        (0..analytic.len()).map(|i| (loss(&perturbed(&field, i, h)) - loss(&perturbed(&field, i, -h))) / (2.0 * h)).collect();
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    let rel_net = diff / norm;

    // dp/dg of the spectral model alone
    let spectral = SpectralModel::new(&spectra, &mats).unwrap();
    let mut rel_proj: f64 = 0.0;
    for _ in 0..50 {
        let k = rng.gen_range(0..2);
        let gs = [rng.gen_range(0.0..30.0), rng.gen_range(0.0..5.0)];
        let mut grad = [0.0; 2];
        spectral.project_with_grad(k, &gs, &mut grad).unwrap();
        for m in 0..2 {
            let hm = 1e-5;
            let mut up = gs;
            let mut down = gs;
            up[m] += hm;
            down[m] -= hm;
            let fd = (spectral.project(k, &up).unwrap() - spectral.project(k, &down).unwrap()) / (2.0 * hm);
            rel_proj = rel_proj.max((fd - grad[m]).abs() / grad[m].abs());
        }
    }
    outcome(
        rel_net < 1e-5 && rel_proj < 1e-8,
        format!("end-to-end relative error {rel_net:.2e} over {} params; projection gradient {rel_proj:.2e}", analytic.len()),
    )
}

fn criterion_6() -> Outcome {
    let n = 10_000;
    let a = AngleGenerator::full(100).angles().unwrap();
    let geometry = ScanGeometry::new(1000.0, 1536.0, 100, 4.0, vec![a]).unwrap();
    let sino = Sinogram {
        geometry,
        spectra: vec![SpectrumSinogram { label: "flat".into(), n_angles: 100, n_det: 100, data: vec![0.0; n], i0: None, seed: None }],
    };
    let (noisy, _) = add_poisson_noise(&sino, 1e6, 11).unwrap();
    let d = &noisy.spectra[0].data;
    let mean = d.iter().sum::<f64>() / n as f64;
    let std = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    outcome((std / 1e-3 - 1.0).abs() <= 0.1, format!("std {std:.4e} (expected 1e-3), mean {mean:.2e}"))
}

fn work_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn desk_epochs() -> Option<usize> {
    std::env::var("NBMF_ACCEPTANCE_EPOCHS").ok().and_then(|v| v.parse().ok())
}

struct DeskRun {
    summary: RunSummary,
    dir: PathBuf,
    epochs: usize,
}

impl DeskRun {
    fn ssim(&self, factor_index: usize) -> [f64; 2] {
        let m = &self.summary.reports[factor_index].materials;
        [m[0].ssim, m[1].ssim]
    }

    fn psnr(&self) -> [f64; 2] {
        let m = &self.summary.reports[0].materials;
        [m[0].psnr_db, m[1].psnr_db]
    }

    fn describe(&self) -> String {
        let r = &self.summary.reports[0].materials;
        format!(
            "water SSIM {:.4} PSNR {:.2} dB, bone SSIM {:.4} PSNR {:.2} dB; {} epochs in {:.0} s",
            r[0].ssim, r[0].psnr_db, r[1].ssim, r[1].psnr_db, self.epochs, self.summary.train.wall_seconds
        )
    }
}

fn desk_run(scenario: Scenario, highres: bool) -> std::result::Result<DeskRun, String> {
    let dir = work_dir().join(scenario.name());
    let mut cfg: ExperimentConfig = preset(Scale::Desk, scenario, &dir);
    if highres {
        cfg.evaluation.highres_factors = vec![2, 4];
    }
    if let Some(e) = desk_epochs() {
        cfg.train.epochs = e;
    }
    let epochs = cfg.train.epochs;
    let exp = cfg.build().map_err(|e| e.to_string())?;
    let summary = cli::cmd_run_all(&exp).map_err(|e| e.to_string())?;
    Ok(DeskRun { summary, dir, epochs })
}

fn report_failure(e: String) -> Outcome {
    outcome(false, format!("run failed: {e}"))
}

fn criterion_7(run: &Option<DeskRun>) -> Outcome {
    let Some(r) = run else { return outcome(false, "noise-free run failed") };
    let (s, p) = (r.ssim(0), r.psnr());
    let pass = s.iter().all(|v| *v >= 0.95) && p.iter().all(|v| *v >= 28.0) && r.epochs >= 500;
    outcome(pass, r.describe())
}

fn criterion_8(reference: &Option<DeskRun>) -> Outcome {
    let run = match desk_run(Scenario::Sparse, false) {
        Ok(r) => r,
        Err(e) => return report_failure(e),
    };
    let s = run.ssim(0);
    let mut pass = s.iter().all(|v| *v >= 0.85);
    let mut detail = run.describe();
    match reference {
        Some(r7) => {
            let drop = [r7.ssim(0)[0] - s[0], r7.ssim(0)[1] - s[1]];
            pass &= drop.iter().all(|d| *d <= 0.10);
            detail += &format!("; SSIM drop vs noise-free {:.4} / {:.4}", drop[0], drop[1]);
        }
        None => pass = false,
    }
    outcome(pass, detail)
}

fn criterion_9() -> Outcome {
    match desk_run(Scenario::Poisson, false) {
        Ok(r) => outcome(r.ssim(0).iter().all(|v| *v >= 0.90), r.describe()),
        Err(e) => report_failure(e),
    }
}

fn criterion_10(reference: &Option<DeskRun>) -> Outcome {
    let run = match desk_run(Scenario::GeoInconsistent, false) {
        Ok(r) => r,
        Err(e) => return report_failure(e),
    };
    let Some(r7) = reference else { return outcome(false, "no noise-free reference") };
    let d = [(run.ssim(0)[0] - r7.ssim(0)[0]).abs(), (run.ssim(0)[1] - r7.ssim(0)[1]).abs()];
    outcome(
        d.iter().all(|v| *v <= 0.03),
        format!("{}; |SSIM - noise-free| {:.4} / {:.4}", run.describe(), d[0], d[1]),
    )
}

/// Fraction of the reconstructed bone-channel integral inside the true bone support.
fn bone_fraction(dir: &Path, n: usize) -> f64 {
    let (recon, _) = read_image(&cli::recon_dir(dir, n).join("image.json")).unwrap();
    let (truth, _) = read_image(&cli::truth_dir(dir).join("image.json")).unwrap();
    let total: f64 = recon.channel(1).iter().sum();
    let inside: f64 = recon.channel(1).iter().zip(truth.channel(1)).filter(|(_, t)| **t > 0.0).map(|(r, _)| r).sum();
    inside / total
}

fn criterion_11() -> Outcome {
    match desk_run(Scenario::SingleSpectrum, false) {
        Ok(r) => {
            let frac = bone_fraction(&r.dir, r.summary.reports[0].resolution);
            let pass = r.ssim(0).iter().all(|v| *v >= 0.90) && frac >= 0.8;
            outcome(pass, format!("{}; bone mass inside bone support {:.1}%", r.describe(), 100.0 * frac))
        }
        Err(e) => report_failure(e),
    }
}

fn criterion_12(run: &Option<DeskRun>) -> Outcome {
    let Some(r) = run else { return outcome(false, "noise-free run failed") };
    let (s2, s4) = (r.ssim(1), r.ssim(2));
    let drop = [s2[0] - s4[0], s2[1] - s4[1]];
    let pass = s2.iter().all(|v| *v >= 0.90) && s4.iter().all(|v| *v >= 0.85) && drop.iter().all(|d| *d <= 0.05);
    outcome(
        pass,
        format!(
            "2x SSIM {:.4} / {:.4}, 4x SSIM {:.4} / {:.4}, drop {:.4} / {:.4}",
            s2[0], s2[1], s4[0], s4[1], drop[0], drop[1]
        ),
    )
}

fn run_binary(cfg: &Path) -> std::result::Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_nbmf"))
        .args(["run-all", "-c", cfg.to_str().unwrap(), "--deterministic"])
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(String::from_utf8_lossy(&out.stderr).into_owned())
    }
}

fn criterion_13() -> Outcome {
    let base = work_dir().join("determinism");
    let mut compared = 0;
    let mut differing = Vec::new();
    for (i, run) in ["a", "b"].iter().enumerate() {
        let dir = base.join(run);
        std::fs::create_dir_all(&dir).unwrap();
        let cfg = preset(Scale::Smoke, Scenario::Poisson, "out");
        let path = dir.join("cfg.json");
        std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        if let Err(e) = run_binary(&path) {
            return outcome(false, format!("run {i} failed: {e}"));
        }
    }
    let files = [
        "model/final.ckpt",
        "sinogram/clean/sino_k0.f32",
        "sinogram/clean/sino_k1.f32",
        "sinogram/noisy/sino_k0.f32",
        "sinogram/noisy/sino_k1.f32",
        "sinogram/noisy/sino_k0.json",
        "eval_32/report.csv",
        "recon_32/image_water.f64",
        "recon_32/image_bone.f64",
        "truth/image_water.f64",
    ];
    for f in files {
        let a = std::fs::read(base.join("a/out").join(f));
        let b = std::fs::read(base.join("b/out").join(f));
        compared += 1;
        match (a, b) {
            (Ok(a), Ok(b)) if a == b => {}
            _ => differing.push(f),
        }
    }
    outcome(differing.is_empty(), format!("{compared} artifacts compared, differing: {differing:?}"))
}

/// A handful of the module properties, re-run on seeded random cases.
fn criterion_14() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut failed = Vec::new();

    // rotating the phantom by one view step shifts the sinogram by one view
    let n_views = 24;
    let a = AngleGenerator::full(n_views).angles().unwrap();
    let geom = ScanGeometry::new(1000.0, 1536.0, 32, 12.8, vec![a]).unwrap();
    let g = grid();
    let mats = vec![MaterialTable::builtin("water", g).unwrap(), MaterialTable::builtin("bone", g).unwrap()];
    let spectra = vec![shipped_spectra().remove(0)];
    let ph: Phantom = build_thorax_like_phantom(2).unwrap();
    let settings = ProjectionSettings { step_mm: 1.0, rule: SamplingRule::Midpoint };
    let base = simulate_sinogram(&ph, &geom, &spectra, &mats, settings).unwrap();
    let step = std::f64::consts::TAU / n_views as f64;
    let rotated = simulate_sinogram(&ph.rotated(step), &geom, &spectra, &mats, settings).unwrap();
    let mut worst: f64 = 0.0;
    for v in 0..n_views {
        for d in 0..32 {
            worst = worst.max((rotated.spectra[0].get((v + 1) % n_views, d) - base.spectra[0].get(v, d)).abs());
        }
    }
    if worst > 1e-9 {
        failed.push(format!("rotation equivariance off by {worst:.2e}"));
    }

    // normalizing a normalized spectrum changes nothing
    for _ in 0..20 {
        let raw: Vec<f64> = (0..g.n_bins).map(|_| rng.gen_range(0.0..5.0)).collect();
        let once = normalize_spectrum(&raw, g, "r").unwrap();
        let twice = normalize_spectrum(&once.weights, g, "r").unwrap();
        if once.weights.iter().zip(&twice.weights).any(|(x, y)| (x - y).abs() > 1e-12 * x.abs().max(1e-12)) {
            failed.push("spectrum normalization is not idempotent".into());
            break;
        }
    }

    // projections lie between the extreme monochromatic ones and grow with g
    let model = SpectralModel::new(&shipped_spectra(), &mats).unwrap();
    for _ in 0..200 {
        let k = rng.gen_range(0..2);
        let gs = [rng.gen_range(0.0..30.0), rng.gen_range(0.0..5.0)];
        let p = model.project(k, &gs).unwrap();
        let w = &shipped_spectra()[k];
        let a_e: Vec<f64> = (0..g.n_bins)
            .filter(|&j| w.weights[j] > 0.0)
            .map(|j| mats[0].theta[j] * gs[0] + mats[1].theta[j] * gs[1])
            .collect();
        let (lo, hi) = a_e.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(*v), h.max(*v)));
        let more = model.project(k, &[gs[0] + 0.5, gs[1]]).unwrap();
        if p < lo - 1e-9 || p > hi + 1e-9 || more <= p {
            failed.push(format!("projection bounds/monotonicity at g = {gs:?}"));
            break;
        }
    }

    // SSIM is symmetric and 1 on identical images
    for _ in 0..10 {
        let n = 24;
        let x: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| v + rng.gen_range(-0.2..0.2)).collect();
        let (s1, s2) = (ssim(&x, &y, n, 1.0).unwrap(), ssim(&y, &x, n, 1.0).unwrap());
        if (s1 - s2).abs() > 1e-12 || (ssim(&x, &x, n, 1.0).unwrap() - 1.0).abs() > 1e-12 {
            failed.push("SSIM symmetry".into());
            break;
        }
    }

    // Adam follows the textbook recursion on a quadratic
    let spec = FieldSpec {
        encoding: EncodingConfig { d_freq: 1, include_raw: false, n_coords: 2 },
        hidden: vec![],
        skip_at: vec![],
        n_materials: 1,
    };
    let mut f = NeuralField::<f64>::zeros(spec, 1.0).unwrap();
    f.mlp_mut().layers_mut()[0].bias[0] = 2.0;
    let cfg = TrainConfig { learning_rate: 0.05, beta1: 0.8, beta2: 0.95, eps_adam: 1e-6, ..TrainConfig::default() };
    let mut st = AdamState::new(&f);
    let (mut x, mut m, mut v) = (2.0f64, 0.0f64, 0.0f64);
    for t in 1..=25 {
        let mut grads = GradientBundle::zeros(&f.spec().architecture());
        grads.layers[0].bias[0] = 3.0 * (f.mlp().layers()[0].bias[0] + 1.0);
        adam_step(&mut f, &grads, &mut st, &cfg).unwrap();
        let gr = 3.0 * (x + 1.0);
        m = 0.8 * m + 0.2 * gr;
        v = 0.95 * v + 0.05 * gr * gr;
        x -= 0.05 * (m / (1.0 - 0.8f64.powi(t))) / ((v / (1.0 - 0.95f64.powi(t))).sqrt() + 1e-6);
        if (f.mlp().layers()[0].bias[0] - x).abs() > 1e-12 {
            failed.push(format!("Adam trace diverges at step {t}"));
            break;
        }
    }

    outcome(
        failed.is_empty(),
        if failed.is_empty() {
            "rotation equivariance, normalization idempotence, projection bounds and monotonicity, SSIM symmetry, Adam trace".into()
        } else {
            failed.join("; ")
        },
    )
}

fn main() {
    // `cargo test -- --list` and filters from other targets should not start hour-long runs
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let mut suite = Suite { failures: 0 };
    suite.run(1, "FOV radius", criterion_1);
    suite.run(2, "monochromatic equivalence", criterion_2);
    suite.run(3, "zero-object consistency", criterion_3);
    suite.run(4, "analytic chord", criterion_4);
    suite.run(5, "gradient exactness", criterion_5);
    suite.run(6, "Poisson noise statistics", criterion_6);
    let start = Instant::now();
    let noise_free = desk_run(Scenario::NoiseFree, true);
    let elapsed = start.elapsed().as_secs_f64();
    let (reference, err) = match noise_free {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e)),
    };
    suite.run(7, "desk dual-spectrum reconstruction", || match &err {
        Some(e) => report_failure(e.clone()),
        None => {
            let mut o = criterion_7(&reference);
            o.detail += &format!("; run took {elapsed:.0} s");
            o
        }
    });
    suite.run(8, "sparse-angle regime", || criterion_8(&reference));
    suite.run(9, "Poisson regime", criterion_9);
    suite.run(10, "geometric inconsistency regime", || criterion_10(&reference));
    suite.run(11, "single-spectrum dual-material", criterion_11);
    suite.run(12, "high-resolution extraction", || criterion_12(&reference));
    suite.run(13, "determinism", criterion_13);
    suite.run(14, "property suites", criterion_14);
    println!("{} of 14 criteria failed", suite.failures);
    // a failed criterion is reported, not fatal, unless asked for
    if suite.failures > 0 && std::env::var_os("NBMF_ACCEPTANCE_STRICT").is_some_and(|v| v == "1") {
        std::process::exit(1);
    }
}
