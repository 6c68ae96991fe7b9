//! Built-in experiment configurations for every scenario at three scales.
//!
//! `full` is the reference acquisition (512 detectors, 720 views, the
//! reference network, 1200 epochs). `desk` shrinks it to 128 detectors and
//! 180 views with a small network so a run fits a workstation CPU. `smoke` is
//! a seconds-long configuration for tests.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::config::{
    AngleSpec, EvaluationConfig, ExperimentConfig, FilterConfig, GeometryConfig, GridConfig, MaterialConfig,
    NoiseConfig, PhantomConfig, Scenario, SimulationConfig, SpectrumConfig,
};
use crate::field::{EncodingConfig, FieldSpec};
use crate::geometry::{AngleGenerator, SamplingRule};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Full,
    Desk,
    Smoke,
}

impl Scale {
    pub const ALL: [Scale; 3] = [Scale::Full, Scale::Desk, Scale::Smoke];

    pub fn name(self) -> &'static str {
        match self {
            Scale::Full => "full",
            Scale::Desk => "desk",
            Scale::Smoke => "smoke",
        }
    }
}

struct ScaleParams {
    n_det: usize,
    det_size_mm: f64,
    views: usize,
    sparse_views: usize,
    network: Option<FieldSpec>,
    train: TrainConfig,
    resolution: usize,
    rows: Vec<usize>,
    sim_step_mm: f64,
}

/// FOV radius of the shared scanner (SOD 1000 mm, SDD 1536 mm, 409.6 mm detector).
const FOV_RADIUS_MM: f64 = 132.16;

/// Network used below full scale: the full eight octaves on a narrow MLP.
/// Fewer octaves blur the bone edges; twice the width doubles the epoch time for
/// about 1 dB.
pub fn desk_network(n_materials: usize) -> FieldSpec {
    FieldSpec {
        encoding: EncodingConfig { d_freq: 8, include_raw: false, n_coords: 2 },
        hidden: vec![32; 3],
        skip_at: vec![],
        n_materials,
    }
}

fn smoke_network(n_materials: usize) -> FieldSpec {
    FieldSpec {
        encoding: EncodingConfig { d_freq: 4, include_raw: false, n_coords: 2 },
        hidden: vec![16, 16],
        skip_at: vec![],
        n_materials,
    }
}

fn params(scale: Scale) -> ScaleParams {
    // The 409.6 mm detector keeps the same FOV at every scale.
    let pixel = |n: usize| 2.0 * FOV_RADIUS_MM / n as f64;
    match scale {
        Scale::Full => ScaleParams {
            n_det: 512,
            det_size_mm: 0.8,
            views: 720,
            sparse_views: 120,
            network: None,
            train: TrainConfig { epochs: 1200, step_mm: 0.2581, ..TrainConfig::default() },
            resolution: 512,
            rows: vec![290],
            sim_step_mm: 0.1,
        },
        Scale::Desk => ScaleParams {
            n_det: 128,
            det_size_mm: 3.2,
            views: 180,
            sparse_views: 30,
            network: Some(desk_network(2)),
            // Small batches with a decaying rate converge far faster per epoch on
            // one core; jittered samples keep the field honest between the
            // two-pixel sample spacing.
            train: TrainConfig {
                epochs: 500,
                step_mm: 2.0 * pixel(128),
                sampling: SamplingRule::Jittered,
                rays_per_batch: 256,
                learning_rate: 3e-3,
                lr_final_ratio: 0.03,
                ..TrainConfig::default()
            },
            resolution: 128,
            rows: vec![72],
            sim_step_mm: 0.25,
        },
        Scale::Smoke => ScaleParams {
            n_det: 32,
            det_size_mm: 12.8,
            views: 36,
            sparse_views: 12,
            network: Some(smoke_network(2)),
            train: TrainConfig {
                epochs: 30,
                step_mm: 2.0 * pixel(32),
                rays_per_batch: 256,
                learning_rate: 5e-3,
                ..TrainConfig::default()
            },
            resolution: 32,
            rows: vec![18],
            sim_step_mm: 1.0,
        },
    }
}

/// Configuration for `scenario` at `scale`, writing into `output_dir`.
pub fn preset(scale: Scale, scenario: Scenario, output_dir: impl Into<PathBuf>) -> ExperimentConfig {
    let p = params(scale);
    let full = AngleSpec::Generated(AngleGenerator::full(p.views));
    let spectrum_80 = SpectrumConfig::Synthetic { kvp: 80.0, filter: None, label: Some("80kVp".into()) };
    let spectrum_140 = SpectrumConfig::Synthetic {
        kvp: 140.0,
        filter: Some(FilterConfig { material: "copper".into(), thickness_mm: 1.0 }),
        label: Some("140kVp".into()),
    };
    let (spectra, angles) = match scenario {
        Scenario::SingleSpectrum => (vec![spectrum_80], vec![full]),
        Scenario::Sparse => {
            let sparse = AngleSpec::Generated(AngleGenerator {
                count: p.sparse_views,
                offset: 0,
                stride: p.views / p.sparse_views,
                full_rotation: true,
            });
            (vec![spectrum_80, spectrum_140], vec![sparse.clone(), sparse])
        }
        Scenario::GeoInconsistent => {
            // one sweep of 2 * views positions, even ones for the first spectrum, odd for the second
            let set = |offset| AngleSpec::Generated(AngleGenerator { count: p.views, offset, stride: 2, full_rotation: true });
            (vec![spectrum_80, spectrum_140], vec![set(0), set(1)])
        }
        _ => (vec![spectrum_80, spectrum_140], vec![full.clone(), full]),
    };
    let mut train = p.train;
    if scale == Scale::Desk {
        // Same number of optimizer steps as the full dual-spectrum acquisition:
        // with fewer rays an epoch is shorter, not the training.
        let rays: usize = angles.iter().map(AngleSpec::n_angles).sum();
        train.epochs = train.epochs * 2 * p.views / rays;
    }
    let noise = (scenario == Scenario::Poisson).then_some(NoiseConfig { i0: 1e6, seed: 7 });
    let highres_factors = if scenario == Scenario::Highres { vec![2, 4] } else { vec![] };
    ExperimentConfig {
        scenario,
        description: format!("{} scenario at {} scale", scenario.name(), scale.name()),
        geometry: GeometryConfig { sod_mm: 1000.0, sdd_mm: 1536.0, n_det: p.n_det, det_size_mm: p.det_size_mm, angles },
        energy_grid: GridConfig::default(),
        spectra,
        materials: vec![
            MaterialConfig::Builtin { name: "water".into() },
            MaterialConfig::Builtin { name: "bone".into() },
        ],
        phantom: PhantomConfig::Thorax { scale: 1.0 },
        simulation: SimulationConfig { step_mm: p.sim_step_mm, sampling: SamplingRule::Midpoint },
        noise,
        network: p.network,
        train,
        evaluation: EvaluationConfig { resolution: p.resolution, rows: p.rows, highres_factors },
        output_dir: output_dir.into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_validates() {
        for scale in Scale::ALL {
            for scenario in Scenario::ALL {
                let cfg = preset(scale, scenario, "out");
                cfg.validate().unwrap_or_else(|e| panic!("{scale:?}/{scenario:?}: {e}"));
            }
        }
    }

    #[test]
    fn desk_epochs_keep_the_step_count() {
        let epochs = |s| preset(Scale::Desk, s, "out").train.epochs;
        assert_eq!(epochs(Scenario::NoiseFree), 500);
        assert_eq!(epochs(Scenario::GeoInconsistent), 500);
        assert_eq!(epochs(Scenario::Sparse), 3000);
        assert_eq!(epochs(Scenario::SingleSpectrum), 1000);
        assert_eq!(preset(Scale::Full, Scenario::Sparse, "out").train.epochs, 1200);
    }

    #[test]
    fn full_presets_match_the_reference_acquisitions() {
        let views = |s| {
            let g = preset(Scale::Full, s, "out").geometry.build().unwrap();
            g.angle_sets().iter().map(Vec::len).collect::<Vec<_>>()
        };
        assert_eq!(views(Scenario::NoiseFree), vec![720, 720]);
        assert_eq!(views(Scenario::Sparse), vec![120, 120]);
        assert_eq!(views(Scenario::GeoInconsistent), vec![720, 720]);
        assert_eq!(views(Scenario::SingleSpectrum), vec![720]);
        let g = preset(Scale::Full, Scenario::NoiseFree, "out").geometry.build().unwrap();
        assert!((g.fov_radius() - 132.16).abs() < 0.01);
        let cfg = preset(Scale::Full, Scenario::NoiseFree, "out");
        assert_eq!(cfg.network(), FieldSpec::reference(2));
        assert_eq!(cfg.train.epochs, 1200);
    }

    #[test]
    fn interleaved_sets_alternate_on_one_sweep() {
        let g = preset(Scale::Full, Scenario::GeoInconsistent, "out").geometry.build().unwrap();
        let (a, b) = (&g.angle_sets()[0], &g.angle_sets()[1]);
        let d = std::f64::consts::TAU / 1440.0;
        for i in 0..720 {
            assert!((a[i] - 2.0 * i as f64 * d).abs() < 1e-12);
            assert!((b[i] - (2 * i + 1) as f64 * d).abs() < 1e-12);
        }
    }

    #[test]
    fn fov_is_shared_across_scales() {
        for scale in Scale::ALL {
            let g = preset(scale, Scenario::NoiseFree, "out").geometry.build().unwrap();
            assert!((g.fov_radius() - FOV_RADIUS_MM).abs() < 0.01, "{scale:?}");
        }
    }
}
