//! Fan-beam scan geometry: ray generation and uniform sampling along rays.
//!
//! Coordinates follow a right-handed frame with the origin at the rotation
//! centre, `+y` pointing at the source for `phi = 0` and `z` along the
//! rotation axis. Everything lives in the `z = 0` slice; vectors keep three
//! components so a cone-beam geometry only changes `v`.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub type Vec3 = [f64; 3];

/// Rotate `v` counter-clockwise by `phi` about the `z` axis.
pub fn rotate_z(phi: f64, v: Vec3) -> Vec3 {
    let (s, c) = phi.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGeometry", into = "RawGeometry")]
pub struct ScanGeometry {
    sod: f64,
    sdd: f64,
    n_det: usize,
    det_size: f64,
    angle_sets: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct RawGeometry {
    sod_mm: f64,
    sdd_mm: f64,
    n_det: usize,
    det_size_mm: f64,
    angle_sets: Vec<Vec<f64>>,
}

impl TryFrom<RawGeometry> for ScanGeometry {
    type Error = crate::Error;
    fn try_from(r: RawGeometry) -> Result<Self> {
        ScanGeometry::new(r.sod_mm, r.sdd_mm, r.n_det, r.det_size_mm, r.angle_sets)
    }
}

impl From<ScanGeometry> for RawGeometry {
    fn from(g: ScanGeometry) -> Self {
        RawGeometry {
            sod_mm: g.sod,
            sdd_mm: g.sdd,
            n_det: g.n_det,
            det_size_mm: g.det_size,
            angle_sets: g.angle_sets,
        }
    }
}

impl ScanGeometry {
    /// `angle_sets` holds one ordered list of rotation angles (radians) per spectrum.
    pub fn new(
        sod: f64,
        sdd: f64,
        n_det: usize,
        det_size: f64,
        angle_sets: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if !(sod.is_finite() && sod > 0.0) {
            return Err(invalid(format!("sod must be positive, got {sod}")));
        }
        if !(sdd.is_finite() && sdd > sod) {
            return Err(invalid(format!("sdd ({sdd}) must exceed sod ({sod})")));
        }
        if n_det == 0 {
            return Err(invalid("n_det must be at least 1"));
        }
        if !(det_size.is_finite() && det_size > 0.0) {
            return Err(invalid(format!("det_size must be positive, got {det_size}")));
        }
        if angle_sets.is_empty() {
            return Err(invalid("at least one angle set is required"));
        }
        for (k, set) in angle_sets.iter().enumerate() {
            if let Some(a) = set.iter().find(|a| !(0.0..TAU).contains(*a)) {
                return Err(invalid(format!("angle {a} of set {k} outside [0, 2pi)")));
            }
        }
        Ok(ScanGeometry { sod, sdd, n_det, det_size, angle_sets })
    }

    pub fn sod(&self) -> f64 {
        self.sod
    }

    pub fn sdd(&self) -> f64 {
        self.sdd
    }

    pub fn n_det(&self) -> usize {
        self.n_det
    }

    pub fn det_size(&self) -> f64 {
        self.det_size
    }

    pub fn angle_sets(&self) -> &[Vec<f64>] {
        &self.angle_sets
    }

    /// Number of spectra `K` the geometry was declared for.
    pub fn n_spectra(&self) -> usize {
        self.angle_sets.len()
    }

    /// Same detector and distances, different angle sets.
    pub fn with_angle_sets(&self, angle_sets: Vec<Vec<f64>>) -> Result<Self> {
        ScanGeometry::new(self.sod, self.sdd, self.n_det, self.det_size, angle_sets)
    }

    /// Half the detector width.
    pub fn half_width(&self) -> f64 {
        0.5 * self.n_det as f64 * self.det_size
    }

    /// Radius of the disk covered by every fan.
    pub fn fov_radius(&self) -> f64 {
        let h = self.half_width();
        self.sod * h / (self.sdd * self.sdd + h * h).sqrt()
    }

    /// Centered detector coordinate of a detector unit.
    pub fn detector_u(&self, det_index: usize) -> f64 {
        (det_index as f64 + 0.5 - 0.5 * self.n_det as f64) * self.det_size
    }

    pub fn ray_for(&self, phi: f64, det_index: usize) -> Result<Ray> {
        if det_index >= self.n_det {
            return Err(invalid(format!(
                "detector index {det_index} out of range for {} detectors",
                self.n_det
            )));
        }
        Ok(self.ray_at_u(phi, self.detector_u(det_index)))
    }

    /// Ray towards an arbitrary detector coordinate `u` (mm).
    pub fn ray_at_u(&self, phi: f64, u: f64) -> Ray {
        let norm = (u * u + self.sdd * self.sdd).sqrt();
        let d = [u / norm, -self.sdd / norm, 0.0];
        Ray {
            origin: rotate_z(phi, [0.0, self.sod, 0.0]),
            direction: rotate_z(phi, d),
        }
    }

    /// Step of half a pixel for an `n_grid` x `n_grid` reconstruction of the FOV square.
    pub fn default_step(&self, n_grid: usize) -> f64 {
        self.fov_radius() / n_grid as f64
    }

    pub fn sample_plan(&self, step: f64, rule: SamplingRule) -> Result<SamplePlan> {
        SamplePlan::new(self.sod - self.fov_radius(), 2.0 * self.fov_radius(), step, rule)
    }

    pub fn sample_points(&self, ray: &Ray, step: f64) -> Result<Vec<Vec3>> {
        Ok(self.sample_plan(step, SamplingRule::Midpoint)?.points(ray).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        [
            self.origin[0] + t * self.direction[0],
            self.origin[1] + t * self.direction[1],
            self.origin[2] + t * self.direction[2],
        ]
    }
}

/// Where inside each step-sized cell a sample is placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingRule {
    #[default]
    Midpoint,
    LeftEndpoint,
    /// Training only: one uniform random offset per ray and epoch, shared by all
    /// cells of the ray. Deterministic evaluations fall back to the midpoint.
    Jittered,
}

/// Uniform samples `t_i` along a ray, `i = 0..n_points`.
///
/// `t_end` is `t_start + n_points * step`, the end of the last cell, so it can
/// overhang the nominal chord by less than one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplePlan {
    pub t_start: f64,
    pub t_end: f64,
    pub step: f64,
    pub n_points: usize,
    pub rule: SamplingRule,
}

impl SamplePlan {
    pub fn new(t_start: f64, length: f64, step: f64, rule: SamplingRule) -> Result<Self> {
        if !(step.is_finite() && step > 0.0) {
            return Err(invalid(format!("sampling step must be positive, got {step}")));
        }
        if !(length.is_finite() && length > 0.0) {
            return Err(invalid(format!("sampling interval must be positive, got {length}")));
        }
        let n_points = ((length / step).ceil() as usize).max(1);
        Ok(SamplePlan {
            t_start,
            t_end: t_start + n_points as f64 * step,
            step,
            n_points,
            rule,
        })
    }

    pub fn t(&self, i: usize) -> f64 {
        let offset = match self.rule {
            SamplingRule::Midpoint | SamplingRule::Jittered => 0.5,
            SamplingRule::LeftEndpoint => 0.0,
        };
        self.t_start + (i as f64 + offset) * self.step
    }

    /// `t_i` with the sample placed at fraction `offset` of its cell.
    pub fn t_at(&self, i: usize, offset: f64) -> f64 {
        self.t_start + (i as f64 + offset) * self.step
    }

    pub fn points<'a>(&'a self, ray: &'a Ray) -> impl Iterator<Item = Vec3> + 'a {
        (0..self.n_points).map(move |i| ray.at(self.t(i)))
    }

    /// Step length in cm, the unit attenuation products are formed in.
    pub fn step_cm(&self) -> f64 {
        0.1 * self.step
    }
}

/// Angle-set generator: `count` angles spaced `stride` positions apart on a
/// grid of `count * stride` equally spaced positions over the full (or half)
/// rotation, starting at grid position `offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleGenerator {
    pub count: usize,
    #[serde(default)]
    pub offset: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default = "yes")]
    pub full_rotation: bool,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

impl AngleGenerator {
    pub fn full(count: usize) -> Self {
        AngleGenerator { count, offset: 0, stride: 1, full_rotation: true }
    }

    pub fn angles(&self) -> Result<Vec<f64>> {
        if self.count == 0 || self.stride == 0 {
            return Err(invalid("angle generator needs count >= 1 and stride >= 1"));
        }
        if self.offset >= self.stride {
            return Err(invalid(format!(
                "angle offset {} must be smaller than stride {}",
                self.offset, self.stride
            )));
        }
        let span = if self.full_rotation { TAU } else { std::f64::consts::PI };
        let positions = (self.count * self.stride) as f64;
        Ok((0..self.count)
            .map(|j| span * (self.offset + j * self.stride) as f64 / positions)
            .collect())
    }
}
