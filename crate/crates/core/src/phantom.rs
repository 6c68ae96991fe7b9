//! Analytic multi-material phantoms built from ellipses.
//!
//! Overlaps follow last-writer-wins: a point takes the densities of the last
//! ellipse (in list order) that contains it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{ScanGeometry, Vec3};
use crate::projector::MaterialField;
use crate::spectra::BONE_DENSITY;

#[derive(Debug, Clone, PartialEq)]
pub struct Ellipse {
    pub center: [f64; 2],
    pub semi_axes: [f64; 2],
    /// Counter-clockwise rotation in radians.
    pub rotation: f64,
    pub densities: Vec<f64>,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.rotation.sin_cos();
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        // same arithmetic as the batched evaluator so both agree on boundary points
        let lx = (c * dx + s * dy) * (1.0 / self.semi_axes[0]);
        let ly = (-s * dx + c * dy) * (1.0 / self.semi_axes[1]);
        lx * lx + ly * ly <= 1.0
    }

    /// Largest distance from the origin of any boundary point.
    fn reach(&self) -> f64 {
        let (s, c) = self.rotation.sin_cos();
        (0..3600)
            .map(|i| {
                let t = i as f64 * std::f64::consts::TAU / 3600.0;
                let (lx, ly) = (self.semi_axes[0] * t.cos(), self.semi_axes[1] * t.sin());
                let x = self.center[0] + c * lx - s * ly;
                let y = self.center[1] + s * lx + c * ly;
                x.hypot(y)
            })
            .fold(0.0, f64::max)
    }

    pub fn area(&self) -> f64 {
        std::f64::consts::PI * self.semi_axes[0] * self.semi_axes[1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EllipseRecord {
    center_mm: [f64; 2],
    semi_axes_mm: [f64; 2],
    #[serde(default)]
    rotation_deg: f64,
    densities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PhantomRecord", into = "PhantomRecord")]
pub struct Phantom {
    ellipses: Vec<Ellipse>,
    n_materials: usize,
}

#[derive(Serialize, Deserialize)]
struct PhantomRecord {
    n_materials: usize,
    ellipses: Vec<EllipseRecord>,
}

impl TryFrom<PhantomRecord> for Phantom {
    type Error = Error;
    fn try_from(r: PhantomRecord) -> Result<Self> {
        let ellipses = r
            .ellipses
            .into_iter()
            .map(|e| Ellipse {
                center: e.center_mm,
                semi_axes: e.semi_axes_mm,
                rotation: e.rotation_deg.to_radians(),
                densities: e.densities,
            })
            .collect();
        Phantom::new(ellipses, r.n_materials)
    }
}

impl From<Phantom> for PhantomRecord {
    fn from(p: Phantom) -> Self {
        PhantomRecord {
            n_materials: p.n_materials,
            ellipses: p
                .ellipses
                .into_iter()
                .map(|e| EllipseRecord {
                    center_mm: e.center,
                    semi_axes_mm: e.semi_axes,
                    rotation_deg: e.rotation.to_degrees(),
                    densities: e.densities,
                })
                .collect(),
        }
    }
}

impl Phantom {
    pub fn new(ellipses: Vec<Ellipse>, n_materials: usize) -> Result<Self> {
        if n_materials == 0 {
            return Err(invalid("phantom needs at least one material"));
        }
        for (i, e) in ellipses.iter().enumerate() {
            if !(e.semi_axes[0] > 0.0 && e.semi_axes[1] > 0.0) {
                return Err(invalid(format!("ellipse {i}: semi-axes must be positive")));
            }
            if e.densities.len() != n_materials {
                return Err(Error::Shape(format!(
                    "ellipse {i}: {} densities for {n_materials} materials",
                    e.densities.len()
                )));
            }
            if e.densities.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
                return Err(invalid(format!("ellipse {i}: densities must be finite and >= 0")));
            }
        }
        Ok(Phantom { ellipses, n_materials })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn ellipses(&self) -> &[Ellipse] {
        &self.ellipses
    }

    pub fn n_materials(&self) -> usize {
        self.n_materials
    }

    /// Fails when any ellipse reaches outside the geometry's FOV disk.
    pub fn check_within_fov(&self, geom: &ScanGeometry) -> Result<()> {
        let r = geom.fov_radius();
        for (i, e) in self.ellipses.iter().enumerate() {
            let reach = e.reach();
            if reach > r {
                return Err(invalid(format!(
                    "ellipse {i} reaches {reach:.2} mm from the centre, beyond the FOV radius {r:.2} mm"
                )));
            }
        }
        Ok(())
    }

    pub fn eval(&self, x: f64, y: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.n_materials];
        self.eval_into(x, y, &mut out);
        out
    }

    fn eval_into(&self, x: f64, y: f64, out: &mut [f64]) {
        match self.ellipses.iter().rev().find(|e| e.contains(x, y)) {
            Some(e) => out.copy_from_slice(&e.densities),
            None => out.fill(0.0),
        }
    }

    /// Scaled copy: every centre and semi-axis multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        let ellipses = self
            .ellipses
            .iter()
            .map(|e| Ellipse {
                center: [e.center[0] * factor, e.center[1] * factor],
                semi_axes: [e.semi_axes[0] * factor, e.semi_axes[1] * factor],
                ..e.clone()
            })
            .collect();
        Phantom::new(ellipses, self.n_materials)
    }

    /// Every ellipse rotated about the origin by `phi`.
    pub fn rotated(&self, phi: f64) -> Self {
        let (s, c) = phi.sin_cos();
        let ellipses = self
            .ellipses
            .iter()
            .map(|e| Ellipse {
                center: [c * e.center[0] - s * e.center[1], s * e.center[0] + c * e.center[1]],
                rotation: e.rotation + phi,
                ..e.clone()
            })
            .collect();
        Phantom { ellipses, n_materials: self.n_materials }
    }
}

impl MaterialField for Phantom {
    fn n_materials(&self) -> usize {
        self.n_materials
    }

    fn eval_into(&self, points: &[Vec3], out: &mut [f64]) -> Result<()> {
        let m = self.n_materials;
        if out.len() != points.len() * m {
            return Err(Error::Shape(format!("output holds {} values for {} points", out.len(), points.len())));
        }
        for (p, o) in points.iter().zip(out.chunks_exact_mut(m)) {
            Phantom::eval_into(self, p[0], p[1], o);
        }
        Ok(())
    }
}

/// Water-density values of the shipped thorax-like slice.
pub const SOFT_TISSUE: f64 = 1.0;
pub const LUNG: f64 = 0.3;
pub const AIRWAY: f64 = 0.05;

/// Spine centre of [`build_thorax_like_phantom`], in mm.
pub const SPINE_CENTER: [f64; 2] = [0.0, -60.0];

/// Water/bone thorax-like slice sized for a FOV radius of about 132 mm.
///
/// Supports `n_materials == 2` (water, bone).
pub fn build_thorax_like_phantom(n_materials: usize) -> Result<Phantom> {
    if n_materials != 2 {
        return Err(invalid(format!("the thorax phantom is defined for 2 materials, not {n_materials}")));
    }
    let water = |d: f64| vec![d, 0.0];
    let bone = vec![0.0, BONE_DENSITY];
    let ell = |cx: f64, cy: f64, a: f64, b: f64, deg: f64, densities: Vec<f64>| Ellipse {
        center: [cx, cy],
        semi_axes: [a, b],
        rotation: deg.to_radians(),
        densities,
    };
    let mut ellipses = vec![
        ell(0.0, 0.0, 118.0, 84.0, 0.0, water(SOFT_TISSUE)),
        ell(-52.0, 6.0, 34.0, 52.0, 12.0, water(LUNG)),
        ell(52.0, 6.0, 34.0, 52.0, -12.0, water(LUNG)),
        ell(0.0, 30.0, 7.0, 7.0, 0.0, water(AIRWAY)),
        ell(-56.0, 22.0, 9.0, 9.0, 0.0, water(SOFT_TISSUE)),
        ell(48.0, -18.0, 6.0, 6.0, 0.0, water(AIRWAY)),
        ell(60.0, 30.0, 10.0, 6.0, 30.0, water(SOFT_TISSUE)),
        ell(SPINE_CENTER[0], SPINE_CENTER[1], 15.0, 13.0, 0.0, bone.clone()),
        ell(0.0, -78.0, 5.0, 4.0, 0.0, water(SOFT_TISSUE)),
        ell(0.0, 72.0, 14.0, 5.0, 0.0, bone.clone()),
    ];
    for deg in [22.0f64, 48.0, 132.0, 158.0, 202.0, 228.0, 312.0, 338.0] {
        let t = deg.to_radians();
        let (cx, cy) = (0.9 * 118.0 * t.cos(), 0.9 * 84.0 * t.sin());
        // tangent direction of the body outline
        let tangent = (84.0 * t.cos()).atan2(-118.0 * t.sin()).to_degrees();
        ellipses.push(ell(cx, cy, 8.0, 4.0, tangent, bone.clone()));
    }
    Phantom::new(ellipses, 2)
}

/// A centred uniform disk of one material (index `material`) out of `n_materials`.
pub fn uniform_disk(radius: f64, density: f64, material: usize, n_materials: usize) -> Result<Phantom> {
    let mut densities = vec![0.0; n_materials];
    *densities
        .get_mut(material)
        .ok_or_else(|| invalid(format!("material {material} out of range")))? = density;
    Phantom::new(
        vec![Ellipse { center: [0.0, 0.0], semi_axes: [radius, radius], rotation: 0.0, densities }],
        n_materials,
    )
}

/// Pixel-centre grid over the FOV square `[-R, R]^2`; row 0 is the top (largest `y`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelGrid {
    pub n: usize,
    pub half_extent: f64,
}

impl PixelGrid {
    pub fn new(n: usize, half_extent: f64) -> Result<Self> {
        if n == 0 {
            return Err(invalid("image resolution must be at least 1"));
        }
        Ok(PixelGrid { n, half_extent })
    }

    pub fn pixel_size(&self) -> f64 {
        2.0 * self.half_extent / self.n as f64
    }

    pub fn center(&self, row: usize, col: usize) -> [f64; 2] {
        let s = self.pixel_size();
        [
            -self.half_extent + (col as f64 + 0.5) * s,
            self.half_extent - (row as f64 + 0.5) * s,
        ]
    }

    /// All pixel centres in row-major order.
    pub fn points(&self) -> Vec<Vec3> {
        (0..self.n)
            .flat_map(|r| (0..self.n).map(move |c| (r, c)))
            .map(|(r, c)| {
                let [x, y] = self.center(r, c);
                [x, y, 0.0]
            })
            .collect()
    }
}

/// Per-material `n x n` density maps (g/cm^3), row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityImage {
    pub n: usize,
    pub pixel_size: f64,
    pub channels: Vec<Vec<f64>>,
}

impl DensityImage {
    pub fn n_materials(&self) -> usize {
        self.channels.len()
    }

    pub fn channel(&self, m: usize) -> &[f64] {
        &self.channels[m]
    }

    pub fn get(&self, m: usize, row: usize, col: usize) -> f64 {
        self.channels[m][row * self.n + col]
    }

    /// Build from interleaved per-pixel M-vectors.
    pub fn from_interleaved(n: usize, pixel_size: f64, n_materials: usize, values: &[f64]) -> Self {
        let channels = (0..n_materials)
            .map(|m| values.iter().skip(m).step_by(n_materials).copied().collect())
            .collect();
        DensityImage { n, pixel_size, channels }
    }

    /// Mass per unit slice thickness of channel `m`, in g/cm^3 * mm^2.
    pub fn integral(&self, m: usize) -> f64 {
        self.channels[m].iter().sum::<f64>() * self.pixel_size * self.pixel_size
    }
}

pub fn rasterize(ph: &Phantom, geom: &ScanGeometry, n: usize) -> Result<DensityImage> {
    rasterize_extent(ph, geom.fov_radius(), n)
}

pub fn rasterize_extent(ph: &Phantom, half_extent: f64, n: usize) -> Result<DensityImage> {
    let grid = PixelGrid::new(n, half_extent)?;
    let points = grid.points();
    let mut values = vec![0.0; points.len() * ph.n_materials()];
    MaterialField::eval_into(ph, &points, &mut values)?;
    Ok(DensityImage::from_interleaved(n, grid.pixel_size(), ph.n_materials(), &values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn full_scan_geom() -> ScanGeometry {
        ScanGeometry::new(1000.0, 1536.0, 512, 0.8, vec![vec![0.0]]).unwrap()
    }

    #[test]
    fn thorax_examples() {
        let ph = build_thorax_like_phantom(2).unwrap();
        assert_eq!(ph.eval(0.0, -20.0), vec![1.0, 0.0]);
        assert_eq!(ph.eval(SPINE_CENTER[0], SPINE_CENTER[1]), vec![0.0, 1.92]);
        assert_eq!(ph.eval(0.0, 110.0), vec![0.0, 0.0]);
        assert_eq!(ph.eval(-52.0, -20.0), vec![LUNG, 0.0]);
        ph.check_within_fov(&full_scan_geom()).unwrap();
        assert!(build_thorax_like_phantom(3).is_err());
    }

    #[test]
    fn override_semantics() {
        let a = Ellipse { center: [0.0, 0.0], semi_axes: [10.0, 10.0], rotation: 0.0, densities: vec![1.0, 0.0] };
        let b = Ellipse { center: [5.0, 0.0], semi_axes: [3.0, 3.0], rotation: 0.0, densities: vec![0.0, 2.0] };
        let ph = Phantom::new(vec![a, b], 2).unwrap();
        assert_eq!(ph.eval(20.0, 0.0), vec![0.0, 0.0]);
        assert_eq!(ph.eval(-5.0, 0.0), vec![1.0, 0.0]);
        assert_eq!(ph.eval(5.0, 0.0), vec![0.0, 2.0]);
    }

    #[test]
    fn validation() {
        let e = Ellipse { center: [0.0, 0.0], semi_axes: [0.0, 1.0], rotation: 0.0, densities: vec![1.0] };
        assert!(Phantom::new(vec![e.clone()], 1).is_err());
        let e = Ellipse { semi_axes: [1.0, 1.0], densities: vec![-1.0], ..e };
        assert!(Phantom::new(vec![e.clone()], 1).is_err());
        let e = Ellipse { densities: vec![1.0, 1.0], ..e };
        assert!(Phantom::new(vec![e], 1).is_err());
        let big = uniform_disk(140.0, 1.0, 0, 1).unwrap();
        assert!(big.check_within_fov(&full_scan_geom()).is_err());
    }

    #[test]
    fn json_round_trip() {
        let ph = build_thorax_like_phantom(2).unwrap();
        let text = serde_json::to_string_pretty(&ph).unwrap();
        assert!(text.contains("semi_axes_mm") && text.contains("rotation_deg"));
        let back: Phantom = serde_json::from_str(&text).unwrap();
        for (a, b) in ph.ellipses().iter().zip(back.ellipses()) {
            assert_eq!(a.center, b.center);
            assert!((a.rotation - b.rotation).abs() < 1e-12);
        }
    }

    #[test]
    fn rasterize_examples() {
        let g = full_scan_geom();
        let ph = build_thorax_like_phantom(2).unwrap();
        let one = rasterize(&ph, &g, 1).unwrap();
        assert_eq!(one.channels, vec![vec![ph.eval(0.0, 0.0)[0]], vec![ph.eval(0.0, 0.0)[1]]]);

        let disk = uniform_disk(50.0, 1.3, 0, 1).unwrap();
        let img = rasterize(&disk, &g, 64).unwrap();
        assert_eq!(img.get(0, 32, 32), 1.3);
        assert!((img.pixel_size * 64.0 - 2.0 * g.fov_radius()).abs() < 1e-9);

        let e = Ellipse { center: [10.0, -5.0], semi_axes: [60.0, 35.0], rotation: 0.4, densities: vec![1.0] };
        let expected = e.area();
        let ph = Phantom::new(vec![e], 1).unwrap();
        let img = rasterize(&ph, &g, 512).unwrap();
        assert!((img.integral(0) - expected).abs() / expected < 0.02);
    }

    #[test]
    fn row_zero_is_top() {
        let e = Ellipse { center: [0.0, 100.0], semi_axes: [10.0, 10.0], rotation: 0.0, densities: vec![1.0] };
        let img = rasterize(&Phantom::new(vec![e], 1).unwrap(), &full_scan_geom(), 64).unwrap();
        let top: f64 = img.channel(0)[..64 * 16].iter().sum();
        assert!(top > 0.0);
    }

    fn downsample(img: &DensityImage) -> Vec<f64> {
        let n = img.n / 2;
        let mut out = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..n {
                out[r * n + c] = 0.25
                    * (img.get(0, 2 * r, 2 * c)
                        + img.get(0, 2 * r + 1, 2 * c)
                        + img.get(0, 2 * r, 2 * c + 1)
                        + img.get(0, 2 * r + 1, 2 * c + 1));
            }
        }
        out
    }

    #[test]
    fn dyadic_refinement_converges() {
        let g = full_scan_geom();
        let ph = build_thorax_like_phantom(2).unwrap();
        let diffs: Vec<f64> = [32usize, 64, 128]
            .iter()
            .map(|&n| {
                let coarse = rasterize(&ph, &g, n).unwrap();
                let fine = downsample(&rasterize(&ph, &g, 2 * n).unwrap());
                let area = coarse.pixel_size * coarse.pixel_size;
                coarse.channel(0).iter().zip(&fine).map(|(a, b)| (a - b).abs()).sum::<f64>() * area
            })
            .collect();
        assert!(diffs[1] < diffs[0] && diffs[2] < diffs[1], "{diffs:?}");
    }

    proptest! {
        #[test]
        fn rotation_consistent(phi in 0.0..std::f64::consts::TAU, x in -130.0..130.0f64, y in -130.0..130.0f64) {
            let ph = build_thorax_like_phantom(2).unwrap();
            let rot = ph.rotated(phi);
            let (s, c) = phi.sin_cos();
            let (xr, yr) = (c * x - s * y, s * x + c * y);
            // skip points numerically on an ellipse boundary
            let near_edge = ph.ellipses().iter().any(|e| {
                let (s, c) = e.rotation.sin_cos();
                let (dx, dy) = (x - e.center[0], y - e.center[1]);
                let lx = (c * dx + s * dy) / e.semi_axes[0];
                let ly = (-s * dx + c * dy) / e.semi_axes[1];
                ((lx * lx + ly * ly) - 1.0).abs() < 1e-9
            });
            prop_assume!(!near_edge);
            prop_assert_eq!(ph.eval(x, y), rot.eval(xr, yr));
        }
    }
}
