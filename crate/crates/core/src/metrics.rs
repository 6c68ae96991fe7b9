//! Image extraction from trained fields and image-quality metrics.
//!
//! SSIM uses an 11x11 Gaussian window (sigma 1.5), `K1 = 0.01`,
//! `K2 = 0.03`, averaged over window positions that fit inside the image.
//! PSNR and SSIM take the data range from the reference image's maximum by
//! default.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::field::{NeuralField, Real};
use crate::geometry::ScanGeometry;
use crate::phantom::{DensityImage, PixelGrid};

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Field values on the `n x n` pixel-centre grid of the FOV square, negatives clamped to 0.
pub fn extract_image<T: Real>(field: &NeuralField<T>, geom: &ScanGeometry, n: usize) -> Result<DensityImage> {
    extract_image_extent(field, geom.fov_radius(), n)
}

pub fn extract_image_extent<T: Real>(field: &NeuralField<T>, half_extent: f64, n: usize) -> Result<DensityImage> {
    let grid = PixelGrid::new(n, half_extent)?;
    let mut values = field.field_eval(&grid.points())?;
    values.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(DensityImage::from_interleaved(n, grid.pixel_size(), field.n_materials(), &values))
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("images hold {} and {} pixels", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(invalid("empty image"));
    }
    Ok(())
}

pub fn mse(img: &[f64], reference: &[f64]) -> Result<f64> {
    check_pair(img, reference)?;
    Ok(img.iter().zip(reference).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / img.len() as f64)
}

/// `10 log10(range^2 / MSE)` in dB; `+inf` when the images are identical.
pub fn psnr(img: &[f64], reference: &[f64], data_range: f64) -> Result<f64> {
    if !(data_range.is_finite() && data_range > 0.0) {
        return Err(invalid(format!("data range must be positive, got {data_range}")));
    }
    let e = mse(img, reference)?;
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / e).log10())
}

/// Largest value of `reference`, the default data range.
pub fn default_range(reference: &[f64]) -> f64 {
    reference.iter().cloned().fold(0.0, f64::max)
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Valid-region separable filtering of an `n x n` image.
fn filter_valid(img: &[f64], n: usize, w: &[f64]) -> Vec<f64> {
    let k = w.len();
    let out_n = n + 1 - k;
    let mut rows = vec![0.0; n * out_n];
    for r in 0..n {
        for c in 0..out_n {
            rows[r * out_n + c] = (0..k).map(|i| w[i] * img[r * n + c + i]).sum();
        }
    }
    let mut out = vec![0.0; out_n * out_n];
    for r in 0..out_n {
        for c in 0..out_n {
            out[r * out_n + c] = (0..k).map(|i| w[i] * rows[(r + i) * out_n + c]).sum();
        }
    }
    out
}

/// Mean structural similarity of two `n x n` images.
pub fn ssim(img: &[f64], reference: &[f64], n: usize, data_range: f64) -> Result<f64> {
    check_pair(img, reference)?;
    if img.len() != n * n {
        return Err(Error::Shape(format!("{} pixels is not {n} x {n}", img.len())));
    }
    if n < SSIM_WINDOW {
        return Err(invalid(format!("SSIM needs at least {SSIM_WINDOW} x {SSIM_WINDOW} pixels, got {n}")));
    }
    if !(data_range.is_finite() && data_range > 0.0) {
        return Err(invalid(format!("data range must be positive, got {data_range}")));
    }
    let w = gaussian_window();
    let prod = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x * y).collect() };
    let mu_x = filter_valid(img, n, &w);
    let mu_y = filter_valid(reference, n, &w);
    let xx = filter_valid(&prod(img, img), n, &w);
    let yy = filter_valid(&prod(reference, reference), n, &w);
    let xy = filter_valid(&prod(img, reference), n, &w);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let mut total = 0.0;
    for i in 0..mu_x.len() {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let vx = xx[i] - mx * mx;
        let vy = yy[i] - my * my;
        let cov = xy[i] - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok(total / mu_x.len() as f64)
}

pub fn row_profile(channel: &[f64], n: usize, row: usize) -> Result<Vec<f64>> {
    if channel.len() != n * n {
        return Err(Error::Shape(format!("{} pixels is not {n} x {n}", channel.len())));
    }
    if row >= n {
        return Err(invalid(format!("row {row} outside an image of {n} rows")));
    }
    Ok(channel[row * n..(row + 1) * n].to_vec())
}

/// Source index and weight pairs along one axis (pixel-centre aligned;
/// the two outermost samples are extended linearly past the border).
fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            if n_in == 1 {
                return (0, 0, 0.0);
            }
            let src = (i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
            let i0 = (src.floor().max(0.0) as usize).min(n_in - 2);
            (i0, i0 + 1, src - i0 as f64)
        })
        .collect()
}

pub fn bilinear_resample_channel(channel: &[f64], n_in: usize, n_out: usize) -> Result<Vec<f64>> {
    if n_out == 0 || n_in == 0 || channel.len() != n_in * n_in {
        return Err(invalid(format!("cannot resample {} pixels from {n_in} to {n_out}", channel.len())));
    }
    let taps = axis_taps(n_in, n_out);
    let mut out = vec![0.0; n_out * n_out];
    for (r, &(r0, r1, fr)) in taps.iter().enumerate() {
        for (c, &(c0, c1, fc)) in taps.iter().enumerate() {
            let at = |rr: usize, cc: usize| channel[rr * n_in + cc];
            let top = at(r0, c0) + fc * (at(r0, c1) - at(r0, c0));
            let bottom = at(r1, c0) + fc * (at(r1, c1) - at(r1, c0));
            out[r * n_out + c] = top + fr * (bottom - top);
        }
    }
    Ok(out)
}

pub fn bilinear_resample(img: &DensityImage, n_out: usize) -> Result<DensityImage> {
    let channels = img
        .channels
        .iter()
        .map(|ch| bilinear_resample_channel(ch, img.n, n_out))
        .collect::<Result<_>>()?;
    Ok(DensityImage { n: n_out, pixel_size: img.pixel_size * img.n as f64 / n_out as f64, channels })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialMetrics {
    pub material: String,
    /// `inf` when the images are identical.
    pub psnr_db: f64,
    pub psnr_infinite: bool,
    pub ssim: f64,
    pub data_range: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub resolution: usize,
    pub materials: Vec<MaterialMetrics>,
}

/// Metrics of every channel of `img` against `reference`, each with data range `max(reference)`.
pub fn evaluate(img: &DensityImage, reference: &DensityImage, names: &[String]) -> Result<MetricReport> {
    if img.n != reference.n || img.n_materials() != reference.n_materials() {
        return Err(Error::Shape(format!(
            "{} channels at {} px versus {} channels at {} px",
            img.n_materials(),
            img.n,
            reference.n_materials(),
            reference.n
        )));
    }
    let materials = (0..img.n_materials())
        .map(|m| {
            let (a, b) = (img.channel(m), reference.channel(m));
            let range = default_range(b);
            if range <= 0.0 {
                return Err(invalid(format!("reference channel {m} is empty; no data range")));
            }
            let p = psnr(a, b, range)?;
            Ok(MaterialMetrics {
                material: names.get(m).cloned().unwrap_or_else(|| format!("m{m}")),
                psnr_db: p,
                psnr_infinite: p.is_infinite(),
                ssim: ssim(a, b, img.n, range)?,
                data_range: range,
            })
        })
        .collect::<Result<_>>()?;
    Ok(MetricReport { resolution: img.n, materials })
}

impl MetricReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |e: std::io::Error| Error::io(path, e);
        let mut w = csv::Writer::from_path(path).map_err(|e| io(e.into()))?;
        w.write_record(["material", "resolution", "psnr_db", "psnr_infinite", "ssim", "data_range"])
            .map_err(|e| io(e.into()))?;
        for m in &self.materials {
            let psnr = if m.psnr_infinite { "inf".to_string() } else { format!("{:.6}", m.psnr_db) };
            w.write_record([
                m.material.clone(),
                self.resolution.to_string(),
                psnr,
                m.psnr_infinite.to_string(),
                format!("{:.6}", m.ssim),
                format!("{:.6}", m.data_range),
            ])
            .map_err(|e| io(e.into()))?;
        }
        w.flush().map_err(io)
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>6} {:>10} {:>8} {:>8}", "material", "px", "PSNR dB", "SSIM", "range")?;
        for m in &self.materials {
            let psnr = if m.psnr_infinite { "inf".to_string() } else { format!("{:.2}", m.psnr_db) };
            writeln!(f, "{:<10} {:>6} {:>10} {:>8.4} {:>8.3}", m.material, self.resolution, psnr, m.ssim, m.data_range)?;
        }
        Ok(())
    }
}

/// `column,<name>...` CSV with one column per named profile.
pub fn write_profiles_csv(path: &Path, profiles: &[(&str, &[f64])]) -> Result<()> {
    let len = profiles.first().map_or(0, |p| p.1.len());
    if profiles.iter().any(|p| p.1.len() != len) {
        return Err(Error::Shape("profiles differ in length".into()));
    }
    let io = |e: std::io::Error| Error::io(path, e);
    let mut w = csv::Writer::from_path(path).map_err(|e| io(e.into()))?;
    let mut header = vec!["column".to_string()];
    header.extend(profiles.iter().map(|p| p.0.to_string()));
    w.write_record(&header).map_err(|e| io(e.into()))?;
    for c in 0..len {
        let mut row = vec![c.to_string()];
        row.extend(profiles.iter().map(|p| p.1[c].to_string()));
        w.write_record(&row).map_err(|e| io(e.into()))?;
    }
    w.flush().map_err(io)
}

/// 16-bit grayscale PNG mapping `[0, max]` linearly onto the full range.
pub fn write_png16(channel: &[f64], n: usize, max: f64, path: &Path) -> Result<()> {
    if channel.len() != n * n {
        return Err(Error::Shape(format!("{} pixels is not {n} x {n}", channel.len())));
    }
    let scale = if max > 0.0 { 65535.0 / max } else { 0.0 };
    let pixels: Vec<u16> = channel.iter().map(|v| (v * scale).round().clamp(0.0, 65535.0) as u16).collect();
    let buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(n as u32, n as u32, pixels)
        .expect("buffer matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSidecar {
    pub format: String,
    pub n: usize,
    pub pixel_size_mm: f64,
    pub materials: Vec<String>,
    pub data_files: Vec<String>,
}

const IMAGE_FORMAT: &str = "f64le";

/// Writes `<stem>_<material>.f64` per channel (little-endian, row-major) and `<stem>.json`.
pub fn write_image(img: &DensityImage, names: &[String], dir: &Path, stem: &str) -> Result<PathBuf> {
    if names.len() != img.n_materials() {
        return Err(Error::Shape(format!("{} names for {} channels", names.len(), img.n_materials())));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut data_files = Vec::new();
    for (ch, name) in img.channels.iter().zip(names) {
        let file = format!("{stem}_{name}.f64");
        let path = dir.join(&file);
        let bytes: Vec<u8> = ch.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        data_files.push(file);
    }
    let sidecar = ImageSidecar {
        format: IMAGE_FORMAT.into(),
        n: img.n,
        pixel_size_mm: img.pixel_size,
        materials: names.to_vec(),
        data_files,
    };
    let path = dir.join(format!("{stem}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Reads an image written by [`write_image`]; returns it with its material names.
pub fn read_image(sidecar_path: &Path) -> Result<(DensityImage, Vec<String>)> {
    let text = std::fs::read_to_string(sidecar_path).map_err(|e| Error::io(sidecar_path, e))?;
    let sc: ImageSidecar = serde_json::from_str(&text)?;
    if sc.format != IMAGE_FORMAT || sc.data_files.len() != sc.materials.len() {
        return Err(Error::Mismatch(format!("{}: unsupported image sidecar", sidecar_path.display())));
    }
    let dir = sidecar_path.parent().unwrap_or(Path::new("."));
    let mut channels = Vec::new();
    for file in &sc.data_files {
        let path = dir.join(file);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != sc.n * sc.n * 8 {
            return Err(Error::Mismatch(format!("{}: {} bytes for {} x {} pixels", path.display(), bytes.len(), sc.n, sc.n)));
        }
        channels.push(bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect());
    }
    Ok((DensityImage { n: sc.n, pixel_size: sc.pixel_size_mm, channels }, sc.materials))
}
