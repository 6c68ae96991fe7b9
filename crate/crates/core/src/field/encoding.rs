use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Fourier-feature encoding: per coordinate `p`, the pairs
/// `(sin(2^j pi p), cos(2^j pi p))` for `j = 0..d_freq`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub d_freq: usize,
    #[serde(default)]
    pub include_raw: bool,
    pub n_coords: usize,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        EncodingConfig { d_freq: 8, include_raw: false, n_coords: 2 }
    }
}

impl EncodingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_freq == 0 {
            return Err(invalid("encoding needs at least one frequency octave"));
        }
        if !(self.n_coords == 2 || self.n_coords == 3) {
            return Err(invalid(format!("encoding supports 2 or 3 coordinates, got {}", self.n_coords)));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.n_coords * 2 * self.d_freq + if self.include_raw { self.n_coords } else { 0 }
    }
}

pub fn encode(x: &[f64], cfg: &EncodingConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if x.len() != cfg.n_coords {
        return Err(invalid(format!("expected {} coordinates, got {}", cfg.n_coords, x.len())));
    }
    if let Some(p) = x.iter().find(|p| !(p.abs() <= 1.0)) {
        return Err(invalid(format!("coordinate {p} outside [-1, 1]; normalize by the FOV radius first")));
    }
    let mut out = vec![0.0; cfg.width()];
    encode_into(x, cfg, &mut out);
    Ok(out)
}

/// Unchecked encoder used on hot paths. Higher octaves come from the
/// double-angle recurrence, accurate to a few ulps times `2^d_freq`.
pub(crate) fn encode_into<T: num_traits::Float>(x: &[f64], cfg: &EncodingConfig, out: &mut [T]) {
    let d = cfg.d_freq;
    for (i, &p) in x.iter().enumerate() {
        let (s, c) = (PI * p).sin_cos();
        write_octaves(s, c, &mut out[i * 2 * d..(i + 1) * 2 * d]);
    }
    if cfg.include_raw {
        let base = x.len() * 2 * d;
        for (i, &p) in x.iter().enumerate() {
            out[base + i] = T::from(p).unwrap();
        }
    }
}

/// Sample points between exact re-anchorings in [`encode_line_into`].
const REANCHOR: usize = 32;

fn write_octaves<T: num_traits::Float>(mut s: f64, mut c: f64, block: &mut [T]) {
    for pair in block.chunks_exact_mut(2) {
        pair[0] = T::from(s.clamp(-1.0, 1.0)).unwrap();
        pair[1] = T::from(c.clamp(-1.0, 1.0)).unwrap();
        let (s2, c2) = (2.0 * s * c, c * c - s * s);
        s = s2;
        c = c2;
    }
}

/// Encodes the `n` points `start + k * step` (normalized coordinates, clipped
/// to `[-1, 1]`) into consecutive rows of `out`.
///
/// Along a line the base angle advances by a constant, so `sin`/`cos` follow
/// from a rotation recurrence, re-anchored every few points to bound drift.
pub(crate) fn encode_line_into<T: num_traits::Float>(
    start: &[f64],
    step: &[f64],
    n: usize,
    cfg: &EncodingConfig,
    out: &mut [T],
) {
    let d = cfg.d_freq;
    let width = cfg.width();
    let edge = [(-PI).sin_cos(), PI.sin_cos()];
    for (i, (&p0, &dp)) in start.iter().zip(step).enumerate() {
        let (sd, cd) = (PI * dp).sin_cos();
        let (mut s, mut c) = (0.0, 1.0);
        for k in 0..n {
            let p = p0 + k as f64 * dp;
            if k % REANCHOR == 0 {
                (s, c) = (PI * p).sin_cos();
            }
            let row = &mut out[k * width..(k + 1) * width];
            let block = &mut row[i * 2 * d..(i + 1) * 2 * d];
            if p.abs() <= 1.0 {
                write_octaves(s, c, block);
            } else {
                let (es, ec) = edge[(p > 0.0) as usize];
                write_octaves(es, ec, block);
            }
            (s, c) = (s * cd + c * sd, c * cd - s * sd);
            if cfg.include_raw {
                row[start.len() * 2 * d + i] = T::from(p.clamp(-1.0, 1.0)).unwrap();
            }
        }
    }
}
