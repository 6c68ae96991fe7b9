//! The neural base-material field: positional encoding composed with an MLP.

mod checkpoint;
mod encoding;
mod mlp;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
pub use encoding::{encode, EncodingConfig};
pub use mlp::{
    Activation, Architecture, ForwardCache, GradientBundle, Layer, LayerGrad, Mlp, Real, Workspace,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::Vec3;
use crate::projector::MaterialField;

/// Network shape and encoding of a field, independent of its parameters.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FieldSpec {
    pub encoding: EncodingConfig,
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub skip_at: Vec<usize>,
    pub n_materials: usize,
}

impl FieldSpec {
    /// Eight ReLU layers of width 256 with the encoded input re-injected at layer 4.
    pub fn reference(n_materials: usize) -> Self {
        FieldSpec {
            encoding: EncodingConfig::default(),
            hidden: vec![256; 8],
            skip_at: vec![4],
            n_materials,
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_width: self.encoding.width(),
            hidden: self.hidden.clone(),
            output_width: self.n_materials,
            skip_at: self.skip_at.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoding.validate()?;
        if self.n_materials == 0 {
            return Err(invalid("field needs at least one material channel"));
        }
        self.architecture().validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuralField<T> {
    spec: FieldSpec,
    mlp: Mlp<T>,
    /// Coordinates are divided by this radius (mm) before encoding.
    fov_radius: f64,
}

/// Points evaluated per network call when sampling a field.
const EVAL_CHUNK: usize = 1 << 14;

impl<T: Real> NeuralField<T> {
    pub fn init(spec: FieldSpec, fov_radius: f64, seed: u64) -> Result<Self> {
        spec.validate()?;
        check_radius(fov_radius)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mlp = Mlp::init(spec.architecture(), &mut rng)?;
        Ok(NeuralField { spec, mlp, fov_radius })
    }

    /// All parameters zero: the field is identically zero.
    pub fn zeros(spec: FieldSpec, fov_radius: f64) -> Result<Self> {
        spec.validate()?;
        check_radius(fov_radius)?;
        let mlp = Mlp::zeros(spec.architecture())?;
        Ok(NeuralField { spec, mlp, fov_radius })
    }

    pub fn from_parts(spec: FieldSpec, mlp: Mlp<T>, fov_radius: f64) -> Result<Self> {
        spec.validate()?;
        check_radius(fov_radius)?;
        if *mlp.architecture() != spec.architecture() {
            return Err(Error::Mismatch("network does not match the field specification".into()));
        }
        Ok(NeuralField { spec, mlp, fov_radius })
    }

    pub fn spec(&self) -> &FieldSpec {
        &self.spec
    }

    pub fn mlp(&self) -> &Mlp<T> {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp<T> {
        &mut self.mlp
    }

    pub fn fov_radius(&self) -> f64 {
        self.fov_radius
    }

    pub fn n_materials(&self) -> usize {
        self.spec.n_materials
    }

    pub fn cast<U: Real>(&self) -> NeuralField<U> {
        NeuralField { spec: self.spec.clone(), mlp: self.mlp.cast(), fov_radius: self.fov_radius }
    }

    /// Normalized, clipped coordinates of a point.
    pub fn normalize(&self, p: &Vec3) -> [f64; 3] {
        let s = 1.0 / self.fov_radius;
        [
            (p[0] * s).clamp(-1.0, 1.0),
            (p[1] * s).clamp(-1.0, 1.0),
            (p[2] * s).clamp(-1.0, 1.0),
        ]
    }

    /// Encoded feature rows for `points`, appended to `out`.
    pub fn encode_points(&self, points: &[Vec3], out: &mut Vec<T>) {
        let enc = &self.spec.encoding;
        let width = enc.width();
        let start = out.len();
        out.resize(start + points.len() * width, T::zero());
        for (p, row) in points.iter().zip(out[start..].chunks_exact_mut(width)) {
            let x = self.normalize(p);
            encoding::encode_into(&x[..enc.n_coords], enc, row);
        }
    }

    /// Encoded rows for the `n` points `start + k * step` (mm), appended to `out`.
    ///
    /// Agrees with [`NeuralField::encode_points`] to about `1e-12` but needs
    /// only a few `sin_cos` evaluations per line.
    pub fn encode_line(&self, start: &Vec3, step: &Vec3, n: usize, out: &mut Vec<T>) {
        let enc = &self.spec.encoding;
        let s = 1.0 / self.fov_radius;
        let a = [start[0] * s, start[1] * s, start[2] * s];
        let b = [step[0] * s, step[1] * s, step[2] * s];
        let begin = out.len();
        out.resize(begin + n * enc.width(), T::zero());
        encoding::encode_line_into(&a[..enc.n_coords], &b[..enc.n_coords], n, enc, &mut out[begin..]);
    }

    /// Forward pass over already encoded rows.
    pub fn forward_features(&self, features: Vec<T>, batch: usize) -> Result<ForwardCache<T>> {
        self.mlp.forward(features, batch)
    }

    /// Forward pass keeping the cache for [`NeuralField::backward`].
    pub fn forward(&self, points: &[Vec3]) -> Result<ForwardCache<T>> {
        let mut features = Vec::new();
        self.encode_points(points, &mut features);
        self.mlp.forward(features, points.len())
    }

    pub fn backward(&self, cache: &ForwardCache<T>, upstream: &[T]) -> Result<GradientBundle<T>> {
        self.mlp.backward(cache, upstream)
    }

    /// Densities at `points` (unclamped), point-major `M`-vectors.
    pub fn field_eval(&self, points: &[Vec3]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; points.len() * self.n_materials()];
        self.eval_chunks(points, &mut out)?;
        Ok(out)
    }

    fn eval_chunks(&self, points: &[Vec3], out: &mut [f64]) -> Result<()> {
        let m = self.n_materials();
        if out.len() != points.len() * m {
            return Err(Error::Shape(format!("output holds {} values for {} points", out.len(), points.len())));
        }
        let mut features = Vec::new();
        for (pts, dst) in points.chunks(EVAL_CHUNK).zip(out.chunks_mut(EVAL_CHUNK * m)) {
            features.clear();
            self.encode_points(pts, &mut features);
            let y = self.mlp.predict(std::mem::take(&mut features), pts.len())?;
            for (d, v) in dst.iter_mut().zip(&y) {
                *d = v.as_f64();
            }
        }
        Ok(())
    }
}

fn check_radius(r: f64) -> Result<()> {
    if !(r.is_finite() && r > 0.0) {
        return Err(invalid(format!("normalization radius must be positive, got {r}")));
    }
    Ok(())
}

impl<T: Real> MaterialField for NeuralField<T> {
    fn n_materials(&self) -> usize {
        self.spec.n_materials
    }

    fn eval_into(&self, points: &[Vec3], out: &mut [f64]) -> Result<()> {
        self.eval_chunks(points, out)
    }
}
