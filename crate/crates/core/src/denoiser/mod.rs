//! The conditional noise-prediction network `M(x_t, t, e)`.
//!
//! Input is `[x_t | time embedding | pooled conditioning]`, followed by four
//! affine layers with `tanh` between them:
//!
//! ```text
//! in -> H (tanh) -> H (tanh) -> H (tanh) -> image_dim
//! ```
//!
//! Parameters are generic over the float type so the same code trains in
//! `f32` and is gradient-checked in `f64`.

mod adam;
mod checkpoint;

use ndarray::{Array1, Array2, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};

use crate::embeddings::TokenEmbeddingSequence;
use crate::error::{Error, Result};
use crate::numerics::PrngStream;

pub use adam::{AdamW, LrSchedule};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

/// Width of the sinusoidal timestep features (8 sin/cos pairs).
pub const TIME_DIM: usize = 16;

/// Float types the network can be instantiated with.
pub trait Scalar:
    Float + FromPrimitive + LinalgScalar + ScalarOperand + std::fmt::Debug + Send + Sync + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

fn cast<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("representable float")
}

/// Sinusoidal features of `t`.
///
/// Pair `k` uses angle `t / T^(k/7)`, so wavelengths run geometrically from
/// 1 (pair 0) to `T` (pair 7). Entries are `[sin, cos]` per pair.
pub fn time_embedding(t: usize, timesteps: usize) -> [f64; TIME_DIM] {
    let mut out = [0.0; TIME_DIM];
    let pairs = TIME_DIM / 2;
    for k in 0..pairs {
        let wavelength = (timesteps as f64).powf(k as f64 / (pairs - 1) as f64);
        let angle = t as f64 / wavelength;
        out[2 * k] = angle.sin();
        out[2 * k + 1] = angle.cos();
    }
    out
}

/// Mean over the `L` (possibly noisy) token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub pooled: Vec<f64>,
}

impl Conditioning {
    pub fn from_sequence(seq: &TokenEmbeddingSequence) -> Self {
        Self {
            pooled: seq.mean_pooled().to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub image_dim: usize,
    pub cond_dim: usize,
    pub hidden: usize,
    /// Diffusion length `T`, used by the time embedding.
    pub timesteps: usize,
    #[serde(default)]
    pub output: OutputParam,
}

/// How the last layer's output `F` becomes the noise prediction,
/// `eps_hat = skip(t) * x_t + scale(t) * F`, with `ab` the cumulative alpha
/// of the linear schedule.
///
/// The training loss is the mean squared error of `F` against the target
/// implied by the true noise, `(eps - skip x_t) / scale`. For
/// [`OutputParam::Direct`] that is plain noise regression; for
/// [`OutputParam::CleanImage`] it is the squared error of the clean-image
/// estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputParam {
    /// `eps_hat = F`.
    Direct,
    /// `F` estimates the clean image: `skip = 1 / sqrt(1 - ab)`,
    /// `scale = -sqrt(ab) / sqrt(1 - ab)`.
    #[default]
    CleanImage,
}

impl OutputParam {
    /// `(skip, scale)` for every timestep, or `None` for [`OutputParam::Direct`].
    pub fn coefficients(self, timesteps: usize) -> Result<Option<Vec<(f64, f64)>>> {
        match self {
            OutputParam::Direct => Ok(None),
            OutputParam::CleanImage => {
                let schedule = crate::diffusion::DiffusionSchedule::linear(timesteps)?;
                Ok(Some(
                    (0..timesteps)
                        .map(|t| {
                            let ab = schedule.alpha_bar(t);
                            let r = (1.0 - ab).sqrt();
                            (1.0 / r, -ab.sqrt() / r)
                        })
                        .collect(),
                ))
            }
        }
    }
}

impl DenoiserConfig {
    pub const DEFAULT_HIDDEN: usize = 128;

    pub fn input_dim(&self) -> usize {
        self.image_dim + TIME_DIM + self.cond_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `out x in`, row-major.
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Linear<T> {
    fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    fn apply(&self, x: &Array2<T>) -> Array2<T> {
        x.dot(&self.weight.t()) + &self.bias
    }
}

/// Weights and biases of the four layers, plus the shape configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams<T> {
    pub config: DenoiserConfig,
    pub input: Linear<T>,
    pub hidden1: Linear<T>,
    pub hidden2: Linear<T>,
    pub output: Linear<T>,
}

/// Tensor names in checkpoint order.
pub const TENSOR_NAMES: [&str; 8] = [
    "input.weight",
    "input.bias",
    "hidden1.weight",
    "hidden1.bias",
    "hidden2.weight",
    "hidden2.bias",
    "output.weight",
    "output.bias",
];

/// One minibatch of training inputs.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    /// `B x image_dim` noisy images.
    pub x_t: Array2<T>,
    pub t: Vec<usize>,
    /// `B x cond_dim` pooled conditioning.
    pub cond: Array2<T>,
    /// `B x image_dim` regression target.
    pub eps: Array2<T>,
}

impl<T: Scalar> DenoiserParams<T> {
    pub fn zeros(config: DenoiserConfig) -> Self {
        let h = config.hidden;
        Self {
            config,
            input: Linear::zeros(config.input_dim(), h),
            hidden1: Linear::zeros(h, h),
            hidden2: Linear::zeros(h, h),
            output: Linear::zeros(h, config.image_dim),
        }
    }

    /// Weights `~ N(0, 1) / sqrt(fan_in)`, biases zero. Layers are filled in
    /// checkpoint order, weights row-major.
    pub fn init(config: DenoiserConfig, stream: &mut PrngStream) -> Self {
        let mut p = Self::zeros(config);
        for layer in p.layers_mut() {
            let scale = 1.0 / (layer.weight.ncols() as f64).sqrt();
            layer.weight.mapv_inplace(|_| cast::<T>(stream.gaussian() * scale));
        }
        p
    }

    fn layers(&self) -> [&Linear<T>; 4] {
        [&self.input, &self.hidden1, &self.hidden2, &self.output]
    }

    fn layers_mut(&mut self) -> [&mut Linear<T>; 4] {
        [&mut self.input, &mut self.hidden1, &mut self.hidden2, &mut self.output]
    }

    /// Flat views of every tensor in [`TENSOR_NAMES`] order.
    pub fn tensors(&self) -> Vec<&[T]> {
        self.layers()
            .into_iter()
            .flat_map(|l| {
                [
                    l.weight.as_slice().expect("standard layout"),
                    l.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.layers_mut()
            .into_iter()
            .flat_map(|l| {
                [
                    l.weight.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn tensor_shapes(&self) -> Vec<Vec<usize>> {
        self.layers()
            .into_iter()
            .flat_map(|l| [l.weight.shape().to_vec(), l.bias.shape().to_vec()])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Scalar>(&self) -> DenoiserParams<U> {
        let conv = |l: &Linear<T>| Linear {
            weight: l.weight.mapv(|v| cast::<U>(v.to_f64().expect("finite"))),
            bias: l.bias.mapv(|v| cast::<U>(v.to_f64().expect("finite"))),
        };
        DenoiserParams {
            config: self.config,
            input: conv(&self.input),
            hidden1: conv(&self.hidden1),
            hidden2: conv(&self.hidden2),
            output: conv(&self.output),
        }
    }

    /// Builds the `B x input_dim` network input.
    pub fn assemble_input(&self, x_t: &Array2<T>, t: &[usize], cond: &Array2<T>) -> Result<Array2<T>> {
        let c = self.config;
        let b = x_t.nrows();
        if x_t.ncols() != c.image_dim {
            return Err(Error::ShapeError(format!(
                "x_t has {} columns, model expects {}",
                x_t.ncols(),
                c.image_dim
            )));
        }
        if cond.ncols() != c.cond_dim {
            return Err(Error::ShapeError(format!(
                "conditioning has {} columns, model expects {}",
                cond.ncols(),
                c.cond_dim
            )));
        }
        if cond.nrows() != b || t.len() != b {
            return Err(Error::ShapeError(format!(
                "batch sizes disagree: x_t {b}, t {}, cond {}",
                t.len(),
                cond.nrows()
            )));
        }
        if let Some(&bad) = t.iter().find(|&&t| t >= c.timesteps) {
            return Err(Error::BadTimestep {
                t: bad,
                timesteps: c.timesteps,
            });
        }
        let mut input = Array2::<T>::zeros((b, c.input_dim()));
        for (row, mut dst) in input.rows_mut().into_iter().enumerate() {
            let (img, rest) = dst.as_slice_mut().expect("standard layout").split_at_mut(c.image_dim);
            let (time, cnd) = rest.split_at_mut(TIME_DIM);
            for (d, s) in img.iter_mut().zip(x_t.row(row)) {
                *d = *s;
            }
            for (d, s) in time.iter_mut().zip(time_embedding(t[row], c.timesteps)) {
                *d = cast(s);
            }
            for (d, s) in cnd.iter_mut().zip(cond.row(row)) {
                *d = *s;
            }
        }
        Ok(input)
    }

    fn forward_cached(&self, input: &Array2<T>) -> [Array2<T>; 4] {
        let h1 = self.input.apply(input).mapv_into(T::tanh);
        let h2 = self.hidden1.apply(&h1).mapv_into(T::tanh);
        let h3 = self.hidden2.apply(&h2).mapv_into(T::tanh);
        let out = self.output.apply(&h3);
        [h1, h2, h3, out]
    }

    /// Predicted noise for a batch.
    pub fn forward_batch(&self, x_t: &Array2<T>, t: &[usize], cond: &Array2<T>) -> Result<Array2<T>> {
        let input = self.assemble_input(x_t, t, cond)?;
        let [_, _, _, out] = self.forward_cached(&input);
        let coefficients = self.config.output.coefficients(self.config.timesteps)?;
        Ok(Self::apply_output(out, x_t, t, coefficients.as_deref()))
    }

    fn apply_output(
        mut out: Array2<T>,
        x_t: &Array2<T>,
        t: &[usize],
        coefficients: Option<&[(f64, f64)]>,
    ) -> Array2<T> {
        if let Some(coef) = coefficients {
            for ((mut row, x), &t) in out.rows_mut().into_iter().zip(x_t.rows()).zip(t) {
                let (skip, scale) = (cast::<T>(coef[t].0), cast::<T>(coef[t].1));
                row.zip_mut_with(&x, |f, &x| *f = skip * x + scale * *f);
            }
        }
        out
    }

    /// Predicted noise for a single image.
    pub fn forward(&self, x_t: &[T], t: usize, cond: &Conditioning) -> Result<Vec<T>> {
        let x = Array2::from_shape_vec((1, x_t.len()), x_t.to_vec()).map_err(|e| Error::ShapeError(e.to_string()))?;
        let c = Array1::from_iter(cond.pooled.iter().map(|&v| cast::<T>(v))).insert_axis(Axis(0));
        Ok(self.forward_batch(&x, &[t], &c)?.into_raw_vec_and_offset().0)
    }

    /// Mean squared error of the network output against its implied target
    /// (see [`OutputParam`]) over all batch entries, and its gradient with
    /// respect to every parameter.
    pub fn loss_and_grad(&self, batch: &Batch<T>) -> Result<(T, DenoiserParams<T>)> {
        if batch.eps.dim() != batch.x_t.dim() {
            return Err(Error::ShapeError(format!(
                "target shape {:?} differs from x_t shape {:?}",
                batch.eps.dim(),
                batch.x_t.dim()
            )));
        }
        let input = self.assemble_input(&batch.x_t, &batch.t, &batch.cond)?;
        let [h1, h2, h3, out] = self.forward_cached(&input);
        let coefficients = self.config.output.coefficients(self.config.timesteps)?;
        let eps_hat = Self::apply_output(out, &batch.x_t, &batch.t, coefficients.as_deref());

        // Residual of F against its implied target: (eps_hat - eps) / scale.
        let mut diff = &eps_hat - &batch.eps;
        if let Some(coef) = &coefficients {
            for (mut row, &t) in diff.rows_mut().into_iter().zip(&batch.t) {
                let inv_scale = cast::<T>(1.0 / coef[t].1);
                row.mapv_inplace(|d| d * inv_scale);
            }
        }
        let count = cast::<T>(diff.len() as f64);
        let loss = diff.iter().fold(T::zero(), |acc, &d| acc + d * d) / count;

        let mut grads = DenoiserParams::zeros(self.config);
        let two = cast::<T>(2.0);
        let mut delta = diff.mapv(|d| two * d / count);

        let tanh_back = |upstream: Array2<T>, h: &Array2<T>| upstream * &h.mapv(|a| T::one() - a * a);

        grads.output.weight = delta.t().dot(&h3);
        grads.output.bias = delta.sum_axis(Axis(0));
        delta = tanh_back(delta.dot(&self.output.weight), &h3);

        grads.hidden2.weight = delta.t().dot(&h2);
        grads.hidden2.bias = delta.sum_axis(Axis(0));
        delta = tanh_back(delta.dot(&self.hidden2.weight), &h2);

        grads.hidden1.weight = delta.t().dot(&h1);
        grads.hidden1.bias = delta.sum_axis(Axis(0));
        delta = tanh_back(delta.dot(&self.hidden1.weight), &h1);

        grads.input.weight = delta.t().dot(&input);
        grads.input.bias = delta.sum_axis(Axis(0));

        Ok((loss, grads))
    }

    /// Partial derivatives of the output with respect to the conditioning,
    /// estimated by central differences. Used to probe sensitivity.
    pub fn cond_sensitivity(&self, x_t: &[T], t: usize, cond: &Conditioning, h: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(cond.pooled.len());
        for j in 0..cond.pooled.len() {
            let mut plus = cond.clone();
            let mut minus = cond.clone();
            plus.pooled[j] += h;
            minus.pooled[j] -= h;
            let fp = self.forward(x_t, t, &plus).expect("shapes checked by caller");
            let fm = self.forward(x_t, t, &minus).expect("shapes checked by caller");
            let norm: f64 = fp
                .iter()
                .zip(&fm)
                .map(|(a, b)| {
                    let d = (a.to_f64().unwrap() - b.to_f64().unwrap()) / (2.0 * h);
                    d * d
                })
                .sum::<f64>()
                .sqrt();
            out.push(norm);
        }
        out
    }
}
