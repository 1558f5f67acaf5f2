//! Discrete Euler's elastica energy.
//!
//! The continuous model penalises, over the inpainting domain,
//!
//! ```text
//! E(u) = ∫ |∇u| (b + (1 - b) κ²) dx dy,     κ = div(∇u / |∇u|)
//! ```
//!
//! Discretely, with the regularised magnitude and curvature
//!
//! ```text
//! |∇u| ≈ sqrt(ux² + uy² + ε²)
//! κ    ≈ (uy² uxx - 2 ux uy uxy + ux² uyy) / (ux² + uy² + ε²)^(3/2)
//! ```
//!
//! the energy is `Σ_i (1 - c_i) |∇u|_i (b + (1 - b) κ_i²)`.
//!
//! All five derivatives come from 3x3 stencils that share one weighted
//! least-squares quadratic fit with binomial weights, so first derivatives
//! are Sobel operators. The stencils are applied as a fixed convolution on
//! the tape, which makes the energy differentiable end to end.
//!
//! Coordinates: `x` runs along columns, `y` points up, i.e. `y = -row`.
//! Kernels are stored top row first, so their top row samples `y + h`.

use crate::error::{Error, Result};
use crate::image_io::{ImageGrid, MaskGrid};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Model parameters of the energy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElasticaParams {
    /// Weight of the length term against the curvature term, in `[0, 1]`.
    pub b: f64,
    /// Regularisation of the gradient magnitude.
    pub epsilon: f64,
    /// Grid spacing.
    pub h: f64,
}

impl ElasticaParams {
    pub fn new(b: f64, epsilon: f64) -> Result<Self> {
        Self::with_spacing(b, epsilon, 1.0)
    }

    pub fn with_spacing(b: f64, epsilon: f64, h: f64) -> Result<Self> {
        let p = ElasticaParams { b, epsilon, h };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.b) {
            return Err(Error::InvalidArgument(format!("b must lie in [0, 1], got {}", self.b)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "grid spacing must be positive, got {}",
                self.h
            )));
        }
        Ok(())
    }
}

/// The five derivative stencils, already scaled by `1/(8h)` or `1/(4h²)`.
#[derive(Clone, Debug, PartialEq)]
pub struct StencilSet {
    pub dx: [[f64; 3]; 3],
    pub dy: [[f64; 3]; 3],
    pub dxx: [[f64; 3]; 3],
    pub dyy: [[f64; 3]; 3],
    pub dxy: [[f64; 3]; 3],
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[1.0, 2.0, 1.0], [0.0, 0.0, 0.0], [-1.0, -2.0, -1.0]];
const SECOND_XX: [[f64; 3]; 3] = [[1.0, -2.0, 1.0], [2.0, -4.0, 2.0], [1.0, -2.0, 1.0]];
const SECOND_YY: [[f64; 3]; 3] = [[1.0, 2.0, 1.0], [-2.0, -4.0, -2.0], [1.0, 2.0, 1.0]];
const MIXED_XY: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [0.0, 0.0, 0.0], [1.0, 0.0, -1.0]];

impl StencilSet {
    pub fn new(h: f64) -> Self {
        let scale = |k: [[f64; 3]; 3], s: f64| k.map(|row| row.map(|v| v * s));
        let first = 1.0 / (8.0 * h);
        let second = 1.0 / (4.0 * h * h);
        StencilSet {
            dx: scale(SOBEL_X, first),
            dy: scale(SOBEL_Y, first),
            dxx: scale(SECOND_XX, second),
            dyy: scale(SECOND_YY, second),
            dxy: scale(MIXED_XY, second),
        }
    }

    /// Kernels in output order `ux, uy, uxx, uyy, uxy`.
    pub fn kernels(&self) -> [&[[f64; 3]; 3]; 5] {
        [&self.dx, &self.dy, &self.dxx, &self.dyy, &self.dxy]
    }

    /// All five kernels stacked as a `[5, 1, 3, 3]` convolution weight.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self
            .kernels()
            .iter()
            .flat_map(|k| k.iter().flatten().map(|&v| T::from_f64(v)))
            .collect();
        Tensor::new(vec![5, 1, 3, 3], data).expect("stencil shape")
    }
}

/// Derivative fields of one image on a tape, each `[1, H, W]`.
#[derive(Clone, Copy, Debug)]
pub struct Derivatives {
    pub ux: Var,
    pub uy: Var,
    pub uxx: Var,
    pub uyy: Var,
    pub uxy: Var,
}

/// Applies the stencils to `u: [1, H, W]` with mirror boundary.
pub fn derivatives<T: Scalar>(tape: &mut Tape<T>, u: Var, stencils: &StencilSet) -> Result<Derivatives> {
    let (c, h, w) = tape.value(u).chw()?;
    if c != 1 {
        return Err(Error::InvalidShape {
            op: "derivatives",
            detail: format!("expected a single-channel image, got {c} channels"),
        });
    }
    if h < 3 || w < 3 {
        return Err(Error::InvalidShape {
            op: "derivatives",
            detail: format!("image must be at least 3x3, got {h}x{w}"),
        });
    }
    let kernel = tape.constant(stencils.to_tensor());
    let all = tape.conv2d(u, kernel, None, 1, 1)?;
    let mut field = |k| tape.slice_channels(all, k, 1);
    Ok(Derivatives {
        ux: field(0)?,
        uy: field(1)?,
        uxx: field(2)?,
        uyy: field(3)?,
        uxy: field(4)?,
    })
}

/// `ux² + uy² + ε²`, shared by the magnitude and the curvature.
fn squared_magnitude<T: Scalar>(tape: &mut Tape<T>, ux: Var, uy: Var, params: &ElasticaParams) -> Result<Var> {
    let ux2 = tape.square(ux);
    let uy2 = tape.square(uy);
    let s = tape.add(ux2, uy2)?;
    Ok(tape.add_scalar(s, T::from_f64(params.epsilon * params.epsilon)))
}

/// Regularised gradient magnitude `sqrt(ux² + uy² + ε²)`.
pub fn grad_magnitude<T: Scalar>(tape: &mut Tape<T>, ux: Var, uy: Var, params: &ElasticaParams) -> Result<Var> {
    let s = squared_magnitude(tape, ux, uy, params)?;
    Ok(tape.sqrt(s))
}

/// Regularised level-line curvature.
pub fn curvature<T: Scalar>(tape: &mut Tape<T>, d: &Derivatives, params: &ElasticaParams) -> Result<Var> {
    let s = squared_magnitude(tape, d.ux, d.uy, params)?;
    let mag = tape.sqrt(s);
    curvature_from(tape, d, s, mag)
}

fn curvature_from<T: Scalar>(tape: &mut Tape<T>, d: &Derivatives, s: Var, mag: Var) -> Result<Var> {
    let ux2 = tape.square(d.ux);
    let uy2 = tape.square(d.uy);
    let t1 = tape.mul(uy2, d.uxx)?;
    let uxuy = tape.mul(d.ux, d.uy)?;
    let t2 = tape.mul(uxuy, d.uxy)?;
    let t2 = tape.mul_scalar(t2, T::from_f64(2.0));
    let t3 = tape.mul(ux2, d.uyy)?;
    let num = tape.sub(t1, t2)?;
    let num = tape.add(num, t3)?;
    let den = tape.mul(s, mag)?;
    tape.div(num, den)
}

/// Per-pixel energy density `|∇u| (b + (1 - b) κ²)` of `u: [1, H, W]`.
pub fn energy_density<T: Scalar>(tape: &mut Tape<T>, u: Var, params: &ElasticaParams) -> Result<Var> {
    let d = derivatives(tape, u, &StencilSet::new(params.h))?;
    let s = squared_magnitude(tape, d.ux, d.uy, params)?;
    let mag = tape.sqrt(s);
    let kappa = curvature_from(tape, &d, s, mag)?;
    let k2 = tape.square(kappa);
    let k2 = tape.mul_scalar(k2, T::from_f64(1.0 - params.b));
    let weight = tape.add_scalar(k2, T::from_f64(params.b));
    tape.mul(mag, weight)
}

/// The elastica energy of `u: [1, H, W]` summed over the inpainting domain
/// of `mask`, as a scalar node on the tape.
pub fn elastica_loss<T: Scalar>(tape: &mut Tape<T>, u: Var, mask: &MaskGrid, params: &ElasticaParams) -> Result<Var> {
    params.validate()?;
    let shape = tape.shape(u);
    if shape != [1, mask.height(), mask.width()] {
        return Err(Error::shape("elastica_loss", shape, &[1, mask.height(), mask.width()]));
    }
    let density = energy_density(tape, u, params)?;
    let weights = tape.constant(mask.unknown_tensor());
    let masked = tape.mul(density, weights)?;
    Ok(tape.sum(masked))
}

/// Evaluates the energy of an image without recording gradients.
pub fn energy<T: Scalar>(u: &ImageGrid, mask: &MaskGrid, params: &ElasticaParams) -> Result<f64> {
    let mut tape = Tape::<T>::new();
    let uv = tape.constant(u.to_tensor());
    let loss = elastica_loss(&mut tape, uv, mask, params)?;
    Ok(tape.value(loss).data()[0].as_f64())
}

/// Gradient of the energy with respect to every pixel, by backpropagation.
pub fn energy_gradient<T: Scalar>(u: &ImageGrid, mask: &MaskGrid, params: &ElasticaParams) -> Result<ImageGrid> {
    let mut tape = Tape::<T>::new();
    let uv = tape.param(u.to_tensor());
    let loss = elastica_loss(&mut tape, uv, mask, params)?;
    tape.backward(loss)?;
    ImageGrid::from_tensor(&tape.grad(uv).expect("param grad"))
}

/// Central-difference gradient of the energy, evaluated in 64-bit.
///
/// Costs two energy evaluations per pixel; meant as a verification oracle
/// for small images.
pub fn finite_difference_gradient(
    u: &ImageGrid,
    mask: &MaskGrid,
    params: &ElasticaParams,
    step: f64,
) -> Result<ImageGrid> {
    if !(1e-6..=1e-4).contains(&step) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must lie in [1e-6, 1e-4], got {step}"
        )));
    }
    let (h, w) = u.dims();
    let mut probe = u.data().to_vec();
    let mut grad = Vec::with_capacity(probe.len());
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = energy::<f64>(&ImageGrid::new(h, w, probe.clone())?, mask, params)?;
        probe[i] = orig - step;
        let minus = energy::<f64>(&ImageGrid::new(h, w, probe.clone())?, mask, params)?;
        probe[i] = orig;
        grad.push((plus - minus) / (2.0 * step));
    }
    ImageGrid::new(h, w, grad)
}

/// Largest componentwise relative error between two gradients.
///
/// Each difference is divided by `max(|a_i|, |b_i|, floor)` with
/// `floor = 1e-3 * max_j |b_j|`, so components that are tiny compared with
/// the gradient as a whole are judged on the gradient's scale instead of
/// their own.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(f64::MIN_POSITIVE);
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
