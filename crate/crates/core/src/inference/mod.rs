//! Additive-noise unscented Kalman filter driven by the learned networks.
//!
//! Sigma points follow the scaled unscented transform with spread `a`,
//! prior-knowledge weight `b` and secondary scaling `k`:
//!
//! ```text
//! λ    = a²(d + k) − d
//! X₀   = μ,  X±ᵢ = μ ± colᵢ(chol((d + λ) P))
//! Wm₀  = λ/(d + λ),  Wc₀ = Wm₀ + 1 − a² + b,  Wᵢ = 1/(2(d + λ))
//! ```
//!
//! Covariances are symmetrized and their eigenvalues floored before every
//! Cholesky factorization. The update step redraws sigma points from the
//! predicted belief, which makes the filter exact on linear-Gaussian
//! systems. With many measurement channels (images) the innovation
//! covariance is inverted through the Woodbury identity in sigma-point
//! space instead of as a dense `p × p` matrix.

use crate::autodiff::Tensor;
use crate::models::{ModelError, ModelEvaluator, ModelParameters, ObservationSpec};
use crate::shooting::measurement_embedding;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error("covariance is not positive definite after flooring")]
    Cholesky,
    #[error("innovation covariance is singular")]
    SingularInnovation,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UkfConfig {
    pub a: f64,
    pub b: f64,
    pub k: f64,
    /// Initial covariance is `initial_var · I`.
    pub initial_var: f64,
    /// `R = measurement_var · I`.
    pub measurement_var: f64,
    /// `Q = process_var · I`.
    pub process_var: f64,
    pub eig_floor: f64,
}

impl Default for UkfConfig {
    fn default() -> Self {
        Self {
            a: 1e-3,
            b: 2.0,
            k: 0.0,
            initial_var: 0.1,
            measurement_var: 0.5,
            process_var: 1e-6,
            eig_floor: 1e-12,
        }
    }
}

impl UkfConfig {
    /// Image observations: `R` is the pixel noise variance.
    pub fn for_images(pixel_noise_std: f64) -> Self {
        Self {
            measurement_var: pixel_noise_std * pixel_noise_std,
            ..Self::default()
        }
    }

    pub fn lambda(&self, d: usize) -> f64 {
        self.a * self.a * (d as f64 + self.k) - d as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: &[f64], cov: DMatrix<f64>) -> Self {
        Self {
            mean: DVector::from_column_slice(mean),
            cov,
        }
    }

    pub fn isotropic(mean: &[f64], var: f64) -> Self {
        let d = mean.len();
        Self::new(mean, DMatrix::identity(d, d) * var)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn asymmetry(&self) -> f64 {
        (&self.cov - self.cov.transpose()).amax()
    }
}

/// `2d + 1` sigma points (rows of a `[2d+1 × d]` tensor) and their weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SigmaPoints {
    pub points: Tensor,
    pub wm: Vec<f64>,
    pub wc: Vec<f64>,
}

/// Symmetrizes `c` and raises its eigenvalues to at least `floor`.
pub fn condition_covariance(c: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let sym = (c + c.transpose()) * 0.5;
    let eig = sym.clone().symmetric_eigen();
    if eig.eigenvalues.iter().all(|&l| l >= floor) {
        return sym;
    }
    let floored = eig.eigenvalues.map(|l| l.max(floor));
    let v = &eig.eigenvectors;
    let r = v * DMatrix::from_diagonal(&floored) * v.transpose();
    (&r + r.transpose()) * 0.5
}

pub fn sigma_points(
    belief: &GaussianBelief,
    cfg: &UkfConfig,
) -> Result<SigmaPoints, InferenceError> {
    let d = belief.dim();
    // d + λ, formed directly to avoid cancellation for small spreads.
    let spread = cfg.a * cfg.a * (d as f64 + cfg.k);
    let lambda = spread - d as f64;
    let scaled = condition_covariance(&belief.cov, cfg.eig_floor) * spread;
    let chol = scaled.cholesky().ok_or(InferenceError::Cholesky)?;
    let l = chol.l();
    let mut data = Vec::with_capacity((2 * d + 1) * d);
    data.extend(belief.mean.iter());
    for sign in [1.0, -1.0] {
        for i in 0..d {
            data.extend((0..d).map(|r| belief.mean[r] + sign * l[(r, i)]));
        }
    }
    let wm0 = lambda / spread;
    let wi = 1.0 / (2.0 * spread);
    let mut wm = vec![wi; 2 * d + 1];
    let mut wc = wm.clone();
    wm[0] = wm0;
    wc[0] = wm0 + 1.0 - cfg.a * cfg.a + cfg.b;
    Ok(SigmaPoints {
        points: Tensor::new(vec![2 * d + 1, d], data).expect("sigma point shape"),
        wm,
        wc,
    })
}

/// Weighted mean of the rows of `y`, accumulated as offsets from row 0 to
/// tame the large opposite-signed weights of small spreads.
fn weighted_mean(y: &Tensor, wm: &[f64]) -> DVector<f64> {
    let p = y.cols();
    let base = y.row(0);
    let mut mean = DVector::from_column_slice(base);
    for (i, w) in wm.iter().enumerate().skip(1) {
        for (c, v) in y.row(i).iter().enumerate() {
            mean[c] += w * (v - base[c]);
        }
    }
    debug_assert_eq!(mean.len(), p);
    mean
}

/// Columns are `row_i(y) − mean`.
fn deviations(y: &Tensor, mean: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(y.cols(), y.rows(), |c, i| y.get(i, c) - mean[c])
}

fn checked(t: Tensor, what: &'static str) -> Result<Tensor, InferenceError> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(InferenceError::NonFinite(what))
    }
}

/// Propagates the belief through `f` (applied to rows) and adds `Q`.
pub fn ukf_predict(
    belief: &GaussianBelief,
    mut f: impl FnMut(&Tensor) -> Result<Tensor, ModelError>,
    cfg: &UkfConfig,
) -> Result<GaussianBelief, InferenceError> {
    let d = belief.dim();
    let sp = sigma_points(belief, cfg)?;
    let moved = checked(f(&sp.points)?, "predicted sigma points")?;
    if moved.cols() != d || moved.rows() != sp.points.rows() {
        return Err(InferenceError::Dimension {
            expected: d,
            got: moved.cols(),
        });
    }
    let mean = weighted_mean(&moved, &sp.wm);
    let dev = deviations(&moved, &mean);
    let mut cov =
        &dev * DMatrix::from_diagonal(&DVector::from_vec(sp.wc.clone())) * dev.transpose();
    for i in 0..d {
        cov[(i, i)] += cfg.process_var;
    }
    Ok(GaussianBelief {
        mean,
        cov: (&cov + cov.transpose()) * 0.5,
    })
}

/// Above this many measurement channels per sigma point the update uses
/// the Woodbury route.
const WOODBURY_RATIO: usize = 1;

/// Measurement update with additive `R = measurement_var · I`.
pub fn ukf_update(
    belief: &GaussianBelief,
    g: impl FnMut(&Tensor) -> Result<Tensor, ModelError>,
    y: &[f64],
    cfg: &UkfConfig,
) -> Result<GaussianBelief, InferenceError> {
    let woodbury = y.len() > WOODBURY_RATIO * (2 * belief.dim() + 1);
    ukf_update_with(belief, g, y, cfg, woodbury)
}

/// [`ukf_update`] with an explicit choice of innovation solver.
pub fn ukf_update_with(
    belief: &GaussianBelief,
    mut g: impl FnMut(&Tensor) -> Result<Tensor, ModelError>,
    y: &[f64],
    cfg: &UkfConfig,
    woodbury: bool,
) -> Result<GaussianBelief, InferenceError> {
    let d = belief.dim();
    let sp = sigma_points(belief, cfg)?;
    let z = checked(g(&sp.points)?, "observed sigma points")?;
    let p = y.len();
    if z.cols() != p {
        return Err(InferenceError::Dimension {
            expected: z.cols(),
            got: p,
        });
    }
    let x_mean = weighted_mean(&sp.points, &sp.wm);
    let z_mean = weighted_mean(&z, &sp.wm);
    let dx = deviations(&sp.points, &x_mean);
    let dz = deviations(&z, &z_mean);
    let w = DMatrix::from_diagonal(&DVector::from_vec(sp.wc.clone()));
    let pxz = &dx * &w * dz.transpose();
    let innovation = DVector::from_column_slice(y) - &z_mean;

    // Solve S·[v, M] = [innovation, Pxzᵀ] for S = Dz W Dzᵀ + R.
    let rhs = {
        let mut m = DMatrix::zeros(p, d + 1);
        m.column_mut(0).copy_from(&innovation);
        m.columns_mut(1, d).copy_from(&pxz.transpose());
        m
    };
    let r = cfg.measurement_var;
    let sol = if woodbury {
        // S⁻¹ = R⁻¹ − R⁻¹ Dz (W⁻¹ + Dzᵀ R⁻¹ Dz)⁻¹ Dzᵀ R⁻¹
        let winv = DMatrix::from_diagonal(&DVector::from_iterator(
            sp.wc.len(),
            sp.wc.iter().map(|w| 1.0 / w),
        ));
        let core = winv + dz.transpose() * &dz / r;
        let inner = core
            .lu()
            .solve(&(dz.transpose() * &rhs / r))
            .ok_or(InferenceError::SingularInnovation)?;
        (&rhs - &dz * inner) / r
    } else {
        let mut s = &dz * &w * dz.transpose();
        for i in 0..p {
            s[(i, i)] += r;
        }
        s.lu()
            .solve(&rhs)
            .ok_or(InferenceError::SingularInnovation)?
    };
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(InferenceError::SingularInnovation);
    }
    let gain_t = sol.columns(1, d); // S⁻¹ Pxzᵀ = Kᵀ
    let mean = &belief.mean + &pxz * sol.column(0);
    let cov = &belief.cov - &pxz * gain_t;
    Ok(GaussianBelief {
        mean,
        cov: (&cov + cov.transpose()) * 0.5,
    })
}

/// Initial belief for a sequence starting with measurement `y1`: observed
/// coordinates take `y1` for projections, everything is zero for decoders.
pub fn initial_belief(
    ospec: &ObservationSpec,
    state_dim: usize,
    y1: &[f64],
    cfg: &UkfConfig,
) -> GaussianBelief {
    let mean = match ospec {
        ObservationSpec::Projection { indices } => measurement_embedding(indices, state_dim, y1),
        ObservationSpec::MlpDecoder { .. } => vec![0.0; state_dim],
    };
    GaussianBelief::isotropic(&mean, cfg.initial_var)
}

/// Filters `measurements` (`L × p`, row-major, normalized) through the
/// learned model. Element `t` of the result is the belief after
/// measurement `t + 1`.
///
/// For projections the first belief is the measurement embedding itself;
/// decoders start from zero and are immediately updated with `y₁`.
pub fn filter_sequence(
    params: &ModelParameters,
    measurements: &[f64],
    cfg: &UkfConfig,
) -> Result<Vec<GaussianBelief>, InferenceError> {
    let ospec = params.observation_spec();
    let p = ospec.output_dim();
    if p == 0 || !measurements.len().is_multiple_of(p) {
        return Err(InferenceError::Dimension {
            expected: p,
            got: measurements.len(),
        });
    }
    let steps = measurements.len() / p;
    let mut beliefs = Vec::with_capacity(steps);
    if steps == 0 {
        return Ok(beliefs);
    }
    let mut ev = ModelEvaluator::new(params)?;
    let y1 = &measurements[..p];
    let mut belief = initial_belief(ospec, params.state_dim(), y1, cfg);
    if !ospec.is_projection() {
        belief = ukf_update(&belief, |x| ev.observe(x), y1, cfg)?;
    }
    beliefs.push(belief);
    for t in 1..steps {
        let prior = ukf_predict(
            beliefs.last().expect("non-empty"),
            |x| ev.transition(x),
            cfg,
        )?;
        beliefs.push(ukf_update(
            &prior,
            |x| ev.observe(x),
            &measurements[t * p..(t + 1) * p],
            cfg,
        )?);
    }
    Ok(beliefs)
}
