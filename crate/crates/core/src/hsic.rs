//! Empirical Hilbert-Schmidt independence criterion and its gradient.
//!
//! For paired samples `x` (n×p) and `y` (n×q) the biased estimator is
//!
//! ```text
//! HSIC(x, y) = (n − 1)⁻² · tr(K_x H K_y H),    H = I − 11ᵀ/n
//! ```
//!
//! where `K_x`, `K_y` are kernel Gram matrices. Because `H` is idempotent and
//! the trace is cyclic this equals `(n − 1)⁻² · tr((H K_x H)(H K_y H))`, which is
//! how it is evaluated here: both Gram matrices are double-centered in O(n²)
//! and combined with an elementwise trace product.
//!
//! The population quantity the estimator targets is
//! `E[k(X,X')k(Y,Y')] + E[k(X,X')]E[k(Y,Y')] − 2E_{XY}[E_{X'}k(X,X') E_{Y'}k(Y,Y')]`;
//! it is not computed anywhere, only estimated from batches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{double_center, pairwise_sq_dists, trace_product, Matrix};
use crate::rng::RngState;
use crate::scalar::Scalar;

/// Default Gaussian bandwidth.
pub const DEFAULT_SIGMA: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    /// `exp(−‖a − b‖² / (2σ²))`
    Gaussian,
    /// `a · b`
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    #[serde(default = "default_kind")]
    pub kind: KernelKind,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
}

fn default_kind() -> KernelKind {
    KernelKind::Gaussian
}

fn default_sigma() -> f64 {
    DEFAULT_SIGMA
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self::gaussian(DEFAULT_SIGMA)
    }
}

impl KernelConfig {
    pub fn gaussian(sigma: f64) -> Self {
        Self {
            kind: KernelKind::Gaussian,
            sigma,
        }
    }

    pub fn linear() -> Self {
        Self {
            kind: KernelKind::Linear,
            sigma: DEFAULT_SIGMA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == KernelKind::Gaussian && !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!(
                "gaussian kernel bandwidth must be positive and finite, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HsicValue<T> {
    pub value: T,
    pub n: usize,
}

pub fn kernel_matrix<T: Scalar>(x: &Matrix<T>, cfg: &KernelConfig) -> Result<Matrix<T>> {
    cfg.validate()?;
    if x.rows() == 0 {
        return Err(Error::shape("kernel_matrix", "empty input"));
    }
    match cfg.kind {
        KernelKind::Gaussian => {
            let denom = T::lit(2.0 * cfg.sigma * cfg.sigma);
            let mut k = pairwise_sq_dists(x)?.map(|d| (-d / denom).exp());
            // exp(0) is 1 already; pinned so the diagonal never depends on rounding
            for i in 0..k.rows() {
                k[(i, i)] = T::one();
            }
            Ok(k)
        }
        KernelKind::Linear => crate::numerics::matmul_nt(x, x),
    }
}

/// Double-centered Gram matrix `H K H` of one argument, reusable across
/// several HSIC evaluations that share it.
#[derive(Clone, Debug)]
pub struct CenteredKernel<T> {
    centered: Matrix<T>,
}

impl<T: Scalar> CenteredKernel<T> {
    pub fn new(x: &Matrix<T>, cfg: &KernelConfig) -> Result<Self> {
        Ok(Self {
            centered: double_center(&kernel_matrix(x, cfg)?)?,
        })
    }

    pub fn n(&self) -> usize {
        self.centered.rows()
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.centered
    }

    /// HSIC between this argument and `other`.
    pub fn hsic(&self, other: &CenteredKernel<T>) -> Result<HsicValue<T>> {
        let n = self.n();
        check_batch(n, other.n())?;
        let scale = T::from_usize_lossy(n - 1).powi(2);
        Ok(HsicValue {
            value: trace_product(&self.centered, &other.centered)? / scale,
            n,
        })
    }

    /// HSIC between `x` and this (fixed) argument, together with `∂HSIC/∂x`.
    pub fn hsic_and_gradient(
        &self,
        x: &Matrix<T>,
        cfg_x: &KernelConfig,
    ) -> Result<(HsicValue<T>, Matrix<T>)> {
        let n = x.rows();
        check_batch(n, self.n())?;
        let kx = kernel_matrix(x, cfg_x)?;
        let kx_centered = CenteredKernel {
            centered: double_center(&kx)?,
        };
        let value = kx_centered.hsic(self)?;
        let grad = gradient_from_gram(x, &kx, &self.centered, cfg_x)?;
        Ok((value, grad))
    }
}

fn check_batch(n: usize, m: usize) -> Result<()> {
    if n != m {
        return Err(Error::shape(
            "hsic",
            format!("paired batches have {n} and {m} rows"),
        ));
    }
    if n < 2 {
        return Err(Error::DegenerateBatch(n));
    }
    Ok(())
}

/// `(n − 1)⁻² tr(K_x H K_y H)`.
pub fn empirical_hsic<T: Scalar>(
    x: &Matrix<T>,
    y: &Matrix<T>,
    cfg_x: &KernelConfig,
    cfg_y: &KernelConfig,
) -> Result<HsicValue<T>> {
    check_batch(x.rows(), y.rows())?;
    CenteredKernel::new(x, cfg_x)?.hsic(&CenteredKernel::new(y, cfg_y)?)
}

/// `∂HSIC(x, y)/∂x`, same shape as `x`.
///
/// With `M = H K_y H`, HSIC is `(n−1)⁻² Σᵢⱼ K_x,ij M_ij`, and `x_i` enters both
/// row and column `i` of `K_x`. For the Gaussian kernel this yields
/// `G_i = 2/(n−1)² · Σⱼ M_ij K_x,ij (x_j − x_i) / σ²`; for the linear kernel
/// `G = 2/(n−1)² · M x`.
pub fn hsic_gradient_wrt_first<T: Scalar>(
    x: &Matrix<T>,
    y: &Matrix<T>,
    cfg_x: &KernelConfig,
    cfg_y: &KernelConfig,
) -> Result<Matrix<T>> {
    check_batch(x.rows(), y.rows())?;
    let centered_y = CenteredKernel::new(y, cfg_y)?;
    let kx = kernel_matrix(x, cfg_x)?;
    gradient_from_gram(x, &kx, centered_y.matrix(), cfg_x)
}

/// Value and gradient with respect to `x` in one pass.
pub fn hsic_value_and_gradient<T: Scalar>(
    x: &Matrix<T>,
    y: &Matrix<T>,
    cfg_x: &KernelConfig,
    cfg_y: &KernelConfig,
) -> Result<(HsicValue<T>, Matrix<T>)> {
    check_batch(x.rows(), y.rows())?;
    CenteredKernel::new(y, cfg_y)?.hsic_and_gradient(x, cfg_x)
}

fn gradient_from_gram<T: Scalar>(
    x: &Matrix<T>,
    kx: &Matrix<T>,
    m: &Matrix<T>,
    cfg_x: &KernelConfig,
) -> Result<Matrix<T>> {
    let n = x.rows();
    let coeff = T::lit(2.0) / T::from_usize_lossy(n - 1).powi(2);
    match cfg_x.kind {
        KernelKind::Gaussian => {
            let inv_s2 = T::one() / T::lit(cfg_x.sigma * cfg_x.sigma);
            let mut g = Matrix::zeros(n, x.cols());
            for i in 0..n {
                let xi = x.row(i).to_vec();
                let gi = g.row_mut(i);
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let w = m[(i, j)] * kx[(i, j)];
                    if w == T::zero() {
                        continue;
                    }
                    for ((gk, &xjk), &xik) in gi.iter_mut().zip(x.row(j)).zip(&xi) {
                        *gk += w * (xjk - xik);
                    }
                }
                for gk in gi.iter_mut() {
                    *gk *= coeff * inv_s2;
                }
            }
            Ok(g)
        }
        KernelKind::Linear => Ok(crate::numerics::matmul(m, x)?.scale(coeff)),
    }
}

/// `q`-quantile of HSIC(x, πy) over `permutations` random row permutations π
/// of `y`, interpolating linearly between order statistics.
pub fn permutation_null_quantile<T: Scalar>(
    x: &Matrix<T>,
    y: &Matrix<T>,
    cfg_x: &KernelConfig,
    cfg_y: &KernelConfig,
    permutations: usize,
    q: f64,
    rng: &mut RngState,
) -> Result<T> {
    if permutations < 100 {
        return Err(Error::Config(format!(
            "permutation null needs at least 100 permutations, got {permutations}"
        )));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Config(format!(
            "quantile must lie in (0, 1), got {q}"
        )));
    }
    check_batch(x.rows(), y.rows())?;
    let n = x.rows();
    let kx = CenteredKernel::new(x, cfg_x)?;
    let ky = CenteredKernel::new(y, cfg_y)?;
    let (a, b) = (kx.matrix(), ky.matrix());
    let scale = T::from_usize_lossy(n - 1).powi(2);

    let mut null: Vec<T> = (0..permutations)
        .map(|_| {
            // permuting rows of y permutes both rows and columns of H K_y H
            let p = rng.permutation(n);
            let mut acc = T::zero();
            for i in 0..n {
                for j in 0..n {
                    acc += a[(i, j)] * b[(p[i], p[j])];
                }
            }
            acc / scale
        })
        .collect();
    null.sort_by(|u, v| u.partial_cmp(v).expect("finite HSIC values"));

    let pos = q * (permutations - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = T::lit(pos - lo as f64);
    Ok(null[lo] + (null[hi] - null[lo]) * frac)
}
