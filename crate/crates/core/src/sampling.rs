//! Matrix-normal and inverse-Wishart samplers plus the seeded RNG streams.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_lower, is_spd};

/// Random number generator used for every stochastic routine.
pub type StreamRng = ChaCha8Rng;

/// Domain tags keep independent consumers of one user seed apart.
pub mod domain {
    pub const SAMPLER: u64 = 0x5341_4d50;
    pub const PHANTOM: u64 = 0x5048_414e;
    pub const RESTING: u64 = 0x5245_5354;
    pub const PARADIGM: u64 = 0x5041_5241;
    pub const GROUP: u64 = 0x4752_4f55;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream for `(seed, domain, index)`.
///
/// The index is usually a voxel's linear index, so results never depend on
/// the order in which workers pick voxels up.
pub fn stream_rng(seed: u64, domain: u64, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(domain)));
    rng.set_stream(index);
    rng
}

/// Fills a `rows x cols` matrix with i.i.d. standard normal draws.
pub fn standard_normal_matrix<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Matrix normal `N(M, U, V)` with left (row) scale `U` and right (column)
/// scale `V`; `vec(X)` has covariance `V ⊗ U`.
#[derive(Debug, Clone)]
pub struct MatrixNormal {
    mean: DMatrix<f64>,
    left: DMatrix<f64>,
    right: DMatrix<f64>,
}

impl MatrixNormal {
    pub fn new(mean: DMatrix<f64>, u: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<Self> {
        let (p, q) = mean.shape();
        if u.shape() != (p, p) || v.shape() != (q, q) {
            return Err(Error::Parameter(format!(
                "matrix normal scales {:?}/{:?} do not match a {p}x{q} mean",
                u.shape(),
                v.shape()
            )));
        }
        Ok(Self {
            mean,
            left: cholesky_lower(u)?,
            right: cholesky_lower(v)?,
        })
    }

    /// Builds from precomputed lower factors of the two scales.
    pub fn from_factors(mean: DMatrix<f64>, left: DMatrix<f64>, right: DMatrix<f64>) -> Self {
        debug_assert_eq!(left.nrows(), mean.nrows());
        debug_assert_eq!(right.nrows(), mean.ncols());
        Self { mean, left, right }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DMatrix<f64> {
        let (p, q) = self.mean.shape();
        let z = standard_normal_matrix(p, q, rng);
        &self.mean + &self.left * z * self.right.transpose()
    }
}

/// One draw `X = M + L_U Z L_V'` from the matrix normal `N(M, U, V)`.
pub fn sample_matrix_normal<R: Rng + ?Sized>(
    m: &DMatrix<f64>,
    u: &DMatrix<f64>,
    v: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    Ok(MatrixNormal::new(m.clone(), u, v)?.sample(rng))
}

/// Inverse Wishart in the harmonic-mean parameterization `W⁻¹_n(S)`: the
/// standard inverse Wishart with `n + q - 1` degrees of freedom and scale
/// matrix `n·S`. Draws concentrate on `S` as `n` grows, and the mean is
/// `n·S / (n - 2)` for `n > 2`.
///
/// Sampling uses the Bartlett factor `A` of a `W(n + q - 1, I)` draw and the
/// lower factor `K` of `n·S`: `Σ = (K A⁻ᵀ)(K A⁻ᵀ)ᵀ`.
#[derive(Debug, Clone)]
pub struct InverseWishart {
    scale_factor: DMatrix<f64>,
    chi: Vec<ChiSquared<f64>>,
}

impl InverseWishart {
    pub fn new(n: f64, s: &DMatrix<f64>) -> Result<Self> {
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Parameter(format!(
                "inverse Wishart degrees of freedom must be positive, got {n}"
            )));
        }
        if !is_spd(s, 1e-8) {
            return Err(Error::Parameter(
                "inverse Wishart scale is not symmetric positive definite".into(),
            ));
        }
        let q = s.nrows();
        let dof = n + q as f64 - 1.0;
        let chi = (0..q)
            .map(|i| {
                ChiSquared::new(dof - i as f64)
                    .map_err(|e| Error::Parameter(format!("chi-squared degrees of freedom: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            scale_factor: cholesky_lower(&(s * n))?,
            chi,
        })
    }

    pub fn dim(&self) -> usize {
        self.scale_factor.nrows()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DMatrix<f64> {
        let q = self.dim();
        if q == 1 {
            let k = self.scale_factor[(0, 0)];
            return DMatrix::from_element(1, 1, k * k / self.chi[0].sample(rng));
        }
        let mut a = DMatrix::zeros(q, q);
        for i in 0..q {
            a[(i, i)] = self.chi[i].sample(rng).sqrt();
            for j in 0..i {
                a[(i, j)] = StandardNormal.sample(rng);
            }
        }
        // A is lower triangular with a strictly positive diagonal.
        let a_inv = a
            .solve_lower_triangular(&DMatrix::identity(q, q))
            .expect("Bartlett factor has a positive diagonal");
        let g = &self.scale_factor * a_inv.transpose();
        let mut sigma = &g * g.transpose();
        crate::linalg::symmetrize(&mut sigma);
        sigma
    }
}

/// One draw of `Σ ~ W⁻¹_n(S)`; see [`InverseWishart`] for the convention.
pub fn sample_inverse_wishart<R: Rng + ?Sized>(
    n: f64,
    s: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    Ok(InverseWishart::new(n, s)?.sample(rng))
}

/// Closed-form mean `n·S / (n - 2)` of [`InverseWishart`], defined for `n > 2`.
pub fn inverse_wishart_mean(n: f64, s: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    (n > 2.0).then(|| s * (n / (n - 2.0)))
}
