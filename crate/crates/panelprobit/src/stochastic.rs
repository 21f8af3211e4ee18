//! Sampling kernels and the validated containers they operate on.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::normal;

/// Cholesky pivots at or below this are treated as numerically zero.
pub const PIVOT_FLOOR: f64 = 1e-12;
/// Diagonal jitter added once when a pivot lands in (0, PIVOT_FLOOR].
pub const CHOL_JITTER: f64 = 1e-10;
/// Floor on the full determinant for strict correlation-matrix membership.
pub const CORR_DET_FLOOR: f64 = 1e-10;
/// Standardized intervals starting beyond this many sd use the tail sampler.
const TAIL_SWITCH: f64 = 6.0;
/// Full-conditional scans appended to the sequential pass. The one-pass
/// sequential draw is biased (component means off by up to 0.1 at rho = 0.5);
/// each scan leaves the exact truncated MVN invariant and eight of them push
/// the one-shot bias well below Monte Carlo resolution.
const REFINE_SCANS: usize = 8;

/// Off-diagonal correlations of a K x K residual correlation matrix, stored
/// in row-major lower-triangle order: (1,0), (2,0), (2,1), (3,0), ...
/// Construction enforces that the implied matrix is strictly positive
/// definite (all leading minors positive, full determinant above the floor).
#[derive(Debug, Clone, PartialEq)]
pub struct CorrVector {
    dim: usize,
    rho: Vec<f64>,
}

impl CorrVector {
    pub fn identity(dim: usize) -> Self {
        CorrVector { dim, rho: vec![0.0; dim * (dim - 1) / 2] }
    }

    pub fn new(dim: usize, rho: Vec<f64>) -> Result<Self> {
        let expected = dim * (dim - 1) / 2;
        if rho.len() != expected {
            return Err(Error::domain(format!(
                "correlation vector for dimension {dim} needs {expected} entries, got {}",
                rho.len()
            )));
        }
        for (l, &v) in rho.iter().enumerate() {
            if !(v.abs() < 1.0) {
                let (r, c) = Self::index_pair(l);
                return Err(Error::domain(format!(
                    "correlation ({r},{c}) = {v} is outside (-1, 1)"
                )));
            }
        }
        if !corr_matrix_is_pd(dim, &rho) {
            return Err(Error::domain(
                "correlations do not form a positive definite matrix".to_string(),
            ));
        }
        Ok(CorrVector { dim, rho })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_pairs(&self) -> usize {
        self.rho.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.rho
    }

    pub fn entry(&self, index: usize) -> f64 {
        self.rho[index]
    }

    /// Caller must have established membership (see [`corr_pd_after_update`]).
    pub(crate) fn set_unchecked(&mut self, index: usize, value: f64) {
        self.rho[index] = value;
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        let mut m = DMatrix::identity(self.dim, self.dim);
        for (l, &v) in self.rho.iter().enumerate() {
            let (r, c) = Self::index_pair(l);
            m[(r, c)] = v;
            m[(c, r)] = v;
        }
        m
    }

    /// Flat index of pair (r, c) with r > c.
    pub fn pair_index(r: usize, c: usize) -> usize {
        debug_assert!(r > c);
        r * (r - 1) / 2 + c
    }

    /// Inverse of [`CorrVector::pair_index`].
    pub fn index_pair(l: usize) -> (usize, usize) {
        let mut r = 1;
        while (r + 1) * r / 2 <= l {
            r += 1;
        }
        (r, l - r * (r - 1) / 2)
    }
}

/// Symmetric positive definite covariance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CovMatrix {
    m: DMatrix<f64>,
}

impl CovMatrix {
    pub fn identity(dim: usize) -> Self {
        CovMatrix { m: DMatrix::identity(dim, dim) }
    }

    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::domain(format!(
                "covariance matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let scale = m.amax().max(1.0);
        for r in 0..m.nrows() {
            for c in 0..r {
                if (m[(r, c)] - m[(c, r)]).abs() > 1e-8 * scale {
                    return Err(Error::domain(format!(
                        "covariance matrix is asymmetric at ({r},{c})"
                    )));
                }
            }
        }
        if let Err(e) = cholesky_lower(&m) {
            return Err(Error::domain(format!(
                "covariance matrix is not positive definite ({e})"
            )));
        }
        Ok(CovMatrix { m })
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn variance(&self, r: usize) -> f64 {
        self.m[(r, r)]
    }

    pub fn covariance(&self, r: usize, c: usize) -> f64 {
        self.m[(r, c)]
    }
}

/// Per-coordinate open truncation intervals; bounds may be infinite.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncationBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl TruncationBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::domain("truncation bounds differ in length".to_string()));
        }
        for i in 0..lower.len() {
            if lower[i].is_nan() || upper[i].is_nan() || !(lower[i] < upper[i]) {
                return Err(Error::domain(format!(
                    "truncation interval {i} is empty: ({}, {})",
                    lower[i], upper[i]
                )));
            }
        }
        Ok(TruncationBox { lower, upper })
    }

    /// Probit orthant box: outcome 1 maps to (0, inf), outcome 0 to (-inf, 0).
    pub fn from_outcomes(y: &[bool]) -> Self {
        let lower = y.iter().map(|&b| if b { 0.0 } else { f64::NEG_INFINITY }).collect();
        let upper = y.iter().map(|&b| if b { f64::INFINITY } else { 0.0 }).collect();
        TruncationBox { lower, upper }
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn lower(&self, i: usize) -> f64 {
        self.lower[i]
    }

    pub fn upper(&self, i: usize) -> f64 {
        self.upper[i]
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.len()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(&v, (&lo, &hi))| lo < v && v < hi)
    }
}

/// Lower Cholesky factor with one jitter retry: a pivot in (0, PIVOT_FLOOR]
/// adds CHOL_JITTER to the whole diagonal and refactors once; any other
/// failure (or a second one) reports the offending pivot.
pub fn cholesky_lower(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    match chol_attempt(m) {
        Ok(l) => Ok(l),
        Err((_, value)) if value > 0.0 && value <= PIVOT_FLOOR => {
            let mut jittered = m.clone();
            for i in 0..m.nrows() {
                jittered[(i, i)] += CHOL_JITTER;
            }
            chol_attempt(&jittered).map_err(|(pivot, value)| Error::Cholesky { pivot, value })
        }
        Err((pivot, value)) => Err(Error::Cholesky { pivot, value }),
    }
}

fn chol_attempt(m: &DMatrix<f64>) -> std::result::Result<DMatrix<f64>, (usize, f64)> {
    let n = m.nrows();
    debug_assert_eq!(n, m.ncols());
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > PIVOT_FLOOR) {
            return Err((j, d));
        }
        let dj = d.sqrt();
        l[(j, j)] = dj;
        for i in (j + 1)..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / dj;
        }
    }
    Ok(l)
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (m + m.transpose())
}

/// Inverse of a symmetric positive definite matrix via its Cholesky factor.
pub(crate) fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let l = cholesky_lower(m)?;
    let eye = DMatrix::identity(m.nrows(), m.nrows());
    let x = l.solve_lower_triangular(&eye).expect("positive pivots");
    let inv = l.transpose().solve_upper_triangular(&x).expect("positive pivots");
    Ok(symmetrize(&inv))
}

/// mean + L z with z standard normal.
pub fn sample_mvn(mean: &DVector<f64>, chol_lower: &DMatrix<f64>, rng: &mut impl Rng) -> DVector<f64> {
    let k = mean.len();
    let z = DVector::from_fn(k, |_, _| StandardNormal.sample(rng));
    mean + chol_lower * z
}

/// Nudge x into the open interval (lo, hi).
fn clamp_open(x: f64, lo: f64, hi: f64) -> f64 {
    let mut v = x;
    if v <= lo {
        v = lo.next_up();
    }
    if v >= hi {
        v = hi.next_down();
    }
    v
}

/// Draw from N(mean, sd^2) conditioned on the open interval (lower, upper).
///
/// Central intervals invert the CDF directly; intervals starting beyond
/// TAIL_SWITCH standard deviations use an exponential-proposal rejection
/// sampler with a truncated-exponential fallback, so even negligible-mass
/// intervals like (mean + 38 sd, mean + 39 sd) return a finite in-interval
/// value.
pub fn sample_truncated_normal(
    mean: f64,
    sd: f64,
    lower: f64,
    upper: f64,
    rng: &mut impl Rng,
) -> Result<f64> {
    if !(sd > 0.0) || !mean.is_finite() {
        return Err(Error::domain(format!(
            "truncated normal needs finite mean and positive sd, got mean {mean}, sd {sd}"
        )));
    }
    if lower.is_nan() || upper.is_nan() || !(lower < upper) {
        return Err(Error::domain(format!(
            "truncation interval ({lower}, {upper}) is empty"
        )));
    }
    let a = (lower - mean) / sd;
    let b = (upper - mean) / sd;
    if a.next_up() >= b {
        return Err(Error::domain(format!(
            "truncation interval ({lower}, {upper}) has no representable interior"
        )));
    }

    let z = if a >= TAIL_SWITCH {
        sample_upper_tail(a, b, rng)
    } else if b <= -TAIL_SWITCH {
        -sample_upper_tail(-b, -a, rng)
    } else {
        let pa = normal::cdf(a);
        let pb = normal::cdf(b);
        if pb - pa > 1e-14 {
            let u = pa + rng.gen::<f64>() * (pb - pa);
            normal::quantile(u)
        } else {
            // Sliver interval in the central region: the conditional density
            // is flat to within rounding, draw uniformly.
            a + rng.gen::<f64>() * (b - a)
        }
    };
    let z = clamp_open(z, a, b);
    Ok(clamp_open(mean + sd * z, lower, upper))
}

/// Standard normal conditioned on (a, b) with a >= TAIL_SWITCH.
fn sample_upper_tail(a: f64, b: f64, rng: &mut impl Rng) -> f64 {
    let lambda = 0.5 * (a + (a * a + 4.0).sqrt());
    for _ in 0..64 {
        let e: f64 = rng.gen();
        let x = a - (1.0 - e).ln() / lambda;
        if x < b {
            let accept: f64 = rng.gen();
            let d = x - lambda;
            if accept < (-0.5 * d * d + 0.5 * (a - lambda) * (a - lambda)).exp() {
                return x;
            }
        }
    }
    // Negligible-mass interval: exact inverse of the Exp(a) density truncated
    // to (a, b), which matches the normal tail to O((b - a)^2 / a) here.
    let u = rng.gen::<f64>();
    if b.is_finite() {
        let span = -(-a * (b - a)).exp_m1(); // 1 - exp(-a (b - a))
        a - (-u * span).ln_1p() / a
    } else {
        a - (1.0 - u).ln() / a
    }
}

/// Cached pieces for univariate full-conditional updates of one MVN vector.
#[derive(Debug, Clone)]
pub struct MvnConditional {
    omega: DMatrix<f64>,
    cond_sd: Vec<f64>,
}

impl MvnConditional {
    pub fn from_covariance(cov: &DMatrix<f64>) -> Result<Self> {
        let omega = spd_inverse(cov)?;
        let cond_sd = (0..omega.nrows()).map(|r| (1.0 / omega[(r, r)]).sqrt()).collect();
        Ok(MvnConditional { omega, cond_sd })
    }

    pub fn dim(&self) -> usize {
        self.omega.nrows()
    }

    /// One Gibbs scan over coordinates; leaves the truncated MVN with the
    /// given mean and this covariance, restricted to `bx`, exactly invariant.
    pub fn scan(
        &self,
        y: &mut [f64],
        mean: &[f64],
        bx: &TruncationBox,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let k = self.dim();
        for r in 0..k {
            let mut dot = 0.0;
            for s in 0..k {
                if s != r {
                    dot += self.omega[(r, s)] * (y[s] - mean[s]);
                }
            }
            let m = mean[r] - dot / self.omega[(r, r)];
            y[r] = sample_truncated_normal(m, self.cond_sd[r], bx.lower(r), bx.upper(r), rng)?;
        }
        Ok(())
    }
}

/// Sequential in-box draw: component k is a univariate truncated normal with
/// bounds updated from the Cholesky rows above it. Lands inside the box by
/// construction but is NOT a draw from the truncated MVN.
fn sequential_box_draw(
    mean: &[f64],
    gamma: &DMatrix<f64>,
    bx: &TruncationBox,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let k = mean.len();
    let mut eps = vec![0.0; k];
    let mut y = vec![0.0; k];
    for r in 0..k {
        let mut acc = mean[r];
        for j in 0..r {
            acc += gamma[(r, j)] * eps[j];
        }
        let g = gamma[(r, r)];
        let lo = if bx.lower(r).is_finite() { (bx.lower(r) - acc) / g } else { f64::NEG_INFINITY };
        let hi = if bx.upper(r).is_finite() { (bx.upper(r) - acc) / g } else { f64::INFINITY };
        eps[r] = sample_truncated_normal(0.0, 1.0, lo, hi, rng)?;
        y[r] = clamp_open(acc + g * eps[r], bx.lower(r), bx.upper(r));
    }
    Ok(y)
}

/// Draw from the MVN with the given mean and correlation matrix, conditioned
/// on the box. A sequential pass supplies the initial in-box point and
/// REFINE_SCANS invariant full-conditional scans converge it to the exact
/// truncated distribution.
pub fn sample_truncated_mvn(
    mean: &[f64],
    corr: &CorrVector,
    bx: &TruncationBox,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let k = corr.dim();
    if mean.len() != k || bx.len() != k {
        return Err(Error::domain(format!(
            "truncated MVN dimension mismatch: corr {k}, mean {}, box {}",
            mean.len(),
            bx.len()
        )));
    }
    let sigma = corr.to_matrix();
    let gamma = cholesky_lower(&sigma)?;
    let mut y = sequential_box_draw(mean, &gamma, bx, rng)?;
    let cond = MvnConditional::from_covariance(&sigma)?;
    for _ in 0..REFINE_SCANS {
        cond.scan(&mut y, mean, bx, rng)?;
    }
    Ok(y)
}

/// Inverse Wishart draw via the Bartlett decomposition; `dof` must exceed
/// dim - 1.
pub fn sample_inverse_wishart(
    scale: &CovMatrix,
    dof: f64,
    rng: &mut impl Rng,
) -> Result<CovMatrix> {
    let k = scale.dim();
    if !(dof > (k as f64) - 1.0) {
        return Err(Error::domain(format!(
            "inverse Wishart needs dof > {} for dimension {k}, got {dof}",
            k - 1
        )));
    }
    let v = spd_inverse(scale.as_matrix())?;
    let lv = cholesky_lower(&v)?;
    let mut a = DMatrix::zeros(k, k);
    for i in 0..k {
        let chi = ChiSquared::new(dof - i as f64)
            .map_err(|e| Error::domain(format!("chi-squared({}) unavailable: {e}", dof - i as f64)))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = StandardNormal.sample(rng);
        }
    }
    // W = (Lv A)(Lv A)^T ~ Wishart(scale^{-1}, dof); invert through the factor.
    let la = &lv * &a;
    let eye = DMatrix::identity(k, k);
    let x = la.solve_lower_triangular(&eye).expect("positive pivots");
    let sigma = symmetrize(&(x.transpose() * &x));
    Ok(CovMatrix { m: sigma })
}

/// Full Sylvester check: every leading principal minor positive and the full
/// determinant above CORR_DET_FLOOR.
pub fn corr_matrix_is_pd(dim: usize, rho: &[f64]) -> bool {
    if rho.len() != dim * (dim - 1) / 2 || rho.iter().any(|v| !(v.abs() < 1.0)) {
        return false;
    }
    let mut m = DMatrix::identity(dim, dim);
    for (l, &v) in rho.iter().enumerate() {
        let (r, c) = CorrVector::index_pair(l);
        m[(r, c)] = v;
        m[(c, r)] = v;
    }
    for j in 1..=dim {
        let det = m.view((0, 0), (j, j)).clone_owned().determinant();
        let floor = if j == dim { CORR_DET_FLOOR } else { 0.0 };
        if !(det > floor) {
            return false;
        }
    }
    true
}

/// Membership check for a single-entry update of a known-PD correlation
/// matrix. Only the full determinant needs testing: the proposal can be
/// permuted so the changed entry sits in the last row and column, and the
/// untouched leading submatrix inherits positive definiteness from the
/// current point.
pub fn corr_pd_after_update(current: &CorrVector, index: usize, value: f64) -> bool {
    if !(value.abs() < 1.0) {
        return false;
    }
    let mut m = current.to_matrix();
    let (r, c) = CorrVector::index_pair(index);
    m[(r, c)] = value;
    m[(c, r)] = value;
    m.determinant() > CORR_DET_FLOOR
}
