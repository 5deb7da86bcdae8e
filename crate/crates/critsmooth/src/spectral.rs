//! Discretized transfer operators P_s, P_s* on a sphere grid: the spectral
//! function m(s), eigenfunction H^s, eigenmeasures ν_s and ν_s*, stationary
//! direction law π, the bias function b, and criticality calibration.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::cone_geometry::{perron, ConeMatrix, Direction, DirectionGrid};
use crate::error::{Error, Result};
use crate::model::EnsembleSpec;
use crate::rng::{purpose, stream};

const POWER_BUDGET: usize = 100_000;
const DEGENERACY_GAP: f64 = 1e-12;
const BALL_KERNEL_SAMPLE: usize = 10_000;
const BALL_KERNEL_SEED: u64 = 0x5EED_0F_BA11;

/// Discretization settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpectralOptions {
    /// sphere_grid resolution
    pub resolution: usize,
    /// sample size of the common random kernel for ball ensembles
    pub mc_sample: usize,
}

impl SpectralOptions {
    pub fn default_for(d: usize) -> Self {
        SpectralOptions { resolution: if d == 2 { 256 } else { 24 }, mc_sample: BALL_KERNEL_SAMPLE }
    }
}

/// The weight law used for the operators: exact μ-atoms, or a fixed sample.
#[derive(Debug, Clone)]
pub struct Kernel {
    pub atoms: Vec<(f64, ConeMatrix)>,
    pub exact: bool,
}

impl Kernel {
    pub fn from_spec(spec: &EnsembleSpec, mc_sample: usize) -> Self {
        if spec.is_finite() {
            Kernel { atoms: spec.mu_atoms().iter().map(|a| (a.prob, a.matrix.clone())).collect(), exact: true }
        } else {
            let mut rng = stream(BALL_KERNEL_SEED, purpose::KERNEL_SAMPLE);
            let p = 1.0 / mc_sample as f64;
            Kernel { atoms: (0..mc_sample).map(|_| (p, spec.sample_mu(&mut rng))).collect(), exact: false }
        }
    }
}

/// Grid for the operators: sphere_grid plus the Perron directions of every
/// positive support matrix and its transpose, so rank-one images are exact.
pub fn spectral_grid(spec: &EnsembleSpec, resolution: usize) -> Result<DirectionGrid> {
    let mut extra = Vec::new();
    if spec.is_finite() {
        for a in spec.mu_atoms() {
            if a.matrix.is_positive() {
                extra.push(perron(&a.matrix)?.1);
                extra.push(perron(&a.matrix.transpose())?.1);
            }
        }
    }
    DirectionGrid::new(spec.d(), resolution, &extra)
}

/// Image data of both operators on a grid, independent of the exponent s.
#[derive(Debug)]
pub struct Discretization {
    grid: DirectionGrid,
    kernel: Kernel,
    mean_n: f64,
    /// per grid point, per kernel atom: (grid index of Mᵀ∘u, log|Mᵀu|)
    adjoint: Vec<Vec<(u32, f64)>>,
    /// per grid point, per kernel atom: (grid index of M∘u, log|Mu|)
    forward: Vec<Vec<(u32, f64)>>,
}

impl Discretization {
    pub fn new(spec: &EnsembleSpec, grid: DirectionGrid, mc_sample: usize) -> Result<Arc<Self>> {
        let kernel = Kernel::from_spec(spec, mc_sample);
        let image = |x: DVector<f64>| -> Result<(u32, f64)> {
            let n = x.norm();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::ZeroImage);
            }
            Ok((grid.nearest(&(x / n)) as u32, n.ln()))
        };
        let mut adjoint = Vec::with_capacity(grid.len());
        let mut forward = Vec::with_capacity(grid.len());
        for u in grid.points() {
            adjoint.push(kernel.atoms.iter().map(|(_, m)| image(m.apply_transpose(u.coords()))).collect::<Result<Vec<_>>>()?);
            forward.push(kernel.atoms.iter().map(|(_, m)| image(m.apply(u.coords()))).collect::<Result<Vec<_>>>()?);
        }
        Ok(Arc::new(Discretization { grid, kernel, mean_n: spec.mean_n(), adjoint, forward }))
    }

    pub fn for_spec(spec: &EnsembleSpec, opts: SpectralOptions) -> Result<Arc<Self>> {
        Self::new(spec, spectral_grid(spec, opts.resolution)?, opts.mc_sample)
    }

    pub fn grid(&self) -> &DirectionGrid {
        &self.grid
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    fn rows(&self, images: &[Vec<(u32, f64)>], s: f64) -> Vec<Vec<(usize, f64)>> {
        images
            .iter()
            .map(|row| {
                let mut r: Vec<(usize, f64)> = row.iter().zip(&self.kernel.atoms).map(|(&(j, ln), (p, _))| (j as usize, p * (s * ln).exp())).collect();
                r.sort_by_key(|x| x.0);
                let mut out: Vec<(usize, f64)> = Vec::with_capacity(r.len());
                for (j, w) in r {
                    match out.last_mut() {
                        Some(last) if last.0 == j => last.1 += w,
                        _ => out.push((j, w)),
                    }
                }
                out
            })
            .collect()
    }

    /// Eigen data at exponent s.
    pub fn eigen(self: &Arc<Self>, s: f64) -> Result<EigenSystem> {
        let n = self.grid.len();
        let a = self.rows(&self.adjoint, s);
        let b = self.rows(&self.forward, s);

        let (k, mut h, res_right) = right_power(&a)?;
        let (k_nu_star, nu_star, res_star) = left_power(&a, n)?;
        let (k_nu, nu, res_left) = left_power(&b, n)?;
        let second = second_eigenvalue(&a, &h, &nu_star);
        if (k - second).abs() < DEGENERACY_GAP * k.max(1.0) {
            return Err(Error::DegenerateSpectrum { k, second });
        }

        // pin H at the grid point nearest the diagonal: H(u*) = Σ ν_j ⟨u*, y_j⟩^s
        let diag = Direction::diagonal(self.grid.dim());
        let pin = self.grid.nearest(diag.coords());
        let target = dual_value(&self.grid, &nu, self.grid.point(pin), s);
        let scale = target / h[pin];
        h.iter_mut().for_each(|x| *x *= scale);

        let drift = (0..n)
            .map(|i| {
                self.adjoint[i].iter().zip(&self.kernel.atoms).map(|(&(j, ln), (p, _))| p * (s * ln).exp() * h[j as usize] * (-ln)).sum::<f64>() / (k * h[i])
            })
            .collect();

        Ok(EigenSystem {
            s,
            k,
            m: self.mean_n * k,
            h,
            nu,
            nu_star,
            pi: None,
            b: None,
            g_bar: drift,
            alpha_flag: false,
            second,
            residuals: OperatorResiduals {
                right: res_right,
                left: res_left,
                left_star: res_star,
                k_left: (k_nu - k).abs() / k,
                k_left_star: (k_nu_star - k).abs() / k,
            },
            poisson: None,
            rows: Arc::new(a),
            disc: Arc::clone(self),
        })
    }
}

fn dual_value(grid: &DirectionGrid, nu: &[f64], u: &Direction, s: f64) -> f64 {
    grid.points().iter().zip(nu).filter(|(_, w)| **w > 0.0).map(|(y, w)| w * u.dot(y).powf(s)).sum()
}

fn apply_rows(rows: &[Vec<(usize, f64)>], x: &[f64]) -> Vec<f64> {
    rows.iter().map(|r| r.iter().map(|(j, w)| w * x[*j]).sum()).collect()
}

fn apply_left(rows: &[Vec<(usize, f64)>], x: &[f64], n: usize) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for (i, r) in rows.iter().enumerate() {
        if x[i] != 0.0 {
            for (j, w) in r {
                y[*j] += x[i] * w;
            }
        }
    }
    y
}

fn sup(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |a, b| a.max(b.abs()))
}

/// Power iteration for the right eigenvector: (k, H with ‖H‖∞ = 1, relative residual).
fn right_power(rows: &[Vec<(usize, f64)>]) -> Result<(f64, Vec<f64>, f64)> {
    let n = rows.len();
    let mut x = vec![1.0; n];
    let mut best = f64::INFINITY;
    let mut stall = 0;
    for _ in 0..POWER_BUDGET {
        let y = apply_rows(rows, &x);
        let k = sup(&y);
        if !(k > 0.0 && k.is_finite()) {
            return Err(Error::NoConvergence { what: "right eigenvector (zero or non-finite image)", iterations: 0 });
        }
        let res = y.iter().zip(&x).map(|(a, b)| (a - k * b).abs()).fold(0.0, f64::max) / k;
        x = y.into_iter().map(|v| v / k).collect();
        if res <= 1e-14 || (stall > 50 && res < 1e-10) {
            let y = apply_rows(rows, &x);
            let k = sup(&y);
            let res = y.iter().zip(&x).map(|(a, b)| (a - k * b).abs()).fold(0.0, f64::max) / (k * sup(&x));
            return Ok((k, x, res));
        }
        if res < best * 0.999 {
            best = res;
            stall = 0;
        } else {
            stall += 1;
        }
    }
    Err(Error::NoConvergence { what: "right eigenvector power iteration", iterations: POWER_BUDGET })
}

/// Power iteration for a left eigenvector normalized to Σ = 1: (k, ν, ‖νA − kν‖₁).
fn left_power(rows: &[Vec<(usize, f64)>], n: usize) -> Result<(f64, Vec<f64>, f64)> {
    let mut x = vec![1.0 / n as f64; n];
    let mut best = f64::INFINITY;
    let mut stall = 0;
    for _ in 0..POWER_BUDGET {
        let y = apply_left(rows, &x, n);
        let k: f64 = y.iter().sum();
        if !(k > 0.0 && k.is_finite()) {
            return Err(Error::NoConvergence { what: "left eigenvector (zero or non-finite image)", iterations: 0 });
        }
        let res: f64 = y.iter().zip(&x).map(|(a, b)| (a - k * b).abs()).sum::<f64>() / k;
        x = y.into_iter().map(|v| v / k).collect();
        if res <= 1e-14 || (stall > 50 && res < 1e-10) {
            let y = apply_left(rows, &x, n);
            let k: f64 = y.iter().sum();
            let res = y.iter().zip(&x).map(|(a, b)| (a - k * b).abs()).sum::<f64>();
            return Ok((k, x, res));
        }
        if res < best * 0.999 {
            best = res;
            stall = 0;
        } else {
            stall += 1;
        }
    }
    Err(Error::NoConvergence { what: "left eigenvector power iteration", iterations: POWER_BUDGET })
}

/// Modulus of the second eigenvalue by power iteration on the deflated operator.
fn second_eigenvalue(rows: &[Vec<(usize, f64)>], h: &[f64], nu_star: &[f64]) -> f64 {
    let n = rows.len();
    let k_proj: f64 = nu_star.iter().zip(h).map(|(a, b)| a * b).sum();
    let deflate = |x: &[f64]| -> Vec<f64> {
        let c: f64 = nu_star.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() / k_proj;
        x.iter().zip(h).map(|(xi, hi)| xi - c * hi).collect()
    };
    let mut x = deflate(&(0..n).map(|i| ((i as f64) * 1.618_033_988_75 + 0.5).sin()).collect::<Vec<_>>());
    let mut est = 0.0;
    for it in 0..300 {
        let nx = sup(&x);
        if nx == 0.0 {
            return 0.0;
        }
        let y = deflate(&apply_rows(rows, &x));
        let ny = sup(&y);
        if it >= 200 {
            est = ny / nx;
        }
        if ny == 0.0 {
            return 0.0;
        }
        x = y.into_iter().map(|v| v / ny).collect();
    }
    est
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OperatorResiduals {
    /// ‖P*H − kH‖∞ / ‖H‖∞
    pub right: f64,
    /// ‖ν P − k ν‖₁
    pub left: f64,
    /// ‖ν* P* − k ν*‖₁
    pub left_star: f64,
    /// relative mismatch of the eigenvalue from the ν iteration
    pub k_left: f64,
    pub k_left_star: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PoissonReport {
    /// max_i |b_i − (ḡ_i + Σ_j P̄_ij b_j)|
    pub residual: f64,
    /// ‖π P̄ − π‖₁
    pub stationarity: f64,
    /// max_i |Σ_j P̄_ij − 1| before row renormalization
    pub row_sum_error: f64,
    /// Σ π ḡ, the drift of the level under the stationary law
    pub stationary_drift: f64,
    /// Σ π b
    pub pi_b: f64,
}

/// Discretized spectral data at one exponent.
#[derive(Debug, Clone)]
pub struct EigenSystem {
    pub s: f64,
    pub k: f64,
    pub m: f64,
    pub h: Vec<f64>,
    pub nu: Vec<f64>,
    pub nu_star: Vec<f64>,
    pub pi: Option<Vec<f64>>,
    pub b: Option<Vec<f64>>,
    /// E_u^s S₁ at every grid point (tilted one-step drift of the level)
    pub g_bar: Vec<f64>,
    pub alpha_flag: bool,
    pub second: f64,
    pub residuals: OperatorResiduals,
    pub poisson: Option<PoissonReport>,
    rows: Arc<Vec<Vec<(usize, f64)>>>,
    disc: Arc<Discretization>,
}

/// One outcome of the tilted step from a direction.
#[derive(Debug, Clone)]
pub struct TiltedOutcome {
    pub atom: usize,
    pub prob: f64,
    pub image: Direction,
    /// −log|Mᵀu|
    pub increment: f64,
}

impl EigenSystem {
    pub fn grid(&self) -> &DirectionGrid {
        &self.disc.grid
    }

    pub fn kernel(&self) -> &Kernel {
        &self.disc.kernel
    }

    pub fn discretization(&self) -> &Arc<Discretization> {
        &self.disc
    }

    pub fn mean_n(&self) -> f64 {
        self.disc.mean_n
    }

    /// H^s at a unit vector: grid value, else one Nyström step (exact
    /// kernels) or interpolation (sampled kernels).
    pub fn h_at(&self, u: &DVector<f64>) -> f64 {
        let grid = &self.disc.grid;
        if let Some(i) = grid.exact_index(u) {
            return self.h[i];
        }
        if self.disc.kernel.exact {
            self.disc
                .kernel
                .atoms
                .iter()
                .map(|(p, m)| {
                    let x = m.apply_transpose(u);
                    let n = x.norm();
                    p * n.powf(self.s) * self.h[grid.nearest(&(x / n))]
                })
                .sum::<f64>()
                / self.k
        } else {
            grid.interpolation(u).iter().map(|(i, w)| w * self.h[*i]).sum()
        }
    }

    /// s-homogeneous extension H^s(x) = |x|^s H^s(x/|x|).
    pub fn h_hom(&self, x: &DVector<f64>) -> f64 {
        let n = x.norm();
        if n == 0.0 {
            return 0.0;
        }
        n.powf(self.s) * self.h_at(&(x / n))
    }

    /// b at a unit vector (requires stationary_and_b).
    pub fn b_at(&self, u: &DVector<f64>) -> f64 {
        let b = self.b.as_ref().expect("b requires stationary_and_b");
        let grid = &self.disc.grid;
        if let Some(i) = grid.exact_index(u) {
            return b[i];
        }
        if self.disc.kernel.exact {
            let mut num = 0.0;
            let mut den = 0.0;
            for (p, m) in &self.disc.kernel.atoms {
                let x = m.apply_transpose(u);
                let n = x.norm();
                let j = grid.nearest(&(&x / n));
                let w = p * n.powf(self.s) * self.h[j];
                num += w * (-n.ln() + b[j]);
                den += w;
            }
            num / den
        } else {
            grid.interpolation(u).iter().map(|(i, w)| w * b[*i]).sum()
        }
    }

    /// The tilted one-step law from u over the kernel atoms; probabilities
    /// p|Mᵀu|^s H^s(Mᵀ∘u) normalized by their total, which is also returned.
    pub fn tilted_outcomes(&self, u: &DVector<f64>) -> (Vec<TiltedOutcome>, f64) {
        let mut out = Vec::with_capacity(self.disc.kernel.atoms.len());
        let mut total = 0.0;
        for (a, (p, m)) in self.disc.kernel.atoms.iter().enumerate() {
            let x = m.apply_transpose(u);
            let n = x.norm();
            let dir = x / n;
            let w = p * n.powf(self.s) * self.h_at(&dir);
            total += w;
            out.push(TiltedOutcome { atom: a, prob: w, image: Direction::from_unit_unchecked(dir), increment: -n.ln() });
        }
        out.iter_mut().for_each(|o| o.prob /= total);
        (out, total)
    }

    /// Discrete operator rows of P_s* (aggregated by image grid point).
    pub fn adjoint_rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    /// P̄_ij = A_ij H_j / (k H_i), rows renormalized; also the largest row-sum error.
    pub fn tilted_matrix(&self) -> (Vec<Vec<(usize, f64)>>, f64) {
        let mut err: f64 = 0.0;
        let rows = self
            .rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let mut row: Vec<(usize, f64)> = r.iter().map(|(j, a)| (*j, a * self.h[*j] / (self.k * self.h[i]))).collect();
                let s: f64 = row.iter().map(|x| x.1).sum();
                err = err.max((s - 1.0).abs());
                row.iter_mut().for_each(|x| x.1 /= s);
                row
            })
            .collect();
        (rows, err)
    }
}

/// Builds the discretization and solves at exponent s.
pub fn eigen_solve(spec: &EnsembleSpec, s: f64, grid: DirectionGrid) -> Result<EigenSystem> {
    Discretization::new(spec, grid, BALL_KERNEL_SAMPLE)?.eigen(s)
}

/// m(s) and its central-difference derivative along a list of exponents.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralCurve {
    pub s: Vec<f64>,
    pub k: Vec<f64>,
    pub m: Vec<f64>,
    pub m_prime: Vec<f64>,
}

impl SpectralCurve {
    /// Smallest discrete second difference of log m (≥ −1e-6 on a log-convex curve).
    pub fn min_log_convexity(&self) -> f64 {
        let l: Vec<f64> = self.m.iter().map(|x| x.ln()).collect();
        (1..l.len().saturating_sub(1))
            .map(|i| {
                let (h0, h1) = (self.s[i] - self.s[i - 1], self.s[i + 1] - self.s[i]);
                (l[i + 1] - l[i]) / h1 - (l[i] - l[i - 1]) / h0
            })
            .fold(f64::INFINITY, f64::min)
    }
}

pub fn m_curve_on(disc: &Arc<Discretization>, s_list: &[f64]) -> Result<SpectralCurve> {
    let mut curve = SpectralCurve { s: Vec::new(), k: Vec::new(), m: Vec::new(), m_prime: Vec::new() };
    for &s in s_list {
        let k = disc.eigen(s)?.k;
        let h = 1e-5 * (1.0 + s.abs());
        let kp = disc.eigen(s + h)?.k;
        let km = disc.eigen(s - h)?.k;
        curve.s.push(s);
        curve.k.push(k);
        curve.m.push(disc.mean_n * k);
        curve.m_prime.push(disc.mean_n * (kp - km) / (2.0 * h));
    }
    Ok(curve)
}

pub fn m_curve(spec: &EnsembleSpec, s_list: &[f64], opts: SpectralOptions) -> Result<SpectralCurve> {
    m_curve_on(&Discretization::for_spec(spec, opts)?, s_list)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CriticalCalibration {
    pub alpha: f64,
    /// global scale θ of the calibrated spec
    pub theta_star: f64,
    /// |m(α) − 1|
    pub res_m: f64,
    /// |m′(α)| by central difference
    pub res_mprime: f64,
}

/// Derivative of log m by a five-point stencil.
fn dlog_m(disc: &Arc<Discretization>, s: f64) -> Result<f64> {
    let h = (1e-3f64).min(s / 4.0);
    let f = |x: f64| -> Result<f64> { Ok(disc.eigen(x)?.m.ln()) };
    Ok((-f(s + 2.0 * h)? + 8.0 * f(s + h)? - 8.0 * f(s - h)? + f(s - 2.0 * h)?) / (12.0 * h))
}

/// g(s) = log m(s) − s (log m)′(s) for the spec's own scale.
fn g_fn(disc: &Arc<Discretization>, s: f64) -> Result<f64> {
    Ok(disc.eigen(s)?.m.ln() - s * dlog_m(disc, s)?)
}

/// Rescales θ so that m(α) = 1 and m′(α) = 0 for some α ∈ (0, 1].
pub fn calibrate_critical(spec: &EnsembleSpec, opts: SpectralOptions) -> Result<(EnsembleSpec, CriticalCalibration)> {
    let disc = Discretization::for_spec(spec, opts)?;
    let g1 = g_fn(&disc, 1.0)?;
    let alpha = if g1 > 0.0 {
        return Err(Error::CalibrationOutOfRange { g1 });
    } else if g1 == 0.0 {
        1.0
    } else {
        let (mut lo, mut hi) = (1e-3, 1.0);
        if g_fn(&disc, lo)? <= 0.0 {
            return Err(Error::CalibrationOutOfRange { g1 });
        }
        while hi - lo > 1e-14 {
            let mid = 0.5 * (lo + hi);
            if g_fn(&disc, mid)? > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };
    let theta_star = spec.theta() * (-dlog_m(&disc, alpha)?).exp();
    let critical = spec.with_theta(theta_star)?;
    let cdisc = Discretization::for_spec(&critical, opts)?;
    let curve = m_curve_on(&cdisc, &[alpha])?;
    let cal = CriticalCalibration { alpha, theta_star, res_m: (curve.m[0] - 1.0).abs(), res_mprime: curve.m_prime[0].abs() };
    Ok((critical, cal))
}

/// Fills π ∝ H ⊙ ν* and b solving (I − P̄)b = ḡ with Σ π b = 0.
pub fn stationary_and_b(eig: &EigenSystem) -> Result<EigenSystem> {
    let n = eig.h.len();
    let (pbar, row_sum_error) = eig.tilted_matrix();
    let mut pi: Vec<f64> = eig.h.iter().zip(&eig.nu_star).map(|(a, b)| a * b).collect();
    let z: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|x| *x /= z);
    let pi_next = apply_left(&pbar, &pi, n);
    let stationarity: f64 = pi_next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();

    let g = &eig.g_bar;
    let drift: f64 = pi.iter().zip(g).map(|(a, b)| a * b).sum();
    // fundamental matrix Z = (I − P̄ + 1πᵀ)⁻¹ applied to the centered ḡ
    let mut sys = DMatrix::<f64>::identity(n, n);
    for (i, row) in pbar.iter().enumerate() {
        for (j, p) in row {
            sys[(i, *j)] -= p;
        }
        for j in 0..n {
            sys[(i, j)] += pi[j];
        }
    }
    let rhs = DVector::from_iterator(n, g.iter().map(|x| x - drift));
    let lu = sys.lu();
    let b = lu.solve(&rhs).ok_or(Error::SingularPoisson)?;
    if b.iter().any(|x| !x.is_finite()) {
        return Err(Error::SingularPoisson);
    }
    let b: Vec<f64> = b.iter().copied().collect();
    let pb = apply_rows(&pbar, &b);
    let residual = (0..n).map(|i| (b[i] - (g[i] - drift + pb[i])).abs()).fold(0.0, f64::max);
    let pi_b = pi.iter().zip(&b).map(|(a, c)| a * c).sum();
    let mut out = eig.clone();
    out.pi = Some(pi);
    out.b = Some(b);
    out.poisson = Some(PoissonReport { residual, stationarity, row_sum_error, stationary_drift: drift, pi_b });
    Ok(out)
}

/// Calibrated spec, calibration record and the eigen data at α with π and b.
pub fn critical_system(spec: &EnsembleSpec, opts: SpectralOptions) -> Result<(EnsembleSpec, CriticalCalibration, EigenSystem)> {
    let (critical, cal) = calibrate_critical(spec, opts)?;
    let disc = Discretization::for_spec(&critical, opts)?;
    let mut eig = stationary_and_b(&disc.eigen(cal.alpha)?)?;
    eig.alpha_flag = true;
    Ok((critical, cal, eig))
}

/// Rescales θ so that (log m)′(s) = 0, making the s-tilted level walk
/// drift-free; m(s) is left as it comes. Used for ensembles that admit no
/// critical exponent in (0, 1].
pub fn center_at(spec: &EnsembleSpec, s: f64, opts: SpectralOptions) -> Result<(EnsembleSpec, EigenSystem)> {
    let disc = Discretization::for_spec(spec, opts)?;
    let theta = spec.theta() * (-dlog_m(&disc, s)?).exp();
    let centered = spec.with_theta(theta)?;
    let eig = stationary_and_b(&Discretization::for_spec(&centered, opts)?.eigen(s)?)?;
    Ok((centered, eig))
}

/// Eigen data at α for a spec that is already critical at α.
pub fn critical_system_at(spec: &EnsembleSpec, alpha: f64, opts: SpectralOptions) -> Result<EigenSystem> {
    let disc = Discretization::for_spec(spec, opts)?;
    let mut eig = stationary_and_b(&disc.eigen(alpha)?)?;
    eig.alpha_flag = true;
    Ok(eig)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnitExponentCheck {
    pub m1: f64,
    pub en_lambda_b: f64,
    pub diff: f64,
    /// max relative deviation of H¹(u)/⟨u, v_B⟩ from its value at the pin point
    pub proportionality_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualityReport {
    pub max_error: f64,
    pub unit: Option<UnitExponentCheck>,
}

/// Compares H^s with ∫⟨u,y⟩^s ν_s(dy) on the grid, and at s = 1 compares
/// with the Perron data of B = E M.
pub fn duality_check(spec: &EnsembleSpec, eig: &EigenSystem) -> DualityReport {
    let grid = eig.grid();
    let max_error = grid.points().iter().enumerate().map(|(i, u)| (eig.h[i] - dual_value(grid, &eig.nu, u, eig.s)).abs()).fold(0.0, f64::max);
    let unit = if (eig.s - 1.0).abs() < 1e-12 {
        let b = if let Some(ball) = spec.ball() {
            ball.center.scaled(spec.theta())
        } else {
            let mut acc = DMatrix::zeros(spec.d(), spec.d());
            for a in spec.mu_atoms() {
                acc += a.matrix.entries() * a.prob;
            }
            ConeMatrix::new(acc).expect("mean of nonnegative matrices")
        };
        perron(&b).ok().map(|(lambda, v)| {
            let en_lambda_b = spec.mean_n() * lambda;
            let ratios: Vec<f64> = grid.points().iter().enumerate().map(|(i, u)| eig.h[i] / u.dot(&v)).collect();
            let pin = grid.nearest(Direction::diagonal(spec.d()).coords());
            let c = ratios[pin];
            let proportionality_error = ratios.iter().map(|r| (r / c - 1.0).abs()).fold(0.0, f64::max);
            UnitExponentCheck { m1: eig.m, en_lambda_b, diff: (eig.m - en_lambda_b).abs(), proportionality_error }
        })
    } else {
        None
    };
    DualityReport { max_error, unit }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::*;
    use crate::model::{EnsembleKind, Template};

    fn opts() -> SpectralOptions {
        SpectralOptions::default_for(2)
    }

    /// closed form m(s) = 2θ^s(0.99 + 0.01·100^s)
    fn m_closed(theta: f64, s: f64) -> f64 {
        2.0 * theta.powf(s) * (0.99 + 0.01 * 100f64.powf(s))
    }

    fn dm_closed(theta: f64, s: f64) -> f64 {
        2.0 * theta.powf(s) * (theta.ln() * (0.99 + 0.01 * 100f64.powf(s)) + 0.01 * 100f64.powf(s) * 100f64.ln())
    }

    /// bisection on the closed-form g
    fn alpha_oracle() -> (f64, f64) {
        let g = |s: f64| m_closed(1.0, s).ln() - s * dm_closed(1.0, s) / m_closed(1.0, s);
        let (mut lo, mut hi) = (1e-6, 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) > 0.0 {
                lo = mid
            } else {
                hi = mid
            }
        }
        let a = 0.5 * (lo + hi);
        (a, (-dm_closed(1.0, a) / m_closed(1.0, a)).exp())
    }

    #[test]
    fn fixture_constants_match_closed_form_bisection() {
        let (a, t) = alpha_oracle();
        assert!((a - RANK1_2D_ALPHA).abs() < 1e-13, "{a}");
        assert!((t - RANK1_2D_THETA).abs() < 1e-13, "{t}");
    }

    #[test]
    fn rank1_eigen_data_matches_rank_one_reduction() {
        let theta = 0.8;
        let spec = rank1_2d(theta);
        for s in [0.3, 0.79, 1.0, 2.0] {
            let eig = eigen_solve(&spec, s, spectral_grid(&spec, 64).unwrap()).unwrap();
            let k = theta.powf(s) * (0.99 + 0.01 * 100f64.powf(s));
            assert!((eig.k - k).abs() <= 1e-10 * k, "s={s}: {} vs {k}", eig.k);
            let e = Direction::diagonal(2);
            for (i, u) in eig.grid().points().iter().enumerate() {
                assert!((eig.h[i] - e.dot(u).powf(s)).abs() < 1e-10);
            }
            let ie = eig.grid().exact_index(e.coords()).unwrap();
            assert!((eig.nu[ie] - 1.0).abs() < 1e-12);
            assert!(eig.residuals.right < 1e-12 && eig.residuals.left < 1e-12);
        }
    }

    #[test]
    fn single_matrix_spectral_radius() {
        let t = ConeMatrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let spec = EnsembleSpec::new(2, 1.0, EnsembleKind::FiniteTuple(vec![Template { prob: 1.0, weights: vec![t.clone()] }])).unwrap();
        // oracle: |(Tⁿ)ᵀu|^{1/n} for large n, and the Perron root
        let mut p = DVector::from_vec(vec![1.0, 0.0]);
        let mut log = 0.0;
        for _ in 0..200 {
            p = t.apply_transpose(&p);
            let n = p.norm();
            log += n.ln();
            p /= n;
        }
        let lambda = (3.0 + 5f64.sqrt()) / 2.0;
        assert!((log / 200.0 - lambda.ln()).abs() < 1e-2);
        for s in [0.5, 1.0, 1.7] {
            let eig = eigen_solve(&spec, s, spectral_grid(&spec, 256).unwrap()).unwrap();
            assert!((eig.k - lambda.powf(s)).abs() < 1e-10 * eig.k, "{} vs {}", eig.k, lambda.powf(s));
        }
    }

    /// exact categorical linear algebra on {w₁, w₂}
    fn b_fixture_oracle(theta: f64, s: f64) -> (f64, [f64; 2], [f64; 2]) {
        let [(v1, w1), (v2, w2)] = rank1_2d_b_pairs();
        let vs = [v1, v2];
        let ws = [w1, w2];
        let ec = 0.99 + 0.01 * 100f64.powf(s);
        // A[i][j] = E over atoms landing on w_j of |Mᵀw_i|^s = ½ θ^s E C^s (v_j·w_i)^s
        let a = |i: usize, j: usize| 0.5 * theta.powf(s) * ec * vs[j].dot(&ws[i]).powf(s);
        let m = DMatrix::from_fn(2, 2, |i, j| a(i, j));
        let (k, h) = perron(&ConeMatrix::new(m.clone()).unwrap()).unwrap();
        let (_, l) = perron(&ConeMatrix::new(m.transpose()).unwrap()).unwrap();
        (k, [h.coords()[0], h.coords()[1]], [l.coords()[0], l.coords()[1]])
    }

    #[test]
    fn rank1_b_eigen_data_matches_two_state_oracle() {
        let spec = rank1_2d_b(0.4);
        let s = 0.8;
        let eig = eigen_solve(&spec, s, spectral_grid(&spec, 256).unwrap()).unwrap();
        let (k, h, l) = b_fixture_oracle(0.4, s);
        assert!((eig.k - k).abs() < 1e-12 * k);
        let [(_, w1), (_, w2)] = rank1_2d_b_pairs();
        let i1 = eig.grid().exact_index(w1.coords()).unwrap();
        let i2 = eig.grid().exact_index(w2.coords()).unwrap();
        assert!((eig.h[i1] / eig.h[i2] - h[0] / h[1]).abs() < 1e-10);
        let ns1 = eig.nu_star[i1] / (eig.nu_star[i1] + eig.nu_star[i2]);
        assert!((ns1 - l[0] / (l[0] + l[1])).abs() < 1e-10);
        assert!(eig.residuals.right < 1e-12 && eig.residuals.left < 1e-12 && eig.residuals.left_star < 1e-12);
    }

    #[test]
    fn m_curve_values() {
        let spec = rank1_2d(1.0);
        let c = m_curve(&spec, &[0.5, 1.0, 1.5, 2.0], SpectralOptions { resolution: 32, ..opts() }).unwrap();
        assert!((c.m[1] - 3.98).abs() < 1e-10);
        assert!((c.m[0] - 2.18).abs() < 1e-10);
        let dm = dm_closed(1.0, 0.5);
        assert!((c.m_prime[0] - dm).abs() < 1e-6 * dm);
        assert!(c.min_log_convexity() >= -1e-6);
        let c0 = m_curve(&spec, &[1e-9], SpectralOptions { resolution: 32, ..opts() }).unwrap();
        assert!((c0.m[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn calibration_reaches_criticality() {
        let (spec, cal) = calibrate_critical(&rank1_2d(1.0), opts()).unwrap();
        assert!((cal.alpha - RANK1_2D_ALPHA).abs() < 1e-9);
        assert!((spec.theta() - RANK1_2D_THETA).abs() < 1e-9);
        assert!((m_closed(cal.theta_star, cal.alpha) - 1.0).abs() <= 1e-10);
        assert!(dm_closed(cal.theta_star, cal.alpha).abs() <= 1e-8);
        assert!(cal.res_m <= 1e-10 && cal.res_mprime <= 1e-8, "{cal:?}");
    }

    #[test]
    fn calibration_out_of_range() {
        match calibrate_critical(&c14(1.0), opts()) {
            Err(Error::CalibrationOutOfRange { g1 }) => {
                let g = 3.5f64.ln() - 2.0 * 4f64.ln() / 3.5;
                assert!((g1 - g).abs() < 1e-8);
                assert!((g1 - 0.4606).abs() < 1e-4);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rank1_bias_vanishes_at_e() {
        let (spec, cal, eig) = critical_system(&rank1_2d(1.0), opts()).unwrap();
        let e = Direction::diagonal(2);
        assert!(eig.b_at(e.coords()).abs() < 1e-8);
        // exact E_e^α S₁ at the calibration
        let t = spec.theta();
        let w1 = 0.99 * t.powf(cal.alpha);
        let w2 = 0.01 * (100.0 * t).powf(cal.alpha);
        let drift = (w1 * -(t.ln()) + w2 * -((100.0 * t).ln())) / (w1 + w2);
        assert!(drift.abs() < 1e-8);
        let p = eig.poisson.unwrap();
        assert!(p.residual < 1e-10 && p.pi_b.abs() < 1e-12);
    }

    #[test]
    fn rank1_b_poisson_matches_two_state_solve() {
        let (_, _, eig) = critical_system(&rank1_2d_b(1.0), opts()).unwrap();
        let [(_, w1), (_, w2)] = rank1_2d_b_pairs();
        let ws = [w1, w2];
        // exact tilted chain on {w₁, w₂}
        let mut p = [[0.0; 2]; 2];
        let mut g = [0.0; 2];
        for i in 0..2 {
            let (outs, _) = eig.tilted_outcomes(ws[i].coords());
            for o in &outs {
                let j = if (o.image.coords() - ws[0].coords()).norm() < 1e-12 { 0 } else { 1 };
                p[i][j] += o.prob;
                g[i] += o.prob * o.increment;
            }
        }
        let pi0 = p[1][0] / (p[0][1] + p[1][0]);
        let pi = [pi0, 1.0 - pi0];
        let drift = pi[0] * g[0] + pi[1] * g[1];
        // b0 − b1 from (I − P)b = g − drift, then Σπb = 0
        let diff = (g[0] - drift) / p[0][1];
        let b1 = -pi[0] * diff;
        let b0 = b1 + diff;
        assert!((eig.b_at(ws[0].coords()) - b0).abs() < 1e-8);
        assert!((eig.b_at(ws[1].coords()) - b1).abs() < 1e-8);
        for (i, w) in ws.iter().enumerate() {
            let lhs: f64 = eig.tilted_outcomes(w.coords()).0.iter().map(|o| o.prob * (o.increment + eig.b_at(o.image.coords()))).sum();
            assert!((lhs - eig.b_at(w.coords())).abs() < 1e-8, "state {i}");
        }
        let ipi = eig.pi.as_ref().unwrap();
        let i0 = eig.grid().exact_index(ws[0].coords()).unwrap();
        assert!((ipi[i0] - pi[0]).abs() < 1e-10);
    }

    #[test]
    fn duality_exact_for_rank_one() {
        let spec = rank1_2d(0.5);
        let eig = eigen_solve(&spec, 0.7, spectral_grid(&spec, 128).unwrap()).unwrap();
        assert!(duality_check(&spec, &eig).max_error < 1e-12);
        let eig = eigen_solve(&spec, 1.0, spectral_grid(&spec, 128).unwrap()).unwrap();
        let r = duality_check(&spec, &eig);
        let u = r.unit.unwrap();
        assert!(u.diff <= 1e-8 && u.proportionality_error < 1e-10);
    }

    #[test]
    fn duality_at_one_for_b_fixture() {
        let spec = rank1_2d_b(0.3);
        let eig = eigen_solve(&spec, 1.0, spectral_grid(&spec, 256).unwrap()).unwrap();
        let r = duality_check(&spec, &eig);
        assert!(r.max_error < 1e-8, "{r:?}");
        assert!(r.unit.unwrap().diff < 1e-8);
    }

    #[test]
    fn ball_duality_within_monte_carlo_tolerance() {
        let spec = ball_2d(1.0);
        let eig = eigen_solve(&spec, 1.0, spectral_grid(&spec, 256).unwrap()).unwrap();
        let r = duality_check(&spec, &eig);
        let u = r.unit.unwrap();
        assert!(u.diff / u.m1 < 1e-2, "{u:?}");
        assert!(eig.residuals.right < 1e-2 && eig.residuals.left < 1e-2);
    }

    #[test]
    fn ball_has_no_critical_exponent_but_can_be_centered() {
        let o = SpectralOptions { resolution: 64, mc_sample: 2000 };
        match calibrate_critical(&ball_2d(1.0), o) {
            Err(Error::CalibrationOutOfRange { g1 }) => assert!(g1 > 0.6 && g1 < 2f64.ln()),
            other => panic!("{other:?}"),
        }
        let (spec, eig) = center_at(&ball_2d(1.0), 1.0, o).unwrap();
        let c = m_curve(&spec, &[1.0], o).unwrap();
        assert!(c.m_prime[0].abs() / c.m[0] < 1e-6);
        assert!(eig.poisson.unwrap().stationary_drift.abs() < 1e-6);
    }
}
