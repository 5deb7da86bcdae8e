//! The critical fixed point through derivative-martingale environments and
//! its diagnostics: fixed-point residual, D/G curves and the renewal
//! equation, slow variation, the log law and homogeneity of Z.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::branching::{disintegrate_population, grow_population, Population, SeedRecord};
use crate::cone_geometry::{ConeMatrix, Direction};
use crate::error::{Error, Result};
use crate::model::EnsembleSpec;
use crate::mrw::{simulate, step_tilted, ChainState, RegenSchedule, Trajectory};
use crate::rng::purpose;
use crate::spectral::EigenSystem;
use crate::stats::{median, ols, LineFit, MeanSe};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FixedPointConfig {
    pub replicates: usize,
    pub depth: usize,
    /// scale constant K of the fixed point
    pub k_scale: f64,
    /// distinct products per generation
    pub cap: usize,
    pub seed: u64,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        FixedPointConfig { replicates: 2000, depth: 15, k_scale: 1.0, cap: 1_000_000, seed: 0 }
    }
}

/// Key of a vector up to relative rounding at 1e-11.
fn vec_key(x: &DVector<f64>) -> Vec<i64> {
    let n = x.norm();
    let mut k = Vec::with_capacity(x.len() + 1);
    k.push(if n > 0.0 { (n.ln() * 1e11).round() as i64 } else { i64::MIN });
    k.extend(x.iter().map(|c| if n > 0.0 { (c / n * 1e11).round() as i64 } else { 0 }));
    k
}

/// Laplace transform φ̂(ru) = mean_r exp(−r^α K 𝒲̂_r(u)) over R environments.
/// Negative 𝒲̂ values are replaced by 0 in the exponent.
#[derive(Debug)]
pub struct FixedPointModel {
    pub alpha: f64,
    pub k_scale: f64,
    pub depth: usize,
    pub seed: u64,
    envs: Arc<Vec<Population>>,
    eig: EigenSystem,
    dw_cache: Mutex<HashMap<Vec<i64>, Arc<Vec<f64>>>>,
    phi_cache: Mutex<HashMap<Vec<i64>, f64>>,
}

pub fn build_fixed_point(spec: &EnsembleSpec, eig: &EigenSystem, cfg: FixedPointConfig) -> Result<FixedPointModel> {
    let envs: Vec<Population> = (0..cfg.replicates as u64)
        .into_par_iter()
        .map(|r| grow_population(spec, cfg.depth, SeedRecord { seed: cfg.seed, stream: purpose::FIXED_POINT + r }, cfg.cap))
        .collect::<Result<_>>()?;
    Ok(FixedPointModel::from_parts(eig.clone(), Arc::new(envs), cfg.k_scale, cfg.depth, cfg.seed))
}

impl FixedPointModel {
    fn from_parts(eig: EigenSystem, envs: Arc<Vec<Population>>, k_scale: f64, depth: usize, seed: u64) -> Self {
        FixedPointModel { alpha: eig.s, k_scale, depth, seed, envs, eig, dw_cache: Mutex::default(), phi_cache: Mutex::default() }
    }

    /// The same environments with another scale constant.
    pub fn with_scale(&self, k_scale: f64) -> Self {
        FixedPointModel::from_parts(self.eig.clone(), self.envs.clone(), k_scale, self.depth, self.seed)
    }

    pub fn replicates(&self) -> usize {
        self.envs.len()
    }

    pub fn eig(&self) -> &EigenSystem {
        &self.eig
    }

    pub fn environments(&self) -> &[Population] {
        &self.envs
    }

    /// 𝒲̂_r(u) for every environment (unclamped).
    pub fn derivative_values(&self, u: &DVector<f64>) -> Arc<Vec<f64>> {
        let key = vec_key(u);
        if let Some(v) = self.dw_cache.lock().expect("cache lock").get(&key) {
            return v.clone();
        }
        let v = Arc::new(self.envs.iter().map(|p| p.derivative_martingale(u, &self.eig)).collect::<Vec<_>>());
        self.dw_cache.lock().expect("cache lock").insert(key, v.clone());
        v
    }

    pub fn positive_fraction(&self, u: &DVector<f64>) -> f64 {
        let v = self.derivative_values(u);
        v.iter().filter(|w| **w > 0.0).count() as f64 / v.len() as f64
    }

    /// Per-environment values exp(−|x|^α K 𝒲̂_r(x/|x|)⁺).
    pub fn replicate_values(&self, x: &DVector<f64>) -> Vec<f64> {
        let r = x.norm();
        if r == 0.0 {
            return vec![1.0; self.envs.len()];
        }
        let c = r.powf(self.alpha) * self.k_scale;
        self.derivative_values(&(x / r)).iter().map(|w| (-c * w.max(0.0)).exp()).collect()
    }

    pub fn phi(&self, x: &DVector<f64>) -> f64 {
        let key = vec_key(x);
        if let Some(v) = self.phi_cache.lock().expect("cache lock").get(&key) {
            return *v;
        }
        let v = self.replicate_values(x).iter().sum::<f64>() / self.envs.len() as f64;
        self.phi_cache.lock().expect("cache lock").insert(key, v);
        v
    }

    pub fn phi_with_se(&self, x: &DVector<f64>) -> MeanSe {
        MeanSe::of(&self.replicate_values(x))
    }

    /// φ̂ on directions × radii.
    pub fn laplace_grid(&self, directions: &[Direction], radii: &[f64]) -> LaplaceGrid {
        let mut values = Vec::new();
        for u in directions {
            for &r in radii {
                let m = self.phi_with_se(&(u.coords() * r));
                values.push(LaplacePoint { r, u: u.coords().as_slice().to_vec(), phi: m.mean, se: m.se });
            }
        }
        LaplaceGrid { values }
    }

    /// D(u,t) = (1 − φ̂(e^{−t}u)) / (e^{−αt} H^α(u)).
    pub fn d(&self, u: &DVector<f64>, t: f64) -> f64 {
        (1.0 - self.phi(&(u * (-t).exp()))) / ((-self.alpha * t).exp() * self.eig.h_at(u))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LaplacePoint {
    pub r: f64,
    pub u: Vec<f64>,
    pub phi: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LaplaceGrid {
    pub values: Vec<LaplacePoint>,
}

impl LaplaceGrid {
    /// Largest increase of φ̂ along any ray, in units of the combined se.
    pub fn max_increase_z(&self) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for w in self.values.windows(2) {
            if w[0].u == w[1].u && w[1].r > w[0].r {
                let se = (w[0].se.powi(2) + w[1].se.powi(2)).sqrt().max(1e-300);
                worst = worst.max((w[1].phi - w[0].phi) / se);
            }
        }
        worst
    }
}

/// Weighted sample of tuples: finite ensembles merge repeated templates.
fn sample_tuples<R: Rng + ?Sized>(spec: &EnsembleSpec, m: usize, rng: &mut R) -> Vec<(f64, Vec<ConeMatrix>)> {
    if spec.is_finite() {
        let mut counts = vec![0usize; spec.templates().len()];
        for _ in 0..m {
            counts[spec.sample_template_index(rng)] += 1;
        }
        counts.iter().enumerate().filter(|(_, c)| **c > 0).map(|(i, c)| (*c as f64 / m as f64, spec.templates()[i].weights.clone())).collect()
    } else {
        (0..m).map(|_| (1.0 / m as f64, spec.sample_tuple(rng).matrices)).collect()
    }
}

/// Weighted sample of one tilted step (U₁, S₁) from u.
fn sample_kernel<R: Rng + ?Sized>(spec: &EnsembleSpec, eig: &EigenSystem, u: &Direction, m: usize, rng: &mut R) -> Result<Vec<(f64, DVector<f64>, f64)>> {
    let start = ChainState { u: u.clone(), s: 0.0, n: 0 };
    if spec.is_finite() {
        let (outcomes, _) = eig.tilted_outcomes(u.coords());
        let mut counts = vec![0usize; outcomes.len()];
        for _ in 0..m {
            let x: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = outcomes.len() - 1;
            for (i, o) in outcomes.iter().enumerate() {
                acc += o.prob;
                if x < acc {
                    pick = i;
                    break;
                }
            }
            counts[pick] += 1;
        }
        Ok(outcomes.iter().zip(counts).filter(|(_, c)| *c > 0).map(|(o, c)| (c as f64 / m as f64, o.image.coords().clone(), o.increment)).collect())
    } else {
        (0..m).map(|_| step_tilted(spec, eig, &start, rng).map(|s| (1.0 / m as f64, s.u.coords().clone(), s.s))).collect()
    }
}

/// Weighted variance Σ w (x − mean)² of a weighted sample with Σ w = 1.
fn weighted_var(items: &[(f64, f64)]) -> f64 {
    let mean: f64 = items.iter().map(|(w, x)| w * x).sum();
    items.iter().map(|(w, x)| w * (x - mean).powi(2)).sum()
}

fn centered_var(psi: &[f64]) -> f64 {
    MeanSe::of(psi).sd.powi(2)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualPoint {
    pub r: f64,
    pub u: Vec<f64>,
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
    pub se: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualReport {
    pub tuples: usize,
    pub points: Vec<ResidualPoint>,
    pub max_residual: f64,
    pub max_abs_z: f64,
}

/// φ̂(x) against the mean over M sampled tuples of Π φ̂(T_iᵀx). The standard
/// error combines the environment noise (through the per-environment
/// influence of the residual) with the tuple sampling noise.
pub fn fixed_point_residual<R: Rng + ?Sized>(fpm: &FixedPointModel, spec: &EnsembleSpec, points: &[(f64, Direction)], m: usize, rng: &mut R) -> ResidualReport {
    let tuples = sample_tuples(spec, m, rng);
    let nr = fpm.replicates();
    let mut out = Vec::new();
    for (r, u) in points {
        let x = u.coords() * *r;
        let lhs_vals = fpm.replicate_values(&x);
        let lhs = lhs_vals.iter().sum::<f64>() / nr as f64;
        let mut psi = lhs_vals.clone();
        let mut prods = Vec::with_capacity(tuples.len());
        for (w, ms) in &tuples {
            let ys: Vec<DVector<f64>> = ms.iter().map(|t| t.apply_transpose(&x)).collect();
            let phis: Vec<f64> = ys.iter().map(|y| fpm.phi(y)).collect();
            let prod: f64 = phis.iter().product();
            prods.push((*w, prod));
            for (i, y) in ys.iter().enumerate() {
                let others: f64 = phis.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, p)| p).product();
                let vals = fpm.replicate_values(y);
                for (p, v) in psi.iter_mut().zip(vals) {
                    *p -= w * v * others;
                }
            }
        }
        let rhs: f64 = prods.iter().map(|(w, p)| w * p).sum();
        let se = (centered_var(&psi) / nr as f64 + weighted_var(&prods) / m as f64).sqrt();
        let residual = lhs - rhs;
        let z = if residual == 0.0 { 0.0 } else { residual / se };
        out.push(ResidualPoint { r: *r, u: u.coords().as_slice().to_vec(), lhs, rhs, residual: residual.abs(), se, z });
    }
    ResidualReport {
        tuples: m,
        max_residual: out.iter().map(|p| p.residual).fold(0.0, f64::max),
        max_abs_z: out.iter().map(|p| p.z.abs()).fold(0.0, f64::max),
        points: out,
    }
}

/// Median |increment| of the tilted chain, from a short run.
fn median_abs_increment<R: Rng + ?Sized>(spec: &EnsembleSpec, eig: &EigenSystem, u: &Direction, rng: &mut R) -> Result<f64> {
    let traj = simulate(spec, eig, u, 4000, rng)?;
    Ok(median(&traj.increments().iter().map(|y| y.abs()).collect::<Vec<_>>()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RenewalPoint {
    pub t: f64,
    pub d: f64,
    pub d_se: f64,
    pub g: f64,
    pub g_se: f64,
    /// E_u^α D(U₁, t + S₁)
    pub ed: f64,
    /// D − (E D(U₁, t+S₁) − G)
    pub residual: f64,
    pub residual_se: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegenRenewalPoint {
    pub t: f64,
    pub d_hat: f64,
    pub g_hat: f64,
    /// D̂(t) − (mean D̂(t + V) − ĝ(t))
    pub residual: f64,
    /// D̂(t) / D(u₀, t)
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RenewalDiagnostics {
    pub u: Vec<f64>,
    pub t_max: f64,
    pub points: Vec<RenewalPoint>,
    /// min G over the grid
    pub g_min: f64,
    /// largest increase of e^{−αt}G between consecutive grid points, in se units
    pub g_monotone_z: f64,
    pub regen: Option<Vec<RegenRenewalPoint>>,
    /// partial sums of sup_{[k,k+1)} ĝ over unit intervals
    pub g_tail: Option<Vec<(f64, f64)>>,
}

/// One t-point of the renewal check with influence-based standard errors.
fn renewal_point(fpm: &FixedPointModel, u: &Direction, t: f64, kernel: &[(f64, DVector<f64>, f64)], tuples: &[(f64, Vec<ConeMatrix>)], m: usize) -> RenewalPoint {
    let alpha = fpm.alpha;
    let eig = fpm.eig();
    let nr = fpm.replicates() as f64;
    let hu = eig.h_at(u.coords());
    let x = u.coords() * (-t).exp();
    let c0 = (-alpha * t).exp() * hu;
    let vals = fpm.replicate_values(&x);
    let phi = vals.iter().sum::<f64>() / nr;
    let d = (1.0 - phi) / c0;
    let mut psi_d: Vec<f64> = vals.iter().map(|v| -v / c0).collect();
    let mut psi_r = psi_d.clone();

    let mut ed_items = Vec::with_capacity(kernel.len());
    for (w, u1, s1) in kernel {
        let x1 = u1 * (-(t + s1)).exp();
        let c1 = (-alpha * (t + s1)).exp() * eig.h_at(u1);
        let v1 = fpm.replicate_values(&x1);
        let phi1 = v1.iter().sum::<f64>() / nr;
        ed_items.push((*w, (1.0 - phi1) / c1));
        for (p, v) in psi_r.iter_mut().zip(v1) {
            *p += w * v / c1;
        }
    }
    let ed: f64 = ed_items.iter().map(|(w, v)| w * v).sum();

    let scale = (alpha * t).exp() / hu;
    let mut g_items = Vec::with_capacity(tuples.len());
    let mut psi_g = vec![0.0; fpm.replicates()];
    for (w, ms) in tuples {
        let ys: Vec<DVector<f64>> = ms.iter().map(|tm| tm.apply_transpose(&x)).collect();
        let phis: Vec<f64> = ys.iter().map(|y| fpm.phi(y)).collect();
        let prod: f64 = phis.iter().product();
        g_items.push((*w, scale * (prod + phis.iter().map(|p| 1.0 - p).sum::<f64>() - 1.0)));
        for (i, y) in ys.iter().enumerate() {
            let others: f64 = phis.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, p)| p).product();
            let vals = fpm.replicate_values(y);
            for (p, v) in psi_g.iter_mut().zip(vals) {
                *p += w * scale * v * (others - 1.0);
            }
        }
    }
    let g: f64 = g_items.iter().map(|(w, v)| w * v).sum();
    for (p, q) in psi_r.iter_mut().zip(&psi_g) {
        *p += q;
    }
    psi_d.iter_mut().for_each(|p| *p = -*p);
    let d_se = (centered_var(&psi_d) / nr).sqrt();
    let g_se = (centered_var(&psi_g) / nr + weighted_var(&g_items) / m as f64).sqrt();
    let residual = d - (ed - g);
    let residual_se = (centered_var(&psi_r) / nr + weighted_var(&ed_items) / m as f64 + weighted_var(&g_items) / m as f64).sqrt();
    let z = if residual == 0.0 { 0.0 } else { residual / residual_se };
    RenewalPoint { t, d, d_se, g, g_se, ed, residual, residual_se, z }
}

/// G(u,t) over a fixed weighted tuple sample.
fn g_value(fpm: &FixedPointModel, u: &DVector<f64>, t: f64, tuples: &[(f64, Vec<ConeMatrix>)]) -> f64 {
    let x = u * (-t).exp();
    let scale = (fpm.alpha * t).exp() / fpm.eig().h_at(u);
    tuples
        .iter()
        .map(|(w, ms)| {
            let phis: Vec<f64> = ms.iter().map(|tm| fpm.phi(&tm.apply_transpose(&x))).collect();
            w * scale * (phis.iter().product::<f64>() + phis.iter().map(|p| 1.0 - p).sum::<f64>() - 1.0)
        })
        .sum()
}

/// Renewal data D̂ and ĝ from the regeneration cycles of a trajectory.
struct CycleSamples {
    /// (U_{σ_{j+1}−1}, V_j)
    ends: Vec<(DVector<f64>, f64)>,
    /// per cycle: (U_n, S_n − S_{σ_j−1}) for n ∈ [σ_{j+1}−1, σ_{j+2}−2]
    paths: Vec<Vec<(DVector<f64>, f64)>>,
}

fn cycle_samples(traj: &Trajectory, sched: &RegenSchedule, max_cycles: usize) -> CycleSamples {
    let st = &traj.states;
    let sig = &sched.sigma;
    let mut ends = Vec::new();
    let mut paths = Vec::new();
    for j in 0..sig.len().saturating_sub(2).min(max_cycles) {
        let base = st[sig[j] - 1].s;
        let e = sig[j + 1] - 1;
        ends.push((st[e].u.coords().clone(), st[e].s - base));
        paths.push((e..=sig[j + 2] - 2).map(|n| (st[n].u.coords().clone(), st[n].s - base)).collect());
    }
    CycleSamples { ends, paths }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RenewalConfig {
    /// tuple and kernel sample size
    pub samples: usize,
    /// cycles used for D̂ and ĝ
    pub max_cycles: usize,
}

impl Default for RenewalConfig {
    fn default() -> Self {
        RenewalConfig { samples: 5000, max_cycles: 2000 }
    }
}

/// D, G and the renewal-equation residual on a t grid, with common random
/// numbers across t. With a regeneration schedule (and its trajectory) also
/// D̂, ĝ, their renewal residual, D̂/D(u,t) and the tail report of ĝ.
#[allow(non_snake_case)]
pub fn D_G_curves<R: Rng + ?Sized>(
    fpm: &FixedPointModel,
    spec: &EnsembleSpec,
    u: &Direction,
    t_grid: &[f64],
    cfg: RenewalConfig,
    rng: &mut R,
    regen: Option<(&Trajectory, &RegenSchedule)>,
) -> Result<RenewalDiagnostics> {
    let eig = fpm.eig();
    let t_max = 0.8 * fpm.depth as f64 * median_abs_increment(spec, eig, u, rng)?;
    if let Some(&t) = t_grid.iter().find(|t| **t > t_max) {
        return Err(Error::DepthInsufficient { t, t_max });
    }
    let tuples = sample_tuples(spec, cfg.samples, rng);
    let kernel = sample_kernel(spec, eig, u, cfg.samples, rng)?;
    let points: Vec<RenewalPoint> = t_grid.iter().map(|&t| renewal_point(fpm, u, t, &kernel, &tuples, cfg.samples)).collect();
    let g_min = points.iter().map(|p| p.g).fold(f64::INFINITY, f64::min);
    let g_monotone_z = points
        .windows(2)
        .map(|w| {
            let a = (-fpm.alpha * w[0].t).exp();
            let b = (-fpm.alpha * w[1].t).exp();
            let se = ((a * w[0].g_se).powi(2) + (b * w[1].g_se).powi(2)).sqrt().max(1e-300);
            (b * w[1].g - a * w[0].g) / se
        })
        .fold(f64::NEG_INFINITY, f64::max);

    let (regen_points, g_tail) = match regen {
        None => (None, None),
        Some((traj, sched)) => {
            let cs = cycle_samples(traj, sched, cfg.max_cycles);
            if cs.ends.is_empty() {
                return Err(Error::InvalidModel("regeneration schedule has fewer than three regenerations".into()));
            }
            let nc = cs.ends.len() as f64;
            let d_hat = |t: f64| cs.ends.iter().map(|(uu, v)| fpm.d(uu, t + v)).sum::<f64>() / nc;
            let g_hat = |t: f64| cs.paths.iter().map(|p| p.iter().map(|(uu, s)| g_value(fpm, uu, t + s, &tuples)).sum::<f64>()).sum::<f64>() / nc;
            let pts = t_grid
                .iter()
                .map(|&t| {
                    let dh = d_hat(t);
                    let gh = g_hat(t);
                    let shifted = cs.ends.iter().map(|(_, v)| d_hat(t + v)).sum::<f64>() / nc;
                    RegenRenewalPoint { t, d_hat: dh, g_hat: gh, residual: dh - (shifted - gh), ratio: dh / fpm.d(u.coords(), t) }
                })
                .collect();
            let lo = t_grid.iter().copied().fold(f64::INFINITY, f64::min).floor();
            let hi = t_grid.iter().copied().fold(f64::NEG_INFINITY, f64::max).ceil();
            let mut tail = Vec::new();
            let mut acc = 0.0;
            let mut k = lo;
            while k < hi {
                let sup = (0..4).map(|i| g_hat(k + 0.25 * i as f64)).fold(0.0, f64::max);
                acc += sup;
                tail.push((k, acc));
                k += 1.0;
            }
            (Some(pts), Some(tail))
        }
    };
    Ok(RenewalDiagnostics { u: u.coords().as_slice().to_vec(), t_max, points, g_min, g_monotone_z, regen: regen_points, g_tail })
}

/// Default reference direction: the π-weighted mean grid direction.
pub fn default_u0(eig: &EigenSystem) -> Result<Direction> {
    let pi = eig.pi.as_ref().ok_or_else(|| Error::InvalidModel("stationary law missing".into()))?;
    let mut acc = DVector::zeros(eig.grid().dim());
    for (i, p) in pi.iter().enumerate() {
        acc += eig.grid().point(i).coords() * *p;
    }
    let u = Direction::normalize(acc)?;
    if !u.is_interior() {
        return Err(Error::BadDirection("π-mean direction is not interior".into()));
    }
    Ok(u)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HomogeneityConfig {
    pub replicates: usize,
    pub depth: usize,
    pub seed: u64,
    pub cap: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HomogeneityPoint {
    pub r: f64,
    /// mean Z_n(ru) / mean Z_n(u) divided by r^α
    pub ratio_of_means: f64,
    /// median over replicates of Z_n(ru) / (r^α Z_n(u))
    pub median_ratio: f64,
}

/// Z_n(ru) against r^α Z_n(u) from fresh trees disintegrated with φ̂.
pub fn homogeneity(fpm: &FixedPointModel, spec: &EnsembleSpec, u: &Direction, radii: &[f64], cfg: HomogeneityConfig) -> Result<Vec<HomogeneityPoint>> {
    let phi = |x: &DVector<f64>| fpm.phi(x);
    let pops: Vec<Population> = (0..cfg.replicates as u64)
        .into_par_iter()
        .map(|r| grow_population(spec, cfg.depth, SeedRecord { seed: cfg.seed, stream: purpose::DISINTEGRATION + r }, cfg.cap))
        .collect::<Result<_>>()?;
    let base: Vec<f64> = pops.iter().map(|p| disintegrate_population(p, &phi, u.coords())).collect::<Result<_>>()?;
    let mb = base.iter().sum::<f64>();
    radii
        .iter()
        .map(|&r| {
            let ra = r.powf(fpm.alpha);
            let z: Vec<f64> = pops.iter().map(|p| disintegrate_population(p, &phi, &(u.coords() * r))).collect::<Result<_>>()?;
            let ratios: Vec<f64> = z.iter().zip(&base).filter(|(_, b)| **b > 0.0).map(|(a, b)| a / (ra * b)).collect();
            Ok(HomogeneityPoint { r, ratio_of_means: z.iter().sum::<f64>() / (ra * mb), median_ratio: median(&ratios) })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HEntry {
    pub u: Vec<f64>,
    pub s: f64,
    pub t: f64,
    pub h: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlowvarReport {
    pub u0: Vec<f64>,
    pub h_table: Vec<HEntry>,
    /// (t, D(u₀,t))
    pub d_curve: Vec<(f64, f64)>,
    /// slope of D(u₀,t) against t on the upper half of the t grid,
    /// widened to the last three points when the half is shorter
    pub kprime: LineFit,
    /// K′ ± 1.96 se
    pub band: (f64, f64),
    /// max/min − 1 of D(u₀,t)/t over the t grid
    pub flatness: f64,
    pub increasing: bool,
    /// D(u₀, t_last) / D(u₀, t_first)
    pub growth: f64,
    pub homogeneity: Option<Vec<HomogeneityPoint>>,
}

/// h_t(u,s) = D(u,s+t)/D(u₀,t), the K′ fit and the flatness of D(u₀,t)/t.
pub fn slowvar_diag(fpm: &FixedPointModel, u0: &Direction, directions: &[Direction], s_grid: &[f64], t_grid: &[f64]) -> SlowvarReport {
    let mut h_table = Vec::new();
    for u in directions {
        for &t in t_grid {
            let base = fpm.d(u0.coords(), t);
            for &s in s_grid {
                h_table.push(HEntry { u: u.coords().as_slice().to_vec(), s, t, h: fpm.d(u.coords(), s + t) / base });
            }
        }
    }
    let d_curve: Vec<(f64, f64)> = t_grid.iter().map(|&t| (t, fpm.d(u0.coords(), t))).collect();
    let upper = &d_curve[(d_curve.len() / 2).min(d_curve.len().saturating_sub(3))..];
    let fit = if upper.len() >= 2 {
        let xs: Vec<f64> = upper.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = upper.iter().map(|p| p.1).collect();
        ols(&xs, &ys)
    } else {
        LineFit { intercept: f64::NAN, slope: f64::NAN, slope_se: f64::NAN }
    };
    let ratios: Vec<f64> = d_curve.iter().filter(|p| p.0 > 0.0).map(|p| p.1 / p.0).collect();
    let flatness = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max) / ratios.iter().copied().fold(f64::INFINITY, f64::min) - 1.0;
    SlowvarReport {
        u0: u0.coords().as_slice().to_vec(),
        h_table,
        kprime: fit,
        band: (fit.slope - 1.96 * fit.slope_se, fit.slope + 1.96 * fit.slope_se),
        flatness,
        increasing: d_curve.windows(2).all(|w| w[1].1 > w[0].1),
        growth: d_curve.last().map(|l| l.1 / d_curve[0].1).unwrap_or(f64::NAN),
        d_curve,
        homogeneity: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::*;
    use crate::rng::stream;
    use crate::spectral::{critical_system, SpectralOptions};

    fn model(r: usize, depth: usize) -> (EnsembleSpec, FixedPointModel) {
        let (spec, _, eig) = critical_system(&rank1_2d(1.0), SpectralOptions::default_for(2)).unwrap();
        let fpm = build_fixed_point(&spec, &eig, FixedPointConfig { replicates: r, depth, k_scale: 1.0, cap: 100_000, seed: 3 }).unwrap();
        (spec, fpm)
    }

    #[test]
    fn phi_at_zero_is_one_and_bounded() {
        let (_, fpm) = model(200, 10);
        for u in [[1.0, 0.0], [0.6, 0.8], [0.0, 1.0]] {
            let u = Direction::from_slice(&u).unwrap();
            assert_eq!(fpm.phi(&(u.coords() * 0.0)), 1.0);
            for r in [0.1, 1.0, 10.0] {
                let p = fpm.phi(&(u.coords() * r));
                assert!(p > 0.0 && p <= 1.0);
            }
        }
    }

    #[test]
    fn phi_decreases_along_rays() {
        let (_, fpm) = model(2000, 15);
        let e = Direction::diagonal(2);
        let radii: Vec<f64> = (0..=20).map(|i| 10f64.powf(-1.0 + 0.1 * i as f64)).collect();
        let grid = fpm.laplace_grid(&[e], &radii);
        let vals: Vec<f64> = grid.values.iter().map(|p| p.phi).collect();
        assert!(vals.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn derivative_martingale_is_mostly_positive() {
        let (_, fpm) = model(2000, 15);
        assert!(fpm.positive_fraction(Direction::diagonal(2).coords()) >= 0.95);
    }

    #[test]
    fn residual_vanishes_at_zero() {
        let (spec, fpm) = model(100, 8);
        let rep = fixed_point_residual(&fpm, &spec, &[(0.0, Direction::diagonal(2))], 100, &mut stream(1, 0));
        assert_eq!(rep.points[0].residual, 0.0);
        assert_eq!(rep.points[0].z, 0.0);
    }

    /// φ̂ for 2K at x equals φ̂ for K at 2^{1/α}x; residuals follow with paired tuples
    #[test]
    fn scale_family() {
        let (spec, fpm) = model(300, 10);
        let fpm2 = fpm.with_scale(2.0);
        let c = 2f64.powf(1.0 / fpm.alpha);
        let e = Direction::diagonal(2);
        for r in [0.25, 1.0, 4.0] {
            let a = fpm2.phi(&(e.coords() * r));
            let b = fpm.phi(&(e.coords() * (r * c)));
            assert!((a - b).abs() < 1e-12);
        }
        let a = fixed_point_residual(&fpm2, &spec, &[(1.0, e.clone())], 500, &mut stream(2, 0));
        let b = fixed_point_residual(&fpm, &spec, &[(c, e)], 500, &mut stream(2, 0));
        assert!((a.points[0].z - b.points[0].z).abs() < 1e-6);
    }

    #[test]
    fn g_is_nonnegative_and_depth_limits_t() {
        let (spec, fpm) = model(500, 15);
        let e = Direction::diagonal(2);
        let cfg = RenewalConfig { samples: 500, max_cycles: 100 };
        let rep = D_G_curves(&fpm, &spec, &e, &[1.0, 2.0, 3.0], cfg, &mut stream(3, 0), None).unwrap();
        assert!(rep.g_min >= 0.0);
        let r = D_G_curves(&fpm, &spec, &e, &[100.0], cfg, &mut stream(3, 0), None);
        assert!(matches!(r, Err(Error::DepthInsufficient { .. })));
    }

    #[test]
    fn h_at_zero_shift_is_one() {
        let (_, fpm) = model(300, 10);
        let e = Direction::diagonal(2);
        let rep = slowvar_diag(&fpm, &e, &[e.clone()], &[0.0], &[2.0, 3.0]);
        assert!(rep.h_table.iter().all(|h| h.h == 1.0));
    }

    #[test]
    fn u0_for_rank1_is_the_diagonal() {
        let (_, fpm) = model(10, 2);
        let u0 = default_u0(fpm.eig()).unwrap();
        assert!((u0.coords() - Direction::diagonal(2).coords()).norm() < 1e-12);
    }

    #[test]
    fn homogeneity_at_unit_radius_is_one() {
        let (spec, fpm) = model(300, 10);
        let e = Direction::diagonal(2);
        let h = homogeneity(&fpm, &spec, &e, &[1.0], HomogeneityConfig { replicates: 20, depth: 3, seed: 1, cap: 1000 }).unwrap();
        assert!((h[0].ratio_of_means - 1.0).abs() < 1e-12);
        assert!((h[0].median_ratio - 1.0).abs() < 1e-12);
    }
}
