//! The tilted Markov random walk (U_n, S_n): kernel sampling, the
//! many-to-one identity by enumeration, and regeneration by atoms or by
//! splitting on a small set.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::cone_geometry::{perron, ConeMatrix, Direction};
use crate::error::{Error, Result};
use crate::model::EnsembleSpec;
use crate::rng::{purpose, stream};
use crate::spectral::EigenSystem;
use crate::stats::{geometric_tail, ks_two_sample, GeometricTail, KsTest, MeanSe};

const ENUMERATION_LIMIT: u128 = 1_000_000;
const STALL_ATTEMPTS: usize = 10_000;
const SPLIT_Z_SAMPLE: usize = 20_000;

#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub u: Direction,
    pub s: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrajectorySummary {
    pub n: usize,
    pub s_over_n: f64,
    pub min_s: f64,
    pub max_s: f64,
    pub increment_sd: f64,
    pub max_increment: f64,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<ChainState>,
}

impl Trajectory {
    pub fn increments(&self) -> Vec<f64> {
        self.states.windows(2).map(|w| w[1].s - w[0].s).collect()
    }

    pub fn summary(&self) -> TrajectorySummary {
        let n = self.states.len() - 1;
        let inc = self.increments();
        let last = self.states[n].s;
        TrajectorySummary {
            n,
            s_over_n: if n > 0 { last / n as f64 } else { 0.0 },
            min_s: self.states.iter().map(|x| x.s).fold(f64::INFINITY, f64::min),
            max_s: self.states.iter().map(|x| x.s).fold(f64::NEG_INFINITY, f64::max),
            increment_sd: if n > 1 { MeanSe::of(&inc).sd } else { 0.0 },
            max_increment: inc.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Weight |x|^α H^α(x/|x|) of an image vector x = Mᵀu.
fn tilt_weight(eig: &EigenSystem, x: &DVector<f64>) -> f64 {
    eig.h_hom(x)
}

/// Uniform draw from the Frobenius ball B_r(center).
fn sample_in_ball<R: Rng + ?Sized>(center: &DMatrix<f64>, r: f64, rng: &mut R) -> DMatrix<f64> {
    let (nr, nc) = center.shape();
    let k = nr * nc;
    let g: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = r * rng.random::<f64>().powf(1.0 / k as f64) / norm;
    DMatrix::from_fn(nr, nc, |i, j| center[(i, j)] + scale * g[i * nc + j])
}

/// Image vector x = Mᵀu of one tilted step from u for a ball ensemble, by
/// rejection against sup‖M‖^α · max H.
fn ball_tilted_image<R: Rng + ?Sized>(spec: &EnsembleSpec, eig: &EigenSystem, u: &DVector<f64>, rng: &mut R) -> Result<DVector<f64>> {
    let bound = spec.sup_norm().powf(eig.s) * eig.h.iter().copied().fold(0.0, f64::max);
    for _ in 0..STALL_ATTEMPTS {
        let m = spec.sample_mu(rng);
        let x = m.apply_transpose(u);
        if rng.random::<f64>() * bound < tilt_weight(eig, &x) {
            return Ok(x);
        }
    }
    Err(Error::RejectionStall { rate: 1.0 / STALL_ATTEMPTS as f64 })
}

fn polar_step(state: &ChainState, x: DVector<f64>) -> Result<ChainState> {
    let r = x.norm();
    if r == 0.0 || !r.is_finite() {
        return Err(Error::ZeroImage);
    }
    Ok(ChainState { u: Direction::from_unit_unchecked(x / r), s: state.s - r.ln(), n: state.n + 1 })
}

/// One step of the α-tilted chain: M from μ reweighted by
/// |Mᵀu|^α H^α(Mᵀ∘u), then U′ = Mᵀ∘u and S′ = S − log|Mᵀu|.
pub fn step_tilted<R: Rng + ?Sized>(spec: &EnsembleSpec, eig: &EigenSystem, state: &ChainState, rng: &mut R) -> Result<ChainState> {
    if spec.is_finite() {
        let (outcomes, _) = eig.tilted_outcomes(state.u.coords());
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
        let o = &outcomes[pick];
        Ok(ChainState { u: o.image.clone(), s: state.s + o.increment, n: state.n + 1 })
    } else {
        polar_step(state, ball_tilted_image(spec, eig, state.u.coords(), rng)?)
    }
}

pub fn simulate<R: Rng + ?Sized>(spec: &EnsembleSpec, eig: &EigenSystem, u0: &Direction, n: usize, rng: &mut R) -> Result<Trajectory> {
    let mut states = Vec::with_capacity(n + 1);
    states.push(ChainState { u: u0.clone(), s: 0.0, n: 0 });
    for _ in 0..n {
        let next = step_tilted(spec, eig, states.last().expect("nonempty"), rng)?;
        states.push(next);
    }
    Ok(Trajectory { states })
}

/// Relative mismatch between the tilted normalizer at u and H^α(u)·m(α)/E N.
pub fn normalization_error(eig: &EigenSystem, u: &DVector<f64>) -> f64 {
    let (_, total) = eig.tilted_outcomes(u);
    let target = eig.h_at(u) * eig.m / eig.mean_n();
    (total - target).abs() / target
}

/// A path (U_k, S_k)_{k ≤ n}.
pub type Path = [(DVector<f64>, f64)];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ManyToOne {
    pub n: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub abs_error: f64,
}

/// Both sides of the many-to-one identity by exhaustive enumeration: the
/// tree side over every (template, branch) choice along a spine, the chain
/// side over every tilted-kernel outcome.
pub fn many_to_one_check(spec: &EnsembleSpec, eig: &EigenSystem, u: &Direction, n: usize, f: &dyn Fn(&Path) -> f64) -> Result<ManyToOne> {
    if !spec.is_finite() {
        return Err(Error::ModeUnsupported("many-to-one enumeration needs a finite ensemble".into()));
    }
    let branches: usize = spec.templates().iter().map(|t| t.weights.len()).sum();
    let atoms = eig.kernel().atoms.len();
    for count in [branches, atoms] {
        let total = (count as u128).checked_pow(n as u32).unwrap_or(u128::MAX);
        if total > ENUMERATION_LIMIT {
            return Err(Error::EnumerationTooLarge(total));
        }
    }
    let root = vec![(u.coords().clone(), 0.0)];

    let mut tree: Vec<(Vec<(DVector<f64>, f64)>, f64)> = vec![(root.clone(), 1.0)];
    for _ in 0..n {
        let mut next = Vec::with_capacity(tree.len() * branches);
        for (path, w) in &tree {
            let (x, s) = path.last().expect("nonempty path");
            for t in spec.templates() {
                for m in &t.weights {
                    let y = m.apply_transpose(x);
                    let r = y.norm();
                    let mut p = path.clone();
                    p.push((y / r, s - r.ln()));
                    next.push((p, w * t.prob));
                }
            }
        }
        tree = next;
    }
    let norm = eig.h_at(u.coords()) * eig.m.powi(n as i32);
    let lhs: f64 = tree
        .iter()
        .map(|(p, w)| {
            let (x, s) = p.last().expect("nonempty path");
            w * f(p) * (-eig.s * s).exp() * eig.h_at(x)
        })
        .sum::<f64>()
        / norm;

    let mut chain: Vec<(Vec<(DVector<f64>, f64)>, f64)> = vec![(root, 1.0)];
    for _ in 0..n {
        let mut next = Vec::with_capacity(chain.len() * atoms);
        for (path, w) in &chain {
            let (x, s) = path.last().expect("nonempty path");
            for o in eig.tilted_outcomes(x).0 {
                let mut p = path.clone();
                p.push((o.image.coords().clone(), s + o.increment));
                next.push((p, w * o.prob));
            }
        }
        chain = next;
    }
    let rhs: f64 = chain.iter().map(|(p, w)| w * f(p)).sum();
    Ok(ManyToOne { n, lhs, rhs, abs_error: (lhs - rhs).abs() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RegenMode {
    Atom,
    Split,
}

/// Certified minorization P(u,·) ≥ γ η(·) for u ∈ B_δ(v₀).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitParams {
    pub v0: Vec<f64>,
    pub delta: f64,
    /// lower bound of the untilted density ratio f_u / f_η
    pub density_ratio: f64,
    pub gamma: f64,
    /// MC estimate of the η normalizer and its certified lower bound
    pub z_eta: f64,
    pub z_lower: f64,
    /// max over the small set of the tilted normalizer k H^α(u)
    pub max_normalizer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CycleRecord {
    pub sigma: usize,
    pub length: usize,
    /// U at the regeneration time
    pub u: Vec<f64>,
    /// S_σ − S_{σ−1}
    pub first_increment: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegenSchedule {
    pub mode: RegenMode,
    pub sigma: Vec<usize>,
    /// complete cycles between consecutive regeneration times
    pub cycles: Vec<CycleRecord>,
    /// V_k = S_{σ_{k+1}−1} − S_{σ_k−1}
    pub v_increments: Vec<f64>,
    pub atom: Option<Vec<f64>>,
    pub split: Option<SplitParams>,
    /// residual-kernel acceptance probabilities that had to be clipped at 0
    pub clipped: usize,
}

/// Post-processing diagnostics of a schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RegenDiagnostics {
    pub cycles: usize,
    pub mean_cycle_length: MeanSe,
    pub ks_cycle_lengths: KsTest,
    pub ks_v: KsTest,
    pub tail: GeometricTail,
    pub v_mean: MeanSe,
    pub exp_delta: f64,
    pub exp_moment_first: MeanSe,
    pub exp_moment_second: MeanSe,
    pub exp_moment_z: f64,
}

impl RegenSchedule {
    pub fn cycle_lengths(&self) -> Vec<usize> {
        self.cycles.iter().map(|c| c.length).collect()
    }

    /// Diagnostics with the exponential-moment witness at δ = 0.1/c′.
    pub fn diagnostics(&self, c_prime: f64) -> RegenDiagnostics {
        let lengths = self.cycle_lengths();
        let lf: Vec<f64> = lengths.iter().map(|&x| x as f64).collect();
        let half = lf.len() / 2;
        let vh = self.v_increments.len() / 2;
        let exp_delta = 0.1 / c_prime;
        let e: Vec<f64> = self.v_increments.iter().map(|v| (exp_delta * v.abs()).exp()).collect();
        let (a, b) = (MeanSe::of(&e[..vh]), MeanSe::of(&e[vh..2 * vh]));
        let diff = a.mean - b.mean;
        let se = (a.se * a.se + b.se * b.se).sqrt();
        RegenDiagnostics {
            cycles: lengths.len(),
            mean_cycle_length: MeanSe::of(&lf),
            ks_cycle_lengths: ks_two_sample(&lf[..half], &lf[half..2 * half]),
            ks_v: ks_two_sample(&self.v_increments[..vh], &self.v_increments[vh..2 * vh]),
            tail: geometric_tail(&lengths, 1),
            v_mean: MeanSe::of(&self.v_increments),
            exp_delta,
            exp_moment_first: a,
            exp_moment_second: b,
            exp_moment_z: if diff == 0.0 { 0.0 } else { diff / se },
        }
    }
}

fn schedule_from_times(traj: &Trajectory, sigma: Vec<usize>, mode: RegenMode) -> RegenSchedule {
    let st = &traj.states;
    let cycles = sigma
        .windows(2)
        .map(|w| CycleRecord { sigma: w[0], length: w[1] - w[0], u: st[w[0]].u.coords().as_slice().to_vec(), first_increment: st[w[0]].s - st[w[0] - 1].s })
        .collect();
    let v_increments = sigma.windows(2).map(|w| st[w[1] - 1].s - st[w[0] - 1].s).collect();
    RegenSchedule { mode, sigma, cycles, v_increments, atom: None, split: None, clipped: 0 }
}

/// Default atom: the lexicographically smallest right factor.
pub fn default_atom(spec: &EnsembleSpec) -> Result<Direction> {
    let mut dirs = spec.rank_one_directions().ok_or_else(|| Error::ModeUnsupported("atom mode needs rank-one weights".into()))?;
    dirs.sort_by(|a, b| a.coords().iter().zip(b.coords().iter()).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
    Ok(dirs.swap_remove(0))
}

/// Atom-mode schedule: successive visits n ≥ 1 of the chain to the atom.
pub fn atom_schedule(spec: &EnsembleSpec, traj: &Trajectory, atom: Option<&Direction>) -> Result<RegenSchedule> {
    let atom = match atom {
        Some(a) => a.clone(),
        None => default_atom(spec)?,
    };
    if !spec.rank_one_directions().is_some_and(|d| d.contains(&atom)) {
        return Err(Error::ModeUnsupported("atom must be one of the right factors of a rank-one ensemble".into()));
    }
    let sigma: Vec<usize> = traj.states.iter().skip(1).filter(|c| (c.u.coords() - atom.coords()).norm() <= 1e-12).map(|c| c.n).collect();
    let mut out = schedule_from_times(traj, sigma, RegenMode::Atom);
    out.atom = Some(atom.coords().as_slice().to_vec());
    Ok(out)
}

/// The ball geometry of the transposed weights G = Mᵀ ~ uniform on B_r(g₀).
struct SplitGeometry {
    g0: DMatrix<f64>,
    r: f64,
    v0: DVector<f64>,
    /// (d² − d)/2: exponent of the slice radius in the density of Gu
    p: f64,
    dim: f64,
}

impl SplitGeometry {
    fn new(spec: &EnsembleSpec) -> Result<Self> {
        let ball = spec.ball().ok_or_else(|| Error::ModeUnsupported("split mode needs a uniform-ball ensemble".into()))?;
        let g0 = ball.center.entries().transpose() * spec.theta();
        let (_, v0) = perron(&ConeMatrix::from_raw(g0.clone()))?;
        let d = spec.d() as f64;
        Ok(SplitGeometry { g0, r: ball.radius * spec.theta(), v0: v0.coords().clone(), p: (d * d - d) / 2.0, dim: d * d })
    }

    /// f_η(x) / f_u(x) for the laws of a v₀ (a uniform on B_{r/2}(g₀)) and of Gu.
    fn density_ratio(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let re = 0.25 * self.r * self.r - (x - &self.g0 * &self.v0).norm_squared();
        if re <= 0.0 {
            return 0.0;
        }
        let ru = self.r * self.r - (x - &self.g0 * u).norm_squared();
        if ru <= 0.0 {
            return f64::INFINITY;
        }
        2f64.powf(self.dim) * (re / ru).powf(self.p)
    }

    /// Closed-form lower bound of f_u/f_η over u ∈ B_δ(v₀).
    fn certified_ratio(&self, delta: f64) -> f64 {
        let g = self.g0.norm();
        let reach = 0.5 * self.r + g * delta;
        let slack = (self.r * self.r - reach * reach) / (0.25 * self.r * self.r);
        if slack <= 0.0 {
            0.0
        } else {
            2f64.powf(-self.dim) * slack.powf(self.p)
        }
    }

    fn in_small_set(&self, u: &DVector<f64>, delta: f64) -> bool {
        (u - &self.v0).norm() <= delta
    }
}

/// Certifies (δ, γ): δ is chosen on a grid to maximize γ(δ)·π(B_δ(v₀)); the
/// closed-form density bound is rechecked on sampled pairs (u, x).
pub fn certify_split(spec: &EnsembleSpec, eig: &EigenSystem, seed: u64) -> Result<SplitParams> {
    let geo = SplitGeometry::new(spec)?;
    let grid = eig.grid();
    let pi = eig.pi.as_ref().ok_or_else(|| Error::MinorizationFailure("stationary law missing".into()))?;
    let normalizer = |u: &DVector<f64>| eig.k * eig.h_at(u);

    let mut rng = stream(seed, purpose::SPLIT);
    let sample_eta = |rng: &mut crate::rng::SimRng| &sample_in_ball(&geo.g0, 0.5 * geo.r, rng) * &geo.v0;
    let z: Vec<f64> = (0..SPLIT_Z_SAMPLE).map(|_| tilt_weight(eig, &sample_eta(&mut rng))).collect();
    let zs = MeanSe::of(&z);
    let z_lower = zs.mean - 4.0 * zs.se;

    let g = geo.g0.norm();
    let max_normalizer_in = |delta: f64| {
        (0..grid.len())
            .filter(|&i| geo.in_small_set(grid.point(i).coords(), delta))
            .map(|i| normalizer(grid.point(i).coords()))
            .fold(normalizer(&geo.v0), f64::max)
            * (1.0 + 1e-9)
    };
    // (score, δ, density bound)
    let mut best: Option<(f64, f64, f64)> = None;
    for j in 0..40 {
        let delta = geo.r / g * 0.5 * 0.85f64.powi(j);
        let ratio = geo.certified_ratio(delta);
        if ratio <= 0.0 {
            continue;
        }
        let mass: f64 = (0..grid.len()).filter(|&i| geo.in_small_set(grid.point(i).coords(), delta)).map(|i| pi[i]).sum();
        let score = ratio * z_lower / max_normalizer_in(delta) * mass;
        if best.is_none_or(|b| score > b.0) {
            best = Some((score, delta, ratio));
        }
    }
    let (_, delta, ratio) = best.ok_or_else(|| Error::MinorizationFailure("no radius admits a positive density bound".into()))?;
    let max_normalizer = max_normalizer_in(delta);
    let gamma = ratio * z_lower / max_normalizer;
    if !(gamma > 0.0) {
        return Err(Error::MinorizationFailure(format!("certified gamma = {gamma}")));
    }
    // numerical recheck of the density bound
    for _ in 0..2000 {
        let x = sample_eta(&mut rng);
        let mut pert = DVector::from_fn(geo.v0.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        pert *= delta * rng.random::<f64>() / pert.norm();
        let u = &geo.v0 + pert;
        let u = &u / u.norm();
        if !geo.in_small_set(&u, delta) || u.iter().any(|c| *c < 0.0) {
            continue;
        }
        if 1.0 / geo.density_ratio(&x, &u) < ratio * (1.0 - 1e-9) {
            return Err(Error::MinorizationFailure("density bound violated on a sampled pair".into()));
        }
    }
    Ok(SplitParams { v0: geo.v0.as_slice().to_vec(), delta, density_ratio: ratio, gamma, z_eta: zs.mean, z_lower, max_normalizer })
}

/// Split-chain simulation: in the small set a γ-coin decides between a
/// regeneration draw from η and a draw from the residual kernel.
pub fn regenerate_split<R: Rng + ?Sized>(spec: &EnsembleSpec, eig: &EigenSystem, params: &SplitParams, u0: &Direction, n: usize, rng: &mut R) -> Result<(Trajectory, RegenSchedule)> {
    let geo = SplitGeometry::new(spec)?;
    let w_max = (geo.g0.norm() + 0.5 * geo.r).powf(eig.s) * eig.h.iter().copied().fold(0.0, f64::max);
    let mut states = vec![ChainState { u: u0.clone(), s: 0.0, n: 0 }];
    let mut sigma = Vec::new();
    let mut clipped = 0usize;
    for _ in 0..n {
        let cur = states.last().expect("nonempty");
        let u = cur.u.coords();
        let x = if geo.in_small_set(u, params.delta) {
            if rng.random::<f64>() < params.gamma {
                sigma.push(cur.n + 1);
                let mut tries = 0;
                loop {
                    let x = &sample_in_ball(&geo.g0, 0.5 * geo.r, rng) * &geo.v0;
                    if rng.random::<f64>() * w_max < tilt_weight(eig, &x) {
                        break x;
                    }
                    tries += 1;
                    if tries >= STALL_ATTEMPTS {
                        return Err(Error::RejectionStall { rate: 1.0 / STALL_ATTEMPTS as f64 });
                    }
                }
            } else {
                let nu = eig.k * eig.h_at(u);
                let mut tries = 0;
                loop {
                    let x = ball_tilted_image(spec, eig, u, rng)?;
                    let reject = params.gamma * geo.density_ratio(&x, u) * nu / params.z_eta;
                    if reject > 1.0 {
                        clipped += 1;
                    }
                    if rng.random::<f64>() >= reject {
                        break x;
                    }
                    tries += 1;
                    if tries >= STALL_ATTEMPTS {
                        return Err(Error::RejectionStall { rate: 1.0 / STALL_ATTEMPTS as f64 });
                    }
                }
            }
        } else {
            ball_tilted_image(spec, eig, u, rng)?
        };
        let next = polar_step(cur, x)?;
        states.push(next);
    }
    let traj = Trajectory { states };
    let mut sched = schedule_from_times(&traj, sigma, RegenMode::Split);
    sched.split = Some(params.clone());
    sched.clipped = clipped;
    Ok((traj, sched))
}

/// Simulates n steps from u0 and builds the schedule in the requested mode.
pub fn regenerate<R: Rng + ?Sized>(spec: &EnsembleSpec, eig: &EigenSystem, mode: RegenMode, u0: &Direction, n: usize, seed: u64, rng: &mut R) -> Result<(Trajectory, RegenSchedule)> {
    match mode {
        RegenMode::Atom => {
            if !spec.is_rank_one() {
                return Err(Error::ModeUnsupported("atom mode needs a finite rank-one ensemble".into()));
            }
            let traj = simulate(spec, eig, u0, n, rng)?;
            let sched = atom_schedule(spec, &traj, None)?;
            Ok((traj, sched))
        }
        RegenMode::Split => {
            if spec.ball().is_none() {
                return Err(Error::ModeUnsupported("split mode needs a uniform-ball ensemble".into()));
            }
            let params = certify_split(spec, eig, seed)?;
            regenerate_split(spec, eig, &params, u0, n, rng)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::*;
    use crate::model::verify_assumptions;
    use crate::rng::stream;
    use crate::spectral::{center_at, critical_system, SpectralOptions};

    fn rank1() -> (EnsembleSpec, EigenSystem) {
        let (s, _, e) = critical_system(&rank1_2d(1.0), SpectralOptions::default_for(2)).unwrap();
        (s, e)
    }

    fn rank1_b() -> (EnsembleSpec, EigenSystem) {
        let (s, _, e) = critical_system(&rank1_2d_b(1.0), SpectralOptions::default_for(2)).unwrap();
        (s, e)
    }

    #[test]
    fn rank1_step_law_is_the_exact_categorical() {
        let (spec, eig) = rank1();
        let e = Direction::diagonal(2);
        let (a, t) = (eig.s, spec.theta());
        let p100 = 0.01 * (100.0 * t).powf(a) / (0.99 * t.powf(a) + 0.01 * (100.0 * t).powf(a));
        let (out, _) = eig.tilted_outcomes(e.coords());
        for o in &out {
            assert!((o.image.coords() - e.coords()).norm() < 1e-15);
            let c = if o.increment < 0.0 { 100.0 } else { 1.0 };
            assert!((o.increment + (t * c).ln()).abs() < 1e-12);
            let p = if c == 100.0 { p100 } else { 1.0 - p100 };
            assert!((o.prob - p).abs() < 1e-12, "{} vs {}", o.prob, p);
        }
    }

    #[test]
    fn zero_steps_is_the_start() {
        let (spec, eig) = rank1();
        let e = Direction::diagonal(2);
        let t = simulate(&spec, &eig, &e, 0, &mut stream(1, 0)).unwrap();
        assert_eq!(t.states.len(), 1);
        assert_eq!(t.states[0].s, 0.0);
    }

    #[test]
    fn increments_are_bounded_by_c_prime() {
        for (spec, eig) in [rank1(), rank1_b()] {
            let c_prime = verify_assumptions(&spec).c_prime;
            let t = simulate(&spec, &eig, &Direction::from_slice(&[0.3, 1.0]).unwrap(), 5000, &mut stream(2, 0)).unwrap();
            assert!(t.summary().max_increment <= c_prime + 1e-12);
        }
    }

    #[test]
    fn normalizer_matches_h_times_m_over_mean_n() {
        for (_, eig) in [rank1(), rank1_b()] {
            for u in [[1.0, 0.0], [0.6, 0.8], [0.2, 0.9]] {
                let u = Direction::from_slice(&u).unwrap();
                assert!(normalization_error(&eig, u.coords()) < 1e-10);
            }
        }
    }

    /// exact 2×2 transition matrix on {w₁, w₂} against empirical frequencies
    #[test]
    fn rank1_b_transition_frequencies() {
        let (spec, eig) = rank1_b();
        let [(_, w1), (_, w2)] = rank1_2d_b_pairs();
        let states = [w1, w2];
        // independent oracle: direct weights over the templates
        let exact = |from: &Direction, to: &Direction| -> f64 {
            let mut num = 0.0;
            let mut den = 0.0;
            for t in spec.templates() {
                for m in &t.weights {
                    let x = m.apply_transpose(from.coords());
                    let w = t.prob * eig.h_hom(&x);
                    den += w;
                    if (x.normalize() - to.coords()).norm() < 1e-12 {
                        num += w;
                    }
                }
            }
            num / den
        };
        let traj = simulate(&spec, &eig, &states[0], 100_000, &mut stream(3, 0)).unwrap();
        for from in &states {
            for to in &states {
                let p = exact(from, to);
                let mut visits = 0.0;
                let mut hits = 0.0;
                for w in traj.states.windows(2) {
                    if (w[0].u.coords() - from.coords()).norm() < 1e-12 {
                        visits += 1.0;
                        if (w[1].u.coords() - to.coords()).norm() < 1e-12 {
                            hits += 1.0;
                        }
                    }
                }
                let se = (p * (1.0 - p) / visits).sqrt();
                assert!((hits / visits - p).abs() <= 3.0 * se, "{} vs {p}", hits / visits);
            }
        }
    }

    #[test]
    fn many_to_one_constant_is_one() {
        let (spec, eig) = rank1_b();
        let u = Direction::from_slice(&[0.5, 0.5]).unwrap();
        for n in 1..=3 {
            let r = many_to_one_check(&spec, &eig, &u, n, &|_| 1.0).unwrap();
            assert!((r.lhs - 1.0).abs() < 1e-12 && (r.rhs - 1.0).abs() < 1e-12, "{r:?}");
        }
    }

    #[test]
    fn many_to_one_indicators() {
        let (spec, eig) = rank1();
        let c_prime = verify_assumptions(&spec).c_prime;
        let e = Direction::diagonal(2);
        let r = many_to_one_check(&spec, &eig, &e, 2, &|p| if p[2].1 > c_prime / 2.0 { 1.0 } else { 0.0 }).unwrap();
        assert!(r.abs_error <= 1e-12, "{r:?}");
        assert!(r.lhs > 0.0 && r.lhs < 1.0);

        let (spec, eig) = rank1_b();
        let w1 = rank1_2d_b_pairs()[0].1.clone();
        let u = Direction::from_slice(&[1.0, 1.0]).unwrap();
        let r = many_to_one_check(&spec, &eig, &u, 3, &|p| if (&p[3].0 - w1.coords()).norm() < 1e-12 { 1.0 } else { 0.0 }).unwrap();
        assert!(r.abs_error <= 1e-12, "{r:?}");
    }

    /// the spine enumeration against a sum over every full depth-2 tree
    #[test]
    fn many_to_one_tree_side_matches_full_tree_enumeration() {
        let (spec, eig) = rank1_b();
        let u = Direction::from_slice(&[0.7, 0.3]).unwrap();
        let f = |p: &Path| p[2].1.atan() + p[1].0[0];
        let r = many_to_one_check(&spec, &eig, &u, 2, &f).unwrap();
        let ts = spec.templates();
        let mut full = 0.0;
        for t0 in ts {
            // every assignment of templates to the N children
            let n = t0.weights.len();
            let mut idx = vec![0usize; n];
            loop {
                let mut p = t0.prob;
                let mut sum = 0.0;
                for (i, m0) in t0.weights.iter().enumerate() {
                    let t1 = &ts[idx[i]];
                    p *= t1.prob;
                    let y1 = m0.apply_transpose(u.coords());
                    let s1 = -y1.norm().ln();
                    for m1 in &t1.weights {
                        let y2 = m0.mul(m1).apply_transpose(u.coords());
                        let s2 = -y2.norm().ln();
                        let path = vec![(u.coords().clone(), 0.0), (y1.normalize(), s1), (y2.normalize(), s2)];
                        sum += f(&path) * eig.h_hom(&y2);
                    }
                }
                full += p * sum;
                let mut k = 0;
                while k < n {
                    idx[k] += 1;
                    if idx[k] < ts.len() {
                        break;
                    }
                    idx[k] = 0;
                    k += 1;
                }
                if k == n {
                    break;
                }
            }
        }
        let full = full / (eig.h_at(u.coords()) * eig.m * eig.m);
        assert!((full - r.lhs).abs() < 1e-12, "{full} vs {}", r.lhs);
        assert!(r.abs_error < 1e-12);
    }

    #[test]
    fn enumeration_limit() {
        let (spec, eig) = rank1_b();
        let r = many_to_one_check(&spec, &eig, &Direction::diagonal(2), 5, &|_| 1.0);
        assert!(matches!(r, Err(Error::EnumerationTooLarge(_))));
    }

    #[test]
    fn rank1_atom_cycles_are_single_steps() {
        let (spec, eig) = rank1();
        let e = Direction::diagonal(2);
        let (traj, sched) = regenerate(&spec, &eig, RegenMode::Atom, &e, 200, 0, &mut stream(4, 0)).unwrap();
        assert_eq!(sched.sigma, (1..=200).collect::<Vec<_>>());
        assert!(sched.cycle_lengths().iter().all(|&l| l == 1));
        let inc = traj.increments();
        for (k, v) in sched.v_increments.iter().enumerate() {
            assert_eq!(*v, inc[k]);
        }
    }

    #[test]
    fn rank1_b_cycle_length_is_inverse_stationary_mass() {
        let (spec, eig) = rank1_b();
        let w1 = rank1_2d_b_pairs()[0].1.clone();
        let traj = simulate(&spec, &eig, &w1, 100_000, &mut stream(5, 0)).unwrap();
        let sched = atom_schedule(&spec, &traj, Some(&w1)).unwrap();
        let pi = eig.pi.as_ref().unwrap()[eig.grid().exact_index(w1.coords()).unwrap()];
        let d = sched.diagnostics(verify_assumptions(&spec).c_prime);
        assert!(d.mean_cycle_length.z(1.0 / pi).abs() <= 3.0, "{:?} vs {}", d.mean_cycle_length, 1.0 / pi);
        let l = sched.cycle_lengths();
        let lf: Vec<f64> = l.iter().map(|&x| x as f64).collect();
        assert!(ks_two_sample(&lf[..500], &lf[500..1000]).p_value > 0.01);
        assert!(d.tail.q < 1.0);
        assert!(d.v_mean.z(0.0).abs() <= 3.0);
    }

    #[test]
    fn atom_mode_rejects_ball() {
        let spec = ball_2d(0.5);
        let (_, eig) = rank1();
        let r = regenerate(&spec, &eig, RegenMode::Atom, &Direction::diagonal(2), 10, 0, &mut stream(1, 0));
        assert!(matches!(r, Err(Error::ModeUnsupported(_))));
        let (spec, eig) = rank1();
        let r = regenerate(&spec, &eig, RegenMode::Split, &Direction::diagonal(2), 10, 0, &mut stream(1, 0));
        assert!(matches!(r, Err(Error::ModeUnsupported(_))));
    }

    #[test]
    fn ball_split_chain_regenerates() {
        let (spec, eig) = center_at(&ball_2d(1.0), 1.0, SpectralOptions::default_for(2)).unwrap();
        let params = certify_split(&spec, &eig, 7).unwrap();
        assert!(params.gamma > 0.0 && params.gamma < 1.0);
        assert!(params.z_lower <= params.z_eta);
        let u0 = Direction::from_slice(&params.v0).unwrap();
        let (traj, sched) = regenerate_split(&spec, &eig, &params, &u0, 20_000, &mut stream(8, 0)).unwrap();
        assert_eq!(traj.states.len(), 20_001);
        assert!(sched.cycles.len() > 20, "{}", sched.cycles.len());
        assert_eq!(sched.clipped, 0);
        assert!(sched.sigma.windows(2).all(|w| w[1] > w[0]));
        let c_prime = verify_assumptions(&spec).c_prime;
        assert!(traj.summary().max_increment <= c_prime + 1e-12);
    }

    /// the untilted density of Gu dominates the scaled η density on sampled points
    #[test]
    fn split_density_bound_holds_on_a_grid() {
        let spec = ball_2d(1.0);
        let geo = SplitGeometry::new(&spec).unwrap();
        let delta = 0.25 * geo.r / geo.g0.norm();
        let bound = geo.certified_ratio(delta);
        assert!(bound > 0.0);
        let c = &geo.g0 * &geo.v0;
        let a0 = geo.v0[1].atan2(geo.v0[0]);
        for i in 0..=20 {
            let phi = a0 + delta * (i as f64 / 10.0 - 1.0);
            let u = DVector::from_vec(vec![phi.cos(), phi.sin()]);
            if (u.clone() - &geo.v0).norm() > delta {
                continue;
            }
            for j in 0..20 {
                for k in 0..20 {
                    let rr = 0.5 * geo.r * (j as f64 + 0.5) / 20.0;
                    let ang = std::f64::consts::TAU * k as f64 / 20.0;
                    let x = &c + DVector::from_vec(vec![rr * ang.cos(), rr * ang.sin()]);
                    assert!(1.0 / geo.density_ratio(&x, &u) >= bound * (1.0 - 1e-12));
                }
            }
        }
    }
}
