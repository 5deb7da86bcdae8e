//! Weighted branching process: explicit trees of matrix products, aggregated
//! per-generation populations for deep generations, the additive and
//! derivative martingales, stopping lines and disintegrations.

use std::collections::HashMap;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::Serialize;

use crate::cone_geometry::{op_norm, ConeMatrix, Direction};
use crate::error::{Error, Result};
use crate::model::EnsembleSpec;
use crate::rng::{stream, SimRng};
use crate::spectral::EigenSystem;

const STOPPING_DEPTH_GUARD: usize = 10_000;

/// Root seed and stream id that regenerate a random object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub stream: u64,
}

impl SeedRecord {
    pub fn rng(&self) -> SimRng {
        stream(self.seed, self.stream)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub parent: u32,
    pub l: ConeMatrix,
}

/// A realized tree with all products L(v) stored per generation.
#[derive(Debug, Clone)]
pub struct TreeRun {
    pub generations: Vec<Vec<Node>>,
    pub seed: SeedRecord,
    pub cap: usize,
}

impl TreeRun {
    pub fn depth(&self) -> usize {
        self.generations.len() - 1
    }

    pub fn leaves(&self) -> &[Node] {
        self.generations.last().expect("root generation")
    }
}

/// Grows the tree generation by generation; tuples are drawn node by node
/// in generation order from the seeded stream.
pub fn grow(spec: &EnsembleSpec, depth: usize, seed: SeedRecord, cap: usize) -> Result<TreeRun> {
    let mut rng = seed.rng();
    let mut generations = vec![vec![Node { parent: 0, l: ConeMatrix::identity(spec.d()) }]];
    for g in 1..=depth {
        let prev = &generations[g - 1];
        let mut next = Vec::new();
        for (i, node) in prev.iter().enumerate() {
            let tuple = spec.sample_tuple(&mut rng);
            if next.len() + tuple.n_branches() > cap {
                let count = next.len() + tuple.n_branches() + (prev.len() - i - 1);
                return Err(Error::CapExceeded { generation: g, count, cap });
            }
            for t in &tuple.matrices {
                next.push(Node { parent: i as u32, l: node.l.mul(t) });
            }
        }
        generations.push(next);
    }
    Ok(TreeRun { generations, seed, cap })
}

/// Per-generation values of W_n(u), 𝒲_n(u) and max ‖L(v)‖.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MartingaleSeries {
    pub u: Vec<f64>,
    pub alpha: f64,
    pub w: Vec<f64>,
    pub dw: Vec<f64>,
    pub max_norm: Vec<f64>,
}

/// Contribution of one product L to (W, 𝒲) at u.
fn terms(l: &ConeMatrix, u: &DVector<f64>, eig: &EigenSystem) -> (f64, f64) {
    let x = l.apply_transpose(u);
    let n = x.norm();
    let dir = x / n;
    let hom = n.powf(eig.s) * eig.h_at(&dir);
    (hom, (-n.ln() + eig.b_at(&dir)) * hom)
}

pub fn martingales(tree: &TreeRun, u: &Direction, eig: &EigenSystem) -> MartingaleSeries {
    let mut out = MartingaleSeries { u: u.coords().as_slice().to_vec(), alpha: eig.s, w: Vec::new(), dw: Vec::new(), max_norm: Vec::new() };
    for gen in &tree.generations {
        let (mut w, mut dw, mut mx) = (0.0, 0.0, 0.0f64);
        for node in gen {
            let (a, b) = terms(&node.l, u.coords(), eig);
            w += a;
            dw += b;
            mx = mx.max(node.l.op_norm());
        }
        out.w.push(w);
        out.dw.push(dw);
        out.max_norm.push(mx);
    }
    out
}

/// One generation of a tree, with identical products merged into groups
/// carrying multiplicities.
#[derive(Debug, Clone)]
pub struct Population {
    pub groups: Vec<(ConeMatrix, f64)>,
}

fn group_key(l: &ConeMatrix) -> Vec<i64> {
    let mx = l.max_entry();
    let mut key = Vec::with_capacity(l.dim() * l.dim() + 1);
    key.push((mx.ln() * 1e11).round() as i64);
    key.extend(l.entries().iter().map(|x| (x / mx * 1e11).round() as i64));
    key
}

/// Number of successes out of `n` (possibly beyond 2^53, then normal approximation).
fn binomial<R: Rng + ?Sized>(rng: &mut R, n: f64, p: f64) -> f64 {
    if p <= 0.0 || n <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return n;
    }
    if n <= 9_007_199_254_740_992.0 {
        Binomial::new(n as u64, p).expect("valid binomial").sample(rng) as f64
    } else {
        let z: f64 = rng.sample(StandardNormal);
        (n * p + z * (n * p * (1.0 - p)).sqrt()).round().clamp(0.0, n)
    }
}

impl Population {
    pub fn root(d: usize) -> Self {
        Population { groups: vec![(ConeMatrix::identity(d), 1.0)] }
    }

    /// Total number of individuals.
    pub fn size(&self) -> f64 {
        self.groups.iter().map(|g| g.1).sum()
    }

    /// Next generation. Finite ensembles allocate each group's members to
    /// templates multinomially; ball ensembles draw a tuple per member.
    pub fn step<R: Rng + ?Sized>(&self, spec: &EnsembleSpec, rng: &mut R, cap: usize, generation: usize) -> Result<Population> {
        let mut index: HashMap<Vec<i64>, usize> = HashMap::new();
        let mut groups: Vec<(ConeMatrix, f64)> = Vec::new();
        let mut push = |l: ConeMatrix, c: f64, groups: &mut Vec<(ConeMatrix, f64)>| -> Result<()> {
            let key = group_key(&l);
            match index.get(&key) {
                Some(&i) => groups[i].1 += c,
                None => {
                    if groups.len() >= cap {
                        return Err(Error::CapExceeded { generation, count: groups.len() + 1, cap });
                    }
                    index.insert(key, groups.len());
                    groups.push((l, c));
                }
            }
            Ok(())
        };
        if spec.is_finite() {
            let templates = spec.templates();
            for (l, count) in &self.groups {
                let mut rest = *count;
                let mut rest_p = 1.0;
                for (ti, t) in templates.iter().enumerate() {
                    if rest <= 0.0 {
                        break;
                    }
                    let c = if ti + 1 == templates.len() { rest } else { binomial(rng, rest, (t.prob / rest_p).min(1.0)) };
                    rest -= c;
                    rest_p -= t.prob;
                    if c > 0.0 {
                        for m in &t.weights {
                            push(l.mul(m), c, &mut groups)?;
                        }
                    }
                }
            }
        } else {
            for (l, count) in &self.groups {
                for _ in 0..(*count as u64) {
                    for m in spec.sample_tuple(rng).matrices {
                        push(l.mul(&m), 1.0, &mut groups)?;
                    }
                }
            }
        }
        Ok(Population { groups })
    }

    /// (W, 𝒲, max ‖L‖) of this generation at u.
    pub fn martingale_terms(&self, u: &DVector<f64>, eig: &EigenSystem) -> (f64, f64, f64) {
        let (mut w, mut dw, mut mx) = (0.0, 0.0, 0.0f64);
        for (l, c) in &self.groups {
            let (a, b) = terms(l, u, eig);
            w += c * a;
            dw += c * b;
            mx = mx.max(op_norm(l.entries()));
        }
        (w, dw, mx)
    }

    /// 𝒲 of this generation at u.
    pub fn derivative_martingale(&self, u: &DVector<f64>, eig: &EigenSystem) -> f64 {
        self.groups.iter().map(|(l, c)| c * terms(l, u, eig).1).sum()
    }
}

/// Grows an aggregated population to `depth`.
pub fn grow_population(spec: &EnsembleSpec, depth: usize, seed: SeedRecord, cap: usize) -> Result<Population> {
    let mut rng = seed.rng();
    let mut pop = Population::root(spec.d());
    for g in 1..=depth {
        pop = pop.step(spec, &mut rng, cap, g)?;
    }
    Ok(pop)
}

/// W_n, 𝒲_n and max ‖L‖ for n = 0..=depth from an aggregated population
/// (no explicit tree is kept).
pub fn stream_martingales(spec: &EnsembleSpec, eig: &EigenSystem, u: &Direction, depth: usize, seed: SeedRecord, cap: usize) -> Result<MartingaleSeries> {
    let mut rng = seed.rng();
    let mut pop = Population::root(spec.d());
    let mut out = MartingaleSeries { u: u.coords().as_slice().to_vec(), alpha: eig.s, w: Vec::new(), dw: Vec::new(), max_norm: Vec::new() };
    for g in 0..=depth {
        if g > 0 {
            pop = pop.step(spec, &mut rng, cap, g)?;
        }
        let (w, dw, mx) = pop.martingale_terms(u.coords(), eig);
        out.w.push(w);
        out.dw.push(dw);
        out.max_norm.push(mx);
    }
    Ok(out)
}

/// Population means and variances of W_n(u) and 𝒲_n(u).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExactMoments {
    pub n: usize,
    pub mean_w: f64,
    pub mean_dw: f64,
    pub var_w: f64,
    pub var_dw: f64,
}

/// Exact first and second moments of (W_n, 𝒲_n) for rank-one ensembles, whose
/// directions after one step lie in the finite set of right factors. Uses the
/// one-step decomposition W_{n+1}(u) = Σ e^{−αS_i} W_n^{(i)}(U_i) and
/// 𝒲_{n+1}(u) = Σ e^{−αS_i} [𝒲_n^{(i)}(U_i) + S_i W_n^{(i)}(U_i)].
pub fn exact_moments(spec: &EnsembleSpec, eig: &EigenSystem, u: &Direction, n: usize) -> Option<ExactMoments> {
    let states = spec.rank_one_directions()?;
    let alpha = eig.s;
    let mu_w: Vec<f64> = states.iter().map(|x| eig.h_at(x.coords())).collect();
    let mu_d: Vec<f64> = states.iter().map(|x| eig.b_at(x.coords()) * eig.h_at(x.coords())).collect();
    let state_of = |x: &DVector<f64>| states.iter().position(|s| (s.coords() - x).norm() < 1e-12);

    // (e_i, S_i, state_i) for every template and branch from direction x
    let children = |x: &DVector<f64>| -> Option<Vec<(f64, Vec<(f64, f64, usize)>)>> {
        spec.templates()
            .iter()
            .map(|t| {
                let kids = t
                    .weights
                    .iter()
                    .map(|m| {
                        let y = m.apply_transpose(x);
                        let r = y.norm();
                        Some((r.powf(alpha), -r.ln(), state_of(&(y / r))?))
                    })
                    .collect::<Option<Vec<_>>>()?;
                Some((t.prob, kids))
            })
            .collect()
    };
    // second moments (EW², EW𝒲, E𝒲²) from direction x given tables at level n−1
    let step = |x: &DVector<f64>, w2: &[f64], wd: &[f64], d2: &[f64]| -> Option<(f64, f64, f64)> {
        let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
        for (p, kids) in children(x)? {
            for (i, &(ei, si, ki)) in kids.iter().enumerate() {
                a += p * ei * ei * w2[ki];
                b += p * ei * ei * (wd[ki] + si * w2[ki]);
                c += p * ei * ei * (d2[ki] + 2.0 * si * wd[ki] + si * si * w2[ki]);
                for (j, &(ej, sj, kj)) in kids.iter().enumerate() {
                    if i != j {
                        a += p * ei * ej * mu_w[ki] * mu_w[kj];
                        b += p * ei * ej * mu_w[ki] * (mu_d[kj] + sj * mu_w[kj]);
                        c += p * ei * ej * (mu_d[ki] + si * mu_w[ki]) * (mu_d[kj] + sj * mu_w[kj]);
                    }
                }
            }
        }
        Some((a, b, c))
    };
    let hu = eig.h_at(u.coords());
    let du = eig.b_at(u.coords()) * hu;
    if n == 0 {
        return Some(ExactMoments { n, mean_w: hu, mean_dw: du, var_w: 0.0, var_dw: 0.0 });
    }
    let mut w2: Vec<f64> = mu_w.iter().map(|x| x * x).collect();
    let mut wd: Vec<f64> = mu_w.iter().zip(&mu_d).map(|(x, y)| x * y).collect();
    let mut d2: Vec<f64> = mu_d.iter().map(|x| x * x).collect();
    for _ in 1..n {
        let next = states.iter().map(|x| step(x.coords(), &w2, &wd, &d2)).collect::<Option<Vec<_>>>()?;
        w2 = next.iter().map(|x| x.0).collect();
        wd = next.iter().map(|x| x.1).collect();
        d2 = next.iter().map(|x| x.2).collect();
    }
    let (a, _, c) = step(u.coords(), &w2, &wd, &d2)?;
    Some(ExactMoments { n, mean_w: hu, mean_dw: du, var_w: a - hu * hu, var_dw: c - du * du })
}

/// First-crossing nodes of the level process over t.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StoppingLineSample {
    pub t: f64,
    pub u: Vec<f64>,
    /// (U^u(v), S^u(v)) for v on the line
    pub nodes: Vec<(Vec<f64>, f64)>,
    /// number of expanded interior nodes
    pub expanded: usize,
}

impl StoppingLineSample {
    pub fn max_overshoot(&self) -> f64 {
        self.nodes.iter().map(|(_, s)| s - self.t).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Σ H^α(U) e^{−αS} over the line.
    pub fn additive_sum(&self, eig: &EigenSystem) -> f64 {
        self.nodes.iter().map(|(u, s)| eig.h_at(&DVector::from_column_slice(u)) * (-eig.s * s).exp()).sum()
    }
}

/// Depth-first expansion through nodes with level ≤ t.
pub fn stopping_line<R: Rng + ?Sized>(spec: &EnsembleSpec, u: &Direction, t: f64, rng: &mut R, cap: usize) -> Result<StoppingLineSample> {
    let mut out = StoppingLineSample { t, u: u.coords().as_slice().to_vec(), nodes: Vec::new(), expanded: 0 };
    if 0.0 > t {
        out.nodes.push((out.u.clone(), 0.0));
        return Ok(out);
    }
    let mut stack: Vec<(DVector<f64>, f64, usize)> = vec![(u.coords().clone(), 0.0, 0)];
    while let Some((x, s, depth)) = stack.pop() {
        if depth >= STOPPING_DEPTH_GUARD {
            return Err(Error::NonTermination(STOPPING_DEPTH_GUARD));
        }
        out.expanded += 1;
        let tuple = spec.sample_tuple(rng);
        // push in reverse so children are visited in branch order
        for m in tuple.matrices.iter().rev() {
            let y = m.apply_transpose(&x);
            let r = y.norm();
            if r == 0.0 {
                return Err(Error::ZeroImage);
            }
            let s1 = s - r.ln();
            let dir = y / r;
            if s1 > t {
                out.nodes.push((dir.as_slice().to_vec(), s1));
            } else {
                stack.push((dir, s1, depth + 1));
            }
        }
        if out.nodes.len() + stack.len() > cap {
            return Err(Error::CapExceeded { generation: depth + 1, count: out.nodes.len() + stack.len(), cap });
        }
    }
    Ok(out)
}

/// M_n(x) = Π_{|v|=n} φ(L(v)ᵀx) and Z_n = −log M_n per generation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Disintegration {
    pub m: Vec<f64>,
    pub z: Vec<f64>,
}

fn check_transform(phi: &dyn Fn(&DVector<f64>) -> f64, d: usize) -> Result<()> {
    let v = phi(&DVector::zeros(d));
    if (v - 1.0).abs() > 1e-9 {
        return Err(Error::BadTransform(v));
    }
    Ok(())
}

pub fn disintegrate(tree: &TreeRun, phi: &dyn Fn(&DVector<f64>) -> f64, x: &DVector<f64>) -> Result<Disintegration> {
    check_transform(phi, x.len())?;
    let mut out = Disintegration { m: Vec::new(), z: Vec::new() };
    for gen in &tree.generations {
        let z: f64 = gen.iter().map(|node| -phi(&node.l.apply_transpose(x)).ln()).sum();
        out.z.push(z);
        out.m.push((-z).exp());
    }
    Ok(out)
}

/// Z of one aggregated generation.
pub fn disintegrate_population(pop: &Population, phi: &dyn Fn(&DVector<f64>) -> f64, x: &DVector<f64>) -> Result<f64> {
    check_transform(phi, x.len())?;
    Ok(pop.groups.iter().map(|(l, c)| -c * phi(&l.apply_transpose(x)).ln()).sum())
}
