//! Law of the weight tuple (T₁,…,T_N): declarative specs, sampling of tuples
//! and of the marginal μ, and checks of the standing assumptions.

use std::collections::VecDeque;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cone_geometry::{norms, ConeMatrix, Direction};
use crate::error::{Error, Result};

const PROB_TOL: f64 = 1e-12;
const MAX_TEMPLATES: usize = 100_000;
const SEMIGROUP_DEPTH: usize = 8;

/// T = scale · v wᵀ
#[derive(Debug, Clone, PartialEq)]
pub struct RankOneFactor {
    pub scale: f64,
    pub v: Direction,
    pub w: Direction,
}

impl RankOneFactor {
    pub fn matrix(&self) -> ConeMatrix {
        ConeMatrix::rank_one(self.scale, &self.v, &self.w)
    }
}

/// One possible realization of the whole tuple, with its probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Template<T> {
    pub prob: f64,
    pub weights: Vec<T>,
}

/// N i.i.d. matrices θ·(center + radius·U), U uniform in the unit Frobenius ball.
#[derive(Debug, Clone, PartialEq)]
pub struct BallLaw {
    pub n: usize,
    pub center: ConeMatrix,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EnsembleKind {
    FiniteTuple(Vec<Template<ConeMatrix>>),
    RankOneFinite(Vec<Template<RankOneFactor>>),
    UniformBall(BallLaw),
}

/// An atom of μ (already multiplied by θ).
#[derive(Debug, Clone, PartialEq)]
pub struct MuAtom {
    pub prob: f64,
    pub matrix: ConeMatrix,
}

/// Full law of the weight tuple. Matrices in the kind are unscaled; every
/// sampled or enumerated matrix carries the global factor θ.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSpec {
    d: usize,
    theta: f64,
    kind: EnsembleKind,
    templates: Vec<Template<ConeMatrix>>,
    atoms: Vec<MuAtom>,
    mean_n: f64,
}

/// A realized tuple of nonzero weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTuple {
    pub matrices: Vec<ConeMatrix>,
}

impl WeightTuple {
    pub fn n_branches(&self) -> usize {
        self.matrices.len()
    }
}

impl EnsembleSpec {
    pub fn new(d: usize, theta: f64, kind: EnsembleKind) -> Result<Self> {
        if d < 2 {
            return Err(Error::InvalidModel(format!("dimension {d} below 2")));
        }
        if !(theta.is_finite() && theta > 0.0) {
            return Err(Error::InvalidModel(format!("theta = {theta} must be positive")));
        }
        let unscaled: Vec<Template<ConeMatrix>> = match &kind {
            EnsembleKind::FiniteTuple(ts) => ts.clone(),
            EnsembleKind::RankOneFinite(ts) => ts
                .iter()
                .map(|t| Template { prob: t.prob, weights: t.weights.iter().map(RankOneFactor::matrix).collect() })
                .collect(),
            EnsembleKind::UniformBall(b) => {
                if b.n == 0 {
                    return Err(Error::InvalidModel("ball law needs n ≥ 1".into()));
                }
                if b.center.dim() != d {
                    return Err(Error::InvalidModel("ball center has wrong dimension".into()));
                }
                if !(b.radius.is_finite() && b.radius >= 0.0) {
                    return Err(Error::InvalidModel("ball radius must be nonnegative".into()));
                }
                Vec::new()
            }
        };
        let (templates, atoms, mean_n) = if let EnsembleKind::UniformBall(b) = &kind {
            (Vec::new(), Vec::new(), b.n as f64)
        } else {
            if unscaled.is_empty() {
                return Err(Error::InvalidModel("no tuple templates".into()));
            }
            let total: f64 = unscaled.iter().map(|t| t.prob).sum();
            if unscaled.iter().any(|t| !(t.prob >= 0.0)) || (total - 1.0).abs() > PROB_TOL {
                return Err(Error::InvalidModel(format!("template probabilities sum to {total}, not 1")));
            }
            for t in &unscaled {
                if t.weights.is_empty() {
                    return Err(Error::InvalidModel("a template has no weights (N = 0)".into()));
                }
                for m in &t.weights {
                    if m.dim() != d {
                        return Err(Error::InvalidModel("template matrix has wrong dimension".into()));
                    }
                    if m.is_zero() {
                        return Err(Error::InvalidModel("zero matrix listed as a weight".into()));
                    }
                }
            }
            let templates: Vec<Template<ConeMatrix>> = unscaled
                .iter()
                .filter(|t| t.prob > 0.0)
                .map(|t| Template { prob: t.prob, weights: t.weights.iter().map(|m| m.scaled(theta)).collect() })
                .collect();
            let mean_n: f64 = templates.iter().map(|t| t.prob * t.weights.len() as f64).sum();
            let mut atoms: Vec<MuAtom> = Vec::new();
            for t in &templates {
                for m in &t.weights {
                    let p = t.prob / mean_n;
                    match atoms.iter_mut().find(|a| a.matrix == *m) {
                        Some(a) => a.prob += p,
                        None => atoms.push(MuAtom { prob: p, matrix: m.clone() }),
                    }
                }
            }
            (templates, atoms, mean_n)
        };
        Ok(EnsembleSpec { d, theta, kind, templates, atoms, mean_n })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn kind(&self) -> &EnsembleKind {
        &self.kind
    }

    /// Same law with a different global scale.
    pub fn with_theta(&self, theta: f64) -> Result<Self> {
        Self::new(self.d, theta, self.kind.clone())
    }

    pub fn mean_n(&self) -> f64 {
        self.mean_n
    }

    pub fn is_finite(&self) -> bool {
        !matches!(self.kind, EnsembleKind::UniformBall(_))
    }

    pub fn is_rank_one(&self) -> bool {
        matches!(self.kind, EnsembleKind::RankOneFinite(_))
    }

    /// θ-scaled tuple templates (finite kinds only; empty for the ball).
    pub fn templates(&self) -> &[Template<ConeMatrix>] {
        &self.templates
    }

    /// θ-scaled atoms of μ (finite kinds only; empty for the ball).
    pub fn mu_atoms(&self) -> &[MuAtom] {
        &self.atoms
    }

    pub fn ball(&self) -> Option<&BallLaw> {
        match &self.kind {
            EnsembleKind::UniformBall(b) => Some(b),
            _ => None,
        }
    }

    /// Right factors w of the rank-one weights: every Mᵀ∘u lies in this set.
    pub fn rank_one_directions(&self) -> Option<Vec<Direction>> {
        let EnsembleKind::RankOneFinite(ts) = &self.kind else { return None };
        let mut out: Vec<Direction> = Vec::new();
        for t in ts.iter().filter(|t| t.prob > 0.0) {
            for f in &t.weights {
                if !out.contains(&f.w) {
                    out.push(f.w.clone());
                }
            }
        }
        Some(out)
    }

    /// sup ‖M‖ over the support of μ.
    pub fn sup_norm(&self) -> f64 {
        match &self.kind {
            EnsembleKind::UniformBall(b) => self.theta * (b.center.op_norm() + b.radius),
            _ => self.atoms.iter().map(|a| a.matrix.op_norm()).fold(0.0, f64::max),
        }
    }

    /// Index of a template drawn from the template law.
    pub fn sample_template_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let x: f64 = rng.random();
        let mut acc = 0.0;
        for (i, t) in self.templates.iter().enumerate() {
            acc += t.prob;
            if x < acc {
                return i;
            }
        }
        self.templates.len() - 1
    }

    /// One θ-scaled matrix uniform on the ball B_radius(center).
    pub fn sample_ball_matrix<R: Rng + ?Sized>(&self, rng: &mut R) -> ConeMatrix {
        let b = self.ball().expect("ball law");
        let k = self.d * self.d;
        let g: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        let r = b.radius * rng.random::<f64>().powf(1.0 / k as f64) / norm;
        let m = DMatrix::from_fn(self.d, self.d, |i, j| (b.center.entries()[(i, j)] + r * g[i * self.d + j]) * self.theta);
        ConeMatrix::from_raw(m.map(|x| x.max(0.0)))
    }

    /// One draw of the tuple.
    pub fn sample_tuple<R: Rng + ?Sized>(&self, rng: &mut R) -> WeightTuple {
        match &self.kind {
            EnsembleKind::UniformBall(b) => WeightTuple { matrices: (0..b.n).map(|_| self.sample_ball_matrix(rng)).collect() },
            _ => WeightTuple { matrices: self.templates[self.sample_template_index(rng)].weights.clone() },
        }
    }

    /// One draw from μ: a size-biased tuple, then a uniform index.
    pub fn sample_mu<R: Rng + ?Sized>(&self, rng: &mut R) -> ConeMatrix {
        match &self.kind {
            EnsembleKind::UniformBall(_) => self.sample_ball_matrix(rng),
            _ => {
                let x: f64 = rng.random::<f64>() * self.mean_n;
                let mut acc = 0.0;
                let mut pick = self.templates.len() - 1;
                for (i, t) in self.templates.iter().enumerate() {
                    acc += t.prob * t.weights.len() as f64;
                    if x < acc {
                        pick = i;
                        break;
                    }
                }
                let t = &self.templates[pick];
                t.weights[rng.random_range(0..t.weights.len())].clone()
            }
        }
    }
}

/// Outcome of one assumption check with a human-readable witness.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub pass: bool,
    pub witness: String,
}

impl Check {
    fn new(pass: bool, witness: impl Into<String>) -> Self {
        Check { pass, witness: witness.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionReport {
    /// N ≥ 1 a.s. and 1 < E N < ∞
    pub a1: Check,
    pub mean_n: f64,
    /// every support matrix allowable
    pub a2_allowable: Check,
    /// a strictly positive product of support matrices
    pub a2_positive: Check,
    /// atom indices (finite support) whose product is positive
    pub positivity_certificate: Option<Vec<usize>>,
    /// criticality is established by calibration, not here
    pub a4_criticality: Check,
    /// ι(Mᵀ) ≥ c on the support
    pub a7: Check,
    pub c: f64,
    pub c_prime: f64,
    /// E[N^p0 + (Σ‖T_i‖)^p1] < ∞
    pub a8: Check,
    pub p0: f64,
    pub p1: f64,
    pub delta: f64,
    /// E[(Σ‖T_i‖^{1/(1+δ)})^{1+δ}] at exponent 1, or its bound for the ball
    pub delta_moment: f64,
}

impl AssumptionReport {
    pub fn all_pass(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, c) in [
            ("A1", &self.a1),
            ("A2 allowability", &self.a2_allowable),
            ("A2 positivity", &self.a2_positive),
            ("A7", &self.a7),
            ("A8", &self.a8),
        ] {
            if !c.pass {
                out.push(format!("{name}: {}", c.witness));
            }
        }
        out
    }

    /// ValidationFailure listing every violated assumption.
    pub fn ensure(&self) -> Result<()> {
        let f = self.failures();
        if f.is_empty() {
            Ok(())
        } else {
            Err(Error::ValidationFailure(f))
        }
    }
}

/// Checks A1, A2 (condition 𝒞), A7 and A8 for the spec.
pub fn verify_assumptions(spec: &EnsembleSpec) -> AssumptionReport {
    let en = spec.mean_n();
    let a1 = Check::new(en > 1.0 && en.is_finite(), format!("N ≥ 1 on every template, E N = {en}"));
    let (p0, p1, delta) = (2.0, 2.0, 0.5);
    match spec.kind() {
        EnsembleKind::UniformBall(b) => {
            let theta = spec.theta();
            let min_entry = b.center.min_entry();
            let positive = min_entry > b.radius;
            let ball_ok = Check::new(
                positive,
                format!("min entry of center {min_entry} vs radius {}", b.radius),
            );
            let (_, iota_center) = norms(&b.center.transpose());
            let c = theta * (iota_center - b.radius);
            let a7 = Check::new(c > 0.0, format!("ι(a₀ᵀ) − c_ball = {c}"));
            let sup = spec.sup_norm();
            let n = b.n as f64;
            let second = n * n + (n * sup).powf(p1);
            let delta_moment = (n * sup.powf(1.0 / (1.0 + delta))).powf(1.0 + delta);
            AssumptionReport {
                a1,
                mean_n: en,
                a2_allowable: ball_ok.clone(),
                a2_positive: ball_ok,
                positivity_certificate: None,
                a4_criticality: Check::new(true, "established by calibrate_critical"),
                a7,
                c,
                c_prime: -c.ln(),
                a8: Check::new(second.is_finite(), format!("bounded support: E N² + E(Σ‖T‖)² ≤ {second}")),
                p0,
                p1,
                delta,
                delta_moment,
            }
        }
        _ => {
            let atoms = spec.mu_atoms();
            let bad: Vec<usize> = (0..atoms.len()).filter(|&i| !atoms[i].matrix.is_allowable()).collect();
            let a2_allowable = Check::new(
                bad.is_empty(),
                if bad.is_empty() { "all support matrices allowable".to_string() } else { format!("non-allowable atoms {bad:?} (zero row or column)") },
            );
            let cert = positive_product(atoms.iter().map(|a| &a.matrix).collect::<Vec<_>>().as_slice());
            let a2_positive = Check::new(
                cert.is_some(),
                match &cert {
                    Some(c) => format!("positive product of atoms {c:?}"),
                    None => format!("undetermined: no positive product up to length {SEMIGROUP_DEPTH}"),
                },
            );
            let c = atoms.iter().map(|a| norms(&a.matrix.transpose()).1).fold(f64::INFINITY, f64::min);
            let a7 = Check::new(c > 0.0, format!("min ι(Mᵀ) over support = {c}"));
            let mut en2 = 0.0;
            let mut sum_sq = 0.0;
            let mut delta_moment = 0.0;
            for t in spec.templates() {
                let n = t.weights.len() as f64;
                let s: f64 = t.weights.iter().map(ConeMatrix::op_norm).sum();
                let sd: f64 = t.weights.iter().map(|m| m.op_norm().powf(1.0 / (1.0 + delta))).sum();
                en2 += t.prob * n.powf(p0);
                sum_sq += t.prob * s.powf(p1);
                delta_moment += t.prob * sd.powf(1.0 + delta);
            }
            AssumptionReport {
                a1,
                mean_n: en,
                a2_allowable,
                a2_positive,
                positivity_certificate: cert,
                a4_criticality: Check::new(true, "established by calibrate_critical"),
                a7,
                c,
                c_prime: -c.ln(),
                a8: Check::new((en2 + sum_sq).is_finite(), format!("E N² = {en2}, E(Σ‖T‖)² = {sum_sq}")),
                p0,
                p1,
                delta,
                delta_moment,
            }
        }
    }
}

/// Breadth-first search over zero patterns of products for a strictly positive one.
fn positive_product(ms: &[&ConeMatrix]) -> Option<Vec<usize>> {
    if ms.is_empty() {
        return None;
    }
    let pattern = |m: &DMatrix<f64>| -> Vec<bool> { m.iter().map(|x| *x > 0.0).collect() };
    let pats: Vec<DMatrix<f64>> = ms.iter().map(|m| m.entries().map(|x| if x > 0.0 { 1.0 } else { 0.0 })).collect();
    let mut seen = std::collections::HashSet::new();
    let mut queue: VecDeque<(DMatrix<f64>, Vec<usize>)> = VecDeque::new();
    for (i, p) in pats.iter().enumerate() {
        if seen.insert(pattern(p)) {
            queue.push_back((p.clone(), vec![i]));
        }
    }
    while let Some((p, path)) = queue.pop_front() {
        if p.iter().all(|x| *x > 0.0) {
            return Some(path);
        }
        if path.len() >= SEMIGROUP_DEPTH {
            continue;
        }
        for (i, q) in pats.iter().enumerate() {
            let r = (&p * q).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
            if seen.insert(pattern(&r)) {
                let mut next = path.clone();
                next.push(i);
                queue.push_back((r, next));
            }
        }
    }
    None
}

// ---------------------------------------------------------------------------
// model files

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    kind: String,
    d: usize,
    theta: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    templates: Vec<TemplateFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    iid: Option<IidFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ball: Option<BallFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateFile {
    prob: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    matrices: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    factors: Vec<FactorFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FactorFile {
    scale: f64,
    v: Vec<f64>,
    w: Vec<f64>,
}

/// n i.i.d. slots, each drawn from a categorical list of atoms.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IidFile {
    n: usize,
    atoms: Vec<IidAtom>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IidAtom {
    prob: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    matrix: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    factor: Option<FactorFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BallFile {
    n: usize,
    center: Vec<Vec<f64>>,
    radius: f64,
}

fn factor(f: &FactorFile) -> Result<RankOneFactor> {
    Ok(RankOneFactor { scale: f.scale, v: Direction::from_slice(&f.v)?, w: Direction::from_slice(&f.w)? })
}

/// All k^n combinations of n i.i.d. categorical slots.
fn iid_templates<T: Clone>(n: usize, atoms: &[(f64, T)]) -> Result<Vec<Template<T>>> {
    let count = (atoms.len() as f64).powi(n as i32);
    if n == 0 || atoms.is_empty() || count > MAX_TEMPLATES as f64 {
        return Err(Error::InvalidModel(format!("iid block expands to {count} templates")));
    }
    let mut out = vec![Template { prob: 1.0, weights: Vec::new() }];
    for _ in 0..n {
        let mut next = Vec::with_capacity(out.len() * atoms.len());
        for t in &out {
            for (p, a) in atoms {
                let mut w = t.weights.clone();
                w.push(a.clone());
                next.push(Template { prob: t.prob * p, weights: w });
            }
        }
        out = next;
    }
    Ok(out)
}

impl EnsembleSpec {
    /// Parses a model description in TOML.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let f: ModelFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let kind = match f.kind.as_str() {
            "finite_tuple" => {
                let mut ts = Vec::new();
                for t in &f.templates {
                    let ms = t.matrices.iter().map(|m| ConeMatrix::from_rows(m)).collect::<Result<Vec<_>>>()?;
                    ts.push(Template { prob: t.prob, weights: ms });
                }
                if let Some(iid) = &f.iid {
                    let atoms = iid
                        .atoms
                        .iter()
                        .map(|a| {
                            let m = a.matrix.as_ref().ok_or_else(|| Error::Config("finite_tuple atom needs `matrix`".into()))?;
                            Ok((a.prob, ConeMatrix::from_rows(m)?))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    ts.extend(iid_templates(iid.n, &atoms)?);
                }
                EnsembleKind::FiniteTuple(ts)
            }
            "rank_one_finite" => {
                let mut ts = Vec::new();
                for t in &f.templates {
                    let fs = t.factors.iter().map(factor).collect::<Result<Vec<_>>>()?;
                    ts.push(Template { prob: t.prob, weights: fs });
                }
                if let Some(iid) = &f.iid {
                    let atoms = iid
                        .atoms
                        .iter()
                        .map(|a| {
                            let fa = a.factor.as_ref().ok_or_else(|| Error::Config("rank_one_finite atom needs `factor`".into()))?;
                            Ok((a.prob, factor(fa)?))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    ts.extend(iid_templates(iid.n, &atoms)?);
                }
                EnsembleKind::RankOneFinite(ts)
            }
            "uniform_ball" => {
                let b = f.ball.as_ref().ok_or_else(|| Error::Config("uniform_ball needs a [ball] table".into()))?;
                EnsembleKind::UniformBall(BallLaw { n: b.n, center: ConeMatrix::from_rows(&b.center)?, radius: b.radius })
            }
            other => return Err(Error::Config(format!("unknown model kind `{other}`"))),
        };
        EnsembleSpec::new(f.d, f.theta, kind).map_err(|e| match e {
            Error::InvalidModel(m) => Error::Config(m),
            e => e,
        })
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read model file {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// TOML text that parses back to this spec (templates written explicitly).
    pub fn to_toml_string(&self) -> String {
        let mut f = ModelFile { kind: String::new(), d: self.d, theta: self.theta, templates: Vec::new(), iid: None, ball: None };
        match &self.kind {
            EnsembleKind::FiniteTuple(ts) => {
                f.kind = "finite_tuple".into();
                f.templates = ts.iter().map(|t| TemplateFile { prob: t.prob, matrices: t.weights.iter().map(ConeMatrix::rows).collect(), factors: Vec::new() }).collect();
            }
            EnsembleKind::RankOneFinite(ts) => {
                f.kind = "rank_one_finite".into();
                f.templates = ts
                    .iter()
                    .map(|t| TemplateFile {
                        prob: t.prob,
                        matrices: Vec::new(),
                        factors: t.weights.iter().map(|x| FactorFile { scale: x.scale, v: x.v.clone().into(), w: x.w.clone().into() }).collect(),
                    })
                    .collect();
            }
            EnsembleKind::UniformBall(b) => {
                f.kind = "uniform_ball".into();
                f.ball = Some(BallFile { n: b.n, center: b.center.rows(), radius: b.radius });
            }
        }
        toml::to_string(&f).expect("model serializes")
    }
}

/// The shipped fixtures.
pub mod fixtures {
    use super::*;

    /// Critical exponent and scale of RANK1-2D, from bisection on the closed form.
    pub const RANK1_2D_ALPHA: f64 = 0.7895915636713884;
    pub const RANK1_2D_THETA: f64 = 0.2791319596530894;

    fn e() -> Direction {
        Direction::diagonal(2)
    }

    fn rank_one_iid(theta: f64, atoms: &[(f64, RankOneFactor)]) -> EnsembleSpec {
        let ts = iid_templates(2, atoms).expect("small fixture");
        EnsembleSpec::new(2, theta, EnsembleKind::RankOneFinite(ts)).expect("valid fixture")
    }

    /// N = 2, T_i = θ C_i e eᵀ with C_i ∈ {1, 100} w.p. {0.99, 0.01}.
    pub fn rank1_2d(theta: f64) -> EnsembleSpec {
        rank_one_iid(
            theta,
            &[(0.99, RankOneFactor { scale: 1.0, v: e(), w: e() }), (0.01, RankOneFactor { scale: 100.0, v: e(), w: e() })],
        )
    }

    /// C ∈ {1, 4} w.p. {¾, ¼}: no critical exponent in (0, 1].
    pub fn c14(theta: f64) -> EnsembleSpec {
        rank_one_iid(
            theta,
            &[(0.75, RankOneFactor { scale: 1.0, v: e(), w: e() }), (0.25, RankOneFactor { scale: 4.0, v: e(), w: e() })],
        )
    }

    pub fn rank1_2d_b_pairs() -> [(Direction, Direction); 2] {
        let d = |x: f64, y: f64| Direction::from_slice(&[x, y]).unwrap();
        [(d(0.4, 1.0), d(1.0, 0.4)), (d(1.0, 0.3), d(0.3, 1.0))]
    }

    /// As RANK1-2D with the (v, w) pair drawn uniformly from two pairs.
    pub fn rank1_2d_b(theta: f64) -> EnsembleSpec {
        let pairs = rank1_2d_b_pairs();
        let mut atoms = Vec::new();
        for (pc, c) in [(0.99, 1.0), (0.01, 100.0)] {
            for (v, w) in &pairs {
                atoms.push((pc * 0.5, RankOneFactor { scale: c, v: v.clone(), w: w.clone() }));
            }
        }
        rank_one_iid(theta, &atoms)
    }

    /// N = 2 i.i.d. uniform on the Frobenius ball around θ·[[1, .6], [.4, 1]] of radius 0.2θ.
    pub fn ball_2d(theta: f64) -> EnsembleSpec {
        let center = ConeMatrix::from_rows(&[vec![1.0, 0.6], vec![0.4, 1.0]]).unwrap();
        EnsembleSpec::new(2, theta, EnsembleKind::UniformBall(BallLaw { n: 2, center, radius: 0.2 })).expect("valid fixture")
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use crate::rng::stream;

    fn mat(rows: [[f64; 2]; 2]) -> ConeMatrix {
        ConeMatrix::from_rows(&[rows[0].to_vec(), rows[1].to_vec()]).unwrap()
    }

    fn ab_spec() -> (ConeMatrix, ConeMatrix, EnsembleSpec) {
        let a = mat([[1.0, 0.5], [0.2, 1.0]]);
        let b = mat([[0.3, 0.1], [0.4, 0.2]]);
        let spec = EnsembleSpec::new(
            2,
            1.0,
            EnsembleKind::FiniteTuple(vec![
                Template { prob: 0.5, weights: vec![a.clone()] },
                Template { prob: 0.5, weights: vec![b.clone(), b.clone(), b.clone()] },
            ]),
        )
        .unwrap();
        (a, b, spec)
    }

    #[test]
    fn rank1_tuples_have_two_scaled_rank_one_weights() {
        let theta = 0.3;
        let spec = rank1_2d(theta);
        let mut rng = stream(1, 0);
        let e = Direction::diagonal(2);
        let eet = ConeMatrix::rank_one(1.0, &e, &e);
        for _ in 0..200 {
            let t = spec.sample_tuple(&mut rng);
            assert_eq!(t.n_branches(), 2);
            for m in &t.matrices {
                let c = m.entries()[(0, 0)] / (theta * eet.entries()[(0, 0)]);
                assert!((c - 1.0).abs() < 1e-12 || (c - 100.0).abs() < 1e-10);
                assert!((m.entries() - eet.entries() * (theta * c)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn template_frequencies_within_binomial_band() {
        let (_, _, spec) = ab_spec();
        let mut rng = stream(2, 0);
        let n = 100_000;
        let three = (0..n).filter(|_| spec.sample_tuple(&mut rng).n_branches() == 3).count();
        let f = three as f64 / n as f64;
        assert!((f - 0.5).abs() <= 0.005, "{f}");
    }

    #[test]
    fn mu_atoms_follow_size_biasing() {
        let (a, b, spec) = ab_spec();
        assert_eq!(spec.mean_n(), 2.0);
        let atoms = spec.mu_atoms();
        let pa = atoms.iter().find(|x| x.matrix == a).unwrap().prob;
        let pb = atoms.iter().find(|x| x.matrix == b).unwrap().prob;
        assert!((pa - 0.25).abs() < 1e-15 && (pb - 0.75).abs() < 1e-15);

        let single = EnsembleSpec::new(2, 1.0, EnsembleKind::FiniteTuple(vec![Template { prob: 1.0, weights: vec![a.clone(), a.clone()] }])).unwrap();
        assert_eq!(single.mu_atoms().len(), 1);
        let mut rng = stream(3, 0);
        assert!((0..100).all(|_| single.sample_mu(&mut rng) == a));
    }

    #[test]
    fn rank1_mu_frequency_of_large_weight() {
        let spec = rank1_2d(1.0);
        let mut rng = stream(4, 0);
        let n = 1_000_000;
        let big = (0..n).filter(|_| spec.sample_mu(&mut rng).max_entry() > 10.0).count();
        let f = big as f64 / n as f64;
        let band = 3.0 * (0.01f64 * 0.99 / n as f64).sqrt();
        assert!((f - 0.01).abs() <= band, "{f}");
    }

    #[test]
    fn mu_matches_tuple_sums_for_a_test_function() {
        let (_, _, spec) = ab_spec();
        let f = |m: &ConeMatrix| m.entries()[(0, 1)];
        let mut rng = stream(5, 0);
        let n = 50_000;
        let mu: Vec<f64> = (0..n).map(|_| f(&spec.sample_mu(&mut rng))).collect();
        let tup: Vec<f64> = (0..n).map(|_| spec.sample_tuple(&mut rng).matrices.iter().map(f).sum::<f64>() / spec.mean_n()).collect();
        let stats = |x: &[f64]| {
            let m = x.iter().sum::<f64>() / x.len() as f64;
            let v = x.iter().map(|y| (y - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64;
            (m, v / x.len() as f64)
        };
        let (m1, v1) = stats(&mu);
        let (m2, v2) = stats(&tup);
        assert!((m1 - m2).abs() <= 3.0 * (v1 + v2).sqrt());
    }

    #[test]
    fn ball_samples_stay_in_the_box() {
        let spec = ball_2d(1.0);
        let mut rng = stream(6, 0);
        let c = [[1.0, 0.6], [0.4, 1.0]];
        for _ in 0..10_000 {
            for m in spec.sample_tuple(&mut rng).matrices {
                for i in 0..2 {
                    for j in 0..2 {
                        assert!((m.entries()[(i, j)] - c[i][j]).abs() <= 0.2 + 1e-12);
                    }
                }
                assert!((m.entries() - DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.4, 1.0])).norm() <= 0.2 + 1e-12);
            }
        }
    }

    #[test]
    fn rank1_passes_with_expected_c() {
        let theta = RANK1_2D_THETA;
        let r = verify_assumptions(&rank1_2d(theta));
        assert!(r.all_pass(), "{:?}", r.failures());
        assert!((r.c - theta / 2f64.sqrt()).abs() < 1e-14);
        assert!((r.c_prime + r.c.ln()).abs() < 1e-15);
        assert!(r.p0 + r.p1 > 2.0);
    }

    #[test]
    fn zero_column_fails_a2() {
        let spec = EnsembleSpec::new(
            2,
            1.0,
            EnsembleKind::FiniteTuple(vec![Template { prob: 1.0, weights: vec![mat([[1.0, 0.0], [1.0, 0.0]]), mat([[1.0, 1.0], [1.0, 1.0]])] }]),
        )
        .unwrap();
        let r = verify_assumptions(&spec);
        assert!(!r.a2_allowable.pass);
        assert!(matches!(r.ensure(), Err(Error::ValidationFailure(v)) if v.iter().any(|s| s.contains("A2"))));
    }

    #[test]
    fn positivity_certificate_needs_a_product() {
        // two permutation-like allowable matrices whose product is positive
        let p = mat([[1.0, 1.0], [0.0, 1.0]]);
        let q = mat([[1.0, 0.0], [1.0, 1.0]]);
        let spec = EnsembleSpec::new(2, 1.0, EnsembleKind::FiniteTuple(vec![Template { prob: 1.0, weights: vec![p, q] }])).unwrap();
        let r = verify_assumptions(&spec);
        assert!(r.a2_positive.pass);
        assert_eq!(r.positivity_certificate.as_ref().unwrap().len(), 2);

        let i = ConeMatrix::identity(2);
        let spec = EnsembleSpec::new(2, 1.0, EnsembleKind::FiniteTuple(vec![Template { prob: 1.0, weights: vec![i.clone(), i] }])).unwrap();
        assert!(!verify_assumptions(&spec).a2_positive.pass);
    }

    #[test]
    fn oversized_ball_fails() {
        let center = mat([[1.0, 0.6], [0.4, 1.0]]);
        let spec = EnsembleSpec::new(2, 1.0, EnsembleKind::UniformBall(BallLaw { n: 2, center, radius: 0.4 })).unwrap();
        let r = verify_assumptions(&spec);
        assert!(!r.all_pass());
        assert!(verify_assumptions(&ball_2d(1.0)).all_pass());
    }

    #[test]
    fn single_branch_fails_a1() {
        let spec = EnsembleSpec::new(2, 1.0, EnsembleKind::FiniteTuple(vec![Template { prob: 1.0, weights: vec![mat([[2.0, 1.0], [1.0, 1.0]])] }])).unwrap();
        assert!(!verify_assumptions(&spec).a1.pass);
    }

    #[test]
    fn verification_is_deterministic() {
        let spec = rank1_2d_b(1.0);
        assert_eq!(verify_assumptions(&spec), verify_assumptions(&spec));
    }

    #[test]
    fn toml_round_trip() {
        for spec in [rank1_2d(0.7), rank1_2d_b(1.0), ball_2d(2.0), ab_spec().2] {
            let back = EnsembleSpec::from_toml_str(&spec.to_toml_string()).unwrap();
            assert_eq!(back, spec);
        }
    }

    #[test]
    fn toml_rejects_unknown_keys_and_bad_probabilities() {
        let bad = "kind = \"uniform_ball\"\nd = 2\ntheta = 1.0\ncolour = 3\n";
        assert!(matches!(EnsembleSpec::from_toml_str(bad), Err(Error::Config(_))));
        let bad = "kind = \"finite_tuple\"\nd = 2\ntheta = 1.0\n[[templates]]\nprob = 0.7\nmatrices = [[[1.0, 1.0], [1.0, 1.0]]]\n";
        assert!(matches!(EnsembleSpec::from_toml_str(bad), Err(Error::Config(_))));
    }

    #[test]
    fn iid_shorthand_expands_to_product_templates() {
        let text = r#"
kind = "rank_one_finite"
d = 2
theta = 1.0
[iid]
n = 2
[[iid.atoms]]
prob = 0.99
factor = { scale = 1.0, v = [1.0, 1.0], w = [1.0, 1.0] }
[[iid.atoms]]
prob = 0.01
factor = { scale = 100.0, v = [1.0, 1.0], w = [1.0, 1.0] }
"#;
        assert_eq!(EnsembleSpec::from_toml_str(text).unwrap(), rank1_2d(1.0));
    }
}
