//! Command-line front end: flag and config-file parsing, subcommand
//! dispatch, output files and the run manifest.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::branching::{exact_moments, grow, martingales, stopping_line, stream_martingales, MartingaleSeries, SeedRecord};
use crate::cone_geometry::{sphere_grid, Direction};
use crate::model::{verify_assumptions, EnsembleSpec};
use crate::mrw::{atom_schedule, many_to_one_check, regenerate, simulate, Path as ChainPath, RegenMode};
use crate::rng::{purpose, stream};
use crate::smoothing::{build_fixed_point, default_u0, fixed_point_residual, slowvar_diag, D_G_curves, FixedPointConfig, FixedPointModel, RenewalConfig};
use crate::spectral::{calibrate_critical, center_at, critical_system, m_curve, EigenSystem, SpectralOptions};
use crate::stats::MeanSe;
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "critsmooth", version, about = "Simulation and numerical diagnostics for critical multivariate smoothing transforms")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CommandKind {
    Validate,
    Spectral,
    Calibrate,
    Martingale,
    Mrw,
    Regen,
    Many2one,
    Fixedpoint,
    Renewal,
    Slowvar,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the model assumptions
    Validate(Invocation),
    /// Spectral curve m(s) on a grid of exponents
    Spectral(Invocation),
    /// Rescale the model to criticality
    Calibrate(Invocation),
    /// Additive and derivative martingales over replicate trees
    Martingale(Invocation),
    /// Trajectory of the tilted Markov random walk
    Mrw(Invocation),
    /// Regeneration schedule of the tilted chain
    Regen(Invocation),
    /// Many-to-one identity by exhaustive enumeration
    Many2one(Invocation),
    /// Laplace transform of the fixed point on an (r, u) grid
    Fixedpoint(Invocation),
    /// Renewal-equation diagnostics of D and G
    Renewal(Invocation),
    /// Slow-variation and log-law diagnostics
    Slowvar(Invocation),
}

impl Command {
    fn split(self) -> (CommandKind, Invocation) {
        match self {
            Command::Validate(i) => (CommandKind::Validate, i),
            Command::Spectral(i) => (CommandKind::Spectral, i),
            Command::Calibrate(i) => (CommandKind::Calibrate, i),
            Command::Martingale(i) => (CommandKind::Martingale, i),
            Command::Mrw(i) => (CommandKind::Mrw, i),
            Command::Regen(i) => (CommandKind::Regen, i),
            Command::Many2one(i) => (CommandKind::Many2one, i),
            Command::Fixedpoint(i) => (CommandKind::Fixedpoint, i),
            Command::Renewal(i) => (CommandKind::Renewal, i),
            Command::Slowvar(i) => (CommandKind::Slowvar, i),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct Invocation {
    /// TOML file with default values for any of the flags below
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub settings: Settings,
}

/// Every tunable of a run. Flags override the config file; each command
/// reads the keys it uses and ignores the rest.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    /// Model file
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Root seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads
    #[arg(long)]
    pub workers: Option<usize>,
    /// Exponent grid `a:b:step` or a comma list
    #[arg(long)]
    pub s: Option<String>,
    /// Level grid `a:b:step` or a comma list
    #[arg(long)]
    pub t: Option<String>,
    /// Radii `logr a b n`, `a:b:step` or a comma list
    #[arg(long)]
    pub radii: Option<String>,
    /// Starting direction as a comma list, normalized
    #[arg(long)]
    pub u: Option<String>,
    /// Tree depth
    #[arg(long)]
    pub depth: Option<usize>,
    /// Node cap (distinct products per generation)
    #[arg(long)]
    pub cap: Option<usize>,
    /// Chain length, or the enumeration depth for many2one
    #[arg(long)]
    pub n: Option<usize>,
    /// Replicate trees or environments
    #[arg(long)]
    pub replicates: Option<usize>,
    /// Monte Carlo sample size for tuple and kernel expectations
    #[arg(long)]
    pub samples: Option<usize>,
    /// Stopping-line level; enables stopping_line.csv
    #[arg(long)]
    pub level: Option<f64>,
    /// Regeneration mode: atom or split
    #[arg(long)]
    pub mode: Option<String>,
    /// Sphere grid resolution for direction sweeps
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Regeneration cycles used by renewal
    #[arg(long)]
    pub cycles: Option<usize>,
    /// Martingales from aggregated generations instead of stored trees;
    /// the cap then bounds distinct products rather than nodes
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub stream: Option<bool>,
}

impl Settings {
    /// Fields of `self` win; missing ones come from `other`.
    fn or(self, other: Settings) -> Settings {
        Settings {
            model: self.model.or(other.model),
            out: self.out.or(other.out),
            seed: self.seed.or(other.seed),
            workers: self.workers.or(other.workers),
            s: self.s.or(other.s),
            t: self.t.or(other.t),
            radii: self.radii.or(other.radii),
            u: self.u.or(other.u),
            depth: self.depth.or(other.depth),
            cap: self.cap.or(other.cap),
            n: self.n.or(other.n),
            replicates: self.replicates.or(other.replicates),
            samples: self.samples.or(other.samples),
            level: self.level.or(other.level),
            mode: self.mode.or(other.mode),
            resolution: self.resolution.or(other.resolution),
            cycles: self.cycles.or(other.cycles),
            stream: self.stream.or(other.stream),
        }
    }
}

/// Fully resolved run description, echoed into the manifest.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub command: CommandKind,
    pub model: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub workers: usize,
    pub settings: Settings,
}

/// Parses argv (including the program name) and the optional config file.
pub fn parse<I, T>(argv: I) -> std::result::Result<RunConfig, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv)?;
    let (command, inv) = cli.command.split();
    resolve(command, inv).map_err(|e| clap::Error::raw(clap::error::ErrorKind::ValueValidation, format!("{e}\n")))
}

fn resolve(command: CommandKind, inv: Invocation) -> Result<RunConfig> {
    let from_file = match &inv.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config file {}: {e}", path.display())))?;
            toml::from_str::<Settings>(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => Settings::default(),
    };
    let settings = inv.settings.or(from_file);
    let model = settings.model.clone().ok_or_else(|| Error::Config("no model file given (--model)".into()))?;
    let workers = settings.workers.unwrap_or(1);
    if workers == 0 {
        return Err(Error::Config("--workers must be at least 1".into()));
    }
    Ok(RunConfig { command, model, out: settings.out.clone().unwrap_or_else(|| PathBuf::from("out")), seed: settings.seed.unwrap_or(0), workers, settings })
}

/// Parses a grid: `a:b:step` (inclusive), `logr a b n` or a comma list.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let bad = || Error::Config(format!("malformed grid `{text}`"));
    let num = |x: &str| x.trim().parse::<f64>().map_err(|_| bad());
    let text = text.trim();
    let out = if let Some(rest) = text.strip_prefix("logr") {
        let parts: Vec<&str> = rest.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(bad());
        }
        let (a, b) = (num(parts[0])?, num(parts[1])?);
        let n: usize = parts[2].parse().map_err(|_| bad())?;
        if a <= 0.0 || b <= 0.0 || n == 0 {
            return Err(bad());
        }
        if n == 1 {
            vec![a]
        } else {
            (0..n).map(|i| (a.ln() + (b.ln() - a.ln()) * i as f64 / (n - 1) as f64).exp()).collect()
        }
    } else if text.contains(':') {
        let parts: Vec<f64> = text.split(':').map(num).collect::<Result<_>>()?;
        let [a, b, step] = parts[..] else { return Err(bad()) };
        if !(step > 0.0) || b < a {
            return Err(bad());
        }
        let count = ((b - a) / step + 1e-9).floor() as usize + 1;
        (0..count).map(|i| a + step * i as f64).collect()
    } else {
        text.split(',').map(num).collect::<Result<_>>()?
    };
    if out.is_empty() || out.iter().any(|x| !x.is_finite()) {
        return Err(bad());
    }
    Ok(out)
}

fn parse_direction(text: &str, d: usize) -> Result<Direction> {
    let coords = parse_grid(text)?;
    if coords.len() != d {
        return Err(Error::Config(format!("direction `{text}` has {} coordinates, the model has d = {d}", coords.len())));
    }
    Direction::from_slice(&coords).map_err(|e| Error::Config(format!("direction `{text}`: {e}")))
}

/// Files written by a run, in order, with their content hashes.
struct Outputs {
    dir: PathBuf,
    files: Vec<FileRecord>,
}

#[derive(Debug, Clone, Serialize)]
struct FileRecord {
    name: String,
    bytes: usize,
    sha256: String,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Outputs { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| Error::Io(format!("cannot write {}: {e}", path.display())))?;
        self.files.push(FileRecord { name: name.into(), bytes: bytes.len(), sha256: hex::encode(Sha256::digest(bytes)) });
        Ok(())
    }

    fn csv(&mut self, name: &str, header: &[String], rows: &[Vec<String>]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Io(e.to_string());
        w.write_record(header).map_err(io)?;
        for r in rows {
            w.write_record(r).map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        self.write(name, &bytes)
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }
}

fn header(fixed: &[&str], prefix: &str, d: usize, tail: &[&str]) -> Vec<String> {
    fixed.iter().map(|s| s.to_string()).chain((1..=d).map(|i| format!("{prefix}{i}"))).chain(tail.iter().map(|s| s.to_string())).collect()
}

fn cells(xs: impl IntoIterator<Item = f64>) -> Vec<String> {
    xs.into_iter().map(|x| x.to_string()).collect()
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: CommandKind,
    config: &'a RunConfig,
    seed: u64,
    versions: Versions,
    wall_time_s: f64,
    exit_code: i32,
    error: Option<String>,
    files: &'a [FileRecord],
}

#[derive(Serialize)]
struct Versions {
    critsmooth: &'static str,
}

/// Runs a parsed configuration on a pool of `workers` threads and returns
/// the process exit code. Outputs and `manifest.json` land in the output
/// directory; the manifest is written for failed runs too.
pub fn run(cfg: &RunConfig) -> i32 {
    let start = Instant::now();
    let mut out = match Outputs::new(&cfg.out) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let result = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", cfg.workers)))
        .and_then(|pool| pool.install(|| dispatch(cfg, &mut out)));
    let (code, error) = match &result {
        Ok(summary) => {
            println!("{summary}");
            (0, None)
        }
        Err(e) => {
            eprintln!("error: {e}");
            (e.exit_code(), Some(e.to_string()))
        }
    };
    let files = std::mem::take(&mut out.files);
    let manifest = Manifest { command: cfg.command, config: cfg, seed: cfg.seed, versions: Versions { critsmooth: env!("CARGO_PKG_VERSION") }, wall_time_s: start.elapsed().as_secs_f64(), exit_code: code, error, files: &files };
    if let Err(e) = out.json("manifest.json", &manifest) {
        eprintln!("error: {e}");
        return if code == 0 { e.exit_code() } else { code };
    }
    code
}

/// Parses argv and runs; usage and config errors give exit code 4.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match parse(argv) {
        Ok(cfg) => run(&cfg),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                4
            } else {
                0
            }
        }
    }
}

fn dispatch(cfg: &RunConfig, out: &mut Outputs) -> Result<String> {
    let spec = EnsembleSpec::from_toml_file(&cfg.model)?;
    if cfg.command == CommandKind::Validate {
        let report = verify_assumptions(&spec);
        out.json("validate.json", &report)?;
        report.ensure()?;
        return Ok("validate: all assumptions pass".into());
    }
    verify_assumptions(&spec).ensure()?;
    let opts = SpectralOptions::default_for(spec.d());
    let ctx = Ctx { cfg, s: &cfg.settings, spec, opts };
    match cfg.command {
        CommandKind::Validate => unreachable!(),
        CommandKind::Spectral => ctx.spectral(out),
        CommandKind::Calibrate => ctx.calibrate(out),
        CommandKind::Martingale => ctx.martingale(out),
        CommandKind::Mrw => ctx.mrw(out),
        CommandKind::Regen => ctx.regen(out),
        CommandKind::Many2one => ctx.many2one(out),
        CommandKind::Fixedpoint => ctx.fixedpoint(out),
        CommandKind::Renewal => ctx.renewal(out),
        CommandKind::Slowvar => ctx.slowvar(out),
    }
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    s: &'a Settings,
    spec: EnsembleSpec,
    opts: SpectralOptions,
}

impl Ctx<'_> {
    fn d(&self) -> usize {
        self.spec.d()
    }

    fn cap(&self) -> usize {
        self.s.cap.unwrap_or(1_000_000)
    }

    fn direction(&self) -> Result<Direction> {
        self.s.u.as_deref().map_or_else(|| Ok(Direction::diagonal(self.d())), |u| parse_direction(u, self.d()))
    }

    fn critical(&self) -> Result<(EnsembleSpec, EigenSystem)> {
        let (crit, _, eig) = critical_system(&self.spec, self.opts)?;
        Ok((crit, eig))
    }

    /// Critical system, or for a ball model that cannot be made critical the
    /// drift-free rescaling at exponent 1 (the chain does not need m = 1).
    fn chain_system(&self) -> Result<(EnsembleSpec, EigenSystem)> {
        match self.critical() {
            Err(Error::CalibrationOutOfRange { .. }) if self.spec.ball().is_some() => center_at(&self.spec, 1.0, self.opts),
            other => other,
        }
    }

    fn fixed_point(&self, crit: &EnsembleSpec, eig: &EigenSystem) -> Result<FixedPointModel> {
        let cfg = FixedPointConfig { replicates: self.s.replicates.unwrap_or(2000), depth: self.s.depth.unwrap_or(15), k_scale: 1.0, cap: self.cap(), seed: self.cfg.seed };
        build_fixed_point(crit, eig, cfg)
    }

    fn spectral(&self, out: &mut Outputs) -> Result<String> {
        let s = parse_grid(self.s.s.as_deref().unwrap_or("0.1:1.0:0.1"))?;
        let curve = m_curve(&self.spec, &s, self.opts)?;
        let rows: Vec<Vec<String>> = (0..s.len()).map(|i| cells([curve.s[i], curve.k[i], curve.m[i], curve.m_prime[i]])).collect();
        out.csv("spectral.csv", &header(&["s", "k", "m", "m_prime"], "", 0, &[]), &rows)?;
        Ok(format!("spectral: {} exponents, min log-convexity {:.3e}", s.len(), curve.min_log_convexity()))
    }

    fn calibrate(&self, out: &mut Outputs) -> Result<String> {
        let (_, cal) = calibrate_critical(&self.spec, self.opts)?;
        #[derive(Serialize)]
        struct Record {
            alpha: f64,
            theta: f64,
            res_m: f64,
            res_mprime: f64,
        }
        out.json("calibration.json", &Record { alpha: cal.alpha, theta: cal.theta_star, res_m: cal.res_m, res_mprime: cal.res_mprime })?;
        Ok(format!("calibrate: alpha = {} theta = {}", cal.alpha, cal.theta_star))
    }

    fn martingale(&self, out: &mut Outputs) -> Result<String> {
        let (crit, eig) = self.critical()?;
        let u = self.direction()?;
        let (depth, reps, cap, seed) = (self.s.depth.unwrap_or(10), self.s.replicates.unwrap_or(1000), self.cap(), self.cfg.seed);
        let streamed = self.s.stream.unwrap_or(false);
        let runs: Vec<MartingaleSeries> = (0..reps as u64)
            .into_par_iter()
            .map(|r| {
                let record = SeedRecord { seed, stream: purpose::TREES + r };
                if streamed {
                    stream_martingales(&crit, &eig, &u, depth, record, cap)
                } else {
                    grow(&crit, depth, record, cap).map(|tree| martingales(&tree, &u, &eig))
                }
            })
            .collect::<Result<_>>()?;
        let mut rows = Vec::new();
        for (r, run) in runs.iter().enumerate() {
            for n in 0..=depth {
                let mut row = vec![r.to_string(), n.to_string()];
                row.extend(cells([run.w[n], run.dw[n], run.max_norm[n]]));
                rows.push(row);
            }
        }
        out.csv("martingales.csv", &header(&["replicate", "n", "W", "DW", "maxnorm"], "", 0, &[]), &rows)?;

        #[derive(Serialize)]
        struct Level {
            n: usize,
            w: MeanSe,
            dw: MeanSe,
            h: f64,
            bh: f64,
            exact_var_w: Option<f64>,
            exact_var_dw: Option<f64>,
        }
        let (h, bh) = (eig.h_at(u.coords()), eig.b_at(u.coords()) * eig.h_at(u.coords()));
        let levels: Vec<Level> = (0..=depth)
            .map(|n| {
                let ex = if n <= 12 { exact_moments(&crit, &eig, &u, n) } else { None };
                Level {
                    n,
                    w: MeanSe::of(&runs.iter().map(|r| r.w[n]).collect::<Vec<_>>()),
                    dw: MeanSe::of(&runs.iter().map(|r| r.dw[n]).collect::<Vec<_>>()),
                    h,
                    bh,
                    exact_var_w: ex.map(|e| e.var_w),
                    exact_var_dw: ex.map(|e| e.var_dw),
                }
            })
            .collect();
        out.json("martingale.json", &levels)?;

        if let Some(t) = self.s.level {
            let lines: Vec<_> = (0..reps as u64).into_par_iter().map(|r| stopping_line(&crit, &u, t, &mut stream(seed, purpose::STOPPING + r), cap)).collect::<Result<_>>()?;
            let mut rows = Vec::new();
            for (r, line) in lines.iter().enumerate() {
                for (uu, s) in &line.nodes {
                    let mut row = vec![r.to_string()];
                    row.extend(cells([t, *s].into_iter().chain(uu.iter().copied())));
                    rows.push(row);
                }
            }
            out.csv("stopping_line.csv", &header(&["replicate", "t", "S"], "U", self.d(), &[]), &rows)?;
        }
        let last = &levels[depth];
        Ok(format!("martingale: {reps} replicates to depth {depth}; mean W_n = {:.6} (H = {h:.6}), mean DW_n = {:.6} (bH = {bh:.6})", last.w.mean, last.dw.mean))
    }

    fn mrw(&self, out: &mut Outputs) -> Result<String> {
        let (spec, eig) = self.chain_system()?;
        let n = self.s.n.unwrap_or(10_000);
        let traj = simulate(&spec, &eig, &self.direction()?, n, &mut stream(self.cfg.seed, purpose::CHAIN))?;
        let rows: Vec<Vec<String>> = traj
            .states
            .iter()
            .map(|st| {
                let mut row = vec![st.n.to_string()];
                row.extend(cells(st.u.coords().iter().copied().chain([st.s])));
                row
            })
            .collect();
        out.csv("trajectory.csv", &header(&["n"], "u", self.d(), &["S"]), &rows)?;
        let summary = traj.summary();
        out.json("mrw.json", &summary)?;
        Ok(format!("mrw: {n} steps, S_n/n = {:.4e}, min S = {:.3}, max S = {:.3}", summary.s_over_n, summary.min_s, summary.max_s))
    }

    fn regen(&self, out: &mut Outputs) -> Result<String> {
        let (spec, eig) = self.chain_system()?;
        let mode = match self.s.mode.as_deref() {
            None if spec.is_finite() => RegenMode::Atom,
            None => RegenMode::Split,
            Some("atom") => RegenMode::Atom,
            Some("split") => RegenMode::Split,
            Some(other) => return Err(Error::Config(format!("unknown regeneration mode `{other}` (atom or split)"))),
        };
        let n = self.s.n.unwrap_or(100_000);
        let (_, sched) = regenerate(&spec, &eig, mode, &self.direction()?, n, self.cfg.seed, &mut stream(self.cfg.seed, purpose::CHAIN))?;
        let rows: Vec<Vec<String>> = sched.sigma.iter().enumerate().map(|(k, s)| vec![k.to_string(), s.to_string(), sched.v_increments.get(k).map_or(String::new(), |v| v.to_string())]).collect();
        out.csv("regen.csv", &header(&["k", "sigma", "V_increment"], "", 0, &[]), &rows)?;

        #[derive(Serialize)]
        struct Report<'a> {
            mode: RegenMode,
            regenerations: usize,
            atom: &'a Option<Vec<f64>>,
            split: &'a Option<crate::mrw::SplitParams>,
            clipped: usize,
            diagnostics: Option<crate::mrw::RegenDiagnostics>,
        }
        let diagnostics = (sched.cycles.len() >= 4).then(|| sched.diagnostics(verify_assumptions(&spec).c_prime));
        out.json("regen.json", &Report { mode, regenerations: sched.sigma.len(), atom: &sched.atom, split: &sched.split, clipped: sched.clipped, diagnostics })?;
        Ok(format!("regen: {} regenerations in {n} steps", sched.sigma.len()))
    }

    fn many2one(&self, out: &mut Outputs) -> Result<String> {
        let (crit, eig) = self.critical()?;
        let u = self.direction()?;
        let n = self.s.n.unwrap_or(2);
        let c_prime = verify_assumptions(&crit).c_prime;
        let fs: [(&str, Box<dyn Fn(&ChainPath) -> f64>); 3] = [
            ("one", Box::new(|_| 1.0)),
            ("final_level_above_half_c_prime", Box::new(move |p: &ChainPath| if p.last().map_or(0.0, |x| x.1) > c_prime / 2.0 { 1.0 } else { 0.0 })),
            ("atan_max_level", Box::new(|p: &ChainPath| p.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max).atan())),
        ];
        #[derive(Serialize)]
        struct Check {
            functional: &'static str,
            lhs: f64,
            rhs: f64,
            abs_error: f64,
        }
        let checks: Vec<Check> = fs
            .iter()
            .map(|(name, f)| many_to_one_check(&crit, &eig, &u, n, f.as_ref()).map(|m| Check { functional: name, lhs: m.lhs, rhs: m.rhs, abs_error: m.abs_error }))
            .collect::<Result<_>>()?;
        let worst = checks.iter().map(|c| c.abs_error).fold(0.0, f64::max);
        #[derive(Serialize)]
        struct Report {
            n: usize,
            u: Vec<f64>,
            max_abs_error: f64,
            checks: Vec<Check>,
        }
        out.json("many2one.json", &Report { n, u: u.coords().as_slice().to_vec(), max_abs_error: worst, checks })?;
        if worst > 1e-12 {
            return Err(Error::ToleranceExceeded { what: "max |lhs - rhs|".into(), value: worst, tol: 1e-12 });
        }
        Ok(format!("many2one: n = {n}, max |lhs - rhs| = {worst:.3e}"))
    }

    fn fixedpoint(&self, out: &mut Outputs) -> Result<String> {
        let (crit, eig) = self.critical()?;
        let fpm = self.fixed_point(&crit, &eig)?;
        let radii = parse_grid(self.s.radii.as_deref().unwrap_or("logr 0.25 4 5"))?;
        let dirs = match &self.s.u {
            Some(u) => vec![parse_direction(u, self.d())?],
            None => sphere_grid(self.d(), self.s.resolution.unwrap_or(4))?,
        };
        let grid = fpm.laplace_grid(&dirs, &radii);
        let rows: Vec<Vec<String>> = grid.values.iter().map(|p| cells([p.r].into_iter().chain(p.u.iter().copied()).chain([p.phi, p.se]))).collect();
        out.csv("laplace.csv", &header(&["r"], "u", self.d(), &["phi", "se"]), &rows)?;
        let samples = self.s.samples.unwrap_or(1000);
        let residual = (samples > 0).then(|| {
            let pts: Vec<(f64, Direction)> = dirs.iter().flat_map(|u| radii.iter().map(move |&r| (r, u.clone()))).collect();
            fixed_point_residual(&fpm, &crit, &pts, samples, &mut stream(self.cfg.seed, purpose::TUPLES))
        });
        #[derive(Serialize)]
        struct Report<'a> {
            alpha: f64,
            replicates: usize,
            depth: usize,
            positive_fraction: Vec<f64>,
            max_increase_z: f64,
            residual: &'a Option<crate::smoothing::ResidualReport>,
        }
        let positive_fraction = dirs.iter().map(|u| fpm.positive_fraction(u.coords())).collect();
        out.json("fixedpoint.json", &Report { alpha: fpm.alpha, replicates: fpm.replicates(), depth: fpm.depth, positive_fraction, max_increase_z: grid.max_increase_z(), residual: &residual })?;
        Ok(match residual {
            Some(r) => format!("fixedpoint: {} grid points, max residual {:.3e}, max |z| {:.2}", grid.values.len(), r.max_residual, r.max_abs_z),
            None => format!("fixedpoint: {} grid points", grid.values.len()),
        })
    }

    fn renewal(&self, out: &mut Outputs) -> Result<String> {
        let (crit, eig) = self.critical()?;
        let fpm = self.fixed_point(&crit, &eig)?;
        let u = self.direction()?;
        let t_grid = parse_grid(self.s.t.as_deref().unwrap_or("1:6:1"))?;
        let cfg = RenewalConfig { samples: self.s.samples.unwrap_or(5000), max_cycles: self.s.cycles.unwrap_or(2000) };
        let n = self.s.n.unwrap_or(20_000);
        let chain = if n > 0 && crit.is_finite() {
            let traj = simulate(&crit, &eig, &u, n, &mut stream(self.cfg.seed, purpose::CHAIN))?;
            let sched = atom_schedule(&crit, &traj, None)?;
            Some((traj, sched))
        } else {
            None
        };
        let rep = D_G_curves(&fpm, &crit, &u, &t_grid, cfg, &mut stream(self.cfg.seed, purpose::KERNEL_SAMPLE), chain.as_ref().map(|(t, s)| (t, s)))?;
        let rows: Vec<Vec<String>> = rep.points.iter().map(|p| cells([p.t, p.d, p.g, p.residual, p.z])).collect();
        out.csv("renewal.csv", &header(&["t", "D", "G", "residual", "z"], "", 0, &[]), &rows)?;
        out.json("renewal.json", &rep)?;
        let max_z = rep.points.iter().map(|p| p.z.abs()).fold(0.0, f64::max);
        Ok(format!("renewal: {} levels, min G = {:.3e}, max |z| = {max_z:.2}", t_grid.len(), rep.g_min))
    }

    fn slowvar(&self, out: &mut Outputs) -> Result<String> {
        let (crit, eig) = self.critical()?;
        let fpm = self.fixed_point(&crit, &eig)?;
        let u0 = default_u0(&eig)?;
        let dirs = match &self.s.u {
            Some(u) => vec![parse_direction(u, self.d())?],
            None => sphere_grid(self.d(), self.s.resolution.unwrap_or(2))?,
        };
        let s_grid = parse_grid(self.s.s.as_deref().unwrap_or("-1,1"))?;
        let t_grid = parse_grid(self.s.t.as_deref().unwrap_or("4:7:1"))?;
        let rep = slowvar_diag(&fpm, &u0, &dirs, &s_grid, &t_grid);
        #[derive(Serialize)]
        struct Record<'a> {
            #[serde(rename = "Kprime")]
            kprime: f64,
            kprime_se: f64,
            band: (f64, f64),
            h_table: &'a [crate::smoothing::HEntry],
            u0: &'a [f64],
            d_curve: &'a [(f64, f64)],
            flatness: f64,
            increasing: bool,
            growth: f64,
        }
        out.json(
            "slowvar.json",
            &Record { kprime: rep.kprime.slope, kprime_se: rep.kprime.slope_se, band: rep.band, h_table: &rep.h_table, u0: &rep.u0, d_curve: &rep.d_curve, flatness: rep.flatness, increasing: rep.increasing, growth: rep.growth },
        )?;
        Ok(format!("slowvar: K' = {:.4} band ({:.4}, {:.4}), D/t spread {:.3}", rep.kprime.slope, rep.band.0, rep.band.1, rep.flatness))
    }
}
