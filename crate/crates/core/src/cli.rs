//! Command-line runner.
//!
//! Every subcommand reads a flat key/value configuration (config file first,
//! flags override, then defaults), validates it, runs, and writes
//! `<out>.csv`, `<out>.json` and `<out>.manifest.json`. The manifest echoes
//! the resolved configuration; `replay --manifest` re-dispatches it.
//!
//! Exit codes: 0 success, 1 runtime error, 2 validation error.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use clap::{Arg, ArgAction, Command};
use nalgebra::DMatrix;
use serde_json::{json, Value};

use crate::error::Error;
use crate::estimates::{
    density_limit_check, fit_envelope, x_derivative, DerivOrder, EnvelopeLattice,
};
use crate::fields::{builtin, parse_polynomial_fields, BoxDomain, Coefficients, VectorFieldSet};
use crate::grid::{DensityGrid, TensorGrid};
use crate::hoermander::{condition_report, sample_points, weak_condition_probe, Mode, Sampling};
use crate::kernels::frozen_gaussian_from;
use crate::oracle::{euler_maruyama, kde_density, linear_kernel_for, moment_check, Bandwidth, SdeSpec};
use crate::parametrix::{Parametrix, QuadConfig};
use crate::splitting::{trotter_density, walk_study, TrotterScheme};

struct Key {
    name: &'static str,
    default: Option<&'static str>,
    help: &'static str,
}

const fn key(name: &'static str, default: Option<&'static str>, help: &'static str) -> Key {
    Key { name, default, help }
}

const COMMON: &[Key] = &[
    key("config", None, "flat key=value file; flags override it"),
    key("out", None, "output prefix (default: the subcommand name)"),
    key("model", Some("kolmogorov"), "built-in model name"),
    key("param", Some(""), "model parameter key=value (repeatable or comma separated)"),
    key("fields", None, "polynomial field file; replaces --model"),
    key("workers", None, "worker threads (also HYPOKERNEL_WORKERS)"),
];

const RANK: &[Key] = &[
    key("mode", Some("classical"), "classical | reduced"),
    key("cap", Some("3"), "maximal bracket depth"),
    key("tol", Some("1e-8"), "relative singular value threshold"),
    key("box", Some("-1:1"), "sampling box lo:hi[,lo:hi...]"),
    key("samples", Some("1000"), "number of probe points"),
    key("sampling", Some("halton"), "halton | uniform"),
    key("seed", Some("0"), "seed for uniform sampling"),
    key("grid", None, "evaluate on grid nodes instead of samples"),
];

const KERNEL: &[Key] = &[
    key("freeze-point", None, "point y where a is frozen (default: origin)"),
    key("t", None, "time"),
    key("grid", None, "grid spec lo:hi:n[,...]"),
];

const DENSITY: &[Key] = &[
    key("y", None, "start point (default: origin)"),
    key("t", None, "time"),
    key("order", Some("2"), "series order M"),
    key("grid", None, "grid spec"),
    key("panels", None, "time panels per half interval"),
    key("gauss", None, "Gauss points per panel"),
    key("nodes", None, "spatial quadrature nodes per axis (odd)"),
    key("width", None, "spatial quadrature half-width in standard units"),
];

const TROTTER: &[Key] = &[
    key("y", None, "start point (default: origin)"),
    key("t", None, "time"),
    key("m", Some("64"), "substeps"),
    key("grid", None, "grid spec"),
    key("frozen", None, "frozen coordinates, 1-based (default: nondegenerate diagonal at y)"),
];

const WALK: &[Key] = &[
    key("i", None, "field index i"),
    key("j", None, "field index j"),
    key("x", None, "base point (default: origin)"),
    key("deltas", Some("0.1,0.03,0.01,0.003"), "step sizes"),
    key("steps", Some("64"), "RK4 steps per leg"),
];

const MC: &[Key] = &[
    key("x", None, "start point (default: origin)"),
    key("t", None, "time"),
    key("steps", Some("200"), "Euler steps"),
    key("paths", Some("100000"), "number of paths"),
    key("seed", Some("0"), "RNG seed"),
    key("grid", None, "KDE grid spec"),
    key("bandwidth", Some("scott"), "scott or a fixed bandwidth"),
    key("write-samples", Some("false"), "also write <out>.samples.csv"),
];

const ENVELOPE: &[Key] = &[
    key("in", None, "comma separated density CSV files, one per time level"),
    key("order", None, "j;a1,..;b1,.. (or j,a,b in one dimension)"),
    key("y", None, "start point of the input grids (default: origin)"),
];

const APPROX: &[Key] = &[
    key("ladder", Some("2,4,8"), "mollification scales"),
    key("t", Some("0.25"), "time"),
    key("y", None, "start point (default: origin)"),
    key("m", Some("64"), "Trotter substeps"),
    key("grid", None, "density grid spec"),
    key("table", None, "coefficient table grid spec (default: --grid)"),
    key("compact", None, "comparison box (default: the grid box)"),
    key("frozen", None, "frozen coordinates, 1-based"),
];

const COMPARE: &[Key] = &[
    key("a", None, "density CSV"),
    key("b", None, "density CSV, or 'exact' for the linear-model kernel"),
    key("y", None, "start point for 'exact' (default: origin)"),
    key("tol-tv", None, "record a check tv <= value"),
];

const REPLAY: &[Key] = &[key("manifest", None, "manifest to re-run"), key("out", None, "override the output prefix")];

const COMMANDS: &[(&str, &str, &[Key])] = &[
    ("rank", "bracket rank recursion over sampled points", RANK),
    ("kernel", "frozen Gaussian on a grid", KERNEL),
    ("density", "parametrix density", DENSITY),
    ("trotter", "Trotter splitting density", TROTTER),
    ("walk", "square-walk bracket estimates", WALK),
    ("mc", "Euler-Maruyama samples and KDE", MC),
    ("envelope", "fit a Gaussian-type envelope to density files", ENVELOPE),
    ("approx", "mollification ladder Cauchy report", APPROX),
    ("compare", "sup and TV distances between two densities", COMPARE),
];

fn keys_for(cmd: &str) -> Vec<&'static Key> {
    COMMANDS
        .iter()
        .find(|c| c.0 == cmd)
        .map(|c| COMMON.iter().chain(c.2.iter()).collect())
        .unwrap_or_default()
}

/// Failure with its exit code.
#[derive(Debug)]
enum Fail {
    Invalid(String),
    Runtime(String),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Runtime(e.to_string())
    }
}

fn invalid(key: &str, msg: impl std::fmt::Display) -> Fail {
    Fail::Invalid(format!("--{key}: {msg}"))
}

fn cli() -> Command {
    let mut c = Command::new("hypokernel")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Densities and bracket diagnostics for degenerate diffusions")
        .subcommand_required(true);
    let arg = |k: &Key| {
        let mut help = k.help.to_string();
        if let Some(d) = k.default.filter(|d| !d.is_empty()) {
            help.push_str(&format!(" [default: {d}]"));
        }
        let a = Arg::new(k.name).long(k.name).value_name("VALUE").allow_hyphen_values(true).help(help);
        if k.name == "param" {
            a.action(ArgAction::Append)
        } else {
            a.action(ArgAction::Set)
        }
    };
    for (name, about, _) in COMMANDS {
        c = c.subcommand(Command::new(*name).about(*about).args(keys_for(name).into_iter().map(arg)));
    }
    c.subcommand(Command::new("replay").about("re-run a manifest").args(REPLAY.iter().map(arg)))
}

/// Flat `key = value` text; `#` starts a comment.
fn parse_config(text: &str) -> Result<BTreeMap<String, String>, Fail> {
    let mut m = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Fail::Invalid(format!("config line {}: expected key = value", i + 1)))?;
        m.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(m)
}

/// Run the CLI on `args` (including the program name); returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let matches = match cli().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let (cmd, sub) = matches.subcommand().expect("subcommand required");
    if cmd == "replay" {
        return replay(sub.get_one::<String>("manifest"), sub.get_one::<String>("out"));
    }
    let mut flags = BTreeMap::new();
    for k in keys_for(cmd) {
        if k.name == "param" {
            if let Some(v) = sub.get_many::<String>("param") {
                flags.insert("param".to_string(), v.cloned().collect::<Vec<_>>().join(","));
            }
        } else if let Some(v) = sub.get_one::<String>(k.name) {
            flags.insert(k.name.to_string(), v.clone());
        }
    }
    let mut cfg = BTreeMap::new();
    if let Some(path) = flags.remove("config") {
        match std::fs::read_to_string(&path).map_err(|e| invalid("config", e)).and_then(|t| parse_config(&t)) {
            Ok(m) => cfg = m,
            Err(f) => return report_failure(cmd, &flags, f, Instant::now()),
        }
    }
    cfg.extend(flags);
    dispatch(cmd, cfg)
}

fn replay(manifest: Option<&String>, out: Option<&String>) -> i32 {
    let Some(path) = manifest else {
        eprintln!("error: --manifest: required");
        return 2;
    };
    let parsed: Result<Value, String> = std::fs::read_to_string(path)
        .map_err(|e| e.to_string())
        .and_then(|t| serde_json::from_str(&t).map_err(|e| e.to_string()));
    let m = match parsed {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: --manifest: {e}");
            return 2;
        }
    };
    let cmd = m["command"].as_str().unwrap_or("");
    let Some(obj) = m["config"].as_object() else {
        eprintln!("error: --manifest: no config echo");
        return 2;
    };
    let mut cfg: BTreeMap<String, String> =
        obj.iter().map(|(k, v)| (k.clone(), v.as_str().unwrap_or_default().to_string())).collect();
    if let Some(o) = out {
        cfg.insert("out".into(), o.clone());
    }
    dispatch(cmd, cfg)
}

/// Resolved configuration with typed accessors. Errors name the key.
struct Cfg {
    map: BTreeMap<String, String>,
}

impl Cfg {
    fn resolve(cmd: &str, given: BTreeMap<String, String>) -> Result<Cfg, Fail> {
        let keys = keys_for(cmd);
        if keys.is_empty() {
            return Err(Fail::Invalid(format!("unknown subcommand '{cmd}'")));
        }
        let mut map = BTreeMap::new();
        for (k, v) in given {
            if k == "config" || !keys.iter().any(|s| s.name == k) {
                return Err(Fail::Invalid(format!("unknown key '{k}' for {cmd}")));
            }
            map.insert(k, v);
        }
        for k in &keys {
            if let (false, Some(d)) = (map.contains_key(k.name), k.default) {
                map.insert(k.name.to_string(), d.to_string());
            }
        }
        map.entry("out".into()).or_insert_with(|| cmd.to_string());
        Ok(Cfg { map })
    }

    fn get(&self, k: &str) -> Option<&str> {
        self.map.get(k).map(String::as_str)
    }

    fn req(&self, k: &str) -> Result<&str, Fail> {
        self.get(k).ok_or_else(|| invalid(k, "required"))
    }

    fn parse<T: std::str::FromStr>(&self, k: &str) -> Result<T, Fail>
    where
        T::Err: std::fmt::Display,
    {
        self.req(k)?.trim().parse::<T>().map_err(|e| invalid(k, e))
    }

    fn pos_f64(&self, k: &str) -> Result<f64, Fail> {
        let v: f64 = self.parse(k)?;
        if !(v > 0.0 && v.is_finite()) {
            return Err(invalid(k, "must be positive and finite"));
        }
        Ok(v)
    }

    fn pos_usize(&self, k: &str) -> Result<usize, Fail> {
        let v: usize = self.parse(k)?;
        if v == 0 {
            return Err(invalid(k, "must be at least 1"));
        }
        Ok(v)
    }

    fn list<T: std::str::FromStr>(&self, k: &str) -> Result<Vec<T>, Fail>
    where
        T::Err: std::fmt::Display,
    {
        self.req(k)?.split(',').map(|s| s.trim().parse::<T>().map_err(|e| invalid(k, e))).collect()
    }

    /// Point of dimension n; zeros when absent.
    fn point(&self, k: &str, n: usize) -> Result<Vec<f64>, Fail> {
        if self.get(k).is_none() {
            return Ok(vec![0.0; n]);
        }
        let v: Vec<f64> = self.list(k)?;
        if v.len() != n || v.iter().any(|c| !c.is_finite()) {
            return Err(invalid(k, format!("expected {n} finite coordinates")));
        }
        Ok(v)
    }

    fn grid(&self, k: &str, n: usize) -> Result<TensorGrid, Fail> {
        let g = TensorGrid::parse(self.req(k)?).map_err(|e| invalid(k, e))?;
        if g.dim() != n {
            return Err(invalid(k, format!("grid has dimension {}, model has {n}", g.dim())));
        }
        Ok(g)
    }

    fn boxed(&self, k: &str, n: usize) -> Result<BoxDomain, Fail> {
        let parts: Vec<&str> = self.req(k)?.split(',').collect();
        if parts.len() != 1 && parts.len() != n {
            return Err(invalid(k, format!("expected 1 or {n} intervals")));
        }
        let mut lo = Vec::new();
        let mut hi = Vec::new();
        for d in 0..n {
            let p = parts[if parts.len() == 1 { 0 } else { d }];
            let (a, b) = p.split_once(':').ok_or_else(|| invalid(k, "intervals are lo:hi"))?;
            let a: f64 = a.trim().parse().map_err(|e| invalid(k, e))?;
            let b: f64 = b.trim().parse().map_err(|e| invalid(k, e))?;
            if !(a < b) || !a.is_finite() || !b.is_finite() {
                return Err(invalid(k, "need finite lo < hi"));
            }
            lo.push(a);
            hi.push(b);
        }
        Ok(BoxDomain { lo, hi })
    }

    /// 1-based coordinate list to 0-based.
    fn coords(&self, k: &str, n: usize) -> Result<Vec<usize>, Fail> {
        let v: Vec<usize> = self.list(k)?;
        if v.iter().any(|&i| i == 0 || i > n) {
            return Err(invalid(k, format!("coordinates are 1..={n}")));
        }
        Ok(v.into_iter().map(|i| i - 1).collect())
    }

    fn fields(&self) -> Result<(String, Arc<VectorFieldSet>), Fail> {
        if let Some(path) = self.get("fields") {
            let text = std::fs::read_to_string(path).map_err(|e| invalid("fields", e))?;
            let f = parse_polynomial_fields(&text).map_err(|e| invalid("fields", e))?;
            return Ok(("custom".into(), Arc::new(f)));
        }
        let name = self.req("model")?;
        let mut params = BTreeMap::new();
        for kv in self.req("param")?.split(',').filter(|s| !s.trim().is_empty()) {
            let (k, v) = kv.split_once('=').ok_or_else(|| invalid("param", "expected key=value"))?;
            let v: f64 = v.trim().parse().map_err(|e| invalid("param", e))?;
            params.insert(k.trim().to_string(), v);
        }
        let m = builtin(name, &params).map_err(|e| invalid("model", e))?;
        Ok((name.to_string(), Arc::new(m.fields)))
    }
}

/// What a run produced.
#[derive(Default)]
struct Outcome {
    /// (file suffix, contents)
    files: Vec<(String, String)>,
    summary: Value,
    checks: BTreeMap<String, bool>,
}

fn dispatch(cmd: &str, given: BTreeMap<String, String>) -> i32 {
    let start = Instant::now();
    let cfg = match Cfg::resolve(cmd, given.clone()) {
        Ok(c) => c,
        Err(f) => return report_failure(cmd, &given, f, start),
    };
    if let Err(f) = setup_workers(&cfg) {
        return report_failure(cmd, &cfg.map, f, start);
    }
    let res = match cmd {
        "rank" => cmd_rank(&cfg),
        "kernel" => cmd_kernel(&cfg),
        "density" => cmd_density(&cfg),
        "trotter" => cmd_trotter(&cfg),
        "walk" => cmd_walk(&cfg),
        "mc" => cmd_mc(&cfg),
        "envelope" => cmd_envelope(&cfg),
        "approx" => cmd_approx(&cfg),
        "compare" => cmd_compare(&cfg),
        _ => Err(Fail::Invalid(format!("unknown subcommand '{cmd}'"))),
    };
    match res {
        Ok(out) => finish(cmd, &cfg.map, Ok(out), start),
        Err(f) => report_failure(cmd, &cfg.map, f, start),
    }
}

fn setup_workers(cfg: &Cfg) -> Result<(), Fail> {
    let n = match cfg.get("workers") {
        Some(_) => Some(cfg.pos_usize("workers")?),
        None => match std::env::var("HYPOKERNEL_WORKERS") {
            Ok(v) => Some(v.trim().parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| {
                Fail::Invalid("HYPOKERNEL_WORKERS must be a positive integer".into())
            })?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        // the global pool can only be configured once per process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn report_failure(cmd: &str, cfg: &BTreeMap<String, String>, f: Fail, start: Instant) -> i32 {
    finish(cmd, cfg, Err(f), start)
}

fn finish(cmd: &str, cfg: &BTreeMap<String, String>, res: Result<Outcome, Fail>, start: Instant) -> i32 {
    let prefix = cfg.get("out").cloned().unwrap_or_else(|| cmd.to_string());
    let (status, error, code, out) = match res {
        Ok(o) => ("ok", Value::Null, 0, o),
        Err(Fail::Invalid(m)) => ("invalid", json!(m), 2, Outcome::default()),
        Err(Fail::Runtime(m)) => ("error", json!(m), 1, Outcome::default()),
    };
    if let Value::String(m) = &error {
        eprintln!("error: {m}");
    }
    let mut written = Vec::new();
    let mut write = |suffix: &str, body: &str| -> std::io::Result<()> {
        let path = format!("{prefix}{suffix}");
        std::fs::write(&path, body)?;
        written.push(path);
        Ok(())
    };
    let mut io_err = None;
    for (suffix, body) in &out.files {
        if let Err(e) = write(suffix, body) {
            io_err = Some(e);
        }
    }
    if code == 0 {
        if let Err(e) = write(".json", &serde_json::to_string_pretty(&out.summary).unwrap_or_default()) {
            io_err = Some(e);
        }
    }
    let manifest = json!({
        "command": cmd,
        "config": cfg,
        "version": env!("CARGO_PKG_VERSION"),
        "wall_time": start.elapsed().as_secs_f64(),
        "status": if io_err.is_some() { "error" } else { status },
        "error": io_err.as_ref().map(|e| json!(e.to_string())).unwrap_or(error),
        "diagnostics": out.summary,
        "checks": out.checks,
        "outputs": written,
    });
    let mpath = format!("{prefix}.manifest.json");
    if let Err(e) = std::fs::write(&mpath, serde_json::to_string_pretty(&manifest).unwrap_or_default()) {
        eprintln!("error: cannot write {mpath}: {e}");
        return if code == 0 { 1 } else { code };
    }
    match io_err {
        Some(e) => {
            eprintln!("error: {e}");
            1
        }
        None => code,
    }
}

fn density_json(g: &DensityGrid) -> Value {
    json!({
        "method": g.method.tag(),
        "model": g.model,
        "y": g.y,
        "t": g.t,
        "grid": g.grid.spec(),
        "mass": g.mass(),
        "peak": g.peak(),
        "min_value": g.min(),
        "meta": g.meta,
    })
}

fn cmd_rank(cfg: &Cfg) -> Result<Outcome, Fail> {
    let (_, f) = cfg.fields()?;
    let n = f.dim();
    let mode: Mode = cfg.parse("mode")?;
    let cap: usize = cfg.parse("cap")?;
    let tol = cfg.pos_f64("tol")?;
    let r = if cfg.get("grid").is_some() {
        let g = cfg.grid("grid", n)?;
        condition_report(&f, g.points(), mode, cap, tol)?
    } else {
        let domain = cfg.boxed("box", n)?;
        let samples = cfg.pos_usize("samples")?;
        let sampling = match cfg.req("sampling")? {
            "halton" => Sampling::Halton,
            "uniform" => Sampling::Uniform { seed: cfg.parse("seed")? },
            s => return Err(invalid("sampling", format!("unknown rule '{s}'"))),
        };
        sample_points(&domain, 1, sampling).map_err(|e| invalid("box", e))?;
        weak_condition_probe(&f, &domain, samples, sampling, mode, cap, tol)?
    };
    let summary = json!({"mode": r.mode, "cap": r.cap, "tol": r.tol, "points": r.points.len(),
                         "skipped": r.skipped, "fraction": r.fraction, "histogram": r.histogram});
    let mut csv = String::new();
    for d in 0..n {
        let _ = write!(csv, "x{},", d + 1);
    }
    csv.push_str("depth,rank\n");
    for ((p, d), rank) in r.points.iter().zip(&r.depths).zip(&r.ranks) {
        for v in p {
            let _ = write!(csv, "{v},");
        }
        // -1: full rank not reached within the cap (or point skipped)
        let _ = writeln!(csv, "{},{rank}", d.map_or(-1, |d| d as i64));
    }
    let mut checks = BTreeMap::new();
    checks.insert("full_rank_everywhere".into(), r.depths.iter().all(|d| d.is_some()));
    Ok(Outcome { files: vec![(".csv".into(), csv)], summary, checks })
}

fn cmd_kernel(cfg: &Cfg) -> Result<Outcome, Fail> {
    let (name, f) = cfg.fields()?;
    let n = f.dim();
    let y = cfg.point("freeze-point", n)?;
    let t = cfg.pos_f64("t")?;
    let grid = cfg.grid("grid", n)?;
    let mut a = vec![0.0; n * n];
    f.diffusion(&y, &mut a);
    let fg = frozen_gaussian_from(&DMatrix::from_row_slice(n, n, &a), &y)?;
    let mut g = fg.on_grid(t, 0.0, &grid, &name)?;
    g.y = y;
    let summary = json!({"density": density_json(&g), "det": fg.det(), "degenerate": fg.is_degenerate(),
                         "radius": fg.radius(t, 0.0)});
    let mut checks = BTreeMap::new();
    checks.insert("mass_within_1e-6".into(), (g.mass() - 1.0).abs() <= 1e-6);
    Ok(Outcome { files: vec![(".csv".into(), g.to_csv())], summary, checks })
}

fn cmd_density(cfg: &Cfg) -> Result<Outcome, Fail> {
    let (name, f) = cfg.fields()?;
    let n = f.dim();
    let y = cfg.point("y", n)?;
    let t = cfg.pos_f64("t")?;
    let order: usize = cfg.parse("order")?;
    let grid = cfg.grid("grid", n)?;
    let mut q = QuadConfig::for_dim(n);
    if cfg.get("panels").is_some() {
        q.panels = cfg.pos_usize("panels")?;
    }
    if cfg.get("gauss").is_some() {
        q.gauss = cfg.pos_usize("gauss")?;
    }
    if cfg.get("nodes").is_some() {
        q.nodes = cfg.pos_usize("nodes")?;
        if q.nodes < 3 || q.nodes % 2 == 0 {
            return Err(invalid("nodes", "must be odd and at least 3"));
        }
    }
    if cfg.get("width").is_some() {
        q.width = cfg.pos_f64("width")?;
    }
    let coeffs: Arc<dyn Coefficients> = f.clone();
    let p = Parametrix::new(coeffs, &y, 0.0)?.with_config(q)?;
    let (values, report) = p.density_at(t, order, &grid.points())?;
    let mut g = DensityGrid::new(crate::grid::Method::Parametrix { order }, &name, &y, t, grid, values);
    g.meta.insert("term_norms".into(), json!(report.term_norms));
    g.meta.insert("quadrature".into(), serde_json::to_value(&report.quadrature).unwrap_or_default());
    // residual probe at y + c sqrt(2 a_ii(y) t) e_i, c in {-1, -1/2, 0, 1/2, 1}
    let mut a = vec![0.0; n * n];
    f.diffusion(&y, &mut a);
    let mut probes: Vec<Vec<f64>> = vec![y.clone()];
    for d in 0..n {
        let s = (2.0 * a[d * n + d].max(0.0) * t).sqrt();
        for c in [-1.0, -0.5, 0.5, 1.0] {
            let mut z = y.clone();
            z[d] += c * s;
            probes.push(z);
        }
    }
    let (h, ht) = (1e-2, (t / 8.0).min(1e-3));
    let residual = p.residual_norm(t, order, &probes, h, ht)?;
    let summary = json!({"density": density_json(&g), "term_norms": report.term_norms,
                         "residual_norm": residual, "residual_steps": {"h": h, "ht": ht}});
    let mut checks = BTreeMap::new();
    checks.insert("finite".into(), g.values.iter().all(|v| v.is_finite()));
    Ok(Outcome { files: vec![(".csv".into(), g.to_csv())], summary, checks })
}

/// Coordinates with a nondegenerate diagonal entry at y.
fn default_frozen(f: &dyn Coefficients, y: &[f64]) -> Vec<usize> {
    let n = f.dim();
    let mut a = vec![0.0; n * n];
    f.diffusion(y, &mut a);
    let amax = (0..n).map(|i| a[i * n + i]).fold(0.0, f64::max);
    (0..n).filter(|&i| a[i * n + i] > crate::kernels::EPS_LAMBDA * amax).collect()
}

fn frozen_set(cfg: &Cfg, f: &dyn Coefficients, y: &[f64]) -> Result<Vec<usize>, Fail> {
    if cfg.get("frozen").is_some() {
        cfg.coords("frozen", f.dim())
    } else {
        Ok(default_frozen(f, y))
    }
}

fn cmd_trotter(cfg: &Cfg) -> Result<Outcome, Fail> {
    let (name, f) = cfg.fields()?;
    let n = f.dim();
    let y = cfg.point("y", n)?;
    let t = cfg.pos_f64("t")?;
    let m = cfg.pos_usize("m")?;
    let grid = cfg.grid("grid", n)?;
    let frozen = frozen_set(cfg, f.as_ref(), &y)?;
    let s = TrotterScheme::new(f, &y, &frozen, grid)?.with_substeps(m)?;
    let g = trotter_density(&s, &name, t)?;
    let summary = json!({"density": density_json(&g), "witnesses": s.leading.witnesses});
    let mut checks = BTreeMap::new();
    checks.insert("no_box_exits".into(), g.meta.get("exits") == Some(&json!(0)));
    Ok(Outcome { files: vec![(".csv".into(), g.to_csv())], summary, checks })
}

fn cmd_walk(cfg: &Cfg) -> Result<Outcome, Fail> {
    let (_, f) = cfg.fields()?;
    let n = f.dim();
    let i: usize = cfg.parse("i")?;
    let j: usize = cfg.parse("j")?;
    for (k, v) in [("i", i), ("j", j)] {
        if v >= f.count() {
            return Err(invalid(k, format!("model has fields 0..{}", f.count())));
        }
    }
    let x = cfg.point("x", n)?;
    let deltas: Vec<f64> = cfg.list("deltas")?;
    if deltas.iter().any(|d| !(*d > 0.0)) {
        return Err(invalid("deltas", "must be positive"));
    }
    let steps = cfg.pos_usize("steps")?;
    let st = walk_study(&f, i, j, &x, &deltas, steps)?;
    let mut csv = String::from("delta");
    for d in 1..=n {
        let _ = write!(csv, ",estimate{d}");
    }
    for d in 1..=n {
        let _ = write!(csv, ",bracket{d}");
    }
    csv.push_str(",error\n");
    for r in &st.rows {
        let _ = write!(csv, "{}", r.delta);
        for v in r.estimate.iter().chain(&r.bracket) {
            let _ = write!(csv, ",{v}");
        }
        let _ = writeln!(csv, ",{}", r.error);
    }
    let mut checks = BTreeMap::new();
    if let Some(s) = st.slope {
        checks.insert("slope_in_0.8_1.5".into(), (0.8..=1.5).contains(&s));
    }
    let summary = json!({"i": i, "j": j, "x": x, "slope": st.slope, "rows": st.rows});
    Ok(Outcome { files: vec![(".csv".into(), csv)], summary, checks })
}

fn cmd_mc(cfg: &Cfg) -> Result<Outcome, Fail> {
    let (name, f) = cfg.fields()?;
    let n = f.dim();
    let x = cfg.point("x", n)?;
    let t = cfg.pos_f64("t")?;
    let steps = cfg.pos_usize("steps")?;
    let paths = cfg.pos_usize("paths")?;
    let seed: u64 = cfg.parse("seed")?;
    let grid = cfg.grid("grid", n)?;
    let bw = match cfg.req("bandwidth")? {
        "scott" => Bandwidth::Scott,
        _ => Bandwidth::Fixed(cfg.pos_f64("bandwidth")?),
    };
    let write_samples: bool = cfg.parse("write-samples")?;
    let samples = euler_maruyama(&SdeSpec { fields: f.clone(), x: x.clone(), t, steps, paths, seed })?;
    let mut g = kde_density(&samples, &grid, bw, &name, &x, t)?;
    g.method = crate::grid::Method::MonteCarlo { paths, steps, seed };
    let mut checks = BTreeMap::new();
    // moments against the exact kernel when the model is linear
    let moments = match linear_kernel_for(f.as_ref(), &x, t) {
        Ok(k) => {
            let rows = moment_check(&samples, &k);
            checks.insert("moments_within_3se".into(), rows.iter().all(|r| r.z.abs() <= 3.0));
            json!(rows)
        }
        Err(_) => Value::Null,
    };
    let summary = json!({"density": density_json(&g), "paths": samples.len(), "excluded": samples.excluded,
                         "mean": samples.mean(), "covariance": samples.covariance(), "moments": moments});
    let mut files = vec![(".csv".to_string(), g.to_csv())];
    if write_samples {
        files.push((".samples.csv".into(), samples.to_csv()));
    }
    Ok(Outcome { files, summary, checks })
}

fn read_density(key: &str, path: &str) -> Result<DensityGrid, Fail> {
    let text = std::fs::read_to_string(path).map_err(|e| invalid(key, format!("{path}: {e}")))?;
    DensityGrid::from_csv(&text).map_err(|e| invalid(key, format!("{path}: {e}")))
}

fn cmd_envelope(cfg: &Cfg) -> Result<Outcome, Fail> {
    let paths: Vec<String> = cfg.list("in")?;
    let mut fam = paths.iter().map(|p| read_density("in", p)).collect::<Result<Vec<_>, _>>()?;
    if fam.len() < 2 {
        return Err(invalid("in", "need at least two time levels"));
    }
    let n = fam[0].grid.dim();
    let order = DerivOrder::parse(cfg.req("order")?, n).map_err(|e| invalid("order", e))?;
    let y = cfg.point("y", n)?;
    // the files hold d_t^j d_y^beta p; the x-derivative is taken here
    if order.alpha.iter().any(|&a| a > 0) {
        fam = fam.iter().map(|g| x_derivative(g, &order.alpha)).collect::<crate::Result<_>>()?;
    }
    for g in &mut fam {
        g.y = y.clone();
    }
    let fit = fit_envelope(&fam, &order, &EnvelopeLattice::default())?;
    let mut csv = String::from("t,a,b\n");
    for l in &fit.levels {
        let _ = writeln!(csv, "{},{},{}", l.t, l.a, l.b);
    }
    let mut checks = BTreeMap::new();
    checks.insert("envelope_passes".into(), fit.passes());
    checks.insert("a_nondecreasing".into(), fit.a_nondecreasing);
    let summary = serde_json::to_value(&fit).unwrap_or_default();
    Ok(Outcome { files: vec![(".csv".into(), csv)], summary, checks })
}

fn cmd_approx(cfg: &Cfg) -> Result<Outcome, Fail> {
    let (name, f) = cfg.fields()?;
    let n = f.dim();
    let ladder: Vec<usize> = cfg.list("ladder")?;
    if ladder.len() < 2 || !ladder.windows(2).all(|w| w[0] < w[1]) || ladder[0] == 0 {
        return Err(invalid("ladder", "need at least two increasing positive scales"));
    }
    let t = cfg.pos_f64("t")?;
    let y = cfg.point("y", n)?;
    let m = cfg.pos_usize("m")?;
    let grid = cfg.grid("grid", n)?;
    let table = if cfg.get("table").is_some() { cfg.grid("table", n)? } else { grid.clone() };
    let compact = if cfg.get("compact").is_some() {
        cfg.boxed("compact", n)?
    } else {
        BoxDomain { lo: grid.axes.iter().map(|a| a.lo).collect(), hi: grid.axes.iter().map(|a| a.hi).collect() }
    };
    let frozen = frozen_set(cfg, f.as_ref(), &y)?;
    let base: Arc<dyn Coefficients> = f;
    let rep = density_limit_check(base, &ladder, &compact, &table, |c| {
        let s = TrotterScheme::new(c, &y, &frozen, grid.clone())?.with_substeps(m)?;
        trotter_density(&s, &name, t)
    })?;
    let mut csv = String::from("scale,coefficient_error,lipschitz,mass,cross_residual,difference\n");
    for k in 0..rep.scales.len() {
        // difference to the previous ladder member; empty for the first
        let d = if k == 0 { String::new() } else { rep.differences[k - 1].to_string() };
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            rep.scales[k], rep.coefficient_errors[k], rep.lipschitz[k], rep.masses[k], rep.cross_residuals[k], d
        );
    }
    let mut checks = BTreeMap::new();
    checks.insert("coefficients_converge".into(), rep.coefficients_converge);
    checks.insert("lipschitz_preserved".into(), rep.lipschitz_preserved);
    checks.insert("cauchy".into(), rep.cauchy);
    checks.insert("cross_decreasing".into(), rep.cross_decreasing);
    let summary = serde_json::to_value(&rep).unwrap_or_default();
    Ok(Outcome { files: vec![(".csv".into(), csv)], summary, checks })
}

fn cmd_compare(cfg: &Cfg) -> Result<Outcome, Fail> {
    let a = read_density("a", cfg.req("a")?)?;
    let n = a.grid.dim();
    let b = if cfg.req("b")? == "exact" {
        let (name, f) = cfg.fields()?;
        if f.dim() != n {
            return Err(invalid("b", format!("model has dimension {}, grid has {n}", f.dim())));
        }
        let y = cfg.point("y", n)?;
        let k = linear_kernel_for(f.as_ref(), &y, a.t).map_err(|e| invalid("b", e))?;
        k.on_grid(&a.grid, &name, &y)?
    } else {
        read_density("b", cfg.req("b")?)?
    };
    if a.grid != b.grid {
        return Err(invalid("b", "grids are not aligned"));
    }
    let tol = match cfg.get("tol-tv") {
        Some(_) => Some(cfg.pos_f64("tol-tv")?),
        None => None,
    };
    let sup = a.sup_distance(&b)?;
    let tv = a.tv_distance(&b)?;
    let diff: Vec<f64> = a.values.iter().zip(&b.values).map(|(p, q)| p - q).collect();
    let d = DensityGrid::new(crate::grid::Method::External, "difference", &[], a.t, a.grid.clone(), diff);
    let mut checks = BTreeMap::new();
    if let Some(tol) = tol {
        checks.insert("tv_within_tolerance".into(), tv <= tol);
    }
    let summary = json!({"sup": sup, "tv": tv, "mass_a": a.mass(), "mass_b": b.mass(), "t": a.t,
                         "grid": a.grid.spec()});
    Ok(Outcome { files: vec![(".csv".into(), d.to_csv())], summary, checks })
}
