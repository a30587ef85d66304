//! Experiment harness: a versioned JSON config plus a subcommand dispatches
//! into the library and emits deterministic CSV/JSON tables with a
//! provenance block. Exit codes: 0 success, 2 config error, 3 unsupported
//! pairing, 4 numeric failure.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::conditions;
use crate::enumeration::{kesten_exact_recursive, kesten_exact_reweight, tv_marked};
use crate::error::{Error, Result};
use crate::forward::{self, TerminalStatus};
use crate::model::{gallery, Model, PerronTriple};
use crate::report::ResultTable;
use crate::rng::{kind, stream};
use crate::spectral::{recurrence_diagnostic, TruncationScheme};
use crate::spine::{sample_spine, tilde_w_trajectory};
use crate::types::{CountsVec, KahanSum};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Parser, Debug)]
#[command(name = "gwlab", version, about = "Galton-Watson simulation laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Perron data and recurrence diagnostics over a truncation scheme.
    Spectral(RunArgs),
    /// Forward population simulation with the additive martingale.
    Forward(RunArgs),
    /// Spine sampling and the size-biased martingale trajectory.
    Spine(RunArgs),
    /// Exact two-construction check of the marked-forest change of measure.
    KestenCheck(RunArgs),
    /// All moment conditions as partial-sum/MC reports.
    Conditions(RunArgs),
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// JSON experiment config.
    #[arg(long)]
    pub config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (default from config, then "gwlab-out").
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub replicas: Option<u64>,
    #[arg(long)]
    pub horizon: Option<u32>,
    /// Truncation prefix; also the ceiling of the default scheme.
    #[arg(long)]
    pub truncation: Option<usize>,
}

#[derive(Deserialize, Debug, Clone)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    #[serde(default = "empty_params")]
    pub params: Value,
}

fn empty_params() -> Value {
    json!({})
}

#[derive(Deserialize, Debug, Clone)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub model: ModelSpec,
    pub seed: u64,
    #[serde(default)]
    pub replicas: Option<u64>,
    #[serde(default)]
    pub horizon: Option<u32>,
    #[serde(default)]
    pub truncation: Option<usize>,
    /// Explicit truncation scheme; overrides the geometric default.
    #[serde(default)]
    pub scheme: Option<Vec<usize>>,
    /// Excursion cap for the return-functional condition.
    #[serde(default)]
    pub cap: Option<u32>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl Cmd {
    pub fn kind(&self) -> &'static str {
        match self {
            Cmd::Spectral(_) => "spectral",
            Cmd::Forward(_) => "forward",
            Cmd::Spine(_) => "spine",
            Cmd::KestenCheck(_) => "kesten-check",
            Cmd::Conditions(_) => "conditions",
        }
    }

    pub fn args(&self) -> &RunArgs {
        match self {
            Cmd::Spectral(a)
            | Cmd::Forward(a)
            | Cmd::Spine(a)
            | Cmd::KestenCheck(a)
            | Cmd::Conditions(a) => a,
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::UnknownType(_) => 2,
        Error::Unsupported(_) | Error::Budget { .. } | Error::EmptyWatchSet => 3,
        Error::Numeric { .. }
        | Error::Overflow { .. }
        | Error::UncertifiedTail(_)
        | Error::MeanMismatch { .. } => 4,
        Error::Structure(_) | Error::Io(_) => 1,
    }
}

/// Cap the worker pool from GWLAB_THREADS; first call wins.
pub fn init_threads() {
    if let Ok(v) = std::env::var("GWLAB_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build_global();
        }
    }
}

pub fn load_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", args.config.display())))?;
    let mut cfg: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
    if cfg.version != CONFIG_VERSION {
        return Err(Error::Config(format!(
            "config version {} != supported {CONFIG_VERSION}",
            cfg.version
        )));
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(r) = args.replicas {
        cfg.replicas = Some(r);
    }
    if let Some(h) = args.horizon {
        cfg.horizon = Some(h);
    }
    if let Some(t) = args.truncation {
        cfg.truncation = Some(t);
    }
    if let Some(o) = &args.out {
        cfg.out = Some(o.clone());
    }
    Ok(cfg)
}

fn triple_of(model: &Model) -> Result<PerronTriple> {
    if let Some(t) = &model.analytic {
        return Ok(t.clone());
    }
    match model.n_types() {
        Some(n) => crate::spectral::perron_truncated(model, n, 1e-12),
        None => Err(Error::Unsupported(
            "infinite model without closed-form Perron data".into(),
        )),
    }
}

/// Requested or default-geometric scheme, clipped to the type count.
fn resolve_scheme(cfg: &ExperimentConfig, model: &Model) -> Result<TruncationScheme> {
    let mut sizes = match &cfg.scheme {
        Some(s) => s.clone(),
        None => {
            let max = cfg.truncation.unwrap_or(160).max(10);
            TruncationScheme::geometric(10.min(max), 2.0, max)?.sizes
        }
    };
    if let Some(n) = model.n_types() {
        for s in &mut sizes {
            *s = (*s).min(n);
        }
        sizes.dedup();
    }
    TruncationScheme::new(sizes)
}

/// Finite-support stand-in for simulation: infinite type spaces get truncated
/// to the configured prefix.
fn sim_model(cfg: &ExperimentConfig, model: &Model) -> Result<Model> {
    if model.n_types().is_some() {
        return Ok(model.clone());
    }
    model.truncated(cfg.truncation.unwrap_or(200))
}

/// Resolved config snapshot recorded in the provenance block.
fn resolved_config(kind: &str, cfg: &ExperimentConfig) -> Value {
    json!({
        "version": cfg.version,
        "kind": kind,
        "model": {"name": cfg.model.name, "params": cfg.model.params},
        "seed": cfg.seed,
        "replicas": cfg.replicas,
        "horizon": cfg.horizon,
        "truncation": cfg.truncation,
        "scheme": cfg.scheme,
        "cap": cfg.cap,
    })
}

pub fn run_experiment(kind_name: &str, cfg: &ExperimentConfig) -> Result<ResultTable> {
    let model = gallery(&cfg.model.name, &cfg.model.params)?;
    let mut table = ResultTable::new(resolved_config(kind_name, cfg));
    match kind_name {
        "spectral" => {
            let scheme = resolve_scheme(cfg, &model)?;
            let rep = recurrence_diagnostic(&model, &scheme)?;
            for (&size, &rho) in rep.sizes.iter().zip(&rep.rho) {
                table.push_exact("spectral", "rho", Some(size as u64), rho);
            }
            for (&size, &hh) in rep.sizes.iter().zip(&rep.hh_partial) {
                table.push_exact("spectral", "hh_partial", Some(size as u64), hh);
            }
            table.push_exact("spectral", "right_residual", None, rep.right_residual);
            table.push_exact("spectral", "left_residual", None, rep.left_residual);
            table.details = Some(serde_json::to_value(&rep).expect("report serializes"));
        }
        "forward" => {
            let m = sim_model(cfg, &model)?;
            let t = triple_of(&m)?;
            let horizon = cfg.horizon.unwrap_or(10);
            let replicas = cfg.replicas.unwrap_or(1000);
            let trajs =
                forward::run_replicas(&m, &t, &CountsVec::unit(0), horizon, replicas, cfg.seed)?;
            for n in 0..=horizon as usize {
                let (mean, se) = forward::mean_w(&trajs, n)?;
                if se == 0.0 {
                    table.push_exact("forward", "mean_w", Some(n as u64), mean);
                } else {
                    table.push_ci("forward", "mean_w", Some(n as u64), mean, 1.96 * se);
                }
            }
            let surviving = trajs
                .iter()
                .filter(|t| t.status == TerminalStatus::HorizonReached)
                .count();
            table.push_exact(
                "forward",
                "survival",
                Some(horizon as u64),
                surviving as f64 / trajs.len() as f64,
            );
        }
        "spine" => {
            let m = sim_model(cfg, &model)?;
            let t = triple_of(&m)?;
            let horizon = cfg.horizon.unwrap_or(10);
            let replicas = cfg.replicas.unwrap_or(2000) as usize;
            let mut per_gen: Vec<(KahanSum, KahanSum)> =
                (0..=horizon as usize).map(|_| Default::default()).collect();
            for r in 0..replicas {
                let mut rng = stream(cfg.seed, &[kind::SPINE, r as u64]);
                let spine = sample_spine(&m, &t, 0, horizon, &mut rng)?;
                let tw = tilde_w_trajectory(&spine, &m, &t, horizon, &mut rng)?;
                for (g, &v) in tw.iter().enumerate() {
                    per_gen[g].0.add(v);
                    per_gen[g].1.add(v * v);
                }
            }
            for (g, (s, s2)) in per_gen.iter().enumerate() {
                let r = replicas as f64;
                let mean = s.value() / r;
                let var = (s2.value() / r - mean * mean).max(0.0);
                let se = (var / r).sqrt();
                if se == 0.0 {
                    table.push_exact("spine", "mean_tilde_w", Some(g as u64), mean);
                } else {
                    table.push_ci("spine", "mean_tilde_w", Some(g as u64), mean, 1.96 * se);
                }
            }
        }
        "kesten-check" => {
            let t = triple_of(&model)?;
            let n = cfg.horizon.unwrap_or(2);
            let z0 = CountsVec::unit(0);
            let a = kesten_exact_reweight(&model, &t, &z0, n, None)?;
            let b = kesten_exact_recursive(&model, &t, &z0, n, None)?;
            let tv = tv_marked(&a, &b);
            table.push_exact("kesten-check", "tv_reweight_vs_recursive", Some(n as u64), tv);
            table.push_exact("kesten-check", "atoms_reweight", Some(n as u64), a.len() as f64);
            table.push_exact("kesten-check", "atoms_recursive", Some(n as u64), b.len() as f64);
        }
        "conditions" => {
            let t = triple_of(&model)?;
            let scheme = resolve_scheme(cfg, &model)?;
            let replicas = cfg.replicas.unwrap_or(4000) as usize;
            let cap = cfg.cap.unwrap_or(conditions::DEFAULT_RETURN_CAP);
            let reports = vec![
                conditions::cond_simple(&model, &t, &scheme, cfg.seed)?,
                conditions::cond_sharp(&model, &t, 0, replicas, cap, cfg.seed)?,
                conditions::cond_variance(&model, &t, &scheme)?,
                conditions::cond_entropy(&model, &t, &scheme, cfg.seed)?,
                conditions::cond_weak_entropy(&model, &t, &scheme)?,
            ];
            for rep in &reports {
                for &(size, v) in &rep.partial_sums {
                    table.push_exact("conditions", &rep.id, Some(size as u64), v);
                }
                if let Some(mc) = &rep.mc {
                    table.push_ci(
                        "conditions",
                        &format!("{}:mc", rep.id),
                        None,
                        mc.mean,
                        mc.ci_half,
                    );
                }
                if let Some(c) = rep.censoring {
                    table.push_exact("conditions", &format!("{}:censoring", rep.id), None, c);
                }
            }
            table.details =
                Some(serde_json::to_value(&reports).expect("reports serialize"));
        }
        other => return Err(Error::Config(format!("unknown experiment kind '{other}'"))),
    }
    Ok(table)
}

fn execute(cli: &Cli) -> Result<PathBuf> {
    let kind_name = cli.cmd.kind();
    let cfg = load_config(cli.cmd.args())?;
    let table = run_experiment(kind_name, &cfg)?;
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("gwlab-out"));
    table.write(&out, kind_name)?;
    Ok(out)
}

/// Process entry point; returns the exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    init_threads();
    match execute(&cli) {
        Ok(out) => {
            println!("wrote {}/{}.{{csv,json}}", out.display(), cli.cmd.kind());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_cfg(dir: &std::path::Path, body: &Value) -> PathBuf {
        let p = dir.join("cfg.json");
        std::fs::write(&p, serde_json::to_string_pretty(body).unwrap()).unwrap();
        p
    }

    fn args(config: PathBuf) -> RunArgs {
        RunArgs {
            config,
            seed: None,
            out: None,
            replicas: None,
            horizon: None,
            truncation: None,
        }
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_version() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_cfg(
            dir.path(),
            &json!({"version": 1, "seed": 1, "model": {"name": "ext_vs_w"}, "stray": true}),
        );
        assert!(matches!(load_config(&args(p)), Err(Error::Config(_))));
        let p = write_cfg(
            dir.path(),
            &json!({"version": 9, "seed": 1, "model": {"name": "ext_vs_w"}}),
        );
        assert!(matches!(load_config(&args(p)), Err(Error::Config(_))));
    }

    #[test]
    fn flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_cfg(
            dir.path(),
            &json!({"version": 1, "seed": 1, "model": {"name": "ext_vs_w"}, "horizon": 3}),
        );
        let mut a = args(p);
        a.seed = Some(99);
        a.horizon = Some(7);
        let cfg = load_config(&a).unwrap();
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.horizon, Some(7));
    }

    #[test]
    fn forward_deterministic_rows_are_exact() {
        let cfg = ExperimentConfig {
            version: 1,
            model: ModelSpec {
                name: "single_type".into(),
                params: json!({"law": "deterministic", "k": 2}),
            },
            seed: 1,
            replicas: Some(50),
            horizon: Some(5),
            truncation: None,
            scheme: None,
            cap: None,
            out: None,
        };
        let t = run_experiment("forward", &cfg).unwrap();
        let w_rows: Vec<_> = t.rows.iter().filter(|r| r.statistic == "mean_w").collect();
        assert_eq!(w_rows.len(), 6);
        for r in w_rows {
            assert_eq!(r.value, 1.0);
            assert!(r.ci_low.is_none(), "deterministic rows must be exact");
        }
    }

    #[test]
    fn kesten_check_reports_tiny_tv() {
        let cfg = ExperimentConfig {
            version: 1,
            model: ModelSpec {
                name: "finite_matrix".into(),
                params: json!({"preset": "bounded_2"}),
            },
            seed: 1,
            replicas: None,
            horizon: Some(2),
            truncation: None,
            scheme: None,
            cap: None,
            out: None,
        };
        let t = run_experiment("kesten-check", &cfg).unwrap();
        let tv = t
            .rows
            .iter()
            .find(|r| r.statistic == "tv_reweight_vs_recursive")
            .unwrap();
        assert!(tv.value <= 1e-12, "tv = {}", tv.value);
    }

    #[test]
    fn conditions_run_emits_all_five() {
        let cfg = ExperimentConfig {
            version: 1,
            model: ModelSpec {
                name: "ext_vs_w".into(),
                params: json!({}),
            },
            seed: 4,
            replicas: Some(400),
            horizon: None,
            truncation: Some(40),
            scheme: None,
            cap: Some(500),
            out: None,
        };
        let t = run_experiment("conditions", &cfg).unwrap();
        for id in [
            "simple-xlogx",
            "sharp-return:censoring",
            "variance",
            "entropy",
            "weak-entropy",
        ] {
            assert!(
                t.rows.iter().any(|r| r.statistic == id),
                "missing rows for {id}"
            );
        }
        assert!(t.details.is_some());
    }

    #[test]
    fn spectral_rho_monotone_on_ladder() {
        let cfg = ExperimentConfig {
            version: 1,
            model: ModelSpec {
                name: "ladder".into(),
                params: json!({}),
            },
            seed: 1,
            replicas: None,
            horizon: None,
            truncation: Some(80),
            scheme: None,
            cap: None,
            out: None,
        };
        let t = run_experiment("spectral", &cfg).unwrap();
        let rho: Vec<f64> = t
            .rows
            .iter()
            .filter(|r| r.statistic == "rho")
            .map(|r| r.value)
            .collect();
        assert!(rho.len() >= 3);
        assert!(rho.windows(2).all(|w| w[1] >= w[0] - 1e-12));
    }

    #[test]
    fn exit_codes_by_error_class() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Unsupported("x".into())), 3);
        assert_eq!(
            exit_code(&Error::Numeric {
                msg: "x".into(),
                residual: 1.0
            }),
            4
        );
    }
}
