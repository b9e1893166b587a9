//! Command-line runner: loads a config, runs one experiment and writes a
//! JSON summary plus CSV tables next to the output prefix.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::analysis::{self, NuclearState, Noise, Realign};
use crate::config::{default_config, default_config_text, BellPairSource, BkEvaluation, ConfigError, Experiment, RunConfig, SCHEMA_VERSION};
use crate::emitter::{self, TimeGrid};
use crate::error::Error;
use crate::forecast;
use crate::harness::{self, Apparatus, HOM_DELAY_NS};
use crate::protocol::{self, BkMode, HeraldPattern};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MODEL: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    Model(Error),
    Io(PathBuf, std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Model(_) => EXIT_MODEL,
            CliError::Io(..) => EXIT_IO,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "{e}"),
            CliError::Model(e) => write!(f, "model error: {e}"),
            CliError::Io(p, e) => write!(f, "I/O error on {}: {e}", p.display()),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Model(e)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

#[derive(Debug, Parser)]
#[command(name = "tcsim", version, about = "Two-node spin-photon network simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment.
    Run(RunArgs),
    /// Print the shipped configuration for an experiment.
    DefaultConfig {
        #[arg(long, value_enum)]
        experiment: Experiment,
    },
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub experiment: Option<Experiment>,
    #[arg(long)]
    pub shots: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output path prefix.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads; 0 uses all cores.
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
}

/// Config file (or shipped default), then `TCSIM_SEED`, then flags.
pub fn resolve_config(args: &RunArgs, env_seed: Option<&str>) -> Result<RunConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Io(path.clone(), e))?;
            RunConfig::from_toml(&text)?
        }
        None => default_config(args.experiment.ok_or_else(|| ConfigError {
            key: Some("experiment".into()),
            message: "give --experiment or --config".into(),
        })?),
    };
    if let Some(e) = args.experiment {
        cfg.experiment = e;
    }
    if let Some(s) = env_seed {
        cfg.seed = s.trim().parse().map_err(|_| ConfigError {
            key: Some("TCSIM_SEED".into()),
            message: format!("'{s}' is not an unsigned integer"),
        })?;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.shots {
        cfg.shots = n;
    }
    if let Some(o) = &args.out {
        cfg.output = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// A CSV table held in memory until the run succeeds.
pub struct Table {
    pub name: String,
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(name: &str, header: &[&'static str]) -> Self {
        Table { name: name.into(), header: header.to_vec(), rows: Vec::new() }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }
}

macro_rules! row {
    ($($v:expr),* $(,)?) => { vec![$(format!("{}", $v)),*] };
}

/// Everything an experiment produced.
pub struct Outcome {
    pub metrics: Value,
    pub tables: Vec<Table>,
}

pub fn execute(cfg: &RunConfig) -> Result<Outcome, Error> {
    match cfg.experiment {
        Experiment::Hom => run_hom(cfg),
        Experiment::Bk => run_bk(cfg),
        Experiment::Tcnot => run_tcnot(cfg),
        Experiment::Spin => run_spin(cfg),
        Experiment::Ssro => run_ssro(cfg),
        Experiment::Forecast => run_forecast(cfg),
    }
}

fn run_hom(cfg: &RunConfig) -> Result<Outcome, Error> {
    let lim = cfg.hardware.acquisition_window_ns;
    let [e1, e2] = cfg.emitters();
    let grid = TimeGrid::default_for(lim)?;
    let (gi, gd) = emitter::hom_correlations(&e1, &e2, &grid, lim)?;
    let mut corr = Table::new("hom_correlations", &["tau_ns", "g_indistinguishable", "g_distinguishable"]);
    for (i, t) in grid.points().enumerate() {
        corr.push(row!(t, gi.values[i], gd.values[i]));
    }

    let mut vis = Table::new("hom_visibility", &["window_ns", "v_analytic", "v_monte_carlo", "v_monte_carlo_err"]);
    let mut metrics = serde_json::Map::new();
    let mut tables = vec![corr];
    let analytic: Vec<f64> = cfg
        .hom
        .windows_ns
        .iter()
        .map(|&t| emitter::visibility(&gi, &gd, t))
        .collect::<Result<_, _>>()?;
    if cfg.hom.monte_carlo {
        let app = if cfg.hom.lossless_optics { Apparatus::lossless([e1.clone(), e2.clone()]) } else { cfg.apparatus() };
        let shots = cfg.shots as u32;
        let ind = harness::run_sequence(&harness::build_hom_sequence(true), &app, shots, cfg.seed)?;
        let dis = harness::run_sequence(&harness::build_hom_sequence(false), &app, shots, cfg.seed.wrapping_add(1))?;
        let realign = Some(Realign { from_local_ns: 1100.0 + HOM_DELAY_NS - 100.0, shift_ns: -HOM_DELAY_NS });
        let h_i = analysis::coincidences(&ind, None, lim, cfg.hom.bin_width_ns)?;
        let h_d = analysis::coincidences(&dis, realign, lim, cfg.hom.bin_width_ns)?;
        let mut hist = Table::new("hom_histogram", &["tau_ns", "counts_indistinguishable", "counts_distinguishable"]);
        for (i, c) in h_i.bin_centers().iter().enumerate() {
            hist.push(row!(c, h_i.counts[i], h_d.counts[i]));
        }
        tables.push(hist);
        let mut mc = Vec::new();
        for (k, &t) in cfg.hom.windows_ns.iter().enumerate() {
            let (v, err) = analysis::hom_visibility(&ind, &dis, realign, t)?;
            vis.push(row!(t, analytic[k], v, err));
            mc.push(json!({"window_ns": t, "v": v, "err": err, "within_3_sigma": (v - analytic[k]).abs() <= 3.0 * err}));
        }
        metrics.insert("monte_carlo".into(), Value::Array(mc));
        metrics.insert("singles".into(), json!({"indistinguishable": h_i.total_singles, "distinguishable": h_d.total_singles}));
    } else {
        for (k, &t) in cfg.hom.windows_ns.iter().enumerate() {
            vis.push(row!(t, analytic[k], "", ""));
        }
    }
    tables.push(vis);
    let an: Vec<Value> = cfg.hom.windows_ns.iter().zip(&analytic).map(|(t, v)| json!({"window_ns": t, "v": v})).collect();
    metrics.insert("analytic".into(), Value::Array(an));
    metrics.insert("mean_interference_visibility_5ns".into(), json!(emitter::mean_interference_visibility(&e1, &e2, 5.0f64.min(lim), lim)?));
    Ok(Outcome { metrics: Value::Object(metrics), tables })
}

fn run_bk(cfg: &RunConfig) -> Result<Outcome, Error> {
    let mode = match cfg.protocol.evaluation {
        BkEvaluation::Analytic => BkMode::Analytic,
        BkEvaluation::Sampled => BkMode::Sampled { shots: cfg.shots, seed: cfg.seed },
    };
    let base = cfg.bk_params(cfg.protocol.timebins_ns[0]);
    let rows: Vec<protocol::BkRow> = cfg
        .protocol
        .timebins_ns
        .par_iter()
        .enumerate()
        .map(|(i, &t)| {
            let m = match mode {
                BkMode::Sampled { shots, seed } => BkMode::Sampled { shots, seed: seed.wrapping_add(i as u64) },
                m => m,
            };
            protocol::simulate_bk_experiment(&base, m, &[t]).map(|r| r[0])
        })
        .collect::<Result<_, _>>()?;
    let mut table = Table::new(
        "bk",
        &["timebin_ns", "visibility", "fidelity", "fidelity_err", "hom_bound", "success_probability", "rate_hz"],
    );
    let mut entries = Vec::new();
    for r in &rows {
        let bound = protocol::hom_bound(r.visibility)?;
        table.push(row!(r.timebin_ns, r.visibility, r.fidelity, r.fidelity_err, bound, r.success_probability, r.rate_hz));
        entries.push(json!({"timebin_ns": r.timebin_ns, "fidelity": r.fidelity, "fidelity_err": r.fidelity_err, "rate_hz": r.rate_hz}));
    }
    let entangled: Vec<f64> = rows.iter().filter(|r| r.fidelity > 0.5).map(|r| r.timebin_ns).collect();
    let per_pattern: Vec<Value> = protocol::bk_conditional_state(&cfg.bk_params(40.0f64.min(cfg.hardware.acquisition_window_ns)))?
        .iter()
        .map(|r| json!({"early": r.herald.early, "late": r.herald.late, "success_probability": r.success_probability, "fidelity": r.fidelity}))
        .collect();
    Ok(Outcome {
        metrics: json!({
            "rows": entries,
            "timebins_above_half_ns": entangled,
            "patterns_at_40ns": per_pattern,
        }),
        tables: vec![table],
    })
}

fn run_tcnot(cfg: &RunConfig) -> Result<Outcome, Error> {
    let pattern = HeraldPattern { early: harness::Detector::D1, late: harness::Detector::D1 };
    let bp = match cfg.tcnot.bell_pair {
        BellPairSource::Werner => protocol::werner_pair((4.0 * cfg.tcnot.werner_fidelity - 1.0) / 3.0, pattern)?,
        BellPairSource::Model => {
            let results = protocol::bk_conditional_state(&cfg.bk_params(cfg.tcnot.timebin_ns))?;
            let (avg, _) = protocol::averaged_state(&results)?;
            protocol::bell_pair(avg, pattern)?
        }
    };
    let table = protocol::tcnot_truth_table(&bp, cfg.tcnot.mode)?;
    let labels = ["00", "10", "01", "11"];
    let mut t = Table::new("tcnot_truth_table", &["input", "p_00", "p_10", "p_01", "p_11"]);
    let mut acceptance = Vec::new();
    for (i, r) in table.iter().enumerate() {
        t.push(row!(labels[i], r[0], r[1], r[2], r[3]));
        let c = crate::qmath::DensityMatrix::basis(1, i & 1)?;
        let tg = crate::qmath::DensityMatrix::basis(1, (i >> 1) & 1)?;
        acceptance.push(protocol::tcnot_execute(&c, &tg, &bp, cfg.tcnot.mode)?.1);
    }
    let diag: Vec<f64> = (0..4).map(|i| table[i][(i & 1) | ((((i >> 1) & 1) ^ (i & 1)) << 1)]).collect();
    Ok(Outcome {
        metrics: json!({
            "bell_pair_fidelity": bp.fidelity,
            "acceptance": acceptance,
            "correct_output_probability": diag,
            "truth_table_fidelity": diag.iter().sum::<f64>() / 4.0,
            "labels": "bit order is control then target",
        }),
        tables: vec![t],
    })
}

fn run_spin(cfg: &RunConfig) -> Result<Outcome, Error> {
    let results: Vec<(analysis::FitData, analysis::FitResult)> = cfg
        .spin
        .curves
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let d = c.sample(cfg.seed.wrapping_add(i as u64))?;
            let f = match c.noise {
                Noise::Poisson => analysis::fit_counts(c.model, &d, None)?,
                Noise::Gaussian { .. } => analysis::fit(c.model, &d, None)?,
            };
            Ok((d, f))
        })
        .collect::<Result<_, Error>>()?;
    let mut tables = Vec::new();
    let mut fits = serde_json::Map::new();
    for (c, (d, f)) in cfg.spin.curves.iter().zip(&results) {
        let mut t = Table::new(&format!("spin_{}", c.label), &["x", "y", "sigma", "fit"]);
        for i in 0..d.x.len() {
            t.push(row!(d.x[i], d.y[i], d.sigma[i], c.model.eval(&f.params, d.x[i])));
        }
        tables.push(t);
        let mut params = serde_json::Map::new();
        for (k, n) in f.names.iter().enumerate() {
            let err = if f.std_errors[k].is_finite() { json!(f.std_errors[k]) } else { Value::Null };
            params.insert(n.clone(), json!({"value": f.params[k], "std_error": err, "truth": c.truth[k]}));
        }
        let mut entry = json!({"model": c.model, "params": params, "residual_norm": f.residual_norm});
        if c.model == analysis::FitModel::Rabi {
            if let Ok(g) = analysis::gate_fidelity_from_envelope(f, cfg.spin.gate_time_ns) {
                entry["gate_fidelity"] = json!(g);
            }
        }
        fits.insert(c.label.clone(), entry);
    }
    Ok(Outcome { metrics: json!({ "fits": fits }), tables })
}

fn run_ssro(cfg: &RunConfig) -> Result<Outcome, Error> {
    let shots = cfg.shots as u32;
    let models = [("tc1", &cfg.ssro.tc1), ("tc2", &cfg.ssro.tc2)];
    let sims: Vec<(Vec<u64>, Vec<u64>)> = models
        .par_iter()
        .enumerate()
        .map(|(k, (_, m))| {
            let seed = cfg.seed.wrapping_add(k as u64);
            Ok((
                analysis::ssro_simulate(m, NuclearState::Bright, shots, seed)?,
                analysis::ssro_simulate(m, NuclearState::Dark, shots, seed)?,
            ))
        })
        .collect::<Result<_, Error>>()?;
    let mut hist = Table::new("ssro_histogram", &["module", "photons", "bright_shots", "dark_shots"]);
    let mut sweep = Table::new("ssro_threshold", &["module", "threshold", "spam"]);
    let mut metrics = serde_json::Map::new();
    for ((name, _), (b, d)) in models.iter().zip(&sims) {
        let top = b.iter().chain(d).copied().max().unwrap_or(0);
        let mut hb = vec![0u64; top as usize + 1];
        let mut hd = vec![0u64; top as usize + 1];
        b.iter().for_each(|&x| hb[x as usize] += 1);
        d.iter().for_each(|&x| hd[x as usize] += 1);
        for n in 0..=top as usize {
            hist.push(row!(name, n, hb[n], hd[n]));
        }
        let s = analysis::ssro_threshold(b, d)?;
        for (i, th) in s.thresholds.iter().enumerate() {
            sweep.push(row!(name, th, s.spam[i]));
        }
        metrics.insert(
            (*name).into(),
            json!({
                "best_threshold": s.best_threshold,
                "best_spam": s.best_spam,
                "spam_at_8": s.at(8),
                "spam_at_35": s.at(35),
                "mean_bright": b.iter().sum::<u64>() as f64 / b.len() as f64,
                "mean_dark": d.iter().sum::<u64>() as f64 / d.len() as f64,
            }),
        );
    }
    Ok(Outcome { metrics: Value::Object(metrics), tables: vec![hist, sweep] })
}

fn run_forecast(cfg: &RunConfig) -> Result<Outcome, Error> {
    let f = &cfg.forecast;
    let (total, rate) = forecast::repetition_rate(&f.steps)?;
    let success = forecast::success_probability(&f.efficiencies)?;
    let curve = forecast::fidelity_rate_curve(&f.projection, &f.steps, &f.efficiencies, &f.fractions)?;
    let mut t = Table::new("forecast", &["fraction", "fidelity", "rate_hz", "timebin_ns", "visibility"]);
    for p in &curve {
        t.push(row!(p.fraction, p.fidelity, p.rate_hz, p.timebin_ns, p.visibility));
    }
    let low = forecast::fidelity_rate_curve(&f.projection, &f.steps, &f.efficiencies, &[1e-4, 0.125])?;
    Ok(Outcome {
        metrics: json!({
            "total_time_ns": total,
            "repetition_rate_hz": rate,
            "success_probability": success,
            "fraction_of_intrinsic": success / 0.5,
            "p_double": f.projection.p_double(),
            "fidelity_low_rate_limit": low[0].fidelity,
            "fidelity_at_0_125": low[1].fidelity,
            "rate_at_0_125_hz": low[1].rate_hz,
        }),
        tables: vec![t],
    })
}

fn artifact_path(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push("_");
    s.push(suffix);
    PathBuf::from(s)
}

fn write_file(path: &Path, body: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.to_path_buf(), e))?;
    }
    fs::write(path, body).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

/// Runs the experiment on `workers` threads and writes its artifacts.
/// Returns the written paths.
pub fn run(cfg: &RunConfig, workers: usize) -> Result<Vec<PathBuf>, CliError> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Model(Error::InvalidParameter { name: "workers".into(), reason: e.to_string() }))?;
    let outcome = pool.install(|| execute(cfg))?;
    let mut written = Vec::new();
    let mut names = Vec::new();
    for t in &outcome.tables {
        let p = artifact_path(&cfg.output, &format!("{}.csv", t.name));
        write_file(&p, &t.to_csv())?;
        names.push(p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
        written.push(p);
    }
    let summary = json!({
        "schema_version": SCHEMA_VERSION,
        "experiment": cfg.experiment,
        "seed": cfg.seed,
        "shots": cfg.shots,
        "metrics": outcome.metrics,
        "artifacts": names,
        "config": cfg,
    });
    let p = artifact_path(&cfg.output, "summary.json");
    let mut body = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Model(Error::Format(e.to_string())))?;
    body.push('\n');
    write_file(&p, &body)?;
    written.push(p);
    Ok(written)
}

/// Entry point; returns the process exit code.
pub fn main_with_args<I, T>(args: I, env_seed: Option<String>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    match cli.command {
        Command::DefaultConfig { experiment } => {
            print!("{}", default_config_text(experiment));
            0
        }
        Command::Run(args) => {
            let res = resolve_config(&args, env_seed.as_deref()).and_then(|cfg| run(&cfg, args.workers));
            match res {
                Ok(paths) => {
                    let mut s = String::new();
                    for p in paths {
                        let _ = writeln!(s, "wrote {}", p.display());
                    }
                    print!("{s}");
                    0
                }
                Err(e) => {
                    eprintln!("tcsim: {e}");
                    e.exit_code()
                }
            }
        }
    }
}
