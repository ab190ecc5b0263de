//! Command-line front end.
//!
//! Every command takes an optional JSON config (`--config`), which may also
//! be a `manifest.json` from an earlier run. Flags override config fields.
//! The seed comes from `--seed`, then `DGATE_SEED`, then the config.
//!
//! Exit codes: 0 success, 1 tolerance failure, 2 usage or config error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dgate_core::GroupPartition;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{
    generate_blobs, generate_group_sparse, read_dataset_csv, write_dataset_csv, ClassBlobs, GroupSparseData,
    GroupSparseDgp, Task,
};
use crate::error::{Error, Result};
use crate::experiments::decay::{run_decay, DecayModel, DecaySpec, Engine};
use crate::experiments::path::{aggregate, run_path, Method, PathSpec};
use crate::experiments::toy::{run_toy, ToySpec};
use crate::gradcheck::{run_gradcheck, GradcheckConfig};
use crate::output::{
    decay_file_name, prepare_out_dir, read_json, write_aggregate_csv, write_json, write_manifest, write_path_csv,
    write_slopes_csv, write_toy_csv, write_trace_csv, Manifest,
};

pub const SEED_ENV: &str = "DGATE_SEED";

pub const EXIT_OK: i32 = 0;
pub const EXIT_TOLERANCE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

const INIT_NOTE: &str = "omega entries ~ N(0, 1/p), gates start at 1";

#[derive(Debug, Parser)]
#[command(name = "dgate", version, about = "Gated group-sparse training experiments")]
pub struct Cli {
    /// Progress messages on stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Direct gradient descent against the gated run on a two-feature problem.
    Toy(ToyArgs),
    /// Regularization paths on group-sparse regression.
    Path(PathArgs),
    /// Imbalance and loss-gap decay rates.
    Decay(DecayArgs),
    /// Finite-difference check of the gated gradients.
    Gradcheck(GradcheckArgs),
    /// Writes synthetic datasets as CSV.
    GenData(GenDataArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON config or an earlier manifest.json.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overwrite an existing manifest.json.
    #[arg(long)]
    pub force: bool,
    /// Worker threads for sweeps.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct ToyArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub depths: Option<Vec<usize>>,
    #[arg(long, alias = "lambdas", value_delimiter = ',')]
    pub lambda: Option<Vec<f64>>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PathArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated: dgating, fista, subgrad, oracle-ls.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub depths: Option<Vec<usize>>,
    #[arg(long, alias = "lambda", value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    /// Number of consecutive seeds starting at the base seed.
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DecayArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub engine: Option<Engine>,
    #[arg(long, value_enum)]
    pub model: Option<ModelKind>,
    #[arg(long, value_delimiter = ',')]
    pub depths: Option<Vec<usize>>,
    #[arg(long, alias = "lambda", value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    #[arg(long)]
    pub t_end: Option<f64>,
    #[arg(long)]
    pub dt: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Linear,
    Mlp,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Also write gradcheck.csv and manifest.json here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub depths: Option<Vec<usize>>,
    #[arg(long, hide = true)]
    pub inject_sign_flip: bool,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub kind: Option<DataKind>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum DataKind {
    GroupSparse,
    Blobs,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    #[serde(flatten)]
    pub spec: ToySpec,
    pub seed: u64,
}

/// Pre-built data for `path` instead of the generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathFiles {
    pub train: PathBuf,
    pub test: PathBuf,
    pub partition: PathBuf,
    /// Needed only by `oracle-ls`.
    #[serde(default)]
    pub true_support: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathConfig {
    pub dgp: GroupSparseDgp,
    pub files: Option<PathFiles>,
    pub path: PathSpec,
    /// Runs seeds `seed, seed + 1, ...`; each seed draws its own data set.
    pub n_seeds: usize,
    pub seed: u64,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self {
            dgp: GroupSparseDgp::default(),
            files: None,
            path: PathSpec::default(),
            n_seeds: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecayConfig {
    #[serde(flatten)]
    pub spec: DecaySpec,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataConfig {
    pub kind: DataKind,
    pub dgp: GroupSparseDgp,
    pub blobs: ClassBlobs,
    pub seed: u64,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self {
            kind: DataKind::GroupSparse,
            dgp: GroupSparseDgp::default(),
            blobs: ClassBlobs::default(),
            seed: 0,
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
    }
}

fn dispatch(cli: &Cli) -> Result<i32> {
    let log = Logger(cli.verbose);
    match &cli.command {
        Command::Toy(a) => cmd_toy(a, log),
        Command::Path(a) => cmd_path(a, log),
        Command::Decay(a) => cmd_decay(a, log),
        Command::Gradcheck(a) => cmd_gradcheck(a, log),
        Command::GenData(a) => cmd_gen_data(a, log),
    }
}

#[derive(Clone, Copy)]
struct Logger(u8);

impl Logger {
    fn info(self, msg: impl FnOnce() -> String) {
        if self.0 > 0 {
            eprintln!("{}", msg());
        }
    }
}

/// Reads a config file, unwrapping the `config` field of a manifest.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let mut value: serde_json::Value = read_json(path)?;
    if let Some(obj) = value.as_object_mut() {
        if obj.contains_key("command") && obj.contains_key("config") {
            value = obj.remove("config").unwrap_or_default();
        }
    }
    serde_json::from_value(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// `--seed`, then `DGATE_SEED`, then the config value.
pub fn resolve_seed(flag: Option<u64>, config: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(s) if !s.trim().is_empty() => s
            .trim()
            .parse()
            .map_err(|_| Error::config(format!("{SEED_ENV}={s:?} is not an unsigned integer"))),
        _ => Ok(config),
    }
}

fn check_jobs(jobs: usize) -> Result<()> {
    if jobs == 0 {
        return Err(Error::config("--jobs must be at least 1"));
    }
    Ok(())
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config types serialize")
}

fn cmd_toy(a: &ToyArgs, log: Logger) -> Result<i32> {
    let mut cfg: ToyConfig = load_config(a.common.config.as_deref())?;
    cfg.seed = resolve_seed(a.common.seed, cfg.seed)?;
    if let Some(d) = &a.depths {
        cfg.spec.depths = d.clone();
    }
    if let Some(l) = &a.lambda {
        cfg.spec.lambdas = l.clone();
    }
    if let Some(s) = a.steps {
        cfg.spec.steps = s;
    }
    if let Some(lr) = a.lr {
        cfg.spec.lr = lr;
    }
    cfg.spec.validate()?;
    prepare_out_dir(&a.out, a.common.force)?;
    let runs = run_toy(&cfg.spec)?;
    write_toy_csv(&a.out.join("toy_trajectories.csv"), &runs)?;
    for r in &runs {
        println!(
            "D={} lambda={} {:<6} final ||w|| = {:.3e}{}",
            r.depth,
            r.lambda,
            r.method,
            r.final_norm(),
            if r.diverged { " (diverged)" } else { "" }
        );
    }
    let mut m = Manifest::new("toy", to_value(&cfg), vec![cfg.seed]);
    m.outputs.push("toy_trajectories.csv".into());
    write_manifest(&a.out, &m)?;
    log.info(|| format!("wrote {}", a.out.display()));
    Ok(EXIT_OK)
}

fn load_path_data(cfg: &PathConfig, seed: u64) -> Result<GroupSparseData> {
    match &cfg.files {
        None => generate_group_sparse(&GroupSparseDgp { seed, ..cfg.dgp.clone() }),
        Some(f) => {
            let partition: GroupPartition = read_json(&f.partition)?;
            let train = read_dataset_csv(&f.train, Task::Regression)?;
            let test = read_dataset_csv(&f.test, Task::Regression)?;
            if train.n_features() != partition.p() || test.n_features() != partition.p() {
                return Err(Error::config("train/test feature counts must match the partition"));
            }
            let p = partition.p();
            Ok(GroupSparseData {
                train,
                test,
                partition: Arc::new(partition),
                true_support: f.true_support.clone().unwrap_or_default(),
                true_weights: dgate_core::DenseVector::zeros(p),
            })
        }
    }
}

fn cmd_path(a: &PathArgs, log: Logger) -> Result<i32> {
    check_jobs(a.common.jobs)?;
    let mut cfg: PathConfig = load_config(a.common.config.as_deref())?;
    cfg.seed = resolve_seed(a.common.seed, cfg.seed)?;
    if let Some(m) = &a.methods {
        cfg.path.methods = m.iter().map(|s| s.parse::<Method>()).collect::<Result<_>>()?;
    }
    if let Some(d) = &a.depths {
        cfg.path.depths = d.clone();
    }
    if let Some(l) = &a.lambdas {
        cfg.path.lambdas = l.clone();
    }
    if let Some(n) = a.seeds {
        cfg.n_seeds = n;
    }
    if let Some(i) = a.iters {
        cfg.path.train.iters = i;
    }
    if cfg.n_seeds == 0 {
        return Err(Error::config("need at least one seed"));
    }
    cfg.path.validate()?;
    if cfg.path.methods.contains(&Method::OracleLs) && cfg.files.as_ref().is_some_and(|f| f.true_support.is_none()) {
        return Err(Error::config("oracle-ls on file data needs files.true_support"));
    }
    prepare_out_dir(&a.out, a.common.force)?;
    let seeds: Vec<u64> = (0..cfg.n_seeds as u64).map(|k| cfg.seed.wrapping_add(k)).collect();
    let mut m = Manifest::new("path", to_value(&cfg), seeds.clone());
    m.notes.push(INIT_NOTE.into());
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        log.info(|| format!("path: seed {seed}"));
        let data = load_path_data(&cfg, seed)?;
        let records = run_path(&data, &cfg.path, seed, a.common.jobs)?;
        let dir = a.out.join(format!("seed-{seed}"));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_path_csv(&dir.join("path.csv"), &records)?;
        m.outputs.push(format!("seed-{seed}/path.csv"));
        let flagged = records.iter().filter(|r| r.diverged).count();
        println!("seed {seed}: {} records, {flagged} diverged", records.len());
        runs.push(records);
    }
    write_aggregate_csv(&a.out.join("aggregate.csv"), &aggregate(&runs))?;
    m.outputs.push("aggregate.csv".into());
    write_manifest(&a.out, &m)?;
    Ok(EXIT_OK)
}

fn cmd_decay(a: &DecayArgs, log: Logger) -> Result<i32> {
    check_jobs(a.common.jobs)?;
    let mut cfg: DecayConfig = load_config(a.common.config.as_deref())?;
    cfg.seed = resolve_seed(a.common.seed, cfg.seed)?;
    if let Some(e) = a.engine {
        cfg.spec.engine = e;
    }
    match a.model {
        Some(ModelKind::Linear) if !matches!(cfg.spec.model, DecayModel::Linear { .. }) => {
            cfg.spec.model = DecayModel::linear_default();
        }
        Some(ModelKind::Mlp) if !matches!(cfg.spec.model, DecayModel::Mlp { .. }) => {
            cfg.spec.model = DecayModel::mlp_default();
        }
        _ => {}
    }
    if let Some(d) = &a.depths {
        cfg.spec.depths = d.clone();
    }
    if let Some(l) = &a.lambdas {
        cfg.spec.lambdas = l.clone();
    }
    if let Some(t) = a.t_end {
        cfg.spec.flow.t_end = t;
    }
    if let Some(dt) = a.dt {
        cfg.spec.flow.dt = dt;
    }
    cfg.spec.validate()?;
    prepare_out_dir(&a.out, a.common.force)?;
    log.info(|| format!("decay: {} configs on {}", cfg.spec.configs().len(), cfg.spec.model.name()));
    let runs = run_decay(&cfg.spec, cfg.seed, a.common.jobs)?;
    let mut m = Manifest::new("decay", to_value(&cfg), vec![cfg.seed]);
    m.notes.push(INIT_NOTE.into());
    for r in &runs {
        let name = decay_file_name(r.depth, r.lambda);
        write_trace_csv(&a.out.join(&name), &r.trace)?;
        m.outputs.push(name);
    }
    write_slopes_csv(&a.out.join("slopes.csv"), &runs)?;
    m.outputs.push("slopes.csv".into());
    write_manifest(&a.out, &m)?;

    let mut failed = false;
    for r in &runs {
        let fmt = |s: Option<f64>| s.map_or_else(|| "n/a".to_string(), |v| format!("{v:.6}"));
        let mark = if cfg.spec.engine == Engine::Flow {
            let ok = r.within_tol();
            failed |= !ok;
            if ok { "ok" } else { "FAIL" }
        } else {
            "-"
        };
        println!(
            "D={} lambda={} slope={} theory={:.6} gap_slope={} {mark}",
            r.depth,
            r.lambda,
            fmt(r.slope_imax),
            r.theory(),
            fmt(r.slope_gap)
        );
    }
    Ok(if failed { EXIT_TOLERANCE } else { EXIT_OK })
}

fn cmd_gradcheck(a: &GradcheckArgs, log: Logger) -> Result<i32> {
    let mut cfg: GradcheckConfig = load_config(a.common.config.as_deref())?;
    cfg.seed = resolve_seed(a.common.seed, cfg.seed)?;
    if let Some(e) = a.eps {
        cfg.eps = e;
    }
    if let Some(t) = a.tol {
        cfg.tol = t;
    }
    if let Some(d) = &a.depths {
        cfg.depths = d.clone();
    }
    cfg.flip_penalty_sign = a.inject_sign_flip;
    cfg.validate()?;
    if let Some(out) = &a.out {
        prepare_out_dir(out, a.common.force)?;
    }
    let report = run_gradcheck(&cfg)?;
    for e in &report.entries {
        log.info(|| e.to_string());
    }
    println!("max relative error {:.3e} (tol {:.1e})", report.max_rel_err(), cfg.tol);
    if let Some(out) = &a.out {
        #[derive(Serialize)]
        struct Row<'a> {
            model: &'a str,
            depth: usize,
            coords: usize,
            max_rel_err: f64,
            worst: &'a str,
        }
        let path = out.join("gradcheck.csv");
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(&path)
            .map_err(|source| Error::Csv { path: path.clone(), source })?;
        for e in &report.entries {
            w.serialize(Row {
                model: &e.model,
                depth: e.depth,
                coords: e.coords,
                max_rel_err: e.max_rel_err,
                worst: &e.worst,
            })
            .map_err(|source| Error::Csv { path: path.clone(), source })?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        let mut m = Manifest::new("gradcheck", to_value(&cfg), vec![cfg.seed]);
        m.outputs.push("gradcheck.csv".into());
        write_manifest(out, &m)?;
    }
    if report.passed() {
        println!("ok");
        Ok(EXIT_OK)
    } else {
        for e in report.entries.iter().filter(|e| e.max_rel_err >= cfg.tol) {
            println!("FAIL {e}");
        }
        Ok(EXIT_TOLERANCE)
    }
}

fn cmd_gen_data(a: &GenDataArgs, log: Logger) -> Result<i32> {
    let mut cfg: GenDataConfig = load_config(a.common.config.as_deref())?;
    cfg.seed = resolve_seed(a.common.seed, cfg.seed)?;
    if let Some(k) = a.kind {
        cfg.kind = k;
    }
    prepare_out_dir(&a.out, a.common.force)?;
    let mut m = Manifest::new("gen-data", serde_json::Value::Null, vec![cfg.seed]);
    match cfg.kind {
        DataKind::GroupSparse => {
            cfg.dgp.seed = cfg.seed;
            let d = generate_group_sparse(&cfg.dgp)?;
            write_dataset_csv(&a.out.join("train.csv"), &d.train)?;
            write_dataset_csv(&a.out.join("test.csv"), &d.test)?;
            write_json(&a.out.join("partition.json"), &*d.partition)?;
            write_json(&a.out.join("true_support.json"), &d.true_support)?;
            m.outputs.extend(["train.csv", "test.csv", "partition.json", "true_support.json"].map(String::from));
        }
        DataKind::Blobs => {
            cfg.blobs.seed = cfg.seed;
            let d = generate_blobs(&cfg.blobs)?;
            write_dataset_csv(&a.out.join("data.csv"), &d)?;
            m.outputs.push("data.csv".into());
        }
    }
    m.config = to_value(&cfg);
    write_manifest(&a.out, &m)?;
    log.info(|| format!("wrote {}", a.out.display()));
    println!("{}", m.outputs.join(" "));
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_config_is_unwrapped() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ToyConfig {
            seed: 7,
            ..Default::default()
        };
        let mut m = Manifest::new("toy", to_value(&cfg), vec![7]);
        m.outputs.push("toy_trajectories.csv".into());
        write_manifest(dir.path(), &m).unwrap();
        let back: ToyConfig = load_config(Some(&dir.path().join("manifest.json"))).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_config_field_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"stepz": 3}"#).unwrap();
        assert!(load_config::<ToyConfig>(Some(&path)).is_err());
    }

    #[test]
    fn flag_seed_wins() {
        assert_eq!(resolve_seed(Some(3), 9).unwrap(), 3);
    }
}
