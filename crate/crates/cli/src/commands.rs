use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crete_core::baselines::RegularizerKind;
use crete_core::dataset::{build_all_pairs, place_terminals, split_episode, MeasurementSet};
use crete_core::environment::{sample_environment, Environment, EnvironmentConfig};
use crete_core::evaluation::{
    eval_pairs, mae, run_experiment, CreteEstimator, Estimator, ExperimentId, KnnEstimator, OracleEstimator, TomographicEstimator,
};
use crete_core::invariance::{canonicalize, GainScaler, QueryInput};
use crete_core::io::{read_dataset, read_environment, write_dataset, write_environment};
use crete_core::model::{read_checkpoint, write_checkpoint, ModelParams};
use crete_core::trainer::{trace_csv, train as run_training, TraceRow, TrainObserver};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;

pub struct Context {
    pub workdir: PathBuf,
    pub threads: usize,
    pub dump_features: Option<PathBuf>,
}

impl Context {
    fn path(&self, rel: &str) -> PathBuf {
        self.workdir.join(rel)
    }
}

/// Deterministic per-purpose seeds derived from the global seed.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const TRAIN_STREAM: u64 = 1;
const VAL_STREAM: u64 = 2;
const TEST_STREAM: u64 = 3;
const TERMINAL_STREAM: u64 = 4;
const NOISE_STREAM: u64 = 5;
const MODEL_STREAM: u64 = 6;
const TRAIN_RNG_STREAM: u64 = 7;
const EVAL_STREAM: u64 = 8;

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(CliError::file(dir))?;
    }
    fs::write(path, bytes).map_err(CliError::file(path))
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        write!(s, "{b:02x}").unwrap();
        s
    })
}

/// Written files, recorded in the manifest.
#[derive(Default)]
struct Artifacts {
    entries: Vec<(String, String)>,
}

impl Artifacts {
    fn write(&mut self, ctx: &Context, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        write_file(&ctx.path(rel), bytes)?;
        self.entries.push((rel.to_string(), sha256_hex(bytes)));
        Ok(())
    }
}

/// The manifest is itself a config file: rerunning the command with
/// `--config` pointing at it reproduces the run.
fn write_manifest(ctx: &Context, command: &str, cfg: &RunConfig, artifacts: &Artifacts) -> Result<(), CliError> {
    let mut text = String::new();
    writeln!(text, "# crete manifest").unwrap();
    writeln!(text, "# command: {command}").unwrap();
    writeln!(text, "# threads: {}", ctx.threads).unwrap();
    for (path, hash) in &artifacts.entries {
        writeln!(text, "# artifact: {path} sha256:{hash}").unwrap();
    }
    text.push('\n');
    text.push_str(&cfg.to_text());
    write_file(&ctx.path(&format!("manifest_{command}.txt")), text.as_bytes())
}

fn split_dir(cfg: &RunConfig, split: &str) -> String {
    format!("{}/{split}", cfg.get("paths.data_dir"))
}

fn generate_split(
    env_cfg: &EnvironmentConfig,
    count: usize,
    stream: u64,
    seed: u64,
    terminals: usize,
    noise_std: f64,
) -> Result<Vec<(Environment, MeasurementSet)>, CliError> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let env_seed = derive_seed(seed, stream, i);
            let env = sample_environment(env_seed, env_cfg)?;
            let t = place_terminals(derive_seed(env_seed, TERMINAL_STREAM, 0), &env.region, terminals)?;
            let set = build_all_pairs(&env, &t, noise_std, derive_seed(env_seed, NOISE_STREAM, 0))?;
            Ok((env, set))
        })
        .collect()
}

pub fn gen_data(ctx: &Context, cfg: RunConfig) -> Result<(), CliError> {
    let seed = cfg.seed()?;
    let env_cfg = cfg.environment()?;
    let ds = cfg.dataset()?;
    let mut artifacts = Artifacts::default();
    for (split, count, stream) in [("train", ds.num_train_envs, TRAIN_STREAM), ("val", ds.num_val_envs, VAL_STREAM)] {
        let dir = split_dir(&cfg, split);
        for (i, (env, set)) in generate_split(&env_cfg, count, stream, seed, ds.num_terminals, ds.noise_std)?.iter().enumerate() {
            let mut env_bytes = Vec::new();
            write_environment(env, &mut env_bytes)?;
            artifacts.write(ctx, &format!("{dir}/env_{i:04}.env"), &env_bytes)?;
            let mut set_bytes = Vec::new();
            write_dataset(set, &mut set_bytes)?;
            artifacts.write(ctx, &format!("{dir}/env_{i:04}.ds"), &set_bytes)?;
        }
        eprintln!("{split}: {count} environments");
    }
    write_manifest(ctx, "gen-data", &cfg, &artifacts)
}

fn load_split(ctx: &Context, cfg: &RunConfig, split: &str) -> Result<Vec<(Environment, MeasurementSet)>, CliError> {
    let dir = ctx.path(&split_dir(cfg, split));
    let mut out = Vec::new();
    for i in 0.. {
        let env_path = dir.join(format!("env_{i:04}.env"));
        if !env_path.exists() {
            break;
        }
        let env = read_environment(BufReader::new(fs::File::open(&env_path).map_err(CliError::file(&env_path))?))?;
        let ds_path = dir.join(format!("env_{i:04}.ds"));
        let set = read_dataset(BufReader::new(fs::File::open(&ds_path).map_err(CliError::file(&ds_path))?))?;
        out.push((env, set));
    }
    Ok(out)
}

struct Progress;

impl TrainObserver for Progress {
    fn on_step(&mut self, row: &TraceRow) {
        if let Some(v) = row.val_loss {
            eprintln!("step {:>6}  train {:.4}  val {:.4}", row.step + 1, row.train_loss, v);
        }
    }
}

pub fn train(ctx: &Context, cfg: RunConfig) -> Result<(), CliError> {
    let seed = cfg.seed()?;
    let train_sets: Vec<MeasurementSet> = load_split(ctx, &cfg, "train")?.into_iter().map(|(_, s)| s).collect();
    if train_sets.is_empty() {
        return Err(CliError::Usage("no training data; run gen-data first".into()));
    }
    let val_sets: Vec<MeasurementSet> = load_split(ctx, &cfg, "val")?.into_iter().map(|(_, s)| s).collect();
    let (model_cfg, length_scale) = cfg.model()?;
    let (mut tc, vc) = cfg.trainer(derive_seed(seed, TRAIN_RNG_STREAM, 0))?;
    tc.seed = derive_seed(seed, TRAIN_RNG_STREAM, 0);
    let scaler = GainScaler::fit(train_sets.iter())?;
    let mut params = ModelParams::init(model_cfg, scaler, derive_seed(seed, MODEL_STREAM, 0))?;
    params.length_scale = length_scale;
    eprintln!("training {} parameters on {} environments", params.num_parameters(), train_sets.len());
    let out = run_training(params, &train_sets, &val_sets, &tc, &vc, &mut Progress)?;
    let mut artifacts = Artifacts::default();
    let mut ckpt = Vec::new();
    write_checkpoint(&out.params, &mut ckpt)?;
    artifacts.write(ctx, cfg.get("paths.checkpoint"), &ckpt)?;
    let trace_path = format!("{}/train_trace.csv", cfg.get("paths.results_dir"));
    artifacts.write(ctx, &trace_path, trace_csv(&out.trace).as_bytes())?;
    write_manifest(ctx, "train", &cfg, &artifacts)
}

fn load_model(ctx: &Context, cfg: &RunConfig) -> Result<ModelParams, CliError> {
    let p = ctx.path(cfg.get("paths.checkpoint"));
    let f = fs::File::open(&p).map_err(CliError::file(&p))?;
    Ok(read_checkpoint(BufReader::new(f))?)
}

fn build_estimators(ctx: &Context, cfg: &RunConfig, seed: u64) -> Result<Vec<Box<dyn Estimator>>, CliError> {
    let b = cfg.baselines()?;
    let mut out: Vec<Box<dyn Estimator>> = Vec::new();
    for name in cfg.estimator_names() {
        let est: Box<dyn Estimator> = match name.as_str() {
            "crete" => Box::new(CreteEstimator::new(load_model(ctx, cfg)?)),
            "knn" => Box::new(KnnEstimator { k: b.knn_k }),
            "oracle" => Box::new(OracleEstimator),
            other => {
                let kind = other
                    .strip_prefix("tomo_")
                    .map(RegularizerKind::parse)
                    .transpose()?
                    .ok_or_else(|| CliError::Config(format!("unknown estimator `{other}`")))?;
                let idx = RegularizerKind::ALL.iter().position(|k| *k == kind).expect("listed kind");
                Box::new(TomographicEstimator {
                    spec: b.spec(kind),
                    lambdas: b.fixed_lambda[idx].map_or_else(|| b.lambda_grid.clone(), |l| vec![l]),
                    holdout_fraction: b.holdout_fraction,
                    seed: derive_seed(seed, EVAL_STREAM, idx as u64),
                })
            }
        };
        out.push(est);
    }
    if out.is_empty() {
        return Err(CliError::Config("evaluation.estimators is empty".into()));
    }
    Ok(out)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn fit_baseline(ctx: &Context, mut cfg: RunConfig) -> Result<(), CliError> {
    let seed = cfg.seed()?;
    let val = load_split(ctx, &cfg, "val")?;
    if val.is_empty() {
        return Err(CliError::Usage("no validation data; run gen-data first".into()));
    }
    let b = cfg.baselines()?;
    let m: usize = cfg.get("evaluation.context_size").parse().map_err(|_| CliError::Config("bad evaluation.context_size".into()))?;
    let pairs: usize =
        cfg.get("evaluation.num_eval_pairs").parse().map_err(|_| CliError::Config("bad evaluation.num_eval_pairs".into()))?;
    let contexts: Vec<MeasurementSet> = val
        .iter()
        .enumerate()
        .map(|(i, (_, s))| Ok(split_episode(s, derive_seed(seed, EVAL_STREAM, 100 + i as u64), m.min(s.len() - 1), Some(1))?.context))
        .collect::<Result<_, CliError>>()?;
    let score = |est: &dyn Estimator| -> Result<f64, CliError> {
        let maes: Vec<Result<f64, crete_core::Error>> = val
            .par_iter()
            .zip(&contexts)
            .enumerate()
            .map(|(i, ((env, _), ctxt))| mae(est, env, ctxt, pairs, derive_seed(seed, EVAL_STREAM, 200 + i as u64)))
            .collect();
        Ok(mean(&maes.into_iter().collect::<Result<Vec<_>, _>>()?))
    };

    let mut report = String::from("parameter,value,val_mae\n");
    let mut best_k = (f64::INFINITY, b.knn_k);
    for &k in &b.knn_k_grid {
        let s = score(&KnnEstimator { k })?;
        writeln!(report, "knn_k,{k},{s}").unwrap();
        if s < best_k.0 {
            best_k = (s, k);
        }
    }
    cfg.set("baselines.knn_k", &best_k.1.to_string())?;
    eprintln!("knn: k = {} (val mae {:.3})", best_k.1, best_k.0);
    for (idx, kind) in RegularizerKind::ALL.into_iter().enumerate() {
        let mut best = (f64::INFINITY, b.lambda_grid[0]);
        for &lambda in &b.lambda_grid {
            let est = TomographicEstimator { spec: b.spec(kind), lambdas: vec![lambda], holdout_fraction: b.holdout_fraction, seed: 0 };
            let s = score(&est)?;
            writeln!(report, "lambda_{},{lambda},{s}", kind.name()).unwrap();
            if s < best.0 {
                best = (s, lambda);
            }
        }
        let key = ["baselines.lambda_l1", "baselines.lambda_tv", "baselines.lambda_tikhonov"][idx];
        cfg.set(key, &best.1.to_string())?;
        eprintln!("{}: lambda = {} (val mae {:.3})", kind.name(), best.1, best.0);
    }
    let mut artifacts = Artifacts::default();
    let results = cfg.get("paths.results_dir").to_string();
    artifacts.write(ctx, &format!("{results}/baseline_selection.csv"), report.as_bytes())?;
    let chosen = format!(
        "[baselines]\nknn_k = {}\nlambda_l1 = {}\nlambda_tv = {}\nlambda_tikhonov = {}\n",
        cfg.get("baselines.knn_k"),
        cfg.get("baselines.lambda_l1"),
        cfg.get("baselines.lambda_tv"),
        cfg.get("baselines.lambda_tikhonov")
    );
    artifacts.write(ctx, &format!("{results}/baselines.cfg"), chosen.as_bytes())?;
    write_manifest(ctx, "fit-baseline", &cfg, &artifacts)
}

fn test_seed(seed: u64) -> u64 {
    // Keeps room for `env_seed + i` without overflow.
    derive_seed(seed, TEST_STREAM, 0) >> 1
}

fn dump_features(ctx: &Context, cfg: &RunConfig, path: &Path) -> Result<(), CliError> {
    let exp = cfg.experiment(test_seed(cfg.seed()?), cfg.seed()?)?;
    let env = sample_environment(exp.env_seed, &exp.environment)?;
    let t = place_terminals(derive_seed(exp.env_seed, TERMINAL_STREAM, 0), &env.region, exp.num_terminals)?;
    let set = build_all_pairs(&env, &t, exp.noise_std, 0)?;
    let context = split_episode(&set, 0, exp.context_size.clamp(1, set.len() - 1), Some(1))?.context;
    let (a, b) = eval_pairs(&env, 1, 0)[0];
    let scaler = match load_model(ctx, cfg) {
        Ok(p) => p.scaler,
        Err(_) => GainScaler::identity(),
    };
    let f = canonicalize(QueryInput::new(a, b, &context), &scaler)?;
    let p = if path.is_absolute() { path.to_path_buf() } else { ctx.path(&path.display().to_string()) };
    write_file(&p, f.to_csv().as_bytes())
}

pub fn eval(ctx: &Context, mut cfg: RunConfig) -> Result<(), CliError> {
    let seed = cfg.seed()?;
    cfg.set("experiment.id", ExperimentId::MaeVsM.name())?;
    let m = cfg.get("evaluation.context_size").to_string();
    cfg.set("experiment.values", &m)?;
    if let Some(p) = &ctx.dump_features {
        dump_features(ctx, &cfg, p)?;
    }
    let estimators = build_estimators(ctx, &cfg, seed)?;
    let refs: Vec<&dyn Estimator> = estimators.iter().map(|e| e.as_ref()).collect();
    let result = run_experiment(&cfg.experiment(test_seed(seed), seed)?, &refs)?;
    let mut csv = String::from("estimator,mae,std\n");
    for (e, name) in result.estimators.iter().enumerate() {
        writeln!(csv, "{name},{},{}", result.metric[e][0], result.std[e][0]).unwrap();
        println!("{name:>16}  mae {:8.3} dB  std {:7.3}", result.metric[e][0], result.std[e][0]);
    }
    let mut artifacts = Artifacts::default();
    artifacts.write(ctx, &format!("{}/eval.csv", cfg.get("paths.results_dir")), csv.as_bytes())?;
    write_manifest(ctx, "eval", &cfg, &artifacts)
}

pub fn experiment(ctx: &Context, mut cfg: RunConfig) -> Result<(), CliError> {
    let seed = cfg.seed()?;
    if cfg.get("experiment.timestamp") == "auto" {
        let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        cfg.set("experiment.timestamp", &now.to_string())?;
    }
    let estimators = build_estimators(ctx, &cfg, seed)?;
    let refs: Vec<&dyn Estimator> = estimators.iter().map(|e| e.as_ref()).collect();
    let result = run_experiment(&cfg.experiment(test_seed(seed), seed)?, &refs)?;
    let name = result.file_name(cfg.get("experiment.timestamp"));
    let mut artifacts = Artifacts::default();
    let csv = result.to_csv();
    print!("{csv}");
    artifacts.write(ctx, &format!("{}/{name}", cfg.get("paths.results_dir")), csv.as_bytes())?;
    write_manifest(ctx, "experiment", &cfg, &artifacts)
}
