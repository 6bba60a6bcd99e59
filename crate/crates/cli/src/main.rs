use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};

use samga::checkpoint::{load_checkpoint_for, save_checkpoint};
use samga::config::{normalize_k_list, RunConfig, SplitKind};
use samga::data::{generate_synthetic, load_dataset, make_split, save_dataset, ConceptPartition, Dataset, Split, SplitMode};
use samga::eval::ablation::{layerwise_from_models, run_ablation, Variant};
use samga::eval::report::{
    write_ablation_csv, write_category_csv, write_concept_csv, write_layerwise_csv, write_routing_csv, Metrics,
    RunReport,
};
use samga::eval::similarity::within_between;
use samga::eval::{category_similarity_matrix, concept_similarity_matrix, evaluate_retrieval, routing_report};
use samga::gradcheck::{gradcheck, CheckStatus, GradcheckConfig};
use samga::trainer::{model_dims, train};
use samga::Error;

mod lock;

const BEST_CKPT: &str = "best.ckpt";
const LAST_CKPT: &str = "last.ckpt";

#[derive(Parser)]
#[command(name = "samga", version, about = "Subject-aware multi-granularity EEG-to-image retrieval")]
struct Cli {
    /// Print a single JSON object instead of key=value lines.
    #[arg(long, global = true)]
    json: bool,
    /// Log progress to stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.lr=0.01` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Copy, Clone, ValueEnum)]
enum SplitArg {
    Intra,
    Loso,
    Pooled,
}

#[derive(Copy, Clone, ValueEnum)]
enum AnalysisKind {
    Routing,
    Similarity,
    Layerwise,
}

#[derive(Copy, Clone, ValueEnum)]
enum ObjectiveArg {
    Mixed,
    Retrieval,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset and write checkpoints plus report.json.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        split_mode: Option<SplitArg>,
        #[arg(long)]
        subject: Option<usize>,
    },
    /// Evaluate a trained run on its test split.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated k values.
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
    },
    /// Train ablation variants over several seeds and write ablation.csv.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated variant names.
        #[arg(long, value_delimiter = ',', required = true)]
        variants: Vec<String>,
        /// Comma-separated training seeds.
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
        seeds: Vec<u64>,
        #[arg(long, value_enum)]
        split_mode: Option<SplitArg>,
        #[arg(long)]
        subject: Option<usize>,
    },
    /// Export analysis CSVs for a run (or an ablation directory for layerwise).
    Analyze {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        report: AnalysisKind,
        /// Subtract the off-diagonal mean from the concept matrix.
        #[arg(long)]
        center: bool,
        /// Use the fine-grained category map for layerwise accuracy.
        #[arg(long)]
        fine: bool,
    },
    /// Check analytic gradients against central differences.
    Gradcheck {
        /// JSON gradcheck configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "both")]
        objective: ObjectiveArg,
        #[arg(long)]
        freeze_shared: bool,
        /// Test hook: corrupt the analytic gradient of this block.
        #[arg(long)]
        corrupt: Option<String>,
    },
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config { .. } | Error::UnknownVariant { .. } | Error::Split(_) | Error::Dimension { .. } => 2,
            Error::Numeric(_) => 4,
            Error::Missing(_) => 5,
            Error::Format { .. }
            | Error::Truncated { .. }
            | Error::NonFinite { .. }
            | Error::Checkpoint { .. }
            | Error::Io { .. }
            | Error::Json(_) => 3,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
    }
}

type CmdResult = Result<(Map<String, Value>, u8), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::GenData { cfg, out } => cmd_gen_data(&cfg, &out),
        Command::Train {
            cfg,
            data,
            out,
            split_mode,
            subject,
        } => cmd_train(&cfg, &data, &out, split_mode, subject),
        Command::Eval { run, data, k } => cmd_eval(&run, &data, k),
        Command::Ablate {
            cfg,
            data,
            out,
            variants,
            seeds,
            split_mode,
            subject,
        } => cmd_ablate(&cfg, &data, &out, &variants, &seeds, split_mode, subject),
        Command::Analyze {
            run,
            data,
            report,
            center,
            fine,
        } => cmd_analyze(&run, &data, report, center, fine),
        Command::Gradcheck {
            config,
            objective,
            freeze_shared,
            corrupt,
        } => cmd_gradcheck(config.as_deref(), objective, freeze_shared, corrupt),
    };
    match result {
        Ok((out, code)) => {
            emit(&out, cli.json);
            ExitCode::from(code)
        }
        Err(f) => {
            if cli.json {
                println!("{}", json!({ "error": f.message, "exit_code": f.code }));
            }
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn emit(out: &Map<String, Value>, as_json: bool) {
    let mut text = String::new();
    if as_json {
        text = format!("{}\n", Value::Object(out.clone()));
    } else {
        for (k, v) in out {
            match v {
                Value::String(s) => text += &format!("{k}={s}\n"),
                Value::Array(items) if items.iter().all(|x| x.is_object()) => {
                    for item in items {
                        let fields: Vec<String> = item
                            .as_object()
                            .expect("object")
                            .iter()
                            .map(|(a, b)| match b {
                                Value::String(s) => format!("{a}={s}"),
                                other => format!("{a}={other}"),
                            })
                            .collect();
                        text += &format!("{k}: {}\n", fields.join(" "));
                    }
                }
                other => text += &format!("{k}={other}\n"),
            }
        }
    }
    // A closed pipe (e.g. `| head`) is not an error worth reporting.
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn resolve_config(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| fail(2, format!("override `{o}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn apply_split_flags(cfg: &mut RunConfig, split: Option<SplitArg>, subject: Option<usize>) {
    if let Some(s) = split {
        cfg.train.split_mode = match s {
            SplitArg::Intra => SplitKind::Intra,
            SplitArg::Loso => SplitKind::Loso,
            SplitArg::Pooled => SplitKind::Pooled,
        };
    }
    if subject.is_some() {
        cfg.train.subject = subject;
    }
}

fn split_label(mode: SplitMode) -> String {
    match mode {
        SplitMode::IntraSubject(s) => format!("intra:{s}"),
        SplitMode::LeaveOneSubjectOut(s) => format!("loso:{s}"),
        SplitMode::Pooled => "pooled".into(),
    }
}

fn metrics_fields(out: &mut Map<String, Value>, m: &Metrics) {
    out.insert("n_way".into(), json!(m.n_way));
    out.insert("chance_top1".into(), json!(m.chance_top1));
    for (k, v) in &m.topk {
        out.insert(format!("top{k}"), json!(v));
    }
}

fn cmd_gen_data(args: &ConfigArgs, out: &Path) -> CmdResult {
    let cfg = resolve_config(args)?;
    cfg.data.validate()?;
    let dataset = generate_synthetic(&cfg.data, cfg.seed)?;
    let _lock = lock::RunLock::acquire(out)?;
    let manifest = save_dataset(&dataset, out)?;
    let partition = ConceptPartition::from_labels(&dataset)?;
    let mut o = Map::new();
    o.insert("out".into(), json!(out.display().to_string()));
    o.insert("trials".into(), json!(manifest.trials));
    o.insert("layers".into(), json!(manifest.num_layers()));
    o.insert("subjects".into(), json!(manifest.subjects));
    o.insert("concepts".into(), json!(manifest.concepts));
    o.insert("test_concepts".into(), json!(partition.test.len()));
    o.insert("n_way".into(), json!(partition.test.len() * manifest.images_per_concept));
    o.insert("seed".into(), json!(cfg.seed));
    Ok((o, 0))
}

fn load_data(dir: &Path) -> Result<(Dataset, ConceptPartition), Failure> {
    let dataset = load_dataset(dir)?;
    let partition = ConceptPartition::from_labels(&dataset)?;
    Ok((dataset, partition))
}

fn cmd_train(args: &ConfigArgs, data: &Path, out: &Path, split: Option<SplitArg>, subject: Option<usize>) -> CmdResult {
    let mut cfg = resolve_config(args)?;
    apply_split_flags(&mut cfg, split, subject);
    cfg.validate()?;
    let mode = cfg.split_mode()?;
    let (dataset, partition) = load_data(data)?;
    let plan = make_split(&dataset, mode, &partition)?;
    let _lock = lock::RunLock::acquire(out)?;
    let outcome = train(&dataset, plan.clone(), &cfg)?;
    save_checkpoint(&outcome.best, &out.join(BEST_CKPT))?;
    save_checkpoint(&outcome.last, &out.join(LAST_CKPT))?;

    let res = evaluate_retrieval(&outcome.best.model, &dataset, &plan.test, &cfg.eval.k_list)?;
    let mut report = RunReport::new(&cfg, mode, Some(data.display().to_string()), &outcome);
    report.metrics = Some(Metrics::from(&res));
    report.routing = Some(routing_report(&outcome.best.model, &dataset.manifest));
    report.save(out)?;

    let mut o = Map::new();
    o.insert("run".into(), json!(out.display().to_string()));
    o.insert("split".into(), json!(split_label(mode)));
    o.insert("epochs_run".into(), json!(outcome.progress.history.len()));
    o.insert("best_epoch".into(), json!(outcome.progress.best_epoch));
    o.insert("stopped_early".into(), json!(outcome.progress.stopped_early));
    metrics_fields(&mut o, &Metrics::from(&res));
    Ok((o, 0))
}

fn load_run(run: &Path, dataset: &Dataset) -> Result<(RunReport, samga::checkpoint::ModelState), Failure> {
    let report = RunReport::load(run)?;
    let state = load_checkpoint_for(&run.join(BEST_CKPT), &model_dims(dataset))?;
    Ok((report, state))
}

fn cmd_eval(run: &Path, data: &Path, k: Option<Vec<usize>>) -> CmdResult {
    let (dataset, partition) = load_data(data)?;
    let (mut report, state) = load_run(run, &dataset)?;
    let k_list = normalize_k_list(&k.unwrap_or_else(|| report.config.eval.k_list.clone()));
    if k_list.is_empty() || k_list.contains(&0) {
        return Err(fail(2, "invalid config `eval.k_list`: k values must be positive"));
    }
    let plan = make_split(&dataset, report.split, &partition)?;
    let res = evaluate_retrieval(&state.model, &dataset, &plan.test, &k_list)?;
    let metrics = Metrics::from(&res);
    let _lock = lock::RunLock::acquire(run)?;
    report.metrics = Some(metrics.clone());
    report.save(run)?;
    let mut o = Map::new();
    o.insert("run".into(), json!(run.display().to_string()));
    o.insert("split".into(), json!(split_label(report.split)));
    o.insert("k_list".into(), json!(k_list));
    metrics_fields(&mut o, &metrics);
    Ok((o, 0))
}

fn parse_variants(names: &[String]) -> Result<Vec<Variant>, Failure> {
    names
        .iter()
        .filter(|n| !n.trim().is_empty())
        .map(|n| Variant::parse(n).map_err(Failure::from))
        .collect()
}

fn cmd_ablate(
    args: &ConfigArgs,
    data: &Path,
    out: &Path,
    variants: &[String],
    seeds: &[u64],
    split: Option<SplitArg>,
    subject: Option<usize>,
) -> CmdResult {
    let variants = parse_variants(variants)?;
    if seeds.is_empty() {
        return Err(fail(2, "invalid config `--seeds`: at least one seed is required"));
    }
    let mut cfg = resolve_config(args)?;
    apply_split_flags(&mut cfg, split, subject);
    cfg.validate()?;
    let mode = cfg.split_mode()?;
    let (dataset, partition) = load_data(data)?;
    let plan = make_split(&dataset, mode, &partition)?;
    let _lock = lock::RunLock::acquire(out)?;
    let rows = run_ablation(&dataset, &plan, &cfg, &variants, seeds, |r| {
        let dir = out.join("runs").join(r.variant.slug()).join(format!("seed_{}", r.seed));
        save_checkpoint(&r.outcome.best, &dir.join(BEST_CKPT))?;
        let mut rep = RunReport::new(&r.config, mode, Some(data.display().to_string()), &r.outcome);
        let res = evaluate_retrieval(&r.outcome.best.model, &dataset, &plan.test, &cfg.eval.k_list)?;
        rep.metrics = Some(Metrics::from(&res));
        rep.save(&dir)
    })?;
    write_ablation_csv(&out.join("ablation.csv"), &rows)?;
    let mut o = Map::new();
    o.insert("out".into(), json!(out.join("ablation.csv").display().to_string()));
    o.insert("split".into(), json!(split_label(mode)));
    o.insert(
        "row".into(),
        Value::Array(
            rows.iter()
                .map(|r| {
                    json!({
                        "variant": r.variant,
                        "detail": r.detail.clone().unwrap_or_default(),
                        "top1_mean": r.top1_mean,
                        "top1_sd": r.top1_sd,
                        "top5_mean": r.top5_mean,
                        "top5_sd": r.top5_sd,
                    })
                })
                .collect(),
        ),
    );
    Ok((o, 0))
}

/// Trials of every test concept across all subjects.
fn all_test_trials(dataset: &Dataset) -> Vec<usize> {
    (0..dataset.trials.len())
        .filter(|&t| dataset.trials[t].split == Split::Test)
        .collect()
}

fn cmd_analyze(run: &Path, data: &Path, kind: AnalysisKind, center: bool, fine: bool) -> CmdResult {
    let (dataset, partition) = load_data(data)?;
    let mut o = Map::new();
    match kind {
        AnalysisKind::Routing => {
            let (_, state) = load_run(run, &dataset)?;
            let r = routing_report(&state.model, &dataset.manifest);
            let path = run.join("routing_deviation.csv");
            write_routing_csv(&path, &r)?;
            o.insert("out".into(), json!(path.display().to_string()));
            o.insert("learned_argmax".into(), json!(r.learned_argmax));
            o.insert("planted_argmax".into(), json!(r.planted_argmax));
            o.insert("argmax_match".into(), json!(r.argmax_match));
            o.insert("mean_spearman".into(), r.mean_spearman.map_or(json!("n/a"), |v| json!(v)));
            let max_abs = r.deviation.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
            o.insert("max_abs_deviation".into(), json!(max_abs));
        }
        AnalysisKind::Similarity => {
            let (_, state) = load_run(run, &dataset)?;
            let trials = all_test_trials(&dataset);
            let concept = concept_similarity_matrix(&state.model, &dataset, &trials, center, true)?;
            let category = category_similarity_matrix(&concept)?;
            let cpath = run.join("concept_sim.csv");
            let gpath = run.join("category_sim.csv");
            write_concept_csv(&cpath, &concept)?;
            write_category_csv(&gpath, &category)?;
            let (within, between) = within_between(&concept);
            o.insert("out".into(), json!(cpath.display().to_string()));
            o.insert("category_out".into(), json!(gpath.display().to_string()));
            o.insert("concepts".into(), json!(concept.concepts.len()));
            o.insert("centered".into(), json!(center));
            o.insert("within_category".into(), json!(within));
            o.insert("between_category".into(), json!(between));
        }
        AnalysisKind::Layerwise => {
            let k_layers = dataset.manifest.num_layers();
            let mut models = Vec::new();
            let mut mode = None;
            for k in 0..k_layers {
                let dir = run.join("runs").join(Variant::SingleLayer(k).slug());
                let mut seeds: Vec<PathBuf> = match fs::read_dir(&dir) {
                    Ok(entries) => entries
                        .filter_map(|e| e.ok().map(|e| e.path()))
                        .filter(|p| p.join(BEST_CKPT).exists())
                        .collect(),
                    Err(_) => Vec::new(),
                };
                if seeds.is_empty() {
                    return Err(fail(
                        5,
                        format!(
                            "missing prerequisite: no single-layer run for layer index {k} under {}; run `samga ablate --variants single_best` first",
                            run.display()
                        ),
                    ));
                }
                seeds.sort();
                let mut per_seed = Vec::new();
                for s in seeds {
                    let (rep, state) = load_run(&s, &dataset)?;
                    mode = Some(rep.split);
                    per_seed.push(state.model);
                }
                models.push(per_seed);
            }
            let mode = mode.expect("at least one layer");
            let plan = make_split(&dataset, mode, &partition)?;
            let categories: &BTreeMap<usize, usize> = if fine {
                dataset
                    .manifest
                    .fine_categories
                    .as_ref()
                    .ok_or_else(|| fail(5, "missing prerequisite: dataset has no fine category map"))?
            } else {
                &dataset.manifest.categories
            };
            let table = layerwise_from_models(&models, &dataset, &plan.test, categories)?;
            let path = run.join("layerwise_acc.csv");
            write_layerwise_csv(&path, &table)?;
            o.insert("out".into(), json!(path.display().to_string()));
            o.insert("categories".into(), json!(table.categories.len()));
            o.insert("best_layer".into(), json!(table.best_layer()));
        }
    }
    Ok((o, 0))
}

fn cmd_gradcheck(config: Option<&Path>, objective: ObjectiveArg, freeze: bool, corrupt: Option<String>) -> CmdResult {
    let mut base = match config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| fail(3, format!("{}: {e}", p.display())))?;
            serde_json::from_str::<GradcheckConfig>(&text)
                .map_err(|e| fail(2, format!("invalid config `{}`: {e}", p.display())))?
        }
        None => GradcheckConfig::default(),
    };
    base.freeze_shared |= freeze;
    if corrupt.is_some() {
        base.corrupt_block = corrupt;
    }
    let lambdas = match objective {
        ObjectiveArg::Mixed => vec![Some(base.lambda.unwrap_or(0.4))],
        ObjectiveArg::Retrieval => vec![None],
        ObjectiveArg::Both => vec![Some(base.lambda.unwrap_or(0.4)), None],
    };
    let mut o = Map::new();
    let mut all_pass = true;
    let mut rows = Vec::new();
    for lambda in lambdas {
        let report = gradcheck(&GradcheckConfig { lambda, ..base.clone() })?;
        all_pass &= report.passed();
        for b in &report.blocks {
            let status = match b.status {
                CheckStatus::Pass => "PASS",
                CheckStatus::Fail => "FAIL",
                CheckStatus::Skipped => "SKIPPED",
            };
            rows.push(json!({
                "objective": report.objective,
                "block": b.name,
                "max_rel_error": b.max_rel_error,
                "status": status,
            }));
        }
    }
    o.insert("block".into(), Value::Array(rows));
    o.insert("tolerance".into(), json!(base.tolerance));
    o.insert("result".into(), json!(if all_pass { "PASS" } else { "FAIL" }));
    Ok((o, if all_pass { 0 } else { 1 }))
}
