//! `dnr`: run the draft-and-refine loop on single samples or datasets.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use dnr_core::backends::mock::MockWorld;
use dnr_core::backends::remote::{remote_suite, DEFAULT_TIMEOUT};
use dnr_core::backends::scene::SceneSpec;
use dnr_core::experts::RenderStyle;
use dnr_core::export::{debug_render, histogram_png, scatter_png};
use dnr_core::harness::{
    run_benchmark, run_fingerprint, summarize, DatasetAdapter, RecordFileAdapter, ResultLog, RunMode,
    SceneDirAdapter,
};
use dnr_core::pipeline::{run_dnr, run_policy, SampleFailure, Stage};
use dnr_core::selector::{
    collect, cost_comparison, read_examples, train, write_examples, ExpertPolicy, OracleSelector,
    SelectorModel, TrainParams,
};
use dnr_core::{BackendSuite, DnRConfig, DnRResult, Image, Selection};

#[derive(Parser, Debug)]
#[command(name = "dnr", version, about = "Draft-and-refine evaluation for vision-language models")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// `mock`, or `remote[:HOST:PORT]` (endpoint falls back to DNR_BACKEND_ENDPOINT).
    #[arg(long, global = true, default_value = "mock")]
    backends: String,
    /// Overrides the endpoint of a `remote` backend.
    #[arg(long, global = true, env = "DNR_BACKEND_ENDPOINT", hide_env_values = true)]
    endpoint: Option<String>,
    /// Remote call timeout in seconds.
    #[arg(long, global = true, default_value_t = DEFAULT_TIMEOUT.as_secs())]
    timeout: u64,
    /// Directory of scene files that defines the mock world.
    #[arg(long, global = true)]
    scenes: Option<PathBuf>,
    /// Config file (TOML); flags below take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any config field, e.g. `--set masks=8 --set style.style=\"blur\"`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    masks: Option<usize>,
    #[arg(long, global = true, value_enum)]
    style: Option<StyleArg>,
    /// Worker threads for dataset commands; 0 uses one per core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Parent directory for run outputs.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StyleArg {
    Gray,
    Blur,
    Highlight,
}

impl StyleArg {
    fn style(self) -> RenderStyle {
        match self {
            StyleArg::Gray => RenderStyle::gray(),
            StyleArg::Blur => RenderStyle::blur(),
            StyleArg::Highlight => RenderStyle::highlight(),
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the loop on one image.
    Run {
        /// PNG file, or a scene file (TOML) rendered on the fly.
        #[arg(long)]
        image: PathBuf,
        /// Question; captioning when absent.
        #[arg(long)]
        question: Option<String>,
        /// Use a trained selector instead of trying every expert.
        #[arg(long)]
        selector: Option<PathBuf>,
        #[arg(long)]
        verify: bool,
    },
    /// Evaluate a dataset and write a result log and summary.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value = "exhaustive")]
        mode: ModeArg,
        #[arg(long)]
        selector: Option<PathBuf>,
        /// Re-verify the predicted branch's utilization in policy mode.
        #[arg(long)]
        verify: bool,
    },
    /// Label a dataset with exhaustive decisions for selector training.
    Collect {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Train the expert selector on collected examples.
    TrainSelector {
        #[arg(long)]
        examples: PathBuf,
        #[arg(long, default_value_t = TrainParams::default().h1)]
        h1: usize,
        #[arg(long, default_value_t = TrainParams::default().h2)]
        h2: usize,
        #[arg(long, default_value_t = TrainParams::default().learning_rate)]
        lr: f64,
        #[arg(long, default_value_t = TrainParams::default().epochs)]
        epochs: usize,
        #[arg(long, default_value_t = TrainParams::default().batch)]
        batch: usize,
        #[arg(long, default_value_t = TrainParams::default().validation_split)]
        validation_split: f64,
    },
    /// Compare exhaustive and selector-driven runs on the same data.
    CompareCost {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, conflicts_with = "oracle")]
        selector: Option<PathBuf>,
        /// Replay exhaustive decisions as the selector.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        verify: bool,
    },
    /// Write relevance overlay, masks and expert renderings as images.
    DebugRender {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        question: Option<String>,
        /// Styles to render each expert with.
        #[arg(long, value_enum, value_delimiter = ',', default_value = "gray,blur,highlight")]
        styles: Vec<StyleArg>,
    },
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Directory of scene files, or a record file (one JSON object per line).
    #[arg(long)]
    dataset: PathBuf,
    /// Add a captioning sample per scene.
    #[arg(long)]
    captions: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Exhaustive,
    Policy,
}

/// Error with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

const EXIT_USAGE: u8 = 1;
const EXIT_BACKEND: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        error: e.into(),
    }
}

fn backend(e: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: EXIT_BACKEND,
        error: e.into(),
    }
}

/// Library errors: backend failures exit 2, everything else 1.
fn classify(e: dnr_core::Error) -> Failure {
    match e {
        dnr_core::Error::Backend(_) => backend(e),
        other => usage(other),
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> anyhow::Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| anyhow!("empty key in `{key}`"))?;
    let mut t = table;
    for p in parts {
        t = t
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| anyhow!("`{p}` is not a table"))?;
    }
    t.insert(last.to_owned(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    // Accept bare words as strings: `--set mode=top_only`.
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()))
}

/// Defaults, then the config file, then `--set` overrides, then dedicated flags.
fn effective_config(c: &Common) -> CliResult<DnRConfig> {
    let mut table: toml::Table = match &c.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display())).map_err(usage)?;
            // Validate the file alone first so errors point at it.
            DnRConfig::from_toml(&text).with_context(|| format!("config {}", p.display())).map_err(usage)?;
            text.parse().map_err(|e| usage(anyhow!("config {}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for o in &c.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| usage(anyhow!("--set expects KEY=VALUE, got `{o}`")))?;
        set_path(&mut table, k.trim(), parse_value(v.trim())).map_err(usage)?;
    }
    let text = toml::to_string(&table).map_err(|e| usage(anyhow!(e)))?;
    let mut cfg = DnRConfig::from_toml(&text).context("config").map_err(usage)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(m) = c.masks {
        cfg.masks = m;
    }
    if let Some(s) = c.style {
        cfg.style = RenderStyle {
            style: s.style().style,
            ..cfg.style
        };
    }
    cfg.validate().context("config").map_err(usage)?;
    Ok(cfg)
}

fn echo_config(cfg: &DnRConfig, common: &Common) {
    eprintln!("# effective config (backends = {})", common.backends);
    for line in cfg.to_toml().lines() {
        eprintln!("#   {line}");
    }
}

fn load_scene_dir(dir: &Path) -> CliResult<Vec<SceneSpec>> {
    let a = SceneDirAdapter::open(dir).map_err(usage)?;
    Ok(a.scenes().iter().map(|s| (**s).clone()).collect())
}

/// Resolve `--backends`, given the scenes the mock world must know.
fn make_backends(c: &Common, scenes: Vec<SceneSpec>) -> CliResult<BackendSuite> {
    let spec = c.backends.as_str();
    let suite = if spec == "mock" {
        let mut all = scenes;
        if let Some(dir) = &c.scenes {
            all.extend(load_scene_dir(dir)?);
        }
        if all.is_empty() {
            return Err(usage(anyhow!("mock backends need scenes: pass --scenes or a scene-file image/dataset")));
        }
        Arc::new(MockWorld::new(all)).suite()
    } else if let Some(rest) = spec.strip_prefix("remote") {
        let endpoint = match (rest.strip_prefix(':'), &c.endpoint) {
            (_, Some(env)) => env.clone(),
            (Some(addr), None) if !addr.is_empty() => addr.to_owned(),
            _ => return Err(usage(anyhow!("remote backends need an endpoint: remote:HOST:PORT or DNR_BACKEND_ENDPOINT"))),
        };
        remote_suite(&endpoint, Duration::from_secs(c.timeout.max(1)))
            .with_context(|| format!("connecting to {endpoint}"))
            .map_err(backend)?
    } else {
        return Err(usage(anyhow!("unknown backends `{spec}` (expected mock or remote:HOST:PORT)")));
    };
    Ok(suite.gated())
}

fn is_scene_file(p: &Path) -> bool {
    p.extension().is_some_and(|e| e == "toml")
}

/// Load the image and, for scene files, the scene that defines it.
fn load_image(p: &Path) -> CliResult<(Image, Vec<SceneSpec>)> {
    if is_scene_file(p) {
        let s = SceneSpec::load(p).map_err(usage)?;
        Ok((s.render(), vec![s]))
    } else {
        let img = Image::open(p).map_err(usage)?;
        Ok((img, Vec::new()))
    }
}

enum Dataset {
    Scenes(SceneDirAdapter),
    Records(RecordFileAdapter),
}

impl Dataset {
    fn open(args: &DataArgs) -> CliResult<Self> {
        if args.dataset.is_dir() {
            Ok(Dataset::Scenes(SceneDirAdapter::open(&args.dataset).map_err(usage)?.with_captions(args.captions)))
        } else if args.dataset.is_file() {
            Ok(Dataset::Records(RecordFileAdapter::new(&args.dataset)))
        } else {
            Err(usage(anyhow!("dataset {} does not exist", args.dataset.display())))
        }
    }

    fn adapter(&self) -> &dyn DatasetAdapter {
        match self {
            Dataset::Scenes(a) => a,
            Dataset::Records(a) => a,
        }
    }

    fn scenes(&self) -> Vec<SceneSpec> {
        match self {
            Dataset::Scenes(a) => a.scenes().iter().map(|s| (**s).clone()).collect(),
            Dataset::Records(_) => Vec::new(),
        }
    }
}

fn run_dir(out: &Path, kind: &str, fingerprint: &str) -> CliResult<PathBuf> {
    let dir = out.join(format!("{kind}-{fingerprint}"));
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(usage)?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("output serializes");
    std::fs::write(path, text + "\n")
        .with_context(|| format!("writing {}", path.display()))
        .map_err(usage)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(usage)
}

fn dispatch(cli: Cli) -> CliResult<()> {
    let c = &cli.common;
    let cfg = effective_config(c)?;
    echo_config(&cfg, c);
    match &cli.command {
        Command::Run {
            image,
            question,
            selector,
            verify,
        } => cmd_run(c, &cfg, image, question.as_deref(), selector.as_deref(), *verify),
        Command::Evaluate {
            data,
            mode,
            selector,
            verify,
        } => cmd_evaluate(c, &cfg, data, *mode, selector.as_deref(), *verify),
        Command::Collect { data } => cmd_collect(c, &cfg, data),
        Command::TrainSelector {
            examples,
            h1,
            h2,
            lr,
            epochs,
            batch,
            validation_split,
        } => {
            let params = TrainParams {
                h1: *h1,
                h2: *h2,
                learning_rate: *lr,
                epochs: *epochs,
                batch: *batch,
                seed: cfg.seed,
                validation_split: *validation_split,
            };
            cmd_train(c, examples, params)
        }
        Command::CompareCost {
            data,
            selector,
            oracle,
            verify,
        } => cmd_compare(c, &cfg, data, selector.as_deref(), *oracle, *verify),
        Command::DebugRender {
            image,
            question,
            styles,
        } => cmd_debug_render(c, &cfg, image, question.as_deref(), styles),
    }
}

fn sample_failure(f: SampleFailure) -> Failure {
    let code = match f.stage {
        Stage::Draft if f.message.contains("empty") => EXIT_USAGE,
        _ => EXIT_BACKEND,
    };
    Failure {
        code,
        error: anyhow!("sample failed at {:?}: {}", f.stage, f.message),
    }
}

fn result_summary(r: &DnRResult, names: &[String]) -> String {
    let mut s = String::new();
    let name = |j: usize| names.get(j).cloned().unwrap_or_else(|| format!("expert{j}"));
    s += &format!("image      {}\n", r.image_id);
    s += &format!("prompt     {}\n", r.prompt);
    s += &format!("queries    {}\n", r.query_set.terms.join(", "));
    s += &format!("alpha      {:.6}\n", r.alpha);
    s += &format!("draft      {}\n", r.draft);
    if let Some(u) = &r.u_base {
        s += &format!("U_base     {:.6}\n", u.u_q);
    }
    for b in &r.per_expert {
        let u = b.report.as_ref().map_or_else(|| "-".to_owned(), |u| format!("{:.6}", u.u_q));
        let g = b.gain.map_or_else(|| "-".to_owned(), |g| format!("{g:+.6}"));
        s += &format!("expert     {:<16} answer={} U={} gain={}\n", b.name, b.refined_answer, u, g);
    }
    for f in &r.expert_failures {
        s += &format!("failed     {:<16} {}\n", f.name, f.error);
    }
    let sel = match r.selected {
        Selection::Draft => "draft".to_owned(),
        Selection::Expert(j) => name(j),
    };
    s += &format!("selected   {sel}\n");
    s += &format!("final      {}\n", r.final_answer);
    s += &format!("vlm calls  {}\n", r.trace.vlm_calls);
    s
}

fn cmd_run(
    c: &Common,
    cfg: &DnRConfig,
    image: &Path,
    question: Option<&str>,
    selector: Option<&Path>,
    verify: bool,
) -> CliResult<()> {
    let (img, scenes) = load_image(image)?;
    let mut backends = make_backends(c, scenes)?;
    if let Some(names) = &cfg.experts {
        backends = backends.select_experts(names).map_err(usage)?;
    }
    let result = match selector {
        Some(p) => {
            let model = SelectorModel::load(p).map_err(usage)?;
            run_policy(&img, question, cfg, &backends, &model, verify)
        }
        None => run_dnr(&img, question, cfg, &backends),
    }
    .map_err(sample_failure)?;
    print!("{}", result_summary(&result, &backends.expert_names()));
    let key = format!("{}\n{}\n{}", cfg.to_toml(), img.id(), question.unwrap_or(""));
    let dir = run_dir(&c.out, "run", &dnr_core::digest::fingerprint(key.as_bytes()))?;
    write_text(&dir.join("config.toml"), &cfg.to_toml())?;
    write_json(&dir.join("result.json"), &result)?;
    println!("output     {}", dir.display());
    Ok(())
}

fn load_policy(p: &Path) -> CliResult<SelectorModel> {
    SelectorModel::load(p).map_err(usage)
}

fn cmd_evaluate(
    c: &Common,
    cfg: &DnRConfig,
    data: &DataArgs,
    mode: ModeArg,
    selector: Option<&Path>,
    verify: bool,
) -> CliResult<()> {
    let ds = Dataset::open(data)?;
    let backends = make_backends(c, ds.scenes())?;
    let (mode, model) = match (mode, selector) {
        (ModeArg::Exhaustive, _) => (RunMode::Exhaustive, None),
        (ModeArg::Policy, Some(p)) => (RunMode::Policy { verify }, Some(load_policy(p)?)),
        (ModeArg::Policy, None) => return Err(usage(anyhow!("--mode policy requires --selector"))),
    };
    let selected = match &cfg.experts {
        Some(n) => backends.select_experts(n).map_err(usage)?,
        None => backends.clone(),
    };
    let fp = run_fingerprint(cfg, &selected, mode, ds.adapter().name());
    let dir = run_dir(&c.out, "evaluate", &fp)?;
    write_text(&dir.join("config.toml"), &cfg.to_toml())?;
    let log_path = dir.join("log.jsonl");
    let log = run_benchmark(
        ds.adapter(),
        cfg,
        &backends,
        mode,
        model.as_ref().map(|m| m as &dyn ExpertPolicy),
        c.threads,
        Some(&log_path),
    )
    .map_err(classify)?;
    let summary = summarize(&log);
    write_json(&dir.join("summary.json"), &summary)?;
    write_text(&dir.join("summary.txt"), &summary.to_table())?;
    write_plots(&dir, &log)?;
    print!("{}", summary.to_table());
    println!("output     {}", dir.display());
    partial_status(log.failures(), log.records.len())
}

fn write_plots(dir: &Path, log: &ResultLog) -> CliResult<()> {
    let u: Vec<f64> = log.records.iter().filter_map(|r| r.u_base).collect();
    histogram_png(&u, 10, 0.0, 1.0, dir.join("utilization_hist.png")).map_err(usage)?;
    let pts: Vec<(f64, f64)> = log
        .records
        .iter()
        .flat_map(|r| {
            let base = r.u_base;
            r.branches
                .iter()
                .filter_map(move |b| Some((base?, b.gain?)))
        })
        .collect();
    scatter_png(&pts, dir.join("gain_scatter.png")).map_err(usage)
}

fn partial_status(failed: usize, total: usize) -> CliResult<()> {
    match failed {
        0 => Ok(()),
        f if f == total => Err(backend(anyhow!("all {total} samples failed"))),
        f => Err(Failure {
            code: EXIT_PARTIAL,
            error: anyhow!("{f} of {total} samples failed"),
        }),
    }
}

/// Written next to collected examples so training knows the class names.
#[derive(Debug, Serialize, Deserialize)]
struct CollectMeta {
    expert_names: Vec<String>,
    config_fingerprint: String,
    examples: usize,
    failed: BTreeMap<String, String>,
}

const META_FILE: &str = "collect.json";

fn cmd_collect(c: &Common, cfg: &DnRConfig, data: &DataArgs) -> CliResult<()> {
    let ds = Dataset::open(data)?;
    let mut backends = make_backends(c, ds.scenes())?;
    if let Some(n) = &cfg.experts {
        backends = backends.select_experts(n).map_err(usage)?;
    }
    let samples = ds.adapter().samples().map_err(usage)?;
    let out = collect(&samples, cfg, &backends, c.threads);
    let fp = run_fingerprint(cfg, &backends, RunMode::Exhaustive, ds.adapter().name());
    let dir = run_dir(&c.out, "collect", &fp)?;
    let path = dir.join("examples.jsonl");
    write_examples(&path, &out.examples).map_err(usage)?;
    let meta = CollectMeta {
        expert_names: backends.expert_names(),
        config_fingerprint: cfg.fingerprint(),
        examples: out.examples.len(),
        failed: out.failed.iter().cloned().collect(),
    };
    write_json(&dir.join(META_FILE), &meta)?;
    let mut counts = BTreeMap::new();
    for e in &out.examples {
        *counts.entry(e.label).or_insert(0usize) += 1;
    }
    println!("examples   {} ({} failed)", out.examples.len(), out.failed.len());
    for (label, n) in counts {
        let name = match label {
            0 => "draft".to_owned(),
            l => meta.expert_names.get(l - 1).cloned().unwrap_or_default(),
        };
        println!("label      {name:<16} {n}");
    }
    println!("output     {}", path.display());
    partial_status(out.failed.len(), samples.len())
}

fn cmd_train(c: &Common, examples: &Path, params: TrainParams) -> CliResult<()> {
    let ex = read_examples(examples).map_err(usage)?;
    let meta_path = examples.with_file_name(META_FILE);
    let (names, config_fp) = if meta_path.exists() {
        let text = std::fs::read_to_string(&meta_path)
            .with_context(|| format!("reading {}", meta_path.display()))
            .map_err(usage)?;
        let m: CollectMeta = serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", meta_path.display()))
            .map_err(usage)?;
        (m.expert_names, m.config_fingerprint)
    } else {
        let k = ex.first().map_or(0, |e| e.gains.len());
        ((0..k).map(|j| format!("expert{j}")).collect(), String::new())
    };
    let (model, report) = train(&ex, &params, &names, &config_fp).map_err(usage)?;
    let dir = run_dir(&c.out, "selector", &model.fingerprint())?;
    model.save(dir.join("model.json")).map_err(usage)?;
    write_json(&dir.join("train_report.json"), &report)?;
    println!("examples   {} train / {} validation", report.train_size, report.validation_size);
    println!("loss       {:.4} -> {:.4}", report.initial_loss, report.epochs.last().map_or(f64::NAN, |e| e.train_loss));
    println!(
        "accuracy   train {:.4} validation {}",
        report.final_train_accuracy,
        report.final_validation_accuracy.map_or_else(|| "n/a".to_owned(), |a| format!("{a:.4}"))
    );
    println!("model      {}", model.fingerprint());
    println!("output     {}", dir.join("model.json").display());
    Ok(())
}

fn cmd_compare(
    c: &Common,
    cfg: &DnRConfig,
    data: &DataArgs,
    selector: Option<&Path>,
    oracle: bool,
    verify: bool,
) -> CliResult<()> {
    let ds = Dataset::open(data)?;
    let mut backends = make_backends(c, ds.scenes())?;
    if let Some(n) = &cfg.experts {
        backends = backends.select_experts(n).map_err(usage)?;
    }
    let samples = ds.adapter().samples().map_err(usage)?;
    let policy: Box<dyn ExpertPolicy> = match (selector, oracle) {
        (Some(p), _) => Box::new(load_policy(p)?),
        (None, true) => {
            let mut o = OracleSelector::default();
            for s in &samples {
                let img = s.load_image().map_err(usage)?;
                if let Ok(r) = run_dnr(&img, s.question.as_deref(), cfg, &backends) {
                    o.insert(&r.image_id, r.question.as_deref(), r.selected.class());
                }
            }
            Box::new(o)
        }
        (None, false) => return Err(usage(anyhow!("compare-cost needs --selector or --oracle"))),
    };
    let report = cost_comparison(&samples, cfg, &backends, policy.as_ref(), verify, c.threads);
    let fp = run_fingerprint(cfg, &backends, RunMode::Policy { verify }, ds.adapter().name());
    let dir = run_dir(&c.out, "compare", &fp)?;
    write_json(&dir.join("cost_report.json"), &report)?;
    let pp = |v: Option<f64>| v.map_or_else(|| "n/a".to_owned(), |v| format!("{v:+.2}"));
    println!("{:<16} {:>10} {:>10} {:>10} {:>12}", "dataset", "exh calls", "pol calls", "dPerf(pp)", "dCost(%)");
    println!(
        "{:<16} {:>10} {:>10} {:>10} {:>12.2}",
        ds.adapter().name(),
        report.exhaustive_calls,
        report.policy_calls,
        pp(report.delta_performance),
        report.delta_cost_pct
    );
    println!(
        "expert branches {} -> {} ({:.2}% fewer), {} disagreements, {} benign",
        report.exhaustive_expert_branches,
        report.policy_expert_branches,
        report.branch_reduction_pct,
        report.disagreements,
        report.benign_swaps
    );
    println!("output     {}", dir.display());
    partial_status(report.failed, report.samples)
}

fn cmd_debug_render(
    c: &Common,
    cfg: &DnRConfig,
    image: &Path,
    question: Option<&str>,
    styles: &[StyleArg],
) -> CliResult<()> {
    let (img, scenes) = load_image(image)?;
    let mut backends = make_backends(c, scenes)?;
    if let Some(n) = &cfg.experts {
        backends = backends.select_experts(n).map_err(usage)?;
    }
    if styles.is_empty() {
        bail_usage("at least one style is required")?;
    }
    let styles: Vec<RenderStyle> = styles
        .iter()
        .map(|s| RenderStyle {
            style: s.style().style,
            ..cfg.style.clone()
        })
        .collect();
    let key = format!("{}\n{}\n{}", cfg.to_toml(), img.id(), question.unwrap_or(""));
    let dir = c.out.join(format!("render-{}", dnr_core::digest::fingerprint(key.as_bytes())));
    let files = debug_render(&img, question, cfg, &backends, &styles, &dir).map_err(classify)?;
    for f in &files {
        println!("{}", f.display());
    }
    println!("wrote      {} images to {}", files.len(), dir.display());
    Ok(())
}

fn bail_usage(msg: &str) -> CliResult<()> {
    let r: anyhow::Result<()> = (|| bail!("{msg}"))();
    r.map_err(usage)
}
