//! `unibrain` command line: one subcommand per pipeline stage.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use unibrain::ard::{decompose_record, load_lexicon, Lexicon};
use unibrain::config::{QueryMode, TrainConfig};
use unibrain::corpus::{load_prepared, prepare_case, read_corpus, PreparedCase};
use unibrain::cvp::{grounding_map, write_slice_pngs, DiseaseQuerySet};
use unibrain::error::Error;
use unibrain::io::{write_atomic, write_json, write_jsonl};
use unibrain::model::Model;
use unibrain::pipeline::{argmax_voxel, evaluate_model, grounding_score};
use unibrain::synth::{generate_corpus, SyntheticSpec};
use unibrain::trainer::{train, write_outputs};

const DEFAULT_SEED: u64 = 42;
const THREADS_ENV: &str = "UNIBRAIN_THREADS";

#[derive(Parser)]
#[command(name = "unibrain", version, about = "Brain MRI report decomposition, alignment training and diagnosis")]
struct Cli {
    /// Seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON config: training config for `train`, synthetic spec for `synth`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Structure a report corpus into modality-wise and global reports.
    Decompose(DecomposeArgs),
    /// Generate a synthetic corpus with planted lesions.
    Synth(SynthArgs),
    /// Train a model and write its checkpoint and loss CSV.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Predict per-query probabilities for one case.
    Infer(InferArgs),
    /// Write the grounding heatmap of one disease for one case.
    Ground(GroundArgs),
    /// Run the gradient and oracle suites.
    Selfcheck(SelfcheckArgs),
}

#[derive(Args)]
struct DecomposeArgs {
    /// Lexicon JSON (built-in lexicon if absent).
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Corpus JSONL.
    #[arg(long = "in")]
    input: PathBuf,
    /// Structured output JSONL.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of cases.
    #[arg(long, default_value_t = 250)]
    cases: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Training corpus JSONL.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output directory for `checkpoint/` and `loss.csv`.
    #[arg(long)]
    out: PathBuf,
    /// Disease query JSON (lexicon classes and descriptions if absent).
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long, value_enum)]
    query_mode: Option<QueryModeArg>,
    #[arg(long)]
    no_modality_align: bool,
    #[arg(long)]
    no_global_align: bool,
    #[arg(long)]
    no_cvp: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Evaluation corpus JSONL.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output directory for `metrics.json` and `metrics.txt`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Corpus JSONL holding the case.
    #[arg(long = "in")]
    input: PathBuf,
    /// Case id.
    #[arg(long)]
    case: String,
    /// Query JSON of any length (training queries if absent).
    #[arg(long)]
    queries: Option<PathBuf>,
    /// Probabilities JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GroundArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    case: String,
    /// Disease name from the query set.
    #[arg(long)]
    disease: String,
    #[arg(long)]
    queries: Option<PathBuf>,
    /// Output directory for `heatmap.ubv` and slice PNGs.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelfcheckArgs {
    /// Optional JSON report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum QueryModeArg {
    Description,
    Name,
}

enum CliError {
    Usage(String),
    Core(Error),
    Failed(&'static str, String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn code(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "USAGE_ERROR",
            CliError::Core(e) => e.code(),
            CliError::Failed(code, _) => code,
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(m) | CliError::Failed(_, m) => m.clone(),
            CliError::Core(e) => e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

/// Output paths created by this run, removed again if it fails.
#[derive(Default)]
struct Outputs {
    created: Vec<PathBuf>,
}

impl Outputs {
    fn claim(&mut self, path: &Path) -> PathBuf {
        if !path.exists() {
            self.created.push(path.to_path_buf());
        }
        path.to_path_buf()
    }

    fn remove(&self) {
        for p in self.created.iter().rev() {
            let _ = if p.is_dir() {
                std::fs::remove_dir_all(p)
            } else {
                std::fs::remove_file(p)
            };
        }
    }
}

fn echo(seed: u64, config: serde_json::Value) {
    println!("seed: {seed}");
    println!("config: {config}");
}

fn threads() -> CliResult<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")).into()),
        },
    }
}

fn lexicon(path: &Option<PathBuf>) -> CliResult<Lexicon> {
    Ok(match path {
        Some(p) => load_lexicon(p)?,
        None => Lexicon::builtin(),
    })
}

fn find_case(model: &Model, lex: &Lexicon, corpus: &Path, id: &str) -> CliResult<PreparedCase> {
    let base = corpus.parent().unwrap_or(Path::new("."));
    let case = read_corpus(corpus)?
        .into_iter()
        .find(|c| c.id == id)
        .ok_or_else(|| CliError::Failed("CASE_NOT_FOUND", format!("no case {id:?} in {}", corpus.display())))?;
    prepare_case(&case, base, lex, &model.config.modalities, model.config.input_dims)?
        .ok_or_else(|| Error::Validation(format!("case {id:?} lacks a configured modality volume")).into())
}

fn query_set(model: &Model, path: &Option<PathBuf>) -> CliResult<DiseaseQuerySet> {
    Ok(match path {
        Some(p) => DiseaseQuerySet::load(p)?,
        None => model.queries.clone(),
    })
}

fn decompose(seed: u64, a: &DecomposeArgs, out: &mut Outputs) -> CliResult<()> {
    echo(seed, json!({"command": "decompose", "lexicon": a.lexicon, "in": a.input, "out": a.out}));
    let lex = lexicon(&a.lexicon)?;
    let records = read_corpus(&a.input)?
        .iter()
        .map(|c| decompose_record(&c.report(), &lex, lex.modalities()))
        .collect::<Result<Vec<_>, _>>()?;
    write_jsonl(&out.claim(&a.out), &records)?;
    println!("decomposed {} reports into {}", records.len(), a.out.display());
    Ok(())
}

fn synth(seed: u64, config: &Option<PathBuf>, a: &SynthArgs, out: &mut Outputs) -> CliResult<()> {
    let spec = match config {
        Some(p) => SyntheticSpec::load(p)?,
        None => SyntheticSpec::default(),
    };
    echo(seed, json!({"command": "synth", "cases": a.cases, "out": a.out, "spec": spec}));
    if a.cases == 0 {
        return Err(Error::EmptyDataset.into());
    }
    let summary = generate_corpus(a.cases, seed, &spec, &out.claim(&a.out))?;
    println!("summary: {}", serde_json::to_string(&summary).map_err(Error::from)?);
    Ok(())
}

fn train_cmd(seed: u64, config: &Option<PathBuf>, a: &TrainArgs, out: &mut Outputs) -> CliResult<()> {
    let mut cfg = match config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    let lex = lexicon(&a.lexicon)?;
    let queries = match &a.queries {
        Some(p) => DiseaseQuerySet::load(p)?,
        None => DiseaseQuerySet::from_lexicon(&lex)?,
    };
    cfg.seed = seed;
    cfg.num_classes = queries.len();
    cfg.toggles.modality_align &= !a.no_modality_align;
    cfg.toggles.global_align &= !a.no_global_align;
    cfg.toggles.cvp &= !a.no_cvp;
    if let Some(m) = a.query_mode {
        cfg.toggles.query_mode = match m {
            QueryModeArg::Description => QueryMode::Description,
            QueryModeArg::Name => QueryMode::Name,
        };
    }
    cfg.validate()?;
    echo(seed, json!({"command": "train", "in": a.input, "out": a.out, "queries": queries.names(), "train": cfg}));
    let cases = load_prepared(&a.input, &lex, &cfg.modalities, cfg.input_dims)?;
    println!("training on {} cases", cases.len());
    let output = train(&cases, cfg, queries)?;
    out.claim(&a.out);
    let (ckpt, csv) = (a.out.join("checkpoint"), a.out.join("loss.csv"));
    write_outputs(&output, &out.claim(&ckpt), &out.claim(&csv))?;
    if let Some(last) = output.log.last() {
        println!("final epoch {} L={:.6}", last.epoch, last.total);
    }
    println!("wrote {} and {}", ckpt.display(), csv.display());
    Ok(())
}

fn eval_cmd(seed: u64, a: &EvalArgs, out: &mut Outputs) -> CliResult<()> {
    let model = Model::load(&a.checkpoint)?;
    echo(seed, json!({"command": "eval", "checkpoint": a.checkpoint, "in": a.input, "out": a.out, "train": model.config}));
    let lex = lexicon(&a.lexicon)?;
    let cases = load_prepared(&a.input, &lex, &model.config.modalities, model.config.input_dims)?;
    let result = evaluate_model(&model, &cases)?;
    let grounding = if model.config.toggles.cvp {
        let g = grounding_score(&model, &cases)?;
        Some(json!({"evaluated": g.evaluated, "hits": g.hits, "rate": g.rate()}))
    } else {
        None
    };
    let table = result.table();
    out.claim(&a.out);
    let report = json!({"cases": cases.len(), "per_class": result.per_class, "summary": result.summary, "grounding": grounding});
    write_json(&out.claim(&a.out.join("metrics.json")), &report)?;
    write_atomic(&out.claim(&a.out.join("metrics.txt")), table.as_bytes())?;
    print!("{table}");
    if let Some(g) = grounding {
        println!("grounding: {g}");
    }
    Ok(())
}

fn infer_cmd(seed: u64, a: &InferArgs, out: &mut Outputs) -> CliResult<()> {
    let model = Model::load(&a.checkpoint)?;
    let queries = query_set(&model, &a.queries)?;
    echo(seed, json!({"command": "infer", "checkpoint": a.checkpoint, "case": a.case, "queries": queries.names(), "out": a.out}));
    let lex = lexicon(&a.lexicon)?;
    let case = find_case(&model, &lex, &a.input, &a.case)?;
    let pred = model.predict(&case.volumes, &queries)?;
    let rows: Vec<_> = queries
        .names()
        .into_iter()
        .zip(&pred.probabilities)
        .map(|(name, p)| json!({"name": name, "probability": p}))
        .collect();
    let report = json!({"case": case.id, "probabilities": rows});
    write_json(&out.claim(&a.out), &report)?;
    println!("{report}");
    Ok(())
}

fn ground_cmd(seed: u64, a: &GroundArgs, out: &mut Outputs) -> CliResult<()> {
    let model = Model::load(&a.checkpoint)?;
    let queries = query_set(&model, &a.queries)?;
    echo(seed, json!({"command": "ground", "checkpoint": a.checkpoint, "case": a.case, "disease": a.disease, "out": a.out}));
    let c = queries
        .index_of(&a.disease)
        .ok_or_else(|| Error::Validation(format!("disease {:?} not in query set {:?}", a.disease, queries.names())))?;
    let lex = lexicon(&a.lexicon)?;
    let case = find_case(&model, &lex, &a.input, &a.case)?;
    let pred = model.predict(&case.volumes, &queries)?;
    if pred.attention.is_empty() {
        return Err(Error::Config("grounding needs the cvp head".into()).into());
    }
    let map = grounding_map(&pred.attention, pred.grid, c, model.config.input_dims)?;
    out.claim(&a.out);
    map.write(&out.claim(&a.out.join("heatmap.ubv")))?;
    let pngs = write_slice_pngs(&map, &a.out, "heatmap")?;
    println!(
        "probability {:.6}, argmax voxel {:?}, {} slices in {}",
        pred.probabilities[c],
        argmax_voxel(&map),
        pngs.len(),
        a.out.display()
    );
    Ok(())
}

fn selfcheck_cmd(seed: u64, a: &SelfcheckArgs, out: &mut Outputs) -> CliResult<()> {
    echo(seed, json!({"command": "selfcheck", "out": a.out}));
    let results = unibrain::selfcheck::run(seed);
    for r in &results {
        println!("{} {} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    if let Some(p) = &a.out {
        write_json(&out.claim(p), &results)?;
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(CliError::Failed("SELFCHECK_FAILED", format!("{failed} of {} checks failed", results.len())));
    }
    println!("all {} checks passed", results.len());
    Ok(())
}

fn run(cli: Cli, out: &mut Outputs) -> CliResult<()> {
    let seed = cli.seed.unwrap_or(DEFAULT_SEED);
    println!("threads: {} (compute is single-threaded)", threads()?);
    match &cli.command {
        Command::Decompose(a) => decompose(seed, a, out),
        Command::Synth(a) => synth(seed, &cli.config, a, out),
        Command::Train(a) => train_cmd(seed, &cli.config, a, out),
        Command::Eval(a) => eval_cmd(seed, a, out),
        Command::Infer(a) => infer_cmd(seed, a, out),
        Command::Ground(a) => ground_cmd(seed, a, out),
        Command::Selfcheck(a) => selfcheck_cmd(seed, a, out),
    }
}

fn fail(e: &CliError) -> ExitCode {
    let msg = serde_json::to_string(&e.message()).unwrap_or_default();
    eprintln!("error code={} message={msg}", e.code());
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            return fail(&CliError::Usage(first));
        }
    };
    let mut out = Outputs::default();
    match run(cli, &mut out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            out.remove();
            fail(&e)
        }
    }
}
