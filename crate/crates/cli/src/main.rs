mod manifest;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use nbharness::corpus::{scan_corpus, HoldoutList, ScanOptions};
use nbharness::curation::{curation_pipeline, default_workers, CurationConfig, Problem, DEFAULT_CURATION_TIMEOUT_S};
use nbharness::eval::{evaluate_all, load_notebook, CandidateSet, EvalOptions, EvaluateConfig, ProblemOutcome, DEFAULT_EVAL_TIMEOUT_S};
use nbharness::executor::{Executor, ShimExecutor, SHIM_ENV};
use nbharness::genprovider::{http_generate, load_candidates, oracle_provider, save_candidates, GenerationConfig};
use nbharness::infill::{emit_infill_examples, eval_prompt_record, ControlCode, EvalPrompt, InfillConfig};
use nbharness::metrics::{aggregate_pass_at_k, correlation_report};
use nbharness::corpus::dedup_key;

use manifest::Recorder;

#[derive(Parser)]
#[command(name = "nbharness", version, about = "Notebook corpus curation, cell infilling and execution-based evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Walk a corpus and report notebook statistics
    Scan(ScanArgs),
    /// Extract solution/grading problems from executable notebooks
    Curate(CurateArgs),
    /// Write one cell-infilling example per cell
    EmitInfill(EmitInfillArgs),
    /// Write evaluation prompts for curated problems
    EmitPrompts(EmitPromptsArgs),
    /// Sample candidates from an HTTP generation endpoint
    Generate(GenerateArgs),
    /// Produce ground-truth (or deliberately broken) candidates
    Oracle(OracleArgs),
    /// Execute candidates against grading cells and score pass@k
    Evaluate(EvaluateArgs),
    /// Aggregate evaluation results
    Report(ReportArgs),
    /// Summarize a problems file
    Stats(StatsArgs),
}

#[derive(Args, Serialize)]
struct CorpusArgs {
    /// Corpus root directory
    #[arg(long)]
    root: PathBuf,
    /// File of repo ids to exclude, one per line
    #[arg(long)]
    holdout: Option<PathBuf>,
    /// Keep only notebooks with at least one code cell and a third Markdown cells
    #[arg(long)]
    markdown_focused: bool,
    /// Path components under the root that form a repo id
    #[arg(long, default_value_t = 2)]
    repo_depth: usize,
}

impl CorpusArgs {
    fn options(&self) -> Result<ScanOptions> {
        let holdout = match &self.holdout {
            Some(p) => HoldoutList::from_path(p)?,
            None => HoldoutList::default(),
        };
        Ok(ScanOptions {
            holdout,
            markdown_focused: self.markdown_focused,
            repo_depth: self.repo_depth,
        })
    }

    fn inputs(&self) -> Vec<&Path> {
        let mut v = vec![self.root.as_path()];
        v.extend(self.holdout.as_deref());
        v
    }
}

#[derive(Args, Serialize)]
struct ScanArgs {
    #[command(flatten)]
    #[serde(flatten)]
    corpus: CorpusArgs,
    /// Write statistics JSON here instead of standard output
    #[arg(long)]
    stats_out: Option<PathBuf>,
    /// Write a JSONL listing of the scanned notebooks
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct ShimArgs {
    /// Shim command line; defaults to $NBHARNESS_SHIM, then `nbshim` on PATH
    #[arg(long)]
    shim_cmd: Option<String>,
    /// Parallel workers (default: CPU count, at most 8)
    #[arg(long)]
    workers: Option<usize>,
}

impl ShimArgs {
    fn workers(&self) -> usize {
        self.workers.unwrap_or_else(default_workers).max(1)
    }

    fn executor(&self) -> Result<ShimExecutor> {
        if let Some(cmd) = &self.shim_cmd {
            return ShimExecutor::from_command_line(cmd).context("empty --shim-cmd");
        }
        if let Some(e) = ShimExecutor::from_env() {
            return Ok(e);
        }
        let on_path = std::env::var_os("PATH")
            .map(|p| std::env::split_paths(&p).any(|d| d.join("nbshim").is_file()))
            .unwrap_or(false);
        if on_path {
            return Ok(ShimExecutor::new("nbshim", vec![]));
        }
        bail!("no execution shim: pass --shim-cmd, set {SHIM_ENV}, or put nbshim on PATH")
    }
}

#[derive(Args, Serialize)]
struct CurateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    out: PathBuf,
    /// Skip the execution check (problems are not certified executable)
    #[arg(long)]
    no_exec: bool,
    /// Per-cell timeout for the execution check
    #[arg(long, default_value_t = DEFAULT_CURATION_TIMEOUT_S)]
    timeout_s: f64,
    /// Write the CurationReport JSON here
    #[arg(long)]
    report: Option<PathBuf>,
    /// Treat scaffolds that still raise NotImplementedError as problems
    #[arg(long)]
    keep_unsolved: bool,
    #[command(flatten)]
    #[serde(flatten)]
    shim: ShimArgs,
}

#[derive(Args, Serialize)]
struct InfillArgs {
    /// Number of preceding context cells
    #[arg(long, default_value_t = 3)]
    c: usize,
    /// Append the following cell after the fill tag
    #[arg(long)]
    lookahead: bool,
    /// Extra control token after the fill tag: function, class or import
    #[arg(long, value_parser = parse_control)]
    #[serde(skip)]
    control: Option<ControlCode>,
}

fn parse_control(s: &str) -> Result<ControlCode, String> {
    ControlCode::from_token(&format!("<{s}>")).ok_or_else(|| format!("unknown control code {s}"))
}

impl InfillArgs {
    fn config(&self) -> InfillConfig {
        InfillConfig {
            context_cells: self.c,
            lookahead: self.lookahead,
            extra_control: self.control,
        }
    }
}

#[derive(Args, Serialize)]
struct EmitInfillArgs {
    #[command(flatten)]
    #[serde(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    #[serde(flatten)]
    infill: InfillArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct EmitPromptsArgs {
    #[arg(long)]
    problems: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    infill: InfillArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct GenerateArgs {
    #[arg(long)]
    prompts: PathBuf,
    #[arg(long)]
    endpoint: String,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0.8)]
    temperature: f64,
    #[arg(long, default_value_t = 0.95)]
    top_p: f64,
    #[arg(long, default_value_t = 512)]
    max_new_tokens: usize,
    /// Environment variable holding a bearer token
    #[arg(long)]
    auth_env: Option<String>,
    /// Concurrent requests
    #[arg(long, default_value_t = 4)]
    workers: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct OracleArgs {
    #[arg(long)]
    problems: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Break every solution with an unclosed bracket
    #[arg(long)]
    mutate: bool,
}

#[derive(Args, Serialize)]
struct EvaluateArgs {
    #[arg(long)]
    problems: PathBuf,
    #[arg(long)]
    candidates: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated k values
    #[arg(long, value_delimiter = ',', default_value = "1")]
    k: Vec<usize>,
    /// Per-cell timeout
    #[arg(long, default_value_t = DEFAULT_EVAL_TIMEOUT_S)]
    timeout_s: f64,
    #[arg(long)]
    strip_trailing_asserts: bool,
    /// Record whether the highest mean-log-probability candidate passes
    #[arg(long)]
    rank_logprob: bool,
    /// Run in the notebook directory, one candidate at a time
    #[arg(long)]
    in_place_serial: bool,
    /// Include per-candidate execution reports in the results
    #[arg(long)]
    keep_reports: bool,
    #[command(flatten)]
    #[serde(flatten)]
    shim: ShimArgs,
}

#[derive(Args, Serialize)]
struct ReportArgs {
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// k values to aggregate (default: those present in every result)
    #[arg(long, value_delimiter = ',')]
    k: Vec<usize>,
    /// Include the pass-rate versus BLEU proxy curve and rank correlation
    #[arg(long)]
    bleu: bool,
}

#[derive(Args, Serialize)]
struct StatsArgs {
    #[arg(long)]
    problems: PathBuf,
    /// Write JSON here instead of standard output
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).with_context(|| format!("{}:{}: malformed record", path.display(), i + 1))?,
        );
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

#[derive(Serialize)]
struct NotebookEntry<'a> {
    path: &'a Path,
    repo_id: &'a str,
    dedup_key: String,
    cells: usize,
}

fn scan(a: &ScanArgs) -> Result<()> {
    let run = Recorder::start(a, &a.corpus.inputs())?;
    let scan = scan_corpus(&a.corpus.root, &a.corpus.options()?)?;
    if let Some(out) = &a.out {
        write_jsonl(
            out,
            scan.notebooks.iter().map(|nb| NotebookEntry {
                path: &nb.source_path,
                repo_id: &nb.repo_id,
                dedup_key: dedup_key(nb).to_hex(),
                cells: nb.cells.len(),
            }),
        )?;
        run.finish(out)?;
    }
    match &a.stats_out {
        Some(p) => {
            write_json(p, &scan.stats)?;
            run.finish(p)?;
        }
        None => print_json(&scan.stats)?,
    }
    Ok(())
}

fn curate(a: &CurateArgs) -> Result<()> {
    let run = Recorder::start(a, &a.corpus.inputs())?;
    let scan = scan_corpus(&a.corpus.root, &a.corpus.options()?)?;
    let cfg = CurationConfig {
        cell_timeout_s: a.timeout_s,
        require_execution: !a.no_exec,
        ground_truth_available: !a.keep_unsolved,
        workers: a.shim.workers(),
        ..Default::default()
    };
    let executor = if a.no_exec { None } else { Some(a.shim.executor()?) };
    let (problems, report) = curation_pipeline(
        &scan.notebooks,
        &cfg,
        executor.as_ref().map(|e| e as &dyn Executor),
    )?;
    write_jsonl(&a.out, &problems)?;
    run.finish(&a.out)?;
    if let Some(p) = &a.report {
        write_json(p, &report)?;
        run.finish(p)?;
    }
    eprintln!(
        "curated {} problems from {} of {} notebooks",
        report.problems, report.notebooks_with_problems, report.notebooks_seen
    );
    Ok(())
}

fn emit_infill(a: &EmitInfillArgs) -> Result<()> {
    let run = Recorder::start(a, &a.corpus.inputs())?;
    let scan = scan_corpus(&a.corpus.root, &a.corpus.options()?)?;
    let cfg = a.infill.config();
    let examples: Vec<_> = scan
        .unique()
        .into_iter()
        .flat_map(|nb| emit_infill_examples(nb, &cfg))
        .collect();
    write_jsonl(&a.out, &examples)?;
    run.finish(&a.out)?;
    eprintln!("wrote {} examples", examples.len());
    Ok(())
}

/// Loads each referenced notebook once.
fn notebooks_for(problems: &[Problem]) -> Result<BTreeMap<PathBuf, nbharness::Notebook>> {
    let mut m = BTreeMap::new();
    for p in problems {
        if !m.contains_key(&p.notebook_ref) {
            m.insert(p.notebook_ref.clone(), load_notebook(&p.notebook_ref)?);
        }
    }
    Ok(m)
}

fn emit_prompts(a: &EmitPromptsArgs) -> Result<()> {
    let run = Recorder::start(a, &[a.problems.as_path()])?;
    let problems: Vec<Problem> = read_jsonl(&a.problems)?;
    let nbs = notebooks_for(&problems)?;
    let cfg = a.infill.config();
    let prompts = problems
        .iter()
        .map(|p| eval_prompt_record(p, &nbs[&p.notebook_ref], &cfg))
        .collect::<Result<Vec<_>, _>>()?;
    write_jsonl(&a.out, &prompts)?;
    run.finish(&a.out)
}

fn generate(a: &GenerateArgs) -> Result<()> {
    let run = Recorder::start(a, &[a.prompts.as_path()])?;
    let prompts: Vec<EvalPrompt> = read_jsonl(&a.prompts)?;
    let cfg = GenerationConfig {
        n: a.n,
        temperature: a.temperature,
        top_p: a.top_p,
        max_new_tokens: a.max_new_tokens,
        endpoint: a.endpoint.clone(),
        auth_env: a.auth_env.clone(),
        ..Default::default()
    };
    if cfg.n == 0 || cfg.temperature <= 0.0 || !(cfg.top_p > 0.0 && cfg.top_p <= 1.0) {
        bail!("need n >= 1, temperature > 0 and top_p in (0, 1]");
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(a.workers.max(1)).build()?;
    let sets = pool.install(|| {
        prompts
            .par_iter()
            .map(|p| {
                http_generate(&p.prompt, &cfg)
                    .map(|candidates| CandidateSet {
                        problem_id: p.problem_id.clone(),
                        candidates,
                    })
                    .with_context(|| format!("generating for {}", p.problem_id))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    save_candidates(BufWriter::new(File::create(&a.out)?), &sets)?;
    run.finish(&a.out)
}

fn oracle(a: &OracleArgs) -> Result<()> {
    let run = Recorder::start(a, &[a.problems.as_path()])?;
    let problems: Vec<Problem> = read_jsonl(&a.problems)?;
    let nbs = notebooks_for(&problems)?;
    let sets = problems
        .iter()
        .map(|p| oracle_provider(p, &nbs[&p.notebook_ref], a.mutate))
        .collect::<Result<Vec<_>, _>>()?;
    save_candidates(BufWriter::new(File::create(&a.out)?), &sets)?;
    run.finish(&a.out)
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let run = Recorder::start(a, &[a.problems.as_path(), a.candidates.as_path()])?;
    let problems: Vec<Problem> = read_jsonl(&a.problems)?;
    let candidates = load_candidates(BufReader::new(
        File::open(&a.candidates).with_context(|| format!("opening {}", a.candidates.display()))?,
    ))?;
    let known: BTreeSet<&str> = problems.iter().map(|p| p.problem_id.as_str()).collect();
    if let Some(cs) = candidates.iter().find(|cs| !known.contains(cs.problem_id.as_str())) {
        bail!("candidates reference unknown problem {}", cs.problem_id);
    }
    let executor = a.shim.executor()?;
    let cfg = EvaluateConfig {
        ks: a.k.clone(),
        workers: a.shim.workers(),
        options: EvalOptions {
            timeout_s: a.timeout_s,
            in_place: a.in_place_serial,
            strip_trailing_asserts: a.strip_trailing_asserts,
        },
        rank_logprob: a.rank_logprob,
        keep_reports: a.keep_reports,
    };
    let outcomes = evaluate_all(&problems, &candidates, &executor, &cfg)?;
    write_jsonl(&a.out, &outcomes)?;
    run.finish(&a.out)?;
    let passed: usize = outcomes.iter().map(|o| o.c).sum();
    let total: usize = outcomes.iter().map(|o| o.n).sum();
    eprintln!("{passed}/{total} candidates passed across {} problems", outcomes.len());
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct BleuSection {
    /// Smoothed BLEU-4, a proxy for CodeBLEU.
    metric: String,
    spearman: Option<f64>,
    curve: Vec<nbharness::metrics::CurvePoint<f64>>,
    problem_ids: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct LogprobSection {
    problems: usize,
    pass_rate: f64,
}

#[derive(Serialize, Deserialize)]
struct Report {
    problems: usize,
    pass_at: BTreeMap<usize, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    logprob_pick: Option<LogprobSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bleu: Option<BleuSection>,
}

fn report(a: &ReportArgs) -> Result<()> {
    let run = Recorder::start(a, &[a.results.as_path()])?;
    let results: Vec<ProblemOutcome> = read_jsonl(&a.results)?;
    let ks: Vec<usize> = if a.k.is_empty() {
        let mut common: Option<BTreeSet<usize>> = None;
        for r in &results {
            let keys: BTreeSet<usize> = r.pass_at.keys().copied().collect();
            common = Some(match common {
                Some(c) => c.intersection(&keys).copied().collect(),
                None => keys,
            });
        }
        common.unwrap_or_default().into_iter().collect()
    } else {
        a.k.clone()
    };
    let table = aggregate_pass_at_k(
        &results.iter().map(ProblemOutcome::to_pass_at_k).collect::<Vec<_>>(),
        &ks,
    )?;
    let picks: Vec<bool> = results.iter().filter_map(|r| r.logprob_pick.as_ref().map(|p| p.passed)).collect();
    let logprob_pick = (!picks.is_empty()).then(|| LogprobSection {
        problems: picks.len(),
        pass_rate: picks.iter().filter(|&&p| p).count() as f64 / picks.len() as f64,
    });
    let bleu = if a.bleu {
        let rates: Vec<f64> = results.iter().map(ProblemOutcome::pass_rate).collect();
        let bleus: Vec<f64> = results.iter().map(|r| r.mean_bleu).collect();
        let corr = correlation_report(&rates, &bleus)?;
        Some(BleuSection {
            metric: "smoothed BLEU-4 (CodeBLEU proxy)".into(),
            spearman: corr.spearman,
            problem_ids: corr.curve.iter().map(|pt| results[pt.index].problem_id.clone()).collect(),
            curve: corr.curve,
        })
    } else {
        None
    };
    let rep = Report {
        problems: table.problems,
        pass_at: table.pass_at,
        logprob_pick,
        bleu,
    };
    write_json(&a.out, &rep)?;
    run.finish(&a.out)?;
    for (k, v) in &rep.pass_at {
        eprintln!("pass@{k} = {v:.4}");
    }
    Ok(())
}

#[derive(Serialize)]
struct ProblemStats {
    problems: usize,
    notebooks: usize,
    total_asserts: usize,
    data_dependent_problems: usize,
    data_files: usize,
    mean_context_cells: f64,
}

fn stats(a: &StatsArgs) -> Result<()> {
    let run = Recorder::start(a, &[a.problems.as_path()])?;
    let problems: Vec<Problem> = read_jsonl(&a.problems)?;
    let notebooks: BTreeSet<&Path> = problems.iter().map(|p| p.notebook_ref.as_path()).collect();
    let grading: BTreeMap<(&Path, usize), usize> = problems
        .iter()
        .map(|p| ((p.notebook_ref.as_path(), p.grading_cell_index), p.assert_count))
        .collect();
    let data_files: BTreeSet<(&Path, &str)> = problems
        .iter()
        .flat_map(|p| p.data_files.iter().map(move |f| (p.notebook_ref.parent().unwrap_or(Path::new("")), f.as_str())))
        .collect();
    let s = ProblemStats {
        problems: problems.len(),
        notebooks: notebooks.len(),
        total_asserts: grading.values().sum(),
        data_dependent_problems: problems.iter().filter(|p| p.data_dependent).count(),
        data_files: data_files.len(),
        mean_context_cells: if problems.is_empty() {
            0.0
        } else {
            problems.iter().map(|p| p.context_cell_indices.len()).sum::<usize>() as f64 / problems.len() as f64
        },
    };
    match &a.out {
        Some(p) => {
            write_json(p, &s)?;
            run.finish(p)
        }
        None => print_json(&s),
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Scan(a) => scan(a),
        Command::Curate(a) => curate(a),
        Command::EmitInfill(a) => emit_infill(a),
        Command::EmitPrompts(a) => emit_prompts(a),
        Command::Generate(a) => generate(a),
        Command::Oracle(a) => oracle(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Report(a) => report(a),
        Command::Stats(a) => stats(a),
    }
}

fn main() -> ExitCode {
    // clap exits with 0 for --help/--version and 2 for usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
