//! Execution-based evaluation of candidate solutions.
//!
//! Each candidate is evaluated with teacher forcing: the notebook is copied
//! with only the problem's solution cell replaced, every code cell up to and
//! including the grading cell runs in a fresh shim session, and the candidate
//! passes iff all of them finish with status ok.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curation::{is_assertion, Problem};
use crate::executor::{copy_dir, CellStatus, ExecCell, ExecRequest, Executor, ExecutorError};
use crate::lexer;
use crate::metrics::{bleu_proxy, pass_at_k, MetricsError};
use crate::notebook::{parse_notebook, Notebook, NotebookError};

pub const DEFAULT_EVAL_TIMEOUT_S: f64 = 60.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cell index {index} out of range for notebook with {len} cells")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("executor crashed: {0}")]
    ExecutorCrash(#[from] ExecutorError),
    #[error("candidate {0} has no mean_token_logprob")]
    MissingLogprob(usize),
    #[error("candidate set for {0} is empty")]
    EmptyCandidateSet(String),
    #[error("loading notebook {path}: {source}")]
    Notebook { path: PathBuf, source: NotebookError },
    #[error("preparing scratch directory: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("failed to build worker pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_token_logprob: Option<f64>,
}

impl Candidate {
    pub fn new(text: impl Into<String>) -> Self {
        Candidate {
            text: text.into(),
            mean_token_logprob: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub problem_id: String,
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub cell_index: usize,
    pub status: CellStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_message: Option<String>,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionReport {
    pub per_cell: Vec<CellOutcome>,
    pub passed: bool,
}

impl ExecutionReport {
    pub fn first_failure(&self) -> Option<&CellOutcome> {
        self.per_cell.iter().find(|c| c.status != CellStatus::Ok)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub timeout_s: f64,
    /// Run inside the notebook's own directory instead of a scratch copy.
    /// Callers must not evaluate in parallel in this mode.
    pub in_place: bool,
    pub strip_trailing_asserts: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            timeout_s: DEFAULT_EVAL_TIMEOUT_S,
            in_place: false,
            strip_trailing_asserts: false,
        }
    }
}

pub fn load_notebook(path: &Path) -> Result<Notebook, EvalError> {
    let bytes = std::fs::read(path).map_err(|e| EvalError::Notebook {
        path: path.to_path_buf(),
        source: NotebookError::MalformedJson(e.to_string()),
    })?;
    parse_notebook(&bytes, path, "").map_err(|source| EvalError::Notebook {
        path: path.to_path_buf(),
        source,
    })
}

/// Copy of `nb` with only the problem's solution cell replaced.
pub fn substitute_solution(nb: &Notebook, p: &Problem, candidate: &str) -> Result<Notebook, EvalError> {
    let len = nb.cells.len();
    for index in [p.solution_cell_index, p.grading_cell_index] {
        if index >= len {
            return Err(EvalError::IndexOutOfRange { index, len });
        }
    }
    let mut out = nb.clone();
    out.cells[p.solution_cell_index].source = candidate.to_string();
    Ok(out)
}

/// Drops top-level assertion statements that come after the candidate's last
/// other statement. Asserts inside blocks and asserts followed by other code
/// are kept.
pub fn strip_trailing_asserts(candidate: &str) -> String {
    let stmts = lexer::statements(candidate);
    let keep = stmts
        .iter()
        .rposition(|s| s.indent > 0 || !is_assertion(s));
    let first_trailing = match keep {
        Some(i) if i + 1 == stmts.len() => return candidate.to_string(),
        Some(i) => &stmts[i + 1],
        None if stmts.is_empty() => return candidate.to_string(),
        None => &stmts[0],
    };
    candidate[..first_trailing.start()]
        .trim_end()
        .trim_end_matches(';')
        .trim_end()
        .to_string()
}

/// Index of the candidate with the highest mean token log-probability;
/// ties go to the lowest index.
pub fn rank_by_logprob(cs: &CandidateSet) -> Result<usize, EvalError> {
    if cs.candidates.is_empty() {
        return Err(EvalError::EmptyCandidateSet(cs.problem_id.clone()));
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in cs.candidates.iter().enumerate() {
        let lp = c.mean_token_logprob.ok_or(EvalError::MissingLogprob(i))?;
        if best.is_none_or(|(_, b)| lp > b) {
            best = Some((i, lp));
        }
    }
    Ok(best.map_or(0, |(i, _)| i))
}

fn absolute(dir: &Path) -> PathBuf {
    std::fs::canonicalize(dir).unwrap_or_else(|_| dir.to_path_buf())
}

/// Runs one candidate. A timeout or exception is a failed report; only a
/// broken shim is an error.
pub fn evaluate_candidate(
    nb: &Notebook,
    p: &Problem,
    candidate: &str,
    executor: &dyn Executor,
    opts: &EvalOptions,
) -> Result<ExecutionReport, EvalError> {
    let text = if opts.strip_trailing_asserts {
        strip_trailing_asserts(candidate)
    } else {
        candidate.to_string()
    };
    let forced = substitute_solution(nb, p, &text)?;

    let scratch;
    let workdir = if opts.in_place {
        absolute(nb.directory())
    } else {
        scratch = tempfile::tempdir()?;
        copy_dir(nb.directory(), scratch.path())?;
        scratch.path().to_path_buf()
    };

    let req = ExecRequest {
        workdir,
        cells: forced.cells[..=p.grading_cell_index]
            .iter()
            .filter(|c| c.is_code())
            .map(|c| ExecCell {
                id: c.index.to_string(),
                source: c.source.clone(),
            })
            .collect(),
        timeout_per_cell_s: opts.timeout_s,
        stop_after_id: Some(p.grading_cell_index.to_string()),
    };
    let resp = executor.run(&req)?;
    let passed = resp.all_ok(&req);
    let per_cell = resp
        .results
        .into_iter()
        .map(|r| CellOutcome {
            cell_index: r.id.parse().unwrap_or(usize::MAX),
            status: r.status,
            error_type: r.error_type,
            error_message: r.error_message,
            duration_s: r.duration_s,
        })
        .collect();
    Ok(ExecutionReport { per_cell, passed })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogprobPick {
    pub index: usize,
    pub passed: bool,
}

/// One line of the results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemOutcome {
    pub problem_id: String,
    pub n: usize,
    pub c: usize,
    pub pass_at: BTreeMap<usize, f64>,
    /// Mean smoothed-BLEU-4 proxy of the candidates against the ground truth.
    pub mean_bleu: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprob_pick: Option<LogprobPick>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reports: Option<Vec<ExecutionReport>>,
}

impl ProblemOutcome {
    pub fn pass_rate(&self) -> f64 {
        self.c as f64 / self.n as f64
    }

    pub fn to_pass_at_k(&self) -> crate::metrics::PassAtKResult<f64> {
        crate::metrics::PassAtKResult {
            problem_id: self.problem_id.clone(),
            n: self.n,
            c: self.c,
            pass_at: self.pass_at.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateConfig {
    pub ks: Vec<usize>,
    pub workers: usize,
    pub options: EvalOptions,
    pub rank_logprob: bool,
    pub keep_reports: bool,
}

fn outcome(
    p: &Problem,
    nb: &Notebook,
    cs: &CandidateSet,
    reports: Vec<ExecutionReport>,
    cfg: &EvaluateConfig,
) -> Result<ProblemOutcome, EvalError> {
    let n = cs.candidates.len();
    let c = reports.iter().filter(|r| r.passed).count();
    let pass_at = cfg
        .ks
        .iter()
        .map(|&k| pass_at_k::<f64>(n, c, k).map(|v| (k, v)))
        .collect::<Result<_, _>>()?;
    let truth = &nb.cells[p.solution_cell_index].source;
    let mean_bleu = cs
        .candidates
        .iter()
        .map(|cand| bleu_proxy::<f64>(&cand.text, truth))
        .sum::<f64>()
        / n as f64;
    let logprob_pick = if cfg.rank_logprob {
        let index = rank_by_logprob(cs)?;
        Some(LogprobPick {
            index,
            passed: reports[index].passed,
        })
    } else {
        None
    };
    Ok(ProblemOutcome {
        problem_id: p.problem_id.clone(),
        n,
        c,
        pass_at,
        mean_bleu,
        logprob_pick,
        reports: cfg.keep_reports.then_some(reports),
    })
}

/// Evaluates every problem that has a candidate set. Candidate runs fan out
/// over `cfg.workers` threads (one when running in place); results come back
/// in problem order.
pub fn evaluate_all(
    problems: &[Problem],
    candidates: &[CandidateSet],
    executor: &dyn Executor,
    cfg: &EvaluateConfig,
) -> Result<Vec<ProblemOutcome>, EvalError> {
    let by_id: HashMap<&str, &CandidateSet> =
        candidates.iter().map(|cs| (cs.problem_id.as_str(), cs)).collect();
    let mut notebooks: HashMap<&Path, Notebook> = HashMap::new();
    let mut work = Vec::new();
    for p in problems {
        let Some(cs) = by_id.get(p.problem_id.as_str()) else {
            continue;
        };
        if cs.candidates.is_empty() {
            return Err(EvalError::EmptyCandidateSet(p.problem_id.clone()));
        }
        if let Some(&k) = cfg.ks.iter().find(|&&k| k < 1 || k > cs.candidates.len()) {
            return Err(MetricsError::InvalidArgs {
                n: cs.candidates.len(),
                c: 0,
                k,
            }
            .into());
        }
        if !notebooks.contains_key(p.notebook_ref.as_path()) {
            notebooks.insert(&p.notebook_ref, load_notebook(&p.notebook_ref)?);
        }
        work.push((p, *cs));
    }

    let jobs: Vec<(usize, usize)> = work
        .iter()
        .enumerate()
        .flat_map(|(w, (_, cs))| (0..cs.candidates.len()).map(move |i| (w, i)))
        .collect();
    let threads = if cfg.options.in_place { 1 } else { cfg.workers.max(1) };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
    let reports: Vec<ExecutionReport> = pool.install(|| {
        jobs.par_iter()
            .map(|&(w, i)| {
                let (p, cs) = work[w];
                let nb = &notebooks[p.notebook_ref.as_path()];
                evaluate_candidate(nb, p, &cs.candidates[i].text, executor, &cfg.options)
            })
            .collect::<Result<_, _>>()
    })?;

    let mut reports = reports.into_iter();
    work.iter()
        .map(|&(p, cs)| {
            let mine: Vec<_> = reports.by_ref().take(cs.candidates.len()).collect();
            outcome(p, &notebooks[p.notebook_ref.as_path()], cs, mine, cfg)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::executor::{CellResult, ExecResponse};
    use crate::notebook::CellKind;
    use std::collections::BTreeSet;
    use std::sync::Mutex;

    fn problem(sol: usize, grade: usize) -> Problem {
        Problem {
            problem_id: "p".into(),
            notebook_ref: PathBuf::from("nb.ipynb"),
            context_cell_indices: (0..sol).collect(),
            solution_cell_index: sol,
            grading_cell_index: grade,
            defined_names: BTreeSet::from(["x".to_string()]),
            assert_count: 1,
            referenced_names: BTreeSet::from(["x".to_string()]),
            data_dependent: false,
            data_files: BTreeSet::new(),
        }
    }

    fn five_cells() -> Notebook {
        Notebook::from_cells([
            (CellKind::Markdown, "prompt"),
            (CellKind::Code, "import math"),
            (CellKind::Code, "x = 2"),
            (CellKind::Code, "assert x == 2"),
            (CellKind::Code, "print('after')"),
        ])
    }

    fn changed_cells(a: &Notebook, b: &Notebook) -> Vec<usize> {
        a.cells
            .iter()
            .zip(&b.cells)
            .filter(|(x, y)| x != y)
            .map(|(x, _)| x.index)
            .collect()
    }

    #[test]
    fn substitution_touches_one_cell() {
        let nb = five_cells();
        let p = problem(2, 3);
        let a = substitute_solution(&nb, &p, "x=1").unwrap();
        assert_eq!(changed_cells(&nb, &a), vec![2]);
        assert_eq!(substitute_solution(&nb, &p, "x = 2").unwrap(), nb);
        let b = substitute_solution(&nb, &p, "x = 3").unwrap();
        assert_eq!(changed_cells(&a, &b), vec![2]);
        assert!(matches!(
            substitute_solution(&nb, &problem(2, 9), "x"),
            Err(EvalError::IndexOutOfRange { index: 9, len: 5 })
        ));
    }

    #[test]
    fn strip_rules() {
        assert_eq!(strip_trailing_asserts("def f(x): return x\nassert f(1)==2"), "def f(x): return x");
        assert_eq!(strip_trailing_asserts("assert pre\ndef f(): pass"), "assert pre\ndef f(): pass");
        assert_eq!(strip_trailing_asserts("y = 1\nassert y\nassert_equal(y, 1)\n"), "y = 1");
        assert_eq!(strip_trailing_asserts("def f(x):\n    assert x\n"), "def f(x):\n    assert x\n");
        assert_eq!(strip_trailing_asserts("y = 1; assert y"), "y = 1");
        assert_eq!(strip_trailing_asserts("assert a\nassert b"), "");
        assert_eq!(strip_trailing_asserts(""), "");
    }

    #[test]
    fn logprob_ranking() {
        let set = |lps: &[Option<f64>]| CandidateSet {
            problem_id: "p".into(),
            candidates: lps
                .iter()
                .map(|&lp| Candidate {
                    text: String::new(),
                    mean_token_logprob: lp,
                })
                .collect(),
        };
        assert_eq!(rank_by_logprob(&set(&[Some(-1.0), Some(-0.5), Some(-2.0)])).unwrap(), 1);
        assert_eq!(rank_by_logprob(&set(&[Some(-3.0)])).unwrap(), 0);
        assert_eq!(rank_by_logprob(&set(&[Some(-1.0), Some(-1.0)])).unwrap(), 0);
        assert!(matches!(
            rank_by_logprob(&set(&[Some(-1.0), None])),
            Err(EvalError::MissingLogprob(1))
        ));
        assert!(rank_by_logprob(&set(&[])).is_err());
    }

    /// Records requests and answers every cell with ok.
    #[derive(Default)]
    struct Recorder(Mutex<Vec<ExecRequest>>);

    impl Executor for Recorder {
        fn run(&self, req: &ExecRequest) -> Result<ExecResponse, ExecutorError> {
            self.0.lock().unwrap().push(req.clone());
            let stop = req.stop_after_id.as_deref();
            let mut results = Vec::new();
            for c in &req.cells {
                results.push(CellResult {
                    id: c.id.clone(),
                    status: CellStatus::Ok,
                    error_type: None,
                    error_message: None,
                    duration_s: 0.0,
                });
                if Some(c.id.as_str()) == stop {
                    break;
                }
            }
            Ok(ExecResponse { results, ok: true })
        }
    }

    #[test]
    fn request_stops_at_grading_cell() {
        let dir = tempfile::tempdir().unwrap();
        let mut nb = five_cells();
        nb.source_path = dir.path().join("nb.ipynb");
        std::fs::write(dir.path().join("data.csv"), "a\n").unwrap();
        let rec = Recorder::default();
        let report = evaluate_candidate(&nb, &problem(2, 3), "x = 2", &rec, &EvalOptions::default()).unwrap();
        assert!(report.passed);
        let reqs = rec.0.lock().unwrap();
        let ids: Vec<_> = reqs[0].cells.iter().map(|c| c.id.as_str()).collect();
        assert_eq!(ids, vec!["1", "2", "3"]);
        assert_eq!(reqs[0].stop_after_id.as_deref(), Some("3"));
        assert_eq!(reqs[0].timeout_per_cell_s, DEFAULT_EVAL_TIMEOUT_S);
        assert_ne!(reqs[0].workdir, dir.path());
        assert_eq!(report.per_cell.iter().map(|c| c.cell_index).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn strip_option_changes_executed_source() {
        let dir = tempfile::tempdir().unwrap();
        let mut nb = five_cells();
        nb.source_path = dir.path().join("nb.ipynb");
        let rec = Recorder::default();
        let opts = EvalOptions {
            strip_trailing_asserts: true,
            in_place: true,
            ..Default::default()
        };
        evaluate_candidate(&nb, &problem(2, 3), "x = 2\nassert x == 3", &rec, &opts).unwrap();
        let reqs = rec.0.lock().unwrap();
        assert_eq!(reqs[0].cells[1].source, "x = 2");
        assert_eq!(reqs[0].workdir, std::fs::canonicalize(dir.path()).unwrap());
    }
}
