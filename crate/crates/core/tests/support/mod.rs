//! Shared helpers for integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use nbharness::corpus::{scan_corpus, ScanOptions};
use nbharness::curation::{curation_pipeline, CurationConfig, CurationReport, Problem};
use nbharness::infill::{emit_infill_examples, InfillConfig, InfillExample};
use nbharness::executor::{CellResult, CellStatus, ExecRequest, ExecResponse, Executor, ExecutorError, ShimExecutor};
use nbharness::lexer::{tokenize, TokenKind};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn corpus_root() -> PathBuf {
    fixtures().join("corpus")
}

/// Rewrites notebook paths relative to `root` so goldens do not depend on the
/// checkout location.
pub fn relativize(problems: &[Problem], root: &Path) -> Vec<Problem> {
    problems
        .iter()
        .cloned()
        .map(|mut p| {
            p.notebook_ref = p.notebook_ref.strip_prefix(root).map(Path::to_path_buf).unwrap_or(p.notebook_ref);
            p
        })
        .collect()
}

/// Stand-in for the Python shim. It does not run code; it recognises the few
/// failure shapes the fixtures use:
/// - unbalanced brackets fail with `SyntaxError`,
/// - a top-level `raise Name` fails with that exception type,
/// - `sleep(N)` with N above the cell timeout times out.
///
/// Everything else succeeds.
pub struct FakeExecutor;

fn balanced(src: &str) -> bool {
    let mut depth = 0i64;
    for t in tokenize(src) {
        if t.kind != TokenKind::Op {
            continue;
        }
        match t.text {
            "(" | "[" | "{" => depth += 1,
            ")" | "]" | "}" => depth -= 1,
            _ => {}
        }
        if depth < 0 {
            return false;
        }
    }
    depth == 0
}

pub fn simulate(src: &str, timeout_s: f64) -> (CellStatus, Option<String>) {
    if !balanced(src) {
        return (CellStatus::Exception, Some("SyntaxError".into()));
    }
    for stmt in nbharness::lexer::statements(src) {
        let toks = &stmt.tokens;
        if stmt.indent == 0 && toks.first().is_some_and(|t| t.text == "raise") {
            let name = toks.get(1).map_or("RuntimeError", |t| t.text);
            return (CellStatus::Exception, Some(name.to_string()));
        }
        for w in toks.windows(4) {
            if w[0].text == "sleep" && w[1].text == "(" && w[3].text == ")" {
                if let Ok(secs) = w[2].text.parse::<f64>() {
                    if secs > timeout_s {
                        return (CellStatus::Timeout, Some("TimeoutError".into()));
                    }
                }
            }
        }
    }
    (CellStatus::Ok, None)
}

impl Executor for FakeExecutor {
    fn run(&self, req: &ExecRequest) -> Result<ExecResponse, ExecutorError> {
        let mut results = Vec::new();
        let mut ok = true;
        for cell in &req.cells {
            let (status, error_type) = simulate(&cell.source, req.timeout_per_cell_s);
            let failed = status != CellStatus::Ok;
            results.push(CellResult {
                id: cell.id.clone(),
                status,
                error_message: error_type.as_ref().map(|t| format!("simulated {t}")),
                error_type,
                duration_s: 0.0,
            });
            if failed {
                ok = false;
                break;
            }
            if req.stop_after_id.as_deref() == Some(cell.id.as_str()) {
                break;
            }
        }
        Ok(ExecResponse { results, ok })
    }
}

/// The real shim, when one is configured.
pub fn real_shim() -> Option<ShimExecutor> {
    ShimExecutor::from_env()
}

pub fn skip_marker(test: &str) -> String {
    format!("SKIPPED {test}: {} not set, no execution shim available", nbharness::executor::SHIM_ENV)
}

/// Per-cell limit used on the fixture corpus; the slow notebook sleeps 5 s.
pub const FIXTURE_TIMEOUT_S: f64 = 2.0;

pub fn curate_fixture(executor: &dyn Executor) -> (Vec<Problem>, CurationReport) {
    let root = corpus_root();
    let scan = scan_corpus(&root, &ScanOptions::default()).expect("fixture corpus scans");
    let cfg = CurationConfig {
        cell_timeout_s: FIXTURE_TIMEOUT_S,
        ..Default::default()
    };
    let (problems, mut report) = curation_pipeline(&scan.notebooks, &cfg, Some(executor)).expect("curation runs");
    for r in &mut report.rejections {
        r.notebook_ref = r.notebook_ref.strip_prefix(&root).map(Path::to_path_buf).unwrap_or(r.notebook_ref.clone());
    }
    (relativize(&problems, &root), report)
}

pub fn infill_fixture(context_cells: usize, lookahead: bool) -> (Vec<InfillExample>, usize) {
    let scan = scan_corpus(&corpus_root(), &ScanOptions::default()).expect("fixture corpus scans");
    let cfg = InfillConfig {
        context_cells,
        lookahead,
        extra_control: None,
    };
    let unique = scan.unique();
    let cells = unique.iter().map(|nb| nb.cells.len()).sum();
    (unique.into_iter().flat_map(|nb| emit_infill_examples(nb, &cfg)).collect(), cells)
}

pub fn to_jsonl<T: serde::Serialize>(items: &[T]) -> String {
    items
        .iter()
        .map(|i| serde_json::to_string(i).expect("serializable") + "\n")
        .collect()
}

pub fn golden_path(name: &str) -> PathBuf {
    fixtures().join("golden").join(name)
}

/// Compares against a committed golden file; `NBHARNESS_BLESS=1` rewrites it.
pub fn check_golden(name: &str, actual: &str) -> Result<(), String> {
    let path = golden_path(name);
    if std::env::var_os("NBHARNESS_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
    }
    let expected = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    if expected == actual {
        return Ok(());
    }
    let line = expected
        .lines()
        .zip(actual.lines())
        .position(|(a, b)| a != b)
        .map_or_else(|| "line count".to_string(), |i| format!("line {}", i + 1));
    Err(format!("{name} differs from golden at {line}"))
}
