//! Problem-test pair curation from nbgrader-style notebooks.
//!
//! A problem is a solution cell plus the nearest following code cell whose
//! assertion statements mention a name the solution defines. Everything here
//! is lexical: cells that do not parse as Python are still scanned.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{dedup_key, NotebookDigest};
use crate::executor::{copy_dir, ExecCell, ExecRequest, Executor, ExecutorError};
use crate::lexer::{self, is_keyword, Statement, Token, TokenKind};
use crate::notebook::{Cell, Notebook};

/// nbgrader's default scaffold strings.
pub const SOLUTION_MARKERS: [&str; 2] = ["YOUR CODE HERE", "raise NotImplementedError"];

const UNFILLED_MARKER: &str = "raise NotImplementedError";

pub const DATA_EXTENSIONS: [&str; 12] = [
    ".csv", ".tsv", ".json", ".txt", ".dat", ".npy", ".npz", ".xlsx", ".h5", ".pkl", ".png", ".jpg",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Problem {
    pub problem_id: String,
    pub notebook_ref: PathBuf,
    pub context_cell_indices: Vec<usize>,
    pub solution_cell_index: usize,
    pub grading_cell_index: usize,
    pub defined_names: BTreeSet<String>,
    pub assert_count: usize,
    pub referenced_names: BTreeSet<String>,
    pub data_dependent: bool,
    pub data_files: BTreeSet<String>,
}

pub fn problem_id(digest: &NotebookDigest, solution_cell_index: usize) -> String {
    format!("{}:{}", digest.to_hex(), solution_cell_index)
}

// ---------------------------------------------------------------------------
// Name extraction

fn split_top_level<'t, 'a>(tokens: &'t [Token<'a>], sep: &str) -> Vec<&'t [Token<'a>]> {
    let Some(first) = tokens.first() else {
        return Vec::new();
    };
    let base = first.depth;
    tokens
        .split(|t| t.is_op(sep) && t.depth == base)
        .collect()
}

fn is_plain_name(t: &Token<'_>) -> bool {
    t.kind == TokenKind::Name && !is_keyword(t.text)
}

/// Index of the bracket closing the opener at `open`.
fn matching_close(tokens: &[Token<'_>], open: usize) -> Option<usize> {
    let depth = tokens[open].depth;
    tokens[open + 1..]
        .iter()
        .position(|t| t.depth == depth && matches!(t.text, ")" | "]" | "}") && t.kind == TokenKind::Op)
        .map(|i| open + 1 + i)
}

/// Names bound by an assignment target list, or `None` when the tokens are
/// not a valid target (which ends the `a = b = ...` chain).
fn target_names<'a>(tokens: &[Token<'a>], out: &mut Vec<&'a str>) -> Option<()> {
    if tokens.is_empty() {
        return None;
    }
    for element in split_top_level(tokens, ",") {
        let mut el = element;
        if el.is_empty() {
            // trailing comma
            continue;
        }
        if el[0].is_op("*") {
            el = &el[1..];
        }
        match el {
            [] => return None,
            [t] if is_plain_name(t) => out.push(t.text),
            [open, .., close]
                if (open.is_op("(") || open.is_op("["))
                    && matching_close(el, 0) == Some(el.len() - 1)
                    && matches!(close.text, ")" | "]") =>
            {
                if el.len() == 2 {
                    continue;
                }
                target_names(&el[1..el.len() - 1], out)?;
            }
            [head, rest @ ..] if is_plain_name(head) => {
                // attribute or subscript target: valid, binds nothing new
                let base = head.depth;
                let mut i = 0;
                let mut last_ok = false;
                while i < rest.len() {
                    let t = &rest[i];
                    if t.is_op(".") && rest.get(i + 1).is_some_and(is_plain_name) {
                        i += 2;
                        last_ok = true;
                    } else if (t.is_op("[") || t.is_op("(")) && t.depth == base {
                        let close = matching_close(rest, i)?;
                        last_ok = t.is_op("[");
                        i = close + 1;
                    } else {
                        return None;
                    }
                }
                if !last_ok {
                    return None;
                }
            }
            _ => return None,
        }
    }
    Some(())
}

fn assignment_names<'a>(stmt: &Statement<'a>, out: &mut Vec<&'a str>) {
    let toks = &stmt.tokens;
    if toks[0].kind == TokenKind::Name && is_keyword(toks[0].text) {
        return;
    }
    let segments = split_top_level(toks, "=");
    if segments.len() < 2 {
        return;
    }
    for (i, seg) in segments[..segments.len() - 1].iter().enumerate() {
        if i == 0 {
            let annotated = split_top_level(seg, ":");
            if annotated.len() == 2 {
                match annotated[0] {
                    [t] if is_plain_name(t) => {
                        out.push(t.text);
                        continue;
                    }
                    _ => return,
                }
            }
        }
        if target_names(seg, out).is_none() {
            return;
        }
    }
}

fn import_names<'a>(stmt: &Statement<'a>, out: &mut Vec<&'a str>) {
    let toks = &stmt.tokens;
    let items: &[Token<'a>] = if toks[0].is_name("import") {
        &toks[1..]
    } else if toks[0].is_name("from") {
        match toks.iter().position(|t| t.is_name("import")) {
            Some(i) => &toks[i + 1..],
            None => return,
        }
    } else {
        return;
    };
    let from = toks[0].is_name("from");
    let items: Vec<Token<'a>> = items
        .iter()
        .filter(|t| !(t.is_op("(") || t.is_op(")")))
        .copied()
        .collect();
    for item in items.split(|t| t.is_op(",")) {
        match item {
            [.., as_kw, alias] if as_kw.is_name("as") && is_plain_name(alias) => out.push(alias.text),
            [head, ..] if is_plain_name(head) => {
                if from {
                    if item.len() == 1 {
                        out.push(head.text);
                    }
                } else {
                    out.push(head.text);
                }
            }
            _ => {}
        }
    }
}

/// Names bound at the top level of a cell: `def`, `class`, assignments and
/// annotated assignments at column zero (tuple and chained targets included),
/// and imports. `import a.b` binds `a`.
pub fn extract_defined_names(code: &str) -> BTreeSet<String> {
    let mut names = Vec::new();
    for stmt in lexer::statements(code) {
        if stmt.indent != 0 || stmt.tokens[0].depth != 0 {
            continue;
        }
        let toks = &stmt.tokens;
        let head = if toks[0].is_name("async") { &toks[1..] } else { &toks[..] };
        match head {
            [kw, name, ..] if (kw.is_name("def") || kw.is_name("class")) && is_plain_name(name) => {
                names.push(name.text)
            }
            [kw, ..] if kw.is_name("import") || kw.is_name("from") => import_names(&stmt, &mut names),
            _ => assignment_names(&stmt, &mut names),
        }
    }
    names.into_iter().map(str::to_string).collect()
}

// ---------------------------------------------------------------------------
// Assertions

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssertionLine {
    pub line_no: usize,
    pub text: String,
}

/// `assert ...`, or a call whose callee (last dotted component) starts with
/// `assert`, such as `assert_equal(...)` or `np.testing.assert_allclose(...)`.
pub fn is_assertion(stmt: &Statement<'_>) -> bool {
    let toks = &stmt.tokens;
    if toks[0].is_name("assert") {
        return true;
    }
    let mut i = 0;
    let mut callee = None;
    while i < toks.len() && is_plain_name(&toks[i]) {
        callee = Some(toks[i].text);
        if toks.get(i + 1).is_some_and(|t| t.is_op(".")) {
            i += 2;
        } else {
            i += 1;
            break;
        }
    }
    callee.is_some_and(|c| c.starts_with("assert")) && toks.get(i).is_some_and(|t| t.is_op("("))
}

pub fn assertion_statements(code: &str) -> Vec<Statement<'_>> {
    lexer::statements(code)
        .into_iter()
        .filter(is_assertion)
        .collect()
}

pub fn find_assertion_lines(code: &str) -> Vec<AssertionLine> {
    assertion_statements(code)
        .into_iter()
        .map(|s| AssertionLine {
            line_no: s.line,
            text: s.text().to_string(),
        })
        .collect()
}

/// Members of `names` that occur as identifier tokens inside assertion
/// statements. String literals and comments never match.
pub fn find_assert_references(grading: &str, names: &BTreeSet<String>) -> BTreeSet<String> {
    let mut found = BTreeSet::new();
    for stmt in assertion_statements(grading) {
        for t in &stmt.tokens {
            if t.kind == TokenKind::Name && names.contains(t.text) {
                found.insert(t.text.to_string());
            }
        }
    }
    found
}

// ---------------------------------------------------------------------------
// Data dependencies

fn is_loader(name: &str) -> bool {
    name == "open"
        || name.starts_with("read_")
        || name.starts_with("load")
        || name == "genfromtxt"
        || name == "imread"
}

fn normalize_data_path(value: &str) -> Option<String> {
    if value.is_empty() || value.contains('\n') || value.contains("://") {
        return None;
    }
    let b = value.as_bytes();
    let windows_abs = b.len() >= 3 && b[0].is_ascii_alphabetic() && b[1] == b':' && matches!(b[2], b'\\' | b'/');
    if value.starts_with('/') || value.starts_with('\\') || value.starts_with('~') || windows_abs {
        return None;
    }
    let mut v = value;
    while let Some(rest) = v.strip_prefix("./") {
        v = rest;
    }
    (!v.is_empty()).then(|| v.to_string())
}

fn has_data_extension(value: &str) -> bool {
    let lower = value.to_ascii_lowercase();
    DATA_EXTENSIONS.iter().any(|ext| lower.ends_with(ext))
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct DataReference {
    pub path: String,
    /// Passed as the first argument of a loader call that reads.
    pub required: bool,
}

struct CallFrame<'a> {
    callee: Option<&'a str>,
    depth: u32,
    arg: usize,
    first: Option<&'a str>,
    mode: Option<&'a str>,
}

fn literal_value<'a>(t: &Token<'a>) -> Option<&'a str> {
    if t.is_fstring() && t.text.contains('{') {
        return None;
    }
    t.string_value()
}

fn cell_data_references(code: &str, out: &mut BTreeSet<DataReference>) {
    let toks = lexer::tokenize(code);
    let mut frames: Vec<CallFrame<'_>> = Vec::new();
    let close = |frame: CallFrame<'_>, out: &mut BTreeSet<DataReference>| {
        let (Some(callee), Some(first)) = (frame.callee, frame.first) else {
            return;
        };
        if !is_loader(callee) {
            return;
        }
        let writes = callee == "open"
            && frame
                .mode
                .is_some_and(|m| m.contains(['w', 'a', 'x']));
        if writes {
            return;
        }
        if let Some(path) = normalize_data_path(first) {
            out.insert(DataReference { path, required: true });
        }
    };
    for (i, t) in toks.iter().enumerate() {
        let prev = i.checked_sub(1).map(|j| &toks[j]);
        match t.kind {
            TokenKind::Op if matches!(t.text, "(" | "[" | "{") => {
                let callee = prev
                    .filter(|p| t.text == "(" && is_plain_name(p))
                    .map(|p| p.text);
                frames.push(CallFrame {
                    callee,
                    depth: t.depth,
                    arg: 0,
                    first: None,
                    mode: None,
                });
            }
            TokenKind::Op if matches!(t.text, ")" | "]" | "}") => {
                if let Some(f) = frames.pop() {
                    close(f, out);
                }
            }
            TokenKind::Op if t.text == "," => {
                if let Some(f) = frames.last_mut().filter(|f| f.depth + 1 == t.depth) {
                    f.arg += 1;
                }
            }
            TokenKind::Str => {
                let Some(value) = literal_value(t) else { continue };
                if has_data_extension(value) {
                    if let Some(path) = normalize_data_path(value) {
                        out.insert(DataReference { path, required: false });
                    }
                }
                let Some(f) = frames.last_mut().filter(|f| f.depth + 1 == t.depth) else {
                    continue;
                };
                let after_open = prev.is_some_and(|p| p.is_op("(") || p.is_op(","));
                let kw = prev
                    .filter(|p| p.is_op("="))
                    .and_then(|_| i.checked_sub(2).map(|j| toks[j].text));
                if f.arg == 0 && (after_open || kw.is_some()) && f.first.is_none() {
                    f.first = Some(value);
                } else if (f.arg == 1 && after_open) || kw == Some("mode") {
                    f.mode = Some(value);
                }
            }
            _ => {}
        }
    }
    while let Some(f) = frames.pop() {
        close(f, out);
    }
}

/// Every data reference in the notebook's code cells, with the strongest
/// `required` flag seen for each path.
pub fn data_references(nb: &Notebook) -> Vec<DataReference> {
    let mut raw = BTreeSet::new();
    for cell in nb.cells.iter().filter(|c| c.is_code()) {
        cell_data_references(&cell.source, &mut raw);
    }
    let mut merged: BTreeMap<String, bool> = BTreeMap::new();
    for r in raw {
        *merged.entry(r.path).or_default() |= r.required;
    }
    merged
        .into_iter()
        .map(|(path, required)| DataReference { path, required })
        .collect()
}

/// Relative paths of files the notebook appears to read: first arguments of
/// loader calls (`open`, `read_*`, `load*`, `genfromtxt`, `imread`) and any
/// string literal with a known data extension. Absolute paths and URLs are
/// excluded.
pub fn detect_data_dependencies(nb: &Notebook) -> BTreeSet<String> {
    data_references(nb).into_iter().map(|r| r.path).collect()
}

// ---------------------------------------------------------------------------
// Problem extraction

pub fn is_solution_cell(cell: &Cell) -> bool {
    cell.is_code()
        && (cell.nbgrader.as_ref().is_some_and(|m| m.is_solution)
            || SOLUTION_MARKERS.iter().any(|m| cell.source.contains(m)))
}

/// Problems in one notebook. With `ground_truth_available`, solution cells
/// that still raise `NotImplementedError` are unfilled scaffolds and are
/// skipped; without it, names are taken from whatever the scaffold defines.
pub fn curate_problems(nb: &Notebook, ground_truth_available: bool) -> Vec<Problem> {
    let digest = dedup_key(nb);
    let data_files = detect_data_dependencies(nb);
    let mut out = Vec::new();
    for (s, cell) in nb.cells.iter().enumerate() {
        if !is_solution_cell(cell) {
            continue;
        }
        if ground_truth_available && cell.source.contains(UNFILLED_MARKER) {
            continue;
        }
        let defined = extract_defined_names(&cell.source);
        if defined.is_empty() {
            continue;
        }
        let grading = nb.cells[s + 1..]
            .iter()
            .filter(|c| c.is_code())
            .find_map(|g| {
                let refs = find_assert_references(&g.source, &defined);
                (!refs.is_empty()).then_some((g, refs))
            });
        let Some((g, referenced)) = grading else {
            continue;
        };
        out.push(Problem {
            problem_id: problem_id(&digest, s),
            notebook_ref: nb.source_path.clone(),
            context_cell_indices: (0..s).collect(),
            solution_cell_index: s,
            grading_cell_index: g.index,
            defined_names: defined,
            assert_count: assertion_statements(&g.source).len(),
            referenced_names: referenced,
            data_dependent: !data_files.is_empty(),
            data_files: data_files.clone(),
        });
    }
    out
}

// ---------------------------------------------------------------------------
// Pipeline

pub const DEFAULT_CURATION_TIMEOUT_S: f64 = 600.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationConfig {
    pub cell_timeout_s: f64,
    pub require_execution: bool,
    /// Keep only the last N context indices per problem; `None` keeps all.
    pub max_context_cells_recorded: Option<usize>,
    pub ground_truth_available: bool,
    pub workers: usize,
}

impl Default for CurationConfig {
    fn default() -> Self {
        CurationConfig {
            cell_timeout_s: DEFAULT_CURATION_TIMEOUT_S,
            require_execution: true,
            max_context_cells_recorded: None,
            ground_truth_available: true,
            workers: default_workers(),
        }
    }
}

pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get()).min(8)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub notebook_ref: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationReport {
    pub notebooks_seen: usize,
    /// Exact duplicates of an earlier notebook, dropped before stage 1.
    pub duplicate_notebooks: usize,
    pub notebooks_executable: usize,
    pub notebooks_with_problems: usize,
    /// Distinct repositories among notebooks with problems.
    pub repos: usize,
    pub problems: usize,
    /// Assertion statements over the distinct grading cells of each notebook.
    pub total_asserts: usize,
    pub data_files: usize,
    pub notebooks_referencing_data: usize,
    pub problems_in_data_dependent_notebooks: usize,
    /// Stage-1 rejections in input order.
    pub rejections: Vec<Rejection>,
}

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("execution is required but no executor is configured")]
    ExecutorUnavailable,
    #[error("failed to build worker pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
    #[error(transparent)]
    Executor(#[from] ExecutorError),
}

/// Stage 1 for one notebook: referenced input files must exist next to it and
/// every code cell must run to completion within the per-cell timeout.
/// A shim that cannot be started fails the whole run rather than the notebook.
pub fn check_executable(
    nb: &Notebook,
    cfg: &CurationConfig,
    executor: &dyn Executor,
) -> Result<(), String> {
    match try_execute(nb, cfg, executor) {
        Ok(verdict) => verdict,
        Err(e) => Err(e.to_string()),
    }
}

fn try_execute(
    nb: &Notebook,
    cfg: &CurationConfig,
    executor: &dyn Executor,
) -> Result<Result<(), String>, ExecutorError> {
    let dir = nb.directory();
    let missing: Vec<_> = data_references(nb)
        .into_iter()
        .filter(|r| r.required && !dir.join(&r.path).exists())
        .map(|r| r.path)
        .collect();
    if !missing.is_empty() {
        return Ok(Err(format!("missing data files: {}", missing.join(", "))));
    }
    let scratch = tempfile::tempdir()?;
    copy_dir(dir, scratch.path())?;
    let req = ExecRequest {
        workdir: scratch.path().to_path_buf(),
        cells: nb
            .cells
            .iter()
            .filter(|c| c.is_code())
            .map(|c| ExecCell {
                id: c.index.to_string(),
                source: c.source.clone(),
            })
            .collect(),
        timeout_per_cell_s: cfg.cell_timeout_s,
        stop_after_id: None,
    };
    if req.cells.is_empty() {
        return Ok(Ok(()));
    }
    let resp = match executor.run(&req) {
        Ok(r) => r,
        Err(e @ (ExecutorError::Spawn { .. } | ExecutorError::Io(_))) => return Err(e),
        Err(e) => return Ok(Err(e.to_string())),
    };
    if resp.all_ok(&req) {
        return Ok(Ok(()));
    }
    let failed = resp.results.last();
    Ok(Err(match failed {
        Some(r) => format!(
            "cell {} {:?}{}",
            r.id,
            r.status,
            r.error_type
                .as_deref()
                .map(|t| format!(" ({t})"))
                .unwrap_or_default()
        )
        .to_lowercase(),
        None => "no cells executed".into(),
    }))
}

pub fn curation_pipeline(
    notebooks: &[Notebook],
    cfg: &CurationConfig,
    executor: Option<&dyn Executor>,
) -> Result<(Vec<Problem>, CurationReport), CurationError> {
    if cfg.require_execution && executor.is_none() {
        return Err(CurationError::ExecutorUnavailable);
    }
    let mut report = CurationReport {
        notebooks_seen: notebooks.len(),
        ..Default::default()
    };

    let mut seen = std::collections::HashSet::new();
    let unique: Vec<&Notebook> = notebooks
        .iter()
        .filter(|nb| seen.insert(dedup_key(nb)))
        .collect();
    report.duplicate_notebooks = notebooks.len() - unique.len();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()?;
    let stage1: Vec<Result<(), String>> = pool.install(|| {
        unique
            .par_iter()
            .map(|nb| match (cfg.require_execution, executor) {
                (true, Some(ex)) => try_execute(nb, cfg, ex),
                _ => Ok(Ok(())),
            })
            .collect::<Result<_, _>>()
    })?;

    let mut problems = Vec::new();
    let mut repos = BTreeSet::new();
    for (nb, verdict) in unique.iter().zip(stage1) {
        if let Err(reason) = verdict {
            report.rejections.push(Rejection {
                notebook_ref: nb.source_path.clone(),
                reason,
            });
            continue;
        }
        report.notebooks_executable += 1;
        let mut found = curate_problems(nb, cfg.ground_truth_available);
        if found.is_empty() {
            continue;
        }
        if let Some(keep) = cfg.max_context_cells_recorded {
            for p in &mut found {
                let skip = p.context_cell_indices.len().saturating_sub(keep);
                p.context_cell_indices.drain(..skip);
            }
        }
        report.notebooks_with_problems += 1;
        repos.insert(nb.repo_id.clone());
        report.problems += found.len();
        let grading: BTreeSet<usize> = found.iter().map(|p| p.grading_cell_index).collect();
        report.total_asserts += grading
            .iter()
            .map(|&g| assertion_statements(&nb.cells[g].source).len())
            .sum::<usize>();
        let data = &found[0].data_files;
        report.data_files += data.len();
        if !data.is_empty() {
            report.notebooks_referencing_data += 1;
            report.problems_in_data_dependent_notebooks += found.len();
        }
        problems.extend(found);
    }
    report.repos = repos.len();
    Ok((problems, report))
}
