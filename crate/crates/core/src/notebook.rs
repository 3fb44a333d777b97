//! In-memory model of nbformat v4 notebooks with nbgrader cell metadata.
//!
//! Stored outputs and execution counts are dropped at parse time and written
//! back empty. Cell sources are held as a single string; files that store a
//! source as a list of lines are joined verbatim.

use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NotebookError {
    #[error("malformed notebook JSON: {0}")]
    MalformedJson(String),
    #[error("unsupported nbformat major version {0} (only 4 is supported)")]
    UnsupportedVersion(u64),
    #[error("notebook has no \"cells\" array")]
    MissingCells,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CellKind {
    Code,
    Markdown,
    Raw,
}

impl CellKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CellKind::Code => "code",
            CellKind::Markdown => "markdown",
            CellKind::Raw => "raw",
        }
    }

    fn from_cell_type(s: &str) -> Self {
        match s {
            "code" => CellKind::Code,
            "markdown" => CellKind::Markdown,
            _ => CellKind::Raw,
        }
    }
}

/// nbgrader's per-cell role flags, read from `metadata.nbgrader`.
#[derive(Debug, Clone, PartialEq)]
pub struct NbgraderMeta {
    pub grade_id: String,
    pub is_solution: bool,
    pub is_grade: bool,
    pub points: f64,
    pub locked: bool,
}

impl NbgraderMeta {
    fn from_json(v: &Value, cell_index: usize) -> Option<Self> {
        let obj = v.as_object()?;
        let flag = |k: &str| obj.get(k).and_then(Value::as_bool).unwrap_or(false);
        let is_grade = flag("grade");
        let mut grade_id = obj
            .get("grade_id")
            .and_then(Value::as_str)
            .unwrap_or_default()
            .to_string();
        if is_grade && grade_id.is_empty() {
            grade_id = format!("cell-{cell_index}");
        }
        let points = obj
            .get("points")
            .and_then(Value::as_f64)
            .filter(|p| p.is_finite())
            .unwrap_or(0.0)
            .max(0.0);
        Some(NbgraderMeta {
            grade_id,
            is_solution: flag("solution"),
            is_grade,
            points,
            locked: flag("locked"),
        })
    }

    fn write_into(&self, obj: &mut Map<String, Value>) {
        obj.insert("grade_id".into(), json!(self.grade_id));
        obj.insert("solution".into(), json!(self.is_solution));
        obj.insert("grade".into(), json!(self.is_grade));
        obj.insert("points".into(), points_json(self.points));
        obj.insert("locked".into(), json!(self.locked));
    }
}

fn points_json(points: f64) -> Value {
    if points.fract() == 0.0 && points.abs() < 1e15 {
        json!(points as i64)
    } else {
        json!(points)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub index: usize,
    pub kind: CellKind,
    pub source: String,
    pub nbgrader: Option<NbgraderMeta>,
    pub cell_id: Option<String>,
    /// Cell metadata other than outputs, kept for re-serialization.
    pub metadata: Map<String, Value>,
}

impl Cell {
    pub fn new(index: usize, kind: CellKind, source: impl Into<String>) -> Self {
        Cell {
            index,
            kind,
            source: source.into(),
            nbgrader: None,
            cell_id: None,
            metadata: Map::new(),
        }
    }

    pub fn is_code(&self) -> bool {
        self.kind == CellKind::Code
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Notebook {
    pub format_version: (u32, u32),
    pub kernel_language: String,
    pub cells: Vec<Cell>,
    pub source_path: PathBuf,
    pub repo_id: String,
    pub metadata: Map<String, Value>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CellCounts {
    pub code: usize,
    pub markdown: usize,
    pub raw: usize,
}

impl CellCounts {
    pub fn total(&self) -> usize {
        self.code + self.markdown + self.raw
    }
}

impl std::ops::Add for CellCounts {
    type Output = CellCounts;
    fn add(self, o: CellCounts) -> CellCounts {
        CellCounts {
            code: self.code + o.code,
            markdown: self.markdown + o.markdown,
            raw: self.raw + o.raw,
        }
    }
}

impl Notebook {
    /// Builds a notebook from `(kind, source)` pairs. Mostly useful in tests
    /// and synthetic corpora.
    pub fn from_cells<S: Into<String>>(cells: impl IntoIterator<Item = (CellKind, S)>) -> Self {
        Notebook {
            format_version: (4, 5),
            kernel_language: "python".into(),
            cells: cells
                .into_iter()
                .enumerate()
                .map(|(i, (k, s))| Cell::new(i, k, s))
                .collect(),
            source_path: PathBuf::new(),
            repo_id: String::new(),
            metadata: Map::new(),
        }
    }

    pub fn cell_counts(&self) -> CellCounts {
        let mut c = CellCounts::default();
        for cell in &self.cells {
            match cell.kind {
                CellKind::Code => c.code += 1,
                CellKind::Markdown => c.markdown += 1,
                CellKind::Raw => c.raw += 1,
            }
        }
        c
    }

    /// Directory holding the notebook file; data paths resolve against it.
    pub fn directory(&self) -> &Path {
        self.source_path.parent().unwrap_or_else(|| Path::new("."))
    }
}

pub fn cell_counts(nb: &Notebook) -> CellCounts {
    nb.cell_counts()
}

fn source_text(v: Option<&Value>) -> String {
    match v {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Array(lines)) => lines.iter().filter_map(Value::as_str).collect(),
        _ => String::new(),
    }
}

pub fn parse_notebook(
    bytes: &[u8],
    path: impl Into<PathBuf>,
    repo_id: impl Into<String>,
) -> Result<Notebook, NotebookError> {
    let root: Value =
        serde_json::from_slice(bytes).map_err(|e| NotebookError::MalformedJson(e.to_string()))?;
    let obj = root
        .as_object()
        .ok_or_else(|| NotebookError::MalformedJson("top level is not an object".into()))?;
    let major = obj
        .get("nbformat")
        .and_then(Value::as_u64)
        .ok_or_else(|| NotebookError::MalformedJson("missing integer \"nbformat\"".into()))?;
    if major != 4 {
        return Err(NotebookError::UnsupportedVersion(major));
    }
    let minor = obj
        .get("nbformat_minor")
        .and_then(Value::as_u64)
        .unwrap_or(0) as u32;
    let raw_cells = obj
        .get("cells")
        .and_then(Value::as_array)
        .ok_or(NotebookError::MissingCells)?;

    let metadata = obj
        .get("metadata")
        .and_then(Value::as_object)
        .cloned()
        .unwrap_or_default();
    let kernel_language = metadata
        .get("kernelspec")
        .and_then(|k| k.get("language"))
        .or_else(|| metadata.get("language_info").and_then(|l| l.get("name")))
        .and_then(Value::as_str)
        .filter(|s| !s.is_empty())
        .unwrap_or("python")
        .to_string();

    let cells = raw_cells
        .iter()
        .enumerate()
        .map(|(index, c)| {
            let kind = CellKind::from_cell_type(
                c.get("cell_type").and_then(Value::as_str).unwrap_or(""),
            );
            let metadata = c
                .get("metadata")
                .and_then(Value::as_object)
                .cloned()
                .unwrap_or_default();
            let nbgrader = metadata
                .get("nbgrader")
                .and_then(|v| NbgraderMeta::from_json(v, index));
            Cell {
                index,
                kind,
                source: source_text(c.get("source")),
                nbgrader,
                cell_id: c.get("id").and_then(Value::as_str).map(str::to_string),
                metadata,
            }
        })
        .collect();

    Ok(Notebook {
        format_version: (4, minor),
        kernel_language,
        cells,
        source_path: path.into(),
        repo_id: repo_id.into(),
        metadata,
    })
}

/// Splits a source into nbformat's list-of-lines form; joining the pieces
/// gives back the input exactly.
fn source_lines(source: &str) -> Vec<Value> {
    source
        .split_inclusive('\n')
        .map(|l| Value::String(l.to_string()))
        .collect()
}

fn cell_json(cell: &Cell) -> Value {
    let mut obj = Map::new();
    obj.insert("cell_type".into(), json!(cell.kind.as_str()));
    if let Some(id) = &cell.cell_id {
        obj.insert("id".into(), json!(id));
    }
    let mut metadata = cell.metadata.clone();
    if let Some(nbg) = &cell.nbgrader {
        let mut m = metadata
            .get("nbgrader")
            .and_then(Value::as_object)
            .cloned()
            .unwrap_or_default();
        nbg.write_into(&mut m);
        metadata.insert("nbgrader".into(), Value::Object(m));
    } else {
        metadata.remove("nbgrader");
    }
    obj.insert("metadata".into(), Value::Object(metadata));
    obj.insert("source".into(), Value::Array(source_lines(&cell.source)));
    if cell.kind == CellKind::Code {
        obj.insert("execution_count".into(), Value::Null);
        obj.insert("outputs".into(), Value::Array(Vec::new()));
    }
    Value::Object(obj)
}

/// Writes nbformat v4 JSON with one-space indentation and sorted keys, the
/// layout Jupyter itself uses.
pub fn serialize_notebook(nb: &Notebook) -> Vec<u8> {
    let mut metadata = nb.metadata.clone();
    if !metadata.contains_key("kernelspec") && !metadata.contains_key("language_info") {
        metadata.insert("language_info".into(), json!({ "name": nb.kernel_language }));
    }
    let doc = json!({
        "cells": nb.cells.iter().map(cell_json).collect::<Vec<_>>(),
        "metadata": metadata,
        "nbformat": 4,
        "nbformat_minor": nb.format_version.1,
    });
    let mut out = Vec::new();
    let fmt = serde_json::ser::PrettyFormatter::with_indent(b" ");
    let mut ser = serde_json::Serializer::with_formatter(&mut out, fmt);
    serde::Serialize::serialize(&doc, &mut ser).expect("serializing a JSON value cannot fail");
    out.push(b'\n');
    out
}
