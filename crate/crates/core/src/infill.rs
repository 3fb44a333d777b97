//! Cell-infilling examples and evaluation prompts.
//!
//! A source string is the `C` cells preceding the target, a fill tag naming
//! the kind of cell to produce, and optionally the cell that follows:
//!
//! ```text
//! <cell:markdown>
//! Load the data and pad the zip codes.
//! <fill:code>
//! <cell:code>
//! assert df.zip[0] == "02134"
//! ```
//!
//! Blocks are joined by single newlines. Raw cells are presented as Markdown.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::dedup_key;
use crate::curation::Problem;
use crate::notebook::{CellKind, Notebook};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InfillError {
    #[error("cell index {index} out of range for notebook with {len} cells")]
    IndexOutOfRange { index: usize, len: usize },
}

/// The reserved control tokens. Only the Markdown/code distinction is driven
/// by data; the others pass through when a caller asks for them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControlCode {
    Markdown,
    Code,
    Function,
    Class,
    Import,
}

impl ControlCode {
    pub const ALL: [ControlCode; 5] = [
        ControlCode::Markdown,
        ControlCode::Code,
        ControlCode::Function,
        ControlCode::Class,
        ControlCode::Import,
    ];

    pub fn token(self) -> &'static str {
        match self {
            ControlCode::Markdown => "<markdown>",
            ControlCode::Code => "<code>",
            ControlCode::Function => "<function>",
            ControlCode::Class => "<class>",
            ControlCode::Import => "<import>",
        }
    }

    pub fn from_token(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.token() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    Code,
    Markdown,
}

impl TargetKind {
    pub fn of(kind: CellKind) -> Self {
        match kind {
            CellKind::Code => TargetKind::Code,
            CellKind::Markdown | CellKind::Raw => TargetKind::Markdown,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TargetKind::Code => "code",
            TargetKind::Markdown => "markdown",
        }
    }

    pub fn control_code(self) -> ControlCode {
        match self {
            TargetKind::Code => ControlCode::Code,
            TargetKind::Markdown => ControlCode::Markdown,
        }
    }
}

pub fn cell_open_tag(kind: TargetKind) -> String {
    format!("<cell:{}>", kind.as_str())
}

pub fn fill_tag(kind: TargetKind) -> String {
    format!("<fill:{}>", kind.as_str())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfillConfig {
    /// Number of preceding context cells.
    pub context_cells: usize,
    pub lookahead: bool,
    /// Extra control token written on the line after the fill tag.
    pub extra_control: Option<ControlCode>,
}

impl Default for InfillConfig {
    fn default() -> Self {
        InfillConfig {
            context_cells: 3,
            lookahead: true,
            extra_control: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfillExample {
    pub source: String,
    pub target: String,
    pub target_kind: TargetKind,
    /// Hex dedup key of the originating notebook.
    pub notebook: String,
    pub cell_index: usize,
    /// Context cells actually present in `source`.
    pub c: usize,
    /// Whether a following cell was appended.
    pub lookahead: bool,
}

struct Rendered {
    text: String,
    context_used: usize,
    lookahead_used: bool,
}

fn render(
    nb: &Notebook,
    target: usize,
    cfg: &InfillConfig,
    lookahead_cell: Option<usize>,
) -> Result<Rendered, InfillError> {
    let len = nb.cells.len();
    let check = |index: usize| {
        if index < len {
            Ok(())
        } else {
            Err(InfillError::IndexOutOfRange { index, len })
        }
    };
    check(target)?;
    if let Some(l) = lookahead_cell {
        check(l)?;
    }
    let context_used = cfg.context_cells.min(target);
    let mut blocks: Vec<String> = Vec::with_capacity(context_used + 3);
    for cell in &nb.cells[target - context_used..target] {
        blocks.push(cell_open_tag(TargetKind::of(cell.kind)));
        blocks.push(cell.source.clone());
    }
    blocks.push(fill_tag(TargetKind::of(nb.cells[target].kind)));
    if let Some(code) = cfg.extra_control {
        blocks.push(code.token().to_string());
    }
    let lookahead_used = cfg.lookahead && lookahead_cell.is_some();
    if lookahead_used {
        let cell = &nb.cells[lookahead_cell.unwrap_or_default()];
        blocks.push(cell_open_tag(TargetKind::of(cell.kind)));
        blocks.push(cell.source.clone());
    }
    Ok(Rendered {
        text: blocks.join("\n"),
        context_used,
        lookahead_used,
    })
}

fn next_cell(nb: &Notebook, target: usize) -> Option<usize> {
    (target + 1 < nb.cells.len()).then_some(target + 1)
}

pub fn serialize_context(nb: &Notebook, target_index: usize, cfg: &InfillConfig) -> Result<String, InfillError> {
    render(nb, target_index, cfg, next_cell(nb, target_index)).map(|r| r.text)
}

/// One example per cell, in cell order.
pub fn emit_infill_examples(nb: &Notebook, cfg: &InfillConfig) -> Vec<InfillExample> {
    let digest = dedup_key(nb).to_hex();
    nb.cells
        .iter()
        .map(|cell| {
            let r = render(nb, cell.index, cfg, next_cell(nb, cell.index))
                .expect("cell indices are in range");
            InfillExample {
                source: r.text,
                target: cell.source.clone(),
                target_kind: TargetKind::of(cell.kind),
                notebook: digest.clone(),
                cell_index: cell.index,
                c: r.context_used,
                lookahead: r.lookahead_used,
            }
        })
        .collect()
}

/// Prompt for a curated problem. The lookahead block is the grading cell,
/// wherever it sits, so the model sees the tests.
pub fn emit_eval_prompt(p: &Problem, nb: &Notebook, cfg: &InfillConfig) -> Result<String, InfillError> {
    render(nb, p.solution_cell_index, cfg, Some(p.grading_cell_index)).map(|r| r.text)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPrompt {
    pub problem_id: String,
    pub prompt: String,
    pub c: usize,
    pub lookahead: bool,
}

pub fn eval_prompt_record(p: &Problem, nb: &Notebook, cfg: &InfillConfig) -> Result<EvalPrompt, InfillError> {
    let r = render(nb, p.solution_cell_index, cfg, Some(p.grading_cell_index))?;
    Ok(EvalPrompt {
        problem_id: p.problem_id.clone(),
        prompt: r.text,
        c: r.context_used,
        lookahead: r.lookahead_used,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use CellKind::*;

    fn cfg(c: usize, lookahead: bool) -> InfillConfig {
        InfillConfig {
            context_cells: c,
            lookahead,
            extra_control: None,
        }
    }

    #[test]
    fn single_context_cell() {
        let nb = Notebook::from_cells([(Markdown, "Q"), (Code, "x=1")]);
        assert_eq!(
            serialize_context(&nb, 1, &cfg(1, false)).unwrap(),
            "<cell:markdown>\nQ\n<fill:code>"
        );
    }

    #[test]
    fn first_cell_has_no_context() {
        let nb = Notebook::from_cells([(Markdown, "Q"), (Code, "x=1")]);
        let s = serialize_context(&nb, 0, &cfg(3, false)).unwrap();
        assert_eq!(s, "<fill:markdown>");
        let s = serialize_context(&nb, 0, &cfg(3, true)).unwrap();
        assert_eq!(s, "<fill:markdown>\n<cell:code>\nx=1");
    }

    #[test]
    fn raw_cells_render_as_markdown() {
        let nb = Notebook::from_cells([(Raw, "r"), (Code, "x")]);
        assert_eq!(
            serialize_context(&nb, 1, &cfg(1, false)).unwrap(),
            "<cell:markdown>\nr\n<fill:code>"
        );
        assert_eq!(emit_infill_examples(&nb, &cfg(1, false))[0].target_kind, TargetKind::Markdown);
    }

    #[test]
    fn out_of_range() {
        let nb = Notebook::from_cells([(Code, "x")]);
        assert_eq!(
            serialize_context(&nb, 1, &cfg(1, false)),
            Err(InfillError::IndexOutOfRange { index: 1, len: 1 })
        );
    }

    #[test]
    fn one_example_per_cell() {
        let nb = Notebook::from_cells([(Markdown, "a"), (Code, "b"), (Code, "c"), (Markdown, "d"), (Code, "e")]);
        let ex = emit_infill_examples(&nb, &cfg(3, true));
        assert_eq!(ex.len(), 5);
        assert!(!ex[4].lookahead);
        assert!(ex[3].lookahead);
        assert_eq!(ex[4].c, 3);
        assert_eq!(ex[1].c, 1);
        assert!(ex.iter().zip(&nb.cells).all(|(e, c)| e.target == c.source));
    }

    #[test]
    fn extra_control_code_is_emitted() {
        let nb = Notebook::from_cells([(Markdown, "Q"), (Code, "def f(): pass")]);
        let c = InfillConfig {
            context_cells: 1,
            lookahead: false,
            extra_control: Some(ControlCode::Function),
        };
        assert_eq!(serialize_context(&nb, 1, &c).unwrap(), "<cell:markdown>\nQ\n<fill:code>\n<function>");
    }

    #[test]
    fn control_code_tokens() {
        let toks: Vec<_> = ControlCode::ALL.iter().map(|c| c.token()).collect();
        assert_eq!(toks, vec!["<markdown>", "<code>", "<function>", "<class>", "<import>"]);
        assert_eq!(ControlCode::from_token("<class>"), Some(ControlCode::Class));
        assert_eq!(ControlCode::from_token("<cell>"), None);
        assert_eq!(TargetKind::Code.control_code(), ControlCode::Code);
    }
}
