//! Corpus scanning: walk a tree of cloned repositories, parse every notebook,
//! drop held-out repositories, and count what survives.

use std::collections::HashSet;
use std::fmt;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use num_rational::Ratio;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;
use walkdir::WalkDir;

use crate::notebook::{parse_notebook, CellKind, Notebook};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus root not found: {0}")]
    RootNotFound(PathBuf),
    #[error("reading holdout list: {0}")]
    Holdout(#[from] std::io::Error),
}

/// SHA-256 over a notebook's ordered `(kind, source)` sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NotebookDigest(pub [u8; 32]);

impl NotebookDigest {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for NotebookDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Content key used for exact deduplication. Metadata, outputs, execution
/// counts and the file path do not contribute. Each source is length-prefixed
/// so cell boundaries cannot be shifted without changing the key.
pub fn dedup_key(nb: &Notebook) -> NotebookDigest {
    let mut h = Sha256::new();
    for cell in &nb.cells {
        let tag: u8 = match cell.kind {
            CellKind::Code => b'c',
            CellKind::Markdown => b'm',
            CellKind::Raw => b'r',
        };
        h.update([tag]);
        h.update((cell.source.len() as u64).to_le_bytes());
        h.update(cell.source.as_bytes());
    }
    NotebookDigest(h.finalize().into())
}

/// True iff the notebook has a code cell and at least a third of its cells
/// (raw cells included in the denominator) are Markdown.
pub fn markdown_focus_filter(nb: &Notebook) -> bool {
    let counts = nb.cell_counts();
    counts.code >= 1 && Ratio::new(counts.markdown, counts.total()) >= Ratio::new(1, 3)
}

/// Repositories excluded from the corpus. Lookups ignore case.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HoldoutList {
    repo_ids: HashSet<String>,
}

impl HoldoutList {
    pub fn new<I, S>(ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        HoldoutList {
            repo_ids: ids
                .into_iter()
                .map(|s| s.as_ref().trim().to_lowercase())
                .filter(|s| !s.is_empty())
                .collect(),
        }
    }

    /// One repo id per line; `#` starts a comment.
    pub fn from_reader(r: impl BufRead) -> std::io::Result<Self> {
        let mut ids = Vec::new();
        for line in r.lines() {
            let line = line?;
            let id = line.split('#').next().unwrap_or("").trim();
            if !id.is_empty() {
                ids.push(id.to_string());
            }
        }
        Ok(Self::new(ids))
    }

    pub fn from_path(path: &Path) -> Result<Self, CorpusError> {
        let f = std::fs::File::open(path)?;
        Ok(Self::from_reader(std::io::BufReader::new(f))?)
    }

    pub fn contains(&self, repo_id: &str) -> bool {
        self.repo_ids.contains(&repo_id.to_lowercase())
    }

    pub fn len(&self) -> usize {
        self.repo_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.repo_ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub repo_count: usize,
    pub notebook_count: usize,
    pub unique_notebook_count: usize,
    pub cell_count: usize,
    pub code_cell_count: usize,
    pub markdown_cell_count: usize,
    pub markdown_cell_share: f64,
    /// Files that failed to parse.
    pub skipped: usize,
    pub holdout_excluded: usize,
    /// Parsed notebooks rejected by the Markdown-focused filter.
    pub filtered_out: usize,
}

#[derive(Debug, Clone)]
pub struct ScanOptions {
    pub holdout: HoldoutList,
    pub markdown_focused: bool,
    /// Number of leading directories under the root that name a repository.
    pub repo_depth: usize,
}

impl Default for ScanOptions {
    fn default() -> Self {
        ScanOptions {
            holdout: HoldoutList::default(),
            markdown_focused: false,
            repo_depth: 2,
        }
    }
}

/// `owner/name` from the leading directories of `rel`; `.` for files that
/// sit directly under the root.
pub fn repo_id_for(rel: &Path, depth: usize) -> String {
    let dirs: Vec<_> = rel
        .parent()
        .map(|p| {
            p.components()
                .filter_map(|c| c.as_os_str().to_str())
                .take(depth)
                .collect()
        })
        .unwrap_or_default();
    if dirs.is_empty() {
        ".".to_string()
    } else {
        dirs.join("/")
    }
}

/// All `.ipynb` files under `root` in sorted order, skipping Jupyter
/// checkpoint directories.
pub fn notebook_files(root: &Path) -> Result<Vec<PathBuf>, CorpusError> {
    if !root.is_dir() {
        return Err(CorpusError::RootNotFound(root.to_path_buf()));
    }
    let mut files: Vec<PathBuf> = WalkDir::new(root)
        .sort_by_file_name()
        .into_iter()
        .filter_entry(|e| e.file_name() != ".ipynb_checkpoints")
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .filter(|p| p.extension().is_some_and(|x| x == "ipynb"))
        .collect();
    files.sort();
    Ok(files)
}

#[derive(Debug, Default)]
struct Tally {
    repos: HashSet<String>,
    digests: HashSet<NotebookDigest>,
    notebooks: usize,
    cells: usize,
    code: usize,
    markdown: usize,
    skipped: usize,
    holdout: usize,
    filtered: usize,
}

impl Tally {
    fn merge(mut self, other: Tally) -> Tally {
        self.repos.extend(other.repos);
        self.digests.extend(other.digests);
        self.notebooks += other.notebooks;
        self.cells += other.cells;
        self.code += other.code;
        self.markdown += other.markdown;
        self.skipped += other.skipped;
        self.holdout += other.holdout;
        self.filtered += other.filtered;
        self
    }

    fn into_stats(self) -> CorpusStats {
        CorpusStats {
            repo_count: self.repos.len(),
            notebook_count: self.notebooks,
            unique_notebook_count: self.digests.len(),
            cell_count: self.cells,
            code_cell_count: self.code,
            markdown_cell_count: self.markdown,
            markdown_cell_share: if self.cells == 0 {
                0.0
            } else {
                self.markdown as f64 / self.cells as f64
            },
            skipped: self.skipped,
            holdout_excluded: self.holdout,
            filtered_out: self.filtered,
        }
    }
}

/// Parses every surviving notebook in parallel and hands it to `sink` in no
/// particular order. Counters merge associatively, so the returned stats do
/// not depend on scheduling.
pub fn scan_corpus_each<F>(root: &Path, opts: &ScanOptions, sink: F) -> Result<CorpusStats, CorpusError>
where
    F: Fn(Notebook) + Sync,
{
    let files = notebook_files(root)?;
    let tally = files
        .par_iter()
        .fold(Tally::default, |mut t, path| {
            let rel = path.strip_prefix(root).unwrap_or(path);
            let repo_id = repo_id_for(rel, opts.repo_depth);
            if opts.holdout.contains(&repo_id) {
                t.holdout += 1;
                return t;
            }
            let nb = match std::fs::read(path)
                .ok()
                .and_then(|b| parse_notebook(&b, path.clone(), repo_id.clone()).ok())
            {
                Some(nb) => nb,
                None => {
                    t.skipped += 1;
                    return t;
                }
            };
            if opts.markdown_focused && !markdown_focus_filter(&nb) {
                t.filtered += 1;
                return t;
            }
            let counts = nb.cell_counts();
            t.notebooks += 1;
            t.cells += counts.total();
            t.code += counts.code;
            t.markdown += counts.markdown;
            t.digests.insert(dedup_key(&nb));
            t.repos.insert(repo_id);
            sink(nb);
            t
        })
        .reduce(Tally::default, Tally::merge);
    Ok(tally.into_stats())
}

#[derive(Debug, Clone)]
pub struct CorpusScan {
    /// Surviving notebooks sorted by path.
    pub notebooks: Vec<Notebook>,
    pub stats: CorpusStats,
}

impl CorpusScan {
    /// First notebook (in path order) for every distinct dedup key.
    pub fn unique(&self) -> Vec<&Notebook> {
        let mut seen = HashSet::new();
        self.notebooks
            .iter()
            .filter(|nb| seen.insert(dedup_key(nb)))
            .collect()
    }
}

pub fn scan_corpus(root: &Path, opts: &ScanOptions) -> Result<CorpusScan, CorpusError> {
    let out = Mutex::new(Vec::new());
    let stats = scan_corpus_each(root, opts, |nb| out.lock().unwrap().push(nb))?;
    let mut notebooks = out.into_inner().unwrap();
    notebooks.sort_by(|a, b| a.source_path.cmp(&b.source_path));
    Ok(CorpusScan { notebooks, stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::notebook::Notebook;
    use CellKind::*;

    fn nb(kinds: &[CellKind]) -> Notebook {
        Notebook::from_cells(kinds.iter().map(|&k| (k, "x")))
    }

    #[test]
    fn markdown_filter_boundaries() {
        assert!(markdown_focus_filter(&nb(&[Code, Code, Markdown])));
        assert!(!markdown_focus_filter(&nb(&[Markdown, Markdown, Markdown])));
        assert!(!markdown_focus_filter(&nb(&[Code, Code, Code, Markdown])));
        assert!(!markdown_focus_filter(&nb(&[])));
        // raw cells count toward the denominator
        assert!(!markdown_focus_filter(&nb(&[Code, Raw, Raw, Markdown])));
    }

    #[test]
    fn dedup_key_sensitivity() {
        let a = Notebook::from_cells([(Code, "x = 1"), (Markdown, "hi")]);
        let mut b = a.clone();
        b.cells[0].metadata.insert("tags".into(), serde_json::json!(["t"]));
        b.source_path = "elsewhere.ipynb".into();
        assert_eq!(dedup_key(&a), dedup_key(&b));

        let swapped = Notebook::from_cells([(Markdown, "hi"), (Code, "x = 1")]);
        assert_ne!(dedup_key(&a), dedup_key(&swapped));

        let edited = Notebook::from_cells([(Code, "x = 2"), (Markdown, "hi")]);
        assert_ne!(dedup_key(&a), dedup_key(&edited));

        let rekinded = Notebook::from_cells([(Markdown, "x = 1"), (Markdown, "hi")]);
        assert_ne!(dedup_key(&a), dedup_key(&rekinded));

        let shifted = Notebook::from_cells([(Code, "x = 1h"), (Markdown, "i")]);
        assert_ne!(dedup_key(&a), dedup_key(&shifted));
    }

    #[test]
    fn holdout_is_case_insensitive_and_skips_comments() {
        let h = HoldoutList::from_reader("# held out\nAlice/Repo  # dev set\n\nbob/x\n".as_bytes())
            .unwrap();
        assert_eq!(h.len(), 2);
        assert!(h.contains("alice/repo"));
        assert!(h.contains("ALICE/REPO"));
        assert!(h.contains("Bob/X"));
        assert!(!h.contains("carol/y"));
    }

    #[test]
    fn repo_ids_from_paths() {
        assert_eq!(repo_id_for(Path::new("alice/hw/sub/n.ipynb"), 2), "alice/hw");
        assert_eq!(repo_id_for(Path::new("alice/n.ipynb"), 2), "alice");
        assert_eq!(repo_id_for(Path::new("n.ipynb"), 2), ".");
        assert_eq!(repo_id_for(Path::new("a/b/c/n.ipynb"), 1), "a");
    }

    #[test]
    fn missing_root() {
        assert!(matches!(
            scan_corpus(Path::new("/definitely/not/here"), &ScanOptions::default()),
            Err(CorpusError::RootNotFound(_))
        ));
    }
}
