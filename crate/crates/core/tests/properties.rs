use nbharness::corpus::{dedup_key, markdown_focus_filter};
use nbharness::eval::{Candidate, CandidateSet};
use nbharness::genprovider::{load_candidates, save_candidates};
use nbharness::infill::{emit_infill_examples, InfillConfig};
use nbharness::metrics::pass_at_k;
use nbharness::notebook::{parse_notebook, serialize_notebook, CellKind, Notebook};
use proptest::prelude::*;
use std::path::Path;

fn kind() -> impl Strategy<Value = CellKind> {
    prop_oneof![Just(CellKind::Code), Just(CellKind::Markdown), Just(CellKind::Raw)]
}

fn notebook() -> impl Strategy<Value = Notebook> {
    prop::collection::vec((kind(), "[a-z =()\\n\"'#]{0,40}"), 0..12).prop_map(Notebook::from_cells)
}

proptest! {
    #[test]
    fn serialize_then_parse_keeps_cells(nb in notebook()) {
        let bytes = serialize_notebook(&nb);
        let back = parse_notebook(&bytes, Path::new("x.ipynb"), "r").unwrap();
        prop_assert_eq!(back.cells.len(), nb.cells.len());
        for (a, b) in back.cells.iter().zip(&nb.cells) {
            prop_assert_eq!(a.kind, b.kind);
            prop_assert_eq!(&a.source, &b.source);
        }
        prop_assert_eq!(dedup_key(&back), dedup_key(&nb));
    }

    #[test]
    fn dedup_key_ignores_metadata(nb in notebook(), tag in "[a-z]{1,8}") {
        let mut other = nb.clone();
        other.metadata.insert(tag.clone(), serde_json::json!(tag));
        other.repo_id = format!("{tag}/elsewhere");
        for c in &mut other.cells {
            c.metadata.insert("tags".into(), serde_json::json!([tag.clone()]));
        }
        prop_assert_eq!(dedup_key(&other), dedup_key(&nb));
    }

    #[test]
    fn dedup_key_sees_source_edits(nb in notebook()) {
        prop_assume!(!nb.cells.is_empty());
        let mut other = nb.clone();
        other.cells[0].source.push('!');
        prop_assert_ne!(dedup_key(&other), dedup_key(&nb));
    }

    #[test]
    fn filter_matches_integer_rule(nb in notebook()) {
        let counts = nb.cell_counts();
        let want = counts.code >= 1 && 3 * counts.markdown >= counts.total();
        prop_assert_eq!(markdown_focus_filter(&nb), want);
    }

    #[test]
    fn pass_at_k_is_monotone(n in 1usize..60, c_frac in 0.0f64..=1.0, k_frac in 0.0f64..=1.0) {
        let c = ((n as f64) * c_frac) as usize;
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        let v = pass_at_k::<f64>(n, c, k).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        if k < n {
            prop_assert!(pass_at_k::<f64>(n, c, k + 1).unwrap() >= v - 1e-15);
        }
        if c < n {
            prop_assert!(pass_at_k::<f64>(n, c + 1, k).unwrap() >= v - 1e-15);
        }
    }

    #[test]
    fn infill_examples_carry_one_fill_tag(nb in notebook(), c in 0usize..5, lookahead: bool) {
        let cfg = InfillConfig { context_cells: c, lookahead, extra_control: None };
        let examples = emit_infill_examples(&nb, &cfg);
        prop_assert_eq!(examples.len(), nb.cells.len());
        for (i, e) in examples.iter().enumerate() {
            // sources in the generator never contain '<'
            prop_assert_eq!(e.source.matches("<fill:").count(), 1);
            let opened = e.source.matches("<cell:").count();
            prop_assert_eq!(opened, e.c + usize::from(e.lookahead));
            prop_assert_eq!(e.c, c.min(i));
            prop_assert_eq!(e.lookahead, lookahead && i + 1 < nb.cells.len());
        }
    }

    #[test]
    fn candidates_round_trip(sets in prop::collection::vec(
        ("[a-f0-9]{6}:[0-9]", prop::collection::vec(("\\PC{0,30}", prop::option::of(-20.0f64..0.0)), 0..4)),
        0..6,
    )) {
        let mut seen = std::collections::HashSet::new();
        let sets: Vec<CandidateSet> = sets
            .into_iter()
            .filter(|(id, _)| seen.insert(id.clone()))
            .map(|(problem_id, cands)| CandidateSet {
                problem_id,
                candidates: cands
                    .into_iter()
                    .map(|(text, mean_token_logprob)| Candidate { text, mean_token_logprob })
                    .collect(),
            })
            .collect();
        let mut buf = Vec::new();
        save_candidates(&mut buf, &sets).unwrap();
        prop_assert_eq!(load_candidates(buf.as_slice()).unwrap(), sets);
    }
}
