//! Scoring: the unbiased pass@k estimator, its per-k aggregation, a smoothed
//! BLEU-4 proxy for surface similarity, and rank correlation between the two.
//!
//! Everything is generic over the floating-point type; the crate root pins the
//! `f64` instantiations used by the rest of the toolkit.

use std::collections::BTreeMap;

use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("invalid pass@k arguments: n={n}, c={c}, k={k}")]
    InvalidArgs { n: usize, c: usize, k: usize },
    #[error("length mismatch: {0} pass rates vs {1} scores")]
    LengthMismatch(usize, usize),
}

fn cast<T: Float>(x: usize) -> T {
    T::from(x).expect("usize converts to float")
}

/// Probability that at least one of `k` samples drawn without replacement
/// from `n` (of which `c` are correct) is correct: `1 - C(n-c, k) / C(n, k)`.
///
/// Evaluated as `1 - prod_{i=n-c+1}^{n} (1 - k/i)`, which never forms a
/// binomial coefficient. Returns exactly 0 when `c == 0`, exactly 1 when
/// `n - c < k`, and exactly `c / n` when `k == 1`.
pub fn pass_at_k<T: Float>(n: usize, c: usize, k: usize) -> Result<T, MetricsError> {
    if k < 1 || k > n || c > n {
        return Err(MetricsError::InvalidArgs { n, c, k });
    }
    if c == 0 {
        return Ok(T::zero());
    }
    if n - c < k {
        return Ok(T::one());
    }
    if k == 1 {
        // the product telescopes to (n - c) / n; divide directly so pass@1 is exactly c/n
        return Ok(cast::<T>(c) / cast(n));
    }
    let kf: T = cast(k);
    let prod = (n - c + 1..=n).fold(T::one(), |acc, i| acc * (T::one() - kf / cast(i)));
    Ok(T::one() - prod)
}

/// Per-problem counts and pass@k values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassAtKResult<T> {
    pub problem_id: String,
    pub n: usize,
    pub c: usize,
    pub pass_at: BTreeMap<usize, T>,
}

impl<T: Float> PassAtKResult<T> {
    pub fn new(problem_id: impl Into<String>, n: usize, c: usize, ks: &[usize]) -> Result<Self, MetricsError> {
        let pass_at = ks
            .iter()
            .map(|&k| pass_at_k(n, c, k).map(|v| (k, v)))
            .collect::<Result<_, _>>()?;
        Ok(PassAtKResult {
            problem_id: problem_id.into(),
            n,
            c,
            pass_at,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassAtKTable<T> {
    pub problems: usize,
    pub pass_at: BTreeMap<usize, T>,
}

/// Mean pass@k over problems for each requested k. Every problem must have
/// at least `max(ks)` samples.
pub fn aggregate_pass_at_k<T: Float>(
    results: &[PassAtKResult<T>],
    ks: &[usize],
) -> Result<PassAtKTable<T>, MetricsError> {
    let max_k = ks.iter().copied().max().unwrap_or(0);
    if let Some(r) = results.iter().find(|r| r.n < max_k) {
        return Err(MetricsError::InvalidArgs { n: r.n, c: r.c, k: max_k });
    }
    let mut pass_at = BTreeMap::new();
    if !results.is_empty() {
        for &k in ks {
            let mut sum = T::zero();
            for r in results {
                sum = sum + pass_at_k::<T>(r.n, r.c, k)?;
            }
            pass_at.insert(k, sum / cast(results.len()));
        }
    }
    Ok(PassAtKTable {
        problems: results.len(),
        pass_at,
    })
}

// ---------------------------------------------------------------------------
// BLEU proxy

/// Splits code into identifier/number runs and single punctuation
/// characters; whitespace only separates.
pub fn code_tokens(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, ch) in text.char_indices() {
        let word = ch.is_alphanumeric() || ch == '_';
        if word {
            start.get_or_insert(i);
            continue;
        }
        if let Some(s) = start.take() {
            out.push(&text[s..i]);
        }
        if !ch.is_whitespace() {
            out.push(&text[i..i + ch.len_utf8()]);
        }
    }
    if let Some(s) = start {
        out.push(&text[s..]);
    }
    out
}

fn ngram_counts<'a, 'b>(tokens: &'b [&'a str], n: usize) -> BTreeMap<&'b [&'a str], usize> {
    let mut m = BTreeMap::new();
    for w in tokens.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

/// Smoothed sentence BLEU-4 between a candidate and one reference.
///
/// Unigram precision is unsmoothed; 2- to 4-gram precisions use add-one
/// smoothing `(matches + 1) / (total + 1)`. The brevity penalty is
/// `exp(1 - r/c)` when the candidate is shorter than the reference.
pub fn bleu_proxy<T: Float>(candidate: &str, reference: &str) -> T {
    let cand = code_tokens(candidate);
    let refs = code_tokens(reference);
    if cand.is_empty() {
        return if refs.is_empty() { T::one() } else { T::zero() };
    }
    let mut log_sum = T::zero();
    for n in 1..=4 {
        let c_counts = ngram_counts(&cand, n);
        let r_counts = ngram_counts(&refs, n);
        let total: usize = c_counts.values().sum();
        let matches: usize = c_counts
            .iter()
            .map(|(g, &cnt)| cnt.min(r_counts.get(g).copied().unwrap_or(0)))
            .sum();
        let p: T = if n == 1 {
            if matches == 0 {
                return T::zero();
            }
            cast::<T>(matches) / cast(total)
        } else {
            cast::<T>(matches + 1) / cast(total + 1)
        };
        log_sum = log_sum + p.ln();
    }
    let geo = (log_sum / cast(4)).exp();
    let (c, r) = (cand.len(), refs.len());
    let bp = if c < r {
        (T::one() - cast::<T>(r) / cast(c)).exp()
    } else {
        T::one()
    };
    bp * geo
}

// ---------------------------------------------------------------------------
// Rank correlation

/// Average (1-based) ranks; tied values share the mean of their positions.
pub fn average_ranks<T: Float>(values: &[T]) -> Vec<T> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![T::zero(); values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = cast::<T>(i + j + 2) / cast(2);
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson<T: Float>(x: &[T], y: &[T]) -> Option<T> {
    let n: T = cast(x.len());
    let mx = x.iter().fold(T::zero(), |a, &v| a + v) / n;
    let my = y.iter().fold(T::zero(), |a, &v| a + v) / n;
    let (mut sxy, mut sxx, mut syy) = (T::zero(), T::zero(), T::zero());
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy = sxy + dx * dy;
        sxx = sxx + dx * dx;
        syy = syy + dy * dy;
    }
    if sxx == T::zero() || syy == T::zero() {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Spearman's rho as the Pearson correlation of average ranks. `None` when
/// fewer than two points or either side is constant.
pub fn spearman<T: Float>(x: &[T], y: &[T]) -> Result<Option<T>, MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Ok(None);
    }
    Ok(pearson(&average_ranks(x), &average_ranks(y)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint<T> {
    /// Position of the problem in the input lists.
    pub index: usize,
    pub pass_rate: T,
    pub mean_bleu: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport<T> {
    /// Problems in ascending pass-rate order (stable on ties).
    pub curve: Vec<CurvePoint<T>>,
    pub spearman: Option<T>,
}

pub fn correlation_report<T: Float>(
    pass_rates: &[T],
    mean_bleu: &[T],
) -> Result<CorrelationReport<T>, MetricsError> {
    let rho = spearman(pass_rates, mean_bleu)?;
    let mut curve: Vec<CurvePoint<T>> = pass_rates
        .iter()
        .zip(mean_bleu)
        .enumerate()
        .map(|(index, (&pass_rate, &mean_bleu))| CurvePoint {
            index,
            pass_rate,
            mean_bleu,
        })
        .collect();
    curve.sort_by(|a, b| {
        a.pass_rate
            .partial_cmp(&b.pass_rate)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok(CorrelationReport { curve, spearman: rho })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pass_at_k_spot_values() {
        assert!((pass_at_k::<f64>(5, 2, 3).unwrap() - 0.9).abs() < 1e-12);
        assert!((pass_at_k::<f64>(4, 1, 2).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(pass_at_k::<f64>(100, 0, 10).unwrap(), 0.0);
        assert_eq!(pass_at_k::<f64>(10, 8, 3).unwrap(), 1.0);
        assert!((pass_at_k::<f32>(5, 2, 3).unwrap() - 0.9).abs() < 1e-6);
    }

    #[test]
    fn pass_at_k_rejects_bad_args() {
        assert!(pass_at_k::<f64>(3, 1, 4).is_err());
        assert!(pass_at_k::<f64>(3, 1, 0).is_err());
        assert!(pass_at_k::<f64>(3, 4, 1).is_err());
    }

    #[test]
    fn large_n_is_stable() {
        let v = pass_at_k::<f64>(200, 1, 100).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
        let v = pass_at_k::<f64>(1000, 3, 1).unwrap();
        assert!((v - 0.003).abs() < 1e-15);
    }

    #[test]
    fn aggregation() {
        let a = PassAtKResult::<f64>::new("a", 5, 1, &[1]).unwrap();
        let b = PassAtKResult::<f64>::new("b", 5, 2, &[1]).unwrap();
        let t = aggregate_pass_at_k(&[a.clone(), b], &[1]).unwrap();
        assert!((t.pass_at[&1] - 0.3).abs() < 1e-12);
        assert_eq!(t.problems, 2);
        assert!(aggregate_pass_at_k(&[a], &[1, 10]).is_err());

        let all = vec![
            PassAtKResult::<f64>::new("x", 4, 4, &[]).unwrap(),
            PassAtKResult::<f64>::new("y", 7, 7, &[]).unwrap(),
        ];
        let t = aggregate_pass_at_k(&all, &[1, 2, 4]).unwrap();
        assert!(t.pass_at.values().all(|&v| v == 1.0));
    }

    #[test]
    fn tokens() {
        assert_eq!(code_tokens("df['a']=x_1 + 2"), vec!["df", "[", "'", "a", "'", "]", "=", "x_1", "+", "2"]);
        assert!(code_tokens("  \n\t").is_empty());
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        assert_eq!(bleu_proxy::<f64>("x = foo(1)", "x = foo(1)"), 1.0);
        assert_eq!(bleu_proxy::<f64>("a", "a"), 1.0);
        assert!(bleu_proxy::<f64>("alpha beta", "gamma delta") < 0.05);
        assert_eq!(bleu_proxy::<f64>("", "x"), 0.0);
    }

    #[test]
    fn bleu_brevity_penalty() {
        // Candidate is a strict prefix: every precision is 1, only BP applies.
        let got = bleu_proxy::<f64>("a b", "a b c d");
        assert!((got - (1.0f64 - 2.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn ranks_with_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 20.0, 5.0]), vec![2.0, 3.5, 3.5, 1.0]);
    }

    #[test]
    fn correlation_extremes() {
        let x = [0.1, 0.2, 0.3, 0.9];
        let up = [1.0, 2.0, 3.0, 4.0];
        let down = [4.0, 3.0, 2.0, 1.0];
        assert!((spearman(&x, &up).unwrap().unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&x, &down).unwrap().unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&x, &[1.0, 1.0, 1.0, 1.0]).unwrap(), None);
        assert!(matches!(spearman(&x, &up[..3]), Err(MetricsError::LengthMismatch(4, 3))));
    }

    #[test]
    fn curve_is_sorted_by_pass_rate() {
        let r = correlation_report(&[0.5, 0.1, 0.9], &[0.2, 0.3, 0.4]).unwrap();
        assert_eq!(r.curve.iter().map(|p| p.index).collect::<Vec<_>>(), vec![1, 0, 2]);
    }
}
