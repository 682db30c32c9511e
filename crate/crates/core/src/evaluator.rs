//! Scoring: oracle@k with per-test-case credit, strict scoring, multi-run
//! aggregation and report tables.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{grids_equal, Grid, Puzzle};
use crate::solver::TestPrediction;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EvalError {
    #[error("puzzle {puzzle_id} has no expected output for test case {index}")]
    MissingExpectedOutput { puzzle_id: String, index: usize },
    #[error("no candidates supplied")]
    NoCandidates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PuzzleScore {
    pub puzzle_id: String,
    pub per_test_case_credit: Vec<u8>,
    pub fraction: f64,
    pub k_used: usize,
}

pub fn expected_outputs(puzzle: &Puzzle) -> Result<Vec<&Grid>, EvalError> {
    puzzle.expected_outputs().map_err(|index| EvalError::MissingExpectedOutput {
        puzzle_id: puzzle.id.clone(),
        index,
    })
}

fn correct(candidate: &[TestPrediction], case: usize, expected: &Grid) -> bool {
    candidate
        .get(case)
        .and_then(TestPrediction::grid)
        .is_some_and(|g| grids_equal(g, expected))
}

/// Credit 1 for a test case if any candidate predicts it exactly.
pub fn oracle_at_k(puzzle: &Puzzle, candidates: &[Vec<TestPrediction>]) -> Result<PuzzleScore, EvalError> {
    if candidates.is_empty() {
        return Err(EvalError::NoCandidates);
    }
    let expected = expected_outputs(puzzle)?;
    let credits: Vec<u8> = expected
        .iter()
        .enumerate()
        .map(|(t, e)| u8::from(candidates.iter().any(|c| correct(c, t, e))))
        .collect();
    let fraction = credits.iter().map(|&c| f64::from(c)).sum::<f64>() / credits.len() as f64;
    Ok(PuzzleScore {
        puzzle_id: puzzle.id.clone(),
        per_test_case_credit: credits,
        fraction,
        k_used: candidates.len(),
    })
}

/// 1 if one single candidate is correct on every test case.
pub fn strict_score(puzzle: &Puzzle, attempts: &[Vec<TestPrediction>]) -> Result<u8, EvalError> {
    let expected = expected_outputs(puzzle)?;
    Ok(u8::from(attempts.iter().any(|a| {
        expected.iter().enumerate().all(|(t, e)| correct(a, t, e))
    })))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub sample_stddev: f64,
    /// True when stddev is 0 only because there was a single run.
    pub single_run: bool,
}

impl Aggregate {
    /// `mean (stddev)` with two decimals.
    pub fn display(&self) -> String {
        format!("{:.2} ({:.2})", self.mean, self.sample_stddev)
    }
}

/// Arithmetic mean and sample (n-1) standard deviation.
pub fn aggregate_runs(scores: &[f64]) -> Aggregate {
    assert!(!scores.is_empty(), "aggregate_runs needs at least one score");
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    if scores.len() == 1 {
        return Aggregate {
            mean,
            sample_stddev: 0.0,
            single_run: true,
        };
    }
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Aggregate {
        mean,
        sample_stddev: var.sqrt(),
        single_run: false,
    }
}

/// All size-`k` subsets of `0..n` in lexicographic order.
pub fn index_subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            if n - i < k - cur.len() {
                break;
            }
            cur.push(i);
            go(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if k <= n {
        go(0, n, k, &mut Vec::new(), &mut out);
    }
    out
}

/// One run's candidates: for each puzzle (in `puzzles` order), the
/// candidates that run produced.
pub type RunCandidates = Vec<Vec<Vec<TestPrediction>>>;

/// Score ×100 of pooling the given runs' candidates, averaged over puzzles.
pub fn pooled_score(puzzles: &[Puzzle], runs: &[&RunCandidates]) -> Result<f64, EvalError> {
    if puzzles.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (p, puzzle) in puzzles.iter().enumerate() {
        let pool: Vec<Vec<TestPrediction>> = runs.iter().flat_map(|r| r[p].iter().cloned()).collect();
        total += if pool.is_empty() {
            expected_outputs(puzzle)?;
            0.0
        } else {
            oracle_at_k(puzzle, &pool)?.fraction
        };
    }
    Ok(100.0 * total / puzzles.len() as f64)
}

/// Score for k = 1..=K: the mean over all size-k subsets of the K runs.
pub fn oracle_k_curve(puzzles: &[Puzzle], runs: &[RunCandidates]) -> Result<Vec<f64>, EvalError> {
    (1..=runs.len())
        .map(|k| {
            let subsets = index_subsets(runs.len(), k);
            let mut sum = 0.0;
            for s in &subsets {
                let chosen: Vec<&RunCandidates> = s.iter().map(|&i| &runs[i]).collect();
                sum += pooled_score(puzzles, &chosen)?;
            }
            Ok(sum / subsets.len() as f64)
        })
        .collect()
}

/// Per-candidate, per-test-case correctness (1/0) for one puzzle.
pub fn credit_matrix(puzzle: &Puzzle, candidates: &[Vec<TestPrediction>]) -> Result<Vec<Vec<u8>>, EvalError> {
    let expected = expected_outputs(puzzle)?;
    Ok(candidates
        .iter()
        .map(|c| {
            expected
                .iter()
                .enumerate()
                .map(|(t, e)| u8::from(correct(c, t, e)))
                .collect()
        })
        .collect())
}

/// Stored credits of one run: puzzle id to (test case count, candidate
/// credit rows).
pub type RunCredits = std::collections::BTreeMap<String, (usize, Vec<Vec<u8>>)>;

fn pooled_from_credits(runs: &[&RunCredits]) -> f64 {
    let Some(first) = runs.first() else { return 0.0 };
    if first.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for (id, (cases, _)) in first.iter() {
        let rows: Vec<&Vec<u8>> = runs
            .iter()
            .filter_map(|r| r.get(id))
            .flat_map(|(_, rows)| rows.iter())
            .collect();
        let credited = (0..*cases)
            .filter(|&t| rows.iter().any(|r| r.get(t) == Some(&1)))
            .count();
        total += credited as f64 / (*cases).max(1) as f64;
    }
    100.0 * total / first.len() as f64
}

/// Same subset averaging as [`oracle_k_curve`], from stored credits.
pub fn k_curve_from_credits(runs: &[RunCredits]) -> Vec<f64> {
    (1..=runs.len())
        .map(|k| {
            let subsets = index_subsets(runs.len(), k);
            let sum: f64 = subsets
                .iter()
                .map(|s| pooled_from_credits(&s.iter().map(|&i| &runs[i]).collect::<Vec<_>>()))
                .sum();
            sum / subsets.len() as f64
        })
        .collect()
}

/// Per-run figures that feed the report tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub score: f64,
    pub strict_score: f64,
    pub solving_tokens: u64,
    pub total_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportFiles {
    pub scores_csv: String,
    pub k_curve_csv: String,
    pub token_vs_score_csv: String,
    pub summary_txt: String,
}

impl ReportFiles {
    pub fn files(&self) -> [(&'static str, &str); 4] {
        [
            ("scores.csv", &self.scores_csv),
            ("k_curve.csv", &self.k_curve_csv),
            ("token_vs_score.csv", &self.token_vs_score_csv),
            ("summary.txt", &self.summary_txt),
        ]
    }
}

pub fn build_report(runs: &[RunSummary], k_curve: &[f64]) -> ReportFiles {
    let mut scores_csv = String::from("run_id,score,strict_score,solving_tokens,total_tokens\n");
    let mut token_csv = String::from("run_id,solving_tokens,score\n");
    for r in runs {
        scores_csv.push_str(&format!(
            "{},{:.2},{:.2},{},{}\n",
            r.run_id, r.score, r.strict_score, r.solving_tokens, r.total_tokens
        ));
        token_csv.push_str(&format!("{},{},{:.2}\n", r.run_id, r.solving_tokens, r.score));
    }
    let mut k_csv = String::from("k,score\n");
    for (i, s) in k_curve.iter().enumerate() {
        k_csv.push_str(&format!("{},{:.2}\n", i + 1, s));
    }
    let mut summary = String::new();
    if !runs.is_empty() {
        let single = aggregate_runs(&runs.iter().map(|r| r.score).collect::<Vec<_>>());
        let strict = aggregate_runs(&runs.iter().map(|r| r.strict_score).collect::<Vec<_>>());
        summary.push_str(&format!("runs: {}\n", runs.len()));
        summary.push_str(&format!("single-run score: {}\n", single.display()));
        summary.push_str(&format!("strict score: {}\n", strict.display()));
        if single.single_run {
            summary.push_str("note: one run only, standard deviation reported as 0\n");
        }
        for (i, s) in k_curve.iter().enumerate() {
            summary.push_str(&format!("oracle@{}: {:.2}\n", i + 1, s));
        }
    }
    ReportFiles {
        scores_csv,
        k_curve_csv: k_csv,
        token_vs_score_csv: token_csv,
        summary_txt: summary,
    }
}
