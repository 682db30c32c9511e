use conmem::grid::{Grid, Puzzle};
use conmem::solver::TestPrediction;
use rand::rngs::StdRng;
use rand::Rng;

use super::{g, puzzle};

/// A small scoring instance: one puzzle plus candidate prediction lists.
#[derive(Debug, Clone)]
pub struct Instance {
    pub puzzle: Puzzle,
    pub candidates: Vec<Vec<TestPrediction>>,
}

fn tiny_grid(rng: &mut StdRng) -> Grid {
    let w = rng.gen_range(1..=2);
    let row: Vec<u8> = (0..w).map(|_| rng.gen_range(0..2)).collect();
    Grid::new(vec![row]).unwrap()
}

fn prediction(rng: &mut StdRng, expected: &Grid) -> TestPrediction {
    match rng.gen_range(0..4) {
        0 => TestPrediction::Error {
            message: "boom".into(),
        },
        1 => TestPrediction::Grid { grid: expected.clone() },
        _ => TestPrediction::Grid { grid: tiny_grid(rng) },
    }
}

pub fn random_puzzle(rng: &mut StdRng, id: &str, cases: usize) -> Puzzle {
    let test = (0..cases).map(|_| (tiny_grid(rng), tiny_grid(rng))).collect();
    puzzle(id, vec![(g(&[&[1]]), g(&[&[2]]))], test)
}

pub fn random_candidates(rng: &mut StdRng, p: &Puzzle, n: usize) -> Vec<Vec<TestPrediction>> {
    (0..n)
        .map(|_| {
            // Occasionally short: a candidate that stopped early.
            let len = if rng.gen_bool(0.1) { rng.gen_range(0..p.test.len()) } else { p.test.len() };
            p.test[..len]
                .iter()
                .map(|c| prediction(rng, c.expected.as_ref().unwrap()))
                .collect()
        })
        .collect()
}

/// Up to 4 test cases and 1 to 4 candidates.
pub fn random_instance(rng: &mut StdRng) -> Instance {
    let cases = rng.gen_range(1..=4);
    let puzzle = random_puzzle(rng, "r", cases);
    let n = rng.gen_range(1..=4);
    let candidates = random_candidates(rng, &puzzle, n);
    Instance { puzzle, candidates }
}

fn hit(candidate: &[TestPrediction], case: usize, expected: &Grid) -> bool {
    match candidate.get(case) {
        Some(TestPrediction::Grid { grid }) => grid.rows() == expected.rows(),
        _ => false,
    }
}

/// Double loop over (case, candidate).
pub fn brute_credits(p: &Puzzle, candidates: &[Vec<TestPrediction>]) -> Vec<u8> {
    let mut credits = Vec::new();
    for case in 0..p.test.len() {
        let expected = p.test[case].expected.as_ref().unwrap();
        let mut credit = 0;
        for c in candidates {
            if hit(c, case, expected) {
                credit = 1;
            }
        }
        credits.push(credit);
    }
    credits
}

pub fn brute_strict(p: &Puzzle, candidates: &[Vec<TestPrediction>]) -> u8 {
    for c in candidates {
        let mut all = true;
        for (case, t) in p.test.iter().enumerate() {
            all &= hit(c, case, t.expected.as_ref().unwrap());
        }
        if all {
            return 1;
        }
    }
    0
}

/// k-curve by enumerating run bitmasks: for each k, the mean pooled score
/// over masks with k bits set.
pub fn brute_k_curve(puzzles: &[Puzzle], runs: &[Vec<Vec<Vec<TestPrediction>>>]) -> Vec<f64> {
    let n = runs.len();
    let mut sums = vec![0.0; n + 1];
    let mut counts = vec![0usize; n + 1];
    for mask in 1u32..(1 << n) {
        let k = mask.count_ones() as usize;
        let mut total = 0.0;
        for (pi, p) in puzzles.iter().enumerate() {
            let pool: Vec<Vec<TestPrediction>> = (0..n)
                .filter(|r| mask & (1 << r) != 0)
                .flat_map(|r| runs[r][pi].clone())
                .collect();
            let credits = brute_credits(p, &pool);
            total += credits.iter().map(|&c| c as f64).sum::<f64>() / credits.len() as f64;
        }
        sums[k] += 100.0 * total / puzzles.len() as f64;
        counts[k] += 1;
    }
    (1..=n).map(|k| sums[k] / counts[k] as f64).collect()
}

/// Two test cases; A is right only on the first, B only on the second.
pub fn ab_split() -> Instance {
    let p = puzzle(
        "ab",
        vec![(g(&[&[1]]), g(&[&[2]]))],
        vec![(g(&[&[0]]), g(&[&[3]])), (g(&[&[1]]), g(&[&[4]]))],
    );
    let grid = |v: u8| TestPrediction::Grid { grid: g(&[&[v]]) };
    Instance {
        puzzle: p,
        candidates: vec![vec![grid(3), grid(9)], vec![grid(9), grid(4)]],
    }
}
