//! Ranking evaluation (Hits@k, MRR) and optional fusion with precomputed
//! literal embeddings.
//!
//! Candidates for each test entity are the test-side entities of the opposite
//! graph. Ranks use the symmetric alignment score, descending, with ties
//! broken by the lower entity id. Scores are computed block by block so the
//! full candidate matrix is never materialized.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{EalignError, Result};
use crate::trainer::InitTargets;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Kg1ToKg2,
    Kg2ToKg1,
    Average,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    pub hits_at: BTreeMap<usize, f64>,
    pub mrr: f64,
    pub num_test_pairs: usize,
    pub direction: Direction,
}

/// Precomputed literal embeddings keyed by global entity id. Entities absent
/// from the input file get a zero row, which contributes zero similarity.
#[derive(Debug, Clone)]
pub struct LiteralEmbeddings {
    pub matrix: Array2<f64>,
    pub present: Vec<bool>,
    pub missing: usize,
}

/// Reads a literal-embedding file: a header line `count dim`, then one line
/// per entity `id v_1 ... v_dim`, whitespace separated, ids global.
pub fn load_literal(path: &Path, num_entities: usize) -> Result<LiteralEmbeddings> {
    let file = std::fs::File::open(path).map_err(|e| EalignError::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| EalignError::parse(path, 1, "empty literal-embedding file"))?;
    let header = header.map_err(|e| EalignError::io(path, e))?;
    let mut it = header.split_whitespace();
    let count: usize = it
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| EalignError::parse(path, 1, "header must be `count dim`"))?;
    let dim: usize = it
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| EalignError::parse(path, 1, "header must be `count dim`"))?;

    let mut matrix = Array2::<f64>::zeros((num_entities, dim));
    let mut present = vec![false; num_entities];
    let mut seen = 0usize;
    for (idx, line) in lines {
        let line = line.map_err(|e| EalignError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let mut parts = line.split_whitespace();
        let id: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| EalignError::parse(path, lineno, "bad entity id"))?;
        if id >= num_entities {
            return Err(EalignError::parse(path, lineno, "entity id out of range"));
        }
        let mut row = matrix.row_mut(id);
        let mut m = 0;
        for p in parts {
            if m >= dim {
                return Err(EalignError::parse(path, lineno, "too many values"));
            }
            row[m] = p
                .parse()
                .map_err(|_| EalignError::parse(path, lineno, "bad float"))?;
            m += 1;
        }
        if m != dim {
            return Err(EalignError::parse(path, lineno, "too few values"));
        }
        present[id] = true;
        seen += 1;
    }
    if seen != count {
        return Err(EalignError::parse(path, 1, "header count does not match rows"));
    }
    let missing = num_entities - seen;
    Ok(LiteralEmbeddings {
        matrix,
        present,
        missing,
    })
}

fn normalize_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row.mapv_inplace(|x| x / n);
        }
    }
    out
}

/// Row-normalized live and frozen embeddings (plus optional literal rows) for
/// cheap repeated scoring. All rows are indexed by global entity id.
pub struct ScoreTable {
    fhat: Array2<f64>,
    that: Array2<f64>,
    lhat: Option<Array2<f64>>,
}

impl ScoreTable {
    pub fn new(
        final_emb: &Array2<f64>,
        targets: &InitTargets,
        literal: Option<&LiteralEmbeddings>,
    ) -> Self {
        ScoreTable {
            fhat: normalize_rows(final_emb),
            that: normalize_rows(targets.matrix()),
            lhat: literal.map(|l| normalize_rows(&l.matrix)),
        }
    }

    /// `sim(h^f_i, h^init_j) + sim(h^f_j, h^init_i)`, plus the literal cosine
    /// when literal embeddings were supplied.
    pub fn score(&self, i: u32, j: u32) -> f64 {
        let (i, j) = (i as usize, j as usize);
        let mut s = dot_rows(&self.fhat, i, &self.that, j) + dot_rows(&self.fhat, j, &self.that, i);
        if let Some(l) = &self.lhat {
            s += dot_rows(l, i, l, j);
        }
        s
    }
}

fn dot_rows(a: &Array2<f64>, i: usize, b: &Array2<f64>, j: usize) -> f64 {
    let ra = a.row(i);
    let rb = b.row(j);
    let mut s = 0.0;
    for m in 0..ra.len() {
        s += ra[m] * rb[m];
    }
    s
}

/// Adds the literal cosine of each (query, candidate) cell to a structural
/// score block. `lit_q` row r and `lit_c` row c hold the literal embeddings
/// of the block's r-th query and c-th candidate; zero rows contribute zero.
pub fn fuse_literal(
    structural: &Array2<f64>,
    lit_q: &Array2<f64>,
    lit_c: &Array2<f64>,
) -> Result<Array2<f64>> {
    let (nq, nc) = structural.dim();
    if lit_q.nrows() != nq || lit_c.nrows() != nc || lit_q.ncols() != lit_c.ncols() {
        return Err(EalignError::Contract("literal block shape mismatch".into()));
    }
    let qh = normalize_rows(lit_q);
    let ch = normalize_rows(lit_c);
    let mut fused = structural.clone();
    for q in 0..nq {
        for c in 0..nc {
            fused[[q, c]] += dot_rows(&qh, q, &ch, c);
        }
    }
    Ok(fused)
}

const RANK_BLOCK: usize = 1024;

/// Rank of each test pair's true counterpart among the test-side candidates
/// of the opposite graph, in `direction`. Rank 1 is best.
pub fn rank_all(
    table: &ScoreTable,
    test_pairs: &[(u32, u32)],
    direction: Direction,
) -> Result<Vec<usize>> {
    if test_pairs.is_empty() {
        return Err(EalignError::Invalid("no test pairs".into()));
    }
    let (queries, candidates): (Vec<(u32, u32)>, Vec<u32>) = match direction {
        Direction::Kg1ToKg2 => (
            test_pairs.iter().map(|&(a, b)| (a, b)).collect(),
            test_pairs.iter().map(|&(_, b)| b).collect(),
        ),
        Direction::Kg2ToKg1 => (
            test_pairs.iter().map(|&(a, b)| (b, a)).collect(),
            test_pairs.iter().map(|&(a, _)| a).collect(),
        ),
        Direction::Average => {
            return Err(EalignError::Contract(
                "rank_all needs a single direction".into(),
            ))
        }
    };

    let mut ranks = Vec::with_capacity(queries.len());
    for block in queries.chunks(RANK_BLOCK) {
        for &(q, truth) in block {
            let s_true = table.score(q, truth);
            let mut better = 0usize;
            for &c in &candidates {
                if c == truth {
                    continue;
                }
                let s = table.score(q, c);
                if s > s_true || (s == s_true && c < truth) {
                    better += 1;
                }
            }
            ranks.push(better + 1);
        }
    }
    Ok(ranks)
}

/// Hits@k for each requested k and MRR over a rank list.
pub fn metrics(ranks: &[usize], ks: &[usize], direction: Direction) -> Result<EvalResult> {
    if ranks.is_empty() {
        return Err(EalignError::Invalid("empty rank list".into()));
    }
    if ranks.iter().any(|&r| r == 0) {
        return Err(EalignError::Contract("ranks start at 1".into()));
    }
    let n = ranks.len() as f64;
    let mut hits_at = BTreeMap::new();
    for &k in ks {
        let h = ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        hits_at.insert(k, h);
    }
    let mrr = ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n;
    Ok(EvalResult {
        hits_at,
        mrr,
        num_test_pairs: ranks.len(),
        direction,
    })
}

/// End-to-end evaluation; `Direction::Average` averages the two directional
/// metric sets.
pub fn evaluate(
    final_emb: &Array2<f64>,
    targets: &InitTargets,
    test_pairs: &[(u32, u32)],
    ks: &[usize],
    direction: Direction,
    literal: Option<&LiteralEmbeddings>,
) -> Result<EvalResult> {
    let table = ScoreTable::new(final_emb, targets, literal);
    match direction {
        Direction::Average => {
            let a = metrics(&rank_all(&table, test_pairs, Direction::Kg1ToKg2)?, ks, direction)?;
            let b = metrics(&rank_all(&table, test_pairs, Direction::Kg2ToKg1)?, ks, direction)?;
            let hits_at = a
                .hits_at
                .iter()
                .map(|(&k, &v)| (k, (v + b.hits_at[&k]) / 2.0))
                .collect();
            Ok(EvalResult {
                hits_at,
                mrr: (a.mrr + b.mrr) / 2.0,
                num_test_pairs: test_pairs.len(),
                direction,
            })
        }
        d => metrics(&rank_all(&table, test_pairs, d)?, ks, d),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array1};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn targets_from(m: Array2<f64>) -> InitTargets {
        InitTargets::from_matrix(m)
    }

    fn random_table(n: usize, d: usize, seed: u64) -> (Array2<f64>, InitTargets) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
        let t = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
        (f, targets_from(t))
    }

    #[test]
    fn single_candidate_ranks_first() {
        let (f, t) = random_table(2, 4, 0);
        let table = ScoreTable::new(&f, &t, None);
        let ranks = rank_all(&table, &[(0, 1)], Direction::Kg1ToKg2).unwrap();
        assert_eq!(ranks, vec![1]);
    }

    /// Dense oracle: materialize the full score matrix, argsort each row
    /// descending with lowest-id tie-break, find the truth's position.
    fn dense_rank_oracle(
        table: &ScoreTable,
        test_pairs: &[(u32, u32)],
        direction: Direction,
    ) -> Vec<usize> {
        let (queries, candidates): (Vec<(u32, u32)>, Vec<u32>) = match direction {
            Direction::Kg1ToKg2 => (
                test_pairs.to_vec(),
                test_pairs.iter().map(|&(_, b)| b).collect(),
            ),
            Direction::Kg2ToKg1 => (
                test_pairs.iter().map(|&(a, b)| (b, a)).collect(),
                test_pairs.iter().map(|&(a, _)| a).collect(),
            ),
            Direction::Average => unreachable!(),
        };
        queries
            .iter()
            .map(|&(q, truth)| {
                let mut scored: Vec<(f64, u32)> =
                    candidates.iter().map(|&c| (table.score(q, c), c)).collect();
                scored.sort_by(|a, b| {
                    b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1))
                });
                scored.iter().position(|&(_, c)| c == truth).unwrap() + 1
            })
            .collect()
    }

    #[test]
    fn ranks_match_dense_argsort_oracle_bit_exact() {
        for seed in 0..3 {
            let n = 200;
            let (f, t) = random_table(2 * n, 6, seed);
            let pairs: Vec<(u32, u32)> = (0..n as u32).map(|i| (i, i + n as u32)).collect();
            let table = ScoreTable::new(&f, &t, None);
            for dir in [Direction::Kg1ToKg2, Direction::Kg2ToKg1] {
                let got = rank_all(&table, &pairs, dir).unwrap();
                let want = dense_rank_oracle(&table, &pairs, dir);
                assert_eq!(got, want);
            }
        }
    }

    #[test]
    fn candidate_order_does_not_change_ranks() {
        let n = 40;
        let (f, t) = random_table(2 * n, 5, 9);
        let pairs: Vec<(u32, u32)> = (0..n as u32).map(|i| (i, i + n as u32)).collect();
        let table = ScoreTable::new(&f, &t, None);
        let base = rank_all(&table, &pairs, Direction::Kg1ToKg2).unwrap();

        let mut shuffled = pairs.clone();
        shuffled.reverse();
        let rev = rank_all(&table, &shuffled, Direction::Kg1ToKg2).unwrap();
        let mut rev_back = rev;
        rev_back.reverse();
        assert_eq!(base, rev_back);
    }

    #[test]
    fn engineered_third_place() {
        // query 0's truth is candidate 5; candidates 4 and 6 score higher
        let mut f = Array2::<f64>::zeros((8, 2));
        let mut t = Array2::<f64>::zeros((8, 2));
        f.row_mut(0).assign(&array![1.0, 0.0]);
        for (c, v) in [(4usize, 0.9), (5, 0.5), (6, 0.8), (7, 0.1)] {
            t.row_mut(c).assign(&array![v, (1.0f64 - v * v).sqrt()]);
            f.row_mut(c).assign(&array![0.0, 1.0]);
        }
        t.row_mut(0).assign(&array![0.0, 1.0]);
        let table = ScoreTable::new(&f, &targets_from(t), None);
        let pairs = vec![(0u32, 5u32), (1, 4), (2, 6), (3, 7)];
        let ranks = rank_all(&table, &pairs, Direction::Kg1ToKg2).unwrap();
        assert_eq!(ranks[0], 3);
    }

    #[test]
    fn metric_hand_values() {
        let r = metrics(&[1, 1, 1], &[1, 10], Direction::Kg1ToKg2).unwrap();
        assert_abs_diff_eq!(r.hits_at[&1], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.mrr, 1.0, epsilon = 1e-15);

        let r = metrics(&[2, 2, 2], &[1, 10], Direction::Kg1ToKg2).unwrap();
        assert_abs_diff_eq!(r.hits_at[&1], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.hits_at[&10], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.mrr, 0.5, epsilon = 1e-15);

        let r = metrics(&[1, 2, 10], &[1, 10], Direction::Kg1ToKg2).unwrap();
        assert_abs_diff_eq!(r.hits_at[&1], 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.hits_at[&10], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.mrr, (1.0 + 0.5 + 0.1) / 3.0, epsilon = 1e-15);

        assert!(metrics(&[], &[1], Direction::Kg1ToKg2).is_err());
        assert!(metrics(&[0], &[1], Direction::Kg1ToKg2).is_err());
    }

    #[test]
    fn hits_monotone_and_bounded_by_mrr() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let ranks: Vec<usize> = (0..30).map(|_| rng.random_range(1..100)).collect();
            let r = metrics(&ranks, &[1, 5, 10, 50], Direction::Kg1ToKg2).unwrap();
            let hs: Vec<f64> = r.hits_at.values().copied().collect();
            for w in hs.windows(2) {
                assert!(w[0] <= w[1]);
            }
            assert!(r.hits_at[&1] <= r.mrr + 1e-15);
            assert!(r.mrr <= 1.0 + 1e-15);
        }
    }

    #[test]
    fn zero_literal_fusion_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = Array2::from_shape_fn((4, 6), |_| rng.random_range(-2.0..2.0));
        let lq = Array2::<f64>::zeros((4, 3));
        let lc = Array2::<f64>::zeros((6, 3));
        let fused = fuse_literal(&s, &lq, &lc).unwrap();
        assert_eq!(fused, s);
    }

    #[test]
    fn fusion_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = Array2::from_shape_fn((5, 7), |_| rng.random_range(-2.0..2.0));
        let lq = Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0));
        let lc = Array2::from_shape_fn((7, 3), |_| rng.random_range(-1.0..1.0));
        let fused = fuse_literal(&s, &lq, &lc).unwrap();
        for q in 0..5 {
            for c in 0..7 {
                let a: Array1<f64> = lq.row(q).to_owned();
                let b: Array1<f64> = lc.row(c).to_owned();
                let cos = a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt());
                assert_abs_diff_eq!(fused[[q, c]], s[[q, c]] + cos, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn identical_literals_boost_true_pair() {
        let n = 20;
        let (f, t) = random_table(2 * n, 5, 11);
        let pairs: Vec<(u32, u32)> = (0..n as u32).map(|i| (i, i + n as u32)).collect();

        // literal rows: true pairs share a one-hot vector, distinct per pair
        let mut lit = Array2::<f64>::zeros((2 * n, n));
        for i in 0..n {
            lit[[i, i]] = 1.0;
            lit[[i + n, i]] = 1.0;
        }
        let le = LiteralEmbeddings {
            matrix: lit,
            present: vec![true; 2 * n],
            missing: 0,
        };
        let without = rank_all(&ScoreTable::new(&f, &t, None), &pairs, Direction::Kg1ToKg2).unwrap();
        let with = rank_all(&ScoreTable::new(&f, &t, Some(&le)), &pairs, Direction::Kg1ToKg2).unwrap();
        for (w, o) in with.iter().zip(&without) {
            assert!(w <= o);
        }
    }

    #[test]
    fn literal_file_round_trip_and_missing_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lit.txt");
        std::fs::write(&path, "2 3\n0 1.0 0.5 -0.25\n2 0.0 1.0 2.0\n").unwrap();
        let le = load_literal(&path, 4).unwrap();
        assert_eq!(le.missing, 2);
        assert!(le.present[0] && !le.present[1] && le.present[2] && !le.present[3]);
        assert_eq!(le.matrix[[0, 2]], -0.25);
        assert_eq!(le.matrix.row(1).sum(), 0.0);

        std::fs::write(&path, "1 3\n0 1.0 0.5\n").unwrap();
        assert!(load_literal(&path, 4).is_err());
    }

    #[test]
    fn average_direction_averages_metrics() {
        let n = 30;
        let (f, t) = random_table(2 * n, 4, 13);
        let pairs: Vec<(u32, u32)> = (0..n as u32).map(|i| (i, i + n as u32)).collect();
        let a = evaluate(&f, &t, &pairs, &[1, 10], Direction::Kg1ToKg2, None).unwrap();
        let b = evaluate(&f, &t, &pairs, &[1, 10], Direction::Kg2ToKg1, None).unwrap();
        let avg = evaluate(&f, &t, &pairs, &[1, 10], Direction::Average, None).unwrap();
        assert_abs_diff_eq!(avg.mrr, (a.mrr + b.mrr) / 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(
            avg.hits_at[&1],
            (a.hits_at[&1] + b.hits_at[&1]) / 2.0,
            epsilon = 1e-15
        );
    }
}
