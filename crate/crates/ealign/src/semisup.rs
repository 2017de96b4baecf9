//! Incremental semi-supervised training: alternate short training runs with
//! bi-directional mutual-nearest-neighbor pair generation and a review step
//! that re-trains previously learned pairs whose similarity drifted.
//!
//! Each outer iteration trains only on the freshly generated and reviewed
//! pairs, never on the union of everything seen so far. The frozen alignment
//! targets from the initial model are shared by all iterations.

use std::collections::{BTreeSet, HashMap};

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::encoder::ModelParams;
use crate::error::{EalignError, Result};
use crate::eval::{evaluate, Direction, ScoreTable};
use crate::kg::{JointGraph, SeedAlignment};
use crate::trainer::{
    compute_targets, cosine_sim, fit, full_final, FitReport, InitTargets, TrainConfig, TrainState,
};

/// Embedding snapshots of every pair at the end of the iteration that last
/// trained it. Snapshots are overwritten when a pair is re-trained.
#[derive(Debug, Clone, Default)]
pub struct PairMemory {
    snapshots: HashMap<(u32, u32), (Array1<f64>, Array1<f64>)>,
}

impl PairMemory {
    pub fn store(&mut self, pairs: &[(u32, u32)], final_emb: &Array2<f64>) {
        for &(i, j) in pairs {
            self.snapshots.insert(
                (i, j),
                (
                    final_emb.row(i as usize).to_owned(),
                    final_emb.row(j as usize).to_owned(),
                ),
            );
        }
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    /// Pairs whose pairwise cosine dropped by strictly more than `epsilon`
    /// since their snapshot.
    pub fn review(&self, final_emb: &Array2<f64>, epsilon: f64) -> Result<Vec<(u32, u32)>> {
        let mut out = Vec::new();
        for (&(i, j), (si, sj)) in &self.snapshots {
            let then = cosine_sim(si.view(), sj.view())?;
            let now = cosine_sim(final_emb.row(i as usize), final_emb.row(j as usize))?;
            if then - now > epsilon {
                out.push((i, j));
            }
        }
        out.sort_unstable();
        Ok(out)
    }
}

/// Entities of each graph not yet claimed by any seed or generated pair.
#[derive(Debug, Clone)]
pub struct CandidatePools {
    pub pool1: BTreeSet<u32>,
    pub pool2: BTreeSet<u32>,
}

impl CandidatePools {
    /// All entities except those in `claimed` pairs.
    pub fn new(graph: &JointGraph, claimed: &[(u32, u32)]) -> Self {
        let mut pool1: BTreeSet<u32> = graph.kg1_range.clone().collect();
        let mut pool2: BTreeSet<u32> = graph.kg2_range.clone().collect();
        for &(a, b) in claimed {
            pool1.remove(&a);
            pool2.remove(&b);
        }
        CandidatePools { pool1, pool2 }
    }

    pub fn remove_pairs(&mut self, pairs: &[(u32, u32)]) {
        for &(a, b) in pairs {
            self.pool1.remove(&a);
            self.pool2.remove(&b);
        }
    }
}

/// Mutual-nearest-neighbor pairs under an arbitrary score function.
/// A pair (a, b) qualifies iff b is a's best candidate in `pool2` and a is
/// b's best candidate in `pool1`; argmax ties go to the lowest entity id.
pub fn mutual_nn_with<F>(pool1: &BTreeSet<u32>, pool2: &BTreeSet<u32>, score: F) -> Vec<(u32, u32)>
where
    F: Fn(u32, u32) -> f64,
{
    if pool1.is_empty() || pool2.is_empty() {
        return Vec::new();
    }
    let argmax = |fixed: u32, over: &BTreeSet<u32>, flip: bool| -> u32 {
        let mut best = f64::NEG_INFINITY;
        let mut who = u32::MAX;
        for &c in over {
            let s = if flip { score(c, fixed) } else { score(fixed, c) };
            if s > best {
                best = s;
                who = c;
            }
        }
        who
    };
    let best2: HashMap<u32, u32> = pool1.iter().map(|&a| (a, argmax(a, pool2, false))).collect();
    let best1: HashMap<u32, u32> = pool2.iter().map(|&b| (b, argmax(b, pool1, true))).collect();
    let mut pairs: Vec<(u32, u32)> = best2
        .iter()
        .filter(|&(&a, &b)| best1[&b] == a)
        .map(|(&a, &b)| (a, b))
        .collect();
    pairs.sort_unstable();
    pairs
}

/// Mutual-nearest-neighbor pairs under the symmetric alignment score; found
/// pairs are removed from the pools.
pub fn mutual_nn_pairs(
    final_emb: &Array2<f64>,
    targets: &InitTargets,
    pools: &mut CandidatePools,
) -> Vec<(u32, u32)> {
    let table = ScoreTable::new(final_emb, targets, None);
    let pairs = mutual_nn_with(&pools.pool1, &pools.pool2, |a, b| table.score(a, b));
    pools.remove_pairs(&pairs);
    pairs
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub trained_pairs: usize,
    pub generated: usize,
    pub reviewed: usize,
    pub pool1_size: usize,
    pub pool2_size: usize,
    pub dev_loss: f64,
    pub test_hits1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SemiOutcome {
    pub params: ModelParams,
    pub targets: InitTargets,
    pub augmented: Vec<(u32, u32)>,
    pub reports: Vec<IterationReport>,
    /// total review re-additions / total distinct trained pairs
    pub readd_rate: f64,
}

/// Runs the full incremental loop: train on the seeds, then repeatedly
/// generate mutual-nearest-neighbor pairs, review drifted old pairs and train
/// on just those, until generation comes up empty.
pub fn run_semi(
    graph: &JointGraph,
    seeds: &SeedAlignment,
    config: &TrainConfig,
    epsilon: f64,
    max_iterations: usize,
) -> Result<SemiOutcome> {
    if seeds.train.is_empty() {
        return Err(EalignError::Invalid("empty seed set".into()));
    }
    let mut rng_params = rand_chacha::ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut params = ModelParams::init(
        graph.num_entities,
        graph.num_relations,
        config.dim,
        config.depth,
        &mut rng_params,
    )?;
    let targets = compute_targets(graph, &params)?;
    let mut state = TrainState::new(&params, config.learning_rate);

    let mut memory = PairMemory::default();
    let mut pools = CandidatePools::new(graph, &claimed_pairs(seeds));
    let mut augmented: Vec<(u32, u32)> = seeds.train.clone();
    let mut s_new: Vec<(u32, u32)> = seeds.train.clone();
    let mut reports = Vec::new();
    let mut total_reviewed = 0usize;

    for iteration in 0..max_iterations {
        // fresh per-iteration best checkpoint: restoring an older iteration's
        // parameters would silently undo the newly added pairs
        state.best_dev_loss = f64::INFINITY;
        state.best_params = None;
        let report: FitReport = fit(
            graph,
            &mut params,
            &targets,
            &mut state,
            &s_new,
            &seeds.dev,
            config,
        )?;

        let final_emb = full_final(graph, &params)?;
        memory.store(&s_new, &final_emb);
        let reviewed = memory.review(&final_emb, epsilon)?;
        let generated = mutual_nn_pairs(&final_emb, &targets, &mut pools);
        total_reviewed += reviewed.len();
        augmented.extend_from_slice(&generated);

        let test_hits1 = if seeds.test.is_empty() {
            None
        } else {
            Some(
                evaluate(&final_emb, &targets, &seeds.test, &[1], Direction::Average, None)?
                    .hits_at[&1],
            )
        };
        reports.push(IterationReport {
            iteration,
            trained_pairs: s_new.len(),
            generated: generated.len(),
            reviewed: reviewed.len(),
            pool1_size: pools.pool1.len(),
            pool2_size: pools.pool2.len(),
            dev_loss: report.best_dev_loss,
            test_hits1,
        });

        if generated.is_empty() {
            break;
        }
        s_new = generated;
        s_new.extend_from_slice(&reviewed);
    }

    let readd_rate = if augmented.is_empty() {
        0.0
    } else {
        total_reviewed as f64 / augmented.len() as f64
    };
    Ok(SemiOutcome {
        params,
        targets,
        augmented,
        reports,
        readd_rate,
    })
}

/// Supervision pairs only. Test entities stay in the candidate pools: their
/// alignment is unknown to the algorithm and bootstrapping them is the point.
fn claimed_pairs(seeds: &SeedAlignment) -> Vec<(u32, u32)> {
    let mut v = seeds.train.clone();
    v.extend_from_slice(&seeds.dev);
    v
}
