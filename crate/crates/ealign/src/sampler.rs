//! Relational attention graph sampling.
//!
//! Each entity's incident triples are sampled with replacement, with the
//! normalized attention coefficients as probabilities. The per-entity sample
//! count adapts so that the expected attention mass per entity stays at the
//! sampling ratio `tau`: `t_e = ceil(tau / E[alpha_e])` with
//! `E[alpha_e] = sum alpha^2`.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::encoder::{Edge, ModelParams, Subgraph};
use crate::error::{EalignError, Result};
use crate::kg::JointGraph;

/// Per-entity sampling probabilities, information expectations and sample
/// counts, snapshotted from the first-layer attention at an epoch boundary.
#[derive(Debug, Clone)]
pub struct SamplingPlan {
    /// per entity: probabilities over `neighbor_index[e]`, summing to 1
    pub probs: Vec<Vec<f64>>,
    /// per entity: cumulative sums of `probs` for inverse-CDF sampling
    cumulative: Vec<Vec<f64>>,
    /// per entity: `E[alpha_e] = sum alpha^2`
    pub expectation: Vec<f64>,
    /// per entity: `t_e = ceil(tau / E[alpha_e])`
    pub sample_count: Vec<u32>,
    pub tau: f64,
    pub snapshot_epoch: usize,
}

impl SamplingPlan {
    /// Builds a plan from explicit per-entity probability tables.
    pub fn from_probs(probs: Vec<Vec<f64>>, tau: f64, snapshot_epoch: usize) -> Result<Self> {
        if tau <= 0.0 {
            return Err(EalignError::Contract("tau must be positive".into()));
        }
        let mut cumulative = Vec::with_capacity(probs.len());
        let mut expectation = Vec::with_capacity(probs.len());
        let mut sample_count = Vec::with_capacity(probs.len());
        for table in &probs {
            if table.is_empty() {
                return Err(EalignError::Contract("entity with empty probability table".into()));
            }
            let sum: f64 = table.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(EalignError::Contract(format!(
                    "probability table sums to {sum}, expected 1"
                )));
            }
            let mut cum = Vec::with_capacity(table.len());
            let mut acc = 0.0;
            for &p in table {
                acc += p;
                cum.push(acc);
            }
            *cum.last_mut().unwrap() = 1.0;
            let e: f64 = table.iter().map(|p| p * p).sum();
            let t = (tau / e).ceil().max(1.0) as u32;
            cumulative.push(cum);
            expectation.push(e);
            sample_count.push(t);
        }
        Ok(SamplingPlan {
            probs,
            cumulative,
            expectation,
            sample_count,
            tau,
            snapshot_epoch,
        })
    }

    /// Draws one incident-edge index for `entity` by inverse-CDF sampling.
    pub fn draw<R: Rng>(&self, entity: u32, rng: &mut R) -> usize {
        let cum = &self.cumulative[entity as usize];
        let u: f64 = rng.random();
        match cum.binary_search_by(|c| c.partial_cmp(&u).unwrap()) {
            Ok(i) => (i + 1).min(cum.len() - 1),
            Err(i) => i,
        }
    }
}

/// Builds the sampling plan for an epoch.
///
/// With `params = None` (epoch 0, attention not yet meaningful) probabilities
/// are uniform per entity. Otherwise they are the first-layer attention
/// coefficients computed from the current parameters over the full graph.
pub fn build_plan(
    graph: &JointGraph,
    params: Option<&ModelParams>,
    tau: f64,
    epoch: usize,
) -> Result<SamplingPlan> {
    let probs = match params {
        None => graph
            .neighbor_index
            .iter()
            .map(|entries| vec![1.0 / entries.len() as f64; entries.len()])
            .collect(),
        Some(p) => first_layer_attention(graph, p)?,
    };
    SamplingPlan::from_probs(probs, tau, epoch)
}

/// First-layer attention coefficients over the full graph, per entity.
fn first_layer_attention(graph: &JointGraph, params: &ModelParams) -> Result<Vec<Vec<f64>>> {
    let d = params.dim;
    let v = params.attention[0].as_slice().unwrap();
    let (va, rest) = v.split_at(d);
    let (vb, vc) = rest.split_at(d);
    let ent = params.entity.as_slice().unwrap();
    let rel = params.relation.as_slice().unwrap();

    let reflect_dot = |x: &[f64], r: &[f64], w: &[f64]| -> f64 {
        // w . (x - 2 (r.x) r)
        let rx: f64 = r.iter().zip(x).map(|(a, b)| a * b).sum();
        let wx: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
        let wr: f64 = w.iter().zip(r).map(|(a, b)| a * b).sum();
        wx - 2.0 * rx * wr
    };

    let mut probs = Vec::with_capacity(graph.num_entities);
    for (i, entries) in graph.neighbor_index.iter().enumerate() {
        let xi = &ent[i * d..(i + 1) * d];
        let mut logits = Vec::with_capacity(entries.len());
        for &(j, k) in entries {
            let r = &rel[k as usize * d..(k as usize + 1) * d];
            let xj = &ent[j as usize * d..(j as usize + 1) * d];
            let beta = reflect_dot(xi, r, va)
                + r.iter().zip(vb).map(|(a, b)| a * b).sum::<f64>()
                + reflect_dot(xj, r, vc);
            logits.push(beta);
        }
        probs.push(crate::encoder::attention_normalize(&logits)?);
    }
    Ok(probs)
}

/// A sampled multi-hop subgraph around a batch of seed pairs.
#[derive(Debug, Clone)]
pub struct SubgraphBatch {
    pub pairs: Vec<(u32, u32)>,
    pub sub: Subgraph,
    /// local ids of the batch pair entities, aligned with `pairs`
    pub pair_locals: Vec<(u32, u32)>,
}

/// BFS-style expansion: every frontier entity contributes `t_e` draws with
/// replacement from its probability table. Duplicate draws collapse into one
/// edge whose weight is the multiplicity. Entities discovered at the deepest
/// hop receive their self-loop edge so every local entity stays a valid
/// attention center.
pub fn sample_subgraph<R: Rng>(
    graph: &JointGraph,
    plan: &SamplingPlan,
    batch_entities: &[u32],
    depth: usize,
    rng: &mut R,
) -> Result<Subgraph> {
    let mut local_of: HashMap<u32, u32> = HashMap::new();
    let mut entities: Vec<u32> = Vec::new();
    let intern = |g: u32, entities: &mut Vec<u32>, local_of: &mut HashMap<u32, u32>| -> u32 {
        *local_of.entry(g).or_insert_with(|| {
            entities.push(g);
            (entities.len() - 1) as u32
        })
    };

    // (center global, incidence index) -> multiplicity
    let mut multiset: BTreeMap<(u32, u32), u32> = BTreeMap::new();
    let mut expanded: HashMap<u32, bool> = HashMap::new();

    let mut frontier: Vec<u32> = Vec::new();
    for &e in batch_entities {
        intern(e, &mut entities, &mut local_of);
        if !frontier.contains(&e) {
            frontier.push(e);
        }
    }

    for _hop in 0..depth {
        let mut next = Vec::new();
        for &e in &frontier {
            if *expanded.get(&e).unwrap_or(&false) {
                continue;
            }
            expanded.insert(e, true);
            let t = plan.sample_count[e as usize];
            for _ in 0..t {
                let idx = plan.draw(e, rng) as u32;
                *multiset.entry((e, idx)).or_insert(0) += 1;
                let (nbr, _) = graph.neighbor_index[e as usize][idx as usize];
                if !local_of.contains_key(&nbr) {
                    intern(nbr, &mut entities, &mut local_of);
                    next.push(nbr);
                }
            }
        }
        frontier = next;
    }

    // keep every un-expanded local entity a valid center via its self-loop
    let self_rel = graph.self_loop_relation();
    for &g in &entities {
        if !*expanded.get(&g).unwrap_or(&false) {
            let idx = graph.neighbor_index[g as usize]
                .iter()
                .position(|&(nbr, r)| nbr == g && r == self_rel)
                .ok_or_else(|| EalignError::Contract(format!("entity {g} lacks a self-loop")))?;
            multiset.entry((g, idx as u32)).or_insert(1);
        }
    }

    let edges: Vec<Edge> = multiset
        .into_iter()
        .map(|((center, idx), mult)| {
            let (nbr, r) = graph.neighbor_index[center as usize][idx as usize];
            Edge {
                center: local_of[&center],
                rel: r,
                neighbor: local_of[&nbr],
                weight: mult as f64,
            }
        })
        .collect();
    Subgraph::new(entities, edges)
}

/// Samples the multi-hop subgraph for a batch of training pairs.
pub fn sample_batch<R: Rng>(
    graph: &JointGraph,
    plan: &SamplingPlan,
    pairs: &[(u32, u32)],
    depth: usize,
    rng: &mut R,
) -> Result<SubgraphBatch> {
    let mut batch_entities = Vec::with_capacity(2 * pairs.len());
    for &(a, b) in pairs {
        batch_entities.push(a);
        batch_entities.push(b);
    }
    let sub = sample_subgraph(graph, plan, &batch_entities, depth, rng)?;
    let local_of: HashMap<u32, u32> = sub
        .entities
        .iter()
        .enumerate()
        .map(|(l, &g)| (g, l as u32))
        .collect();
    let pair_locals = pairs
        .iter()
        .map(|&(a, b)| (local_of[&a], local_of[&b]))
        .collect();
    Ok(SubgraphBatch {
        pairs: pairs.to_vec(),
        sub,
        pair_locals,
    })
}

/// Per-entity `(entity, degree, expectation, sample_count)` rows for the
/// `sample-stats` CSV output.
pub fn plan_stats(graph: &JointGraph, plan: &SamplingPlan) -> Vec<(u32, usize, f64, u32)> {
    (0..graph.num_entities as u32)
        .map(|e| {
            (
                e,
                graph.degree(e),
                plan.expectation[e as usize],
                plan.sample_count[e as usize],
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{merge_graphs, KnowledgeGraph};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn plan_singleton_self_loop() {
        let plan = SamplingPlan::from_probs(vec![vec![1.0]], 1.0, 0).unwrap();
        assert_eq!(plan.expectation, vec![1.0]);
        assert_eq!(plan.sample_count, vec![1]);
        let plan = SamplingPlan::from_probs(vec![vec![1.0]], 2.5, 0).unwrap();
        assert_eq!(plan.sample_count, vec![3]);
    }

    #[test]
    fn plan_hand_evaluated_examples() {
        let plan = SamplingPlan::from_probs(vec![vec![0.5, 0.5]], 1.0, 0).unwrap();
        assert_abs_diff_eq!(plan.expectation[0], 0.5, epsilon = 1e-12);
        assert_eq!(plan.sample_count[0], 2);

        let plan = SamplingPlan::from_probs(vec![vec![0.9, 0.1]], 1.0, 0).unwrap();
        assert_abs_diff_eq!(plan.expectation[0], 0.82, epsilon = 1e-12);
        // ceil(1 / 0.82) = ceil(1.2195) = 2
        assert_eq!(plan.sample_count[0], 2);
    }

    fn toy_joint() -> JointGraph {
        let g1 = KnowledgeGraph::from_triples(vec![(0, 0, 1), (1, 0, 2), (0, 1, 2)]).unwrap();
        let g2 = KnowledgeGraph::from_triples(vec![(0, 0, 1), (1, 0, 2), (2, 1, 0)]).unwrap();
        merge_graphs(&g1, &g2).unwrap()
    }

    #[test]
    fn uniform_plan_covers_every_entity() {
        let joint = toy_joint();
        let plan = build_plan(&joint, None, 1.0, 0).unwrap();
        assert_eq!(plan.probs.len(), joint.num_entities);
        for (e, table) in plan.probs.iter().enumerate() {
            assert_eq!(table.len(), joint.degree(e as u32));
            let sum: f64 = table.iter().sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn attention_plan_matches_full_forward_alpha() {
        use crate::encoder::{forward, ModelParams, Subgraph};
        let joint = toy_joint();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = ModelParams::init(joint.num_entities, joint.num_relations, 4, 2, &mut rng).unwrap();
        let plan = build_plan(&joint, Some(&params), 1.0, 3).unwrap();
        assert_eq!(plan.snapshot_epoch, 3);

        let sub = Subgraph::full(&joint);
        let pass = forward(&sub, &params, 0.0, false, &mut rng).unwrap();
        // layer-0 alpha grouped by center must equal the plan tables
        for e in 0..joint.num_entities {
            let g = sub.group(e);
            for (idx, edge_idx) in g.enumerate() {
                assert_abs_diff_eq!(
                    plan.probs[e][idx],
                    pass.layers[0].alpha[edge_idx],
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_for_fixed_seed() {
        let joint = toy_joint();
        let plan = build_plan(&joint, None, 1.0, 0).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let a = sample_subgraph(&joint, &plan, &[0, 3], 2, &mut r1).unwrap();
        let b = sample_subgraph(&joint, &plan, &[0, 3], 2, &mut r2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn high_tau_recovers_full_neighborhood() {
        let joint = toy_joint();
        let plan = build_plan(&joint, None, 50.0, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sub = sample_subgraph(&joint, &plan, &[0], 1, &mut rng).unwrap();
        // with t_e >> degree, all 1-hop edges of entity 0 appear
        let local0 = sub.entities.iter().position(|&g| g == 0).unwrap();
        let sampled: std::collections::HashSet<(u32, u32)> = sub
            .edges
            .iter()
            .filter(|e| e.center as usize == local0)
            .map(|e| (sub.entities[e.neighbor as usize], e.rel))
            .collect();
        for &(nbr, r) in &joint.neighbor_index[0] {
            assert!(sampled.contains(&(nbr, r)), "missing edge to {nbr} via {r}");
        }
    }

    #[test]
    fn skewed_star_frequencies_match_probabilities() {
        // single center with two incident edges at 0.99 / 0.01
        let probs = vec![vec![0.99, 0.01]];
        let plan = SamplingPlan::from_probs(probs, 1.0, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 1000 * plan.sample_count[0] as usize;
        let mut hits = 0usize;
        for _ in 0..n {
            if plan.draw(0, &mut rng) == 0 {
                hits += 1;
            }
        }
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.99).abs() < 0.03, "frequency {freq}");
    }

    #[test]
    fn multiplicity_bounded_by_sample_count() {
        let joint = toy_joint();
        let plan = build_plan(&joint, None, 1.0, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sub = sample_subgraph(&joint, &plan, &[0, 1, 3], 2, &mut rng).unwrap();
        for e in &sub.edges {
            let g = sub.entities[e.center as usize];
            assert!(e.weight as u32 <= plan.sample_count[g as usize].max(1));
        }
    }

    #[test]
    fn empirical_frequencies_chi_square_sane() {
        let probs = vec![vec![0.5, 0.25, 0.125, 0.125]];
        let plan = SamplingPlan::from_probs(probs.clone(), 1.0, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let n = 10_000usize;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[plan.draw(0, &mut rng)] += 1;
        }
        let chi2: f64 = counts
            .iter()
            .zip(&probs[0])
            .map(|(&c, &p)| {
                let exp = p * n as f64;
                (c as f64 - exp).powi(2) / exp
            })
            .sum();
        // 3 degrees of freedom, 99.9th percentile ~ 16.3
        assert!(chi2 < 16.3, "chi-square statistic {chi2}");
    }
}

#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        /// Eq-level stability guarantee: t_e * E[alpha_e] >= tau.
        #[test]
        fn sample_count_preserves_attention_mass(
            raw in prop::collection::vec(0.01f64..1.0, 1..10),
            tau in 0.2f64..4.0,
        ) {
            let sum: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|x| x / sum).collect();
            let plan = SamplingPlan::from_probs(vec![probs], tau, 0).unwrap();
            let e = plan.expectation[0];
            let t = plan.sample_count[0] as f64;
            prop_assert!(e > 0.0 && e <= 1.0 + 1e-12);
            prop_assert!(t * e >= tau - 1e-9);
        }
    }
}
