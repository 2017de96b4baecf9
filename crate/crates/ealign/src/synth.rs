//! Synthetic benchmark: an ideal multi-relational graph, two permuted and
//! noised instances of it, and the matrix-level diagnostics (constraint
//! residuals, least-squares objective, collapse metric) that make alignment
//! quality checkable against a known ground truth.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::elu;
use crate::error::{EalignError, Result};
use crate::kg::{KnowledgeGraph, Triple};

/// Bijection over entity ids; `map[i]` is the image of `i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutationMap {
    map: Vec<u32>,
}

impl PermutationMap {
    pub fn new(map: Vec<u32>) -> Result<Self> {
        let n = map.len();
        let mut seen = vec![false; n];
        for &v in &map {
            if v as usize >= n || seen[v as usize] {
                return Err(EalignError::Invalid("not a permutation".into()));
            }
            seen[v as usize] = true;
        }
        Ok(PermutationMap { map })
    }

    pub fn identity(n: usize) -> Self {
        PermutationMap {
            map: (0..n as u32).collect(),
        }
    }

    pub fn random<R: Rng>(n: usize, rng: &mut R) -> Self {
        let mut map: Vec<u32> = (0..n as u32).collect();
        map.shuffle(rng);
        PermutationMap { map }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn apply(&self, i: u32) -> u32 {
        self.map[i as usize]
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0u32; self.map.len()];
        for (i, &v) in self.map.iter().enumerate() {
            inv[v as usize] = i as u32;
        }
        PermutationMap { map: inv }
    }

    /// `self` after `other`: (self ∘ other)(i) = self(other(i)).
    pub fn compose(&self, other: &Self) -> Self {
        PermutationMap {
            map: other.map.iter().map(|&i| self.apply(i)).collect(),
        }
    }

    /// Dense 0/1 matrix form with M[p(i), i] = 1, so M x relabels index i to
    /// p(i).
    pub fn to_matrix(&self) -> Array2<f64> {
        let n = self.map.len();
        let mut m = Array2::zeros((n, n));
        for (i, &v) in self.map.iter().enumerate() {
            m[[v as usize, i]] = 1.0;
        }
        m
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub edge_delete_prob: f64,
    pub edge_add_count: usize,
    pub rng_seed: u64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        NoiseSpec {
            edge_delete_prob: 0.0,
            edge_add_count: 0,
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticInstance {
    pub ideal: KnowledgeGraph,
    pub instance1: KnowledgeGraph,
    pub instance2: KnowledgeGraph,
    pub p1: PermutationMap,
    pub p2: PermutationMap,
    /// (entity in instance1, entity in instance2) for every ideal entity
    pub ground_truth: Vec<(u32, u32)>,
}

/// Connected random multi-relational graph: a random spanning tree plus
/// random extra triples up to roughly `num_entities * avg_degree / 2`
/// directed base triples.
pub fn generate_ideal(
    num_entities: usize,
    num_relations: usize,
    avg_degree: f64,
    rng_seed: u64,
) -> Result<KnowledgeGraph> {
    if num_entities == 0 || num_relations == 0 {
        return Err(EalignError::Invalid("empty graph requested".into()));
    }
    if avg_degree < 1.0 {
        return Err(EalignError::Invalid("avg_degree must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut triples: BTreeSet<Triple> = BTreeSet::new();
    for i in 1..num_entities as u32 {
        let parent = rng.random_range(0..i);
        let r = rng.random_range(0..num_relations as u32);
        if rng.random::<bool>() {
            triples.insert((i, r, parent));
        } else {
            triples.insert((parent, r, i));
        }
    }
    let target = ((num_entities as f64 * avg_degree) / 2.0).round() as usize;
    let mut attempts = 0usize;
    while triples.len() < target && attempts < 50 * target {
        let h = rng.random_range(0..num_entities as u32);
        let t = rng.random_range(0..num_entities as u32);
        let r = rng.random_range(0..num_relations as u32);
        if h != t {
            triples.insert((h, r, t));
        }
        attempts += 1;
    }
    KnowledgeGraph::with_sizes(triples.into_iter().collect(), num_entities, num_relations)
}

/// Relabels every triple (h, r, t) to (p(h), r, p(t)), then deletes each edge
/// with `edge_delete_prob` and adds `edge_add_count` random edges.
pub fn derive_instance(
    ideal: &KnowledgeGraph,
    perm: &PermutationMap,
    noise: &NoiseSpec,
) -> Result<KnowledgeGraph> {
    if perm.len() != ideal.num_entities {
        return Err(EalignError::Invalid("permutation size mismatch".into()));
    }
    if !(0.0..=1.0).contains(&noise.edge_delete_prob) {
        return Err(EalignError::Invalid("delete probability out of range".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise.rng_seed);
    let mut triples: BTreeSet<Triple> = BTreeSet::new();
    for &(h, r, t) in &ideal.triples {
        if noise.edge_delete_prob > 0.0 && rng.random::<f64>() < noise.edge_delete_prob {
            continue;
        }
        triples.insert((perm.apply(h), r, perm.apply(t)));
    }
    let n = ideal.num_entities as u32;
    let mut added = 0usize;
    let mut attempts = 0usize;
    while added < noise.edge_add_count && attempts < 100 * (noise.edge_add_count + 1) {
        let h = rng.random_range(0..n);
        let t = rng.random_range(0..n);
        let r = rng.random_range(0..ideal.num_relations as u32);
        if h != t && triples.insert((h, r, t)) {
            added += 1;
        }
        attempts += 1;
    }
    KnowledgeGraph::with_sizes(
        triples.into_iter().collect(),
        ideal.num_entities,
        ideal.num_relations,
    )
}

/// Two independently permuted, independently noised instances of one ideal
/// graph, with the induced ground-truth alignment.
pub fn generate_instance_pair(
    num_entities: usize,
    num_relations: usize,
    avg_degree: f64,
    noise: &NoiseSpec,
    rng_seed: u64,
) -> Result<SyntheticInstance> {
    let ideal = generate_ideal(num_entities, num_relations, avg_degree, rng_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed ^ 0x5173_9d1e);
    let p1 = PermutationMap::random(num_entities, &mut rng);
    let p2 = PermutationMap::random(num_entities, &mut rng);
    let n1 = NoiseSpec {
        rng_seed: noise.rng_seed.wrapping_add(1),
        ..noise.clone()
    };
    let n2 = NoiseSpec {
        rng_seed: noise.rng_seed.wrapping_add(2),
        ..noise.clone()
    };
    let instance1 = derive_instance(&ideal, &p1, &n1)?;
    let instance2 = derive_instance(&ideal, &p2, &n2)?;
    let ground_truth: Vec<(u32, u32)> = (0..num_entities as u32)
        .map(|i| (p1.apply(i), p2.apply(i)))
        .collect();
    Ok(SyntheticInstance {
        ideal,
        instance1,
        instance2,
        p1,
        p2,
        ground_truth,
    })
}

/// Symmetric normalized adjacency with self-loops, D^(-1/2) (A + I) D^(-1/2),
/// relations collapsed to plain undirected edges.
pub fn normalized_laplacian(kg: &KnowledgeGraph) -> Array2<f64> {
    let n = kg.num_entities;
    let mut a = Array2::<f64>::zeros((n, n));
    for &(h, _, t) in &kg.triples {
        a[[h as usize, t as usize]] = 1.0;
        a[[t as usize, h as usize]] = 1.0;
    }
    for i in 0..n {
        a[[i, i]] = 1.0;
    }
    let deg: Vec<f64> = (0..n).map(|i| a.row(i).sum()).collect();
    for i in 0..n {
        for j in 0..n {
            a[[i, j]] /= (deg[i] * deg[j]).sqrt();
        }
    }
    a
}

/// Maximum L1 difference over aligned pairs between instance1's normalized
/// adjacency row (columns relabeled through the alignment) and instance2's.
/// Zero exactly when the alignment is a noise-free isomorphism.
pub fn check_constraints(
    instance1: &KnowledgeGraph,
    instance2: &KnowledgeGraph,
    alignment: &[(u32, u32)],
) -> Result<f64> {
    if instance1.num_entities != instance2.num_entities {
        return Err(EalignError::Invalid("instance sizes differ".into()));
    }
    let n = instance1.num_entities;
    if alignment.len() != n {
        return Err(EalignError::Invalid("alignment must cover all entities".into()));
    }
    let mut map = vec![u32::MAX; n];
    for &(a, b) in alignment {
        if a as usize >= n || b as usize >= n || map[a as usize] != u32::MAX {
            return Err(EalignError::Invalid("alignment is not a bijection".into()));
        }
        map[a as usize] = b;
    }
    let l1 = normalized_laplacian(instance1);
    let l2 = normalized_laplacian(instance2);
    let mut worst = 0.0f64;
    for &(i, j) in alignment {
        let mut diff = 0.0;
        for c1 in 0..n {
            let c2 = map[c1] as usize;
            diff += (l1[[i as usize, c1]] - l2[[j as usize, c2]]).abs();
        }
        worst = worst.max(diff);
    }
    Ok(worst)
}

/// Sum over aligned pairs of the squared L2 distance between the nonlinear
/// one-layer features sigma(L1 H1 W1) and sigma(L2 H2 W2).
#[allow(clippy::too_many_arguments)]
pub fn lsq_objective(
    instance1: &KnowledgeGraph,
    instance2: &KnowledgeGraph,
    h1: &Array2<f64>,
    w1: &Array2<f64>,
    h2: &Array2<f64>,
    w2: &Array2<f64>,
    alignment: &[(u32, u32)],
) -> Result<f64> {
    if h1.nrows() != instance1.num_entities || h2.nrows() != instance2.num_entities {
        return Err(EalignError::Contract("factor row counts mismatch".into()));
    }
    if h1.ncols() != w1.nrows() || h2.ncols() != w2.nrows() || w1.ncols() != w2.ncols() {
        return Err(EalignError::Contract("factor shapes inconsistent".into()));
    }
    let m1 = normalized_laplacian(instance1).dot(h1).dot(w1).mapv(elu);
    let m2 = normalized_laplacian(instance2).dot(h2).dot(w2).mapv(elu);
    let mut total = 0.0;
    for &(i, j) in alignment {
        let ri = m1.row(i as usize);
        let rj = m2.row(j as usize);
        let mut s = 0.0;
        for m in 0..ri.len() {
            let d = ri[m] - rj[m];
            s += d * d;
        }
        total += s;
    }
    Ok(total)
}

/// Mean pairwise cosine over `sample` randomly chosen rows; 1.0 means the
/// embedding table has collapsed to one direction.
pub fn collapse_metric(embeddings: &Array2<f64>, sample: usize, rng_seed: u64) -> Result<f64> {
    if sample < 2 {
        return Err(EalignError::Invalid("need at least 2 samples".into()));
    }
    let n = embeddings.nrows();
    if n < 2 {
        return Err(EalignError::Invalid("need at least 2 rows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx.truncate(sample.min(n));

    let mut sum = 0.0;
    let mut count = 0usize;
    for a in 0..idx.len() {
        for b in (a + 1)..idx.len() {
            let x = embeddings.row(idx[a]);
            let y = embeddings.row(idx[b]);
            let nx = x.dot(&x).sqrt();
            let ny = y.dot(&y).sqrt();
            if nx == 0.0 || ny == 0.0 {
                continue;
            }
            sum += x.dot(&y) / (nx * ny);
            count += 1;
        }
    }
    if count == 0 {
        return Err(EalignError::Contract("all sampled rows are zero".into()));
    }
    Ok(sum / count as f64)
}

/// Writes `triples_1`, `triples_2` and `ref_ent_ids` in the tab-separated
/// local-id layout the dataset loader reads.
pub fn write_dataset(instance: &SyntheticInstance, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| EalignError::io(dir, e))?;
    let dump = |name: &str, kg: &KnowledgeGraph| -> Result<()> {
        let path = dir.join(name);
        let mut out = String::new();
        for &(h, r, t) in &kg.triples {
            out.push_str(&format!("{h}\t{r}\t{t}\n"));
        }
        std::fs::write(&path, out).map_err(|e| EalignError::io(&path, e))
    };
    dump("triples_1", &instance.instance1)?;
    dump("triples_2", &instance.instance2)?;
    let path = dir.join("ref_ent_ids");
    let mut out = String::new();
    for &(a, b) in &instance.ground_truth {
        out.push_str(&format!("{a}\t{b}\n"));
    }
    std::fs::write(&path, out).map_err(|e| EalignError::io(&path, e))
}
