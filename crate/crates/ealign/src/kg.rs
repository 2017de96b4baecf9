//! Knowledge-graph loading, validation, merging and indexing.
//!
//! Two input graphs are merged into one disjoint-union [`JointGraph`] so a
//! single forward pass covers both sides. The merge adds an inverse relation
//! per base relation and one global self-loop relation, guaranteeing that
//! every entity has at least one incident edge.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EalignError, Result};

/// A (head, relation, tail) triple over dense integer id spaces.
pub type Triple = (u32, u32, u32);

/// A validated multi-relational graph with dense entity/relation ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeGraph {
    pub num_entities: usize,
    pub num_relations: usize,
    pub triples: Vec<Triple>,
}

impl KnowledgeGraph {
    /// Builds a graph from raw triples: deduplicates, sorts, and infers the
    /// id-space sizes as `max id + 1`.
    pub fn from_triples(mut triples: Vec<Triple>) -> Result<Self> {
        triples.sort_unstable();
        triples.dedup();
        let mut num_entities = 0usize;
        let mut num_relations = 0usize;
        for &(h, r, t) in &triples {
            num_entities = num_entities.max(h as usize + 1).max(t as usize + 1);
            num_relations = num_relations.max(r as usize + 1);
        }
        Ok(KnowledgeGraph {
            num_entities,
            num_relations,
            triples,
        })
    }

    /// Builds a graph from triples with explicitly sized id spaces.
    pub fn with_sizes(triples: Vec<Triple>, num_entities: usize, num_relations: usize) -> Result<Self> {
        let mut kg = Self::from_triples(triples)?;
        if kg.num_entities > num_entities || kg.num_relations > num_relations {
            return Err(EalignError::Invalid(format!(
                "triples reference ids beyond the declared spaces ({} entities, {} relations)",
                num_entities, num_relations
            )));
        }
        kg.num_entities = num_entities;
        kg.num_relations = num_relations;
        Ok(kg)
    }
}

/// Loads a tab-separated integer triple file (`head<TAB>relation<TAB>tail`).
pub fn load_kg(path: &Path) -> Result<KnowledgeGraph> {
    let file = File::open(path).map_err(|e| EalignError::io(path, e))?;
    let reader = BufReader::new(file);
    let mut triples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| EalignError::io(path, e))?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(EalignError::parse(
                path,
                lineno,
                format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        let mut ids = [0u32; 3];
        for (slot, field) in ids.iter_mut().zip(&fields) {
            *slot = field.trim().parse::<u32>().map_err(|e| {
                EalignError::parse(path, lineno, format!("invalid id {:?}: {}", field, e))
            })?;
        }
        triples.push((ids[0], ids[1], ids[2]));
    }
    KnowledgeGraph::from_triples(triples)
}

/// Disjoint union of two graphs with inverse relations, a global self-loop
/// relation, and a per-entity incidence index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointGraph {
    pub kg1_range: Range<u32>,
    pub kg2_range: Range<u32>,
    pub num_entities: usize,
    /// Base relations of both graphs, then one inverse per base relation,
    /// then the self-loop relation.
    pub num_relations: usize,
    pub num_base_relations: usize,
    pub triples: Vec<Triple>,
    /// `neighbor_index[e]` lists the (neighbor, relation) pairs of all triples
    /// with head `e`, in the same order as the grouped triple list.
    pub neighbor_index: Vec<Vec<(u32, u32)>>,
}

impl JointGraph {
    pub fn self_loop_relation(&self) -> u32 {
        (2 * self.num_base_relations) as u32
    }

    pub fn inverse_relation(&self, base: u32) -> u32 {
        base + self.num_base_relations as u32
    }

    pub fn degree(&self, entity: u32) -> usize {
        self.neighbor_index[entity as usize].len()
    }
}

/// Merges two graphs into a [`JointGraph`].
///
/// Entity ids of `g2` are offset by `|E1|`, relation ids by `|R1|`. For every
/// base triple `(h, r, t)` with `h != t` an inverse triple `(t, inv(r), h)` is
/// added; a self-edge is its own inverse and is kept once. Every entity gets a
/// self-loop triple under the global self-loop relation.
pub fn merge_graphs(g1: &KnowledgeGraph, g2: &KnowledgeGraph) -> Result<JointGraph> {
    let e_off = g1.num_entities as u32;
    let r_off = g1.num_relations as u32;
    let num_entities = g1.num_entities + g2.num_entities;
    let num_base = g1.num_relations + g2.num_relations;
    let self_loop = (2 * num_base) as u32;

    let mut triples: Vec<Triple> = Vec::with_capacity(2 * (g1.triples.len() + g2.triples.len()) + num_entities);
    let mut push_with_inverse = |h: u32, r: u32, t: u32| {
        triples.push((h, r, t));
        if h != t {
            triples.push((t, r + num_base as u32, h));
        }
    };
    for &(h, r, t) in &g1.triples {
        push_with_inverse(h, r, t);
    }
    for &(h, r, t) in &g2.triples {
        push_with_inverse(h + e_off, r + r_off, t + e_off);
    }
    for e in 0..num_entities as u32 {
        triples.push((e, self_loop, e));
    }
    triples.sort_unstable();
    triples.dedup();

    let mut neighbor_index: Vec<Vec<(u32, u32)>> = vec![Vec::new(); num_entities];
    for &(h, r, t) in &triples {
        neighbor_index[h as usize].push((t, r));
    }

    Ok(JointGraph {
        kg1_range: 0..e_off,
        kg2_range: e_off..num_entities as u32,
        num_entities,
        num_relations: 2 * num_base + 1,
        num_base_relations: num_base,
        triples,
        neighbor_index,
    })
}

/// A partial one-to-one alignment between the two entity id spaces of a
/// [`JointGraph`], split into train/dev/test.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedAlignment {
    pub train: Vec<(u32, u32)>,
    pub dev: Vec<(u32, u32)>,
    pub test: Vec<(u32, u32)>,
}

impl SeedAlignment {
    pub fn all_pairs(&self) -> impl Iterator<Item = &(u32, u32)> {
        self.train.iter().chain(self.dev.iter()).chain(self.test.iter())
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.dev.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Validates one-to-one-ness and range membership against a joint graph.
    pub fn validate(&self, joint: &JointGraph) -> Result<()> {
        let mut seen1 = HashSet::new();
        let mut seen2 = HashSet::new();
        for &(e1, e2) in self.all_pairs() {
            if !joint.kg1_range.contains(&e1) {
                return Err(EalignError::Invalid(format!("entity {} not in kg1 range", e1)));
            }
            if !joint.kg2_range.contains(&e2) {
                return Err(EalignError::Invalid(format!("entity {} not in kg2 range", e2)));
            }
            if !seen1.insert(e1) {
                return Err(EalignError::Invalid(format!("entity {} aligned twice", e1)));
            }
            if !seen2.insert(e2) {
                return Err(EalignError::Invalid(format!("entity {} aligned twice", e2)));
            }
        }
        Ok(())
    }
}

/// Deterministically shuffles `pairs` and splits them into
/// `(⌊train·N⌋, ⌊dev·N⌋, rest)`.
pub fn split_pairs(
    mut pairs: Vec<(u32, u32)>,
    train_ratio: f64,
    dev_ratio: f64,
    rng_seed: u64,
) -> Result<SeedAlignment> {
    if !(train_ratio > 0.0 && train_ratio < 1.0) || !(0.0..1.0).contains(&dev_ratio) {
        return Err(EalignError::Invalid("split ratios must lie in (0, 1)".into()));
    }
    if train_ratio + dev_ratio > 1.0 {
        return Err(EalignError::Invalid("train + dev ratio exceeds 1".into()));
    }
    let mut seen1 = HashSet::new();
    let mut seen2 = HashSet::new();
    for &(e1, e2) in &pairs {
        if !seen1.insert(e1) || !seen2.insert(e2) {
            return Err(EalignError::Invalid(format!(
                "entity aligned twice in seed pairs ({}, {})",
                e1, e2
            )));
        }
    }
    pairs.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    pairs.shuffle(&mut rng);
    let n = pairs.len();
    let n_train = (train_ratio * n as f64).floor() as usize;
    let n_dev = (dev_ratio * n as f64).floor() as usize;
    let test = pairs.split_off(n_train + n_dev);
    let dev = pairs.split_off(n_train);
    Ok(SeedAlignment {
        train: pairs,
        dev,
        test,
    })
}

/// Loads a `ref_ent_ids`-style pairs file (`e1<TAB>e2` per line, ids local to
/// each KG) and splits it.
pub fn load_seeds(
    path: &Path,
    train_ratio: f64,
    dev_ratio: f64,
    rng_seed: u64,
) -> Result<SeedAlignment> {
    let pairs = load_pairs(path)?;
    split_pairs(pairs, train_ratio, dev_ratio, rng_seed)
}

/// Loads a two-column tab-separated id pair file.
pub fn load_pairs(path: &Path) -> Result<Vec<(u32, u32)>> {
    let file = File::open(path).map_err(|e| EalignError::io(path, e))?;
    let reader = BufReader::new(file);
    let mut pairs = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| EalignError::io(path, e))?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(EalignError::parse(
                path,
                lineno,
                format!("expected 2 tab-separated fields, found {}", fields.len()),
            ));
        }
        let a = fields[0].trim().parse::<u32>().map_err(|e| {
            EalignError::parse(path, lineno, format!("invalid id {:?}: {}", fields[0], e))
        })?;
        let b = fields[1].trim().parse::<u32>().map_err(|e| {
            EalignError::parse(path, lineno, format!("invalid id {:?}: {}", fields[1], e))
        })?;
        pairs.push((a, b));
    }
    Ok(pairs)
}

/// A loaded dataset: the merged graph plus seed splits in joint id space.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub joint: JointGraph,
    pub seeds: SeedAlignment,
}

/// Loads a dataset directory in the public DBP15K/SRPRS layout:
/// `triples_1`, `triples_2`, `ref_ent_ids`.
///
/// Two id conventions are accepted. When the two triple files use disjoint
/// global entity ids (no id appears on both sides), ids are remapped to a
/// dense `[0, |E1|)` / `[0, |E2|)` pair of local spaces first. Otherwise the
/// files are taken to already be local per-KG spaces.
pub fn load_dataset(dir: &Path, train_ratio: f64, dev_ratio: f64, rng_seed: u64) -> Result<Dataset> {
    let kg1 = load_kg(&dir.join("triples_1"))?;
    let kg2 = load_kg(&dir.join("triples_2"))?;
    let raw_pairs = load_pairs(&dir.join("ref_ent_ids"))?;

    let ids1: HashSet<u32> = kg1.triples.iter().flat_map(|&(h, _, t)| [h, t]).collect();
    let ids2: HashSet<u32> = kg2.triples.iter().flat_map(|&(h, _, t)| [h, t]).collect();
    let disjoint_global = !ids1.is_empty() && !ids2.is_empty() && ids1.is_disjoint(&ids2);

    let (kg1, kg2, pairs) = if disjoint_global {
        let remap = |ids: &HashSet<u32>| -> std::collections::HashMap<u32, u32> {
            let mut sorted: Vec<u32> = ids.iter().copied().collect();
            sorted.sort_unstable();
            sorted.into_iter().enumerate().map(|(i, id)| (id, i as u32)).collect()
        };
        let map1 = remap(&ids1);
        let map2 = remap(&ids2);
        let remap_kg = |kg: &KnowledgeGraph, map: &std::collections::HashMap<u32, u32>| {
            KnowledgeGraph::from_triples(
                kg.triples.iter().map(|&(h, r, t)| (map[&h], r, map[&t])).collect(),
            )
        };
        let rkg1 = remap_kg(&kg1, &map1)?;
        let rkg2 = remap_kg(&kg2, &map2)?;
        let mut mapped = Vec::with_capacity(raw_pairs.len());
        for (a, b) in raw_pairs {
            let (l, r) = match (map1.get(&a), map2.get(&b)) {
                (Some(&l), Some(&r)) => (l, r),
                // some distributions list pairs as (kg2, kg1)
                _ => match (map1.get(&b), map2.get(&a)) {
                    (Some(&l), Some(&r)) => (l, r),
                    _ => {
                        return Err(EalignError::Invalid(format!(
                            "seed pair ({}, {}) references unknown entities",
                            a, b
                        )))
                    }
                },
            };
            mapped.push((l, r));
        }
        (rkg1, rkg2, mapped)
    } else {
        (kg1, kg2, raw_pairs)
    };

    let joint = merge_graphs(&kg1, &kg2)?;
    let offset = joint.kg1_range.end;
    let offset_pairs: Vec<(u32, u32)> = pairs.into_iter().map(|(a, b)| (a, b + offset)).collect();
    let seeds = split_pairs(offset_pairs, train_ratio, dev_ratio, rng_seed)?;
    seeds.validate(&joint)?;
    Ok(Dataset { joint, seeds })
}
