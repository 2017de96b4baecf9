//! Relation-aware graph encoder: relational reflections, relational attention
//! aggregation and multi-hop concatenation, with exact analytic gradients.
//!
//! The encoder has no linear transformation matrices. Each layer reflects
//! neighbor embeddings across relation hyperplanes, weights them with a
//! softmax attention over the incident (neighbor, relation) pairs of every
//! center entity, sums, and applies ELU. The final representation of an
//! entity is the concatenation of its input embedding and all layer outputs.

use std::collections::HashMap;

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::error::{EalignError, Result};
use crate::kg::JointGraph;

/// Trainable parameters: entity table, unit-norm relation table, and one
/// attention vector of length `3 * dim` per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub entity: Array2<f64>,
    pub relation: Array2<f64>,
    pub attention: Vec<Array1<f64>>,
    pub dim: usize,
    pub depth: usize,
}

impl ModelParams {
    /// Random uniform init in `[-sqrt(6/d), +sqrt(6/d)]`; relation rows are
    /// renormalized to unit length.
    pub fn init<R: Rng>(
        num_entities: usize,
        num_relations: usize,
        dim: usize,
        depth: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(EalignError::Contract("encoder depth must be >= 1".into()));
        }
        let bound = (6.0 / dim as f64).sqrt();
        let mut uniform = |n: usize, m: usize| {
            Array2::from_shape_fn((n, m), |_| rng.random_range(-bound..bound))
        };
        let entity = uniform(num_entities, dim);
        let mut relation = uniform(num_relations, dim);
        renormalize_rows(&mut relation);
        let attention = (0..depth)
            .map(|_| Array1::from_shape_fn(3 * dim, |_| rng.random_range(-bound..bound)))
            .collect();
        Ok(ModelParams {
            entity,
            relation,
            attention,
            dim,
            depth,
        })
    }

    pub fn num_entities(&self) -> usize {
        self.entity.nrows()
    }

    pub fn num_relations(&self) -> usize {
        self.relation.nrows()
    }

    /// Width of the concatenated multi-hop representation.
    pub fn final_dim(&self) -> usize {
        (self.depth + 1) * self.dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(EalignError::Contract("encoder depth must be >= 1".into()));
        }
        if self.attention.len() != self.depth {
            return Err(EalignError::Contract("one attention vector per layer required".into()));
        }
        for v in &self.attention {
            if v.len() != 3 * self.dim {
                return Err(EalignError::Contract("attention vector must have length 3d".into()));
            }
        }
        for (k, row) in self.relation.rows().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(EalignError::Contract(format!(
                    "relation {k} has norm {norm}, expected 1"
                )));
            }
        }
        Ok(())
    }
}

/// Renormalizes every row of `m` to unit L2 norm (zero rows left untouched).
pub fn renormalize_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row.mapv_inplace(|x| x / norm);
        }
    }
}

/// One directed message edge inside a [`Subgraph`], in local entity ids.
/// `weight` carries the sampling multiplicity (1 for exact graphs).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub center: u32,
    pub rel: u32,
    pub neighbor: u32,
    pub weight: f64,
}

/// A set of entities with their message edges, grouped by center entity.
/// The full joint graph and sampled mini-batch subgraphs share this form.
#[derive(Debug, Clone, PartialEq)]
pub struct Subgraph {
    /// local id -> global entity id
    pub entities: Vec<u32>,
    /// edges sorted by center local id
    pub edges: Vec<Edge>,
    /// `edges[group_offsets[i]..group_offsets[i+1]]` are the edges of center `i`
    pub group_offsets: Vec<usize>,
}

impl Subgraph {
    /// Builds the group index from an edge list. Every local entity must have
    /// at least one incident edge (self-loops guarantee this for full graphs).
    pub fn new(entities: Vec<u32>, mut edges: Vec<Edge>) -> Result<Self> {
        edges.sort_by_key(|e| e.center);
        let n = entities.len();
        let mut group_offsets = vec![0usize; n + 1];
        for e in &edges {
            if e.center as usize >= n || e.neighbor as usize >= n {
                return Err(EalignError::Contract("edge references unknown local entity".into()));
            }
            group_offsets[e.center as usize + 1] += 1;
        }
        for i in 0..n {
            group_offsets[i + 1] += group_offsets[i];
        }
        for i in 0..n {
            if group_offsets[i] == group_offsets[i + 1] {
                return Err(EalignError::Contract(format!(
                    "local entity {i} has no incident edge"
                )));
            }
        }
        Ok(Subgraph {
            entities,
            edges,
            group_offsets,
        })
    }

    /// The whole joint graph as one subgraph (weight 1 per triple).
    pub fn full(graph: &JointGraph) -> Self {
        let entities: Vec<u32> = (0..graph.num_entities as u32).collect();
        let mut edges = Vec::with_capacity(graph.triples.len());
        let mut group_offsets = Vec::with_capacity(graph.num_entities + 1);
        group_offsets.push(0);
        for (e, entries) in graph.neighbor_index.iter().enumerate() {
            for &(t, r) in entries {
                edges.push(Edge {
                    center: e as u32,
                    rel: r,
                    neighbor: t,
                    weight: 1.0,
                });
            }
            group_offsets.push(edges.len());
        }
        Subgraph {
            entities,
            edges,
            group_offsets,
        }
    }

    /// Exact (non-sampled) `depth`-hop neighborhood of `seeds`: all incident
    /// edges of every entity within `depth - 1` hops are included, so the
    /// forward outputs at the seed rows equal a full-graph forward bit for bit.
    /// Entities first reached at the deepest hop keep only their self-loop.
    pub fn neighborhood(graph: &JointGraph, seeds: &[u32], depth: usize) -> Result<Self> {
        use std::collections::HashMap;
        let mut local_of: HashMap<u32, u32> = HashMap::new();
        let mut entities: Vec<u32> = Vec::new();
        let mut intern = |g: u32, entities: &mut Vec<u32>| -> u32 {
            *local_of.entry(g).or_insert_with(|| {
                entities.push(g);
                (entities.len() - 1) as u32
            })
        };
        let mut frontier: Vec<u32> = Vec::new();
        for &s in seeds {
            let before = entities.len();
            intern(s, &mut entities);
            if entities.len() > before {
                frontier.push(s);
            }
        }
        let mut expanded_set: std::collections::HashSet<u32> = Default::default();
        let mut picked: Vec<(u32, u32, u32)> = Vec::new(); // (center global, rel, neighbor global)
        for _hop in 0..depth {
            let mut next = Vec::new();
            for &e in &frontier {
                if !expanded_set.insert(e) {
                    continue;
                }
                for &(nbr, r) in &graph.neighbor_index[e as usize] {
                    picked.push((e, r, nbr));
                    let before = entities.len();
                    intern(nbr, &mut entities);
                    if entities.len() > before {
                        next.push(nbr);
                    }
                }
            }
            frontier = next;
        }
        let self_rel = graph.self_loop_relation();
        for &g in &entities {
            if !expanded_set.contains(&g) {
                picked.push((g, self_rel, g));
            }
        }
        let edges = picked
            .into_iter()
            .map(|(c, r, n)| Edge {
                center: local_of[&c],
                rel: r,
                neighbor: local_of[&n],
                weight: 1.0,
            })
            .collect();
        Subgraph::new(entities, edges)
    }

    pub fn num_local(&self) -> usize {
        self.entities.len()
    }

    pub fn group(&self, center: usize) -> std::ops::Range<usize> {
        self.group_offsets[center]..self.group_offsets[center + 1]
    }
}

/// Householder reflection of `x` across the hyperplane of unit vector `r`.
pub fn reflect(x: &Array1<f64>, r: &Array1<f64>) -> Result<Array1<f64>> {
    let norm = r.dot(r).sqrt();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(EalignError::Contract(format!(
            "relation vector must be unit norm, got {norm}"
        )));
    }
    let mut out = x.clone();
    reflect_slice(out.as_slice_mut().unwrap(), r.as_slice().unwrap());
    Ok(out)
}

/// In-place `x <- x - 2 (r.x) r`. No norm check: used by forward/backward,
/// where the formula itself (not the Householder property) defines the map.
#[inline]
fn reflect_slice(x: &mut [f64], r: &[f64]) {
    let proj: f64 = x.iter().zip(r).map(|(a, b)| a * b).sum();
    for (xi, ri) in x.iter_mut().zip(r) {
        *xi -= 2.0 * proj * ri;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Attention logit `v^T [phi(h_i,r) || h_r || phi(h_j,r)]`.
pub fn attention_logit(
    center_reflected: &Array1<f64>,
    relation_vec: &Array1<f64>,
    neighbor_reflected: &Array1<f64>,
    v: &Array1<f64>,
) -> Result<f64> {
    let d = relation_vec.len();
    if center_reflected.len() != d || neighbor_reflected.len() != d || v.len() != 3 * d {
        return Err(EalignError::Contract("attention logit dimension mismatch".into()));
    }
    let v = v.as_slice().unwrap();
    Ok(dot(center_reflected.as_slice().unwrap(), &v[..d])
        + dot(relation_vec.as_slice().unwrap(), &v[d..2 * d])
        + dot(neighbor_reflected.as_slice().unwrap(), &v[2 * d..]))
}

/// Numerically stabilized softmax over one center group.
pub fn attention_normalize(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(EalignError::Contract("empty attention group".into()));
    }
    Ok(weighted_softmax(logits, None))
}

/// Softmax with optional non-negative weights (sampling multiplicities).
fn weighted_softmax(logits: &[f64], weights: Option<&[f64]>) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            let w = weights.map_or(1.0, |ws| ws[i]);
            w * (b - max).exp()
        })
        .collect();
    let sum: f64 = out.iter().sum();
    for o in &mut out {
        *o /= sum;
    }
    out
}

/// ELU activation with unit negative scale.
#[inline]
pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

#[inline]
fn elu_grad(pre: f64) -> f64 {
    if pre > 0.0 {
        1.0
    } else {
        pre.exp()
    }
}

/// Saved intermediates of one layer, sufficient for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerActivations {
    /// layer inputs (n_local x d)
    pub inputs: Array2<f64>,
    /// per-edge attention logits
    pub logits: Vec<f64>,
    /// per-edge normalized attention coefficients
    pub alpha: Vec<f64>,
    /// pre-activation sums (n_local x d)
    pub pre_act: Array2<f64>,
    /// post-activation, post-dropout outputs (n_local x d)
    pub outputs: Array2<f64>,
    /// inverted-dropout scale per element (None when not training or p = 0)
    pub dropout_mask: Option<Array2<f64>>,
}

/// Activations of a whole forward pass plus the concatenated output.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub layers: Vec<LayerActivations>,
    /// n_local x (depth+1)*d : [h^(0) || h^(1) || ... || h^(depth)]
    pub final_out: Array2<f64>,
}

/// One message-passing layer over `sub` with inputs `x`.
pub fn layer_forward<R: Rng>(
    sub: &Subgraph,
    x: &Array2<f64>,
    params: &ModelParams,
    layer: usize,
    dropout: f64,
    training: bool,
    rng: &mut R,
) -> Result<(Array2<f64>, LayerActivations)> {
    let n = sub.num_local();
    let d = params.dim;
    if x.nrows() != n || x.ncols() != d {
        return Err(EalignError::Contract("layer input shape mismatch".into()));
    }
    let v = params.attention[layer].as_slice().unwrap();
    let (va, rest) = v.split_at(d);
    let (vb, vc) = rest.split_at(d);

    let xs = x.as_slice().unwrap();
    let rel = params.relation.as_slice().unwrap();

    // attention logits
    let mut logits = vec![0.0f64; sub.edges.len()];
    let mut phi = vec![0.0f64; d];
    for (e, edge) in sub.edges.iter().enumerate() {
        let r = &rel[edge.rel as usize * d..(edge.rel as usize + 1) * d];
        let xi = &xs[edge.center as usize * d..(edge.center as usize + 1) * d];
        let xj = &xs[edge.neighbor as usize * d..(edge.neighbor as usize + 1) * d];
        phi.copy_from_slice(xi);
        reflect_slice(&mut phi, r);
        let mut beta = dot(&phi, va) + dot(r, vb);
        phi.copy_from_slice(xj);
        reflect_slice(&mut phi, r);
        beta += dot(&phi, vc);
        logits[e] = beta;
    }

    // per-center softmax with multiplicity weights
    let mut alpha = vec![0.0f64; sub.edges.len()];
    let mut weights = Vec::new();
    for i in 0..n {
        let g = sub.group(i);
        weights.clear();
        weights.extend(sub.edges[g.clone()].iter().map(|e| e.weight));
        let uniform_weight = weights.iter().all(|&w| w == 1.0);
        let probs = weighted_softmax(
            &logits[g.clone()],
            if uniform_weight { None } else { Some(&weights) },
        );
        alpha[g].copy_from_slice(&probs);
    }

    // weighted aggregation of reflected neighbors
    let mut pre_act = Array2::<f64>::zeros((n, d));
    {
        let pre = pre_act.as_slice_mut().unwrap();
        for (e, edge) in sub.edges.iter().enumerate() {
            let r = &rel[edge.rel as usize * d..(edge.rel as usize + 1) * d];
            let xj = &xs[edge.neighbor as usize * d..(edge.neighbor as usize + 1) * d];
            phi.copy_from_slice(xj);
            reflect_slice(&mut phi, r);
            let a = alpha[e];
            let row = &mut pre[edge.center as usize * d..(edge.center as usize + 1) * d];
            for (o, p) in row.iter_mut().zip(&phi) {
                *o += a * p;
            }
        }
    }

    let mut outputs = pre_act.mapv(elu);
    let dropout_mask = if training && dropout > 0.0 {
        let keep = 1.0 - dropout;
        let mask = Array2::from_shape_fn((n, d), |_| {
            if keep > 0.0 && rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        outputs *= &mask;
        Some(mask)
    } else {
        None
    };

    let acts = LayerActivations {
        inputs: x.clone(),
        logits,
        alpha,
        pre_act,
        outputs: outputs.clone(),
        dropout_mask,
    };
    Ok((outputs, acts))
}

/// Full multi-layer forward pass over `sub`, gathering entity embeddings from
/// the global tables and concatenating all layer outputs.
pub fn forward<R: Rng>(
    sub: &Subgraph,
    params: &ModelParams,
    dropout: f64,
    training: bool,
    rng: &mut R,
) -> Result<ForwardPass> {
    if params.depth == 0 {
        return Err(EalignError::Contract("encoder depth must be >= 1".into()));
    }
    let n = sub.num_local();
    let d = params.dim;
    let mut x0 = Array2::<f64>::zeros((n, d));
    for (local, &global) in sub.entities.iter().enumerate() {
        x0.row_mut(local).assign(&params.entity.row(global as usize));
    }

    let mut layers = Vec::with_capacity(params.depth);
    let mut final_out = Array2::<f64>::zeros((n, (params.depth + 1) * d));
    final_out.slice_mut(ndarray::s![.., 0..d]).assign(&x0);

    let mut x = x0;
    for l in 0..params.depth {
        let (y, acts) = layer_forward(sub, &x, params, l, dropout, training, rng)?;
        final_out
            .slice_mut(ndarray::s![.., (l + 1) * d..(l + 2) * d])
            .assign(&y);
        layers.push(acts);
        x = y;
    }
    Ok(ForwardPass { layers, final_out })
}

/// Parameter gradients of a forward pass. Entity and relation gradients are
/// sparse: only rows touched by the subgraph appear.
#[derive(Debug, Clone)]
pub struct Gradients {
    /// aligned with `Subgraph::entities`: gradient row per local entity
    pub entity: Array2<f64>,
    pub relation: HashMap<u32, Array1<f64>>,
    pub attention: Vec<Array1<f64>>,
}

/// Exact reverse-mode gradients of [`forward`] given the gradient of the
/// concatenated output. `pass` must come from the matching forward call.
pub fn backward(
    sub: &Subgraph,
    params: &ModelParams,
    pass: &ForwardPass,
    output_gradient: &Array2<f64>,
) -> Result<Gradients> {
    let n = sub.num_local();
    let d = params.dim;
    let depth = params.depth;
    if output_gradient.nrows() != n || output_gradient.ncols() != (depth + 1) * d {
        return Err(EalignError::Contract("output gradient shape mismatch".into()));
    }
    if pass.layers.len() != depth {
        return Err(EalignError::Contract("activations do not match params depth".into()));
    }

    let mut d_relation: HashMap<u32, Array1<f64>> = HashMap::new();
    let mut d_attention: Vec<Array1<f64>> = (0..depth).map(|_| Array1::zeros(3 * d)).collect();

    // gradient w.r.t. the outputs of the top layer
    let mut carry: Array2<f64> = output_gradient
        .slice(ndarray::s![.., depth * d..(depth + 1) * d])
        .to_owned();

    let rel = params.relation.as_slice().unwrap();

    for l in (0..depth).rev() {
        let acts = &pass.layers[l];
        let v = params.attention[l].as_slice().unwrap();
        let (va, rest) = v.split_at(d);
        let (vb, vc) = rest.split_at(d);
        let xs = acts.inputs.as_slice().unwrap();

        // dropout and ELU backward
        let mut d_pre = carry;
        if let Some(mask) = &acts.dropout_mask {
            d_pre *= mask;
        }
        {
            let dp = d_pre.as_slice_mut().unwrap();
            let pre = acts.pre_act.as_slice().unwrap();
            for (g, &p) in dp.iter_mut().zip(pre) {
                *g *= elu_grad(p);
            }
        }
        let ds = d_pre.as_slice().unwrap();

        // d(alpha) per edge, then softmax backward per group
        let mut d_beta = vec![0.0f64; sub.edges.len()];
        let mut phi = vec![0.0f64; d];
        for i in 0..n {
            let g = sub.group(i);
            let dsi = &ds[i * d..(i + 1) * d];
            let mut inner = 0.0;
            for e in g.clone() {
                let edge = &sub.edges[e];
                let r = &rel[edge.rel as usize * d..(edge.rel as usize + 1) * d];
                let xj = &xs[edge.neighbor as usize * d..(edge.neighbor as usize + 1) * d];
                phi.copy_from_slice(xj);
                reflect_slice(&mut phi, r);
                let da = dot(dsi, &phi);
                d_beta[e] = da;
                inner += acts.alpha[e] * da;
            }
            for e in g {
                d_beta[e] = acts.alpha[e] * (d_beta[e] - inner);
            }
        }

        // per-edge backward into inputs, relations and the attention vector
        let mut d_x = Array2::<f64>::zeros((n, d));
        {
            let dx = d_x.as_slice_mut().unwrap();
            let dv = d_attention[l].as_slice_mut().unwrap();
            let (dva, dvrest) = dv.split_at_mut(d);
            let (dvb, dvc) = dvrest.split_at_mut(d);
            let mut phi_i = vec![0.0f64; d];
            let mut phi_j = vec![0.0f64; d];
            let mut dphi = vec![0.0f64; d];
            for (e, edge) in sub.edges.iter().enumerate() {
                let i = edge.center as usize;
                let j = edge.neighbor as usize;
                let k = edge.rel;
                let r = &rel[k as usize * d..(k as usize + 1) * d];
                let xi = &xs[i * d..(i + 1) * d];
                let xj = &xs[j * d..(j + 1) * d];
                phi_i.copy_from_slice(xi);
                reflect_slice(&mut phi_i, r);
                phi_j.copy_from_slice(xj);
                reflect_slice(&mut phi_j, r);

                let db = d_beta[e];
                let dsi = &ds[i * d..(i + 1) * d];
                let a = acts.alpha[e];

                let dr = d_relation
                    .entry(k)
                    .or_insert_with(|| Array1::zeros(d))
                    .as_slice_mut()
                    .unwrap();

                // attention vector gradient: d_beta * [phi_i || r || phi_j]
                for m in 0..d {
                    dva[m] += db * phi_i[m];
                    dvb[m] += db * r[m];
                    dvc[m] += db * phi_j[m];
                }
                // direct relation term in beta
                for m in 0..d {
                    dr[m] += db * vb[m];
                }

                // dphi_j from aggregation and from beta
                for m in 0..d {
                    dphi[m] = a * dsi[m] + db * vc[m];
                }
                backprop_reflection(dx, dr, &dphi, xj, r, j, d);

                // dphi_i from beta only
                for m in 0..d {
                    dphi[m] = db * va[m];
                }
                backprop_reflection(dx, dr, &dphi, xi, r, i, d);
            }
        }

        // gradient w.r.t. this layer's inputs = message-passing term plus the
        // direct concatenation term of layer l-1's output (or h^(0))
        carry = d_x;
        carry += &output_gradient.slice(ndarray::s![.., l * d..(l + 1) * d]);
    }

    Ok(Gradients {
        entity: carry,
        relation: d_relation,
        attention: d_attention,
    })
}

/// Backward of `phi = x - 2 (r.x) r` given `dphi`, accumulating into the
/// gradient of `x` (row `row` of `dx`) and of `r` (`dr`).
#[inline]
fn backprop_reflection(
    dx: &mut [f64],
    dr: &mut [f64],
    dphi: &[f64],
    x: &[f64],
    r: &[f64],
    row: usize,
    d: usize,
) {
    let r_dot_dphi = dot(r, dphi);
    let r_dot_x = dot(r, x);
    let dxi = &mut dx[row * d..(row + 1) * d];
    for m in 0..d {
        dxi[m] += dphi[m] - 2.0 * r_dot_dphi * r[m];
        dr[m] += -2.0 * (r_dot_dphi * x[m] + r_dot_x * dphi[m]);
    }
}
