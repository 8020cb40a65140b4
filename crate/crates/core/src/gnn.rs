//! Multi-relational graph attention over the bi-level graph.
//!
//! Each POI aggregates messages along three relations: its kept POI
//! neighbors, the single prototype it belongs to, and that prototype's
//! neighboring prototypes. Every relation has its own linear transform;
//! attention logits share one scoring vector. Messages are weighted by the
//! product of a softmax attention coefficient (normalized per node and
//! relation) and the topology score read from the learned adjacency, so
//! edge weights keep receiving gradient through the aggregation. A single
//! propagation layer produces POI representations only.

use crate::error::{Error, Result};
use crate::structure::BiLevelGraph;
use crate::tape::{Tape, Var};
use crate::tensor::{Matrix, LEAKY_SLOPE};

/// The three neighbor relations a POI aggregates over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelationKind {
    /// Kept off-diagonal entries of the POI adjacency.
    Poi,
    /// The one prototype the POI is assigned to.
    Proto1,
    /// Neighbors of that prototype in the prototype adjacency.
    Proto2,
}

impl RelationKind {
    pub fn name(self) -> &'static str {
        match self {
            RelationKind::Poi => "poi",
            RelationKind::Proto1 => "proto1",
            RelationKind::Proto2 => "proto2",
        }
    }
}

/// Tape handles for one view's propagation weights: a transform per
/// relation, a self transform, and the shared attention vector.
/// Transforms are d3 x d2; `a1` is a 1 x 2*d3 row.
#[derive(Debug, Clone, Copy)]
pub struct RelationWeights {
    pub w_poi: Var,
    pub w_proto1: Var,
    pub w_proto2: Var,
    pub w_self: Var,
    pub a1: Var,
}

/// Attention diagnostics for one relation: the edge list in evaluation
/// order and the matching e x 1 column of softmax coefficients.
pub struct RelationAttention {
    pub relation: RelationKind,
    /// (target POI, neighbor index) per edge; neighbor indices refer to
    /// POIs for the POI relation and to prototypes otherwise.
    pub edges: Vec<(usize, usize)>,
    pub alpha: Var,
}

/// Result of one propagation layer.
pub struct PropagationOutput {
    /// N x d3 matrix of POI representations.
    pub p: Var,
    /// Per-relation attention coefficients, for inspection and invariants.
    pub attention: Vec<RelationAttention>,
}

/// Neighbor index set of POI `i` under relation `r`, ascending. Prototype
/// relations are empty when the graph carries no prototype level.
pub fn relation_neighbors(graph: &BiLevelGraph, i: usize, r: RelationKind) -> Vec<usize> {
    match r {
        RelationKind::Poi => graph.poi_neighbors[i].clone(),
        RelationKind::Proto1 => {
            if graph.assignments.is_empty() {
                Vec::new()
            } else {
                vec![graph.assignments[i]]
            }
        }
        RelationKind::Proto2 => {
            if graph.assignments.is_empty() {
                Vec::new()
            } else {
                graph.proto_neighbors[graph.assignments[i]].clone()
            }
        }
    }
}

/// Topology score of edge (i, j) under relation `r`: the POI adjacency
/// weight, exactly 1 for the assigned prototype, or the prototype adjacency
/// weight read at i's cluster row.
pub fn topology_score(
    tape: &Tape,
    graph: &BiLevelGraph,
    i: usize,
    j: usize,
    r: RelationKind,
) -> Result<f64> {
    let not_a_neighbor = || Error::NotANeighbor {
        i,
        j,
        relation: r.name().to_string(),
    };
    match r {
        RelationKind::Poi => {
            let a = tape.value(graph.a_poi);
            if i == j || a[(i, j)] <= 0.0 {
                return Err(not_a_neighbor());
            }
            Ok(a[(i, j)])
        }
        RelationKind::Proto1 => {
            if graph.assignments.get(i) != Some(&j) {
                return Err(not_a_neighbor());
            }
            Ok(1.0)
        }
        RelationKind::Proto2 => {
            let a_proto = graph.a_proto.ok_or_else(not_a_neighbor)?;
            let p = graph.assignments[i];
            let a = tape.value(a_proto);
            if j == p || a[(p, j)] <= 0.0 {
                return Err(not_a_neighbor());
            }
            Ok(a[(p, j)])
        }
    }
}

/// Prototype node features: the member mean of POI ID embeddings per
/// cluster, kept on tape so gradients reach the embeddings. Built as a
/// constant averaging matrix times the embedding table.
pub fn prototype_features(
    tape: &mut Tape,
    e_id: Var,
    assignments: &[usize],
    k: usize,
) -> Result<Var> {
    let n = assignments.len();
    let mut counts = vec![0usize; k];
    for &a in assignments {
        counts[a] += 1;
    }
    let mut avg = Matrix::zeros((k, n));
    for (i, &a) in assignments.iter().enumerate() {
        avg[(a, i)] = 1.0 / counts[a] as f64;
    }
    let avg = tape.leaf(avg);
    tape.matmul(avg, e_id)
}

/// Edge list, segment offsets, and topology-score column for one relation.
struct RelationEdges {
    edges: Vec<(usize, usize)>,
    offsets: Vec<usize>,
}

fn collect_edges(graph: &BiLevelGraph, n: usize, r: RelationKind) -> RelationEdges {
    let mut edges = Vec::new();
    let mut offsets = Vec::with_capacity(n + 1);
    offsets.push(0);
    for i in 0..n {
        for j in relation_neighbors(graph, i, r) {
            edges.push((i, j));
        }
        offsets.push(edges.len());
    }
    RelationEdges { edges, offsets }
}

/// One propagation layer: for every relation, attention-weighted and
/// topology-scored messages from transformed neighbor features, plus an
/// untransformed-activation self term. Returns POI representations only.
///
/// `proto_features` must be the member-mean features from
/// [`prototype_features`]; pass `None` when the graph has no prototype
/// level (both prototype relations then contribute nothing).
pub fn propagate(
    tape: &mut Tape,
    graph: &BiLevelGraph,
    e_id: Var,
    proto_features: Option<Var>,
    w: &RelationWeights,
) -> Result<PropagationOutput> {
    let n = tape.value(e_id).nrows();
    let mut p = tape.matmul_nt(e_id, w.w_self)?;
    let mut attention = Vec::new();

    let relations = [
        (RelationKind::Poi, w.w_poi, Some(e_id)),
        (RelationKind::Proto1, w.w_proto1, proto_features),
        (RelationKind::Proto2, w.w_proto2, proto_features),
    ];
    for (kind, w_r, features) in relations {
        let Some(features) = features else { continue };
        let rel = collect_edges(graph, n, kind);
        if rel.edges.is_empty() {
            continue;
        }
        let srcs: Vec<usize> = rel.edges.iter().map(|&(i, _)| i).collect();
        let dsts: Vec<usize> = rel.edges.iter().map(|&(_, j)| j).collect();

        let src_t = tape.matmul_nt(e_id, w_r)?;
        let dst_t = tape.matmul_nt(features, w_r)?;
        let src_rows = tape.gather_rows(src_t, &srcs)?;
        let dst_rows = tape.gather_rows(dst_t, &dsts)?;

        let pair = tape.concat_cols(src_rows, dst_rows)?;
        let logits = tape.matmul_nt(pair, w.a1)?;
        let logits = tape.leaky_relu(logits, LEAKY_SLOPE);
        let alpha = tape.segment_softmax(logits, &rel.offsets)?;

        let scores = match kind {
            RelationKind::Poi => tape.gather_elems(graph.a_poi, &rel.edges)?,
            RelationKind::Proto1 => tape.leaf(Matrix::ones((rel.edges.len(), 1))),
            RelationKind::Proto2 => {
                let a_proto = graph.a_proto.expect("prototype features imply a_proto");
                let rows: Vec<(usize, usize)> = rel
                    .edges
                    .iter()
                    .map(|&(i, j)| (graph.assignments[i], j))
                    .collect();
                tape.gather_elems(a_proto, &rows)?
            }
        };
        let coef = tape.mul(alpha, scores)?;
        let messages = tape.mul_col(dst_rows, coef)?;
        let summed = tape.scatter_add_rows(messages, &srcs, n)?;
        p = tape.add(p, summed)?;

        attention.push(RelationAttention {
            relation: kind,
            edges: rel.edges,
            alpha,
        });
    }

    Ok(PropagationOutput { p, attention })
}
