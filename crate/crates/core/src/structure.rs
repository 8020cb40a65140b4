//! Bi-level graph structure learning for one feature view.
//!
//! The fine level is a pairwise POI graph: a two-layer transform maps
//! primitive features to unit-norm structure embeddings, cosine similarity
//! gives a dense adjacency, and epsilon/top-k sparsification plus row
//! normalization produce the final weights. The coarse level clusters the
//! structure embeddings with one K-Means assign+update round per E-step;
//! cluster centroids become prototype nodes, connected by the same pairwise
//! construction applied with a second transform, while the POI-to-prototype
//! assignment matrix stays exactly one-hot.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{self, Matrix};

/// Tape handles for one structure-embedding transform (two affine layers).
/// `w1` is d2 x d1, `b1`/`b2` are 1 x d2 rows, `w2` is d2 x d2.
#[derive(Debug, Clone, Copy)]
pub struct GslTransformVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Clustering state for one view. Centroids are raw member means; they are
/// L2-normalized at the point of loss evaluation, not in storage.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub centroids: Matrix,
    pub assignments: Vec<usize>,
}

impl PrototypeSet {
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }
}

/// Sparsification and clustering hyperparameters for one view.
#[derive(Debug, Clone, Copy)]
pub struct StructureConfig {
    pub k: usize,
    pub tau1: f64,
    pub epsilon: f64,
    pub top_k: usize,
}

/// The learned graphs a view contributes to propagation. Adjacencies live
/// on the tape so topology scores carry gradients; neighbor lists are the
/// sparsity pattern frozen at construction.
pub struct BiLevelGraph {
    /// N x N row-stochastic POI adjacency.
    pub a_poi: Var,
    /// K x K row-stochastic prototype adjacency; absent when the
    /// hierarchical level is disabled.
    pub a_proto: Option<Var>,
    /// Per-POI cluster index; empty when the hierarchical level is disabled.
    pub assignments: Vec<usize>,
    /// Per-POI off-diagonal neighbors kept by sparsification, ascending.
    pub poi_neighbors: Vec<Vec<usize>>,
    /// Per-prototype off-diagonal neighbors kept by sparsification.
    pub proto_neighbors: Vec<Vec<usize>>,
}

impl BiLevelGraph {
    pub fn n(&self) -> usize {
        self.poi_neighbors.len()
    }

    pub fn k(&self) -> usize {
        self.proto_neighbors.len()
    }

    /// Kept entries in the POI adjacency, self-loops included.
    pub fn e1(&self) -> usize {
        self.n() + self.poi_neighbors.iter().map(Vec::len).sum::<usize>()
    }

    /// Kept entries in the assignment matrix: one per POI.
    pub fn e2(&self) -> usize {
        self.assignments.len()
    }

    /// Kept entries in the prototype adjacency, self-loops included.
    pub fn e3(&self) -> usize {
        if self.a_proto.is_none() {
            return 0;
        }
        self.k() + self.proto_neighbors.iter().map(Vec::len).sum::<usize>()
    }

    /// The N x K one-hot assignment matrix, materialized on demand.
    pub fn hier_matrix(&self, k: usize) -> Matrix {
        let mut m = Matrix::zeros((self.assignments.len(), k));
        for (i, &c) in self.assignments.iter().enumerate() {
            m[(i, c)] = 1.0;
        }
        m
    }
}

/// Maps primitive features to unit-norm structure embeddings:
/// sigmoid affine layer, second affine layer, row L2 normalization.
pub fn structure_embed(tape: &mut Tape, x: Var, t: &GslTransformVars) -> Result<Var> {
    let h = tape.matmul_nt(x, t.w1)?;
    let h = tape.add_row(h, t.b1)?;
    let h = tape.sigmoid(h);
    let z = tape.matmul_nt(h, t.w2)?;
    let z = tape.add_row(z, t.b2)?;
    tape.l2_normalize_rows(z)
}

/// Dense cosine-similarity adjacency: symmetric with unit diagonal.
pub fn pairwise_adjacency(tape: &mut Tape, z: Var) -> Result<Var> {
    let n = tape.l2_normalize_rows(z)?;
    tape.matmul_nt(n, n)
}

/// The sparsification pattern: per row, the diagonal always survives, and
/// off-diagonal entries survive if they are >= epsilon and among the row's
/// `top_k` largest off-diagonal values (ties broken by ascending index).
pub fn kept_mask(s: &Matrix, epsilon: f64, top_k: usize) -> Matrix {
    let n = s.nrows();
    let mut mask = Matrix::zeros((n, n));
    let mut order: Vec<usize> = Vec::with_capacity(n.saturating_sub(1));
    for i in 0..n {
        mask[(i, i)] = 1.0;
        order.clear();
        order.extend((0..n).filter(|&j| j != i && s[(i, j)] >= epsilon));
        order.sort_by(|&a, &b| {
            s[(i, b)]
                .partial_cmp(&s[(i, a)])
                .expect("finite similarities")
                .then(a.cmp(&b))
        });
        for &j in order.iter().take(top_k) {
            mask[(i, j)] = 1.0;
        }
    }
    mask
}

/// Applies the sparsification pattern and renormalizes each row to sum 1.
/// Gradients flow through the surviving entries only.
pub fn sparsify_normalize(tape: &mut Tape, s: Var, epsilon: f64, top_k: usize) -> Result<Var> {
    let mask = kept_mask(tape.value(s), epsilon, top_k);
    let mask = tape.leaf(mask);
    let masked = tape.mul(s, mask)?;
    let sums = tape.row_sums(masked);
    tape.div_col(masked, sums)
}

/// Off-diagonal neighbor lists implied by a mask (or any adjacency whose
/// zero entries mean "no edge"), ascending per row.
pub fn neighbor_lists(a: &Matrix) -> Vec<Vec<usize>> {
    (0..a.nrows())
        .map(|i| {
            (0..a.ncols())
                .filter(|&j| j != i && a[(i, j)] > 0.0)
                .collect()
        })
        .collect()
}

/// k-means++ seeding: first centroid uniform, each further centroid drawn
/// with probability proportional to squared distance from the nearest
/// chosen centroid. Assignments are set to the nearest seeded centroid.
pub fn kmeans_init(z: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Result<PrototypeSet> {
    let n = z.nrows();
    if k > n || k == 0 {
        return Err(Error::TooFewPoints { k, n });
    }
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    chosen.push(rng.random_range(0..n));
    let mut d2: Vec<f64> = (0..n).map(|i| row_dist2(z, i, z, chosen[0])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            // All remaining points coincide with a centroid; take the first
            // index not yet chosen to keep seeding deterministic.
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for i in 0..n {
            d2[i] = d2[i].min(row_dist2(z, i, z, next));
        }
    }

    let mut centroids = Matrix::zeros((k, z.ncols()));
    for (c, &i) in chosen.iter().enumerate() {
        centroids.row_mut(c).assign(&z.row(i));
    }
    let assignments = assign_nearest(z, &centroids);
    Ok(PrototypeSet {
        centroids,
        assignments,
    })
}

fn row_dist2(a: &Matrix, i: usize, b: &Matrix, j: usize) -> f64 {
    a.row(i)
        .iter()
        .zip(b.row(j))
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// Nearest centroid per point by Euclidean distance, ties to lowest index.
fn assign_nearest(z: &Matrix, centroids: &Matrix) -> Vec<usize> {
    (0..z.nrows())
        .map(|i| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..centroids.nrows() {
                let d = row_dist2(z, i, centroids, c);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// One E-step round: reassign points to nearest centroids, repair empty
/// clusters by re-seeding them with the point farthest from their previous
/// centroid, then recompute centroids as member means.
pub fn kmeans_estep(z: &Matrix, state: &mut PrototypeSet) -> Result<()> {
    let n = z.nrows();
    let k = state.k();
    if k > n {
        return Err(Error::TooFewPoints { k, n });
    }
    let mut assignments = assign_nearest(z, &state.centroids);

    let mut counts = vec![0usize; k];
    for &a in &assignments {
        counts[a] += 1;
    }
    for j in 0..k {
        if counts[j] > 0 {
            continue;
        }
        // Farthest point from the empty cluster's old centroid, skipping
        // points whose current cluster would become empty in turn.
        let mut pick: Option<usize> = None;
        let mut pick_d = -1.0;
        for i in 0..n {
            if counts[assignments[i]] < 2 {
                continue;
            }
            let d = row_dist2(z, i, &state.centroids, j);
            if d > pick_d {
                pick_d = d;
                pick = Some(i);
            }
        }
        if let Some(i) = pick {
            counts[assignments[i]] -= 1;
            assignments[i] = j;
            counts[j] = 1;
        }
    }

    let mut centroids = Matrix::zeros((k, z.ncols()));
    for (i, &a) in assignments.iter().enumerate() {
        let mut row = centroids.row_mut(a);
        row += &z.row(i);
    }
    for (mut row, &count) in centroids.rows_mut().into_iter().zip(&counts) {
        if count > 0 {
            row.mapv_inplace(|v| v / count as f64);
        }
    }

    state.centroids = centroids;
    state.assignments = assignments;
    Ok(())
}

/// Within-cluster sum of squared distances for the current state.
pub fn wcss(z: &Matrix, state: &PrototypeSet) -> f64 {
    state
        .assignments
        .iter()
        .enumerate()
        .map(|(i, &a)| row_dist2(z, i, &state.centroids, a))
        .sum()
}

/// Clustering alignment loss: cross-entropy of each embedding's softmax
/// similarity (temperature tau1) to the centroids against its assigned
/// cluster. Centroids enter as constants, L2-normalized here; gradients
/// reach only the embeddings.
pub fn hsl_loss(tape: &mut Tape, z: Var, prototypes: &PrototypeSet, tau1: f64) -> Result<Var> {
    let normalized = tensor::l2_normalize_rows(&prototypes.centroids)?;
    let c = tape.leaf(normalized);
    let sim = tape.matmul_nt(z, c)?;
    let logits = tape.scale(sim, 1.0 / tau1);
    tape.nll_rows(logits, &prototypes.assignments)
}

/// Prototype-level pairwise structure: the centroid matrix (as constant
/// primitive features) runs through its own transform, cosine adjacency,
/// and sparsification.
pub fn prototype_adjacency(
    tape: &mut Tape,
    centroids: &Matrix,
    t: &GslTransformVars,
    epsilon: f64,
    top_k: usize,
) -> Result<Var> {
    let c = tape.leaf(centroids.clone());
    let z = structure_embed(tape, c, t)?;
    let s = pairwise_adjacency(tape, z)?;
    sparsify_normalize(tape, s, epsilon, top_k)
}

/// Assembles the full bi-level graph for one view and checks the edge-count
/// relations that the complexity analysis relies on: K < N, one assignment
/// per POI (E2 = N), and E3 <= E1 <= N^2.
pub fn build_bilevel_graph(
    tape: &mut Tape,
    x: Var,
    poi_t: &GslTransformVars,
    proto_t: &GslTransformVars,
    prototypes: &PrototypeSet,
    cfg: &StructureConfig,
) -> Result<(Var, BiLevelGraph)> {
    let n = tape.value(x).nrows();
    let z = structure_embed(tape, x, poi_t)?;
    let s = pairwise_adjacency(tape, z)?;
    let a_poi = sparsify_normalize(tape, s, cfg.epsilon, cfg.top_k)?;
    let poi_neighbors = neighbor_lists(tape.value(a_poi));

    let a_proto = prototype_adjacency(tape, &prototypes.centroids, proto_t, cfg.epsilon, cfg.top_k)?;
    let proto_neighbors = neighbor_lists(tape.value(a_proto));

    let graph = BiLevelGraph {
        a_poi,
        a_proto: Some(a_proto),
        assignments: prototypes.assignments.clone(),
        poi_neighbors,
        proto_neighbors,
    };

    assert!(prototypes.k() < n, "prototype count must stay below POI count");
    assert_eq!(graph.e2(), n, "exactly one cluster per POI");
    assert!(graph.e3() <= graph.e1(), "prototype graph denser than POI graph");
    assert!(graph.e1() <= n * n);
    Ok((z, graph))
}

/// Pairwise-only variant used when the hierarchical level is ablated:
/// learned POI adjacency, no prototypes.
pub fn build_pairwise_graph(
    tape: &mut Tape,
    x: Var,
    poi_t: &GslTransformVars,
    cfg: &StructureConfig,
) -> Result<(Var, BiLevelGraph)> {
    let z = structure_embed(tape, x, poi_t)?;
    let s = pairwise_adjacency(tape, z)?;
    let a_poi = sparsify_normalize(tape, s, cfg.epsilon, cfg.top_k)?;
    let poi_neighbors = neighbor_lists(tape.value(a_poi));
    let n = poi_neighbors.len();
    let graph = BiLevelGraph {
        a_poi,
        a_proto: None,
        assignments: Vec::new(),
        poi_neighbors,
        proto_neighbors: Vec::new(),
    };
    assert!(graph.e1() <= n * n);
    Ok((z, graph))
}

/// Rule-based spatial adjacency: 1 where two POIs lie within
/// `threshold_km` of each other (great-circle), 1 on the diagonal,
/// 0 elsewhere. Input to [`build_rule_graph`] for the ablation that
/// replaces learned pairwise structure.
pub fn spatial_rule_adjacency(pois: &[crate::ingest::Poi], threshold_km: f64) -> Matrix {
    let n = pois.len();
    let mut a = Matrix::zeros((n, n));
    for i in 0..n {
        a[(i, i)] = 1.0;
        for j in (i + 1)..n {
            let d = crate::ingest::haversine_km(
                pois[i].latitude,
                pois[i].longitude,
                pois[j].latitude,
                pois[j].longitude,
            );
            if d <= threshold_km {
                a[(i, j)] = 1.0;
                a[(j, i)] = 1.0;
            }
        }
    }
    a
}

/// Rule-based temporal adjacency: pairwise cosine similarity of raw
/// visiting-time histograms, with unit diagonal. Rows without any training
/// visits have no defined direction and stay isolated (self-loop only).
pub fn temporal_rule_adjacency(hist: &Matrix) -> Matrix {
    let n = hist.nrows();
    let norms: Vec<f64> = (0..n)
        .map(|i| hist.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut a = Matrix::zeros((n, n));
    for i in 0..n {
        a[(i, i)] = 1.0;
        for j in (i + 1)..n {
            if norms[i] > 0.0 && norms[j] > 0.0 {
                let dot: f64 = hist.row(i).iter().zip(hist.row(j)).map(|(x, y)| x * y).sum();
                let sim = dot / (norms[i] * norms[j]);
                a[(i, j)] = sim;
                a[(j, i)] = sim;
            }
        }
    }
    a
}

/// Graph from a precomputed constant adjacency (rule-based construction):
/// the matrix is sparsified and normalized like a learned one but carries
/// no gradient.
pub fn build_rule_graph(
    tape: &mut Tape,
    adjacency: Matrix,
    cfg: &StructureConfig,
) -> Result<BiLevelGraph> {
    let n = adjacency.nrows();
    let s = tape.leaf(adjacency);
    let a_poi = sparsify_normalize(tape, s, cfg.epsilon, cfg.top_k)?;
    let poi_neighbors = neighbor_lists(tape.value(a_poi));
    let graph = BiLevelGraph {
        a_poi,
        a_proto: None,
        assignments: Vec::new(),
        poi_neighbors,
        proto_neighbors: Vec::new(),
    };
    assert!(graph.e1() <= n * n);
    Ok(graph)
}

/// Normalized mutual information between two labelings of the same points
/// (arithmetic-mean normalization). Used to score clustering recovery.
pub fn normalized_mutual_information(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must cover the same points");
    let n = a.len() as f64;
    let ka = a.iter().max().map_or(0, |&m| m + 1);
    let kb = b.iter().max().map_or(0, |&m| m + 1);
    let mut joint = vec![vec![0.0; kb]; ka];
    let mut ca = vec![0.0; ka];
    let mut cb = vec![0.0; kb];
    for (&x, &y) in a.iter().zip(b) {
        joint[x][y] += 1.0;
        ca[x] += 1.0;
        cb[y] += 1.0;
    }
    let mut mi = 0.0;
    for x in 0..ka {
        for y in 0..kb {
            if joint[x][y] > 0.0 {
                let pxy = joint[x][y] / n;
                mi += pxy * (pxy * n * n / (ca[x] * cb[y])).ln();
            }
        }
    }
    let entropy = |c: &[f64]| -> f64 {
        c.iter()
            .filter(|&&v| v > 0.0)
            .map(|&v| -(v / n) * (v / n).ln())
            .sum()
    };
    let mean_h = 0.5 * (entropy(&ca) + entropy(&cb));
    if mean_h == 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    (mi / mean_h).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::derive_rng;
    use ndarray::array;
    use rand::Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    fn transform_vars(tape: &mut Tape, rng: &mut ChaCha8Rng, d1: usize, d2: usize) -> GslTransformVars {
        GslTransformVars {
            w1: tape.param(random_matrix(rng, d2, d1)),
            b1: tape.param(random_matrix(rng, 1, d2)),
            w2: tape.param(random_matrix(rng, d2, d2)),
            b2: tape.param(random_matrix(rng, 1, d2)),
        }
    }

    #[test]
    fn structure_embed_constant_transform_normalizes() {
        let mut tape = Tape::new();
        let x = tape.leaf(random_matrix(&mut derive_rng(0, "x", 0, 0), 4, 3));
        let d2 = 3;
        let t = GslTransformVars {
            w1: tape.leaf(Matrix::zeros((d2, 3))),
            b1: tape.leaf(Matrix::zeros((1, d2))),
            w2: tape.leaf(Matrix::zeros((d2, d2))),
            b2: tape.leaf(array![[2.0, 0.0, 0.0]]),
        };
        let z = structure_embed(&mut tape, x, &t).unwrap();
        for row in tape.value(z).rows() {
            assert_eq!(row.to_vec(), vec![1.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn structure_embed_matches_per_row_formula() {
        let mut rng = derive_rng(1, "structure", 0, 0);
        let x_m = random_matrix(&mut rng, 5, 2);
        let mut tape = Tape::new();
        let x = tape.leaf(x_m.clone());
        let t = transform_vars(&mut tape, &mut rng, 2, 2);
        let (w1, b1, w2, b2) = (
            tape.value(t.w1).clone(),
            tape.value(t.b1).clone(),
            tape.value(t.w2).clone(),
            tape.value(t.b2).clone(),
        );
        let z = structure_embed(&mut tape, x, &t).unwrap();
        let zv = tape.value(z);

        for i in 0..5 {
            // Scalar walk of the two layers for row i.
            let mut h = vec![0.0; 2];
            for r in 0..2 {
                let mut acc = b1[(0, r)];
                for c in 0..2 {
                    acc += w1[(r, c)] * x_m[(i, c)];
                }
                h[r] = 1.0 / (1.0 + (-acc).exp());
            }
            let mut zr = vec![0.0; 2];
            for r in 0..2 {
                let mut acc = b2[(0, r)];
                for c in 0..2 {
                    acc += w2[(r, c)] * h[c];
                }
                zr[r] = acc;
            }
            let norm = (zr[0] * zr[0] + zr[1] * zr[1]).sqrt();
            assert!((zv[(i, 0)] - zr[0] / norm).abs() < 1e-12);
            assert!((zv[(i, 1)] - zr[1] / norm).abs() < 1e-12);
            let row_norm: f64 = zv.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((row_norm - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn pairwise_adjacency_is_symmetric_with_unit_diagonal() {
        let mut rng = derive_rng(2, "pairwise", 0, 0);
        let mut tape = Tape::new();
        let z = tape.leaf(random_matrix(&mut rng, 6, 4));
        let s = pairwise_adjacency(&mut tape, z).unwrap();
        let sv = tape.value(s);
        for i in 0..6 {
            assert!((sv[(i, i)] - 1.0).abs() < 1e-12);
            for j in 0..6 {
                assert!((sv[(i, j)] - sv[(j, i)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pairwise_adjacency_identical_and_orthogonal_rows() {
        let mut tape = Tape::new();
        let same = tape.leaf(array![[1.0, 2.0], [2.0, 4.0], [0.5, 1.0]]);
        let s = pairwise_adjacency(&mut tape, same).unwrap();
        assert!(tape.value(s).iter().all(|&v| (v - 1.0).abs() < 1e-12));

        let ortho = tape.leaf(array![[1.0, 0.0], [0.0, 3.0]]);
        let s = pairwise_adjacency(&mut tape, ortho).unwrap();
        let sv = tape.value(s);
        assert!(sv[(0, 1)].abs() < 1e-12);
        assert!(sv[(1, 0)].abs() < 1e-12);
    }

    #[test]
    fn sparsify_worked_example() {
        let mut tape = Tape::new();
        let s = tape.leaf(array![
            [1.0, 0.7, 0.2],
            [0.7, 1.0, 0.3],
            [0.2, 0.3, 1.0]
        ]);
        let a = sparsify_normalize(&mut tape, s, 0.5, 2).unwrap();
        let av = tape.value(a);
        assert!((av[(0, 0)] - 0.5882).abs() < 1e-4);
        assert!((av[(0, 1)] - 0.4118).abs() < 1e-4);
        assert_eq!(av[(0, 2)], 0.0);
        // Row 2 has nothing above epsilon: self-loop only.
        assert_eq!(av[(2, 2)], 1.0);
        assert_eq!(av[(2, 0)], 0.0);
        assert_eq!(av[(2, 1)], 0.0);
        for i in 0..3 {
            assert!((av.row(i).sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn sparsify_top_k_one_keeps_at_most_one_neighbor() {
        let mut rng = derive_rng(3, "sparsify", 0, 0);
        let mut tape = Tape::new();
        let z = tape.leaf(random_matrix(&mut rng, 8, 4));
        let s = pairwise_adjacency(&mut tape, z).unwrap();
        let a = sparsify_normalize(&mut tape, s, 0.0, 1).unwrap();
        let av = tape.value(a);
        for i in 0..8 {
            let nonzero = (0..8).filter(|&j| av[(i, j)] != 0.0).count();
            assert!(nonzero <= 2, "row {i} kept {nonzero} entries");
            assert!(av[(i, i)] > 0.0);
            // Brute-force: the kept off-diagonal entry is the row maximum.
            let sv = tape.value(s);
            if let Some(j) = (0..8).find(|&j| j != i && av[(i, j)] != 0.0) {
                let max = (0..8)
                    .filter(|&c| c != i && sv[(i, c)] >= 0.0)
                    .map(|c| sv[(i, c)])
                    .fold(f64::NEG_INFINITY, f64::max);
                assert!((sv[(i, j)] - max).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sparsify_tie_breaks_by_ascending_index() {
        let mut tape = Tape::new();
        let s = tape.leaf(array![
            [1.0, 0.6, 0.6, 0.6],
            [0.6, 1.0, 0.0, 0.0],
            [0.6, 0.0, 1.0, 0.0],
            [0.6, 0.0, 0.0, 1.0]
        ]);
        let a = sparsify_normalize(&mut tape, s, 0.5, 2).unwrap();
        let av = tape.value(a);
        // Row 0 ties at 0.6 for columns 1..3; indices 1 and 2 win.
        assert!(av[(0, 1)] > 0.0);
        assert!(av[(0, 2)] > 0.0);
        assert_eq!(av[(0, 3)], 0.0);
    }

    #[test]
    fn kmeans_single_cluster_is_global_mean() {
        let mut rng = derive_rng(4, "kmeans", 0, 0);
        let z = random_matrix(&mut rng, 7, 3);
        let mut state = kmeans_init(&z, 1, &mut rng).unwrap();
        kmeans_estep(&z, &mut state).unwrap();
        assert!(state.assignments.iter().all(|&a| a == 0));
        let mean = z.sum_axis(ndarray::Axis(0)) / 7.0;
        for (a, b) in state.centroids.row(0).iter().zip(mean.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// Two Gaussian blobs far apart; returns (points, labels).
    fn two_blobs(rng: &mut ChaCha8Rng, per: usize) -> (Matrix, Vec<usize>) {
        let mut z = Matrix::zeros((2 * per, 2));
        let mut labels = Vec::with_capacity(2 * per);
        for i in 0..2 * per {
            let blob = i / per;
            let center = if blob == 0 { -5.0 } else { 5.0 };
            z[(i, 0)] = center + rng.random_range(-0.5..0.5);
            z[(i, 1)] = center + rng.random_range(-0.5..0.5);
            labels.push(blob);
        }
        (z, labels)
    }

    #[test]
    fn kmeans_assignments_match_nearest_centroid_oracle() {
        let mut rng = derive_rng(5, "blobs", 0, 0);
        let (z, _) = two_blobs(&mut rng, 20);
        let mut state = kmeans_init(&z, 2, &mut rng).unwrap();
        for _ in 0..3 {
            kmeans_estep(&z, &mut state).unwrap();
        }
        // The E-step assigns against its input centroids before updating
        // them, so run one more round and check its assignments against an
        // exhaustive scan over the centroids it started from.
        let before = state.centroids.clone();
        let mut next = state.clone();
        kmeans_estep(&z, &mut next).unwrap();
        for i in 0..z.nrows() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..2 {
                let d: f64 = z
                    .row(i)
                    .iter()
                    .zip(before.row(c))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            assert_eq!(next.assignments[i], best, "point {i}");
        }
    }

    #[test]
    fn kmeans_tie_goes_to_lowest_index() {
        // First point equidistant to both centroids; second pins cluster 1.
        let z = array![[0.0, 0.0], [-1.0, 0.0]];
        let mut state = PrototypeSet {
            centroids: array![[1.0, 0.0], [-1.0, 0.0]],
            assignments: vec![0, 1],
        };
        kmeans_estep(&z, &mut state).unwrap();
        assert_eq!(state.assignments, vec![0, 1]);
    }

    #[test]
    fn kmeans_rejects_more_clusters_than_points() {
        let z = array![[0.0, 0.0], [1.0, 1.0]];
        let mut rng = derive_rng(6, "kmeans", 0, 0);
        assert!(matches!(
            kmeans_init(&z, 3, &mut rng),
            Err(Error::TooFewPoints { k: 3, n: 2 })
        ));
    }

    #[test]
    fn empty_cluster_is_reseeded_with_farthest_point() {
        // Two tight groups; third centroid far away captures nothing.
        let z = array![
            [0.0, 0.0],
            [0.1, 0.0],
            [10.0, 0.0],
            [10.1, 0.0]
        ];
        let mut state = PrototypeSet {
            centroids: array![[0.0, 0.0], [10.0, 0.0], [500.0, 500.0]],
            assignments: vec![0; 4],
        };
        kmeans_estep(&z, &mut state).unwrap();
        let mut counts = [0usize; 3];
        for &a in &state.assignments {
            counts[a] += 1;
        }
        assert!(counts.iter().all(|&c| c > 0), "counts {counts:?}");
        // The reseeded member is the point farthest from (500,500): index 0.
        assert_eq!(state.assignments[0], 2);
    }

    #[test]
    fn wcss_monotone_over_ten_rounds() {
        let mut rng = derive_rng(7, "wcss", 0, 0);
        let z = random_matrix(&mut rng, 40, 3);
        let mut state = kmeans_init(&z, 5, &mut rng).unwrap();
        let mut prev = wcss(&z, &state);
        for round in 0..10 {
            kmeans_estep(&z, &mut state).unwrap();
            let now = wcss(&z, &state);
            assert!(now <= prev + 1e-9, "round {round}: {now} > {prev}");
            prev = now;
        }
    }

    #[test]
    fn hsl_loss_single_point_single_cluster_is_zero() {
        let mut tape = Tape::new();
        let z = tape.leaf(array![[1.0, 0.0]]);
        let protos = PrototypeSet {
            centroids: array![[1.0, 0.0]],
            assignments: vec![0],
        };
        let loss = hsl_loss(&mut tape, z, &protos, 0.1).unwrap();
        assert!(tape.scalar(loss).unwrap().abs() < 1e-12);
    }

    #[test]
    fn hsl_loss_matches_analytic_two_cluster_case() {
        let mut tape = Tape::new();
        let z = tape.leaf(array![[1.0, 0.0]]);
        let protos = PrototypeSet {
            centroids: array![[1.0, 0.0], [0.0, 1.0]],
            assignments: vec![0],
        };
        let loss = hsl_loss(&mut tape, z, &protos, 1.0).unwrap();
        // -log(e / (e + 1)) with logits (1, 0).
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((tape.scalar(loss).unwrap() - expected).abs() < 1e-5);
        assert!((expected - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn hsl_loss_gradient_reaches_embeddings_not_centroids() {
        let mut rng = derive_rng(8, "hsl", 0, 0);
        let mut tape = Tape::new();
        let z_m = random_matrix(&mut rng, 4, 3);
        let z_raw = tape.param(z_m);
        let z = tape.l2_normalize_rows(z_raw).unwrap();
        let protos = PrototypeSet {
            centroids: random_matrix(&mut rng, 2, 3),
            assignments: vec![0, 1, 0, 1],
        };
        let loss = hsl_loss(&mut tape, z, &protos, 0.1).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(z_raw).unwrap();
        assert!(g.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn hsl_loss_decreases_under_gradient_descent_on_fixed_assignments() {
        let mut rng = derive_rng(9, "hsl-descent", 0, 0);
        let mut z = random_matrix(&mut rng, 12, 3);
        let protos = PrototypeSet {
            centroids: random_matrix(&mut rng, 3, 3),
            assignments: (0..12).map(|i| i % 3).collect(),
        };
        let mut last = f64::INFINITY;
        for step in 0..10 {
            let mut tape = Tape::new();
            let zv = tape.param(z.clone());
            let zn = tape.l2_normalize_rows(zv).unwrap();
            let loss = hsl_loss(&mut tape, zn, &protos, 0.5).unwrap();
            let value = tape.scalar(loss).unwrap();
            assert!(value < last, "step {step}: {value} >= {last}");
            last = value;
            let grads = tape.backward(loss).unwrap();
            let g = grads.get(zv).unwrap();
            z = &z - &(g * 0.5);
        }
    }

    #[test]
    fn prototype_adjacency_degenerate_cases() {
        let mut rng = derive_rng(10, "proto", 0, 0);
        let mut tape = Tape::new();
        let t = transform_vars(&mut tape, &mut rng, 3, 3);

        let single = Matrix::from_shape_fn((1, 3), |_| rng.random_range(-1.0..1.0));
        let a = prototype_adjacency(&mut tape, &single, &t, 0.5, 10).unwrap();
        assert_eq!(tape.value(a), &array![[1.0]]);

        let mut same = Matrix::zeros((3, 3));
        for mut row in same.rows_mut() {
            row.assign(&ndarray::array![0.3, -0.2, 0.9]);
        }
        let a = prototype_adjacency(&mut tape, &same, &t, 0.5, 10).unwrap();
        let av = tape.value(a);
        for v in av.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn prototype_adjacency_equals_composition() {
        let mut rng = derive_rng(11, "proto-comp", 0, 0);
        let centroids = random_matrix(&mut rng, 5, 4);
        let mut tape = Tape::new();
        let t = transform_vars(&mut tape, &mut rng, 4, 4);
        let composed = prototype_adjacency(&mut tape, &centroids, &t, 0.3, 2).unwrap();

        let c = tape.leaf(centroids);
        let z = structure_embed(&mut tape, c, &t).unwrap();
        let s = pairwise_adjacency(&mut tape, z).unwrap();
        let direct = sparsify_normalize(&mut tape, s, 0.3, 2).unwrap();
        assert_eq!(tape.value(composed), tape.value(direct));
    }

    fn build_test_graph(
        n: usize,
        k: usize,
        cfg: &StructureConfig,
        seed: u64,
    ) -> (Tape, Var, BiLevelGraph) {
        let mut rng = derive_rng(seed, "graph", 0, 0);
        let x_m = Matrix::from_shape_fn((n, 2), |_| rng.random_range(0.0..1.0));
        let mut tape = Tape::new();
        let x = tape.leaf(x_m);
        let poi_t = transform_vars(&mut tape, &mut rng, 2, 4);
        let proto_t = transform_vars(&mut tape, &mut rng, 4, 4);

        // E-step on the current embeddings, then graph assembly.
        let z_probe = {
            let z = structure_embed(&mut tape, x, &poi_t).unwrap();
            tape.value(z).clone()
        };
        let mut protos = kmeans_init(&z_probe, k, &mut rng).unwrap();
        kmeans_estep(&z_probe, &mut protos).unwrap();

        let (z, graph) =
            build_bilevel_graph(&mut tape, x, &poi_t, &proto_t, &protos, cfg).unwrap();
        (tape, z, graph)
    }

    #[test]
    fn bilevel_graph_edge_counts_and_one_hot_rows() {
        let cfg = StructureConfig {
            k: 2,
            tau1: 0.1,
            epsilon: 0.5,
            top_k: 3,
        };
        let (_tape, _z, graph) = build_test_graph(10, 2, &cfg, 12);
        assert_eq!(graph.e2(), 10);
        let hier = graph.hier_matrix(2);
        for row in hier.rows() {
            assert_eq!(row.sum(), 1.0);
            assert_eq!(row.iter().filter(|&&v| v != 0.0).count(), 1);
        }
        assert_eq!(hier.iter().filter(|&&v| v != 0.0).count(), 10);
        assert!(graph.e3() <= graph.e1());
    }

    #[test]
    fn bilevel_graph_top_k_one_bounds_e1() {
        let cfg = StructureConfig {
            k: 2,
            tau1: 0.1,
            epsilon: 0.0,
            top_k: 1,
        };
        let (_tape, _z, graph) = build_test_graph(12, 2, &cfg, 13);
        assert!(graph.e1() <= 2 * 12, "E1 = {}", graph.e1());
    }

    #[test]
    fn bilevel_graph_rows_are_stochastic() {
        let cfg = StructureConfig {
            k: 3,
            tau1: 0.1,
            epsilon: 0.4,
            top_k: 4,
        };
        let (tape, _z, graph) = build_test_graph(9, 3, &cfg, 14);
        for row in tape.value(graph.a_poi).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
        for row in tape.value(graph.a_proto.unwrap()).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn spatial_rule_adjacency_respects_threshold() {
        let poi = |lat: f64, lon: f64| crate::ingest::Poi {
            id: String::new(),
            latitude: lat,
            longitude: lon,
        };
        // ~1.11 km per 0.01 degree of latitude.
        let pois = vec![poi(0.0, 0.0), poi(0.009, 0.0), poi(0.5, 0.0)];
        let a = spatial_rule_adjacency(&pois, 2.0);
        assert_eq!(a[(0, 1)], 1.0);
        assert_eq!(a[(1, 0)], 1.0);
        assert_eq!(a[(0, 2)], 0.0);
        for i in 0..3 {
            assert_eq!(a[(i, i)], 1.0);
        }
    }

    #[test]
    fn temporal_rule_adjacency_handles_zero_rows() {
        let hist = array![
            [1.0, 0.0, 1.0],
            [2.0, 0.0, 2.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0]
        ];
        let a = temporal_rule_adjacency(&hist);
        assert!((a[(0, 1)] - 1.0).abs() < 1e-12);
        assert_eq!(a[(0, 2)], 0.0);
        // The zero-histogram row keeps only its self-loop.
        for j in 0..3 {
            assert_eq!(a[(3, j)], 0.0);
        }
        assert_eq!(a[(3, 3)], 1.0);
        assert_eq!(a[(1, 3)], 0.0);
    }

    #[test]
    fn nmi_recovers_identical_and_permuted_labelings() {
        let a = vec![0, 0, 1, 1, 2, 2];
        assert_eq!(normalized_mutual_information(&a, &a), 1.0);
        // Relabeled but identical partition.
        let b = vec![2, 2, 0, 0, 1, 1];
        assert!((normalized_mutual_information(&a, &b) - 1.0).abs() < 1e-12);
        // Uninformative labeling.
        let c = vec![0, 1, 0, 1, 0, 1];
        assert!(normalized_mutual_information(&a, &c) < 0.5);
    }

    #[test]
    fn clustering_recovers_planted_blobs() {
        let mut rng = derive_rng(15, "recovery", 0, 0);
        let (z, labels) = two_blobs(&mut rng, 30);
        let mut state = kmeans_init(&z, 2, &mut rng).unwrap();
        for _ in 0..5 {
            kmeans_estep(&z, &mut state).unwrap();
        }
        let score = normalized_mutual_information(&labels, &state.assignments);
        assert!(score >= 0.9, "NMI = {score}");
    }
}
