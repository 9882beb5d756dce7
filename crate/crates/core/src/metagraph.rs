//! Dynamic kNN graph over meta concepts.
//!
//! Each concept links to its `J` nearest other concepts by Euclidean
//! distance on the current representations, so edges change as the
//! representations train. One graph convolution `[X, A X] W_a` follows,
//! max-pooled over nodes into `R_meta`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaGraphConfig {
    pub knn_j: usize,
    pub out_dim: usize,
    /// Divide each adjacency row by its degree.
    pub normalize_adjacency: bool,
    /// Use `max(A, A^T)`.
    pub symmetric: bool,
}

impl Default for MetaGraphConfig {
    fn default() -> Self {
        Self {
            knn_j: 3,
            out_dim: 256,
            normalize_adjacency: false,
            symmetric: false,
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Directed edges `i -> k` for the `min(j, L-1)` nearest `k != i` of each
/// row of `x`, nearest first. Ties go to the smaller index.
pub fn build_knn_edges(x: &Mat, j: usize) -> Vec<(usize, usize)> {
    let l = x.rows();
    let mut edges = Vec::with_capacity(l * j.min(l.saturating_sub(1)));
    for i in 0..l {
        let mut others: Vec<(f64, usize)> = (0..l)
            .filter(|&k| k != i)
            .map(|k| (sq_dist(x.row(i), x.row(k)), k))
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        edges.extend(others.into_iter().take(j).map(|(_, k)| (i, k)));
    }
    edges
}

/// Binary `L x L` adjacency with `A[i][k] = 1` for every edge `i -> k`.
pub fn adjacency(l: usize, edges: &[(usize, usize)]) -> Mat {
    let mut a = Mat::zeros(l, l);
    for &(i, k) in edges {
        a.set(i, k, 1.0);
    }
    a
}

#[derive(Clone, Debug)]
pub struct MetaGraphEncoder {
    pub w_a: ParamId,
    pub in_dim: usize,
    pub config: MetaGraphConfig,
}

impl MetaGraphEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        config: MetaGraphConfig,
        rng: &mut R,
    ) -> Self {
        let w_a = store.add(format!("{name}.w_a"), Mat::xavier(2 * in_dim, config.out_dim, rng));
        Self { w_a, in_dim, config }
    }

    pub fn out_dim(&self) -> usize {
        self.config.out_dim
    }

    /// Adjacency used for the nodes `x`, rebuilt from their current values.
    pub fn adjacency_for(&self, x: &Mat) -> Mat {
        let l = x.rows();
        let mut a = adjacency(l, &build_knn_edges(x, self.config.knn_j));
        if self.config.symmetric {
            a = a.zip_map(&a.transpose(), f64::max);
        }
        if self.config.normalize_adjacency {
            for i in 0..l {
                let deg: f64 = a.row(i).iter().sum();
                if deg > 0.0 {
                    a.row_mut(i).iter_mut().for_each(|v| *v /= deg);
                }
            }
        }
        a
    }

    /// Per-node outputs `[X, A X] W_a`, `L x out`.
    pub fn node_outputs(&self, t: &mut Tape, x: Var) -> Var {
        let a = self.adjacency_for(t.value(x));
        let a = t.constant(a);
        let ax = t.matmul(a, x);
        let cat = t.concat_cols(&[x, ax]);
        let w = t.param(self.w_a);
        t.matmul(cat, w)
    }

    /// `R_meta`, `1 x out`; no concepts give the zero vector.
    pub fn encode(&self, t: &mut Tape, x: Option<Var>) -> Var {
        match x {
            None => t.constant(Mat::zeros(1, self.config.out_dim)),
            Some(x) => {
                let h = self.node_outputs(t, x);
                t.max_rows(h)
            }
        }
    }
}
