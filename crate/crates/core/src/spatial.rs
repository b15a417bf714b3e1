//! Exact k-nearest-neighbour search.
//!
//! Results are ordered by `(squared distance, index)` so that the tree and the
//! exhaustive scan agree bit-for-bit, including on ties.

use crate::error::{invalid, Result};
use crate::geometry::PointCloud;
use crate::numeric::{cmp_dist_index, squared_distance};

/// Clouds above this size use the tree in [`knn`].
pub const KNN_TREE_THRESHOLD: usize = 1024;

const LEAF_SIZE: usize = 16;

/// Static k-d tree over rows of a flat `n × dim` buffer.
#[derive(Debug, Clone)]
pub struct KdTree {
    dim: usize,
    data: Vec<f64>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

impl KdTree {
    pub fn new(data: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return invalid("k-d tree data length must be a multiple of a positive dimension");
        }
        let n = data.len() / dim;
        let mut tree = KdTree {
            dim,
            data,
            order: (0..n).collect(),
            nodes: Vec::new(),
        };
        if n > 0 {
            tree.build(0, n);
        }
        Ok(tree)
    }

    pub fn from_points(points: &[nalgebra::Vector3<f64>]) -> Self {
        let data = points.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        KdTree::new(data, 3).expect("3-d buffer is well formed")
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        // split on the axis of largest spread
        let dim = self.dim;
        let mut best_axis = 0;
        let mut best_spread = -1.0;
        for axis in 0..dim {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &i in &self.order[start..end] {
                let v = self.data[i * dim + axis];
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if hi - lo > best_spread {
                best_spread = hi - lo;
                best_axis = axis;
            }
        }
        if best_spread <= 0.0 {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        let data = &self.data;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            data[a * dim + best_axis].total_cmp(&data[b * dim + best_axis])
        });
        let value = self.data[self.order[mid] * dim + best_axis];
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split {
            axis: best_axis,
            value,
            left,
            right,
        };
        id
    }

    /// The `k` nearest rows to `query` as `(squared distance, index)`, sorted.
    /// `exclude` drops one index from consideration.
    pub fn nearest(&self, query: &[f64], k: usize, exclude: Option<usize>) -> Vec<(f64, usize)> {
        assert_eq!(query.len(), self.dim, "query dimension mismatch");
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        if k == 0 || self.nodes.is_empty() {
            return best;
        }
        self.search(0, query, k, exclude, &mut best);
        best
    }

    fn search(&self, node: usize, q: &[f64], k: usize, exclude: Option<usize>, best: &mut Vec<(f64, usize)>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    if Some(i) == exclude {
                        continue;
                    }
                    let cand = (squared_distance(q, self.row(i)), i);
                    insert_bounded(best, cand, k);
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, exclude, best);
                // Ties at the bound may still win on index, so only strictly
                // farther planes are pruned.
                let plane = diff * diff;
                if best.len() < k || plane <= best[best.len() - 1].0 {
                    self.search(far, q, k, exclude, best);
                }
            }
        }
    }
}

#[inline]
fn insert_bounded(best: &mut Vec<(f64, usize)>, cand: (f64, usize), k: usize) {
    if best.len() == k && cmp_dist_index(cand, best[k - 1]).is_ge() {
        return;
    }
    let pos = best.partition_point(|&b| cmp_dist_index(b, cand).is_lt());
    best.insert(pos, cand);
    if best.len() > k {
        best.pop();
    }
}

/// Exhaustive scan with the same ordering as [`KdTree::nearest`].
pub fn brute_force_nearest(
    data: &[f64],
    dim: usize,
    query: &[f64],
    k: usize,
    exclude: Option<usize>,
) -> Vec<(f64, usize)> {
    let n = data.len() / dim;
    let mut all: Vec<(f64, usize)> = (0..n)
        .filter(|&i| Some(i) != exclude)
        .map(|i| (squared_distance(query, &data[i * dim..(i + 1) * dim]), i))
        .collect();
    all.sort_by(|a, b| cmp_dist_index(*a, *b));
    all.truncate(k);
    all
}

/// Per-point neighbour lists, self excluded, nearest first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborTable {
    pub k: usize,
    pub indices: Vec<usize>,
}

impl NeighborTable {
    pub fn len(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.indices.len() / self.k
        }
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }
}

/// `k` nearest neighbours of every point, excluding itself; lower index wins ties.
pub fn knn(cloud: &PointCloud, k: usize) -> Result<NeighborTable> {
    let n = cloud.len();
    if k == 0 || k >= n {
        return invalid(format!("knn needs 1 <= k < {n}, got {k}"));
    }
    let data: Vec<f64> = cloud.points.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
    let mut indices = Vec::with_capacity(n * k);
    if n > KNN_TREE_THRESHOLD {
        let tree = KdTree::new(data, 3)?;
        for i in 0..n {
            let q = tree.row(i).to_vec();
            indices.extend(tree.nearest(&q, k, Some(i)).into_iter().map(|(_, j)| j));
        }
    } else {
        for i in 0..n {
            let q = &data[i * 3..i * 3 + 3];
            indices.extend(brute_force_nearest(&data, 3, q, k, Some(i)).into_iter().map(|(_, j)| j));
        }
    }
    Ok(NeighborTable { k, indices })
}
