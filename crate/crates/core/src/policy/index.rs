//! Exact k-nearest-neighbour search over fixed-dimension points.
//!
//! Ties in distance are broken by point id, so results are a pure function of
//! the inserted points and the query.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

const LEAF: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub dist2: f64,
    pub id: usize,
}

impl Eq for Neighbor {}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2.total_cmp(&other.dist2).then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { dim: usize, value: f64, left: usize, right: usize },
}

#[derive(Debug, Clone)]
pub struct KdTree {
    dim: usize,
    points: Vec<f64>,
    /// Point ids in leaf order.
    order: Vec<usize>,
    /// `points` rearranged into leaf order.
    packed: Vec<f64>,
    nodes: Vec<Node>,
}

impl KdTree {
    /// `points` is row-major with `dim` columns; row `r` gets id `r`.
    pub fn build(dim: usize, points: Vec<f64>) -> Self {
        assert!(dim > 0 && points.len().is_multiple_of(dim), "point buffer does not match dimension");
        let n = points.len() / dim;
        let mut tree = Self { dim, points, order: (0..n).collect(), packed: Vec::new(), nodes: Vec::new() };
        if n > 0 {
            tree.build_node(0, n);
        }
        tree.packed = tree.order.iter().flat_map(|&id| tree.point(id).to_vec()).collect();
        tree
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

    pub fn point(&self, id: usize) -> &[f64] {
        &self.points[id * self.dim..(id + 1) * self.dim]
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let idx = self.nodes.len();
        self.nodes.push(Node::Leaf { start, end });
        if end - start <= LEAF {
            return idx;
        }
        let dim = self.widest_dim(start, end);
        let mid = start + (end - start) / 2;
        let (pts, d) = (&self.points, self.dim);
        let key = |id: &usize| (pts[id * d + dim], *id);
        self.order[start..end].select_nth_unstable_by(mid - start, |a, b| {
            let (ka, kb) = (key(a), key(b));
            ka.0.total_cmp(&kb.0).then(ka.1.cmp(&kb.1))
        });
        let value = self.points[self.order[mid] * self.dim + dim];
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[idx] = Node::Split { dim, value, left, right };
        idx
    }

    fn widest_dim(&self, start: usize, end: usize) -> usize {
        let mut best = (f64::NEG_INFINITY, 0);
        for k in 0..self.dim {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &id in &self.order[start..end] {
                let v = self.points[id * self.dim + k];
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if hi - lo > best.0 {
                best = (hi - lo, k);
            }
        }
        best.1
    }

    /// The `k` nearest points, ascending by (distance, id).
    pub fn knn(&self, query: &[f64], k: usize) -> Vec<Neighbor> {
        assert_eq!(query.len(), self.dim, "query dimension mismatch");
        let mut heap = BinaryHeap::with_capacity(k + 1);
        if k > 0 && !self.is_empty() {
            self.search(0, query, k, &mut heap);
        }
        heap.into_sorted_vec()
    }

    fn search(&self, node: usize, q: &[f64], k: usize, heap: &mut BinaryHeap<Neighbor>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for pos in start..end {
                    let id = self.order[pos];
                    let cand = Neighbor { dist2: dist2(&self.packed[pos * self.dim..(pos + 1) * self.dim], q), id };
                    if heap.len() < k {
                        heap.push(cand);
                    } else if cand < *heap.peek().expect("heap is full") {
                        heap.pop();
                        heap.push(cand);
                    }
                }
            }
            Node::Split { dim, value, left, right } => {
                let diff = q[dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, heap);
                if heap.len() < k || diff * diff <= heap.peek().expect("heap is full").dist2 {
                    self.search(far, q, k, heap);
                }
            }
        }
    }
}

pub fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(points: &[f64], dim: usize, q: &[f64], k: usize) -> Vec<Neighbor> {
        let mut all: Vec<Neighbor> =
            points.chunks(dim).enumerate().map(|(id, p)| Neighbor { dist2: dist2(p, q), id }).collect();
        all.sort();
        all.truncate(k);
        all
    }

    #[test]
    fn empty_tree_returns_nothing() {
        let t = KdTree::build(3, Vec::new());
        assert!(t.knn(&[0.0, 0.0, 0.0], 4).is_empty());
    }

    #[test]
    fn duplicates_are_ordered_by_id() {
        let pts: Vec<f64> = std::iter::repeat_n([0.5, 0.5], 40).flatten().collect();
        let t = KdTree::build(2, pts);
        let ids: Vec<usize> = t.knn(&[0.5, 0.5], 5).iter().map(|n| n.id).collect();
        assert_eq!(ids, [0, 1, 2, 3, 4]);
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            dim in 1usize..6,
            raw in prop::collection::vec(0u8..8, 0..600),
            q in prop::collection::vec(0u8..8, 6),
            k in 1usize..40,
        ) {
            let n = raw.len() / dim;
            // Coarse lattice values force many exact ties.
            let pts: Vec<f64> = raw[..n * dim].iter().map(|&v| f64::from(v) / 8.0).collect();
            let q: Vec<f64> = q[..dim].iter().map(|&v| f64::from(v) / 8.0 + 0.01).collect();
            let tree = KdTree::build(dim, pts.clone());
            prop_assert_eq!(tree.knn(&q, k), brute(&pts, dim, &q, k));
        }
    }
}
