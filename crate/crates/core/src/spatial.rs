//! Small exact kd-tree over 3D points: nearest neighbor and k-nearest with
//! deterministic tie-breaking (smaller index wins at equal distance).

use nalgebra::Vector3;
use std::collections::BinaryHeap;

#[derive(Debug, Clone, Copy)]
struct Node {
    point_index: usize,
    axis: usize,
    left: i32,
    right: i32,
}

/// Exact kd-tree; borrows nothing, stores the points it was built from.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vector3<f64>>,
    nodes: Vec<Node>,
    root: i32,
}

/// Heap entry ordered worst-first: larger distance is greater, and at equal
/// distance the larger index is greater (so it is evicted first).
#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    d2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.d2
            .total_cmp(&other.d2)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl KdTree {
    pub fn build(points: &[Vector3<f64>]) -> Self {
        let mut tree = KdTree {
            points: points.to_vec(),
            nodes: Vec::with_capacity(points.len()),
            root: -1,
        };
        let mut order: Vec<usize> = (0..points.len()).collect();
        tree.root = tree.build_rec(&mut order, 0);
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build_rec(&mut self, order: &mut [usize], depth: usize) -> i32 {
        if order.is_empty() {
            return -1;
        }
        let axis = depth % 3;
        let mid = order.len() / 2;
        order.select_nth_unstable_by(mid, |&a, &b| {
            self.points[a][axis]
                .total_cmp(&self.points[b][axis])
                .then(a.cmp(&b))
        });
        let point_index = order[mid];
        let node_slot = self.nodes.len();
        self.nodes.push(Node {
            point_index,
            axis,
            left: -1,
            right: -1,
        });
        let (lo, hi) = order.split_at_mut(mid);
        let left = self.build_rec(lo, depth + 1);
        let right = self.build_rec(&mut hi[1..], depth + 1);
        self.nodes[node_slot].left = left;
        self.nodes[node_slot].right = right;
        node_slot as i32
    }

    /// The `k` nearest stored points to `query`, optionally excluding one
    /// index, sorted by (distance, index). Shrinks `k` when fewer points
    /// are available.
    pub fn knn(&self, query: &Vector3<f64>, k: usize, exclude: Option<usize>) -> Vec<(usize, f64)> {
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::new();
        if k > 0 && self.root >= 0 {
            self.search(self.root, query, k, exclude, &mut heap);
        }
        let mut out: Vec<(usize, f64)> = heap.into_iter().map(|c| (c.index, c.d2)).collect();
        out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        out
    }

    /// Nearest stored point to `query`; `None` on an empty tree.
    pub fn nearest(&self, query: &Vector3<f64>) -> Option<(usize, f64)> {
        self.knn(query, 1, None).into_iter().next()
    }

    fn search(
        &self,
        node: i32,
        query: &Vector3<f64>,
        k: usize,
        exclude: Option<usize>,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        let n = self.nodes[node as usize];
        let p = &self.points[n.point_index];
        if Some(n.point_index) != exclude {
            let cand = Candidate {
                d2: (p - query).norm_squared(),
                index: n.point_index,
            };
            if heap.len() < k {
                heap.push(cand);
            } else if cand < *heap.peek().unwrap() {
                heap.pop();
                heap.push(cand);
            }
        }
        let diff = query[n.axis] - p[n.axis];
        let (near, far) = if diff < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        if near >= 0 {
            self.search(near, query, k, exclude, heap);
        }
        // Equal plane distance can still hide an equal-distance smaller index,
        // so only prune on a strict excess.
        let descend_far = heap.len() < k || diff * diff <= heap.peek().unwrap().d2;
        if far >= 0 && descend_far {
            self.search(far, query, k, exclude, heap);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn brute_knn(
        points: &[Vector3<f64>],
        query: &Vector3<f64>,
        k: usize,
        exclude: Option<usize>,
    ) -> Vec<(usize, f64)> {
        let mut all: Vec<(usize, f64)> = points
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != exclude)
            .map(|(i, p)| (i, (p - query).norm_squared()))
            .collect();
        all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    #[test]
    fn matches_brute_force_on_random_cloud() {
        let mut rng = StdRng::seed_from_u64(7);
        let points: Vec<Vector3<f64>> = (0..1000)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-10.0..10.0),
                    rng.random_range(-10.0..10.0),
                    rng.random_range(-2.0..2.0),
                )
            })
            .collect();
        let tree = KdTree::build(&points);
        for qi in (0..points.len()).step_by(37) {
            for k in [1, 4, 16] {
                let got = tree.knn(&points[qi], k, Some(qi));
                let want = brute_knn(&points, &points[qi], k, Some(qi));
                assert_eq!(got, want, "query {qi} k {k}");
            }
        }
    }

    #[test]
    fn ties_prefer_smaller_index() {
        // Two points at identical distance from the query.
        let points = vec![
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(-1.0, 0.0, 0.0),
            Vector3::new(5.0, 0.0, 0.0),
        ];
        let tree = KdTree::build(&points);
        let got = tree.knn(&Vector3::zeros(), 1, None);
        assert_eq!(got[0].0, 0);
    }

    #[test]
    fn shrinks_k_and_handles_empty() {
        let points = vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0)];
        let tree = KdTree::build(&points);
        assert_eq!(tree.knn(&points[0], 5, Some(0)).len(), 1);
        let empty = KdTree::build(&[]);
        assert!(empty.nearest(&Vector3::zeros()).is_none());
    }
}
