//! Incremental kd-tree over configurations. Supports nearest neighbor with
//! lowest-id tie breaking and radius queries; no rebalancing (insertion order
//! is effectively random for planner workloads).

#[derive(Debug, Clone)]
struct KdNode {
    point: Vec<f64>,
    id: usize,
    left: Option<usize>,
    right: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct KdTree {
    dim: usize,
    nodes: Vec<KdNode>,
}

impl KdTree {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0);
        Self {
            dim,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    #[allow(dead_code)]
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn insert(&mut self, point: &[f64], id: usize) {
        assert_eq!(point.len(), self.dim);
        let new_idx = self.nodes.len();
        self.nodes.push(KdNode {
            point: point.to_vec(),
            id,
            left: None,
            right: None,
        });
        if new_idx == 0 {
            return;
        }
        let mut cur = 0;
        let mut depth = 0;
        loop {
            let axis = depth % self.dim;
            let go_left = point[axis] < self.nodes[cur].point[axis];
            let slot = if go_left {
                self.nodes[cur].left
            } else {
                self.nodes[cur].right
            };
            match slot {
                Some(next) => {
                    cur = next;
                    depth += 1;
                }
                None => {
                    if go_left {
                        self.nodes[cur].left = Some(new_idx);
                    } else {
                        self.nodes[cur].right = Some(new_idx);
                    }
                    return;
                }
            }
        }
    }

    /// Id of the Euclidean-nearest point; ties broken by lowest id.
    pub fn nearest(&self, query: &[f64]) -> Option<usize> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best = (f64::INFINITY, usize::MAX);
        self.nearest_rec(0, query, 0, &mut best);
        Some(best.1)
    }

    fn nearest_rec(&self, idx: usize, query: &[f64], depth: usize, best: &mut (f64, usize)) {
        let node = &self.nodes[idx];
        let d2 = dist2(&node.point, query);
        if d2 < best.0 || (d2 == best.0 && node.id < best.1) {
            *best = (d2, node.id);
        }
        let axis = depth % self.dim;
        let diff = query[axis] - node.point[axis];
        let (near, far) = if diff < 0.0 {
            (node.left, node.right)
        } else {
            (node.right, node.left)
        };
        if let Some(n) = near {
            self.nearest_rec(n, query, depth + 1, best);
        }
        // The far side can still hold a winner when the splitting plane is
        // closer than the best distance (or exactly at it, for id ties).
        if let Some(f) = far {
            if diff * diff <= best.0 {
                self.nearest_rec(f, query, depth + 1, best);
            }
        }
    }

    /// All ids within `radius` of `query`, sorted ascending.
    pub fn within(&self, query: &[f64], radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        if !self.nodes.is_empty() {
            self.within_rec(0, query, radius * radius, 0, &mut out);
        }
        out.sort_unstable();
        out
    }

    fn within_rec(&self, idx: usize, query: &[f64], r2: f64, depth: usize, out: &mut Vec<usize>) {
        let node = &self.nodes[idx];
        if dist2(&node.point, query) <= r2 {
            out.push(node.id);
        }
        let axis = depth % self.dim;
        let diff = query[axis] - node.point[axis];
        let (near, far) = if diff < 0.0 {
            (node.left, node.right)
        } else {
            (node.right, node.left)
        };
        if let Some(n) = near {
            self.within_rec(n, query, r2, depth + 1, out);
        }
        if let Some(f) = far {
            if diff * diff <= r2 {
                self.within_rec(f, query, r2, depth + 1, out);
            }
        }
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    #[test]
    fn nearest_matches_linear_scan() {
        let mut rng = RngStream::new(17, 0);
        for dim in [2usize, 4, 10] {
            let mut tree = KdTree::new(dim);
            let points: Vec<Vec<f64>> = (0..1000)
                .map(|_| (0..dim).map(|_| rng.uniform(-50.0, 50.0)).collect())
                .collect();
            for (i, p) in points.iter().enumerate() {
                tree.insert(p, i);
            }
            for _ in 0..200 {
                let q: Vec<f64> = (0..dim).map(|_| rng.uniform(-60.0, 60.0)).collect();
                let got = tree.nearest(&q).unwrap();
                let want = points
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (dist2(p, &q), i))
                    .min_by(|a, b| a.partial_cmp(b).unwrap())
                    .unwrap()
                    .1;
                assert_eq!(got, want);
            }
        }
    }

    #[test]
    fn nearest_tie_takes_lowest_id() {
        let mut tree = KdTree::new(2);
        // Two points equidistant from the query.
        tree.insert(&[1.0, 0.0], 5);
        tree.insert(&[-1.0, 0.0], 2);
        assert_eq!(tree.nearest(&[0.0, 0.0]), Some(2));
        // Same point twice: lowest id wins regardless of insertion order.
        let mut tree = KdTree::new(2);
        tree.insert(&[3.0, 3.0], 9);
        tree.insert(&[3.0, 3.0], 4);
        assert_eq!(tree.nearest(&[3.0, 3.0]), Some(4));
    }

    #[test]
    fn within_matches_linear_scan() {
        let mut rng = RngStream::new(18, 0);
        let mut tree = KdTree::new(2);
        let points: Vec<Vec<f64>> = (0..500)
            .map(|_| vec![rng.uniform(0.0, 100.0), rng.uniform(0.0, 100.0)])
            .collect();
        for (i, p) in points.iter().enumerate() {
            tree.insert(p, i);
        }
        for _ in 0..100 {
            let q = vec![rng.uniform(0.0, 100.0), rng.uniform(0.0, 100.0)];
            let r = rng.uniform(1.0, 20.0);
            let got = tree.within(&q, r);
            let want: Vec<usize> = points
                .iter()
                .enumerate()
                .filter(|(_, p)| dist2(p, &q) <= r * r)
                .map(|(i, _)| i)
                .collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn empty_tree_has_no_nearest() {
        let tree = KdTree::new(2);
        assert_eq!(tree.nearest(&[0.0, 0.0]), None);
    }
}
