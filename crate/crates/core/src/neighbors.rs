//! Exact k-nearest-neighbor search over row-major point sets.
//!
//! Queries take an exclusion predicate so callers can apply a Theiler window
//! (skip temporally adjacent indices) without over-fetching.

/// A neighbor hit: point index and squared Euclidean distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist2: f64,
}

impl Neighbor {
    pub fn dist(&self) -> f64 {
        self.dist2.sqrt()
    }

    // Ordering by (distance, index) makes ties deterministic.
    fn before(&self, other: &Neighbor) -> bool {
        self.dist2 < other.dist2 || (self.dist2 == other.dist2 && self.index < other.index)
    }
}

const LEAF_SIZE: usize = 16;

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        dim: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Static k-d tree. Points are borrowed as a flat row-major slice.
#[derive(Debug, Clone)]
pub struct KdTree<'a> {
    points: &'a [f64],
    dim: usize,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl<'a> KdTree<'a> {
    /// Builds a tree over `points.len() / dim` points.
    ///
    /// Panics if `dim == 0` or the slice length is not a multiple of `dim`.
    pub fn new(points: &'a [f64], dim: usize) -> Self {
        assert!(dim > 0 && points.len() % dim == 0, "bad point layout");
        let n = points.len() / dim;
        let mut tree = Self {
            points,
            dim,
            order: (0..n).collect(),
            nodes: Vec::with_capacity(2 * n / LEAF_SIZE + 1),
        };
        if n > 0 {
            tree.build(0, n);
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        // split on the widest coordinate
        let mut best_dim = 0;
        let mut best_spread = -1.0;
        for d in 0..self.dim {
            let (lo, hi) = self.order[start..end].iter().fold(
                (f64::INFINITY, f64::NEG_INFINITY),
                |(lo, hi), &i| {
                    let v = self.points[i * self.dim + d];
                    (lo.min(v), hi.max(v))
                },
            );
            if hi - lo > best_spread {
                best_spread = hi - lo;
                best_dim = d;
            }
        }
        if best_spread <= 0.0 {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        let pts = self.points;
        let dim = self.dim;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            pts[a * dim + best_dim]
                .total_cmp(&pts[b * dim + best_dim])
                .then(a.cmp(&b))
        });
        let value = pts[self.order[mid] * dim + best_dim];
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split {
            dim: best_dim,
            value,
            left,
            right,
        };
        id
    }

    /// The `k` nearest points to `query` among those for which `exclude`
    /// returns false, sorted by increasing distance (ties by index).
    pub fn k_nearest<F>(&self, query: &[f64], k: usize, exclude: F) -> Vec<Neighbor>
    where
        F: Fn(usize) -> bool,
    {
        debug_assert_eq!(query.len(), self.dim);
        let mut best: Vec<Neighbor> = Vec::with_capacity(k + 1);
        if k == 0 || self.nodes.is_empty() {
            return best;
        }
        self.search(0, query, k, &exclude, &mut best);
        best
    }

    /// Nearest admissible neighbor, if any.
    pub fn nearest<F>(&self, query: &[f64], exclude: F) -> Option<Neighbor>
    where
        F: Fn(usize) -> bool,
    {
        self.k_nearest(query, 1, exclude).into_iter().next()
    }

    fn search<F>(&self, node: usize, query: &[f64], k: usize, exclude: &F, best: &mut Vec<Neighbor>)
    where
        F: Fn(usize) -> bool,
    {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    if exclude(i) {
                        continue;
                    }
                    let p = self.point(i);
                    let mut d2 = 0.0;
                    for (a, b) in p.iter().zip(query) {
                        let t = a - b;
                        d2 += t * t;
                    }
                    let cand = Neighbor { index: i, dist2: d2 };
                    if best.len() < k || cand.before(&best[best.len() - 1]) {
                        let pos = best.partition_point(|b| b.before(&cand));
                        best.insert(pos, cand);
                        if best.len() > k {
                            best.pop();
                        }
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = query[dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, query, k, exclude, best);
                // `<=` keeps equal-distance candidates on the far side reachable
                if best.len() < k || diff * diff <= best[best.len() - 1].dist2 {
                    self.search(far, query, k, exclude, best);
                }
            }
        }
    }
}

/// Brute-force reference for [`KdTree::k_nearest`].
pub fn brute_force_k_nearest<F>(
    points: &[f64],
    dim: usize,
    query: &[f64],
    k: usize,
    exclude: F,
) -> Vec<Neighbor>
where
    F: Fn(usize) -> bool,
{
    let n = points.len() / dim;
    let mut all: Vec<Neighbor> = (0..n)
        .filter(|&i| !exclude(i))
        .map(|i| {
            let d2 = points[i * dim..(i + 1) * dim]
                .iter()
                .zip(query)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            Neighbor { index: i, dist2: d2 }
        })
        .collect();
    all.sort_by(|a, b| a.dist2.total_cmp(&b.dist2).then(a.index.cmp(&b.index)));
    all.truncate(k);
    all
}
