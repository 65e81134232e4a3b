//! HDBSCAN on a precomputed distance matrix.
//!
//! Core distances use non-self neighbours: `core_k(i)` is the `k`-th smallest
//! `D_ij` over `j ≠ i`. The mutual-reachability graph is reduced to a
//! minimum spanning tree (dense Prim), turned into a single-linkage
//! hierarchy, condensed with `min_cluster_size`, and clusters are selected
//! by excess of mass. The root is never selected unless it does not split.
//!
//! Confidence of a clustered point is `min(λ_p, λ_max) / λ_max`, where
//! `λ_p = 1/d` is the level at which the point leaves the tree and `λ_max`
//! is the largest such level inside its cluster. Noise has confidence 0.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::divergence::DistanceMatrix;
use crate::error::{Error, Result};
use crate::fsio;

/// Distances below this are treated as this value when forming `λ = 1/d`.
const MIN_DISTANCE: f64 = 1e-12;
/// Relative spread of off-diagonal distances below which the input is
/// considered structureless.
const DEGENERATE_SPREAD: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HdbscanParams {
    pub min_samples: usize,
    pub min_cluster_size: usize,
}

impl Default for HdbscanParams {
    fn default() -> Self {
        HdbscanParams {
            min_samples: 5,
            min_cluster_size: 5,
        }
    }
}

/// One edge of the condensed tree: `child` is a point (`< n`) or a cluster.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CondensedEdge {
    pub parent: usize,
    pub child: usize,
    pub lambda: f64,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    /// Condensed-tree id.
    pub tree_id: usize,
    pub stability: f64,
    pub selected: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    pub point_ids: Vec<usize>,
    /// `-1` marks noise.
    pub labels: Vec<i64>,
    pub confidence: Vec<f64>,
    pub n_clusters: usize,
    pub params: HdbscanParams,
    /// Set when the input has no usable structure and every point was
    /// assigned to a single cluster.
    pub degenerate: bool,
    pub clusters: Vec<ClusterSummary>,
    pub condensed_tree: Vec<CondensedEdge>,
}

impl ClusterResult {
    pub fn noise_fraction(&self) -> f64 {
        self.labels.iter().filter(|&&l| l < 0).count() as f64 / self.labels.len() as f64
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fsio::write_json(path, self)
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        fsio::read_json(path)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,label,confidence\n");
        for ((id, l), c) in self.point_ids.iter().zip(&self.labels).zip(&self.confidence) {
            s.push_str(&format!("{id},{l},{c}\n"));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fsio::write_atomic(path, self.to_csv().as_bytes())
    }
}

fn check_matrix(d: &Array2<f64>) -> Result<()> {
    let n = d.nrows();
    if d.ncols() != n {
        return Err(Error::Invalid(format!("distance matrix is {}×{}", n, d.ncols())));
    }
    for i in 0..n {
        if d[[i, i]] != 0.0 {
            return Err(Error::Invalid(format!("nonzero diagonal entry at {i}")));
        }
        for j in 0..i {
            let v = d[[i, j]];
            if !(v >= 0.0) || !v.is_finite() || v != d[[j, i]] {
                return Err(Error::Invalid(format!("entry ({i}, {j}) = {v} is not a symmetric distance")));
            }
        }
    }
    Ok(())
}

/// `k`-th smallest distance to another point.
pub fn core_distances(d: &Array2<f64>, k: usize) -> Result<Vec<f64>> {
    check_matrix(d)?;
    let n = d.nrows();
    if k == 0 || k >= n {
        return Err(Error::Invalid(format!("min_samples {k} must be in 1..{n}")));
    }
    Ok((0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| d[[i, j]]).collect();
            row.sort_by(f64::total_cmp);
            row[k - 1]
        })
        .collect())
}

/// `mr(i, j) = max(core_k(i), core_k(j), D_ij)` off the diagonal.
pub fn mutual_reachability(d: &Array2<f64>, k: usize) -> Result<Array2<f64>> {
    let core = core_distances(d, k)?;
    let n = d.nrows();
    Ok(Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j {
            0.0
        } else {
            d[[i, j]].max(core[i]).max(core[j])
        }
    }))
}

/// Dense Prim; edges in the order they join the tree.
fn prim_mst(mr: &Array2<f64>) -> Vec<(usize, usize, f64)> {
    let n = mr.nrows();
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut from = vec![0usize; n];
    let mut edges = Vec::with_capacity(n.saturating_sub(1));
    let mut current = 0;
    in_tree[0] = true;
    for _ in 1..n {
        for v in 0..n {
            if !in_tree[v] && mr[[current, v]] < best[v] {
                best[v] = mr[[current, v]];
                from[v] = current;
            }
        }
        let next = (0..n)
            .filter(|&v| !in_tree[v])
            .min_by(|&a, &b| best[a].total_cmp(&best[b]).then(a.cmp(&b)))
            .expect("a vertex remains");
        edges.push((from[next], next, best[next]));
        in_tree[next] = true;
        current = next;
    }
    edges
}

#[derive(Clone, Copy, Debug)]
struct Merge {
    left: usize,
    right: usize,
    dist: f64,
    size: usize,
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Single-linkage merges; merge `t` creates node `n + t`.
fn single_linkage(n: usize, mut edges: Vec<(usize, usize, f64)>) -> Vec<Merge> {
    edges.sort_by(|a, b| {
        a.2.total_cmp(&b.2)
            .then(a.0.min(a.1).cmp(&b.0.min(b.1)))
            .then(a.0.max(a.1).cmp(&b.0.max(b.1)))
    });
    let mut parent: Vec<usize> = (0..2 * n).collect();
    let mut size = vec![1usize; 2 * n];
    let mut merges = Vec::with_capacity(n - 1);
    for (t, (u, v, w)) in edges.into_iter().enumerate() {
        let (ru, rv) = (find(&mut parent, u), find(&mut parent, v));
        let node = n + t;
        parent[ru] = node;
        parent[rv] = node;
        size[node] = size[ru] + size[rv];
        merges.push(Merge {
            left: ru,
            right: rv,
            dist: w,
            size: size[node],
        });
    }
    merges
}

fn leaves(n: usize, merges: &[Merge], node: usize, out: &mut Vec<usize>) {
    let mut stack = vec![node];
    while let Some(x) = stack.pop() {
        if x < n {
            out.push(x);
        } else {
            let m = merges[x - n];
            stack.push(m.right);
            stack.push(m.left);
        }
    }
}

fn condense(n: usize, merges: &[Merge], min_size: usize) -> Vec<CondensedEdge> {
    let root = 2 * n - 2;
    let size_of = |x: usize| if x < n { 1 } else { merges[x - n].size };
    let mut label = vec![usize::MAX; 2 * n - 1];
    label[root] = n;
    let mut next_label = n + 1;
    let mut out = Vec::new();
    let mut queue = std::collections::VecDeque::from([root]);
    while let Some(node) = queue.pop_front() {
        if node < n {
            continue;
        }
        let m = merges[node - n];
        let lambda = 1.0 / m.dist.max(MIN_DISTANCE);
        let parent = label[node];
        let (ls, rs) = (size_of(m.left), size_of(m.right));
        let fall_out = |child: usize, out: &mut Vec<CondensedEdge>| {
            let mut pts = Vec::new();
            leaves(n, merges, child, &mut pts);
            pts.sort_unstable();
            for p in pts {
                out.push(CondensedEdge {
                    parent,
                    child: p,
                    lambda,
                    size: 1,
                });
            }
        };
        match (ls >= min_size, rs >= min_size) {
            (true, true) => {
                for (child, s) in [(m.left, ls), (m.right, rs)] {
                    label[child] = next_label;
                    out.push(CondensedEdge {
                        parent,
                        child: next_label,
                        lambda,
                        size: s,
                    });
                    next_label += 1;
                    queue.push_back(child);
                }
            }
            (false, false) => {
                fall_out(m.left, &mut out);
                fall_out(m.right, &mut out);
            }
            (true, false) => {
                fall_out(m.right, &mut out);
                label[m.left] = parent;
                queue.push_back(m.left);
            }
            (false, true) => {
                fall_out(m.left, &mut out);
                label[m.right] = parent;
                queue.push_back(m.right);
            }
        }
    }
    out
}

fn off_diagonal_spread(d: &Array2<f64>) -> f64 {
    let n = d.nrows();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for i in 0..n {
        for j in 0..i {
            lo = lo.min(d[[i, j]]);
            hi = hi.max(d[[i, j]]);
        }
    }
    if hi == 0.0 {
        0.0
    } else {
        (hi - lo) / hi
    }
}

/// Clusters the points of a distance matrix.
pub fn cluster(d: &DistanceMatrix, params: &HdbscanParams) -> Result<ClusterResult> {
    let mut r = cluster_array(&d.to_array(), params)?;
    r.point_ids = d.point_ids.clone();
    Ok(r)
}

/// [`cluster`] on a plain matrix; point ids are the row indices.
pub fn cluster_array(d: &Array2<f64>, params: &HdbscanParams) -> Result<ClusterResult> {
    check_matrix(d)?;
    let n = d.nrows();
    let (k, m) = (params.min_samples, params.min_cluster_size);
    if k < 1 || m < 2 {
        return Err(Error::Invalid(format!("need min_samples ≥ 1 and min_cluster_size ≥ 2, got {k}, {m}")));
    }
    if n < 2 * m {
        return Err(Error::Invalid(format!("{n} points cannot hold two clusters of size {m}")));
    }
    let mr = mutual_reachability(d, k)?;
    let merges = single_linkage(n, prim_mst(&mr));
    let tree = condense(n, &merges, m);
    let root = n;
    let n_tree = tree.iter().map(|e| e.child).filter(|&c| c >= n).max().unwrap_or(root) + 1;

    let mut birth = vec![0.0; n_tree];
    let mut cluster_parent = vec![usize::MAX; n_tree];
    for e in tree.iter().filter(|e| e.child >= n) {
        birth[e.child] = e.lambda;
        cluster_parent[e.child] = e.parent;
    }
    let mut stability = vec![0.0; n_tree];
    for e in &tree {
        stability[e.parent] += (e.lambda - birth[e.parent]) * e.size as f64;
    }
    let raw_stability = stability.clone();

    let spread = off_diagonal_spread(d);
    let degenerate = n_tree == root + 1 || spread < DEGENERATE_SPREAD;
    let mut selected = vec![false; n_tree];
    if degenerate {
        log::warn!("distance matrix has no cluster structure (relative spread {spread:.2e}); returning one cluster");
        selected[root] = true;
    } else {
        for c in (root + 1..n_tree).rev() {
            let children: Vec<usize> = tree
                .iter()
                .filter(|e| e.parent == c && e.child >= n)
                .map(|e| e.child)
                .collect();
            let sub: f64 = children.iter().map(|&ch| stability[ch]).sum();
            if !children.is_empty() && sub > stability[c] {
                stability[c] = sub;
            } else {
                selected[c] = true;
                let mut stack = children;
                while let Some(x) = stack.pop() {
                    selected[x] = false;
                    stack.extend(tree.iter().filter(|e| e.parent == x && e.child >= n).map(|e| e.child));
                }
            }
        }
    }

    let owner = |mut c: usize| -> Option<usize> {
        loop {
            if selected[c] {
                return Some(c);
            }
            if c == root {
                return None;
            }
            c = cluster_parent[c];
        }
    };
    let mut point_cluster = vec![None; n];
    let mut point_lambda = vec![0.0; n];
    for e in tree.iter().filter(|e| e.child < n) {
        point_cluster[e.child] = owner(e.parent);
        point_lambda[e.child] = e.lambda;
    }
    // number selected clusters by their smallest member
    let mut order: Vec<usize> = Vec::new();
    for c in point_cluster.iter().flatten() {
        if !order.contains(c) {
            order.push(*c);
        }
    }
    let mut lambda_max = vec![0.0f64; n_tree];
    for p in 0..n {
        if let Some(c) = point_cluster[p] {
            lambda_max[c] = lambda_max[c].max(point_lambda[p]);
        }
    }
    let labels: Vec<i64> = point_cluster
        .iter()
        .map(|c| c.map_or(-1, |c| order.iter().position(|&o| o == c).expect("listed") as i64))
        .collect();
    let confidence: Vec<f64> = (0..n)
        .map(|p| match point_cluster[p] {
            Some(c) if lambda_max[c] > 0.0 => (point_lambda[p].min(lambda_max[c]) / lambda_max[c]).clamp(0.0, 1.0),
            Some(_) => 1.0,
            None => 0.0,
        })
        .collect();
    let clusters = (root..n_tree)
        .map(|c| ClusterSummary {
            tree_id: c,
            stability: raw_stability[c],
            selected: selected[c],
        })
        .collect();
    Ok(ClusterResult {
        point_ids: (0..n).collect(),
        labels,
        confidence,
        n_clusters: order.len(),
        params: *params,
        degenerate,
        clusters,
        condensed_tree: tree,
    })
}
