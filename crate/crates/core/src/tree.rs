//! Binary sample tree over the rows of `X`.
//!
//! Every node stores `Σ_{a ∈ node} x_aᵀ x_a` (d×d). Drawing an item with
//! probability `⟨Q, x_aᵀ x_a⟩ / ⟨Q, XᵀX⟩` for a PSD query `Q` walks from the
//! root, going left with probability `⟨Q, left⟩ / ⟨Q, node⟩`, and finishes
//! with a direct scan of the (possibly fat) leaf.

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{NdppError, Result};
use crate::linalg;

/// Relative floor on query masses (scaled by `d · ⟨|Q|, |X|ᵀ|X|⟩`).
pub const EPS_MASS: f64 = 1e-14;

/// Leaf size used when none is given: 1 below 10⁵ items, 8 from there on.
pub fn default_leaf_block(n: usize) -> usize {
    if n >= 100_000 {
        8
    } else {
        1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Node {
    /// Item range `[lo, hi)`.
    pub lo: usize,
    pub hi: usize,
    pub children: Option<(usize, usize)>,
}

impl Node {
    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }

    pub fn len(&self) -> usize {
        self.hi - self.lo
    }

    pub fn is_empty(&self) -> bool {
        self.hi == self.lo
    }
}

/// Immutable after [`build_tree`]; traversals only need `&self`.
#[derive(Debug, Clone)]
pub struct SampleTree {
    n: usize,
    dim: usize,
    leaf_block: usize,
    /// Row-major copy of `X`.
    rows: Vec<f64>,
    nodes: Vec<Node>,
    /// `nodes.len()` blocks of `d(d+1)/2` entries: the upper triangle of each
    /// (symmetric) aggregate, row by row.
    aggregates: Vec<f64>,
    /// Packed `|X|ᵀ|X|`, an entrywise bound on every aggregate.
    abs_root: Vec<f64>,
}

/// Builds the tree with leaves of `leaf_block` consecutive items.
///
/// Leaves are the blocks `[iB, (i+1)B)`; each internal node splits its block
/// range at the midpoint, giving the left child the extra block when the
/// count is odd. With `B = 1` this is the plain index midpoint.
pub fn build_tree(x: &DMatrix<f64>, leaf_block: usize) -> Result<SampleTree> {
    let (n, dim) = x.shape();
    if n == 0 {
        return Err(NdppError::InvalidArgument(
            "tree needs at least one item".into(),
        ));
    }
    if leaf_block == 0 {
        return Err(NdppError::InvalidArgument(
            "leaf block must be at least 1".into(),
        ));
    }
    let mut rows = Vec::with_capacity(n * dim);
    for i in 0..n {
        rows.extend(x.row(i).iter());
    }
    let blocks = n.div_ceil(leaf_block);
    let node_count = 2 * blocks - 1;
    let packed = packed_len(dim);
    let mut tree = SampleTree {
        n,
        dim,
        leaf_block,
        rows,
        nodes: Vec::with_capacity(node_count),
        aggregates: vec![0.0; node_count * packed],
        abs_root: vec![0.0; packed],
    };
    tree.build_range(0, blocks);
    debug_assert_eq!(tree.nodes.len(), node_count);

    for a in 0..n {
        let row = &tree.rows[a * dim..(a + 1) * dim];
        add_packed_outer(&mut tree.abs_root, row, true);
    }
    Ok(tree)
}

fn packed_len(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

/// `acc += xᵀx` on the packed upper triangle (entrywise `|·|` if `abs`).
fn add_packed_outer(acc: &mut [f64], x: &[f64], abs: bool) {
    let mut t = 0;
    for i in 0..x.len() {
        let xi = x[i];
        for &xj in &x[i..] {
            let v = xi * xj;
            acc[t] += if abs { v.abs() } else { v };
            t += 1;
        }
    }
}

/// Packs a symmetric query so that `⟨Q, A⟩` is a plain dot product with a
/// packed `A`: diagonal entries once, off-diagonal entries `Q_ij + Q_ji`.
fn pack_query(q: &DMatrix<f64>, abs: bool) -> Vec<f64> {
    let d = q.nrows();
    let f = |v: f64| if abs { v.abs() } else { v };
    let mut out = Vec::with_capacity(packed_len(d));
    for i in 0..d {
        out.push(f(q[(i, i)]));
        for j in i + 1..d {
            out.push(f(q[(i, j)]) + f(q[(j, i)]));
        }
    }
    out
}

impl SampleTree {
    fn build_range(&mut self, block_lo: usize, block_hi: usize) -> usize {
        let idx = self.nodes.len();
        let lo = block_lo * self.leaf_block;
        let hi = (block_hi * self.leaf_block).min(self.n);
        self.nodes.push(Node {
            lo,
            hi,
            children: None,
        });
        let p = packed_len(self.dim);
        if block_hi - block_lo == 1 {
            let dim = self.dim;
            let agg = &mut self.aggregates[idx * p..(idx + 1) * p];
            for a in lo..hi {
                add_packed_outer(agg, &self.rows[a * dim..(a + 1) * dim], false);
            }
        } else {
            let mid = block_lo + (block_hi - block_lo).div_ceil(2);
            let left = self.build_range(block_lo, mid);
            let right = self.build_range(mid, block_hi);
            self.nodes[idx].children = Some((left, right));
            for t in 0..p {
                self.aggregates[idx * p + t] =
                    self.aggregates[left * p + t] + self.aggregates[right * p + t];
            }
        }
        idx
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn leaf_block(&self) -> usize {
        self.leaf_block
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn root(&self) -> usize {
        0
    }

    /// Row `a` of `X`.
    pub fn row(&self, a: usize) -> &[f64] {
        &self.rows[a * self.dim..(a + 1) * self.dim]
    }

    fn aggregate_slice(&self, node: usize) -> &[f64] {
        let p = packed_len(self.dim);
        &self.aggregates[node * p..(node + 1) * p]
    }

    /// `Σ_{a∈node} x_aᵀ x_a` as a full d×d matrix.
    pub fn aggregate(&self, node: usize) -> DMatrix<f64> {
        let d = self.dim;
        let packed = self.aggregate_slice(node);
        let mut m = DMatrix::zeros(d, d);
        let mut t = 0;
        for i in 0..d {
            for j in i..d {
                m[(i, j)] = packed[t];
                m[(j, i)] = packed[t];
                t += 1;
            }
        }
        m
    }

    pub fn depth(&self) -> usize {
        fn go(t: &SampleTree, node: usize) -> usize {
            match t.nodes[node].children {
                None => 1,
                Some((l, r)) => 1 + go(t, l).max(go(t, r)),
            }
        }
        go(self, 0)
    }

    pub fn leaf_sizes(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .filter(|n| n.is_leaf())
            .map(Node::len)
            .collect()
    }

    /// Bytes held by the stored aggregates.
    pub fn aggregate_bytes(&self) -> usize {
        self.aggregates.len() * std::mem::size_of::<f64>()
    }

    /// `⟨Q, Σ_{a∈node} x_aᵀ x_a⟩`.
    pub fn node_mass(&self, q: &DMatrix<f64>, node: usize) -> f64 {
        linalg::frobenius_inner(&pack_query(q, false), self.aggregate_slice(node))
    }

    /// `x_a Q x_aᵀ`.
    pub fn item_mass(&self, q: &DMatrix<f64>, a: usize) -> f64 {
        linalg::quad_form(q, self.row(a))
    }

    fn mass_tolerance(&self, q: &DMatrix<f64>) -> f64 {
        let scale = linalg::frobenius_inner(&pack_query(q, true), &self.abs_root);
        EPS_MASS * (self.dim.max(1) as f64) * scale
    }

    fn clamp_mass(&self, mass: f64, tol: f64) -> Result<f64> {
        if mass >= 0.0 {
            Ok(mass)
        } else if mass >= -tol {
            Ok(0.0)
        } else {
            Err(NdppError::NotPsd(mass))
        }
    }

    /// Draws item `a` with probability `⟨Q, x_aᵀx_a⟩ / ⟨Q, XᵀX⟩`.
    pub fn traverse_sample<R: Rng + ?Sized>(&self, q: &DMatrix<f64>, rng: &mut R) -> Result<usize> {
        if q.nrows() != self.dim || q.ncols() != self.dim {
            return Err(NdppError::Dimension(format!(
                "query must be {0}x{0}",
                self.dim
            )));
        }
        let tol = self.mass_tolerance(q);
        let packed = pack_query(q, false);
        let mass = |node: usize| linalg::frobenius_inner(&packed, self.aggregate_slice(node));
        let total = self.clamp_mass(mass(0), tol)?;
        if !(total > tol) {
            return Err(NdppError::NoSupport(format!(
                "query mass {total:e} below {tol:e}"
            )));
        }
        let mut node = 0;
        while let Some((left, right)) = self.nodes[node].children {
            let ml = self.clamp_mass(mass(left), tol)?;
            let mr = self.clamp_mass(mass(right), tol)?;
            let sum = ml + mr;
            if !(sum > 0.0) {
                return Err(NdppError::NoSupport(
                    "query mass vanished inside the tree".into(),
                ));
            }
            node = if rng.random::<f64>() * sum < ml {
                left
            } else {
                right
            };
        }
        let Node { lo, hi, .. } = self.nodes[node];
        if hi - lo == 1 {
            return Ok(lo);
        }
        let masses = (lo..hi)
            .map(|a| self.clamp_mass(self.item_mass(q, a), tol))
            .collect::<Result<Vec<f64>>>()?;
        linalg::draw_categorical(&masses, rng)
            .map(|i| lo + i)
            .ok_or_else(|| NdppError::NoSupport("query mass vanished in a leaf".into()))
    }
}
