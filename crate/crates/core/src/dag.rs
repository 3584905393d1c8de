//! The directed acyclic graph of a plan, d-separation, and the predicted
//! sparsity of `U`, `W` and `V`.

use std::collections::{BTreeSet, VecDeque};
use std::io::Write;

use thiserror::Error;

use crate::plan::VecchiaPlan;

#[derive(Debug, Error)]
pub enum DagError {
    #[error("vertex sets overlap at vertex {0}")]
    Overlap(usize),
    #[error("vertex {vertex} out of range for {n} vertices")]
    OutOfRange { vertex: usize, n: usize },
    #[error("vertex {child} has parent {parent} that does not precede it")]
    NotTopological { child: usize, parent: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// What a vertex represents: the latent or observed vector of a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VertexKind {
    pub block: usize,
    pub observed: bool,
}

/// A DAG whose vertices are numbered in a topological order.
#[derive(Clone, Debug)]
pub struct Dag {
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
    kinds: Vec<VertexKind>,
    observed_descendant: Vec<bool>,
}

impl Dag {
    /// Every parent must precede its child.
    pub fn new(parents: Vec<Vec<usize>>, kinds: Vec<VertexKind>) -> Result<Self, DagError> {
        let n = parents.len();
        if kinds.len() != n {
            return Err(DagError::OutOfRange {
                vertex: kinds.len(),
                n,
            });
        }
        let mut children = vec![Vec::new(); n];
        let mut parents = parents;
        for (v, ps) in parents.iter_mut().enumerate() {
            ps.sort_unstable();
            ps.dedup();
            for &p in ps.iter() {
                if p >= v {
                    return Err(DagError::NotTopological { child: v, parent: p });
                }
                children[p].push(v);
            }
        }
        let mut observed_descendant = vec![false; n];
        for v in (0..n).rev() {
            observed_descendant[v] = children[v]
                .iter()
                .any(|&c| kinds[c].observed || observed_descendant[c]);
        }
        Ok(Dag {
            parents,
            children,
            kinds,
            observed_descendant,
        })
    }

    /// A DAG of anonymous latent vertices.
    pub fn from_parents(parents: Vec<Vec<usize>>) -> Result<Self, DagError> {
        let kinds = (0..parents.len())
            .map(|block| VertexKind {
                block,
                observed: false,
            })
            .collect();
        Self::new(parents, kinds)
    }

    pub fn n_vertices(&self) -> usize {
        self.parents.len()
    }

    pub fn parents(&self, v: usize) -> &[usize] {
        &self.parents[v]
    }

    pub fn children(&self, v: usize) -> &[usize] {
        &self.children[v]
    }

    pub fn kind(&self, v: usize) -> VertexKind {
        self.kinds[v]
    }

    pub fn has_observed_descendant(&self, v: usize) -> bool {
        self.observed_descendant[v]
    }

    pub fn n_edges(&self) -> usize {
        self.parents.iter().map(Vec::len).sum()
    }

    /// Vertex index of each block's latent vector.
    pub fn latent_vertices(&self) -> Vec<usize> {
        (0..self.n_vertices())
            .filter(|&v| !self.kinds[v].observed)
            .collect()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.n_vertices())
            .flat_map(|v| self.parents[v].iter().map(move |&p| (p, v)))
            .collect()
    }
}

/// Builds the DAG over `x`: `y_i` then `z_i` (when observed). `y_i` has
/// parents `y_j` for `j` in `qy(i)` and `z_j` for `j` in `qz(i)`; `z_i` has
/// the single parent `y_i`.
pub fn dag_from_plan(plan: &VecchiaPlan) -> Dag {
    let lay = plan.layout();
    let mut parents = Vec::with_capacity(lay.n_vertices());
    let mut kinds = Vec::with_capacity(lay.n_vertices());
    for i in 0..plan.len() {
        let mut p: Vec<usize> = plan.qy(i).iter().map(|&j| lay.y_vertex[j]).collect();
        p.extend(
            plan.qz(i)
                .iter()
                .map(|&j| lay.z_vertex[j].expect("qz holds observed blocks")),
        );
        parents.push(p);
        kinds.push(VertexKind {
            block: i,
            observed: false,
        });
        if plan.is_observed(i) {
            parents.push(vec![lay.y_vertex[i]]);
            kinds.push(VertexKind {
                block: i,
                observed: true,
            });
        }
    }
    Dag::new(parents, kinds).expect("plans are acyclic in block order")
}

/// Whether every path between `a` and `b` is blocked by `c`.
///
/// Reachability form: a trail is followed vertex by vertex, remembering
/// whether it arrived from a child or a parent.
pub fn d_separated(dag: &Dag, a: &[usize], b: &[usize], c: &[usize]) -> Result<bool, DagError> {
    let n = dag.n_vertices();
    let mut role = vec![0u8; n];
    for (tag, set) in [(1u8, a), (2, b), (3, c)] {
        for &v in set {
            if v >= n {
                return Err(DagError::OutOfRange { vertex: v, n });
            }
            if role[v] != 0 && role[v] != tag {
                return Err(DagError::Overlap(v));
            }
            role[v] = tag;
        }
    }
    let in_c = |v: usize| role[v] == 3;
    let mut anc_c = vec![false; n];
    let mut stack: Vec<usize> = c.to_vec();
    while let Some(v) = stack.pop() {
        if anc_c[v] {
            continue;
        }
        anc_c[v] = true;
        stack.extend(dag.parents(v));
    }
    // visited[v][0]: arrived from a child (moving up); [1]: from a parent.
    let mut visited = vec![[false; 2]; n];
    let mut queue: VecDeque<(usize, usize)> = a.iter().map(|&v| (v, 0)).collect();
    while let Some((v, dir)) = queue.pop_front() {
        if visited[v][dir] {
            continue;
        }
        visited[v][dir] = true;
        if !in_c(v) && role[v] == 2 {
            return Ok(false);
        }
        if dir == 0 {
            if !in_c(v) {
                queue.extend(dag.parents(v).iter().map(|&p| (p, 0)));
                queue.extend(dag.children(v).iter().map(|&ch| (ch, 1)));
            }
        } else {
            if !in_c(v) {
                queue.extend(dag.children(v).iter().map(|&ch| (ch, 1)));
            }
            if anc_c[v] {
                queue.extend(dag.parents(v).iter().map(|&p| (p, 0)));
            }
        }
    }
    Ok(true)
}

/// Upper-triangular positions (including the diagonal) that may be nonzero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparsityPattern {
    n: usize,
    entries: BTreeSet<(usize, usize)>,
}

impl SparsityPattern {
    pub fn new(n: usize) -> Self {
        SparsityPattern {
            n,
            entries: BTreeSet::new(),
        }
    }

    pub fn with_diagonal(n: usize) -> Self {
        SparsityPattern {
            n,
            entries: (0..n).map(|i| (i, i)).collect(),
        }
    }

    /// Inserts `(row, col)` after ordering it into the upper triangle.
    pub fn insert(&mut self, i: usize, j: usize) {
        self.entries.insert((i.min(j), i.max(j)));
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.entries.contains(&(i.min(j), i.max(j)))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.entries.iter().copied()
    }

    pub fn is_diagonal(&self) -> bool {
        self.entries.iter().all(|(i, j)| i == j)
    }

    /// Off-diagonal entries in each column.
    pub fn offdiag_per_column(&self) -> Vec<usize> {
        let mut c = vec![0; self.n];
        for &(i, j) in &self.entries {
            if i != j {
                c[j] += 1;
            }
        }
        c
    }

    /// Scalar pattern, given the size of each block (dense within blocks).
    pub fn expand(&self, sizes: &[usize]) -> SparsityPattern {
        let mut off = vec![0];
        for &s in sizes {
            off.push(off.last().unwrap() + s);
        }
        let mut out = SparsityPattern::new(*off.last().unwrap());
        for &(bi, bj) in &self.entries {
            for i in off[bi]..off[bi + 1] {
                for j in off[bj]..off[bj + 1] {
                    if i <= j {
                        out.entries.insert((i, j));
                    }
                }
            }
        }
        out
    }

    /// `row,col` CSV with 1-based indices.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<(), DagError> {
        writeln!(out, "row,col")?;
        for &(i, j) in &self.entries {
            writeln!(out, "{},{}", i + 1, j + 1)?;
        }
        Ok(())
    }
}

/// Diagonal plus `(j, i)` for every edge `x_j -> x_i`, over vertices.
pub fn predict_u_pattern(dag: &Dag) -> SparsityPattern {
    let mut p = SparsityPattern::with_diagonal(dag.n_vertices());
    for (j, i) in dag.edges() {
        p.insert(j, i);
    }
    p
}

/// Latent rows of a plan DAG indexed by block: position `k` is block `k`.
fn latent_index(dag: &Dag) -> (Vec<usize>, Vec<usize>) {
    let latent = dag.latent_vertices();
    let mut pos = vec![usize::MAX; dag.n_vertices()];
    for (k, &v) in latent.iter().enumerate() {
        pos[v] = k;
    }
    (latent, pos)
}

/// Pattern of `W = U_Y U_Y'` over latent vertices: diagonal, latent edges and
/// pairs of latent vertices sharing a child.
pub fn predict_w_pattern(dag: &Dag) -> SparsityPattern {
    let (latent, pos) = latent_index(dag);
    let mut p = SparsityPattern::with_diagonal(latent.len());
    for v in 0..dag.n_vertices() {
        let lp: Vec<usize> = dag
            .parents(v)
            .iter()
            .filter(|&&u| pos[u] != usize::MAX)
            .map(|&u| pos[u])
            .collect();
        if pos[v] != usize::MAX {
            for &a in &lp {
                p.insert(a, pos[v]);
            }
        }
        for (x, &a) in lp.iter().enumerate() {
            for &b in &lp[x + 1..] {
                p.insert(a, b);
            }
        }
    }
    p
}

/// Pattern of `V = rchol(W)` over latent vertices: `(j, i)` with `j < i` is
/// included when `y_i` and `y_j` are connected through latent vertices
/// `y_k`, `k > i`, that have an observed descendant.
pub fn predict_v_pattern(dag: &Dag) -> SparsityPattern {
    let (latent, pos) = latent_index(dag);
    let nl = latent.len();
    let mut nbrs: Vec<Vec<usize>> = vec![Vec::new(); nl];
    for (k, &v) in latent.iter().enumerate() {
        for &u in dag.parents(v) {
            if pos[u] != usize::MAX {
                nbrs[k].push(pos[u]);
                nbrs[pos[u]].push(k);
            }
        }
    }
    let allowed: Vec<bool> = latent
        .iter()
        .map(|&v| dag.has_observed_descendant(v))
        .collect();
    let mut p = SparsityPattern::with_diagonal(nl);
    let mut seen = vec![usize::MAX; nl];
    let mut queue = VecDeque::new();
    for i in 0..nl {
        seen[i] = i;
        queue.push_back(i);
        while let Some(u) = queue.pop_front() {
            for &w in &nbrs[u] {
                if seen[w] == i {
                    continue;
                }
                if w < i {
                    seen[w] = i;
                    p.insert(w, i);
                } else if w > i && allowed[w] {
                    seen[w] = i;
                    queue.push_back(w);
                }
            }
        }
    }
    p
}
