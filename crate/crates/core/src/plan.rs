//! Vecchia plans: ordered blocks, observed flags, conditioning sets and their
//! split into latent (`qy`) and observed (`qz`) parts.
//!
//! Blocks are stored in their conditioning order, so block `i` may only
//! condition on blocks `0..i`. Indices are 0-based here and 1-based in JSON.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geom::{
    self, axis_tile, block_partition, coord_order, euclidean, maxmin_order, nearest_among,
    GeomError, Grouping, LocationSet, Ordering,
};

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("block {block}: conditioning index {index} is not an earlier block")]
    NotPrevious { block: usize, index: usize },
    #[error("block {block}: conditioning index {index} is repeated")]
    Repeated { block: usize, index: usize },
    #[error("block {block}: qy and qz do not partition q")]
    BadPartition { block: usize },
    #[error("block {block}: qz contains unobserved block {index}")]
    UnobservedInQz { block: usize, index: usize },
    #[error("expected {expected} entries for {what}, found {found}")]
    Length {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// How conditioning sets are chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConditioningRule {
    /// The `m` nearest earlier blocks (centroid distance).
    NearestPrevious { m: usize },
    /// The first `min(i, m)` blocks.
    FirstM { m: usize },
    /// Explicit lists, one per block.
    Explicit { q: Vec<Vec<usize>> },
}

/// Strategy for splitting `q(i)` into `qy(i)` and `qz(i)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Standard,
    Latent,
    Sgv,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Standard, Partition::Latent, Partition::Sgv];

    pub fn name(&self) -> &'static str {
        match self {
            Partition::Standard => "standard",
            Partition::Latent => "latent",
            Partition::Sgv => "sgv",
        }
    }
}

impl std::fmt::Display for Partition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Partition {
    type Err = PlanError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "standard" => Ok(Partition::Standard),
            "latent" => Ok(Partition::Latent),
            "sgv" => Ok(Partition::Sgv),
            other => Err(PlanError::InvalidArgument(format!("unknown partition {other}"))),
        }
    }
}

/// A pair `j < k` in `qy(i)` with `j` missing from `qy(k)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SgvViolation {
    pub block: usize,
    pub j: usize,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VecchiaPlan {
    locations: LocationSet,
    blocks: Vec<Vec<usize>>,
    observed: Vec<bool>,
    q: Vec<Vec<usize>>,
    qy: Vec<Vec<usize>>,
    qz: Vec<Vec<usize>>,
}

impl VecchiaPlan {
    /// A plan with latent partition `qy = q`. `blocks` must partition the
    /// locations and be listed in conditioning order.
    pub fn new(
        locations: LocationSet,
        blocks: Vec<Vec<usize>>,
        observed: Vec<bool>,
        q: Vec<Vec<usize>>,
    ) -> Result<Self, PlanError> {
        let grouping = Grouping::new(blocks, locations.len())?;
        let blocks = grouping.into_blocks();
        let l = blocks.len();
        check_len("observed flags", l, observed.len())?;
        check_len("conditioning sets", l, q.len())?;
        let q = q
            .into_iter()
            .enumerate()
            .map(|(i, qi)| normalize(i, qi))
            .collect::<Result<Vec<_>, _>>()?;
        let qz = vec![Vec::new(); l];
        Ok(VecchiaPlan {
            locations,
            blocks,
            observed,
            qy: q.clone(),
            q,
            qz,
        })
    }

    /// Replace the partition with explicit `qy`, `qz` lists.
    pub fn with_partition(
        mut self,
        qy: Vec<Vec<usize>>,
        qz: Vec<Vec<usize>>,
    ) -> Result<Self, PlanError> {
        let l = self.len();
        check_len("qy sets", l, qy.len())?;
        check_len("qz sets", l, qz.len())?;
        let mut ny = Vec::with_capacity(l);
        let mut nz = Vec::with_capacity(l);
        for i in 0..l {
            let y = normalize(i, qy[i].clone())?;
            let z = normalize(i, qz[i].clone())?;
            let mut all: Vec<usize> = y.iter().chain(&z).copied().collect();
            all.sort_unstable();
            if all != self.q[i] {
                return Err(PlanError::BadPartition { block: i });
            }
            if let Some(&j) = z.iter().find(|&&j| !self.observed[j]) {
                return Err(PlanError::UnobservedInQz { block: i, index: j });
            }
            ny.push(y);
            nz.push(z);
        }
        self.qy = ny;
        self.qz = nz;
        Ok(self)
    }

    pub fn locations(&self) -> &LocationSet {
        &self.locations
    }

    /// Number of blocks.
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn block(&self, i: usize) -> &[usize] {
        &self.blocks[i]
    }

    pub fn observed(&self) -> &[bool] {
        &self.observed
    }

    pub fn is_observed(&self, i: usize) -> bool {
        self.observed[i]
    }

    pub fn q(&self, i: usize) -> &[usize] {
        &self.q[i]
    }

    pub fn qy(&self, i: usize) -> &[usize] {
        &self.qy[i]
    }

    pub fn qz(&self, i: usize) -> &[usize] {
        &self.qz[i]
    }

    pub fn q_all(&self) -> &[Vec<usize>] {
        &self.q
    }

    /// Point ordering implied by concatenating the blocks.
    pub fn point_ordering(&self) -> Ordering {
        Ordering::new(self.blocks.concat()).expect("blocks partition the locations")
    }

    /// Location indices of the observations, in x-order.
    pub fn observed_locations(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .zip(&self.observed)
            .filter(|(_, &o)| o)
            .flat_map(|(b, _)| b.iter().copied())
            .collect()
    }

    /// Observation vector in x-order from values indexed by location.
    pub fn gather(&self, by_location: &[f64]) -> Vec<f64> {
        self.observed_locations()
            .into_iter()
            .map(|i| by_location[i])
            .collect()
    }

    pub fn n_observed(&self) -> usize {
        self.observed_locations().len()
    }

    pub fn block_centroid(&self, i: usize) -> Vec<f64> {
        self.locations.centroid_of(&self.blocks[i])
    }

    /// Largest `|q(i)|`.
    pub fn max_conditioning(&self) -> usize {
        self.q.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn apply(&self, partition: Partition) -> VecchiaPlan {
        match partition {
            Partition::Standard => partition_standard(self),
            Partition::Latent => partition_latent(self),
            Partition::Sgv => partition_sgv(self),
        }
    }

    /// The same conditioning structure over the latent field alone: every
    /// block unobserved and `qy = q`.
    pub fn latent_only(&self) -> VecchiaPlan {
        let mut p = partition_latent(self);
        p.observed.iter_mut().for_each(|o| *o = false);
        p
    }

    pub fn layout(&self) -> XLayout {
        XLayout::new(self)
    }

    /// Canonical JSON with 1-based indices.
    pub fn to_json(&self) -> String {
        let ob: Vec<usize> = (0..self.len()).filter(|&i| self.observed[i]).collect();
        let lists = |v: &[Vec<usize>]| -> Vec<Vec<usize>> {
            v.iter().map(|x| geom::one_based(x)).collect()
        };
        let value = serde_json::json!({
            "ordering": geom::one_based(&self.blocks.concat()),
            "blocks": lists(&self.blocks),
            "observed": geom::one_based(&ob),
            "q": lists(&self.q),
            "qy": lists(&self.qy),
            "qz": lists(&self.qz),
        });
        serde_json::to_string(&value).expect("plan JSON")
    }

    /// SHA-256 over the canonical JSON and the coordinates.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_json().as_bytes());
        for p in self.locations.points() {
            for v in p {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn check_len(what: &'static str, expected: usize, found: usize) -> Result<(), PlanError> {
    if expected == found {
        Ok(())
    } else {
        Err(PlanError::Length {
            what,
            expected,
            found,
        })
    }
}

fn normalize(block: usize, mut qi: Vec<usize>) -> Result<Vec<usize>, PlanError> {
    qi.sort_unstable();
    for w in qi.windows(2) {
        if w[0] == w[1] {
            return Err(PlanError::Repeated { block, index: w[0] });
        }
    }
    if let Some(&index) = qi.iter().find(|&&j| j >= block) {
        return Err(PlanError::NotPrevious { block, index });
    }
    Ok(qi)
}

/// Position of every vertex and scalar entry of `x`.
///
/// `x` interleaves `y_i` and, if block `i` is observed, `z_i` right after.
#[derive(Clone, Debug)]
pub struct XLayout {
    /// Vertex index of `y_i`.
    pub y_vertex: Vec<usize>,
    /// Vertex index of `z_i`, if observed.
    pub z_vertex: Vec<Option<usize>>,
    /// Block of each vertex and whether it is an observation.
    pub vertex_block: Vec<(usize, bool)>,
    /// First scalar index of each vertex; one extra entry holds the total.
    pub offset: Vec<usize>,
}

impl XLayout {
    fn new(plan: &VecchiaPlan) -> Self {
        let mut y_vertex = Vec::with_capacity(plan.len());
        let mut z_vertex = Vec::with_capacity(plan.len());
        let mut vertex_block = Vec::new();
        let mut offset = vec![0];
        for (i, b) in plan.blocks.iter().enumerate() {
            y_vertex.push(vertex_block.len());
            vertex_block.push((i, false));
            offset.push(offset.last().unwrap() + b.len());
            if plan.observed[i] {
                z_vertex.push(Some(vertex_block.len()));
                vertex_block.push((i, true));
                offset.push(offset.last().unwrap() + b.len());
            } else {
                z_vertex.push(None);
            }
        }
        XLayout {
            y_vertex,
            z_vertex,
            vertex_block,
            offset,
        }
    }

    pub fn n_vertices(&self) -> usize {
        self.vertex_block.len()
    }

    pub fn n_scalars(&self) -> usize {
        *self.offset.last().unwrap()
    }

    pub fn range(&self, v: usize) -> std::ops::Range<usize> {
        self.offset[v]..self.offset[v + 1]
    }

    /// Scalar indices of the latent rows, in x-order.
    pub fn y_scalars(&self) -> Vec<usize> {
        self.scalars(false)
    }

    /// Scalar indices of the observed rows, in x-order.
    pub fn z_scalars(&self) -> Vec<usize> {
        self.scalars(true)
    }

    fn scalars(&self, observed: bool) -> Vec<usize> {
        (0..self.n_vertices())
            .filter(|&v| self.vertex_block[v].1 == observed)
            .flat_map(|v| self.range(v))
            .collect()
    }
}

/// Conditioning sets for blocks listed in `grouping` order.
///
/// Nearest-previous compares block centroids, which for singletons are the
/// points themselves.
pub fn build_q(
    s: &LocationSet,
    grouping: &Grouping,
    rule: &ConditioningRule,
) -> Result<Vec<Vec<usize>>, PlanError> {
    let l = grouping.len();
    match rule {
        ConditioningRule::FirstM { m } => Ok((0..l).map(|i| (0..i.min(*m)).collect()).collect()),
        ConditioningRule::NearestPrevious { m } => {
            let centroids: Vec<Vec<f64>> =
                grouping.blocks().iter().map(|b| s.centroid_of(b)).collect();
            Ok((0..l)
                .map(|i| nearest_among(i, *m, |j| euclidean(&centroids[i], &centroids[j])))
                .collect())
        }
        ConditioningRule::Explicit { q } => {
            check_len("conditioning sets", l, q.len())?;
            q.iter()
                .enumerate()
                .map(|(i, qi)| normalize(i, qi.clone()))
                .collect()
        }
    }
}

/// Singleton-block plan over `order` with all points observed.
pub fn singleton_plan(
    s: &LocationSet,
    order: &Ordering,
    rule: &ConditioningRule,
) -> Result<VecchiaPlan, PlanError> {
    let grouping = Grouping::singletons(order);
    let q = build_q(s, &grouping, rule)?;
    let l = grouping.len();
    VecchiaPlan::new(s.clone(), grouping.into_blocks(), vec![true; l], q)
}

/// Condition only on observations; unobserved indices are dropped from `q`.
pub fn partition_standard(plan: &VecchiaPlan) -> VecchiaPlan {
    let mut p = plan.clone();
    for i in 0..p.len() {
        let (keep, drop): (Vec<usize>, Vec<usize>) =
            p.q[i].iter().partition(|&&j| p.observed[j]);
        if !drop.is_empty() {
            log::warn!("block {i}: dropping unobserved conditioning blocks {drop:?}");
        }
        p.q[i] = keep.clone();
        p.qz[i] = keep;
        p.qy[i].clear();
    }
    p
}

/// Condition only on latent variables.
pub fn partition_latent(plan: &VecchiaPlan) -> VecchiaPlan {
    let mut p = plan.clone();
    for i in 0..p.len() {
        p.qy[i] = p.q[i].clone();
        p.qz[i].clear();
    }
    p
}

/// Sparse general Vecchia: `qy(i) = {k_i} ∪ (qy(k_i) ∩ q(i))` where `k_i`
/// maximizes the latent overlap with `q(i)`; ties go to the nearest block
/// centroid, then the smaller index. Must run in increasing `i`.
pub fn partition_sgv(plan: &VecchiaPlan) -> VecchiaPlan {
    let mut p = plan.clone();
    let centroids: Vec<Vec<f64>> = (0..p.len()).map(|i| p.block_centroid(i)).collect();
    for i in 0..p.len() {
        if p.q[i].is_empty() {
            p.qy[i].clear();
            p.qz[i].clear();
            continue;
        }
        let qi: BTreeSet<usize> = p.q[i].iter().copied().collect();
        let mut best: Option<(usize, f64, usize)> = None;
        for &j in &p.q[i] {
            let overlap = p.qy[j].iter().filter(|k| qi.contains(k)).count();
            let d = euclidean(&centroids[i], &centroids[j]);
            let better = match best {
                None => true,
                Some((bo, bd, _)) => overlap > bo || (overlap == bo && d < bd),
            };
            if better {
                best = Some((overlap, d, j));
            }
        }
        let k = best.expect("q(i) is nonempty").2;
        let mut qy: Vec<usize> = p.qy[k].iter().copied().filter(|j| qi.contains(j)).collect();
        qy.push(k);
        qy.sort_unstable();
        let (qz, drop): (Vec<usize>, Vec<usize>) = p.q[i]
            .iter()
            .filter(|j| qy.binary_search(j).is_err())
            .partition(|&&j| p.observed[j]);
        if !drop.is_empty() {
            log::warn!("block {i}: dropping unobserved conditioning blocks {drop:?}");
            p.q[i].retain(|j| !drop.contains(j));
        }
        p.qy[i] = qy;
        p.qz[i] = qz;
    }
    p
}

/// First `(block, j, k)` with `j < k` in `qy(block)` but `j` not in `qy(k)`.
pub fn check_sgv_admissible(plan: &VecchiaPlan) -> Option<SgvViolation> {
    for i in 0..plan.len() {
        let qy = &plan.qy[i];
        for (a, &j) in qy.iter().enumerate() {
            for &k in &qy[a + 1..] {
                if plan.qy[k].binary_search(&j).is_err() {
                    return Some(SgvViolation { block: i, j, k });
                }
            }
        }
    }
    None
}

/// Tiles of the coordinate-ordered set as blocks, no conditioning.
pub fn make_independent_blocks(
    s: &LocationSet,
    blocks_per_side: usize,
) -> Result<VecchiaPlan, PlanError> {
    let grouping = block_partition(s, &coord_order(s), blocks_per_side);
    let l = grouping.len();
    VecchiaPlan::new(s.clone(), grouping.into_blocks(), vec![true; l], vec![Vec::new(); l])
}

/// Latent autoregression of order `m` over coordinate-ordered singletons.
pub fn make_ar(s: &LocationSet, m: usize) -> Result<VecchiaPlan, PlanError> {
    let order = coord_order(s);
    singleton_plan(s, &order, &ConditioningRule::FirstM { m: 0 }).and_then(|p| {
        let q = (0..p.len()).map(|i| (i.saturating_sub(m)..i).collect()).collect();
        VecchiaPlan::new(p.locations, p.blocks, p.observed, q)
    })
}

/// Modified predictive process: the knots form an unobserved first block and
/// every data point conditions on it alone. Locations are `knots` followed by
/// `s`.
pub fn make_mpp(s: &LocationSet, knots: &LocationSet) -> Result<VecchiaPlan, PlanError> {
    let k = knots.len();
    let all = knots.concat(s)?;
    let mut blocks = vec![(0..k).collect::<Vec<_>>()];
    blocks.extend((k..k + s.len()).map(|i| vec![i]));
    knot_plan(all, blocks)
}

/// Full-scale approximation: knots first (unobserved), remaining points tiled
/// into blocks that each condition on the knots only.
pub fn make_fsa(
    s: &LocationSet,
    knots: &LocationSet,
    blocks_per_side: usize,
) -> Result<VecchiaPlan, PlanError> {
    let k = knots.len();
    let all = knots.concat(s)?;
    let mut blocks = vec![(0..k).collect::<Vec<_>>()];
    for b in block_partition(s, &coord_order(s), blocks_per_side).into_blocks() {
        blocks.push(b.into_iter().map(|i| i + k).collect());
    }
    knot_plan(all, blocks)
}

fn knot_plan(all: LocationSet, blocks: Vec<Vec<usize>>) -> Result<VecchiaPlan, PlanError> {
    let l = blocks.len();
    let mut observed = vec![true; l];
    observed[0] = false;
    let q = (0..l).map(|i| if i == 0 { vec![] } else { vec![0] }).collect();
    VecchiaPlan::new(all, blocks, observed, q)
}

/// Multi-resolution approximation.
///
/// The bounding box is split recursively into `j` subregions, `levels` times.
/// Each region above the finest level takes up to `r_per_region` of the points
/// not yet used by its ancestors, chosen by maxmin within the region; the
/// finest regions take whatever remains. Blocks are listed breadth-first and
/// condition on all their ancestors. Empty regions are dropped.
///
/// A perfect `d`-th power `j` splits every axis into `j^(1/d)` parts;
/// otherwise the longest axis is cut into `j` slabs.
pub fn make_mra(
    s: &LocationSet,
    j: usize,
    levels: usize,
    r_per_region: usize,
) -> Result<VecchiaPlan, PlanError> {
    if j < 2 || levels < 1 || r_per_region < 1 {
        return Err(PlanError::InvalidArgument(
            "MRA needs j >= 2, levels >= 1 and r_per_region >= 1".into(),
        ));
    }
    struct Region {
        bbox: Vec<(f64, f64)>,
        points: Vec<usize>,
        depth: usize,
        ancestors: Vec<usize>,
    }
    let mut queue = std::collections::VecDeque::new();
    queue.push_back(Region {
        bbox: s.bounding_box(),
        points: (0..s.len()).collect(),
        depth: 0,
        ancestors: Vec::new(),
    });
    let mut blocks = Vec::new();
    let mut q = Vec::new();
    while let Some(region) = queue.pop_front() {
        if region.points.is_empty() {
            continue;
        }
        let (chosen, rest) = if region.depth == levels {
            (region.points, Vec::new())
        } else {
            let sub = s.subset(&region.points)?;
            let order = maxmin_order(&sub);
            let take = r_per_region.min(region.points.len());
            let mut chosen: Vec<usize> =
                order.as_slice()[..take].iter().map(|&a| region.points[a]).collect();
            chosen.sort_unstable();
            let rest: Vec<usize> = region
                .points
                .iter()
                .copied()
                .filter(|p| chosen.binary_search(p).is_err())
                .collect();
            (chosen, rest)
        };
        let id = blocks.len();
        blocks.push(chosen);
        q.push(region.ancestors.clone());
        if region.depth == levels {
            continue;
        }
        let mut ancestors = region.ancestors;
        ancestors.push(id);
        for (bbox, points) in split_region(s, &region.bbox, &rest, j) {
            queue.push_back(Region {
                bbox,
                points,
                depth: region.depth + 1,
                ancestors: ancestors.clone(),
            });
        }
    }
    let l = blocks.len();
    VecchiaPlan::new(s.clone(), blocks, vec![true; l], q)
}

type Bbox = Vec<(f64, f64)>;

/// `j` child boxes of `bbox` in lexicographic order with their members.
fn split_region(s: &LocationSet, bbox: &[(f64, f64)], points: &[usize], j: usize) -> Vec<(Bbox, Vec<usize>)> {
    let d = bbox.len();
    let root = (j as f64).powf(1.0 / d as f64).round() as usize;
    let splits: Vec<usize> = if root.pow(d as u32) == j {
        vec![root; d]
    } else {
        let longest = (0..d)
            .max_by(|&a, &b| {
                let wa = bbox[a].1 - bbox[a].0;
                let wb = bbox[b].1 - bbox[b].0;
                wa.partial_cmp(&wb).unwrap().then(b.cmp(&a))
            })
            .unwrap();
        (0..d).map(|k| if k == longest { j } else { 1 }).collect()
    };
    let mut children: Vec<(Bbox, Vec<usize>)> = (0..j)
        .map(|flat| {
            let mut rest = flat;
            let mut idx = vec![0; d];
            for k in (0..d).rev() {
                idx[k] = rest % splits[k];
                rest /= splits[k];
            }
            let b = (0..d)
                .map(|k| {
                    let (lo, hi) = bbox[k];
                    let w = (hi - lo) / splits[k] as f64;
                    (lo + idx[k] as f64 * w, lo + (idx[k] + 1) as f64 * w)
                })
                .collect();
            (b, Vec::new())
        })
        .collect();
    for &p in points {
        let x = s.point(p);
        let mut flat = 0;
        for k in 0..d {
            flat = flat * splits[k] + axis_tile(x[k], bbox[k].0, bbox[k].1, splits[k]);
        }
        children[flat].1.push(p);
    }
    children
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// The seven-block toy example on a line, with the conditioning sets used
    /// throughout: q(2)=(1), q(3)=(1,2), q(4)=(1,3), q(5)=(2,4), q(6)=(3,5),
    /// q(7)=(5,6) (1-based).
    pub(crate) fn toy_plan() -> VecchiaPlan {
        let xs = [0.0, 1.0, 0.5, 1.5, 2.0, 2.6, 3.0];
        let s = LocationSet::new(xs.iter().map(|&x| vec![x]).collect()).unwrap();
        let q1: [&[usize]; 7] = [&[], &[1], &[1, 2], &[1, 3], &[2, 4], &[3, 5], &[5, 6]];
        let q = q1.iter().map(|v| v.iter().map(|j| j - 1).collect()).collect();
        VecchiaPlan::new(s, (0..7).map(|i| vec![i]).collect(), vec![true; 7], q).unwrap()
    }

    fn one(v: &[usize]) -> Vec<usize> {
        v.iter().map(|j| j + 1).collect()
    }

    #[test]
    fn first_m_second_block() {
        let s = geom::grid_locations(1, 5, 1.0).unwrap();
        let g = Grouping::singletons(&coord_order(&s));
        let q = build_q(&s, &g, &ConditioningRule::FirstM { m: 3 }).unwrap();
        assert_eq!(q[1], vec![0]);
        assert_eq!(q[4], vec![0, 1, 2]);
    }

    #[test]
    fn nearest_previous_on_line() {
        let s = geom::grid_locations(1, 10, 1.0).unwrap();
        let g = Grouping::singletons(&coord_order(&s));
        let q = build_q(&s, &g, &ConditioningRule::NearestPrevious { m: 2 }).unwrap();
        assert_eq!(one(&q[6]), vec![5, 6]);
        assert!(q[0].is_empty());
    }

    #[test]
    fn explicit_rejects_future_index() {
        let s = geom::grid_locations(1, 3, 1.0).unwrap();
        let g = Grouping::singletons(&coord_order(&s));
        let rule = ConditioningRule::Explicit {
            q: vec![vec![], vec![1], vec![]],
        };
        assert!(matches!(build_q(&s, &g, &rule), Err(PlanError::NotPrevious { .. })));
    }

    #[test]
    fn standard_partition_of_toy() {
        let p = partition_standard(&toy_plan());
        assert_eq!(one(p.qz(2)), vec![1, 2]);
        assert!(p.qy(2).is_empty());
        assert!(p.qz(0).is_empty() && p.qy(0).is_empty());
        assert!(check_sgv_admissible(&p).is_none());
    }

    #[test]
    fn standard_drops_unobserved() {
        let t = toy_plan();
        let mut observed = vec![true; 7];
        observed[1] = false;
        let p = VecchiaPlan::new(t.locations.clone(), t.blocks.clone(), observed, t.q.clone())
            .unwrap();
        let p = partition_standard(&p);
        assert_eq!(one(p.qz(2)), vec![1]);
        assert_eq!(one(p.q(2)), vec![1]);
    }

    #[test]
    fn latent_partition_of_toy() {
        let p = partition_latent(&toy_plan());
        assert_eq!(one(p.qy(4)), vec![2, 4]);
        assert!((0..7).all(|i| p.qz(i).is_empty()));
        let v = check_sgv_admissible(&p).unwrap();
        assert_eq!((v.block + 1, v.j + 1, v.k + 1), (5, 2, 4));
    }

    #[test]
    fn sgv_partition_of_toy() {
        let p = partition_sgv(&toy_plan());
        assert_eq!(one(p.qy(4)), vec![4]);
        assert_eq!(one(p.qz(4)), vec![2]);
        assert_eq!(one(p.qy(5)), vec![5]);
        assert_eq!(one(p.qz(5)), vec![3]);
        assert_eq!(one(p.qy(6)), vec![5, 6]);
        assert_eq!(one(p.qy(1)), vec![1]);
        assert!(p.qz(1).is_empty());
        assert!(check_sgv_admissible(&p).is_none());
    }

    #[test]
    fn ar_plan() {
        let s = geom::grid_locations(1, 7, 1.0).unwrap();
        let p = make_ar(&s, 2).unwrap();
        assert_eq!(one(p.qy(4)), vec![3, 4]);
        assert_eq!(one(p.qy(1)), vec![1]);
        let p0 = make_ar(&s, 0).unwrap();
        assert_eq!(p0.max_conditioning(), 0);
    }

    #[test]
    fn mpp_plan() {
        let knots = LocationSet::new(vec![vec![0.1], vec![0.45], vec![0.9]]).unwrap();
        let s = geom::grid_locations(1, 5, 0.25).unwrap();
        let p = make_mpp(&s, &knots).unwrap();
        assert_eq!(p.len(), 6);
        assert!(!p.is_observed(0));
        assert!((1..6).all(|i| p.is_observed(i) && p.qy(i) == [0]));
    }

    #[test]
    fn fsa_plan_shape() {
        let knots = LocationSet::new(vec![vec![0.33, 0.33], vec![0.66, 0.66]]).unwrap();
        let s = geom::grid_locations(2, 4, 1.0 / 3.0).unwrap();
        let p = make_fsa(&s, &knots, 2).unwrap();
        assert_eq!(p.len(), 5);
        assert!((1..5).all(|i| p.q(i) == [0]));
        let p1 = make_fsa(&s, &knots, 1).unwrap();
        assert_eq!(p1.len(), 2);
    }

    #[test]
    fn mra_ancestors() {
        let s = geom::grid_locations(2, 16, 1.0).unwrap();
        let p = make_mra(&s, 4, 2, 4).unwrap();
        assert_eq!(p.len(), 21);
        assert_eq!(one(p.q(5)), vec![1, 2]);
        for i in 1..p.len() {
            let parent = *p.q(i).last().unwrap();
            let mut expect = p.q(parent).to_vec();
            expect.push(parent);
            assert_eq!(p.q(i), &expect[..]);
        }
        assert!(p.max_conditioning() <= 2);
    }

    #[test]
    fn mra_one_level_is_fsa_shaped() {
        let s = geom::grid_locations(1, 20, 1.0).unwrap();
        let p = make_mra(&s, 2, 1, 3).unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(p.block(0).len(), 3);
        assert!((1..3).all(|i| p.q(i) == [0]));
    }

    #[test]
    fn mra_chain_for_binary_split() {
        let s = geom::grid_locations(1, 40, 1.0).unwrap();
        let p = make_mra(&s, 2, 3, 2).unwrap();
        assert_eq!(p.len(), 15);
        assert_eq!(one(p.q(14)), vec![1, 3, 7]);
    }

    #[test]
    fn layout_interleaves() {
        let knots = LocationSet::new(vec![vec![0.1], vec![0.5]]).unwrap();
        let s = geom::grid_locations(1, 2, 1.0).unwrap();
        let lay = make_mpp(&s, &knots).unwrap().layout();
        assert_eq!(lay.n_vertices(), 5);
        assert_eq!(lay.offset, vec![0, 2, 3, 4, 5, 6]);
        assert_eq!(lay.y_scalars(), vec![0, 1, 2, 4]);
        assert_eq!(lay.z_scalars(), vec![3, 5]);
    }

    #[test]
    fn json_is_one_based_and_hash_stable() {
        let p = partition_sgv(&toy_plan());
        let j = p.to_json();
        assert!(j.contains("\"qy\":[[],[1],[1,2],[1,3],[4],[5],[5,6]]"));
        assert_eq!(p.hash(), partition_sgv(&toy_plan()).hash());
        assert_ne!(p.hash(), partition_latent(&toy_plan()).hash());
    }
}
