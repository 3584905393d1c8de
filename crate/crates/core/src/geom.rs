//! Locations, lattices, tilings and the two point orderings (coordinate and
//! exact greedy maxmin).
//!
//! All indices in this module are 0-based. Serialized forms (JSON orderings
//! and groupings) use 1-based indices.

use std::cmp::Ordering as CmpOrdering;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Upper bound on the number of points `grid_locations` will generate.
pub const MAX_GRID_POINTS: usize = 1 << 22;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("location set is empty")]
    Empty,
    #[error("dimension must be at least 1")]
    ZeroDimension,
    #[error("point {index} has dimension {found}, expected {expected}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("point {index} has a non-finite coordinate")]
    NonFinite { index: usize },
    #[error("points {first} and {second} are identical")]
    Duplicate { first: usize, second: usize },
    #[error("grid of {requested} points exceeds the maximum of {max}")]
    TooLarge { requested: u128, max: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed location CSV at line {line}: {reason}")]
    Csv { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A set of distinct points in `R^d`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LocationSet {
    dim: usize,
    coords: Vec<f64>,
}

impl LocationSet {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self, GeomError> {
        let first = points.first().ok_or(GeomError::Empty)?;
        let dim = first.len();
        if dim == 0 {
            return Err(GeomError::ZeroDimension);
        }
        let mut coords = Vec::with_capacity(points.len() * dim);
        for (index, p) in points.iter().enumerate() {
            if p.len() != dim {
                return Err(GeomError::DimensionMismatch {
                    index,
                    expected: dim,
                    found: p.len(),
                });
            }
            coords.extend_from_slice(p);
        }
        Self::from_flat(dim, coords)
    }

    /// Builds a set from row-major coordinates.
    pub fn from_flat(dim: usize, coords: Vec<f64>) -> Result<Self, GeomError> {
        if dim == 0 {
            return Err(GeomError::ZeroDimension);
        }
        if coords.is_empty() {
            return Err(GeomError::Empty);
        }
        if coords.len() % dim != 0 {
            return Err(GeomError::InvalidArgument(format!(
                "{} coordinates do not split into points of dimension {dim}",
                coords.len()
            )));
        }
        if let Some(pos) = coords.iter().position(|c| !c.is_finite()) {
            return Err(GeomError::NonFinite { index: pos / dim });
        }
        let set = LocationSet { dim, coords };
        set.check_distinct()?;
        Ok(set)
    }

    fn check_distinct(&self) -> Result<(), GeomError> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| lex_cmp(self.point(a), self.point(b)).then(a.cmp(&b)));
        for w in idx.windows(2) {
            if self.point(w[0]) == self.point(w[1]) {
                let (first, second) = (w[0].min(w[1]), w[0].max(w[1]));
                return Err(GeomError::Duplicate { first, second });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks_exact(self.dim)
    }

    pub fn dist(&self, i: usize, j: usize) -> f64 {
        euclidean(self.point(i), self.point(j))
    }

    /// Points at the given indices, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<LocationSet, GeomError> {
        let mut coords = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            coords.extend_from_slice(self.point(i));
        }
        LocationSet::from_flat(self.dim, coords)
    }

    /// Concatenation of two sets; fails if the union has duplicates.
    pub fn concat(&self, other: &LocationSet) -> Result<LocationSet, GeomError> {
        if self.dim != other.dim {
            return Err(GeomError::DimensionMismatch {
                index: self.len(),
                expected: self.dim,
                found: other.dim,
            });
        }
        let mut coords = self.coords.clone();
        coords.extend_from_slice(&other.coords);
        LocationSet::from_flat(self.dim, coords)
    }

    pub fn centroid_of(&self, indices: &[usize]) -> Vec<f64> {
        let mut c = vec![0.0; self.dim];
        for &i in indices {
            for (ck, pk) in c.iter_mut().zip(self.point(i)) {
                *ck += pk;
            }
        }
        let n = indices.len().max(1) as f64;
        c.iter_mut().for_each(|v| *v /= n);
        c
    }

    /// Per-dimension (min, max).
    pub fn bounding_box(&self) -> Vec<(f64, f64)> {
        let mut bb = vec![(f64::INFINITY, f64::NEG_INFINITY); self.dim];
        for p in self.points() {
            for (b, &v) in bb.iter_mut().zip(p) {
                b.0 = b.0.min(v);
                b.1 = b.1.max(v);
            }
        }
        bb
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<(), GeomError> {
        writeln!(out, "{}", coordinate_header(self.dim))?;
        for p in self.points() {
            let row: Vec<String> = p.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Reads a CSV with header `x1,...,xd`; extra columns are rejected.
    pub fn read_csv<R: BufRead>(input: R) -> Result<LocationSet, GeomError> {
        let mut lines = input.lines();
        let header = lines.next().ok_or(GeomError::Empty)??;
        let dim = header.split(',').count();
        if header.trim() != coordinate_header(dim) {
            return Err(GeomError::Csv {
                line: 1,
                reason: format!("expected header {:?}", coordinate_header(dim)),
            });
        }
        let mut coords = Vec::new();
        for (k, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != dim {
                return Err(GeomError::Csv {
                    line: k + 2,
                    reason: format!("expected {dim} fields, found {}", fields.len()),
                });
            }
            for f in fields {
                let v: f64 = f.trim().parse().map_err(|_| GeomError::Csv {
                    line: k + 2,
                    reason: format!("not a number: {f:?}"),
                })?;
                coords.push(v);
            }
        }
        LocationSet::from_flat(dim, coords)
    }
}

pub fn coordinate_header(dim: usize) -> String {
    let mut s = String::new();
    for k in 1..=dim {
        if k > 1 {
            s.push(',');
        }
        let _ = write!(s, "x{k}");
    }
    s
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn lex_cmp(a: &[f64], b: &[f64]) -> CmpOrdering {
    for (x, y) in a.iter().zip(b) {
        match x.partial_cmp(y).unwrap_or(CmpOrdering::Equal) {
            CmpOrdering::Equal => continue,
            o => return o,
        }
    }
    CmpOrdering::Equal
}

/// A permutation: `perm[k]` is the original index placed at position `k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ordering {
    perm: Vec<usize>,
}

impl Ordering {
    pub fn new(perm: Vec<usize>) -> Result<Self, GeomError> {
        let mut seen = vec![false; perm.len()];
        for &p in &perm {
            if p >= perm.len() || seen[p] {
                return Err(GeomError::InvalidArgument(format!(
                    "{p} breaks the permutation of 0..{}",
                    perm.len()
                )));
            }
            seen[p] = true;
        }
        Ok(Ordering { perm })
    }

    pub fn identity(n: usize) -> Self {
        Ordering {
            perm: (0..n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.perm
    }

    /// Original index at ordered position `pos`.
    pub fn at(&self, pos: usize) -> usize {
        self.perm[pos]
    }

    /// `inverse()[orig]` is the position of original index `orig`.
    pub fn inverse(&self) -> Ordering {
        let mut inv = vec![0; self.perm.len()];
        for (pos, &orig) in self.perm.iter().enumerate() {
            inv[orig] = pos;
        }
        Ordering { perm: inv }
    }

    pub fn is_identity(&self) -> bool {
        self.perm.iter().enumerate().all(|(k, &p)| k == p)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&one_based(&self.perm)).expect("serializing integers")
    }

    pub fn from_json(s: &str) -> Result<Self, GeomError> {
        let v: Vec<usize> =
            serde_json::from_str(s).map_err(|e| GeomError::InvalidArgument(e.to_string()))?;
        Ordering::new(zero_based(&v)?)
    }
}

pub(crate) fn one_based(v: &[usize]) -> Vec<usize> {
    v.iter().map(|i| i + 1).collect()
}

pub(crate) fn zero_based(v: &[usize]) -> Result<Vec<usize>, GeomError> {
    v.iter()
        .map(|&i| {
            i.checked_sub(1)
                .ok_or_else(|| GeomError::InvalidArgument("indices are 1-based".into()))
        })
        .collect()
}

/// A partition of point indices into nonempty blocks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grouping {
    blocks: Vec<Vec<usize>>,
}

impl Grouping {
    /// Validates that `blocks` partitions `0..n`.
    pub fn new(blocks: Vec<Vec<usize>>, n: usize) -> Result<Self, GeomError> {
        let mut seen = vec![false; n];
        for b in &blocks {
            if b.is_empty() {
                return Err(GeomError::InvalidArgument("empty block".into()));
            }
            for &i in b {
                if i >= n || seen[i] {
                    return Err(GeomError::InvalidArgument(format!(
                        "index {i} is out of range or appears twice"
                    )));
                }
                seen[i] = true;
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(GeomError::InvalidArgument(format!(
                "index {missing} is not covered"
            )));
        }
        Ok(Grouping { blocks })
    }

    pub fn singletons(order: &Ordering) -> Self {
        Grouping {
            blocks: order.as_slice().iter().map(|&i| vec![i]).collect(),
        }
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn into_blocks(self) -> Vec<Vec<usize>> {
        self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(Vec::len).collect()
    }

    pub fn to_json(&self) -> String {
        let b: Vec<Vec<usize>> = self.blocks.iter().map(|b| one_based(b)).collect();
        serde_json::to_string(&b).expect("serializing integers")
    }
}

/// Regular lattice with `points_per_side^d` points; lexicographic order with
/// the first coordinate varying slowest.
pub fn grid_locations(
    dim: usize,
    points_per_side: usize,
    spacing: f64,
) -> Result<LocationSet, GeomError> {
    if dim == 0 {
        return Err(GeomError::ZeroDimension);
    }
    if points_per_side == 0 {
        return Err(GeomError::InvalidArgument("points_per_side must be >= 1".into()));
    }
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(GeomError::InvalidArgument("spacing must be positive".into()));
    }
    let requested = (points_per_side as u128).checked_pow(dim as u32).unwrap_or(u128::MAX);
    if requested > MAX_GRID_POINTS as u128 {
        return Err(GeomError::TooLarge {
            requested,
            max: MAX_GRID_POINTS,
        });
    }
    let n = requested as usize;
    let mut coords = Vec::with_capacity(n * dim);
    let mut digits = vec![0usize; dim];
    for _ in 0..n {
        coords.extend(digits.iter().map(|&k| k as f64 * spacing));
        for d in (0..dim).rev() {
            digits[d] += 1;
            if digits[d] < points_per_side {
                break;
            }
            digits[d] = 0;
        }
    }
    Ok(LocationSet { dim, coords })
}

/// Sort by coordinate 1, then 2, ..., then original index.
pub fn coord_order(s: &LocationSet) -> Ordering {
    let mut perm: Vec<usize> = (0..s.len()).collect();
    perm.sort_by(|&a, &b| lex_cmp(s.point(a), s.point(b)).then(a.cmp(&b)));
    Ordering { perm }
}

/// Exact greedy maxmin ordering seeded at the point nearest the centroid.
///
/// Each subsequent point maximizes its distance to the nearest already-ordered
/// point. Ties go to the smallest original index. O(n^2).
pub fn maxmin_order(s: &LocationSet) -> Ordering {
    let n = s.len();
    let all: Vec<usize> = (0..n).collect();
    let centroid = s.centroid_of(&all);
    let mut seed = 0;
    let mut best = f64::INFINITY;
    for i in 0..n {
        let d = euclidean(s.point(i), &centroid);
        if d < best {
            best = d;
            seed = i;
        }
    }
    let mut perm = Vec::with_capacity(n);
    let mut picked = vec![false; n];
    let mut min_dist = vec![f64::INFINITY; n];
    let mut current = seed;
    for _ in 0..n {
        perm.push(current);
        picked[current] = true;
        let pc = s.point(current);
        let mut next = usize::MAX;
        let mut next_d = f64::NEG_INFINITY;
        for j in 0..n {
            if picked[j] {
                continue;
            }
            let d = euclidean(pc, s.point(j));
            if d < min_dist[j] {
                min_dist[j] = d;
            }
            if min_dist[j] > next_d {
                next_d = min_dist[j];
                next = j;
            }
        }
        if next == usize::MAX {
            break;
        }
        current = next;
    }
    Ordering { perm }
}

/// One axis-aligned tile of the bounding box with its member points, listed
/// in ordering position.
#[derive(Clone, Debug)]
pub struct Tile {
    /// Per-dimension tile coordinate in `0..tiles_per_side`.
    pub index: Vec<usize>,
    pub members: Vec<usize>,
}

/// Nonempty tiles in lexicographic tile order.
///
/// Points on a tile boundary go to the lower tile.
pub fn tiles(s: &LocationSet, order: &Ordering, tiles_per_side: usize) -> Vec<Tile> {
    let bb = s.bounding_box();
    tiles_in_box(s, order.as_slice(), &bb, tiles_per_side)
}

pub(crate) fn tiles_in_box(
    s: &LocationSet,
    members: &[usize],
    bb: &[(f64, f64)],
    tiles_per_side: usize,
) -> Vec<Tile> {
    let tps = tiles_per_side.max(1);
    let mut buckets: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for &i in members {
        let p = s.point(i);
        let mut flat = 0;
        for (d, &(lo, hi)) in bb.iter().enumerate() {
            flat = flat * tps + axis_tile(p[d], lo, hi, tps);
        }
        buckets.entry(flat).or_default().push(i);
    }
    buckets
        .into_iter()
        .map(|(flat, members)| {
            let mut index = vec![0; bb.len()];
            let mut rest = flat;
            for d in (0..bb.len()).rev() {
                index[d] = rest % tps;
                rest /= tps;
            }
            Tile { index, members }
        })
        .collect()
}

pub(crate) fn axis_tile(v: f64, lo: f64, hi: f64, tps: usize) -> usize {
    let width = (hi - lo) / tps as f64;
    if width <= 0.0 {
        return 0;
    }
    let t = (v - lo) / width;
    let k = (t - 1e-9).ceil() - 1.0;
    (k.max(0.0) as usize).min(tps - 1)
}

/// Tiles of the bounding box as blocks; empty tiles are dropped.
pub fn block_partition(s: &LocationSet, order: &Ordering, blocks_per_side: usize) -> Grouping {
    Grouping {
        blocks: tiles(s, order, blocks_per_side)
            .into_iter()
            .map(|t| t.members)
            .collect(),
    }
}

/// The `min(m, i)` positions before `i` whose points are closest to the point
/// at position `i`, ascending by position. Positions refer to `order`.
pub fn nearest_previous(s: &LocationSet, order: &Ordering, i: usize, m: usize) -> Vec<usize> {
    let target = s.point(order.at(i));
    nearest_among(i, m, |pos| euclidean(target, s.point(order.at(pos))))
}

/// Generic helper: the `m` smallest of `dist(0..i)`, ties by position.
pub(crate) fn nearest_among<F: Fn(usize) -> f64>(i: usize, m: usize, dist: F) -> Vec<usize> {
    let k = m.min(i);
    if k == 0 {
        return Vec::new();
    }
    let mut cand: Vec<(f64, usize)> = (0..i).map(|p| (dist(p), p)).collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| {
        a.0.partial_cmp(&b.0).unwrap_or(CmpOrdering::Equal).then(a.1.cmp(&b.1))
    };
    if k < cand.len() {
        cand.select_nth_unstable_by(k - 1, cmp);
        cand.truncate(k);
    }
    let mut out: Vec<usize> = cand.into_iter().map(|(_, p)| p).collect();
    out.sort_unstable();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(points: &[&[f64]]) -> LocationSet {
        LocationSet::new(points.iter().map(|p| p.to_vec()).collect()).unwrap()
    }

    #[test]
    fn grid_1d() {
        let g = grid_locations(1, 3, 0.5).unwrap();
        assert_eq!(g, set(&[&[0.0], &[0.5], &[1.0]]));
    }

    #[test]
    fn grid_2x2() {
        let g = grid_locations(2, 2, 1.0).unwrap();
        assert_eq!(g, set(&[&[0.0, 0.0], &[0.0, 1.0], &[1.0, 0.0], &[1.0, 1.0]]));
    }

    #[test]
    fn grid_30x30_matches_nested_loops() {
        let g = grid_locations(2, 30, 1.0).unwrap();
        assert_eq!(g.len(), 900);
        let mut k = 0;
        for a in 0..30 {
            for b in 0..30 {
                assert_eq!(g.point(k), &[a as f64, b as f64]);
                k += 1;
            }
        }
    }

    #[test]
    fn grid_rejects_oversize() {
        assert!(matches!(
            grid_locations(3, 1 << 10, 1.0),
            Err(GeomError::TooLarge { .. })
        ));
    }

    #[test]
    fn duplicates_rejected() {
        let r = LocationSet::new(vec![vec![0.0, 1.0], vec![2.0, 0.0], vec![0.0, 1.0]]);
        assert!(matches!(r, Err(GeomError::Duplicate { first: 0, second: 2 })));
    }

    #[test]
    fn coord_order_three_scalars() {
        let s = set(&[&[0.3], &[0.1], &[0.2]]);
        assert_eq!(coord_order(&s).as_slice(), &[1, 2, 0]);
    }

    #[test]
    fn coord_order_sorted_grid_is_identity() {
        let g = grid_locations(1, 17, 0.1).unwrap();
        assert!(coord_order(&g).is_identity());
        let g2 = grid_locations(2, 6, 0.1).unwrap();
        assert!(coord_order(&g2).is_identity());
    }

    #[test]
    fn maxmin_single_point() {
        let s = set(&[&[0.4, 0.2]]);
        assert!(maxmin_order(&s).is_identity());
    }

    #[test]
    fn maxmin_square_center_first() {
        let s = set(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0], &[0.5, 0.5]]);
        let o = maxmin_order(&s);
        assert_eq!(o.at(0), 4);
        let mut rest: Vec<usize> = o.as_slice()[1..].to_vec();
        rest.sort_unstable();
        assert_eq!(rest, vec![0, 1, 2, 3]);
    }

    #[test]
    fn block_partition_examples() {
        let g = grid_locations(2, 2, 1.0).unwrap();
        let o = coord_order(&g);
        assert_eq!(block_partition(&g, &o, 2).len(), 4);
        let one = block_partition(&g, &o, 1);
        assert_eq!(one.blocks(), &[vec![0, 1, 2, 3]]);
    }

    #[test]
    fn nearest_previous_line() {
        let g = grid_locations(1, 10, 1.0).unwrap();
        let o = coord_order(&g);
        assert!(nearest_previous(&g, &o, 0, 5).is_empty());
        // position 4 is the 5th point
        assert_eq!(nearest_previous(&g, &o, 4, 2), vec![2, 3]);
    }

    #[test]
    fn ordering_json_is_one_based() {
        let o = Ordering::new(vec![2, 0, 1]).unwrap();
        assert_eq!(o.to_json(), "[3,1,2]");
        assert_eq!(Ordering::from_json("[3,1,2]").unwrap(), o);
    }

    #[test]
    fn csv_round_trip() {
        let g = grid_locations(2, 3, 0.25).unwrap();
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        assert!(buf.starts_with(b"x1,x2\n"));
        let back = LocationSet::read_csv(&buf[..]).unwrap();
        assert_eq!(back, g);
    }
}
