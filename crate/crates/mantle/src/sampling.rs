//! Quadric-error mesh simplification and the multiscale sampling hierarchy.
//!
//! Spectral encoder/decoder stacks alternate graph convolutions with changes
//! of resolution. Those resolution changes are *linear*: a sparse
//! down-sampling matrix selects the vertices retained by quadric-error-metric
//! (QEM) edge contraction, and a sparse up-sampling matrix writes each
//! discarded vertex as barycentric weights over its closest triangle in the
//! coarser mesh. [`build_sampling_hierarchy`] runs the simplification once
//! per requested factor and packages, per level, the vertex count, the
//! scaled Laplacian for that level's convolutions, and the two transfer
//! matrices.
//!
//! Contractions use *subset placement*: the surviving vertex keeps its
//! original position (whichever endpoint has the lower summed-quadric error,
//! ties to the smaller index). That is what makes every down-sampling row a
//! one-hot selection. Candidate edges are processed cheapest-first with ties
//! broken by the `(min_index, max_index)` vertex pair, so the hierarchy is a
//! pure function of the input mesh.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::io::{BufReader, BufWriter, Read, Write};
use std::mem;
use std::path::Path;
use std::sync::Arc;

use crate::graph::{build_topology, LaplacianMode, MeshError, ScaledLaplacian, TopologyGraph};
use crate::sparse::CsrMatrix;
use crate::tensor::tape::SparsePair;
use crate::tensor::Tensor;

/// One resolution level of a [`SamplingHierarchy`].
///
/// Level 0 is the input mesh; level `k` has roughly `1/rate` the vertices of
/// level `k−1`. `down` maps level `k−1` features to this level and `up` maps
/// them back (both are `None` at level 0).
#[derive(Debug)]
pub struct HierarchyLevel {
    pub vertex_count: usize,
    /// Scaled Laplacian of this level's mesh, for Chebyshev filtering.
    pub laplacian: ScaledLaplacian,
    /// `vertex_count × prev_count` row-selection matrix (one 1 per row).
    pub down: Option<Arc<SparsePair>>,
    /// `prev_count × vertex_count` barycentric matrix (rows are nonnegative
    /// and sum to 1; retained vertices get an identity row).
    pub up: Option<Arc<SparsePair>>,
}

/// QEM coarsening chain: per-level Laplacians plus the linear down-/up-
/// sampling maps between consecutive levels.
#[derive(Debug)]
pub struct SamplingHierarchy {
    pub mode: LaplacianMode,
    /// Per-transition downsample rates, e.g. `[2, 2, 2, 2]`.
    pub factors: Vec<usize>,
    pub levels: Vec<HierarchyLevel>,
}

impl SamplingHierarchy {
    /// Vertex count per level, finest first.
    pub fn counts(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.vertex_count).collect()
    }

    /// The coarsest level.
    pub fn coarsest(&self) -> &HierarchyLevel {
        self.levels.last().expect("hierarchy has at least one level")
    }
}

/// Build a QEM sampling hierarchy over `g` with one coarsening per entry of
/// `factors` (each ≥ 2). `positions` is the `V × 3` rest-pose geometry; all
/// projection distances are measured in it.
///
/// Errors if the mesh has an edge bordering more than two faces, if any
/// level would drop below 4 vertices, or if no contractible edge remains
/// before a level reaches its target count. Construction cost is dominated
/// by the discarded-vertex projections, `O(V_fine · F_coarse)` per level.
pub fn build_sampling_hierarchy(
    g: &TopologyGraph,
    positions: &Tensor,
    factors: &[usize],
    mode: LaplacianMode,
) -> Result<SamplingHierarchy, MeshError> {
    assert!(factors.iter().all(|&r| r >= 2), "downsample factors must be at least 2");
    if positions.rows != g.vertex_count || positions.cols != 3 {
        return Err(MeshError::ShapeMismatch(format!(
            "positions are {}×{} but the mesh has {} vertices",
            positions.rows, positions.cols, g.vertex_count
        )));
    }
    validate_edge_manifold(&g.faces)?;

    let mut levels = vec![HierarchyLevel {
        vertex_count: g.vertex_count,
        laplacian: ScaledLaplacian::build(g, mode)?,
        down: None,
        up: None,
    }];
    let mut cur_positions: Vec<[f64; 3]> =
        (0..positions.rows).map(|v| [positions.at(v, 0), positions.at(v, 1), positions.at(v, 2)]).collect();
    let mut cur_faces = g.faces.clone();

    for &rate in factors {
        let have = cur_positions.len();
        let target = have.div_ceil(rate);
        if have < 4 || target < 4 {
            return Err(MeshError::TooFewVertices { have, target });
        }
        let coarse = simplify(&cur_positions, &cur_faces, target)?;
        let n_coarse = coarse.retained.len();

        let coarse_positions: Vec<[f64; 3]> =
            coarse.retained.iter().map(|&v| cur_positions[v as usize]).collect();
        let coarse_graph = build_topology(&coarse.faces, n_coarse)?;
        validate_edge_manifold(&coarse_graph.faces)?;
        let laplacian = ScaledLaplacian::build(&coarse_graph, mode)?;

        let down_triplets: Vec<(u32, u32, f64)> =
            coarse.retained.iter().enumerate().map(|(c, &f)| (c as u32, f, 1.0)).collect();
        let down = CsrMatrix::from_triplets(n_coarse, have, &down_triplets);
        let up = up_matrix(&cur_positions, &coarse.fine_to_coarse, &coarse_positions, &coarse.faces);

        levels.push(HierarchyLevel {
            vertex_count: n_coarse,
            laplacian,
            down: Some(SparsePair::new(down)),
            up: Some(SparsePair::new(up)),
        });
        cur_positions = coarse_positions;
        cur_faces = coarse.faces;
    }

    Ok(SamplingHierarchy { mode, factors: factors.to_vec(), levels })
}

/// Error if any undirected edge appears in more than two faces.
fn validate_edge_manifold(faces: &[[u32; 3]]) -> Result<(), MeshError> {
    let mut counts: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    for f in faces {
        for (a, b) in face_edges(f) {
            *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
        }
    }
    for ((a, b), count) in counts {
        if count > 2 {
            return Err(MeshError::NonManifoldEdge { a, b, count });
        }
    }
    Ok(())
}

fn face_edges(f: &[u32; 3]) -> [(u32, u32); 3] {
    [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])]
}

/// Symmetric 4×4 error quadric, stored as the upper triangle
/// `[aa ab ac ad bb bc bd cc cd dd]` of `w·(n,d)·(n,d)ᵀ`.
#[derive(Clone, Copy, Default)]
struct Quadric([f64; 10]);

impl Quadric {
    fn from_plane(n: [f64; 3], d: f64, w: f64) -> Self {
        let [a, b, c] = n;
        Quadric([
            w * a * a,
            w * a * b,
            w * a * c,
            w * a * d,
            w * b * b,
            w * b * c,
            w * b * d,
            w * c * c,
            w * c * d,
            w * d * d,
        ])
    }

    fn add(&mut self, o: &Quadric) {
        for (s, v) in self.0.iter_mut().zip(o.0) {
            *s += v;
        }
    }

    /// `(p, 1)ᵀ · Q · (p, 1)` — squared summed distance to the planes.
    fn eval(&self, p: [f64; 3]) -> f64 {
        let [x, y, z] = p;
        let q = &self.0;
        q[0] * x * x
            + q[4] * y * y
            + q[7] * z * z
            + 2.0 * (q[1] * x * y + q[2] * x * z + q[5] * y * z + q[3] * x + q[6] * y + q[8] * z)
            + q[9]
    }
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Candidate edge contraction, ordered cheapest-first then by vertex pair.
/// `stamp_*` snapshot the endpoint generation counters; a popped candidate
/// whose stamps are stale refers to an edge that no longer exists as priced.
struct EdgeCandidate {
    cost: f64,
    a: u32,
    b: u32,
    stamp_a: u32,
    stamp_b: u32,
    /// Contract into `a` (the smaller index) rather than `b`.
    keep_first: bool,
}

impl Ord for EdgeCandidate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // BinaryHeap is a max-heap; invert so the cheapest edge pops first.
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.a.cmp(&self.a))
            .then_with(|| other.b.cmp(&self.b))
            .then_with(|| (other.stamp_a, other.stamp_b).cmp(&(self.stamp_a, self.stamp_b)))
    }
}

impl PartialOrd for EdgeCandidate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for EdgeCandidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == std::cmp::Ordering::Equal
    }
}

impl Eq for EdgeCandidate {}

struct CoarseLevel {
    /// Retained fine-vertex indices, ascending; position `c` is coarse
    /// vertex `c`.
    retained: Vec<u32>,
    /// `u32::MAX` for discarded vertices.
    fine_to_coarse: Vec<u32>,
    /// Surviving faces in coarse indices, original orientation.
    faces: Vec<[u32; 3]>,
}

/// Contract edges cheapest-first until `target` vertices remain.
fn simplify(positions: &[[f64; 3]], faces: &[[u32; 3]], target: usize) -> Result<CoarseLevel, MeshError> {
    let n = positions.len();
    let mut quadrics = vec![Quadric::default(); n];
    let mut neighbors: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); n];
    let mut incident: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut work_faces = faces.to_vec();
    let mut face_alive = vec![true; work_faces.len()];

    // Face plane quadrics, weighted by triangle area; boundary edges (one
    // incident face) additionally get a perpendicular constraint plane so
    // open meshes do not erode from the rim inward.
    let mut edge_info: BTreeMap<(u32, u32), (usize, [f64; 3])> = BTreeMap::new();
    for (fid, f) in work_faces.iter().enumerate() {
        let (p0, p1, p2) = (positions[f[0] as usize], positions[f[1] as usize], positions[f[2] as usize]);
        let raw = cross3(sub3(p1, p0), sub3(p2, p0));
        let len = dot3(raw, raw).sqrt();
        let (normal, area) = if len > 1e-300 {
            ([raw[0] / len, raw[1] / len, raw[2] / len], 0.5 * len)
        } else {
            ([0.0; 3], 0.0)
        };
        if area > 0.0 {
            let q = Quadric::from_plane(normal, -dot3(normal, p0), area);
            for &v in f {
                quadrics[v as usize].add(&q);
            }
        }
        for (a, b) in face_edges(f) {
            neighbors[a as usize].insert(b);
            neighbors[b as usize].insert(a);
            let e = edge_info.entry((a.min(b), a.max(b))).or_insert((0, normal));
            e.0 += 1;
            e.1 = normal;
        }
        for &v in f {
            incident[v as usize].push(fid);
        }
    }
    for (&(a, b), &(count, normal)) in &edge_info {
        if count != 1 {
            continue;
        }
        let (pa, pb) = (positions[a as usize], positions[b as usize]);
        let dir = sub3(pb, pa);
        let raw = cross3(dir, normal);
        let len = dot3(raw, raw).sqrt();
        if len <= 1e-300 {
            continue;
        }
        let np = [raw[0] / len, raw[1] / len, raw[2] / len];
        let q = Quadric::from_plane(np, -dot3(np, pa), dot3(dir, dir));
        quadrics[a as usize].add(&q);
        quadrics[b as usize].add(&q);
    }

    let mut alive = vec![true; n];
    let mut stamps = vec![0u32; n];
    let mut alive_count = n;

    let price = |quadrics: &[Quadric], stamps: &[u32], a: u32, b: u32| -> EdgeCandidate {
        let mut q = quadrics[a as usize];
        q.add(&quadrics[b as usize]);
        let (ca, cb) = (q.eval(positions[a as usize]), q.eval(positions[b as usize]));
        EdgeCandidate {
            cost: ca.min(cb),
            a,
            b,
            stamp_a: stamps[a as usize],
            stamp_b: stamps[b as usize],
            keep_first: ca <= cb,
        }
    };

    let mut heap = BinaryHeap::with_capacity(edge_info.len());
    for &(a, b) in edge_info.keys() {
        heap.push(price(&quadrics, &stamps, a, b));
    }
    drop(edge_info);

    let mut progressed = true;
    while alive_count > target {
        let Some(cand) = heap.pop() else {
            // All candidates were invalidated or skipped. Reprice every
            // remaining edge once; if a full pass contracts nothing, the
            // mesh has no contractible edge left.
            if !progressed {
                return Err(MeshError::SimplificationStalled { at: alive_count, target });
            }
            progressed = false;
            for v in 0..n as u32 {
                if !alive[v as usize] {
                    continue;
                }
                for &nb in neighbors[v as usize].range(v + 1..) {
                    heap.push(price(&quadrics, &stamps, v, nb));
                }
            }
            continue;
        };
        let (a, b) = (cand.a as usize, cand.b as usize);
        if !alive[a] || !alive[b] || stamps[a] != cand.stamp_a || stamps[b] != cand.stamp_b {
            continue;
        }
        // Link condition: the contraction keeps the surface manifold only
        // if the shared neighbours of the endpoints are exactly the apexes
        // of the faces on this edge.
        let shared = neighbors[a].intersection(&neighbors[b]).count();
        let on_edge = incident[a]
            .iter()
            .filter(|&&fid| face_alive[fid] && work_faces[fid].contains(&cand.b))
            .count();
        if on_edge == 0 || on_edge > 2 || shared != on_edge {
            continue;
        }

        let (keep, gone) = if cand.keep_first { (a, b) } else { (b, a) };
        let gq = quadrics[gone];
        quadrics[keep].add(&gq);
        stamps[keep] += 1;
        stamps[gone] += 1;
        alive[gone] = false;
        alive_count -= 1;
        progressed = true;

        for fid in mem::take(&mut incident[gone]) {
            if !face_alive[fid] {
                continue;
            }
            let f = &mut work_faces[fid];
            for v in f.iter_mut() {
                if *v == gone as u32 {
                    *v = keep as u32;
                }
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                face_alive[fid] = false;
            } else {
                incident[keep].push(fid);
            }
        }
        neighbors[keep].remove(&(gone as u32));
        for nb in mem::take(&mut neighbors[gone]) {
            if nb as usize == keep {
                continue;
            }
            neighbors[nb as usize].remove(&(gone as u32));
            neighbors[nb as usize].insert(keep as u32);
            neighbors[keep].insert(nb);
        }
        for &nb in &neighbors[keep] {
            let (lo, hi) = (nb.min(keep as u32), nb.max(keep as u32));
            heap.push(price(&quadrics, &stamps, lo, hi));
        }
    }

    let retained: Vec<u32> = (0..n as u32).filter(|&v| alive[v as usize]).collect();
    let mut fine_to_coarse = vec![u32::MAX; n];
    for (c, &f) in retained.iter().enumerate() {
        fine_to_coarse[f as usize] = c as u32;
    }
    let coarse_faces: Vec<[u32; 3]> = work_faces
        .iter()
        .zip(&face_alive)
        .filter(|(_, &ok)| ok)
        .map(|(f, _)| [fine_to_coarse[f[0] as usize], fine_to_coarse[f[1] as usize], fine_to_coarse[f[2] as usize]])
        .collect();
    Ok(CoarseLevel { retained, fine_to_coarse, faces: coarse_faces })
}

/// Barycentric up-sampling matrix: identity rows for retained vertices,
/// closest-triangle barycentric weights for discarded ones.
fn up_matrix(
    fine_positions: &[[f64; 3]],
    fine_to_coarse: &[u32],
    coarse_positions: &[[f64; 3]],
    coarse_faces: &[[u32; 3]],
) -> CsrMatrix {
    let mut triplets = Vec::with_capacity(fine_positions.len() * 2);
    for (v, &p) in fine_positions.iter().enumerate() {
        let c = fine_to_coarse[v];
        if c != u32::MAX {
            triplets.push((v as u32, c, 1.0));
            continue;
        }
        let mut best = (f64::INFINITY, 0usize, [0.0f64; 3]);
        for (fi, cf) in coarse_faces.iter().enumerate() {
            let (pa, pb, pc) = (
                coarse_positions[cf[0] as usize],
                coarse_positions[cf[1] as usize],
                coarse_positions[cf[2] as usize],
            );
            let bary = closest_point_barycentric(p, pa, pb, pc);
            let point = [
                bary[0] * pa[0] + bary[1] * pb[0] + bary[2] * pc[0],
                bary[0] * pa[1] + bary[1] * pb[1] + bary[2] * pc[1],
                bary[0] * pa[2] + bary[1] * pb[2] + bary[2] * pc[2],
            ];
            let d = sub3(p, point);
            let dist = dot3(d, d);
            if dist < best.0 {
                best = (dist, fi, bary);
            }
        }
        let cf = coarse_faces[best.1];
        // Clamp out any negative rounding dust and renormalise so the row
        // sums to 1 exactly as stored.
        let mut w = best.2.map(|x| x.max(0.0));
        let sum: f64 = w.iter().sum();
        for x in w.iter_mut() {
            *x /= sum;
        }
        for k in 0..3 {
            if w[k] != 0.0 {
                triplets.push((v as u32, cf[k], w[k]));
            }
        }
    }
    CsrMatrix::from_triplets(fine_positions.len(), coarse_positions.len(), &triplets)
}

/// Barycentric coordinates of the point of triangle `(a, b, c)` closest to
/// `p`; the projection is clamped to the triangle, so the weights lie in
/// `[0, 1]` and sum to 1. A degenerate triangle falls back to its nearest
/// vertex.
fn closest_point_barycentric(p: [f64; 3], a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> [f64; 3] {
    let ab = sub3(b, a);
    let ac = sub3(c, a);
    let ap = sub3(p, a);
    let d1 = dot3(ab, ap);
    let d2 = dot3(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return [1.0, 0.0, 0.0];
    }
    let bp = sub3(p, b);
    let d3 = dot3(ab, bp);
    let d4 = dot3(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return [0.0, 1.0, 0.0];
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 && d1 - d3 > 0.0 {
        let v = d1 / (d1 - d3);
        return [1.0 - v, v, 0.0];
    }
    let cp = sub3(p, c);
    let d5 = dot3(ab, cp);
    let d6 = dot3(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return [0.0, 0.0, 1.0];
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 && d2 - d6 > 0.0 {
        let w = d2 / (d2 - d6);
        return [1.0 - w, 0.0, w];
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && d4 - d3 >= 0.0 && d5 - d6 >= 0.0 && (d4 - d3) + (d5 - d6) > 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return [0.0, 1.0 - w, w];
    }
    let denom = va + vb + vc;
    if denom.abs() <= 1e-300 || !denom.is_finite() {
        // Degenerate triangle: nearest vertex.
        let dists = [sub3(p, a), sub3(p, b), sub3(p, c)].map(|d| dot3(d, d));
        let mut best = 0;
        for k in 1..3 {
            if dists[k] < dists[best] {
                best = k;
            }
        }
        let mut w = [0.0; 3];
        w[best] = 1.0;
        return w;
    }
    let v = vb / denom;
    let w = vc / denom;
    [1.0 - v - w, v, w]
}

const HIERARCHY_MAGIC: &[u8; 8] = b"MNTLSMP1";

#[derive(serde::Serialize, serde::Deserialize)]
struct MatrixMeta {
    name: String,
    rows: usize,
    cols: usize,
    nnz: usize,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct HierarchyHeader {
    counts: Vec<usize>,
    factors: Vec<usize>,
    mode: LaplacianMode,
    lambda_max: Vec<f64>,
    matrices: Vec<MatrixMeta>,
}

impl SamplingHierarchy {
    /// Write the hierarchy as a single container: an 8-byte magic, a JSON
    /// header (level counts, factors, normalization mode, per-level λ_max,
    /// matrix directory), then each matrix as little-endian coordinate
    /// triplets `(row: u32, col: u32, value: f64)` in header order.
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut mats: Vec<(String, &CsrMatrix)> = Vec::new();
        for (i, level) in self.levels.iter().enumerate() {
            mats.push((format!("laplacian_{i}"), &level.laplacian.matrix.fwd));
            if let (Some(down), Some(up)) = (&level.down, &level.up) {
                mats.push((format!("down_{i}"), &down.fwd));
                mats.push((format!("up_{i}"), &up.fwd));
            }
        }
        let header = HierarchyHeader {
            counts: self.counts(),
            factors: self.factors.clone(),
            mode: self.mode,
            lambda_max: self.levels.iter().map(|l| l.laplacian.lambda_max).collect(),
            matrices: mats
                .iter()
                .map(|(name, m)| MatrixMeta { name: name.clone(), rows: m.rows, cols: m.cols, nnz: m.nnz() })
                .collect(),
        };
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        crate::io::write_container_header(&mut w, HIERARCHY_MAGIC, &header)?;
        for (_, m) in &mats {
            for (r, c, v) in m.to_triplets() {
                w.write_all(&r.to_le_bytes())?;
                w.write_all(&c.to_le_bytes())?;
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    }

    /// Read a hierarchy written by [`SamplingHierarchy::save`]. The stored
    /// matrices are used verbatim — nothing is re-estimated — so a loaded
    /// hierarchy reproduces the builder's arithmetic bit for bit.
    pub fn load(path: &Path) -> std::io::Result<SamplingHierarchy> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let header: HierarchyHeader = crate::io::read_container_header(&mut r, HIERARCHY_MAGIC)?;
        let n_levels = header.counts.len();
        if header.lambda_max.len() != n_levels
            || header.factors.len() + 1 != n_levels
            || header.matrices.len() != 3 * n_levels - 2
        {
            return Err(crate::io::bad_data("inconsistent hierarchy header"));
        }

        let mut read_matrix = |meta: &MatrixMeta| -> std::io::Result<CsrMatrix> {
            let mut triplets = Vec::with_capacity(meta.nnz);
            let mut buf = [0u8; 16];
            for _ in 0..meta.nnz {
                r.read_exact(&mut buf)?;
                let row = u32::from_le_bytes(buf[0..4].try_into().unwrap());
                let col = u32::from_le_bytes(buf[4..8].try_into().unwrap());
                let val = f64::from_le_bytes(buf[8..16].try_into().unwrap());
                if row as usize >= meta.rows || col as usize >= meta.cols {
                    return Err(crate::io::bad_data(format!("triplet ({row}, {col}) outside {} ({}×{})", meta.name, meta.rows, meta.cols)));
                }
                triplets.push((row, col, val));
            }
            Ok(CsrMatrix::from_triplets(meta.rows, meta.cols, &triplets))
        };

        let mut levels = Vec::with_capacity(n_levels);
        let mut mi = 0usize;
        for (i, &count) in header.counts.iter().enumerate() {
            let expect = |meta: &MatrixMeta, name: String, rows: usize, cols: usize| -> std::io::Result<()> {
                if meta.name != name || meta.rows != rows || meta.cols != cols {
                    return Err(crate::io::bad_data(format!(
                        "expected {name} ({rows}×{cols}), found {} ({}×{})",
                        meta.name, meta.rows, meta.cols
                    )));
                }
                Ok(())
            };
            expect(&header.matrices[mi], format!("laplacian_{i}"), count, count)?;
            let lap = read_matrix(&header.matrices[mi])?;
            mi += 1;
            let laplacian = ScaledLaplacian::from_scaled(header.mode, header.lambda_max[i], lap);
            let (down, up) = if i == 0 {
                (None, None)
            } else {
                let prev = header.counts[i - 1];
                expect(&header.matrices[mi], format!("down_{i}"), count, prev)?;
                let down = read_matrix(&header.matrices[mi])?;
                mi += 1;
                expect(&header.matrices[mi], format!("up_{i}"), prev, count)?;
                let up = read_matrix(&header.matrices[mi])?;
                mi += 1;
                (Some(SparsePair::new(down)), Some(SparsePair::new(up)))
            };
            levels.push(HierarchyLevel { vertex_count: count, laplacian, down, up });
        }
        Ok(SamplingHierarchy { mode: header.mode, factors: header.factors, levels })
    }
}
