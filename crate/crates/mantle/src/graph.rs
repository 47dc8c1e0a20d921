//! Triangle-mesh topology and graph Laplacians.
//!
//! A [`TopologyGraph`] is the connectivity of a triangle mesh: vertices,
//! unique undirected edges, faces, and adjacency lists. Spectral layers act
//! on its *scaled* Laplacian `L̃`, whose eigenvalues lie in `[−1, 1]` so
//! that Chebyshev polynomial filters are well behaved:
//!
//! * symmetric-normalized mode (default): `L_sym = I − D^{−1/2}·A·D^{−1/2}`
//!   has spectrum in `[0, 2]`, so `λ_max := 2` needs no estimation and
//!   `L̃ = L_sym − I = −D^{−1/2}·A·D^{−1/2}`;
//! * combinatorial mode: `L = D − A`, with `λ_max` estimated by power
//!   iteration and `L̃ = (2/λ_max)·L − I`.

use std::sync::Arc;

use thiserror::Error;

use crate::sparse::CsrMatrix;
use crate::tensor::tape::SparsePair;
use crate::tensor::{dgemm, Layout, Tensor};

/// Errors from topology construction and Laplacian assembly.
#[derive(Debug, Error)]
pub enum MeshError {
    #[error("face {face} references vertex {vertex} but the mesh has {vertex_count} vertices")]
    VertexOutOfRange { face: usize, vertex: u32, vertex_count: usize },
    #[error("face {face} is degenerate (repeated vertex)")]
    DegenerateFace { face: usize },
    #[error("graph is disconnected: vertex {vertex} lies in a component of {size} vertices")]
    Disconnected { vertex: u32, size: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("edge ({a}, {b}) borders {count} faces; at most 2 allowed for a manifold mesh")]
    NonManifoldEdge { a: u32, b: u32, count: usize },
    #[error("cannot simplify below 4 vertices (have {have}, target {target})")]
    TooFewVertices { have: usize, target: usize },
    #[error("simplification stalled at {at} vertices (target {target}): no contractible edge left")]
    SimplificationStalled { at: usize, target: usize },
}

/// Connectivity of a triangle mesh.
#[derive(Clone, Debug)]
pub struct TopologyGraph {
    pub vertex_count: usize,
    pub faces: Vec<[u32; 3]>,
    /// Unique undirected edges as (min, max) pairs, sorted.
    pub edges: Vec<(u32, u32)>,
    /// Sorted neighbor lists per vertex.
    pub adjacency: Vec<Vec<u32>>,
}

/// Build topology from a face list; validates indices and degeneracy.
pub fn build_topology(faces: &[[u32; 3]], vertex_count: usize) -> Result<TopologyGraph, MeshError> {
    let mut adjacency: Vec<Vec<u32>> = vec![Vec::new(); vertex_count];
    for (fi, f) in faces.iter().enumerate() {
        if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
            return Err(MeshError::DegenerateFace { face: fi });
        }
        for &v in f {
            if v as usize >= vertex_count {
                return Err(MeshError::VertexOutOfRange { face: fi, vertex: v, vertex_count });
            }
        }
        for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[0], f[2])] {
            adjacency[a as usize].push(b);
            adjacency[b as usize].push(a);
        }
    }
    let mut edges = Vec::new();
    for (v, list) in adjacency.iter_mut().enumerate() {
        list.sort_unstable();
        list.dedup();
        for &n in list.iter() {
            if (v as u32) < n {
                edges.push((v as u32, n));
            }
        }
    }
    edges.sort_unstable();
    Ok(TopologyGraph { vertex_count, faces: faces.to_vec(), edges, adjacency })
}

impl TopologyGraph {
    /// Number of unique undirected edges.
    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Vertex degree.
    pub fn degree(&self, v: usize) -> usize {
        self.adjacency[v].len()
    }

    /// Error if the graph is not a single connected component; names a
    /// vertex from the smallest component for diagnosis.
    pub fn require_connected(&self) -> Result<(), MeshError> {
        if self.vertex_count == 0 {
            return Ok(());
        }
        let mut component = vec![u32::MAX; self.vertex_count];
        let mut sizes = Vec::new();
        for start in 0..self.vertex_count {
            if component[start] != u32::MAX {
                continue;
            }
            let id = sizes.len() as u32;
            let mut stack = vec![start as u32];
            component[start] = id;
            let mut size = 0usize;
            while let Some(v) = stack.pop() {
                size += 1;
                for &n in &self.adjacency[v as usize] {
                    if component[n as usize] == u32::MAX {
                        component[n as usize] = id;
                        stack.push(n);
                    }
                }
            }
            sizes.push(size);
        }
        if sizes.len() <= 1 {
            return Ok(());
        }
        let smallest = (0..sizes.len()).min_by_key(|&i| (sizes[i], i)).unwrap() as u32;
        let vertex = component.iter().position(|&c| c == smallest).unwrap() as u32;
        Err(MeshError::Disconnected { vertex, size: sizes[smallest as usize] })
    }
}

/// Which Laplacian the scaled operator is built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum LaplacianMode {
    /// `I − D^{−1/2}·A·D^{−1/2}`, `λ_max := 2`.
    SymmetricNormalized,
    /// `D − A`, `λ_max` from power iteration.
    Combinatorial,
}

/// Combinatorial graph Laplacian `L = D − A` of a connected topology.
pub fn combinatorial_laplacian(g: &TopologyGraph) -> Result<CsrMatrix, MeshError> {
    g.require_connected()?;
    let mut triplets = Vec::with_capacity(g.vertex_count + 2 * g.edge_count());
    for v in 0..g.vertex_count {
        triplets.push((v as u32, v as u32, g.degree(v) as f64));
        for &n in &g.adjacency[v] {
            triplets.push((v as u32, n, -1.0));
        }
    }
    Ok(CsrMatrix::from_triplets(g.vertex_count, g.vertex_count, &triplets))
}

/// Symmetric-normalized Laplacian `I − D^{−1/2}·A·D^{−1/2}`.
pub fn normalized_laplacian(g: &TopologyGraph) -> Result<CsrMatrix, MeshError> {
    g.require_connected()?;
    let mut triplets = Vec::with_capacity(g.vertex_count + 2 * g.edge_count());
    for v in 0..g.vertex_count {
        triplets.push((v as u32, v as u32, 1.0));
        let dv = g.degree(v) as f64;
        for &n in &g.adjacency[v] {
            let dn = g.degree(n as usize) as f64;
            triplets.push((v as u32, n, -1.0 / (dv * dn).sqrt()));
        }
    }
    Ok(CsrMatrix::from_triplets(g.vertex_count, g.vertex_count, &triplets))
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
///
/// Converges to relative tolerance `tol` on the Rayleigh quotient; the
/// start vector is a fixed deterministic perturbation of all-ones so runs
/// are reproducible.
pub fn lambda_max(l: &CsrMatrix, tol: f64) -> f64 {
    assert_eq!(l.rows, l.cols);
    let n = l.rows;
    let mut v: Vec<f64> = (0..n)
        .map(|i| 1.0 + 1e-4 * ((i as u64).wrapping_mul(2654435761) % 1009) as f64)
        .collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    let mut w = vec![0.0; n];
    let mut lambda_prev = 0.0;
    for _ in 0..20_000 {
        l.mul_blocks(&v, 1, 1, &mut w);
        let lambda: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        let wn = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if wn == 0.0 {
            return 0.0;
        }
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / wn;
        }
        if (lambda - lambda_prev).abs() <= tol * lambda.abs().max(1.0) {
            return lambda;
        }
        lambda_prev = lambda;
    }
    lambda_prev
}

/// A Laplacian rescaled to spectrum `[−1, 1]`, ready for Chebyshev filters.
#[derive(Clone, Debug)]
pub struct ScaledLaplacian {
    pub mode: LaplacianMode,
    pub lambda_max: f64,
    /// `L̃` with its transpose, shared with tape ops.
    pub matrix: Arc<SparsePair>,
}

impl ScaledLaplacian {
    /// Build `L̃ = (2/λ_max)·L − I` for the requested mode.
    pub fn build(g: &TopologyGraph, mode: LaplacianMode) -> Result<Self, MeshError> {
        let (l, lam) = match mode {
            LaplacianMode::SymmetricNormalized => (normalized_laplacian(g)?, 2.0),
            LaplacianMode::Combinatorial => {
                let l = combinatorial_laplacian(g)?;
                let lam = lambda_max(&l, 1e-6);
                (l, lam)
            }
        };
        Ok(ScaledLaplacian::from_parts(l, mode, lam))
    }

    /// Assemble from an explicit Laplacian and its λ_max (deserialization,
    /// tests with hand-built graphs).
    pub fn from_parts(l: CsrMatrix, mode: LaplacianMode, lambda_max: f64) -> Self {
        let mut triplets = l.to_triplets();
        let scale = 2.0 / lambda_max;
        for t in triplets.iter_mut() {
            t.2 *= scale;
        }
        let n = l.rows;
        for v in 0..n as u32 {
            triplets.push((v, v, -1.0));
        }
        let scaled = CsrMatrix::from_triplets(n, n, &triplets);
        ScaledLaplacian { mode, lambda_max, matrix: SparsePair::new(scaled) }
    }

    /// Wrap a matrix that is *already* scaled to `[−1, 1]` (deserialization
    /// path: the stored operator is reused verbatim, nothing is recomputed).
    pub fn from_scaled(mode: LaplacianMode, lambda_max: f64, scaled: CsrMatrix) -> Self {
        ScaledLaplacian { mode, lambda_max, matrix: SparsePair::new(scaled) }
    }

    /// Vertex count the operator acts on.
    pub fn vertex_count(&self) -> usize {
        self.matrix.fwd.rows
    }
}

/// Chebyshev spectral filter: `Y = Σ_{j=0}^{K} T_j(L̃)·X·W_j`.
///
/// `x` is `V × F_in`; `w` stacks the per-order weights vertically as a
/// `((K+1)·F_in) × F_out` matrix. This is the value-level (non-autodiff)
/// entry point; the training path uses the tape op with the same math.
pub fn chebyshev_apply(lap: &ScaledLaplacian, x: &Tensor, w: &Tensor, k: usize) -> Result<Tensor, MeshError> {
    let v = lap.vertex_count();
    if x.rows != v {
        return Err(MeshError::ShapeMismatch(format!(
            "input has {} rows but the Laplacian acts on {v} vertices",
            x.rows
        )));
    }
    if w.rows != (k + 1) * x.cols {
        return Err(MeshError::ShapeMismatch(format!(
            "stacked weights have {} rows, expected (K+1)·F_in = {}",
            w.rows,
            (k + 1) * x.cols
        )));
    }
    let mut basis = Tensor::zeros(v, (k + 1) * x.cols);
    lap.matrix.fwd.chebyshev_basis_into(&x.data, x.cols, 1, k, &mut basis);
    let mut out = Tensor::zeros(v, w.cols);
    dgemm(1.0, &basis, Layout::Normal, w, Layout::Normal, &mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path3() -> TopologyGraph {
        // 0–1–2 as a bare chain; build adjacency by hand since a path has
        // no faces.
        TopologyGraph {
            vertex_count: 3,
            faces: vec![],
            edges: vec![(0, 1), (1, 2)],
            adjacency: vec![vec![1], vec![0, 2], vec![1]],
        }
    }

    #[test]
    fn single_triangle_counts() {
        let g = build_topology(&[[0, 1, 2]], 3).unwrap();
        assert_eq!(g.edge_count(), 3);
        assert_eq!((g.degree(0), g.degree(1), g.degree(2)), (2, 2, 2));
    }

    #[test]
    fn two_triangle_strip_counts() {
        let g = build_topology(&[[0, 1, 2], [1, 2, 3]], 4).unwrap();
        assert_eq!(g.edge_count(), 5);
        assert_eq!((g.degree(0), g.degree(1), g.degree(2), g.degree(3)), (2, 3, 3, 2));
    }

    #[test]
    fn degenerate_and_out_of_range_faces_error() {
        assert!(matches!(
            build_topology(&[[0, 0, 1]], 3),
            Err(MeshError::DegenerateFace { face: 0 })
        ));
        assert!(matches!(
            build_topology(&[[0, 1, 7]], 3),
            Err(MeshError::VertexOutOfRange { face: 0, vertex: 7, .. })
        ));
    }

    #[test]
    fn path_laplacian_matrix() {
        let l = combinatorial_laplacian(&path3()).unwrap().to_dense();
        let want = [1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0];
        for (a, b) in l.data.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn triangle_laplacian_diagonal() {
        let g = build_topology(&[[0, 1, 2]], 3).unwrap();
        let l = combinatorial_laplacian(&g).unwrap().to_dense();
        for i in 0..3 {
            assert_eq!(l.at(i, i), 2.0);
        }
    }

    #[test]
    fn combinatorial_row_sums_are_zero() {
        let g = build_topology(&[[0, 1, 2], [1, 2, 3], [2, 3, 4]], 5).unwrap();
        let l = combinatorial_laplacian(&g).unwrap().to_dense();
        for r in 0..5 {
            let s: f64 = l.row(r).iter().sum();
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn path_lambda_max_is_three() {
        let l = combinatorial_laplacian(&path3()).unwrap();
        let lam = lambda_max(&l, 1e-8);
        assert!((lam - 3.0).abs() < 1e-6, "lambda {lam}");
    }

    #[test]
    fn disconnected_names_vertex_in_smallest_component() {
        let g = build_topology(&[[0, 1, 2], [1, 2, 3], [4, 5, 6]], 7).unwrap();
        match combinatorial_laplacian(&g) {
            Err(MeshError::Disconnected { vertex, size }) => {
                assert_eq!(size, 3);
                assert!((4..=6).contains(&vertex));
            }
            other => panic!("expected disconnected error, got {other:?}"),
        }
    }

    #[test]
    fn scaled_spectrum_within_unit_interval() {
        for mode in [LaplacianMode::SymmetricNormalized, LaplacianMode::Combinatorial] {
            let g = build_topology(&[[0, 1, 2], [1, 2, 3], [2, 3, 4], [3, 4, 5]], 6).unwrap();
            let lap = ScaledLaplacian::build(&g, mode).unwrap();
            // Largest-|λ| eigenvalue of the scaled operator via power
            // iteration on L̃ (symmetric, so the dominant eigenvalue in
            // magnitude is what the iteration finds).
            let m = &lap.matrix.fwd;
            let mut v = vec![1.0; 6];
            let mut w = vec![0.0; 6];
            let mut dom: f64 = 0.0;
            for _ in 0..500 {
                m.mul_blocks(&v, 1, 1, &mut w);
                let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
                dom = n / v.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nn = n.max(1e-300);
                for (vi, wi) in v.iter_mut().zip(&w) {
                    *vi = wi / nn;
                }
            }
            assert!(dom <= 1.0 + 1e-5, "spectral norm {dom} for {mode:?}");
        }
    }

    #[test]
    fn chebyshev_order_zero_is_plain_linear_map() {
        let g = build_topology(&[[0, 1, 2], [1, 2, 3]], 4).unwrap();
        let lap = ScaledLaplacian::build(&g, LaplacianMode::SymmetricNormalized).unwrap();
        let x = Tensor::from_vec(4, 2, (0..8).map(|v| v as f64).collect());
        let w = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = chebyshev_apply(&lap, &x, &w, 0).unwrap();
        let want = x.matmul(&w);
        for (a, b) in y.data.iter().zip(&want.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn chebyshev_constant_input_combinatorial_first_order() {
        // For constant columns X and combinatorial L, L·X = 0, so
        // T₁(L̃)·X = (2L/λ−I)·X = −X and the K=1 output is X·W₀ − X·W₁.
        let g = build_topology(&[[0, 1, 2], [1, 2, 3]], 4).unwrap();
        let lap = ScaledLaplacian::build(&g, LaplacianMode::Combinatorial).unwrap();
        let x = Tensor::from_vec(4, 2, vec![[5.0, -3.0]; 4].concat());
        let w = Tensor::from_vec(4, 2, vec![1.0, 0.5, 2.0, -1.0, 3.0, 0.25, -2.0, 1.5]);
        let y = chebyshev_apply(&lap, &x, &w, 1).unwrap();
        let w0 = Tensor::from_vec(2, 2, vec![1.0, 0.5, 2.0, -1.0]);
        let w1 = Tensor::from_vec(2, 2, vec![3.0, 0.25, -2.0, 1.5]);
        let mut want = x.matmul(&w0);
        let xw1 = x.matmul(&w1);
        for (a, b) in want.data.iter_mut().zip(&xw1.data) {
            *a -= b;
        }
        for (a, b) in y.data.iter().zip(&want.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn chebyshev_shape_mismatch_errors() {
        let g = build_topology(&[[0, 1, 2]], 3).unwrap();
        let lap = ScaledLaplacian::build(&g, LaplacianMode::SymmetricNormalized).unwrap();
        let x = Tensor::zeros(3, 2);
        let w_bad = Tensor::zeros(3, 4); // K=1 needs 4 rows
        assert!(chebyshev_apply(&lap, &x, &w_bad, 1).is_err());
        let x_bad = Tensor::zeros(5, 2);
        let w = Tensor::zeros(4, 4);
        assert!(chebyshev_apply(&lap, &x_bad, &w, 1).is_err());
    }
}
