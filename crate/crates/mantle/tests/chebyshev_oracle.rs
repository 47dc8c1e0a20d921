//! The sparse Chebyshev filter is checked against a dense polynomial oracle:
//! the recurrence T₀ = I, T₁ = L̃, Tⱼ = 2·L̃·Tⱼ₋₁ − Tⱼ₋₂ evaluated with
//! dense matrices, then applied to the input block by block.

use mantle::graph::{build_topology, chebyshev_apply, LaplacianMode, ScaledLaplacian};
use mantle::rng::{stream, Stream};
use mantle::Tensor;
use rand::Rng;

fn dense_mul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows);
    let mut out = Tensor::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.at(i, k);
            if aik == 0.0 {
                continue;
            }
            for j in 0..b.cols {
                *out.at_mut(i, j) += aik * b.at(k, j);
            }
        }
    }
    out
}

fn identity(n: usize) -> Tensor {
    let mut t = Tensor::zeros(n, n);
    for i in 0..n {
        *t.at_mut(i, i) = 1.0;
    }
    t
}

/// Random connected triangulation: a seed triangle, then each new vertex is
/// glued onto an existing edge.
fn random_mesh(rng: &mut impl Rng, vertices: usize) -> Vec<[u32; 3]> {
    assert!(vertices >= 3);
    let mut faces = vec![[0u32, 1, 2]];
    let mut edges = vec![(0u32, 1u32), (1, 2), (0, 2)];
    for v in 3..vertices as u32 {
        let &(a, b) = &edges[rng.random_range(0..edges.len())];
        faces.push([a, b, v]);
        edges.push((a, v));
        edges.push((b, v));
    }
    faces
}

#[test]
fn sparse_filter_matches_dense_polynomial_oracle() {
    let mut rng = stream(1234, Stream::Test);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let v = rng.random_range(4..=50);
        let k = case % 5;
        let mode = if case % 2 == 0 {
            LaplacianMode::SymmetricNormalized
        } else {
            LaplacianMode::Combinatorial
        };
        let faces = random_mesh(&mut rng, v);
        let graph = build_topology(&faces, v).unwrap();
        let lap = ScaledLaplacian::build(&graph, mode).unwrap();

        let f_in = rng.random_range(1..=4);
        let f_out = rng.random_range(1..=4);
        let mut x = Tensor::zeros(v, f_in);
        for e in x.data.iter_mut() {
            *e = rng.random_range(-1.0..1.0);
        }
        let mut w = Tensor::zeros((k + 1) * f_in, f_out);
        for e in w.data.iter_mut() {
            *e = rng.random_range(-1.0..1.0);
        }

        let fast = chebyshev_apply(&lap, &x, &w, k).unwrap();

        // Dense recurrence on the scaled operator.
        let l_dense = lap.matrix.fwd.to_dense();
        let mut t_prev = identity(v);
        let mut t_cur = l_dense.clone();
        let mut oracle = Tensor::zeros(v, f_out);
        for j in 0..=k {
            let t_j = match j {
                0 => &t_prev,
                1 => &t_cur,
                _ => {
                    let two_l = dense_mul(&l_dense, &t_cur);
                    let mut next = Tensor::zeros(v, v);
                    for i in 0..v * v {
                        next.data[i] = 2.0 * two_l.data[i] - t_prev.data[i];
                    }
                    t_prev = std::mem::replace(&mut t_cur, next);
                    &t_cur
                }
            };
            let tx = dense_mul(t_j, &x);
            let wj = Tensor {
                rows: f_in,
                cols: f_out,
                data: w.data[j * f_in * f_out..(j + 1) * f_in * f_out].to_vec(),
            };
            let contrib = dense_mul(&tx, &wj);
            for i in 0..v * f_out {
                oracle.data[i] += contrib.data[i];
            }
        }

        let diff = fast
            .data
            .iter()
            .zip(&oracle.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        worst = worst.max(diff);
        assert!(
            diff <= 1e-10,
            "case {case}: {v} vertices, K={k}, {mode:?}: max deviation {diff:e}"
        );
    }
    println!("worst deviation over 100 graphs: {worst:.3e}");
}
