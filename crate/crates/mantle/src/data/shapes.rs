//! Deterministic triangle-mesh generators.
//!
//! Each generator returns vertex positions as a `V x 3` [`Tensor`] together
//! with a face list, in a fixed vertex order that depends only on the
//! arguments. All three shapes are manifold; the cylinder tube is open at
//! both ends (it has boundary edges), while the icosphere and torus are
//! closed surfaces.

use crate::tensor::Tensor;

/// Open cylinder tube: `rings` circles of `segments` vertices each.
///
/// Vertex `(i, j)` sits at angle `2*pi*j/segments` on the circle of radius
/// `radius` at height `height * i / (rings - 1)`, and has index
/// `i * segments + j`. Each quad between adjacent rings is split into two
/// triangles. The tube is open: the first and last rings are boundary loops.
///
/// # Panics
///
/// Panics if `rings < 2` or `segments < 3`.
pub fn cylinder_tube(rings: usize, segments: usize, radius: f64, height: f64) -> (Tensor, Vec<[u32; 3]>) {
    assert!(rings >= 2, "cylinder tube needs at least two rings");
    assert!(segments >= 3, "cylinder tube needs at least three segments");
    let mut positions = Tensor::zeros(rings * segments, 3);
    for i in 0..rings {
        let z = height * i as f64 / (rings - 1) as f64;
        for j in 0..segments {
            let angle = 2.0 * std::f64::consts::PI * j as f64 / segments as f64;
            let row = positions.row_mut(i * segments + j);
            row[0] = radius * angle.cos();
            row[1] = radius * angle.sin();
            row[2] = z;
        }
    }
    let idx = |i: usize, j: usize| (i * segments + j % segments) as u32;
    let mut faces = Vec::with_capacity(2 * (rings - 1) * segments);
    for i in 0..rings - 1 {
        for j in 0..segments {
            faces.push([idx(i, j), idx(i + 1, j), idx(i, j + 1)]);
            faces.push([idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1)]);
        }
    }
    (positions, faces)
}

/// Closed torus: `major` segments around the main ring, `minor` around the
/// tube. Vertex `(i, j)` has index `i * minor + j`.
///
/// # Panics
///
/// Panics if `major < 3` or `minor < 3`.
pub fn torus(major: usize, minor: usize, major_radius: f64, minor_radius: f64) -> (Tensor, Vec<[u32; 3]>) {
    assert!(major >= 3, "torus needs at least three major segments");
    assert!(minor >= 3, "torus needs at least three minor segments");
    let mut positions = Tensor::zeros(major * minor, 3);
    for i in 0..major {
        let u = 2.0 * std::f64::consts::PI * i as f64 / major as f64;
        for j in 0..minor {
            let v = 2.0 * std::f64::consts::PI * j as f64 / minor as f64;
            let ring = major_radius + minor_radius * v.cos();
            let row = positions.row_mut(i * minor + j);
            row[0] = ring * u.cos();
            row[1] = ring * u.sin();
            row[2] = minor_radius * v.sin();
        }
    }
    let idx = |i: usize, j: usize| ((i % major) * minor + j % minor) as u32;
    let mut faces = Vec::with_capacity(2 * major * minor);
    for i in 0..major {
        for j in 0..minor {
            faces.push([idx(i, j), idx(i + 1, j), idx(i, j + 1)]);
            faces.push([idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1)]);
        }
    }
    (positions, faces)
}

/// Icosphere: a unit icosahedron subdivided `subdivisions` times, with every
/// vertex pushed onto the sphere of the given radius.
///
/// Subdivision splits each triangle into four by inserting midpoint vertices;
/// a midpoint is created once per undirected edge, so the mesh stays closed
/// and manifold. Vertex counts follow `12, 42, 162, ...`.
pub fn icosphere(subdivisions: usize, radius: f64) -> (Tensor, Vec<[u32; 3]>) {
    let phi = (1.0 + 5.0_f64.sqrt()) / 2.0;
    let mut verts: Vec<[f64; 3]> = vec![
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ];
    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoints = std::collections::BTreeMap::new();
        let mut midpoint = |a: u32, b: u32, verts: &mut Vec<[f64; 3]>| -> u32 {
            let key = (a.min(b), a.max(b));
            *midpoints.entry(key).or_insert_with(|| {
                let (p, q) = (verts[a as usize], verts[b as usize]);
                verts.push([(p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0, (p[2] + q[2]) / 2.0]);
                (verts.len() - 1) as u32
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.push([a, ab, ca]);
            next.push([b, bc, ab]);
            next.push([c, ca, bc]);
            next.push([ab, bc, ca]);
        }
        faces = next;
    }
    let mut positions = Tensor::zeros(verts.len(), 3);
    for (i, v) in verts.iter().enumerate() {
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        let row = positions.row_mut(i);
        row[0] = radius * v[0] / norm;
        row[1] = radius * v[1] / norm;
        row[2] = radius * v[2] / norm;
    }
    (positions, faces)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_topology;

    #[test]
    fn cylinder_counts_and_validity() {
        let (pos, faces) = cylinder_tube(4, 6, 1.0, 2.0);
        assert_eq!(pos.rows, 24);
        assert_eq!(faces.len(), 2 * 3 * 6);
        let g = build_topology(&faces, pos.rows).unwrap();
        g.require_connected().unwrap();
        // Interior vertices have 6 neighbours, boundary vertices 4.
        let boundary: usize = g.adjacency.iter().filter(|n| n.len() == 4).count();
        assert_eq!(boundary, 2 * 6);
    }

    #[test]
    fn icosphere_counts() {
        let (p0, f0) = icosphere(0, 1.0);
        assert_eq!((p0.rows, f0.len()), (12, 20));
        let (p1, f1) = icosphere(1, 1.0);
        assert_eq!((p1.rows, f1.len()), (42, 80));
        let g = build_topology(&f1, p1.rows).unwrap();
        assert_eq!(g.edges.len(), 120);
        g.require_connected().unwrap();
        // Closed surface: every edge borders exactly two faces, so Euler's
        // formula gives V - E + F = 2.
        assert_eq!(42 - 120 + 80, 2);
    }

    #[test]
    fn icosphere_radius() {
        let (pos, _) = icosphere(2, 2.5);
        for i in 0..pos.rows {
            let r = pos.row(i);
            let len = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
            assert!((len - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn torus_is_closed() {
        let (pos, faces) = torus(8, 5, 2.0, 0.5);
        assert_eq!(pos.rows, 40);
        let g = build_topology(&faces, pos.rows).unwrap();
        g.require_connected().unwrap();
        // Closed genus-1 surface: V - E + F = 0 and all vertices degree 6.
        assert_eq!(pos.rows + faces.len() - g.edges.len(), 0);
        assert!(g.adjacency.iter().all(|n| n.len() == 6));
    }
}
