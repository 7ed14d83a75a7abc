//! Structured triangular meshes and their graph form.
//!
//! A rectangle is gridded at a nominal spacing, every cell is split into two
//! triangles along the lower-left-to-upper-right diagonal, and the resulting
//! edge set becomes an undirected graph. Message passing uses the
//! symmetric-normalized adjacency with self-connections,
//! `D^{-1/2} (A + I) D^{-1/2}`, stored as sorted sparse triples.

use crate::linalg::Matrix;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Sparse symmetric propagation operator, triples sorted by (row, col).
#[derive(Debug, Clone, PartialEq)]
pub struct NormAdj {
    num_nodes: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl NormAdj {
    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    /// Sparse-matrix x dense-matrix product.
    pub fn propagate(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() != self.num_nodes {
            return Err(Error::Shape(format!(
                "propagate: operator has {} nodes, input has {} rows",
                self.num_nodes,
                x.rows()
            )));
        }
        let cols = x.cols();
        let mut out = Matrix::zeros(self.num_nodes, cols);
        for &(i, j, v) in &self.entries {
            let src = x.row(j);
            let dst = out.row_mut(i);
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += v * s;
            }
        }
        Ok(out)
    }
}

/// Triangulated domain as a graph.
#[derive(Debug, Clone)]
pub struct MeshGraph {
    pub num_nodes: usize,
    /// Node positions in meters, row-major over the grid.
    pub coords: Vec<[f64; 2]>,
    /// Undirected edges (i, j) with i < j, sorted, deduplicated.
    pub edges: Vec<(usize, usize)>,
    pub norm_adj: NormAdj,
    /// Nominal grid spacing in meters.
    pub resolution_m: f64,
}

#[derive(Serialize, Deserialize)]
struct MeshFile {
    num_nodes: usize,
    coords: Vec<[f64; 2]>,
    edges: Vec<[usize; 2]>,
    resolution_m: f64,
}

impl MeshGraph {
    /// JSON form. The normalized adjacency is never serialized; it is
    /// recomputed on load.
    pub fn to_json(&self) -> String {
        let file = MeshFile {
            num_nodes: self.num_nodes,
            coords: self.coords.clone(),
            edges: self.edges.iter().map(|&(i, j)| [i, j]).collect(),
            resolution_m: self.resolution_m,
        };
        serde_json::to_string(&file).expect("mesh serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<MeshGraph> {
        let file: MeshFile = serde_json::from_str(text)?;
        if file.coords.len() != file.num_nodes {
            return Err(Error::Config(format!(
                "mesh file declares {} nodes but has {} coordinates",
                file.num_nodes,
                file.coords.len()
            )));
        }
        let edges: Vec<(usize, usize)> = file.edges.iter().map(|e| (e[0], e[1])).collect();
        let norm_adj = normalize_adjacency(&edges, file.num_nodes)?;
        Ok(MeshGraph {
            num_nodes: file.num_nodes,
            coords: file.coords,
            edges,
            norm_adj,
            resolution_m: file.resolution_m,
        })
    }
}

/// Grid points and triangles of the structured triangulation of
/// `[0, length] x [0, width]`. Node order is row-major (y-major), the split
/// diagonal runs lower-left to upper-right in every cell.
pub fn rect_triangulation(
    length_m: f64,
    width_m: f64,
    spacing_m: f64,
) -> Result<(Vec<[f64; 2]>, Vec<[usize; 3]>)> {
    if !(spacing_m > 0.0) || !spacing_m.is_finite() {
        return Err(Error::Config(format!(
            "mesh spacing must be positive, got {spacing_m}"
        )));
    }
    if !(length_m >= spacing_m) || !(width_m >= spacing_m) {
        return Err(Error::Config(format!(
            "mesh dimensions ({length_m} x {width_m}) must fit at least one cell of spacing {spacing_m}"
        )));
    }
    let cells_x = (length_m / spacing_m).round().max(1.0) as usize;
    let cells_y = (width_m / spacing_m).round().max(1.0) as usize;
    let dx = length_m / cells_x as f64;
    let dy = width_m / cells_y as f64;
    let nx = cells_x + 1;
    let ny = cells_y + 1;

    let mut coords = Vec::with_capacity(nx * ny);
    for iy in 0..ny {
        for ix in 0..nx {
            coords.push([ix as f64 * dx, iy as f64 * dy]);
        }
    }

    let node = |ix: usize, iy: usize| iy * nx + ix;
    let mut triangles = Vec::with_capacity(2 * cells_x * cells_y);
    for iy in 0..cells_y {
        for ix in 0..cells_x {
            let a = node(ix, iy);
            let b = node(ix + 1, iy);
            let c = node(ix, iy + 1);
            let d = node(ix + 1, iy + 1);
            // diagonal a-d
            triangles.push([a, b, d]);
            triangles.push([a, d, c]);
        }
    }
    Ok((coords, triangles))
}

/// Builds the triangulated rectangle as a graph with its propagation operator.
pub fn build_rect_mesh(length_m: f64, width_m: f64, spacing_m: f64) -> Result<MeshGraph> {
    let (coords, triangles) = rect_triangulation(length_m, width_m, spacing_m)?;
    let num_nodes = coords.len();

    let mut edges: Vec<(usize, usize)> = Vec::with_capacity(triangles.len() * 3);
    for t in &triangles {
        for &(a, b) in &[(t[0], t[1]), (t[1], t[2]), (t[0], t[2])] {
            edges.push(if a < b { (a, b) } else { (b, a) });
        }
    }
    edges.sort_unstable();
    edges.dedup();

    let norm_adj = normalize_adjacency(&edges, num_nodes)?;
    Ok(MeshGraph {
        num_nodes,
        coords,
        edges,
        norm_adj,
        resolution_m: spacing_m,
    })
}

/// Symmetric-normalized adjacency with self-connections for an undirected
/// edge list. Input edges must be loop-free and unique; self-loops are added
/// internally before normalizing by the augmented degrees.
pub fn normalize_adjacency(edges: &[(usize, usize)], num_nodes: usize) -> Result<NormAdj> {
    let mut degree = vec![1.0f64; num_nodes]; // self-loop contributes 1
    let mut seen = std::collections::HashSet::with_capacity(edges.len());
    for &(i, j) in edges {
        if i >= num_nodes || j >= num_nodes {
            return Err(Error::Shape(format!(
                "edge ({i}, {j}) out of range for {num_nodes} nodes"
            )));
        }
        if i == j {
            return Err(Error::Config(format!("self-loop on node {i} in edge list")));
        }
        let key = if i < j { (i, j) } else { (j, i) };
        if !seen.insert(key) {
            return Err(Error::Config(format!("duplicate edge ({i}, {j})")));
        }
        degree[i] += 1.0;
        degree[j] += 1.0;
    }

    let inv_sqrt: Vec<f64> = degree.iter().map(|&d| 1.0 / d.sqrt()).collect();
    let mut entries = Vec::with_capacity(2 * edges.len() + num_nodes);
    for (i, &s) in inv_sqrt.iter().enumerate() {
        entries.push((i, i, s * s));
    }
    for &(i, j) in edges {
        let v = inv_sqrt[i] * inv_sqrt[j];
        entries.push((i, j, v));
        entries.push((j, i, v));
    }
    entries.sort_unstable_by_key(|&(r, c, _)| (r, c));
    Ok(NormAdj { num_nodes, entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Dense oracle: explicit D^{-1/2} (A + I) D^{-1/2}.
    fn dense_norm_adj(edges: &[(usize, usize)], n: usize) -> Matrix {
        let mut a = Matrix::eye(n);
        for &(i, j) in edges {
            a.set(i, j, 1.0);
            a.set(j, i, 1.0);
        }
        let deg: Vec<f64> = (0..n).map(|i| (0..n).map(|j| a.get(i, j)).sum()).collect();
        Matrix::from_fn(n, n, |i, j| a.get(i, j) / (deg[i] * deg[j]).sqrt())
    }

    fn densify(adj: &NormAdj) -> Matrix {
        let mut m = Matrix::zeros(adj.num_nodes(), adj.num_nodes());
        for &(i, j, v) in adj.entries() {
            m.set(i, j, v);
        }
        m
    }

    #[test]
    fn three_by_three_grid_counts() {
        // 3x3 grid: 12 grid edges + 4 diagonals, 8 triangles, enumerated by hand.
        let s = 100.0;
        let (coords, tris) = rect_triangulation(2.0 * s, 2.0 * s, s).unwrap();
        assert_eq!(coords.len(), 9);
        assert_eq!(tris.len(), 8);
        let mesh = build_rect_mesh(2.0 * s, 2.0 * s, s).unwrap();
        assert_eq!(mesh.num_nodes, 9);
        assert_eq!(mesh.edges.len(), 16);
    }

    #[test]
    fn single_quad_counts() {
        let s = 50.0;
        let (coords, tris) = rect_triangulation(s, s, s).unwrap();
        assert_eq!(coords.len(), 4);
        assert_eq!(tris.len(), 2);
        let mesh = build_rect_mesh(s, s, s).unwrap();
        assert_eq!(mesh.edges.len(), 5);
    }

    #[test]
    fn degenerate_dimensions_rejected() {
        assert!(build_rect_mesh(0.0, 100.0, 10.0).is_err());
        assert!(build_rect_mesh(100.0, 100.0, 0.0).is_err());
        assert!(build_rect_mesh(100.0, 100.0, -5.0).is_err());
        assert!(build_rect_mesh(5.0, 100.0, 10.0).is_err());
    }

    #[test]
    fn k3_entries_are_all_one_third() {
        let adj = normalize_adjacency(&[(0, 1), (1, 2), (0, 2)], 3).unwrap();
        assert_eq!(adj.entries().len(), 9);
        for &(_, _, v) in adj.entries() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_edge_entries_are_all_half() {
        let adj = normalize_adjacency(&[(0, 1)], 2).unwrap();
        assert_eq!(adj.entries().len(), 4);
        for &(_, _, v) in adj.entries() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn path_graph_matches_dense_oracle_and_analytic_values() {
        let edges = [(0, 1), (1, 2)];
        let adj = normalize_adjacency(&edges, 3).unwrap();
        let dense = densify(&adj);
        let oracle = dense_norm_adj(&edges, 3);
        assert!(dense.max_abs_diff(&oracle) < 1e-15);

        let s6 = 1.0 / 6.0f64.sqrt();
        assert!((dense.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((dense.get(0, 1) - s6).abs() < 1e-15);
        assert!((dense.get(1, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert!((dense.get(1, 2) - s6).abs() < 1e-15);
        assert!((dense.get(2, 2) - 0.5).abs() < 1e-15);
        assert!((dense.get(0, 2)).abs() < 1e-15);
    }

    #[test]
    fn bad_edge_lists_rejected() {
        assert!(normalize_adjacency(&[(0, 3)], 3).is_err());
        assert!(normalize_adjacency(&[(1, 1)], 3).is_err());
        assert!(normalize_adjacency(&[(0, 1), (1, 0)], 3).is_err());
    }

    #[test]
    fn norm_adj_is_symmetric_with_full_diagonal() {
        let mesh = build_rect_mesh(500.0, 300.0, 100.0).unwrap();
        let dense = densify(&mesh.norm_adj);
        for i in 0..mesh.num_nodes {
            assert!(dense.get(i, i) > 0.0, "missing diagonal at node {i}");
            for j in 0..mesh.num_nodes {
                assert!((dense.get(i, j) - dense.get(j, i)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rescaling_by_sqrt_degree_recovers_adjacency_pattern() {
        let mesh = build_rect_mesh(400.0, 400.0, 100.0).unwrap();
        let n = mesh.num_nodes;
        let mut degree = vec![1.0f64; n];
        for &(i, j) in &mesh.edges {
            degree[i] += 1.0;
            degree[j] += 1.0;
        }
        let mut pattern = Matrix::zeros(n, n);
        for &(i, j, v) in mesh.norm_adj.entries() {
            pattern.set(i, j, v * (degree[i] * degree[j]).sqrt());
        }
        // expected: exactly 1 on self-loops and edges, 0 elsewhere
        let mut expected = Matrix::eye(n);
        for &(i, j) in &mesh.edges {
            expected.set(i, j, 1.0);
            expected.set(j, i, 1.0);
        }
        assert!(pattern.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn propagate_preserves_constants_on_k3() {
        let adj = normalize_adjacency(&[(0, 1), (1, 2), (0, 2)], 3).unwrap();
        let x = Matrix::from_fn(3, 2, |_, c| if c == 0 { 4.5 } else { -1.25 });
        let y = adj.propagate(&x).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn propagate_zero_is_zero() {
        let mesh = build_rect_mesh(300.0, 200.0, 100.0).unwrap();
        let x = Matrix::zeros(mesh.num_nodes, 4);
        let y = mesh.norm_adj.propagate(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn propagate_path_impulse() {
        let adj = normalize_adjacency(&[(0, 1), (1, 2)], 3).unwrap();
        let x = Matrix::from_rows(&[vec![1.0], vec![0.0], vec![0.0]]).unwrap();
        let y = adj.propagate(&x).unwrap();
        assert!((y.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((y.get(1, 0) - 1.0 / 6.0f64.sqrt()).abs() < 1e-15);
        assert!(y.get(2, 0).abs() < 1e-15);
    }

    #[test]
    fn propagate_dimension_mismatch_rejected() {
        let adj = normalize_adjacency(&[(0, 1)], 2).unwrap();
        assert!(adj.propagate(&Matrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn propagate_is_linear_and_matches_dense_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        // several structured meshes up to 400 nodes
        for &(l, w, s) in &[
            (200.0, 200.0, 100.0),
            (600.0, 400.0, 100.0),
            (1000.0, 600.0, 100.0),
            (1800.0, 1200.0, 100.0), // 19 x 13 = 247 nodes
            (2400.0, 1500.0, 100.0), // 25 x 16 = 400 nodes
        ] {
            let mesh = build_rect_mesh(l, w, s).unwrap();
            let n = mesh.num_nodes;
            assert!(n <= 400);
            let x = Matrix::from_fn(n, 3, |_, _| rng.gen_range(-1.0..1.0));
            let y = Matrix::from_fn(n, 3, |_, _| rng.gen_range(-1.0..1.0));
            let (alpha, beta) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));

            let lhs = mesh
                .norm_adj
                .propagate(&x.scale(alpha).add(&y.scale(beta)).unwrap())
                .unwrap();
            let rhs = mesh
                .norm_adj
                .propagate(&x)
                .unwrap()
                .scale(alpha)
                .add(&mesh.norm_adj.propagate(&y).unwrap().scale(beta))
                .unwrap();
            assert!(lhs.max_abs_diff(&rhs) < 1e-12);

            if n <= 200 {
                let oracle = dense_norm_adj(&mesh.edges, n).matmul(&x).unwrap();
                assert!(mesh.norm_adj.propagate(&x).unwrap().max_abs_diff(&oracle) < 1e-12);
            }
        }
    }

    #[test]
    fn construction_is_deterministic() {
        let a = build_rect_mesh(700.0, 500.0, 100.0).unwrap().to_json();
        let b = build_rect_mesh(700.0, 500.0, 100.0).unwrap().to_json();
        assert_eq!(a, b);
    }

    #[test]
    fn json_roundtrip_recomputes_operator() {
        let mesh = build_rect_mesh(500.0, 400.0, 100.0).unwrap();
        let loaded = MeshGraph::from_json(&mesh.to_json()).unwrap();
        assert_eq!(loaded.num_nodes, mesh.num_nodes);
        assert_eq!(loaded.edges, mesh.edges);
        assert_eq!(loaded.coords, mesh.coords);
        assert_eq!(loaded.norm_adj, mesh.norm_adj);
        assert_eq!(loaded.to_json(), mesh.to_json());
    }
}
