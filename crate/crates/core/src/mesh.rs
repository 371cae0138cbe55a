//! Triangular meshes, piecewise-linear basis functions and the FEM matrices
//! behind the SPDE approximation of a Matérn field.
//!
//! Meshes are structured: a regular grid of knots over the (extended) domain,
//! each grid cell split along its lower-left to upper-right diagonal. With
//! lumped mass the precision `Q = L C⁻¹ L`, `L = κ²C + G`, stays sparse.

use std::path::Path;

use nalgebra_sparse::CscMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geom::{Point, Rect};
use crate::sparse::{self, PrecisionParts};

const BARY_TOL: f64 = 1e-12;

/// Grid layout of a structured mesh; vertex `(i, j)` has index `j * nx + i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridShape {
    pub nx: usize,
    pub ny: usize,
    pub x0: f64,
    pub y0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriMesh {
    pub vertices: Vec<Point>,
    pub triangles: Vec<[usize; 3]>,
    pub spacing: f64,
    pub extension: f64,
    /// Study domain the mesh was built for (before extension).
    pub domain: Rect,
    /// Present for meshes produced by [`build_mesh`]; enables O(1) point location.
    #[serde(default)]
    pub grid: Option<GridShape>,
    #[serde(default = "default_construction")]
    pub construction: String,
}

fn default_construction() -> String {
    "imported".into()
}

/// Barycentric weights of a point in the mesh: at most three nonzeros.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasisVector {
    pub idx: [usize; 3],
    pub weight: [f64; 3],
}

impl BasisVector {
    pub fn nonzeros(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.idx.iter().copied().zip(self.weight.iter().copied()).filter(|(_, w)| *w != 0.0)
    }

    pub fn dot(&self, w: &[f64]) -> f64 {
        self.weight[0] * w[self.idx[0]] + self.weight[1] * w[self.idx[1]] + self.weight[2] * w[self.idx[2]]
    }

    pub fn dot_f32(&self, w: &[f32]) -> f64 {
        self.weight[0] * w[self.idx[0]] as f64
            + self.weight[1] * w[self.idx[1]] as f64
            + self.weight[2] * w[self.idx[2]] as f64
    }

    pub fn to_dense(&self, n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        for (i, w) in self.nonzeros() {
            v[i] += w;
        }
        v
    }
}

/// Build the structured mesh over `domain` grown by `extension` on all sides.
pub fn build_mesh(domain: Rect, knot_spacing: f64, extension: f64) -> Result<TriMesh> {
    if !domain.is_valid() {
        return Err(Error::InvalidDomain(format!(
            "side lengths {} x {} must be positive",
            domain.width(),
            domain.height()
        )));
    }
    if !(knot_spacing > 0.0 && knot_spacing.is_finite()) {
        return Err(Error::Parameter(format!("knot spacing must be positive, got {knot_spacing}")));
    }
    if !(extension >= 0.0 && extension.is_finite()) {
        return Err(Error::Parameter(format!("extension must be non-negative, got {extension}")));
    }
    let ext = domain.grow(extension);
    let cells = |len: f64| ((len / knot_spacing) - 1e-9).ceil().max(1.0) as usize;
    let (cx, cy) = (cells(ext.width()), cells(ext.height()));
    let (nx, ny) = (cx + 1, cy + 1);

    let mut vertices = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            vertices.push(Point::new(
                ext.xmin + i as f64 * knot_spacing,
                ext.ymin + j as f64 * knot_spacing,
            ));
        }
    }
    let mut triangles = Vec::with_capacity(2 * cx * cy);
    for j in 0..cy {
        for i in 0..cx {
            let v00 = j * nx + i;
            let v10 = v00 + 1;
            let v01 = v00 + nx;
            let v11 = v01 + 1;
            triangles.push([v00, v10, v11]);
            triangles.push([v00, v11, v01]);
        }
    }
    Ok(TriMesh {
        vertices,
        triangles,
        spacing: knot_spacing,
        extension,
        domain,
        grid: Some(GridShape { nx, ny, x0: ext.xmin, y0: ext.ymin }),
        construction: "structured grid, diagonal split".into(),
    })
}

impl TriMesh {
    pub fn n(&self) -> usize {
        self.vertices.len()
    }

    /// Bounding rectangle of the vertices (the meshed region for grid meshes).
    pub fn extent(&self) -> Rect {
        let mut r = Rect::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in &self.vertices {
            r.xmin = r.xmin.min(v.x);
            r.ymin = r.ymin.min(v.y);
            r.xmax = r.xmax.max(v.x);
            r.ymax = r.ymax.max(v.y);
        }
        r
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        let (p, q, r) = (self.vertices[a], self.vertices[b], self.vertices[c]);
        0.5 * ((q.x - p.x) * (r.y - p.y) - (r.x - p.x) * (q.y - p.y))
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t).abs()).sum()
    }

    fn barycentric(&self, t: usize, p: &Point) -> Option<[f64; 3]> {
        let [a, b, c] = self.triangles[t];
        let (p1, p2, p3) = (self.vertices[a], self.vertices[b], self.vertices[c]);
        let det = (p2.y - p3.y) * (p1.x - p3.x) + (p3.x - p2.x) * (p1.y - p3.y);
        if det == 0.0 {
            return None;
        }
        let l1 = ((p2.y - p3.y) * (p.x - p3.x) + (p3.x - p2.x) * (p.y - p3.y)) / det;
        let l2 = ((p3.y - p1.y) * (p.x - p3.x) + (p1.x - p3.x) * (p.y - p3.y)) / det;
        let l3 = 1.0 - l1 - l2;
        if l1 < -BARY_TOL || l2 < -BARY_TOL || l3 < -BARY_TOL {
            return None;
        }
        let mut l = [l1.max(0.0), l2.max(0.0), l3.max(0.0)];
        let s = l[0] + l[1] + l[2];
        if s != 1.0 {
            l.iter_mut().for_each(|v| *v /= s);
        }
        Some(l)
    }

    /// Index of the lowest-numbered triangle containing `p`, if any.
    pub fn locate(&self, p: &Point) -> Option<(usize, [f64; 3])> {
        if let Some(g) = self.grid {
            let u = (p.x - g.x0) / self.spacing;
            let v = (p.y - g.y0) / self.spacing;
            if !(u.is_finite() && v.is_finite()) {
                return None;
            }
            let (cx, cy) = (g.nx as isize - 1, g.ny as isize - 1);
            let (iu, iv) = (u.floor() as isize, v.floor() as isize);
            let mut candidates: Vec<usize> = Vec::with_capacity(18);
            for j in (iv - 1)..=(iv + 1) {
                for i in (iu - 1)..=(iu + 1) {
                    if i >= 0 && j >= 0 && i < cx && j < cy {
                        let cell = (j * cx + i) as usize;
                        candidates.push(2 * cell);
                        candidates.push(2 * cell + 1);
                    }
                }
            }
            candidates.sort_unstable();
            candidates.into_iter().find_map(|t| self.barycentric(t, p).map(|l| (t, l)))
        } else {
            (0..self.triangles.len()).find_map(|t| self.barycentric(t, p).map(|l| (t, l)))
        }
    }

    pub fn contains(&self, p: &Point) -> bool {
        self.locate(p).is_some()
    }

    /// Evaluate all basis functions at `p`.
    pub fn basis_eval(&self, p: &Point) -> Result<BasisVector> {
        let (t, l) = self.locate(p).ok_or(Error::OutOfDomain { x: p.x, y: p.y })?;
        Ok(BasisVector { idx: self.triangles[t], weight: l })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let mesh: TriMesh = serde_json::from_str(s)?;
        if let Some(t) = mesh.triangles.iter().flatten().find(|&&v| v >= mesh.vertices.len()) {
            return Err(Error::Config(format!("triangle references missing vertex {t}")));
        }
        Ok(mesh)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the canonical JSON serialisation.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("mesh serialises");
        hex::encode(Sha256::digest(json))
    }
}

/// Lumped mass, stiffness and dual-cell volumes of a mesh.
#[derive(Debug, Clone)]
pub struct FemMatrices {
    /// Diagonal of the lumped mass matrix `C`.
    pub c_diag: Vec<f64>,
    pub g: CscMatrix<f64>,
    /// Centroid dual-cell areas; identical to `c_diag` under mass lumping.
    pub dual_volumes: Vec<f64>,
    parts: PrecisionParts,
}

pub fn assemble_fem(mesh: &TriMesh) -> Result<FemMatrices> {
    let n = mesh.n();
    let mut c_diag = vec![0.0; n];
    let mut trip = Vec::with_capacity(9 * mesh.triangles.len());
    let scale = mesh.spacing * mesh.spacing;
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let signed = mesh.triangle_area(t);
        let area = signed.abs();
        if !(area > 1e-12 * scale) || !area.is_finite() {
            return Err(Error::Assembly { triangle: t });
        }
        let p: Vec<Point> = tri.iter().map(|&v| mesh.vertices[v]).collect();
        // gradient of φ_a is (b_a, c_a) / (2A)
        let b = [p[1].y - p[2].y, p[2].y - p[0].y, p[0].y - p[1].y];
        let c = [p[2].x - p[1].x, p[0].x - p[2].x, p[1].x - p[0].x];
        for a in 0..3 {
            c_diag[tri[a]] += area / 3.0;
            for bb in 0..3 {
                let g = (b[a] * b[bb] + c[a] * c[bb]) / (4.0 * area);
                trip.push((tri[a], tri[bb], g));
            }
        }
    }
    let g = sparse::csc_from_triplets(n, &trip);
    let parts = PrecisionParts::new(&c_diag, &g);
    Ok(FemMatrices { dual_volumes: c_diag.clone(), c_diag, g, parts })
}

impl FemMatrices {
    pub fn n(&self) -> usize {
        self.c_diag.len()
    }

    pub fn precision_parts(&self) -> &PrecisionParts {
        &self.parts
    }

    /// `Q = (κ²C + G) C⁻¹ (κ²C + G)`.
    pub fn precision_matrix(&self, kappa2: f64) -> Result<CscMatrix<f64>> {
        if !(kappa2 > 0.0 && kappa2.is_finite()) {
            return Err(Error::Parameter(format!("kappa² must be positive, got {kappa2}")));
        }
        Ok(self.parts.assemble(kappa2))
    }

    pub fn log_det_c(&self) -> f64 {
        self.c_diag.iter().map(|c| c.ln()).sum()
    }
}

/// Free-function form of [`FemMatrices::precision_matrix`].
pub fn precision_matrix(fem: &FemMatrices, kappa2: f64) -> Result<CscMatrix<f64>> {
    fem.precision_matrix(kappa2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit() -> Rect {
        Rect::square(0.0, 1.0)
    }

    #[test]
    fn counts() {
        let m = build_mesh(unit(), 1.0, 0.0).unwrap();
        assert_eq!((m.n(), m.triangles.len()), (4, 2));
        let m = build_mesh(unit(), 0.5, 0.0).unwrap();
        assert_eq!((m.n(), m.triangles.len()), (9, 8));
        let m = build_mesh(Rect::square(200.0, 2200.0), 100.0, 200.0).unwrap();
        let per_side = (2400.0f64 / 100.0) as usize + 1;
        assert_eq!(m.n(), per_side * per_side);
        assert_eq!(m.n(), 625);
    }

    #[test]
    fn invalid_domain_rejected() {
        let bad = Rect::new(0.0, 0.0, 0.0, 1.0);
        assert!(matches!(build_mesh(bad, 1.0, 0.0), Err(Error::InvalidDomain(_))));
        assert!(build_mesh(unit(), 0.0, 0.0).is_err());
        assert!(build_mesh(unit(), 1.0, -1.0).is_err());
    }

    #[test]
    fn basis_at_vertex_centroid_and_edge() {
        let m = build_mesh(unit(), 0.5, 0.0).unwrap();
        for (i, v) in m.vertices.iter().enumerate() {
            let b = m.basis_eval(v).unwrap();
            let dense = b.to_dense(m.n());
            for (j, val) in dense.iter().enumerate() {
                assert_eq!(*val, if i == j { 1.0 } else { 0.0 });
            }
        }
        for tri in &m.triangles {
            let c = Point::new(
                tri.iter().map(|&v| m.vertices[v].x).sum::<f64>() / 3.0,
                tri.iter().map(|&v| m.vertices[v].y).sum::<f64>() / 3.0,
            );
            let b = m.basis_eval(&c).unwrap();
            for (i, w) in b.nonzeros() {
                assert!(tri.contains(&i));
                assert!((w - 1.0 / 3.0).abs() < 1e-12);
            }
        }
        // shared diagonal edge of the first cell: vertices 0 and 4
        let mid = Point::new(0.25, 0.25);
        let dense = m.basis_eval(&mid).unwrap().to_dense(m.n());
        assert!((dense[0] - 0.5).abs() < 1e-12 && (dense[4] - 0.5).abs() < 1e-12);
        assert!((dense.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn edge_ties_go_to_lowest_triangle() {
        let m = build_mesh(unit(), 0.5, 0.0).unwrap();
        let p = Point::new(0.3, 0.3);
        let (t, _) = m.locate(&p).unwrap();
        assert_eq!(t, 0);
        // vertical edge between cell 0 and cell 1
        let (t, _) = m.locate(&Point::new(0.5, 0.1)).unwrap();
        assert_eq!(t, 0);
    }

    #[test]
    fn outside_point_is_error() {
        let m = build_mesh(unit(), 0.5, 0.0).unwrap();
        assert!(matches!(
            m.basis_eval(&Point::new(1.5, 0.5)),
            Err(Error::OutOfDomain { .. })
        ));
    }

    #[test]
    fn partition_of_unity_random_points() {
        let m = build_mesh(Rect::new(0.0, 0.0, 3.0, 2.0), 0.37, 0.2).unwrap();
        let ext = m.extent();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let p = Point::new(rng.gen_range(ext.xmin..ext.xmax), rng.gen_range(ext.ymin..ext.ymax));
            let b = m.basis_eval(&p).unwrap();
            let s: f64 = b.weight.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(b.weight.iter().all(|w| (0.0..=1.0).contains(w)));
        }
    }

    #[test]
    fn two_triangle_mass_matrix() {
        let m = build_mesh(unit(), 1.0, 0.0).unwrap();
        let fem = assemble_fem(&m).unwrap();
        // vertices 0 and 3 sit on the split diagonal and touch both triangles
        let expected = [1.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 3.0];
        for (c, e) in fem.c_diag.iter().zip(expected) {
            assert!((c - e).abs() < 1e-15);
        }
    }

    #[test]
    fn fem_invariants_and_refinement() {
        for h in [0.5, 0.25, 0.125] {
            let m = build_mesh(Rect::new(0.0, 0.0, 2.0, 1.0), h, 0.0).unwrap();
            let fem = assemble_fem(&m).unwrap();
            let area: f64 = fem.c_diag.iter().sum();
            assert!((area - 2.0).abs() / 2.0 < 1e-9);
            let dual: f64 = fem.dual_volumes.iter().sum();
            assert!((dual - 2.0).abs() / 2.0 < 1e-9);
            let ones = vec![1.0; m.n()];
            let mut g1 = vec![0.0; m.n()];
            sparse::spmv(&fem.g, &ones, &mut g1);
            assert!(g1.iter().all(|v| v.abs() < 1e-9));
            let gd = sparse::to_dense(&fem.g);
            assert!((gd.clone() - gd.transpose()).amax() < 1e-14);
        }
    }

    #[test]
    fn degenerate_triangle_named() {
        let mut m = build_mesh(unit(), 0.5, 0.0).unwrap();
        m.grid = None;
        m.triangles[3] = [0, 1, 2];
        match assemble_fem(&m) {
            Err(Error::Assembly { triangle }) => assert_eq!(triangle, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn precision_matches_dense_product() {
        let m = build_mesh(Rect::new(0.0, 0.0, 1.0, 1.5), 0.25, 0.0).unwrap();
        let fem = assemble_fem(&m).unwrap();
        for kappa2 in [0.3, 1.0, 7.0] {
            let q = sparse::to_dense(&fem.precision_matrix(kappa2).unwrap());
            let c = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(fem.c_diag.clone()));
            let cinv = c.clone().try_inverse().unwrap();
            let l = c * kappa2 + sparse::to_dense(&fem.g);
            let oracle = &l * cinv * &l;
            assert!((q - oracle).amax() < 1e-10);
        }
        assert!(fem.precision_matrix(0.0).is_err());
        assert!(fem.precision_matrix(-1.0).is_err());
    }

    #[test]
    fn json_round_trip_and_hash() {
        let m = build_mesh(unit(), 0.5, 0.1).unwrap();
        let back = TriMesh::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(m, back);
        assert_eq!(m.hash(), back.hash());
        let other = build_mesh(unit(), 0.5, 0.2).unwrap();
        assert_ne!(m.hash(), other.hash());
    }
}
