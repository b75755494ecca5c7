//! Bilinear finite elements on a uniform grid of the unit square.
//!
//! Nodes are numbered row-major (`index = j (n+1) + i` for the node at
//! `(i h, j h)`), cells list their corners counter-clockwise starting at the
//! lower-left node. Element integrals use the 3×3 tensor Gauss rule, which is
//! exact for the products of bilinear shape functions.

use std::io::Write;

use crate::error::{invalid, LrnsError, Result};
use crate::io::fmt_f64;
use crate::linalg::CsrMatrix;

#[derive(Clone, Debug)]
pub struct StructuredMesh {
    cells_per_side: usize,
    h: f64,
    coords: Vec<[f64; 2]>,
    cells: Vec<[usize; 4]>,
}

pub fn build_mesh(n: usize) -> Result<StructuredMesh> {
    if n == 0 {
        return Err(invalid("cells", "the mesh needs at least one cell per side"));
    }
    let side = n + 1;
    let coords = (0..side * side)
        .map(|p| [(p % side) as f64 / n as f64, (p / side) as f64 / n as f64])
        .collect();
    let mut cells = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            let ll = j * side + i;
            cells.push([ll, ll + 1, ll + side + 1, ll + side]);
        }
    }
    Ok(StructuredMesh {
        cells_per_side: n,
        h: 1.0 / n as f64,
        coords,
        cells,
    })
}

impl StructuredMesh {
    pub fn cells_per_side(&self) -> usize {
        self.cells_per_side
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn num_nodes(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn cells(&self) -> &[[usize; 4]] {
        &self.cells
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        let side = self.cells_per_side + 1;
        let (i, j) = (node % side, node / side);
        i == 0 || j == 0 || i == self.cells_per_side || j == self.cells_per_side
    }

    /// Nodal interpolation of `f`.
    pub fn interpolate(&self, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.coords.iter().map(|p| f(p[0], p[1])).collect()
    }
}

/// Gauss points on `[0, 1]` and their weights.
const GAUSS_1D: [(f64, f64); 3] = [
    (0.112_701_665_379_258_31, 5.0 / 18.0),
    (0.5, 8.0 / 18.0),
    (0.887_298_334_620_741_7, 5.0 / 18.0),
];

/// Shape functions and reference gradients at the nine quadrature points.
struct Reference {
    points: [(f64, f64); 9],
    weights: [f64; 9],
    phi: [[f64; 4]; 9],
    dxi: [[f64; 4]; 9],
    deta: [[f64; 4]; 9],
}

fn reference() -> Reference {
    let mut r = Reference {
        points: [(0.0, 0.0); 9],
        weights: [0.0; 9],
        phi: [[0.0; 4]; 9],
        dxi: [[0.0; 4]; 9],
        deta: [[0.0; 4]; 9],
    };
    for (b, &(eta, weta)) in GAUSS_1D.iter().enumerate() {
        for (a, &(xi, wxi)) in GAUSS_1D.iter().enumerate() {
            let q = 3 * b + a;
            r.points[q] = (xi, eta);
            r.weights[q] = wxi * weta;
            r.phi[q] = [(1.0 - xi) * (1.0 - eta), xi * (1.0 - eta), xi * eta, (1.0 - xi) * eta];
            r.dxi[q] = [-(1.0 - eta), 1.0 - eta, eta, -eta];
            r.deta[q] = [-(1.0 - xi), -xi, xi, 1.0 - xi];
        }
    }
    r
}

/// Diffusion coefficient over the domain.
#[derive(Clone, Copy)]
pub enum Coefficient<'a> {
    Constant(f64),
    /// Nodal values, interpolated bilinearly inside each cell.
    Nodal(&'a [f64]),
    Function(&'a dyn Fn(f64, f64) -> f64),
}

fn assemble_cells(
    mesh: &StructuredMesh,
    mut element: impl FnMut(&[usize; 4], [f64; 2], &mut [[f64; 4]; 4]),
) -> CsrMatrix {
    let mut triplets = Vec::with_capacity(16 * mesh.cells.len());
    for cell in &mesh.cells {
        let mut local = [[0.0; 4]; 4];
        element(cell, mesh.coords[cell[0]], &mut local);
        for (a, &ga) in cell.iter().enumerate() {
            for (b, &gb) in cell.iter().enumerate() {
                triplets.push((ga, gb, local[a][b]));
            }
        }
    }
    let n = mesh.num_nodes();
    CsrMatrix::from_triplets(n, n, &triplets)
}

/// `G_ij = ∫ φ_j φ_i`.
pub fn assemble_mass(mesh: &StructuredMesh) -> CsrMatrix {
    let r = reference();
    let area = mesh.h * mesh.h;
    assemble_cells(mesh, |_, _, local| {
        for q in 0..9 {
            let w = r.weights[q] * area;
            for a in 0..4 {
                for b in 0..4 {
                    local[a][b] += w * r.phi[q][a] * r.phi[q][b];
                }
            }
        }
    })
}

/// `A_ij = ∫ a ∇φ_j · ∇φ_i`.
pub fn assemble_stiffness(mesh: &StructuredMesh, coefficient: Coefficient<'_>) -> Result<CsrMatrix> {
    if let Coefficient::Nodal(values) = coefficient {
        if values.len() != mesh.num_nodes() {
            return Err(LrnsError::Dimension(format!(
                "nodal coefficient has {} values for {} nodes",
                values.len(),
                mesh.num_nodes()
            )));
        }
    }
    let r = reference();
    let h = mesh.h;
    // Jacobian h², gradient scaling 1/h per factor.
    Ok(assemble_cells(mesh, |cell, origin, local| {
        for q in 0..9 {
            let a = match coefficient {
                Coefficient::Constant(c) => c,
                Coefficient::Nodal(v) => (0..4).map(|j| r.phi[q][j] * v[cell[j]]).sum(),
                Coefficient::Function(f) => {
                    let (xi, eta) = r.points[q];
                    f(origin[0] + h * xi, origin[1] + h * eta)
                }
            };
            let w = r.weights[q] * a;
            for i in 0..4 {
                for j in 0..4 {
                    local[i][j] += w * (r.dxi[q][i] * r.dxi[q][j] + r.deta[q][i] * r.deta[q][j]);
                }
            }
        }
    }))
}

/// `b_i = ∫ f φ_i`.
pub fn assemble_load(mesh: &StructuredMesh, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let r = reference();
    let h = mesh.h;
    let area = h * h;
    let mut b = vec![0.0; mesh.num_nodes()];
    for cell in &mesh.cells {
        let origin = mesh.coords[cell[0]];
        for q in 0..9 {
            let (xi, eta) = r.points[q];
            let w = r.weights[q] * area * f(origin[0] + h * xi, origin[1] + h * eta);
            for a in 0..4 {
                b[cell[a]] += w * r.phi[q][a];
            }
        }
    }
    b
}

/// Split of the nodes into interior unknowns and Dirichlet boundary nodes.
#[derive(Clone, Debug)]
pub struct DofMap {
    interior: Vec<usize>,
    boundary: Vec<usize>,
    total: usize,
}

impl DofMap {
    pub fn new(mesh: &StructuredMesh) -> Self {
        let (boundary, interior) = (0..mesh.num_nodes()).partition(|&p| mesh.is_boundary(p));
        Self {
            interior,
            boundary,
            total: mesh.num_nodes(),
        }
    }

    pub fn interior(&self) -> &[usize] {
        &self.interior
    }

    pub fn boundary(&self) -> &[usize] {
        &self.boundary
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn num_interior(&self) -> usize {
        self.interior.len()
    }

    fn check(&self, len: usize) -> Result<()> {
        if len != self.total {
            return Err(LrnsError::Dimension(format!(
                "expected {} nodal entries, got {len}",
                self.total
            )));
        }
        Ok(())
    }

    /// Interior × interior block.
    pub fn restrict_matrix(&self, a: &CsrMatrix) -> Result<CsrMatrix> {
        self.check(a.rows())?;
        Ok(a.select(&self.interior, &self.interior))
    }

    /// Interior × boundary block.
    pub fn coupling(&self, a: &CsrMatrix) -> Result<CsrMatrix> {
        self.check(a.rows())?;
        Ok(a.select(&self.interior, &self.boundary))
    }

    pub fn restrict_vector(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check(v.len())?;
        Ok(self.interior.iter().map(|&p| v[p]).collect())
    }

    pub fn boundary_values(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check(v.len())?;
        Ok(self.boundary.iter().map(|&p| v[p]).collect())
    }

    /// Full nodal vector from interior and boundary values.
    pub fn extend(&self, interior: &[f64], boundary: &[f64]) -> Vec<f64> {
        assert_eq!(interior.len(), self.interior.len(), "interior length");
        assert_eq!(boundary.len(), self.boundary.len(), "boundary length");
        let mut full = vec![0.0; self.total];
        for (&p, &v) in self.interior.iter().zip(interior) {
            full[p] = v;
        }
        for (&p, &v) in self.boundary.iter().zip(boundary) {
            full[p] = v;
        }
        full
    }
}

/// Interior system `(A_II, b_I − A_IB g_B)` for boundary values `g_B`.
pub fn restrict_dirichlet(
    a: &CsrMatrix,
    load: &[f64],
    dofs: &DofMap,
    boundary: &[f64],
) -> Result<(CsrMatrix, Vec<f64>)> {
    if boundary.len() != dofs.boundary.len() {
        return Err(LrnsError::Dimension(format!(
            "expected {} boundary values, got {}",
            dofs.boundary.len(),
            boundary.len()
        )));
    }
    let a_ii = dofs.restrict_matrix(a)?;
    let mut b = dofs.restrict_vector(load)?;
    dofs.coupling(a)?.matvec_add(-1.0, boundary, &mut b);
    Ok((a_ii, b))
}

/// Writes `x,y,value` rows for every node.
pub fn write_nodal_csv(mesh: &StructuredMesh, values: &[f64], out: &mut impl Write) -> Result<()> {
    if values.len() != mesh.num_nodes() {
        return Err(LrnsError::Dimension(format!(
            "{} values for {} nodes",
            values.len(),
            mesh.num_nodes()
        )));
    }
    writeln!(out, "x,y,value")?;
    for (p, v) in mesh.coords.iter().zip(values) {
        writeln!(out, "{},{},{}", fmt_f64(p[0]), fmt_f64(p[1]), fmt_f64(*v))?;
    }
    Ok(())
}
