//! Lattice geometry: rook adjacency on a (possibly partial) regular grid,
//! connected components and the proximity matrix W of the IAR prior.

use std::collections::HashMap;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Which shared-boundary relation counts as adjacency.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Adjacency {
    /// Shared grid edge (m_j <= 4). Default.
    Rook,
    /// Shared edge or corner (m_j <= 8).
    Queen,
}

#[derive(Debug, Clone)]
pub struct Cell {
    pub cell_id: u64,
    pub lon: f64,
    pub lat: f64,
    pub grid_row: i64,
    pub grid_col: i64,
}

/// The spatial grid with its neighbourhood structure. Cells are held in
/// canonical row-major order (grid_row, then grid_col) so every module shares
/// one indexing.
#[derive(Debug, Clone)]
pub struct Lattice {
    pub cells: Vec<Cell>,
    /// Neighbour index sets, sorted ascending.
    pub neighbor_sets: Vec<Vec<usize>>,
    pub neighbor_counts: Vec<usize>,
    /// Connected components of the adjacency graph, each a sorted index list.
    pub components: Vec<Vec<usize>>,
}

impl Lattice {
    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn is_connected(&self) -> bool {
        self.components.len() == 1
    }

    pub fn index_of(&self, cell_id: u64) -> Option<usize> {
        self.cells.iter().position(|c| c.cell_id == cell_id)
    }
}

/// Build the lattice from cell coordinates with the requested adjacency.
pub fn build_lattice(coords: &[(u64, f64, f64, i64, i64)], adjacency: Adjacency) -> Result<Lattice> {
    if coords.len() < 2 {
        return Err(Error::TooFewCells(coords.len()));
    }
    let mut cells: Vec<Cell> = coords
        .iter()
        .map(|&(cell_id, lon, lat, grid_row, grid_col)| Cell { cell_id, lon, lat, grid_row, grid_col })
        .collect();
    cells.sort_by_key(|c| (c.grid_row, c.grid_col));

    let mut seen = HashMap::new();
    for (i, c) in cells.iter().enumerate() {
        if seen.insert(c.cell_id, i).is_some() {
            return Err(Error::DuplicateCellId(c.cell_id));
        }
    }
    let by_pos: HashMap<(i64, i64), usize> =
        cells.iter().enumerate().map(|(i, c)| ((c.grid_row, c.grid_col), i)).collect();
    if by_pos.len() != cells.len() {
        // two ids at the same grid position behave as duplicates
        return Err(Error::Data("two cells share a grid position".into()));
    }

    let offsets: &[(i64, i64)] = match adjacency {
        Adjacency::Rook => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
        Adjacency::Queen => &[
            (-1, 0), (1, 0), (0, -1), (0, 1),
            (-1, -1), (-1, 1), (1, -1), (1, 1),
        ],
    };

    let mut neighbor_sets = Vec::with_capacity(cells.len());
    for c in &cells {
        let mut nb: Vec<usize> = offsets
            .iter()
            .filter_map(|&(dr, dc)| by_pos.get(&(c.grid_row + dr, c.grid_col + dc)).copied())
            .collect();
        nb.sort_unstable();
        if nb.is_empty() {
            return Err(Error::IsolatedCell(c.cell_id));
        }
        neighbor_sets.push(nb);
    }
    let neighbor_counts: Vec<usize> = neighbor_sets.iter().map(|s| s.len()).collect();

    // connected components by BFS
    let d = cells.len();
    let mut comp_of = vec![usize::MAX; d];
    let mut components = Vec::new();
    for start in 0..d {
        if comp_of[start] != usize::MAX {
            continue;
        }
        let id = components.len();
        let mut queue = vec![start];
        let mut members = Vec::new();
        comp_of[start] = id;
        while let Some(i) = queue.pop() {
            members.push(i);
            for &j in &neighbor_sets[i] {
                if comp_of[j] == usize::MAX {
                    comp_of[j] = id;
                    queue.push(j);
                }
            }
        }
        members.sort_unstable();
        components.push(members);
    }
    if components.len() > 1 {
        eprintln!(
            "warning: lattice has {} connected components; centering is applied per component",
            components.len()
        );
    }

    Ok(Lattice { cells, neighbor_sets, neighbor_counts, components })
}

/// Proximity matrix W: w_ii = m_i, w_ij = -1 for adjacent pairs, 0 otherwise.
#[derive(Debug, Clone)]
pub struct ProximityMatrix {
    pub w: DMatrix<f64>,
}

pub fn build_proximity_matrix(lattice: &Lattice) -> ProximityMatrix {
    let d = lattice.n_cells();
    let mut w = DMatrix::zeros(d, d);
    for i in 0..d {
        w[(i, i)] = lattice.neighbor_counts[i] as f64;
        for &j in &lattice.neighbor_sets[i] {
            w[(i, j)] = -1.0;
        }
    }
    ProximityMatrix { w }
}

/// phi' W phi for a scalar field, accumulated as the sum of squared
/// differences over adjacent pairs (each pair counted once).
pub fn quadratic_form_pairwise(lattice: &Lattice, phi: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..lattice.n_cells() {
        for &j in &lattice.neighbor_sets[i] {
            if j > i {
                let diff = phi[i] - phi[j];
                total += diff * diff;
            }
        }
    }
    total
}

/// Helper for building full rectangular grids in tests and the simulator.
pub fn full_grid_coords(rows: usize, cols: usize) -> Vec<(u64, f64, f64, i64, i64)> {
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let id = (r * cols + c) as u64;
            // nominal half-degree grid anchored at (-5, 50)
            out.push((id, -5.0 + 0.5 * c as f64, 50.0 + 0.5 * r as f64, r as i64, c as i64));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(rows: usize, cols: usize) -> Lattice {
        build_lattice(&full_grid_coords(rows, cols), Adjacency::Rook).unwrap()
    }

    #[test]
    fn two_by_two_all_cells_have_two_neighbors() {
        let lat = grid(2, 2);
        assert!(lat.neighbor_counts.iter().all(|&m| m == 2));
        assert!(lat.is_connected());
    }

    #[test]
    fn three_by_three_counts() {
        let lat = grid(3, 3);
        // canonical order is row-major, centre is index 4
        assert_eq!(lat.neighbor_counts[4], 4);
        for &corner in &[0usize, 2, 6, 8] {
            assert_eq!(lat.neighbor_counts[corner], 2);
        }
    }

    #[test]
    fn single_cell_rejected() {
        let coords = vec![(0u64, 0.0, 0.0, 0i64, 0i64)];
        assert!(matches!(build_lattice(&coords, Adjacency::Rook), Err(Error::TooFewCells(1))));
    }

    #[test]
    fn isolated_cell_rejected() {
        let coords = vec![
            (0u64, 0.0, 0.0, 0i64, 0i64),
            (1u64, 0.0, 0.0, 0i64, 1i64),
            (2u64, 0.0, 0.0, 5i64, 5i64),
        ];
        assert!(matches!(build_lattice(&coords, Adjacency::Rook), Err(Error::IsolatedCell(2))));
    }

    #[test]
    fn duplicate_id_rejected() {
        let coords = vec![
            (7u64, 0.0, 0.0, 0i64, 0i64),
            (7u64, 0.0, 0.0, 0i64, 1i64),
        ];
        assert!(matches!(build_lattice(&coords, Adjacency::Rook), Err(Error::DuplicateCellId(7))));
    }

    #[test]
    fn adjacency_symmetric_no_self() {
        let lat = grid(4, 5);
        for i in 0..lat.n_cells() {
            assert!(!lat.neighbor_sets[i].contains(&i));
            for &j in &lat.neighbor_sets[i] {
                assert!(lat.neighbor_sets[j].contains(&i));
            }
        }
    }

    #[test]
    fn proximity_two_cell_path() {
        let coords = vec![
            (0u64, 0.0, 0.0, 0i64, 0i64),
            (1u64, 0.0, 0.0, 0i64, 1i64),
        ];
        let lat = build_lattice(&coords, Adjacency::Rook).unwrap();
        let w = build_proximity_matrix(&lat).w;
        assert_eq!(w[(0, 0)], 1.0);
        assert_eq!(w[(0, 1)], -1.0);
        assert_eq!(w[(1, 0)], -1.0);
        assert_eq!(w[(1, 1)], 1.0);
    }

    #[test]
    fn proximity_three_cell_path() {
        let coords = vec![
            (0u64, 0.0, 0.0, 0i64, 0i64),
            (1u64, 0.0, 0.0, 0i64, 1i64),
            (2u64, 0.0, 0.0, 0i64, 2i64),
        ];
        let lat = build_lattice(&coords, Adjacency::Rook).unwrap();
        let w = build_proximity_matrix(&lat).w;
        assert_eq!(w.diagonal().as_slice(), &[1.0, 2.0, 1.0]);
        assert_eq!(w[(0, 1)], -1.0);
        assert_eq!(w[(1, 2)], -1.0);
        assert_eq!(w[(0, 2)], 0.0);
    }

    #[test]
    fn proximity_trace_counts_edges_twice() {
        let lat = grid(3, 3);
        let w = build_proximity_matrix(&lat).w;
        // 12 rook edges on a 3x3 grid
        assert_eq!(w.trace(), 24.0);
    }

    #[test]
    fn row_sums_zero() {
        let lat = grid(4, 4);
        let w = build_proximity_matrix(&lat).w;
        for i in 0..lat.n_cells() {
            assert_eq!(w.row(i).sum(), 0.0);
        }
    }

    #[test]
    fn pairwise_identity_matches_dense_form() {
        let lat = grid(4, 6);
        let w = build_proximity_matrix(&lat).w;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let phi: Vec<f64> = (0..lat.n_cells()).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
            let v = nalgebra::DVector::from_column_slice(&phi);
            let dense = (v.transpose() * &w * &v)[(0, 0)];
            let pairwise = quadratic_form_pairwise(&lat, &phi);
            assert!((dense - pairwise).abs() < 1e-12, "{dense} vs {pairwise}");
        }
    }

    #[test]
    fn constant_field_in_null_space() {
        let lat = grid(3, 5);
        let phi = vec![2.5; lat.n_cells()];
        assert_eq!(quadratic_form_pairwise(&lat, &phi), 0.0);
    }

    #[test]
    fn disconnected_lattice_accepted_with_components() {
        let coords = vec![
            (0u64, 0.0, 0.0, 0i64, 0i64),
            (1u64, 0.0, 0.0, 0i64, 1i64),
            (2u64, 0.0, 0.0, 5i64, 0i64),
            (3u64, 0.0, 0.0, 5i64, 1i64),
        ];
        let lat = build_lattice(&coords, Adjacency::Rook).unwrap();
        assert_eq!(lat.components.len(), 2);
    }

    #[test]
    fn queen_adjacency_counts_corners() {
        let lat = build_lattice(&full_grid_coords(3, 3), Adjacency::Queen).unwrap();
        assert_eq!(lat.neighbor_counts[4], 8);
        assert_eq!(lat.neighbor_counts[0], 3);
    }
}
