//! Miniature electrical capacitance tomography testbed.
//!
//! Eight electrode arcs on the boundary of the unit disk; each excitation
//! holds one electrode at `V0` with the rest of the boundary grounded, and
//! the 28 inter-electrode capacitances are read off from consistent nodal
//! reactions (stiffness-weighted fluxes), which makes the measurement matrix
//! symmetric to solver precision. The exact map solves on a 608-element
//! mesh, the reduced map on an 80-element mesh, optionally passed through a
//! stored per-component gain/offset calibration. Permittivity is piecewise
//! constant over 9 regions (a central disk plus two rings of four quadrants)
//! mapped onto each mesh by element centroid.

pub mod fem;
pub mod mesh;

use nalgebra::DVector;

use crate::eem::GainOffset;
use crate::error::{Error, Result};
use crate::types::{DataVector, ParameterVector};

use self::fem::DirichletSolver;
use self::mesh::DiskMesh;

use super::{ForwardModel, Level};

const FINE_MESH_TEXT: &str = include_str!("../../../data/ect_fine.mesh");
const COARSE_MESH_TEXT: &str = include_str!("../../../data/ect_coarse.mesh");

pub const N_REGIONS: usize = 9;
pub const N_ELECTRODES: usize = 8;

/// Region of a point: 0 for the central disk (r < 1/3), then quadrants of
/// the middle ring (1..=4) and of the outer ring (5..=8).
pub fn region_of(p: [f64; 2]) -> usize {
    let r = p[0].hypot(p[1]);
    if r < 1.0 / 3.0 {
        return 0;
    }
    let ring = if r < 2.0 / 3.0 { 0 } else { 1 };
    let mut theta = p[1].atan2(p[0]);
    if theta < 0.0 {
        theta += 2.0 * std::f64::consts::PI;
    }
    let quad = ((theta / (std::f64::consts::PI / 2.0)) as usize).min(3);
    1 + 4 * ring + quad
}

/// The measurement ordering: electrode pairs (i, j) with i < j.
pub fn capacitance_pairs() -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(N_ELECTRODES * (N_ELECTRODES - 1) / 2);
    for i in 0..N_ELECTRODES {
        for j in (i + 1)..N_ELECTRODES {
            pairs.push((i, j));
        }
    }
    pairs
}

pub struct EctModel {
    fine: DiskMesh,
    coarse: DiskMesh,
    fine_regions: Vec<usize>,
    coarse_regions: Vec<usize>,
    fine_boundary: Vec<usize>,
    coarse_boundary: Vec<usize>,
    v0: f64,
    calibration: Option<GainOffset>,
}

impl EctModel {
    /// The canonical testbed from the shipped mesh files.
    pub fn standard() -> Result<Self> {
        Self::from_meshes(
            DiskMesh::parse(FINE_MESH_TEXT)?,
            DiskMesh::parse(COARSE_MESH_TEXT)?,
        )
    }

    pub fn from_meshes(fine: DiskMesh, coarse: DiskMesh) -> Result<Self> {
        for (name, mesh) in [("fine", &fine), ("coarse", &coarse)] {
            if mesh.n_electrodes() != N_ELECTRODES {
                return Err(Error::Mesh(format!(
                    "{name} mesh has {} electrodes, expected {N_ELECTRODES}",
                    mesh.n_electrodes()
                )));
            }
        }
        let fine_regions = (0..fine.n_elements())
            .map(|e| region_of(fine.element_centroid(e)))
            .collect();
        let coarse_regions = (0..coarse.n_elements())
            .map(|e| region_of(coarse.element_centroid(e)))
            .collect();
        let fine_boundary = fine.boundary_nodes();
        let coarse_boundary = coarse.boundary_nodes();
        Ok(Self {
            fine,
            coarse,
            fine_regions,
            coarse_regions,
            fine_boundary,
            coarse_boundary,
            v0: 1.0,
            calibration: None,
        })
    }

    pub fn fine_mesh(&self) -> &DiskMesh {
        &self.fine
    }

    pub fn coarse_mesh(&self) -> &DiskMesh {
        &self.coarse
    }

    pub fn calibration(&self) -> Option<&GainOffset> {
        self.calibration.as_ref()
    }

    /// Installs the gain/offset calibration applied to reduced-map outputs.
    pub fn set_calibration(&mut self, calibration: GainOffset) -> Result<()> {
        let m = capacitance_pairs().len();
        if calibration.gain.len() != m || calibration.offset.len() != m {
            return Err(Error::DimensionMismatch {
                context: "calibration length vs capacitance count",
                expected: m,
                got: calibration.gain.len(),
            });
        }
        self.calibration = Some(calibration);
        Ok(())
    }

    /// All-ones permittivity: the empty-pipe reference frame.
    pub fn frame_empty() -> ParameterVector {
        ParameterVector::new(vec![1.0; N_REGIONS]).unwrap()
    }

    /// Central disk at the given permittivity, background 1.
    pub fn frame_center_inclusion(value: f64) -> ParameterVector {
        let mut v = vec![1.0; N_REGIONS];
        v[0] = value;
        ParameterVector::new(v).unwrap()
    }

    fn eps_per_element(x: &ParameterVector, regions: &[usize]) -> Result<Vec<f64>> {
        if x.dim() != N_REGIONS {
            return Err(Error::DimensionMismatch {
                context: "parameter length vs region count",
                expected: N_REGIONS,
                got: x.dim(),
            });
        }
        Ok(regions.iter().map(|&r| x[r]).collect())
    }

    /// The full symmetric capacitance matrix (diagonal zero) on one mesh.
    pub fn capacitance_matrix(&self, x: &ParameterVector, level: Level) -> Result<Vec<Vec<f64>>> {
        let (mesh, regions, boundary) = match level {
            Level::Exact => (&self.fine, &self.fine_regions, &self.fine_boundary),
            Level::Reduced => (&self.coarse, &self.coarse_regions, &self.coarse_boundary),
        };
        let eps = Self::eps_per_element(x, regions)?;
        let solver = DirichletSolver::new(mesh, &eps, boundary.clone())?;
        let pos: std::collections::HashMap<usize, usize> = boundary
            .iter()
            .enumerate()
            .map(|(idx, &node)| (node, idx))
            .collect();
        let mut matrix = vec![vec![0.0; N_ELECTRODES]; N_ELECTRODES];
        for (i, driven) in mesh.electrodes.iter().enumerate() {
            let mut values = vec![0.0; boundary.len()];
            for &node in driven {
                values[pos[&node]] = self.v0;
            }
            let u = solver.solve(&values)?;
            let reactions = solver.reactions(&u);
            for (j, sensed) in mesh.electrodes.iter().enumerate() {
                if j == i {
                    continue;
                }
                let charge: f64 = sensed.iter().map(|&n| reactions[n]).sum();
                matrix[i][j] = -charge / (self.v0 * self.v0);
            }
        }
        Ok(matrix)
    }

    fn capacitances(&self, x: &ParameterVector, level: Level) -> Result<Vec<f64>> {
        let matrix = self.capacitance_matrix(x, level)?;
        Ok(capacitance_pairs()
            .into_iter()
            .map(|(i, j)| matrix[i][j])
            .collect())
    }

    /// Reduced-map output without the stored calibration.
    pub fn raw_reduced(&self, x: &ParameterVector) -> Result<DataVector> {
        DataVector::new(self.capacitances(x, Level::Reduced)?)
    }
}

impl ForwardModel for EctModel {
    fn parameter_dim(&self) -> usize {
        N_REGIONS
    }

    fn data_dim(&self) -> usize {
        capacitance_pairs().len()
    }

    fn evaluate(&self, x: &ParameterVector, level: Level) -> Result<DataVector> {
        let caps = self.capacitances(x, level)?;
        match (level, &self.calibration) {
            (Level::Reduced, Some(cal)) => {
                DataVector::from_vector(cal.apply(&DVector::from_row_slice(&caps)))
            }
            _ => DataVector::new(caps),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eem::fit_gain_offset;
    use mesh::structured_disk;

    /// Regenerates the shipped mesh data files from the deterministic
    /// construction. Run with `cargo test -p damcmc regenerate_mesh_data --
    /// --ignored` after changing the generator.
    #[test]
    #[ignore]
    fn regenerate_mesh_data() {
        let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/data");
        let fine = structured_disk(32, 10, 8).unwrap();
        let coarse = structured_disk(16, 3, 8).unwrap();
        std::fs::write(
            format!("{dir}/ect_fine.mesh"),
            fine.to_text("unit disk, 32 sectors x 10 rings, 8 electrode arcs"),
        )
        .unwrap();
        std::fs::write(
            format!("{dir}/ect_coarse.mesh"),
            coarse.to_text("unit disk, 16 sectors x 3 rings, 8 electrode arcs"),
        )
        .unwrap();
    }

    #[test]
    fn shipped_meshes_match_the_generator() {
        let fine = DiskMesh::parse(FINE_MESH_TEXT).unwrap();
        let coarse = DiskMesh::parse(COARSE_MESH_TEXT).unwrap();
        let gen_fine = structured_disk(32, 10, 8).unwrap();
        let gen_coarse = structured_disk(16, 3, 8).unwrap();
        for (shipped, generated) in [(&fine, &gen_fine), (&coarse, &gen_coarse)] {
            assert_eq!(shipped.elements, generated.elements);
            assert_eq!(shipped.electrodes, generated.electrodes);
            assert_eq!(shipped.nodes.len(), generated.nodes.len());
            for (a, b) in shipped.nodes.iter().zip(&generated.nodes) {
                assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn element_counts_are_as_documented() {
        let model = EctModel::standard().unwrap();
        assert_eq!(model.fine_mesh().n_elements(), 608);
        assert_eq!(model.coarse_mesh().n_elements(), 80);
        assert_eq!(model.data_dim(), 28);
    }

    #[test]
    fn capacitance_matrix_is_reciprocal_on_both_meshes() {
        let model = EctModel::standard().unwrap();
        // a deliberately asymmetric permittivity pattern
        let x = ParameterVector::new(vec![2.0, 1.0, 3.5, 1.5, 1.0, 4.0, 1.0, 2.5, 1.0]).unwrap();
        for level in [Level::Exact, Level::Reduced] {
            let m = model.capacitance_matrix(&x, level).unwrap();
            let scale = m
                .iter()
                .flatten()
                .fold(0.0f64, |acc, v| acc.max(v.abs()));
            for (i, row) in m.iter().enumerate() {
                for (j, &value) in row.iter().enumerate().skip(i + 1) {
                    let gap = (value - m[j][i]).abs();
                    assert!(
                        gap <= 1e-10 * scale,
                        "reciprocity violated at ({i},{j}): {value} vs {}",
                        m[j][i]
                    );
                }
            }
        }
    }

    #[test]
    fn uniform_permittivity_capacitances_depend_only_on_separation() {
        let model = EctModel::standard().unwrap();
        let x = EctModel::frame_empty();
        let m = model.capacitance_matrix(&x, Level::Exact).unwrap();
        let mut by_sep: std::collections::HashMap<usize, Vec<f64>> = Default::default();
        for (i, j) in capacitance_pairs() {
            let sep = (j - i).min(N_ELECTRODES - (j - i));
            by_sep.entry(sep).or_default().push(m[i][j]);
        }
        for (sep, values) in by_sep {
            let mean: f64 = values.iter().sum::<f64>() / values.len() as f64;
            for v in &values {
                assert!(
                    (v - mean).abs() < 1e-8 * mean.abs(),
                    "separation {sep}: {values:?}"
                );
            }
            assert!(mean > 0.0, "separation {sep} has non-positive capacitance");
        }
    }

    #[test]
    fn region_map_covers_all_regions_on_both_meshes() {
        let model = EctModel::standard().unwrap();
        for regions in [&model.fine_regions, &model.coarse_regions] {
            let mut seen = [false; N_REGIONS];
            for &r in regions.iter() {
                assert!(r < N_REGIONS);
                seen[r] = true;
            }
            assert!(seen.iter().all(|&s| s), "a region received no elements");
        }
    }

    #[test]
    fn calibrated_reduced_map_interpolates_both_frames() {
        let mut model = EctModel::standard().unwrap();
        let empty = EctModel::frame_empty();
        let full = EctModel::frame_center_inclusion(3.0);
        let sim_empty = model.raw_reduced(&empty).unwrap();
        let sim_full = model.raw_reduced(&full).unwrap();
        let obs_empty = model.evaluate(&empty, Level::Exact).unwrap();
        let obs_full = model.evaluate(&full, Level::Exact).unwrap();
        let cal = fit_gain_offset(&sim_empty, &sim_full, &obs_empty, &obs_full).unwrap();
        model.set_calibration(cal).unwrap();
        let cal_empty = model.evaluate(&empty, Level::Reduced).unwrap();
        let cal_full = model.evaluate(&full, Level::Reduced).unwrap();
        let scale = obs_empty
            .as_slice()
            .iter()
            .fold(0.0f64, |a, v| a.max(v.abs()));
        for k in 0..28 {
            assert!(
                (cal_empty[k] - obs_empty[k]).abs() <= 1e-12 * scale,
                "empty frame component {k} off by {}",
                cal_empty[k] - obs_empty[k]
            );
            assert!(
                (cal_full[k] - obs_full[k]).abs() <= 1e-12 * scale,
                "inclusion frame component {k} off by {}",
                cal_full[k] - obs_full[k]
            );
        }
    }
}
