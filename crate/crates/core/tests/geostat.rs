use clrm_core::geostat::{
    build_pca, covariance_matrix, pca_to_model, project, sample_realizations, spherical_covariance, GaussianSampler,
    GridSpec, HardData, VariogramKind, VariogramSpec,
};
use proptest::prelude::*;

fn variogram(r_max: f64, azimuth: f64) -> VariogramSpec {
    VariogramSpec {
        sill: 2.25,
        r_max,
        r_mid: r_max * 0.4,
        r_min: 8.0,
        azimuth,
        mean: 4.79,
        kind: VariogramKind::Spherical,
    }
}

#[test]
fn unconditioned_moments_match_targets() {
    let grid = GridSpec::new(10, 10, 2, 15.0, 15.0, 4.0).unwrap();
    let v = variogram(120.0, 30.0);
    let models = sample_realizations(&grid, &v, &HardData::default(), 2000, 2024).unwrap();
    let n = models.len() as f64;
    for c in 0..grid.n_cells() {
        let mean = models.iter().map(|m| m.logk[c]).sum::<f64>() / n;
        let var = models.iter().map(|m| (m.logk[c] - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((mean - v.mean).abs() < 0.1, "cell {c}: mean {mean}");
        assert!((var - v.sill).abs() < 0.15 * v.sill, "cell {c}: var {var}");
    }
}

#[test]
fn conditioning_is_exact_for_every_realization() {
    let grid = GridSpec::new(12, 12, 4, 15.0, 15.0, 4.0).unwrap();
    let hd = HardData {
        points: (0..4)
            .flat_map(|k| [(grid.index(2, 2, k), 3.5 + k as f64 * 0.1), (grid.index(9, 9, k), 6.0)])
            .collect(),
    };
    let sampler = GaussianSampler::new(grid, variogram(150.0, 30.0), hd.clone()).unwrap();
    for m in sampler.sample(25, 9) {
        for &(cell, value) in &hd.points {
            assert_eq!(m.logk[cell], value);
        }
    }
}

#[test]
fn pca_reconstruction_loses_at_most_discarded_energy() {
    let grid = GridSpec::new(10, 10, 3, 15.0, 15.0, 4.0).unwrap();
    let models = sample_realizations(&grid, &variogram(150.0, 30.0), &HardData::default(), 60, 4).unwrap();
    let target = 0.85;
    let basis = build_pca(&models, target).unwrap();
    assert!(basis.l <= 59);
    let (mut err2, mut tot2) = (0.0, 0.0);
    for m in &models {
        let back = pca_to_model(&basis, &project(&basis, m).unwrap()).unwrap();
        for c in 0..grid.n_cells() {
            err2 += (back.logk[c] - m.logk[c]).powi(2);
            tot2 += (m.logk[c] - basis.mean[c]).powi(2);
        }
    }
    assert!(err2 / tot2 <= 1.0 - target + 0.05, "{}", err2 / tot2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn covariance_is_symmetric_psd(
        cells in prop::collection::btree_set(0usize..300, 2..40),
        r_max in 20.0f64..200.0,
        az in 0.0f64..180.0,
    ) {
        let grid = GridSpec::new(10, 10, 3, 15.0, 15.0, 4.0).unwrap();
        let v = variogram(r_max, az);
        let cells: Vec<usize> = cells.into_iter().collect();
        let c = covariance_matrix(&grid, &v, &cells);
        for i in 0..cells.len() {
            for j in 0..cells.len() {
                prop_assert_eq!(c[(i, j)], c[(j, i)]);
            }
        }
        let eig = c.symmetric_eigenvalues();
        prop_assert!(eig.iter().all(|&e| e > -1e-9 * v.sill));
        prop_assert!(c.cholesky().is_some());
    }

    #[test]
    fn covariance_stays_in_range(lag in prop::array::uniform3(-300.0f64..300.0), az in 0.0f64..360.0) {
        let v = variogram(120.0, az);
        let c = spherical_covariance(lag, &v);
        prop_assert!((0.0..=v.sill).contains(&c));
        prop_assert_eq!(c, spherical_covariance([-lag[0], -lag[1], -lag[2]], &v));
    }
}
