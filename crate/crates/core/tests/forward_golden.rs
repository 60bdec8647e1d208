use lasq_core::forward::{
    calibrate_kappa, calibration_state, gen_line_db, simulate_absorbance, simulate_emission, GasState,
    LineDatabase, SpectralGrid,
};
use proptest::prelude::*;

#[derive(serde::Deserialize)]
struct Golden {
    temperature: f64,
    mole_fraction: f64,
    values: Vec<f64>,
}

fn golden(name: &str) -> Golden {
    let path = format!("{}/tests/data/{name}", env!("CARGO_MANIFEST_DIR"));
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn assert_close(got: &[f64], want: &[f64], rel: f64) {
    assert_eq!(got.len(), want.len());
    let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        assert!((g - w).abs() <= rel * w.abs().max(1e-3 * scale), "point {i}: {g} vs {w}");
    }
}

#[test]
fn absorbance_matches_numpy_reference() {
    let g = golden("golden_absorbance.json");
    let s = simulate_absorbance(
        &GasState::new(g.temperature, g.mole_fraction),
        &SpectralGrid::default(),
        &LineDatabase::canonical(),
    )
    .unwrap();
    assert_close(&s.values, &g.values, 1e-6);
}

#[test]
fn emission_matches_numpy_reference() {
    let g = golden("golden_emission.json");
    let s = simulate_emission(
        &GasState::new(g.temperature, g.mole_fraction),
        &SpectralGrid::default(),
        &LineDatabase::canonical(),
    )
    .unwrap();
    assert_close(&s.values, &g.values, 1e-6);
}

/// Bisection on κ for unit peak absorbance, using only the public simulator.
fn kappa_by_bisection(db: &LineDatabase, grid: &SpectralGrid) -> f64 {
    let peak = |k: f64| {
        let db = LineDatabase {
            scale_kappa: k,
            ..db.clone()
        };
        simulate_absorbance(&calibration_state(), grid, &db)
            .unwrap()
            .values
            .into_iter()
            .fold(f64::MIN, f64::max)
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    while peak(hi) < 1.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if peak(mid) < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn kappa_calibration_matches_bisection() {
    for (seed, band) in [(42, [2375.0, 2395.0]), (43, [2175.0, 2195.0]), (44, [2100.0, 2120.0])] {
        let grid = SpectralGrid {
            nu_min: band[0],
            nu_max: band[1],
            spacing: 0.1,
        };
        let db = gen_line_db(seed, 25, band, 1.0).unwrap();
        let k = calibrate_kappa(&db, &grid, &calibration_state(), 1.0).unwrap();
        let oracle = kappa_by_bisection(&db, &grid);
        assert!((k - oracle).abs() <= 1e-9 * oracle, "seed {seed}: {k} vs {oracle}");
    }
}

#[test]
fn canonical_db_matches_its_recipe() {
    assert_eq!(lasq_core::forward::generate_canonical_db(), LineDatabase::canonical());
}

proptest! {
    #[test]
    fn absorbance_is_linear_in_mole_fraction(t in 300.0f64..4000.0, c in 0.01f64..0.6, k in 0.1f64..5.0) {
        let grid = SpectralGrid::default();
        let db = LineDatabase::canonical();
        let a = simulate_absorbance(&GasState::new(t, c), &grid, &db).unwrap();
        let b = simulate_absorbance(&GasState::new(t, (c * k).min(1.0)), &grid, &db).unwrap();
        let ratio = (c * k).min(1.0) / c;
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!(*x > 0.0);
            prop_assert!((y - ratio * x).abs() <= 1e-12 * y.abs());
        }
    }

    #[test]
    fn emission_is_bounded_by_blackbody(t in 300.0f64..4000.0, c in 0.0f64..1.0) {
        let grid = SpectralGrid::default();
        let e = simulate_emission(&GasState::new(t, c), &grid, &LineDatabase::canonical()).unwrap();
        for (nu, v) in grid.wavenumbers().into_iter().zip(&e.values) {
            let bb = lasq_core::forward::planck_factor(nu, t, lasq_core::forward::DEFAULT_PLANCK_SCALE);
            prop_assert!(*v >= 0.0 && *v <= bb * (1.0 + 1e-12));
        }
    }
}
