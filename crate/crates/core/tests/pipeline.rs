use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sbss_core::bootstrap::{bootstrap_test, BootstrapSpec, NoiseMode, SpatialMode};
use sbss_core::diag::fit;
use sbss_core::dimtest::{asymptotic_test, NullModel, TestOptions};
use sbss_core::estimate::{estimate_asymptotic, Strategy};
use sbss_core::simulate::{gen_coords, sample_field, CoordinatePattern, LatentModel};
use sbss_core::{KernelSet, SpatialSample};

fn field(pattern: CoordinatePattern, edge: usize, seed: u64) -> SpatialSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let loc = gen_coords(pattern, edge, &mut rng).unwrap();
    sample_field(&loc, &LatentModel::setting1(2), &mut rng).unwrap()
}

#[test]
fn simulate_fit_test_estimate() {
    let sample = field(CoordinatePattern::Uniform, 25, 3);
    assert_eq!((sample.n(), sample.p()), (625, 5));
    let kernels = KernelSet::parse("ring:0:1,ring:1:2,ring:2:3").unwrap();

    let too_small = asymptotic_test(&sample, &kernels, 1, TestOptions::default()).unwrap();
    assert!(too_small.p_value < 1e-6, "three signals cannot hide in one: {}", too_small.p_value);
    let right = asymptotic_test(&sample, &kernels, 3, TestOptions::default()).unwrap();
    assert_eq!(right.null_model, NullModel::ChiSquare { df: 3 * 3 });

    let sol = fit(&sample, &kernels).unwrap();
    for strategy in [Strategy::DivideConquer, Strategy::Forward, Strategy::Threshold] {
        let est = estimate_asymptotic(&sol, strategy, 0.01, false).unwrap();
        assert!(est.q_hat >= 3, "{strategy:?} underestimated: {}", est.q_hat);
    }
}

#[test]
fn unnormalized_route_reports_weighted_null() {
    let sample = field(CoordinatePattern::BetaSkewed, 20, 8);
    let kernels = KernelSet::parse("ring:0:1,ring:1:2").unwrap();
    let opts = TestOptions {
        unnormalized: true,
        ..TestOptions::default()
    };
    let res = asymptotic_test(&sample, &kernels, 3, opts).unwrap();
    match res.null_model {
        NullModel::WeightedChiSquare { weights, df_each, .. } => {
            assert_eq!(weights.len(), 2);
            assert_eq!(df_each, 3);
        }
        other => panic!("unexpected null {other:?}"),
    }
    assert!((0.0..=1.0).contains(&res.p_value));
}

#[test]
fn every_bootstrap_mode_runs_and_reproduces() {
    let irregular = field(CoordinatePattern::Uniform, 14, 5);
    let grid = field(CoordinatePattern::Grid, 13, 5);
    let kernels = KernelSet::parse("ring:0:1.5").unwrap();
    let cases = [
        (&irregular, SpatialMode::None),
        (&irregular, SpatialMode::Irregular { block: 7.0 }),
        (&grid, SpatialMode::Regular { block: 4 }),
    ];
    for (sample, spatial) in cases {
        for noise in [NoiseMode::Parametric, NoiseMode::Permute] {
            let spec = BootstrapSpec {
                b: 24,
                noise,
                spatial,
                seed: 17,
            };
            let a = bootstrap_test(sample, &kernels, 3, &spec, TestOptions::default()).unwrap();
            let b = bootstrap_test(sample, &kernels, 3, &spec, TestOptions::default()).unwrap();
            assert_eq!(a, b);
            assert!(a.p_value >= 1.0 / 25.0 && a.p_value <= 1.0);
            assert_eq!(a.method, spec.method());
        }
    }
}
