use fedcontract::model::{aggregate, weighted_average, Batch, Model, ModelDelta};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_batch(rows: usize, dim: usize, classes: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = (0..rows * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels = (0..rows).map(|_| rng.random_range(0..classes)).collect();
    Batch::new(features, labels, dim).unwrap()
}

fn small_dims() -> impl Strategy<Value = Vec<usize>> {
    (2usize..6, prop::collection::vec(2usize..7, 0..3), 2usize..5)
        .prop_map(|(input, hidden, output)| {
            let mut dims = vec![input];
            dims.extend(hidden);
            dims.push(output);
            dims
        })
        .prop_filter("at most 200 parameters", |d| Model::num_params(d) <= 200)
}

/// Fraction of coordinates where the analytic gradient agrees with central
/// differences to relative error below 1e-4.
fn gradient_agreement(model: &Model, batch: &Batch) -> f64 {
    let grad = model.gradient(batch).unwrap();
    let h = 1e-6;
    let mut ok = 0;
    for i in 0..grad.len() {
        let mut plus = model.params().to_vec();
        let mut minus = plus.clone();
        plus[i] += h;
        minus[i] -= h;
        let lp = Model::from_params(model.layer_dims(), plus).unwrap().batch_loss(batch).unwrap();
        let lm = Model::from_params(model.layer_dims(), minus).unwrap().batch_loss(batch).unwrap();
        let numeric = (lp - lm) / (2.0 * h);
        let scale = grad[i].abs().max(numeric.abs());
        if scale < 1e-8 || (grad[i] - numeric).abs() / scale < 1e-4 {
            ok += 1;
        }
    }
    ok as f64 / grad.len() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gradient_matches_central_differences(dims in small_dims(), seed in any::<u64>(), rows in 1usize..8) {
        // random biases keep pre-activations off the ReLU kink at zero
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = (0..Model::num_params(&dims)).map(|_| rng.random_range(-1.0..1.0)).collect();
        let model = Model::from_params(&dims, params).unwrap();
        let batch = random_batch(rows, dims[0], *dims.last().unwrap(), seed ^ 0xABCD);
        let agreement = gradient_agreement(&model, &batch);
        prop_assert!(agreement >= 0.99, "only {agreement} of coordinates agree for {dims:?}");
    }

    #[test]
    fn single_delta_with_unit_weight_is_added_exactly(dims in small_dims(), seed in any::<u64>()) {
        let base = Model::init(&dims, seed).unwrap();
        let other = Model::init(&dims, seed.wrapping_add(1)).unwrap();
        let delta = other.delta_from(&base).unwrap();
        let out = aggregate(&base, &[(delta.clone(), 1.0)]).unwrap();
        for ((o, b), d) in out.params().iter().zip(base.params()).zip(&delta.0) {
            prop_assert_eq!(o.to_bits(), (b + d).to_bits());
        }
    }

    #[test]
    fn aggregate_ignores_delta_order(
        dims in small_dims(),
        seed in any::<u64>(),
        raw in prop::collection::vec(0.01f64..1.0, 1..6),
        rotate in 0usize..6,
    ) {
        let base = Model::init(&dims, seed).unwrap();
        let total: f64 = raw.iter().sum();
        let mut terms: Vec<(ModelDelta, f64)> = raw
            .iter()
            .enumerate()
            .map(|(k, w)| {
                let m = Model::init(&dims, seed ^ (k as u64 + 1)).unwrap();
                (m.delta_from(&base).unwrap(), w / total)
            })
            .collect();
        let forward = aggregate(&base, &terms).unwrap();
        let len = terms.len();
        terms.rotate_left(rotate % len);
        terms.reverse();
        let shuffled = aggregate(&base, &terms).unwrap();
        prop_assert_eq!(forward.params(), shuffled.params());

        // linearity against a direct sum
        for (i, p) in forward.params().iter().enumerate() {
            let direct = base.params()[i] + terms.iter().map(|(d, w)| w * d.0[i]).sum::<f64>();
            prop_assert!((p - direct).abs() <= 1e-12 * (1.0 + direct.abs()));
        }
    }

    #[test]
    fn weighted_average_of_identical_models_is_that_model(dims in small_dims(), seed in any::<u64>(), k in 1usize..5) {
        let m = Model::init(&dims, seed).unwrap();
        let w = 1.0 / k as f64;
        let avg = weighted_average(&vec![(&m, w); k]).unwrap();
        for (a, b) in avg.params().iter().zip(m.params()) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }
}

#[test]
fn aggregate_rejects_invalid_weights() {
    let base = Model::init(&[3, 2], 1).unwrap();
    let d = ModelDelta(vec![0.1; base.params().len()]);
    assert!(aggregate(&base, &[(d.clone(), 0.5)]).is_err());
    assert!(aggregate(&base, &[(d.clone(), 1.5), (d, -0.5)]).is_err());
}
