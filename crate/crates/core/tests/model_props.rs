use fedsel::numerics::{forward, grad, local_train, loss, LabeledDataset, ModelSpec, OptimizerState, ParamVector};
use fedsel::seeds::SimRng;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn random_batch(spec: ModelSpec, n: usize, seed: u64) -> (ParamVector, LabeledDataset) {
    let mut rng = SimRng::seed_from_u64(seed);
    let w = ParamVector((0..spec.param_count()).map(|_| rng.random_range(-0.8..0.8)).collect());
    let x = (0..n * spec.input_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let y = (0..n).map(|_| rng.random_range(0..spec.num_classes)).collect();
    (w, LabeledDataset::new(x, y, spec.input_dim, spec.num_classes, 8).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gradient_matches_central_differences(
        d in 1usize..5, h in 0usize..4, c in 2usize..5, n in 1usize..6, seed in any::<u64>()
    ) {
        let spec = ModelSpec::new(d, h, c).unwrap();
        let (w, ds) = random_batch(spec, n, seed);
        let g = grad(&w, &spec, &ds).unwrap();
        let step = 1e-5;
        for i in 0..w.len() {
            let mut up = w.clone();
            let mut dn = w.clone();
            up.0[i] += step;
            dn.0[i] -= step;
            let fd = (loss(&up, &spec, &ds).unwrap() - loss(&dn, &spec, &ds).unwrap()) / (2.0 * step);
            let rel = (g.0[i] - fd).abs() / g.0[i].abs().max(fd.abs()).max(1e-6);
            prop_assert!(rel <= 1e-4, "coord {i}: analytic {} vs numeric {fd}", g.0[i]);
        }
    }

    #[test]
    fn softmax_normalizes_for_bounded_logits(
        logits in prop::collection::vec(-50.0f64..50.0, 2..12)
    ) {
        // With zero weights the bias vector is the logit vector.
        let c = logits.len();
        let spec = ModelSpec::new(1, 0, c).unwrap();
        let mut w = ParamVector::zeros(spec.param_count());
        w.0[c..].copy_from_slice(&logits);
        let p = forward(&w, &spec, &[0.0]).unwrap();
        prop_assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn loss_is_non_negative(d in 1usize..4, h in 0usize..3, c in 2usize..6, n in 1usize..8, seed in any::<u64>()) {
        let spec = ModelSpec::new(d, h, c).unwrap();
        let (w, ds) = random_batch(spec, n, seed);
        prop_assert!(loss(&w, &spec, &ds).unwrap() >= 0.0);
        let zero = ParamVector::zeros(spec.param_count());
        if h == 0 {
            prop_assert!((loss(&zero, &spec, &ds).unwrap() - (c as f64).ln()).abs() <= 1e-12);
        }
    }

    #[test]
    fn local_training_is_reproducible(seed in any::<u64>(), train_seed in any::<u64>()) {
        let spec = ModelSpec::new(3, 2, 3).unwrap();
        let (w, ds) = random_batch(spec, 9, seed);
        let run = || {
            let opt = OptimizerState::new(w.len(), 0.05, 0.9).unwrap();
            local_train(&w, &spec, &ds, 2, 4, opt, &mut SimRng::seed_from_u64(train_seed)).unwrap()
        };
        let (a, b) = (run(), run());
        prop_assert_eq!(a.params.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                        b.params.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}
