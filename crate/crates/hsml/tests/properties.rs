//! Property tests for the spec-level invariants that hold over whole input
//! families rather than single fixtures.

use hsml::aggregator::{self, AggregatorCfg, AggregatorKind, PoolMode};
use hsml::autodiff::Graph;
use hsml::cluster;
use hsml::params::{BoundParams, ParamStore};
use hsml::rng::Rng;
use hsml::taskgen::{self, FamilyKind};
use hsml::tensor::Tensor;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Soft assignments are normalized for any centers, inputs, and scale.
    #[test]
    fn assignment_rows_always_sum_to_one(
        seed in 0u64..1_000_000,
        dim in 1usize..8,
        k in 1usize..6,
        sigma in 0.05f64..20.0,
    ) {
        let mut rng = Rng::new(seed);
        let mut g = Graph::new();
        let h = g.leaf(Tensor::from_fn(&[dim], |_| rng.range(-3.0, 3.0)));
        let centers: Vec<_> = (0..k)
            .map(|_| g.leaf(Tensor::from_fn(&[dim], |_| rng.range(-3.0, 3.0))))
            .collect();
        let inv_sigma = g.scalar(1.0 / sigma);
        let p = cluster::assign(&mut g, h, &centers, inv_sigma).unwrap();
        let probs = g.eval(p).unwrap();
        let total: f64 = probs.data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(probs.data().iter().all(|v| *v >= 0.0));
    }

    /// The pooling aggregator is bit-exactly invariant to example order.
    #[test]
    fn paa_encoding_is_permutation_invariant(
        seed in 0u64..1_000_000,
        n in 1usize..9,
        mean_pool in any::<bool>(),
    ) {
        let cfg = AggregatorCfg {
            kind: AggregatorKind::Paa,
            repr_dim: 4,
            embed_dim: 3,
            pool: if mean_pool { PoolMode::Mean } else { PoolMode::Max },
        };
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        aggregator::init_params(&mut store, &cfg, &mut rng);
        let data: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.range(-5.0, 5.0), rng.range(-5.0, 5.0)))
            .collect();
        let perm = rng.permutation(n);

        let encode = |d: &[(f64, f64)]| {
            let mut g = Graph::new();
            let bound = BoundParams::bind_all(&mut g, &store);
            let (gi, recon) = aggregator::paa_encode(&mut g, &bound, &cfg, d).unwrap();
            (g.eval(gi).unwrap(), g.eval(recon).unwrap())
        };
        let shuffled: Vec<(f64, f64)> = perm.iter().map(|&i| data[i]).collect();
        let (a, ra) = encode(&data);
        let (b, rb) = encode(&shuffled);
        prop_assert!(a.bits_eq(&b));
        prop_assert!(ra.bits_eq(&rb));
    }

    /// Task sampling stays inside the declared coefficient ranges and the
    /// targets reproduce the ground-truth function bit-exactly.
    #[test]
    fn sampled_tasks_obey_ranges_and_truth(seed in 0u64..1_000_000) {
        let mut rng = Rng::new(seed);
        let task = taskgen::sample_task(&mut rng, &FamilyKind::ALL, 5, 7).unwrap();
        for (x, y) in task.support.iter().chain(task.query.iter()) {
            prop_assert!((-5.0..=5.0).contains(x));
            prop_assert_eq!(y.to_bits(), task.family.evaluate(*x).to_bits());
        }
        match task.family {
            taskgen::Family::Sinusoid { amplitude, frequency, offset } => {
                prop_assert!((0.1..=5.0).contains(&amplitude));
                prop_assert!((0.8..=1.2).contains(&frequency));
                prop_assert!((0.0..=std::f64::consts::TAU).contains(&offset));
            }
            taskgen::Family::Line { slope, intercept } => {
                prop_assert!((-3.0..=3.0).contains(&slope));
                prop_assert!((-3.0..=3.0).contains(&intercept));
            }
            taskgen::Family::Cubic { a, b, c, d } => {
                prop_assert!((-0.1..=0.1).contains(&a));
                prop_assert!((-0.2..=0.2).contains(&b));
                prop_assert!((-2.0..=2.0).contains(&c));
                prop_assert!((-3.0..=3.0).contains(&d));
            }
            taskgen::Family::Quadratic { a, b, c } => {
                prop_assert!((-0.2..=0.2).contains(&a));
                prop_assert!((-2.0..=2.0).contains(&b));
                prop_assert!((-3.0..=3.0).contains(&c));
            }
        }
    }

    /// Checkpoints round-trip byte-identically across modes and seeds.
    #[test]
    fn checkpoint_save_load_save_is_byte_identical(
        seed in 0u64..100_000,
        maml in any::<bool>(),
        steps in 0usize..3,
    ) {
        let mut cfg = hsml::config::RunConfig::default();
        cfg.run.seed = seed;
        if maml {
            cfg.run.mode = hsml::trainer::Mode::Maml;
        }
        cfg.model.hidden = vec![5, 5];
        cfg.model.repr_dim = 4;
        cfg.model.embed_dim = 4;
        cfg.model.hierarchy = vec![2, 1];
        cfg.train.meta_batch = 1;
        cfg.task.query_size = 4;
        let mut state = hsml::trainer::TrainState::new(cfg.trainer_config());
        for _ in 0..steps {
            state.train_iteration(&FamilyKind::ALL).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.hsml");
        let p2 = dir.path().join("b.hsml");
        hsml::checkpoint::save(&p1, &cfg, &state).unwrap();
        let (cfg2, state2) = hsml::checkpoint::load(&p1).unwrap();
        hsml::checkpoint::save(&p2, &cfg2, &state2).unwrap();
        prop_assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    /// Gradients of random scalar programs match finite differences.
    #[test]
    fn random_programs_pass_gradient_checks(seed in 0u64..1_000_000) {
        let mut rng = Rng::new(seed);
        let prog = hsml::gradcheck::random_program(&mut rng);
        let tol = hsml::gradcheck::Tolerance::new(1e-4, 1e-7);
        if let Err(msg) = hsml::gradcheck::check_program(&prog, tol, hsml::gradcheck::FD_STEP) {
            return Err(TestCaseError::fail(msg));
        }
    }
}
