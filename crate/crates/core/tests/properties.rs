use proptest::prelude::*;

use zoadapt::blackbox::PseudoLabelRecord;
use zoadapt::config::ExperimentConfig;
use zoadapt::objectives::{kl_decomposition_check, kl_div, mutual_information, NoisyLabel};
use zoadapt::rng::{derive_seed, Purpose};
use zoadapt::select::{select_reliable, ReliableQueue, SelectionConfig};
use zoadapt::tensor::Tensor;
use zoadapt::zoo::{multi_point_estimate, OptimState, ZooConfig};

const FLOOR: f64 = 1e-12;

fn normalize(raw: Vec<f64>) -> Vec<f64> {
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

fn distribution(c: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(1e-4f64..1.0, c).prop_map(normalize)
}

fn records(max_n: usize, classes: usize) -> impl Strategy<Value = Vec<PseudoLabelRecord>> {
    prop::collection::vec((0..classes, 0.0f64..1.0), 1..max_n).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (c, conf))| PseudoLabelRecord {
                sample_index: i,
                class_id: c,
                confidence: conf,
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn kl_decomposition_holds((class, noisy, pred) in (2usize..8).prop_flat_map(|c| (0..c, distribution(c), distribution(c)))) {
        let label = NoisyLabel::from_noisy(class, &noisy).unwrap();
        let (lhs, rhs) = kl_decomposition_check(&label, &pred, FLOOR).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-9, "lhs {lhs} rhs {rhs}");
    }

    #[test]
    fn kl_nonnegative_and_zero_on_self((p, q) in (2usize..8).prop_flat_map(|c| (distribution(c), distribution(c)))) {
        let d = kl_div(&p, &q, FLOOR).unwrap();
        prop_assert!(d >= -1e-12);
        prop_assert!(kl_div(&p, &p, FLOOR).unwrap().abs() < 1e-12);
        if p.iter().zip(&q).any(|(a, b)| (a - b).abs() > 1e-6) {
            prop_assert!(d > 0.0);
        }
    }

    #[test]
    fn mutual_information_bounded(rows in (2usize..8).prop_flat_map(|c| prop::collection::vec(distribution(c), 1..20))) {
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let mi = mutual_information(&refs, FLOOR).unwrap();
        let c = rows[0].len() as f64;
        prop_assert!(mi >= -1e-9 && mi <= c.ln() + 1e-9, "{mi}");
        let same: Vec<&[f64]> = vec![rows[0].as_slice(); rows.len()];
        prop_assert!(mutual_information(&same, FLOOR).unwrap().abs() < 1e-12);
    }

    #[test]
    fn selection_matches_sort_and_truncate(recs in records(300, 6), tau in 0.0f64..1.0, rho in 0.0f64..0.99) {
        let cfg = SelectionConfig { tau, rho };
        let sel = select_reliable(&recs, &cfg, 6).unwrap();
        let cap = cfg.per_class_cap(recs.len(), 6);
        let mut expected = Vec::new();
        for k in 0..6 {
            let mut bucket: Vec<&PseudoLabelRecord> = recs.iter().filter(|r| r.class_id == k && r.confidence > tau).collect();
            bucket.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap().then(a.sample_index.cmp(&b.sample_index)));
            expected.extend(bucket.iter().take(cap).map(|r| r.sample_index));
        }
        expected.sort_unstable();
        prop_assert_eq!(&sel.reliable, &expected);
        let mut all: Vec<usize> = sel.reliable.iter().chain(&sel.unreliable).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..recs.len()).collect::<Vec<_>>());
    }

    #[test]
    fn queue_matches_sorted_list(recs in records(400, 5), capacity in 5usize..60) {
        let mut queue: ReliableQueue<usize> = ReliableQueue::new(capacity, 5).unwrap();
        let mut oracle: Vec<Vec<(f64, usize)>> = vec![Vec::new(); 5];
        let cap = capacity / 5;
        for (t, r) in recs.iter().enumerate() {
            queue.push(*r, t).unwrap();
            queue.check_invariants().unwrap();
            let bucket = &mut oracle[r.class_id];
            bucket.push((r.confidence, t));
            // Stable sort keeps older entries first among equal confidences.
            bucket.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            bucket.truncate(cap);
            prop_assert!(queue.len() <= capacity);
            for k in 0..5 {
                let got: Vec<usize> = queue.class_entries(k).iter().map(|e| e.data).collect();
                let want: Vec<usize> = oracle[k].iter().map(|e| e.1).collect();
                prop_assert_eq!(got, want);
            }
        }
    }

    #[test]
    fn single_direction_exact_on_linear(g in prop::collection::vec(-3.0f64..3.0, 1..12), seed in any::<u64>()) {
        // For a linear f the finite difference is exact, so the estimate is (g.u) u / mu * mu.
        let f = |t: &[f64]| -> zoadapt::Result<f64> { Ok(t.iter().zip(&g).map(|(a, b)| a * b).sum()) };
        let cfg = ZooConfig { q: 1, mu: 1e-3, seed, antithetic: false };
        let theta = Tensor::vector(vec![0.0; g.len()]);
        let est = multi_point_estimate(f, &theta, &cfg, &[1]).unwrap();
        let u = zoadapt::zoo::direction(&cfg, &[1], 0, g.len());
        let gu: f64 = g.iter().zip(&u).map(|(a, b)| a * b).sum();
        for (d, ui) in est.delta.data().iter().zip(&u) {
            prop_assert!((d - gu * ui).abs() < 1e-6 * (1.0 + (gu * ui).abs()));
        }
        prop_assert_eq!(est.queries_used, 2);
    }

    #[test]
    fn zero_gradient_optimizer_only_decays(theta in prop::collection::vec(-2.0f64..2.0, 1..10)) {
        let mut state = OptimState::new(0.1, 0.9, 0.0, theta.len()).unwrap();
        let mut t = theta.clone();
        state.step(&mut t, &vec![0.0; theta.len()]).unwrap();
        prop_assert_eq!(t, theta);
    }

    #[test]
    fn derived_seeds_are_stable(seed in any::<u64>(), key in prop::collection::vec(any::<u64>(), 0..4)) {
        prop_assert_eq!(derive_seed(seed, Purpose::Direction, &key), derive_seed(seed, Purpose::Direction, &key));
        prop_assert_ne!(derive_seed(seed, Purpose::Direction, &key), derive_seed(seed, Purpose::Shuffle, &key));
    }

    #[test]
    fn tensor_bytes_round_trip(shape in prop::collection::vec(1usize..4, 1..4), seed in any::<u64>()) {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|i| ((seed as f64) * 1e-9 + i as f64).sin()).collect();
        let t = Tensor::new(shape, data).unwrap();
        let back = Tensor::read_from(&t.to_bytes()[..]).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn overrides_round_trip(seed in any::<u32>(), q in 1usize..50, lr in 1e-6f64..1.0) {
        let overrides = vec![format!("seed={seed}"), format!("zoo.q={q}"), format!("optim.learning_rate={lr:e}")];
        let cfg = ExperimentConfig::from_toml("", &overrides).unwrap();
        prop_assert_eq!(cfg.seed, seed as u64);
        prop_assert_eq!(cfg.zoo.q, q);
        prop_assert_eq!(cfg.optim.learning_rate, lr);
        let echoed = ExperimentConfig::from_toml(&cfg.to_toml().unwrap(), &[]).unwrap();
        prop_assert_eq!(echoed, cfg);
    }
}
