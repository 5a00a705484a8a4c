//! Property tests for structural invariants.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vfl_sim::attack::DacLabelMap;
use vfl_sim::config::ExperimentConfig;
use vfl_sim::data;
use vfl_sim::defend::{dcor, dp_laplace_gradients, obfuscate_embeddings};
use vfl_sim::detect::{ks_statistic, sg_fake_batch};
use vfl_sim::tensor::Tensor;

fn base_toml(mode: &str) -> String {
    format!(
        r#"
        schema_version = 1
        mode = "{mode}"
        partition_fractions = [0.5, 0.25, 0.25]

        [dataset]
        kind = "synthetic"
        classes = 2
        dims = 8
        per_class = 50
        separation = 4.0
    "#
    )
}

proptest! {
    #[test]
    fn partition_covers_all_columns_disjointly(
        dims in 2usize..40,
        raw in prop::collection::vec(1u32..100, 2..6),
    ) {
        let total: u32 = raw.iter().sum();
        let fractions: Vec<f64> = raw.iter().map(|&r| r as f64 / total as f64).collect();
        // keep every client at one column or more after rounding
        let sizes: Vec<usize> = fractions[..fractions.len() - 1]
            .iter()
            .map(|f| (f * dims as f64).round() as usize)
            .collect();
        let taken: usize = sizes.iter().sum();
        prop_assume!(sizes.iter().all(|&s| s >= 1) && taken < dims);
        let part = data::vertical_partition(dims, &fractions).unwrap();
        let mut seen = vec![false; dims];
        let mut all = part.adversary_columns().to_vec();
        all.extend(part.all_passive_columns());
        for c in all {
            prop_assert!(c < dims);
            prop_assert!(!seen[c], "column {} assigned twice", c);
            seen[c] = true;
        }
        prop_assert!(seen.iter().all(|&s| s), "some column unassigned");
    }

    #[test]
    fn dac_label_map_round_trips(classes in 2usize..12, y_raw in 0usize..12) {
        let y = y_raw % classes;
        let map = DacLabelMap::new(classes);
        let real = map.real(y).unwrap();
        let fake = map.fake(y).unwrap();
        prop_assert_ne!(real, fake);
        prop_assert_eq!(map.decode(real).unwrap(), (y, true));
        prop_assert_eq!(map.decode(fake).unwrap(), (y, false));
    }

    #[test]
    fn fake_batches_never_keep_the_true_label(
        classes in 2usize..8,
        labels_raw in prop::collection::vec(0usize..8, 1..30),
        seed in 0u64..1000,
    ) {
        let labels: Vec<usize> = labels_raw.iter().map(|&l| l % classes).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fakes = sg_fake_batch(&labels, classes, &mut rng).unwrap();
        prop_assert_eq!(fakes.len(), labels.len());
        for (f, t) in fakes.iter().zip(&labels) {
            prop_assert!(f < &classes);
            prop_assert_ne!(f, t);
        }
    }

    #[test]
    fn ks_statistic_is_a_symmetric_distance_in_unit_range(
        a in prop::collection::vec(-100.0f64..100.0, 2..60),
        b in prop::collection::vec(-100.0f64..100.0, 2..60),
    ) {
        let ab = ks_statistic(&a, &b).unwrap();
        let ba = ks_statistic(&b, &a).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ks_statistic(&a, &a).unwrap() < 1e-12);
    }

    #[test]
    fn dcor_stays_in_unit_range(
        vals in prop::collection::vec(-5.0f64..5.0, 12..60),
    ) {
        let n = vals.len() / 4;
        let x = Tensor::matrix(n, 2, vals[..n * 2].to_vec()).unwrap();
        let h = Tensor::matrix(n, 2, vals[n * 2..n * 4].to_vec()).unwrap();
        let d = dcor(&x, &h).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&d), "dcor {}", d);
    }

    #[test]
    fn zero_sigma_obfuscation_is_identity(
        vals in prop::collection::vec(-5.0f64..5.0, 4..40),
        seed in 0u64..1000,
    ) {
        let n = vals.len() / 2;
        let h = Tensor::matrix(n, 2, vals[..n * 2].to_vec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = obfuscate_embeddings(&h, 0.0, &mut rng);
        prop_assert_eq!(out.values(), h.values());
    }

    #[test]
    fn infinite_epsilon_dp_only_clips(
        vals in prop::collection::vec(-5.0f64..5.0, 4..40),
        clip in 0.1f64..4.0,
        seed in 0u64..1000,
    ) {
        let n = vals.len() / 2;
        let g = Tensor::matrix(n, 2, vals[..n * 2].to_vec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = dp_laplace_gradients(&g, f64::INFINITY, clip, &mut rng).unwrap();
        for i in 0..n {
            let l1: f64 = out.row(i).iter().map(|v| v.abs()).sum();
            prop_assert!(l1 <= clip + 1e-9, "row l1 {} above clip {}", l1, clip);
            // clipping preserves direction
            let orig_l1: f64 = g.row(i).iter().map(|v| v.abs()).sum();
            let scale = if orig_l1 > clip { clip / orig_l1 } else { 1.0 };
            for (o, v) in out.row(i).iter().zip(g.row(i)) {
                prop_assert!((o - v * scale).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn standardized_features_have_unit_scale(
        per_class in 20usize..60,
        dims in 2usize..6,
        seed in 0u64..1000,
    ) {
        let raw = data::generate_gaussian_mixture(2, dims, per_class, 4.0, seed).unwrap();
        let (ds, _) = data::standardize(&raw).unwrap();
        let n = ds.features.rows() as f64;
        for c in 0..dims {
            let col: Vec<f64> = (0..ds.features.rows()).map(|i| ds.features.row(i)[c]).collect();
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn axis_override_round_trips_through_toml(sigma in 0.0f64..2.0) {
        let cfg = ExperimentConfig::from_toml(&base_toml("honest")).unwrap();
        let v = ExperimentConfig::parse_axis_value(&format!("{sigma}")).unwrap();
        let swept = cfg.with_axis("defense.noise_sigma", &v).unwrap();
        prop_assert_eq!(swept.defense.noise_sigma, sigma);
        prop_assert_eq!(swept.defense.nopeek_alpha, cfg.defense.nopeek_alpha);
    }

    #[test]
    fn attack_modes_reject_empty_aux(mode in prop::sample::select(vec![
        "urvfl", "urvfl_sync", "plain_discriminator",
    ])) {
        let mut cfg = ExperimentConfig::from_toml(&base_toml(mode)).unwrap();
        cfg.splits.aux_ratio = 0.0;
        prop_assert!(cfg.validate().is_err());
    }
}
