use std::collections::BTreeSet;

use proptest::prelude::*;
use xlrs_cli::config::{check, parse_config, ExperimentConfig};
use xlrs_cli::pipeline::{read_csv, run_specs, CorrelationRow};
use xlrs_cli::report::format_rho;
use xlrs_core::diagnostics::write_csv;
use xlrs_core::synthlang::TaskKind;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn valid_configs_round_trip_through_json(
        seed in any::<u64>(),
        lr in 1e-6f64..1e-1,
        batch in 1usize..64,
        overlap in 0.0f64..=1.0,
        n_seeds in 1u64..4,
    ) {
        let mut cfg = ExperimentConfig { seed, ..Default::default() };
        cfg.finetune.learning_rate = lr;
        cfg.finetune.batch_size = batch;
        cfg.family.languages[2].lexical_overlap = overlap;
        cfg.experiment.seeds = (0..n_seeds).collect();
        prop_assert!(check(&cfg).is_empty(), "{:?}", check(&cfg));
        let back = parse_config(&serde_json::to_string(&cfg).unwrap()).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn out_of_range_overlap_is_one_named_error(overlap in prop_oneof![-5.0f64..-1e-9, 1.000_001f64..5.0], lang in 0usize..5) {
        let mut cfg = ExperimentConfig::default();
        cfg.family.languages[lang].lexical_overlap = overlap;
        let errors = check(&cfg);
        prop_assert_eq!(errors.len(), 1);
        prop_assert_eq!(&errors[0].field, &format!("family.languages[{lang}].lexical_overlap"));
    }

    #[test]
    fn run_grid_ids_are_unique(n_tasks in 1usize..4, n_seeds in 1u64..5) {
        let mut cfg = ExperimentConfig::default();
        cfg.experiment.tasks = [TaskKind::Tag, TaskKind::Paircls, TaskKind::GenTitle][..n_tasks].to_vec();
        cfg.experiment.seeds = (0..n_seeds).collect();
        let specs = run_specs(&cfg);
        let ids: BTreeSet<String> = specs.iter().map(|s| s.id()).collect();
        prop_assert_eq!(specs.len(), n_tasks * cfg.experiment.source_sets.len() * n_seeds as usize);
        prop_assert_eq!(ids.len(), specs.len());
    }

    #[test]
    fn correlation_rows_round_trip_through_csv(
        rows in prop::collection::vec((any::<u64>(), 3usize..100, prop::option::of(-1.0f64..=1.0), prop::option::of(0.0f64..=1.0)), 0..8)
    ) {
        let rows: Vec<CorrelationRow> = rows
            .into_iter()
            .map(|(seed, n, rho, p)| CorrelationRow {
                run: format!("TAG.en.s{seed}"),
                task: TaskKind::Tag,
                sources: "en+hi".into(),
                seed,
                target: "de".into(),
                n,
                rho,
                p_value: p,
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        std::fs::write(&path, buf).unwrap();
        let back: Vec<CorrelationRow> = read_csv(&path).unwrap();
        prop_assert_eq!(back, rows);
    }

    #[test]
    fn star_iff_significant(rho in -1.0f64..=1.0, p in 0.0f64..=1.0) {
        let s = format_rho(Some(rho), Some(p)).unwrap();
        prop_assert_eq!(s.ends_with('*'), p < 0.05);
    }
}
