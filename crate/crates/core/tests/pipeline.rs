//! Whole-pipeline properties on small synthetic graphs.

use fairgkd_core::graph::{generate_synthetic, load_dataset, write_dataset, DatasetMeta, Graph, SynthConfig};
use fairgkd_core::models::{Classifier, Parameters};
use fairgkd_core::pipeline::{
    evaluate_checkpoint, prepare_views, read_seed_metrics, run_experiment, run_seed, seed_dir, train_classifier,
    StageSeeds, Supervision, TrainConfig, CHECKPOINT_ROLES,
};

fn graph(n: usize) -> Graph {
    let params = SynthConfig {
        num_nodes: n,
        ..SynthConfig::default()
    };
    generate_synthetic(&params, 3).unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        runs: 1,
        ..TrainConfig::default()
    }
}

#[test]
fn same_config_and_seed_give_bit_identical_runs() {
    let g = graph(90);
    let cfg = quick(60);
    let views = prepare_views(&g, &cfg).unwrap();
    let a = run_seed(&g, &views, &cfg, 4).unwrap();
    let b = run_seed(&g, &views, &cfg, 4).unwrap();
    assert_eq!(a.student.fingerprint(), b.student.fingerprint());
    assert_eq!(a.teacher.projector.fingerprint(), b.teacher.projector.fingerprint());
    assert!(a.teacher_h.bit_eq(&b.teacher_h));
    assert!(a.student_h.bit_eq(&b.student_h));
    assert_eq!(a.student_log, b.student_log);
    assert_eq!(a.student_metrics, b.student_metrics);
}

#[test]
fn stages_reach_their_reference_levels() {
    let g = graph(120);
    let cfg = quick(400);
    let views = prepare_views(&g, &cfg).unwrap();
    let run = run_seed(&g, &views, &cfg, 0).unwrap();
    let ln2 = std::f64::consts::LN_2;
    for log in [&run.expert_logs.0, &run.expert_logs.1, &run.reference_log] {
        assert!(log.rows.last().unwrap().loss < ln2, "{:?}", log.rows.last());
    }
    let chance = (2.0 * g.num_nodes() as f64 - 1.0).ln();
    let p = &run.projector_log;
    assert!(p.final_loss < chance, "{} vs {chance}", p.final_loss);
    assert!(p.final_cosine > p.rows[0].mean_cosine);
    // the sensitive column never reaches the student
    assert_eq!(views.full.width(), g.num_attributes() - 1);
    assert_eq!(run.student.spec().layers[0].in_dim, g.num_attributes() - 1);
}

#[test]
fn with_sensitive_keeps_the_column() {
    let g = graph(60);
    let cfg = TrainConfig {
        with_sensitive: true,
        ..quick(5)
    };
    assert_eq!(prepare_views(&g, &cfg).unwrap().full.width(), g.num_attributes());
}

#[test]
fn shared_init_means_the_baseline_is_the_reference() {
    let g = graph(80);
    let cfg = quick(50);
    let views = prepare_views(&g, &cfg).unwrap();
    let run = run_seed(&g, &views, &cfg, 9).unwrap();
    let labels = g.label_vector();
    let sup = Supervision {
        labels: &labels,
        splits: g.splits(),
    };
    let init = Classifier::backbone("vanilla", cfg.backbone, views.full.width(), cfg.hidden, StageSeeds::derive(9).classifier);
    let (alone, _) = train_classifier("vanilla", init, &views.full, sup, &cfg).unwrap();
    assert_eq!(alone.fingerprint(), run.reference.fingerprint());
}

#[test]
fn single_run_has_zero_spread_and_artifacts_replay() {
    let g = graph(70);
    let cfg = TrainConfig {
        seeds: Some(vec![2, 5]),
        ..quick(20)
    };
    let dir = tempfile::tempdir().unwrap();
    let o = run_experiment(&g, &cfg, Some(dir.path())).unwrap();
    assert_eq!(o.student.runs.len(), 2);

    let one = run_experiment(&g, &TrainConfig { seeds: Some(vec![2]), ..cfg.clone() }, None).unwrap();
    let a = &one.student.aggregate;
    assert_eq!((a.acc.std, a.f1.std), (0.0, 0.0));
    assert!(a.fairness.iter().all(|f| f.delta_dp.std == 0.0 && f.delta_eo.std == 0.0));
    assert_eq!(one.student.runs[0], o.student.runs[0]);

    for seed in [2, 5] {
        let sd = seed_dir(dir.path(), seed);
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(sd.join("checkpoints/manifest.json")).unwrap()).unwrap();
        let roles: Vec<&str> = manifest["checkpoints"].as_array().unwrap().iter().map(|c| c["role"].as_str().unwrap()).collect();
        assert_eq!(roles, CHECKPOINT_ROLES);
        let stored = read_seed_metrics(&sd).unwrap();
        assert_eq!(evaluate_checkpoint(&g, &cfg, &sd, seed).unwrap(), stored.student);
    }
    for f in ["fairgkd.json", "fairgkd.csv", "vanilla.json", "vanilla.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn written_dataset_reloads_to_the_same_graph() {
    let g = graph(50);
    let dir = tempfile::tempdir().unwrap();
    let meta = write_dataset(&g, dir.path(), "toy", Default::default()).unwrap();
    let reread = DatasetMeta::from_toml_file(&dir.path().join("meta.toml")).unwrap();
    assert_eq!(meta, reread);
    let (edges, attrs) = reread.resolve_files(dir.path()).unwrap();
    let h = load_dataset(&edges, &attrs, &reread).unwrap();
    assert_eq!(h.edge_list(), g.edge_list());
    assert!(h.attributes().bit_eq(g.attributes()));
    assert_eq!(h.labels(), g.labels());
    assert_eq!(h.splits(), g.splits());
}

#[test]
fn divergent_settings_surface_as_training_errors() {
    let g = graph(40);
    let cfg = TrainConfig {
        step_size: 1e300,
        ..quick(30)
    };
    let views = prepare_views(&g, &cfg).unwrap();
    let err = run_seed(&g, &views, &cfg, 0).unwrap_err();
    assert_eq!(err.category(), fairgkd_core::pipeline::ErrorCategory::Training, "{err}");
}
