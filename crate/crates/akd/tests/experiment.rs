use std::fs;

use akd::config::{Defense, ExperimentConfig};
use akd::experiment::{compare_defenses, run_experiment, run_tradeoff_sweep, Knob, Runner, SeedOutcome};
use akd_core::distill::{DistillConfig, DistillMode};
use akd_core::stats::MeanStd;

fn tiny(defense: &str, n_seeds: usize) -> ExperimentConfig {
    let text = format!(
        r#"{{
        "schema_version": 1,
        "dataset": {{"synthetic": {{"seed": 3, "image_size": 8, "n_train": 10, "n_proxy": 6, "n_test": 6}}}},
        "arch": {{
            "generator": {{"image_size": 8, "in_channels": 3, "out_channels": 3, "depth": 2, "base_channels": 2, "dropout": 0.5}},
            "discriminator": {{"image_size": 8, "channels": 3, "base_channels": 2}}
        }},
        "teacher": {{"epochs": 2, "seed": 1}},
        "defense": {defense},
        "n_seeds": {n_seeds},
        "metrics": {{"fx_dim": 8, "n_bins": 5}}
    }}"#
    );
    ExperimentConfig::from_json(&text).unwrap()
}

#[test]
fn report_is_byte_identical_across_reruns() {
    let cfg = tiny(r#"{"akd": {"epochs": 2}}"#, 2);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_experiment(&cfg, Some(a.path())).unwrap();
    run_experiment(&cfg, Some(b.path())).unwrap();
    let read = |d: &tempfile::TempDir, f: &str| fs::read(d.path().join(f)).unwrap();
    assert_eq!(read(&a, "report.json"), read(&b, "report.json"));
    assert_eq!(read(&a, "hist_1.csv"), read(&b, "hist_1.csv"));
    for f in ["scores_2.csv", "roc_2.json", "ckpt/2/teacher/manifest.json", "ckpt/2/student/manifest.json",
        "ckpt/1/teacher_log.csv", "ckpt/1/distill_log.csv", "timing.json"]
    {
        assert!(a.path().join(f).exists(), "{f} missing");
    }
    let hist = String::from_utf8(read(&a, "hist_1.csv")).unwrap();
    assert!(hist.starts_with("bin_left,bin_right,member_p,nonmember_p\n"));
    let scores = String::from_utf8(read(&a, "scores_1.csv")).unwrap();
    assert!(scores.starts_with("sample_id,score,is_member\n"));
    assert_eq!(scores.lines().count(), 1 + 12);
}

#[test]
fn single_seed_aggregate_equals_the_record() {
    let r = run_experiment(&tiny("\"none\"", 1), None).unwrap();
    assert_eq!(r.n_ok, 1);
    let m = r.seeds[0].metrics().unwrap();
    assert_eq!(r.aggregate["auc"], MeanStd { mean: m.auc, std: 0.0, n: 1 });
    assert_eq!(r.aggregate["nkid"].mean, m.nkid);
    assert!(!r.aggregate.contains_key("proxy_auc"));
}

#[test]
fn aggregates_recompute_from_seed_records() {
    let r = run_experiment(&tiny("{\"gauss\": {\"sigma\": 0.1}}", 3), None).unwrap();
    for (name, agg) in &r.aggregate {
        let v = r.values(name);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let s = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt();
        assert!((agg.mean - m).abs() < 1e-12 && (agg.std - s).abs() < 1e-12, "{name}");
        assert_eq!(agg.n, 3);
    }
}

#[test]
fn distillation_never_reads_proxy_labels() {
    for d in [r#"{"akd": {"epochs": 1}}"#, r#"{"dmp": {"epochs": 1, "mode": "dmp"}}"#] {
        let r = run_experiment(&tiny(d, 2), None).unwrap();
        for s in &r.seeds {
            let m = s.metrics().unwrap();
            assert_eq!(m.proxy_label_reads, Some(0));
            assert_eq!(m.teacher_queries, Some(6));
            assert!(m.proxy_audit.as_ref().unwrap().auc().is_some());
        }
    }
}

#[test]
fn failed_stage_is_recorded_without_aborting() {
    let mut cfg = tiny("\"none\"", 2);
    cfg.dataset = akd::config::DatasetConfig::Folder { path: "/nonexistent/akd-dataset".into() };
    let r = run_experiment(&cfg, None).unwrap();
    assert_eq!((r.n_ok, r.n_failed), (0, 2));
    for s in &r.seeds {
        let SeedOutcome::Failed { stage, error } = &s.outcome else { panic!("seed should fail") };
        assert_eq!(stage, "data");
        assert!(error.contains("manifest.json"), "{error}");
    }
    assert!(r.aggregate.is_empty());
}

#[test]
fn teachers_are_shared_between_runs() {
    let mut runner = Runner::new();
    runner.run(&tiny("\"none\"", 2), None).unwrap();
    runner.run(&tiny("{\"gauss\": {\"sigma\": 0.2}}", 2), None).unwrap();
    assert_eq!(runner.cached_teachers(), 2);
    runner.run(&tiny(r#"{"dp_sgd": {"clip_norm": 1.0, "sigma": 0.1}}"#, 1), None).unwrap();
    assert_eq!(runner.cached_teachers(), 3);
}

#[test]
fn empty_sweep_gives_empty_list() {
    let mut runner = Runner::new();
    let base = tiny("{\"gauss\": {\"sigma\": 0.1}}", 1);
    assert!(run_tradeoff_sweep(&mut runner, &base, &Knob::Sigma(vec![]), None).unwrap().is_empty());
    assert!(run_tradeoff_sweep(&mut runner, &tiny("\"none\"", 1), &Knob::Sigma(vec![0.1]), None).is_err());
}

#[test]
fn sweep_writes_csv_and_keeps_going_after_bad_points() {
    let dir = tempfile::tempdir().unwrap();
    let mut runner = Runner::new();
    let base = tiny("{\"gauss\": {\"sigma\": 0.1}}", 1);
    let points = run_tradeoff_sweep(&mut runner, &base, &Knob::Sigma(vec![0.0, -1.0, 0.3]), Some(dir.path())).unwrap();
    assert_eq!(points.len(), 3);
    assert!(points[0].mean_auc.is_some() && points[2].mean_nkid.is_some());
    assert!(points[1].error.is_some());
    let csv = fs::read_to_string(dir.path().join("tradeoff.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn compare_ranks_and_checks_shared_blocks() {
    let mut runner = Runner::new();
    let none = tiny("\"none\"", 1);
    let one = compare_defenses(&mut runner, std::slice::from_ref(&none)).unwrap();
    assert_eq!(one.rows.len(), 1);
    let twice = compare_defenses(&mut runner, &[none.clone(), none.clone()]).unwrap();
    assert_eq!(twice.rows[0], twice.rows[1]);

    let distill = DistillConfig { epochs: 1, ..Default::default() };
    let akd = ExperimentConfig { defense: Defense::Akd(distill.clone()), ..none.clone() };
    let dmp = ExperimentConfig { defense: Defense::Dmp(DistillConfig { mode: DistillMode::Dmp, ..distill }), ..none.clone() };
    let table = compare_defenses(&mut runner, &[none.clone(), akd, dmp]).unwrap();
    assert_eq!(table.rows.len(), 3);
    assert!(table.rows.windows(2).all(|w| w[0].auc.unwrap().mean <= w[1].auc.unwrap().mean));
    assert!(table.akd_vs_dmp.is_some());

    let mut other = none.clone();
    other.teacher.epochs = 3;
    assert!(compare_defenses(&mut runner, &[none, other]).is_err());
}
