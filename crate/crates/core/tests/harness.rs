use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use tpc_core::harness::{
    cmd_ablate, cmd_run, emit_svg, gen_data, parse_config, read_history_means, AblationSpec, ExperimentConfig,
    GenDataParams, Series,
};
use tpc_core::metrics::amca_of;

fn config(out: &Path, strategies: &str, seeds: &str) -> ExperimentConfig {
    let text = format!(
        r#"{{
            "dataset": {{"kind": "synthetic", "classes": 4, "dim": 6, "per_class": 30, "separation": 6.0, "seed": 1}},
            "scenario": {{"class_incremental": {{"experiences": 3, "first": 2, "per_experience": 1}}}},
            "strategies": {strategies},
            "training": {{"epochs": 3, "replay_capacity": 20}},
            "seeds": {seeds},
            "out_dir": {}
        }}"#,
        serde_json::to_string(out).unwrap()
    );
    ExperimentConfig::from_json(&text).unwrap()
}

fn summary_rows(path: &Path) -> Vec<Vec<String>> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    assert_eq!(
        rdr.headers().unwrap().iter().collect::<Vec<_>>(),
        vec!["strategy", "seed", "amca", "final_accuracy", "wall_clock_s"]
    );
    rdr.records()
        .map(|r| r.unwrap().iter().map(str::to_string).collect())
        .collect()
}

#[test]
fn run_writes_expected_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), r#"["tpc", "naive"]"#, "[0, 1, 2]");
    let outcome = cmd_run(&cfg).unwrap();
    let names: Vec<String> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    let histories = names.iter().filter(|n| n.starts_with("history_")).count();
    let svgs = names.iter().filter(|n| n.ends_with(".svg")).count();
    assert_eq!(histories, 6);
    assert_eq!(svgs, 1);
    assert!(names.contains(&"summary.csv".to_string()));
    assert_eq!(names.len(), 8);
    assert_eq!(outcome.files.len(), 8);
    assert!(outcome.joint.is_some());
}

#[test]
fn summary_matches_histories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), r#"["tpc", "replay"]"#, "[0, 1, 2]");
    cmd_run(&cfg).unwrap();
    let rows = summary_rows(&dir.path().join("summary.csv"));
    let mut per_strategy: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for row in &rows {
        let (strategy, seed, amca, final_acc) = (&row[0], &row[1], &row[2], &row[3]);
        let amca: f64 = amca.parse().unwrap();
        if seed == "mean" {
            let reported = &per_strategy[strategy];
            let mean = reported.iter().sum::<f64>() / reported.len() as f64;
            assert!((mean - amca).abs() <= 1e-12);
            continue;
        }
        let means = read_history_means(&dir.path().join(format!("history_{strategy}_seed{seed}.csv"))).unwrap();
        let recomputed = means.iter().map(|m| m.1).sum::<f64>() / means.len() as f64;
        assert!((recomputed - amca).abs() <= 1e-12, "{strategy} {seed}");
        let last: f64 = final_acc.parse().unwrap();
        assert!((means.last().unwrap().1 - last).abs() <= 1e-12);
        if seed != "0" {
            per_strategy.entry(strategy.clone()).or_default().push(amca);
        }
    }
    assert_eq!(per_strategy.len(), 2);
}

#[test]
fn history_csv_layout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), r#"["naive"]"#, "[5]");
    let outcome = cmd_run(&cfg).unwrap();
    let text = fs::read_to_string(dir.path().join("history_naive_seed5.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("experience,class_id,accuracy"));
    // 4 classes evaluated after each of 3 experiences, plus one mean row each.
    assert_eq!(text.lines().count(), 1 + 3 * 5);
    assert_eq!(text.matches("mean_class_accuracy").count(), 3);
    let h = &outcome.histories["naive"][0];
    let means = read_history_means(&dir.path().join("history_naive_seed5.csv")).unwrap();
    assert_eq!(means.len(), h.records.len());
    assert!((amca_of(&h.records) - means.iter().map(|m| m.1).sum::<f64>() / 3.0).abs() <= 1e-12);
}

#[test]
fn svg_structure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), r#"["tpc", "naive"]"#, "[0, 1]");
    let outcome = cmd_run(&cfg).unwrap();
    let text = fs::read_to_string(dir.path().join("accuracy.svg")).unwrap();
    let doc = roxmltree::Document::parse(&text).unwrap();
    let polylines: Vec<_> = doc.descendants().filter(|n| n.has_tag_name("polyline")).collect();
    assert_eq!(polylines.len(), 2);
    for p in &polylines {
        let label = p.attribute("data-label").unwrap();
        let points = p.attribute("points").unwrap().split_whitespace().count();
        assert_eq!(points, outcome.histories[label][0].records.len());
    }
    let dashed = doc
        .descendants()
        .filter(|n| n.has_tag_name("line") && n.attribute("stroke-dasharray").is_some())
        .count();
    assert!(dashed >= 1);
    let legend_text: String = doc
        .descendants()
        .filter(|n| n.has_tag_name("text"))
        .filter_map(|n| n.text())
        .collect::<Vec<_>>()
        .join("|");
    assert!(legend_text.contains("tpc (AMCA"));
    assert!(legend_text.contains("naive (AMCA"));
}

#[test]
fn flat_history_gives_constant_polyline() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("flat.svg");
    let series = Series {
        label: "flat".into(),
        points: vec![(1, 0.5), (2, 0.5), (3, 0.5), (4, 0.5)],
        amca: 0.5,
    };
    emit_svg(&[series], None, &path).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    let doc = roxmltree::Document::parse(&text).unwrap();
    let line = doc.descendants().find(|n| n.has_tag_name("polyline")).unwrap();
    let ys: Vec<&str> = line
        .attribute("points")
        .unwrap()
        .split_whitespace()
        .map(|p| p.split(',').nth(1).unwrap())
        .collect();
    assert_eq!(ys.len(), 4);
    assert!(ys.iter().all(|y| *y == ys[0]));
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    cmd_run(&config(a.path(), r#"["tpc", "cwr_star"]"#, "[0, 1]")).unwrap();
    cmd_run(&config(b.path(), r#"["tpc", "cwr_star"]"#, "[0, 1]")).unwrap();
    for name in ["summary.csv", "history_tpc_seed1.csv", "history_cwr_star_seed0.csv", "accuracy.svg"] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name}");
    }
}

#[test]
fn ablate_without_toggles_equals_run() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    cmd_run(&config(a.path(), r#"["tpc"]"#, "[0, 1]")).unwrap();
    cmd_ablate(&config(b.path(), r#"["tpc"]"#, "[0, 1]"), &AblationSpec::default()).unwrap();
    for name in ["summary.csv", "history_tpc_seed0.csv", "history_tpc_seed1.csv", "accuracy.svg"] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name}");
    }
}

#[test]
fn ablation_table_shape() {
    let dir = tempfile::tempdir().unwrap();
    cmd_ablate(&config(dir.path(), r#"["tpc"]"#, "[0, 1]"), &AblationSpec::all()).unwrap();
    let text = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "scenario,replay,full,no_bias_correction,no_gradient_masking,no_phase3");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("3/2-1,yes,"));
    assert!(lines[2].starts_with("3/2-1,no,"));
    assert!(lines[2].ends_with(",-"));
    let cells: Vec<&str> = lines[1].split(',').collect();
    assert!(cells[2..].iter().all(|c| c.parse::<f64>().is_ok()));
}

#[test]
fn csv_dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    let params = GenDataParams {
        classes: 4,
        dim: 5,
        per_class: 30,
        separation: 6.0,
        seed: 2,
    };
    let (train, test) = gen_data(&params, &data).unwrap();
    assert_eq!(test, dir.path().join("data.test.csv"));
    let cfg_path = dir.path().join("cfg.json");
    fs::write(
        &cfg_path,
        format!(
            r#"{{
                "dataset": {{"kind": "csv", "train": {}, "test": {}}},
                "scenario": {{"class_incremental": {{"experiences": 2, "first": 2, "per_experience": 2}}}},
                "strategies": ["tpc"],
                "training": {{"epochs": 2}},
                "seeds": [3],
                "joint": false,
                "out_dir": {}
            }}"#,
            serde_json::to_string(&train).unwrap(),
            serde_json::to_string(&test).unwrap(),
            serde_json::to_string(&dir.path().join("out")).unwrap()
        ),
    )
    .unwrap();
    let cfg = parse_config(&cfg_path).unwrap();
    let outcome = cmd_run(&cfg).unwrap();
    assert_eq!(outcome.histories["tpc"][0].records.len(), 2);
    assert!(outcome.joint.is_none());
}

#[test]
fn csv_dataset_with_wrong_class_count_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    let params = GenDataParams {
        classes: 3,
        dim: 3,
        per_class: 10,
        separation: 6.0,
        seed: 0,
    };
    gen_data(&params, &data).unwrap();
    let text = format!(
        r#"{{
            "dataset": {{"kind": "csv", "train": {}}},
            "scenario": {{"class_incremental": {{"experiences": 2, "first": 2, "per_experience": 2}}}},
            "out_dir": {}
        }}"#,
        serde_json::to_string(&data).unwrap(),
        serde_json::to_string(dir.path()).unwrap()
    );
    let cfg = ExperimentConfig::from_json(&text).unwrap();
    let err = cmd_run(&cfg).unwrap_err();
    assert!(err.is_config());
    assert!(err.to_string().contains("A/B-C rule"));
}

#[test]
fn missing_config_file_is_config_error() {
    let err = parse_config("/definitely/not/here.json").unwrap_err();
    assert!(err.is_config());
}

#[test]
fn csv_without_test_uses_sibling_then_holdout() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("g.csv");
    let params = GenDataParams {
        classes: 3,
        dim: 4,
        per_class: 20,
        separation: 6.0,
        seed: 4,
    };
    let (train, test) = gen_data(&params, &data).unwrap();
    let cfg = |p: &Path| {
        let text = format!(
            r#"{{"dataset": {{"kind": "csv", "train": {}}},
                "scenario": {{"class_incremental": {{"experiences": 2, "first": 2, "per_experience": 1}}}}}}"#,
            serde_json::to_string(p).unwrap()
        );
        ExperimentConfig::from_json(&text).unwrap()
    };
    let with_sibling = cfg(&train).dataset.load().unwrap();
    assert_eq!(with_sibling.train.len(), 60);
    fs::remove_file(&test).unwrap();
    let held_out = cfg(&train).dataset.load().unwrap();
    assert!(held_out.train.len() < 60);
    assert_eq!(held_out.train.len() + held_out.test.len(), 60);
}
