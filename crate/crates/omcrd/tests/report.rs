use omcrd::report::{render_report, render_sweep, MethodRow, Report, SweepReport, SweepRow};
use omcrd_core::metrics::compression_report;
use omcrd_core::{FoldResult, PeerConfig};

fn folds(accs: &[f64]) -> Vec<FoldResult> {
    accs.iter()
        .enumerate()
        .map(|(fold, &a)| FoldResult {
            fold,
            peer_accuracy: vec![a - 0.05, a],
            selected_peer: 1,
            selected_accuracy: a,
        })
        .collect()
}

fn numbers(line: &str) -> Vec<f64> {
    line.split_whitespace().filter_map(|t| t.parse().ok()).collect()
}

#[test]
fn method_rows_are_percent_with_mean() {
    let row = MethodRow::from_results("OMCRD", &folds(&[0.5, 0.6, 0.7, 0.55, 0.65])).unwrap();
    assert_eq!(row.folds.len(), 5);
    assert!((row.folds[1] - 60.0).abs() < 1e-9);
    assert!((row.mean - 60.0).abs() < 1e-9);
    assert!(MethodRow::from_results("empty", &[]).is_err());
}

#[test]
fn accuracy_table_has_a_column_per_fold_and_the_mean() {
    let report = Report {
        task: "GNG".into(),
        methods: vec![
            MethodRow::from_results("OMCRD", &folds(&[0.5, 0.6, 0.7, 0.55, 0.65])).unwrap(),
            MethodRow::from_results("Baseline", &folds(&[0.4, 0.5, 0.6, 0.45, 0.55])).unwrap(),
        ],
        compression: None,
        ablations: Vec::new(),
    };
    let text = render_report(&report);
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].contains("GNG"));
    assert_eq!(
        lines[1].split_whitespace().collect::<Vec<_>>(),
        ["Method", "Fold1", "Fold2", "Fold3", "Fold4", "Fold5", "Avg"]
    );
    assert_eq!(numbers(lines[2]), [50.0, 60.0, 70.0, 55.0, 65.0, 60.0]);
    assert!(lines[3].starts_with("Baseline"));
    assert_eq!(numbers(lines[3]).len(), 6);
    assert!(text.contains("optimistic"));
    assert!(!text.contains("ablation"));
    assert!(!text.contains("Model cost"));
}

#[test]
fn cost_and_ablation_sections_render_when_present() {
    let c = compression_report(&PeerConfig::default(), 3, true).unwrap();
    let report = Report {
        task: "MA".into(),
        methods: vec![MethodRow::from_results("OMCRD", &folds(&[0.5, 0.6])).unwrap()],
        compression: Some(c.clone()),
        ablations: vec![MethodRow::from_results("no-kl", &folds(&[0.4, 0.5])).unwrap()],
    };
    let text = render_report(&report);
    assert!(text.contains("Model cost (M = 3)"));
    let inference = text.lines().find(|l| l.starts_with("Inference")).unwrap();
    assert!((numbers(inference)[0] - c.infer_params as f64 / 1e3).abs() < 0.01);
    let compress = text.lines().find(|l| l.starts_with("Compress")).unwrap();
    assert!(compress.contains(&format!("{:.2}%", 100.0 * c.compression_ratio)));
    assert!(text.contains("Loss-term ablation (%)"));
    assert!(text.lines().any(|l| l.starts_with("no-kl")));

    let json = serde_json::to_string(&report).unwrap();
    assert_eq!(serde_json::from_str::<Report>(&json).unwrap(), report);
}

#[test]
fn sweep_lists_each_peer_count_and_its_baseline() {
    let report = SweepReport {
        task: "GNG".into(),
        rows: [2, 3]
            .into_iter()
            .map(|m| SweepRow {
                peers: m,
                omcrd: MethodRow::from_results("OMCRD", &folds(&[0.6, 0.7])).unwrap(),
                baseline: (m == 2).then(|| MethodRow::from_results("Baseline", &folds(&[0.5, 0.6])).unwrap()),
            })
            .collect(),
    };
    let text = render_sweep(&report);
    let labels: Vec<&str> = text.lines().filter(|l| l.starts_with("M=")).map(|l| l[..24].trim()).collect();
    assert_eq!(labels, ["M=2 OMCRD", "M=2 Baseline", "M=3 OMCRD"]);
    let json = serde_json::to_string(&report).unwrap();
    assert_eq!(serde_json::from_str::<SweepReport>(&json).unwrap(), report);
}
