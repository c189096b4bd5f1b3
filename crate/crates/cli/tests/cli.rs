use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fovcast_core::dataset::read_sessions;
use fovcast_core::eval::EvalReport;
use fovcast_core::heatmap::read_grids;

fn fovcast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fovcast"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = fovcast(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn report(dir: &Path) -> EvalReport {
    EvalReport::from_csv(&fs::read_to_string(dir.join("report.csv")).unwrap()).unwrap()
}

#[test]
fn ingest_keeps_frames_reports_bad_rows_and_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("toy.csv");
    let mut body = String::from("video_id,user_id,frame_index,theta_deg,phi_deg\n");
    for u in ["b", "a"] {
        for i in 0..60 {
            body.push_str(&format!("v1,{u},{i},{},{}\n", i as f64 * 0.5, 10.0));
        }
    }
    body.push_str("v1,a,60,0,95\n");
    fs::write(&raw, body).unwrap();

    let first = tmp.path().join("first");
    let out = fovcast(&[
        "ingest",
        "--adapter",
        "toy-csv",
        "--input",
        p(&raw),
        "--out",
        p(&first),
    ]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains(":122:"));
    let sessions = read_sessions(&first.join("sessions.ndjson")).unwrap();
    assert_eq!(sessions.len(), 2);
    assert_eq!(sessions[0].user_id, "a");
    assert!(sessions.iter().all(|s| s.frames.len() == 60));
    assert!(fs::read_to_string(first.join("rejected.txt"))
        .unwrap()
        .contains("phi"));
    assert!(first.join("run_config.json").exists());

    let second = tmp.path().join("second");
    ok(&[
        "ingest",
        "--input",
        p(&first.join("sessions.ndjson")),
        "--out",
        p(&second),
    ]);
    assert_eq!(
        fs::read(first.join("sessions.ndjson")).unwrap(),
        fs::read(second.join("sessions.ndjson")).unwrap()
    );
}

#[test]
fn heatmaps_have_one_grid_per_second_and_full_mass() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&[
        "synth",
        "--videos",
        "1",
        "--users",
        "2",
        "--seconds",
        "20",
        "--static",
        "--out",
        p(&data),
    ]);
    let sessions = data.join("sessions.ndjson");
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&["gen-heatmaps", "--sessions", p(&sessions), "--out", p(&a)]);
    ok(&["gen-heatmaps", "--sessions", p(&sessions), "--out", p(&b)]);
    for s in read_sessions(&sessions).unwrap() {
        let file = format!("{}__{}.bin", s.video_id, s.user_id);
        let bytes = fs::read(a.join(&file)).unwrap();
        assert_eq!(bytes, fs::read(b.join(&file)).unwrap());
        let grids = read_grids(&mut bytes.as_slice()).unwrap();
        assert_eq!(grids.len(), 20);
        if s.frames[0].2.abs() < 40.0 {
            assert!(grids.iter().all(|g| (g.sum() - 108.0 * 30.0).abs() < 1e-6));
        }
    }
}

#[test]
fn persistency_on_static_sessions_hits_everything() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&[
        "synth",
        "--videos",
        "1",
        "--users",
        "3",
        "--seconds",
        "25",
        "--static",
        "--out",
        p(&data),
    ]);
    let out = tmp.path().join("eval");
    ok(&[
        "eval",
        "--sessions",
        p(&data.join("sessions.ndjson")),
        "--baseline",
        "persistency",
        "--out",
        p(&out),
    ]);
    let r = report(&out);
    assert_eq!(r.horizons.len(), 10);
    assert!(r
        .horizons
        .iter()
        .all(|h| h.hit_rate.iter().all(|v| (*v - 1.0).abs() < 1e-12)));
    assert_eq!(EvalReport::from_csv(&r.to_csv().unwrap()).unwrap(), r);
}

#[test]
fn knn_beats_persistency_on_correlated_viewers() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&[
        "synth",
        "--videos",
        "3",
        "--users",
        "8",
        "--seconds",
        "40",
        "--seed",
        "3",
        "--out",
        p(&data),
    ]);
    let sessions = data.join("sessions.ndjson");
    let mut dirs = Vec::new();
    for b in ["persistency", "knn"] {
        let out = tmp.path().join(b);
        ok(&[
            "eval",
            "--sessions",
            p(&sessions),
            "--baseline",
            b,
            "--out",
            p(&out),
        ]);
        dirs.push(out);
    }
    let (per, knn) = (report(&dirs[0]), report(&dirs[1]));
    for (a, b) in per.horizons.iter().zip(&knn.horizons).skip(3) {
        assert!(
            b.hit_rate[1] > a.hit_rate[1],
            "horizon {}: {} vs {}",
            a.horizon,
            b.hit_rate[1],
            a.hit_rate[1]
        );
    }

    let cmp = tmp.path().join("cmp");
    let text = ok(&[
        "compare",
        "--reports",
        p(&dirs[0].join("report.csv")),
        p(&dirs[1].join("report.csv")),
        "--out",
        p(&cmp),
    ]);
    assert!(text.contains("knn"));
    let csv = fs::read_to_string(cmp.join("comparison.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("1,knn,"));
}

#[test]
fn train_predict_eval_round_trip_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&[
        "synth",
        "--videos",
        "2",
        "--users",
        "4",
        "--seconds",
        "12",
        "--out",
        p(&data),
    ]);
    let sessions = data.join("sessions.ndjson");
    let common = [
        "--variant",
        "ame-location",
        "--past-seconds",
        "3",
        "--horizons",
        "2",
        "--n-others",
        "3",
        "--hidden",
        "8",
        "--epochs",
        "2",
        "--seed",
        "4",
        "--test-videos",
        "video01",
    ];
    let mut digests = Vec::new();
    for run in ["w1", "w2"] {
        let out = tmp.path().join(run);
        let mut args = vec!["train", "--sessions", p(&sessions), "--out", p(&out)];
        args.extend(common);
        ok(&args);
        assert_eq!(
            fs::read_to_string(out.join("loss_curve.csv"))
                .unwrap()
                .lines()
                .count(),
            3
        );
        assert!(out.join("run_config.json").exists());
        digests.push(fs::read(out.join("weights.bin")).unwrap());
    }
    assert_eq!(digests[0], digests[1]);

    let weights = tmp.path().join("w1");
    let pred = tmp.path().join("pred");
    ok(&[
        "predict",
        "--weights",
        p(&weights),
        "--sessions",
        p(&sessions),
        "--out",
        p(&pred),
    ]);
    let rows = fs::read_to_string(pred.join("predictions.csv")).unwrap();
    assert!(rows.lines().count() > 1);

    let mut csvs = Vec::new();
    for run in ["e1", "e2"] {
        let out = tmp.path().join(run);
        ok(&[
            "eval",
            "--sessions",
            p(&sessions),
            "--weights",
            p(&weights),
            "--test-videos",
            "video01",
            "--out",
            p(&out),
        ]);
        csvs.push(fs::read_to_string(out.join("report.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
    assert_eq!(report(&tmp.path().join("e1")).model, "ame-location");
}

#[test]
fn heatmap_family_trains_and_evaluates() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&[
        "synth",
        "--videos",
        "1",
        "--users",
        "3",
        "--seconds",
        "6",
        "--out",
        p(&data),
    ]);
    let sessions = data.join("sessions.ndjson");
    let w = tmp.path().join("w");
    ok(&[
        "train",
        "--family",
        "heatmap",
        "--fusion",
        "others-direct",
        "--channels",
        "2,2",
        "--past-seconds",
        "2",
        "--horizons",
        "2",
        "--epochs",
        "1",
        "--sessions",
        p(&sessions),
        "--out",
        p(&w),
    ]);
    let out = tmp.path().join("eval");
    ok(&[
        "eval",
        "--sessions",
        p(&sessions),
        "--weights",
        p(&w),
        "--out",
        p(&out),
    ]);
    let r = report(&out);
    assert_eq!(r.model, "heatmap-others-direct");
    assert!(r.horizons.iter().all(|h| h.tile_overlap.is_some()));
}

#[test]
fn exit_codes_separate_usage_from_data_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let code = |args: &[&str]| fovcast(args).status.code();
    assert_eq!(code(&["no-such-command"]), Some(1));
    assert_eq!(
        code(&[
            "ingest",
            "--input",
            "x",
            "--adapter",
            "nope",
            "--out",
            p(&out)
        ]),
        Some(1)
    );
    assert_eq!(
        code(&[
            "eval",
            "--sessions",
            p(&tmp.path().join("missing")),
            "--baseline",
            "knn",
            "--out",
            p(&out)
        ]),
        Some(2)
    );
    let bad = tmp.path().join("bad.ndjson");
    fs::write(&bad, "{not json\n").unwrap();
    assert_eq!(
        code(&["gen-heatmaps", "--sessions", p(&bad), "--out", p(&out)]),
        Some(2)
    );
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "alphas = \"wide\"\n").unwrap();
    assert_eq!(
        code(&[
            "--config",
            p(&cfg),
            "gen-heatmaps",
            "--sessions",
            p(&bad),
            "--out",
            p(&out)
        ]),
        Some(1)
    );
}
