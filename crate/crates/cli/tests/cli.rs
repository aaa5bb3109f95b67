use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn advlogo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_advlogo"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn zoo_list_prints_seven_specs() {
    let text = stdout(&advlogo(&["zoo-list"]));
    let ids: Vec<String> = text
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["id"]
                .as_str()
                .unwrap()
                .to_string()
        })
        .collect();
    assert_eq!(
        ids,
        ["det0", "det1", "det2", "det3", "det4", "det5", "det6"]
    );
}

#[test]
fn gradcheck_reports_small_errors() {
    let text = stdout(&advlogo(&[
        "gradcheck",
        "--instances",
        "1",
        "--coords",
        "4",
    ]));
    let mut lines = text.lines();
    assert!(lines
        .next()
        .unwrap()
        .starts_with("seed,freq_rel,embedding_rel"));
    let row: Vec<f64> = lines
        .next()
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    assert!(row[1] < 1e-4 && row[2] < 1e-4, "{row:?}");
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("config.json");
    fs::write(
        &path,
        r#"{"attack": {"m": 1, "k": 2, "t": 5, "latent_shape": [1, 4, 8, 8]},
            "scenes": {"count": 2, "height": 96, "width": 96}}"#,
    )
    .unwrap();
    path.display().to_string()
}

#[test]
fn attack_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let run = dir.path().join("run");
    let text = stdout(&advlogo(&[
        "attack",
        "--config",
        &config,
        "--out-dir",
        run.to_str().unwrap(),
    ]));
    assert!(text.contains("2 iterations"), "{text}");
    let csv = fs::read_to_string(run.join("loss_history.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    let eval = dir.path().join("eval");
    let text = stdout(&advlogo(&[
        "eval",
        "--patch",
        run.join("tau.ppm").to_str().unwrap(),
        "--scenes",
        "3",
        "--out-dir",
        eval.to_str().unwrap(),
    ]));
    assert!(text.contains("black-box avg"));
    let report = fs::read_to_string(eval.join("report.csv")).unwrap();
    assert!(report.starts_with("detector_id,map,role\n"));
    assert_eq!(report.lines().count(), 8);
    assert!(eval.join("report.json").is_file());
}

#[test]
fn bad_config_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"attack": {"alpha": -1}}"#).unwrap();
    let out = advlogo(&[
        "attack",
        "--config",
        path.to_str().unwrap(),
        "--out-dir",
        "unused",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpha"));
    assert!(!Path::new("unused").exists());
}
