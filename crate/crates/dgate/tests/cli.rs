use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dgate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dgate"))
        .args(args)
        .env_remove("DGATE_SEED")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn toy_writes_both_trajectories_per_depth() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("toy");
    let args = ["toy", "--depths", "2,3,4", "--lambda", "0.5", "--steps", "2000", "--lr", "0.01", "--out", path_str(&out)];
    let run = dgate(&args);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let csv = fs::read_to_string(out.join("toy_trajectories.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,method,depth,lambda,w1,w2"));
    assert_eq!(csv.lines().count(), 1 + 6 * 2001);
    for d in ["2", "3", "4"] {
        for m in ["direct", "gated"] {
            assert!(csv.lines().any(|l| l.starts_with(&format!("2000,{m},{d},"))));
        }
    }
    assert!(!csv.contains('\r'));

    let again = dgate(&args);
    assert_eq!(code(&again), 2);
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));

    let mut forced = args.to_vec();
    forced.push("--force");
    assert_eq!(code(&dgate(&forced)), 0);
    assert_eq!(fs::read_to_string(out.join("toy_trajectories.csv")).unwrap(), csv);
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&dgate(&["toy"])), 2);
    assert_eq!(code(&dgate(&["no-such-command"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p");
    assert_eq!(code(&dgate(&["path", "--methods", "fista", "--depths", "3", "--out", path_str(&out)])), 2);
    assert_eq!(code(&dgate(&["path", "--methods", "lasso", "--out", path_str(&out)])), 2);
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"steps\": -1}").unwrap();
    assert_eq!(code(&dgate(&["toy", "--config", path_str(&bad), "--out", path_str(&out)])), 2);
    assert_eq!(code(&dgate(&["toy", "--config", "/nonexistent.json", "--out", path_str(&out)])), 2);
}

#[test]
fn single_point_path_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p");
    let run = dgate(&["path", "--methods", "fista", "--depths", "2", "--lambdas", "0.5", "--out", path_str(&out)]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let csv = fs::read_to_string(out.join("seed-0/path.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("0.5,2,fista,"));
    assert!(out.join("aggregate.csv").exists());
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "path");
    assert_eq!(manifest["seeds"], serde_json::json!([0]));
}

#[test]
fn path_seeds_and_manifest_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p");
    let args = [
        "path", "--methods", "dgating,oracle-ls", "--depths", "2,3", "--lambdas", "0.1,1", "--iters", "200", "--seeds", "3",
        "--seed", "5", "--jobs", "3", "--out", path_str(&out),
    ];
    assert_eq!(code(&dgate(&args)), 0);
    for s in 5..8 {
        let csv = fs::read_to_string(out.join(format!("seed-{s}/path.csv"))).unwrap();
        assert_eq!(csv.lines().count(), 1 + 4 + 2);
    }
    let agg = fs::read_to_string(out.join("aggregate.csv")).unwrap();
    assert_eq!(agg.lines().count(), 1 + 6);

    let rerun = dir.path().join("rerun");
    let manifest = out.join("manifest.json");
    let run = dgate(&["path", "--config", path_str(&manifest), "--out", path_str(&rerun)]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    for f in ["seed-5/path.csv", "seed-7/path.csv", "aggregate.csv", "manifest.json"] {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(rerun.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn env_seed_overrides_config_but_not_flag() {
    let dir = tempfile::tempdir().unwrap();
    let run = |extra: &[&str], env: Option<&str>, name: &str| -> serde_json::Value {
        let out = dir.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_dgate"));
        cmd.args(["toy", "--steps", "5", "--out", path_str(&out)]).args(extra);
        match env {
            Some(v) => cmd.env("DGATE_SEED", v),
            None => cmd.env_remove("DGATE_SEED"),
        };
        assert!(cmd.status().unwrap().success());
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap()
    };
    assert_eq!(run(&[], None, "a")["seeds"], serde_json::json!([0]));
    assert_eq!(run(&[], Some("42"), "b")["seeds"], serde_json::json!([42]));
    assert_eq!(run(&["--seed", "7"], Some("42"), "c")["seeds"], serde_json::json!([7]));
    let bad = Command::new(env!("CARGO_BIN_EXE_dgate"))
        .args(["toy", "--out", path_str(&dir.path().join("d"))])
        .env("DGATE_SEED", "minus one")
        .status()
        .unwrap();
    assert_eq!(bad.code(), Some(2));
}

#[test]
fn decay_flow_defaults_meet_the_rate() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let run = dgate(&["decay", "--jobs", "4", "--out", path_str(&out)]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stdout));
    let slopes = fs::read_to_string(out.join("slopes.csv")).unwrap();
    let mut rows = csv::Reader::from_reader(slopes.as_bytes());
    let headers = rows.headers().unwrap().clone();
    let rel = headers.iter().position(|h| h == "rel_err").unwrap();
    let n = rows
        .records()
        .map(|r| {
            let r = r.unwrap();
            assert!(r[rel].parse::<f64>().unwrap() < 0.01);
        })
        .count();
    assert_eq!(n, 9);
    assert!(out.join("decay_4_0.01.csv").exists());
    let trace = fs::read_to_string(out.join("decay_2_1.csv")).unwrap();
    assert!(trace.starts_with("t,loss_gated,loss_nonsmooth,misalignment,imbalance_max,active_groups\n"));
}

#[test]
fn decay_zero_lambda_is_conserved_and_sgd_reports_without_gate() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d0");
    let run = dgate(&["decay", "--lambdas", "0", "--depths", "3", "--t-end", "2", "--out", path_str(&out)]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stdout));
    let slopes = fs::read_to_string(out.join("slopes.csv")).unwrap();
    let row = slopes.lines().nth(1).unwrap();
    assert!(row.ends_with(",true,true"), "{row}");

    let out = dir.path().join("sgd");
    let run = dgate(&["decay", "--engine", "sgd", "--lambdas", "0.5", "--depths", "2", "--out", path_str(&out)]);
    assert_eq!(code(&run), 0);
    assert!(String::from_utf8_lossy(&run.stdout).contains("slope="));
}

#[test]
fn gradcheck_exit_codes() {
    let ok = dgate(&["gradcheck"]);
    assert_eq!(code(&ok), 0);
    assert!(String::from_utf8_lossy(&ok.stdout).contains("max relative error"));

    let flipped = dgate(&["gradcheck", "--inject-sign-flip"]);
    assert_eq!(code(&flipped), 1);
    let text = String::from_utf8_lossy(&flipped.stdout);
    assert!(text.contains("FAIL") && text.contains("D="), "{text}");

    let coarse = dgate(&["gradcheck", "--eps", "1e-3", "--tol", "1e-1"]);
    assert_eq!(code(&coarse), 0);
    assert_eq!(code(&dgate(&["gradcheck", "--eps", "1e-3"])), 1);
}

#[test]
fn gen_data_round_trips_through_path() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dgate(&["gen-data", "--seed", "3", "--out", path_str(&data)]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let train = fs::read_to_string(data.join("train.csv")).unwrap();
    assert_eq!(train.lines().count(), 201);
    assert!(train.lines().next().unwrap().ends_with(",x199,y"));

    let config = dir.path().join("path.json");
    let body = serde_json::json!({
        "files": {
            "train": data.join("train.csv"),
            "test": data.join("test.csv"),
            "partition": data.join("partition.json"),
            "true_support": [0, 1, 2, 3, 4, 5, 6]
        },
        "path": { "methods": ["oracle-ls", "fista"], "depths": [2], "lambdas": [0.3] }
    });
    fs::write(&config, body.to_string()).unwrap();
    let from_files = dir.path().join("files");
    let run = dgate(&["path", "--config", path_str(&config), "--out", path_str(&from_files)]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));

    let generated = dir.path().join("gen");
    let run = dgate(&[
        "path", "--methods", "oracle-ls,fista", "--depths", "2", "--lambdas", "0.3", "--seed", "3", "--out",
        path_str(&generated),
    ]);
    assert_eq!(code(&run), 0);
    let a = fs::read_to_string(from_files.join("seed-0/path.csv")).unwrap();
    let b = fs::read_to_string(generated.join("seed-3/path.csv")).unwrap();
    assert_eq!(a, b);

    let blobs = dir.path().join("blobs");
    assert_eq!(code(&dgate(&["gen-data", "--kind", "blobs", "--out", path_str(&blobs)])), 0);
    assert_eq!(fs::read_to_string(blobs.join("data.csv")).unwrap().lines().count(), 151);
}

#[test]
fn job_count_does_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let run = |jobs: &str| {
        let out = dir.path().join(format!("j{jobs}"));
        let args = [
            "path", "--methods", "dgating,fista,subgrad", "--depths", "2,3", "--lambdas", "0.1,1", "--iters", "100",
            "--jobs", jobs, "--out", path_str(&out),
        ];
        assert_eq!(code(&dgate(&args)), 0);
        fs::read(out.join("seed-0/path.csv")).unwrap()
    };
    assert_eq!(run("1"), run("4"));
}
