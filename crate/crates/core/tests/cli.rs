use std::path::Path;
use std::process::{Command, Output};

fn acts(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acts"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("run acts")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn help_and_error_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let help = acts(&["--help"], dir.path());
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("ablate"));

    let missing = acts(&["train", "--data", "nope.csv"], dir.path());
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.csv"));

    let bad = acts(&["train", "--variant", "xyz"], dir.path());
    assert_eq!(bad.status.code(), Some(1));
    let unknown_flag = acts(&["train", "--depth", "3"], dir.path());
    assert_eq!(unknown_flag.status.code(), Some(1));

    std::fs::write(dir.path().join("run.toml"), "colour = \"blue\"\n").unwrap();
    let bad_config = acts(&["train", "--config", "run.toml"], dir.path());
    assert_eq!(bad_config.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad_config.stderr).contains("colour"));
}

#[test]
fn train_and_forecast_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&acts(&["synth", "--seed", "4", "--out", "syn"], d));
    let mut csvs = Vec::new();
    for run in ["a", "b"] {
        let common = ["--data", "syn/synthetic.csv", "--task", "hosp", "--issue-date", "2020-06-07", "--iters", "60"];
        let ckpt = format!("{run}/train");
        let mut args = vec!["train"];
        args.extend(common);
        args.extend(["--week-offset", "2", "--out", &ckpt]);
        ok(&acts(&args, d));
        let ckpt_file = format!("{ckpt}/checkpoint.json");
        let fc = format!("{run}/forecast");
        let mut args = vec!["forecast"];
        args.extend(common);
        args.extend(["--checkpoint", &ckpt_file, "--out", &fc]);
        ok(&acts(&args, d));
        csvs.push(std::fs::read(d.join(&fc).join("forecasts.csv")).unwrap());
        assert!(d.join(&fc).join("manifest.json").is_file());
    }
    assert_eq!(csvs[0], csvs[1]);
    let text = String::from_utf8(csvs.remove(0)).unwrap();
    assert!(text.starts_with("region,issue_date,target_end_date,week_offset,value\n"));
    assert!(text.contains("R00,2020-06-07,2020-06-15,2,"));
    assert_eq!(text.lines().count(), 1 + 20 * 7);

    let eval = acts(
        &["evaluate", "--data", "syn/synthetic.csv", "--task", "hosp", "--forecasts", "a/forecast/forecasts.csv", "--out", "ev"],
        d,
    );
    ok(&eval);
    let metrics = std::fs::read_to_string(d.join("ev/metrics.csv")).unwrap();
    assert!(metrics.starts_with("task,issue_date,week_offset,wape\nhosp,2020-06-07,2,"));
}

#[test]
fn ablate_one_variant_on_the_synthetic_benchmark() {
    let dir = tempfile::tempdir().unwrap();
    let out = acts(&["ablate", "--synthetic", "--variant", "i", "--seeds", "1", "--iters", "30", "--out", "ab"], dir.path());
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("i: median WAPE"));
    let csv = std::fs::read_to_string(dir.path().join("ab/benchmark.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("0,i,")));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&acts(&["synth", "--out", "syn"], d));
    std::fs::write(
        d.join("run.toml"),
        "data = \"syn/synthetic.csv\"\ntask = \"hosp\"\nweek_offsets = [1]\n[train]\niters = 5\nhidden = 8\n",
    )
    .unwrap();
    ok(&acts(&["train", "--config", "run.toml", "--hidden", "4", "--out", "t"], d));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("t/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["train"]["hidden"], 4);
    assert_eq!(manifest["config"]["train"]["iters"], 5);
    assert_eq!(manifest["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn ingest_converts_wide_cumulative_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("wide.csv"), "Province_State,2020-03-01,2020-03-02,2020-03-03\nAlabama,1,3,6\nAlaska,0,2,1\n")
        .unwrap();
    let before = std::fs::read(d.join("wide.csv")).unwrap();
    ok(&acts(&["ingest", "--data", "wide.csv", "--task", "cases", "--out", "ing"], d));
    let long = std::fs::read_to_string(d.join("ing/incidence.csv")).unwrap();
    assert_eq!(
        long,
        "region,date,value\nAlabama,2020-03-01,1\nAlabama,2020-03-02,2\nAlabama,2020-03-03,3\n\
         Alaska,2020-03-01,0\nAlaska,2020-03-02,2\nAlaska,2020-03-03,0\n"
    );
    assert_eq!(std::fs::read(d.join("wide.csv")).unwrap(), before);
}
