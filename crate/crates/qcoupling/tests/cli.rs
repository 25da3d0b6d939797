use std::path::{Path, PathBuf};

use qcoupling::cli::{execute, main_with_args, CommandKind, RunConfig};
use qcoupling::error::{EXIT_CHECK_FAILED, EXIT_GUARD, EXIT_INVALID_INPUT, EXIT_OK};

fn run(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("qcoupling").chain(args.iter().copied()))
}

fn config(cmd: CommandKind, model: &str, out: &Path) -> RunConfig {
    RunConfig { command: Some(cmd), model: Some(model.into()), out: Some(out.to_path_buf()), ..RunConfig::default() }
}

fn find(files: &[PathBuf], kind: &str) -> PathBuf {
    files.iter().find(|f| f.file_name().unwrap().to_string_lossy().contains(kind)).cloned().unwrap_or_else(|| panic!("no {kind} file in {files:?}"))
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    assert_eq!(run(&["verify", "--model", "hypercube2", "--out", out]), EXIT_OK);
    assert_eq!(run(&["verify", "--model", "cycle3-printed", "--out", out]), EXIT_CHECK_FAILED);
    assert_eq!(run(&["verify", "--model", "torus4", "--out", out]), EXIT_INVALID_INPUT);
    assert_eq!(run(&["coalesce", "--model", "hypercube2", "--eps", "1.5", "--out", out]), EXIT_INVALID_INPUT);
    assert_eq!(run(&["coalesce", "--model", "hypercube7", "--out", out]), EXIT_GUARD);
    assert_eq!(run(&["dilate", "--model", "hypercube3", "--max-dilation-dim", "50", "--out", out]), EXIT_GUARD);
    assert_eq!(run(&["colorings"]), EXIT_INVALID_INPUT);
    assert_eq!(run(&["--help"]), EXIT_OK);
}

#[test]
fn printed_cycle_quantizes_to_a_non_cp_map() {
    let tmp = tempfile::tempdir().unwrap();
    let o = execute(&config(CommandKind::Quantize, "cycle3-printed", tmp.path())).unwrap();
    assert_eq!(o.exit_code, EXIT_OK);
    let min = o.summary["data"]["min_choi_eigenvalue"].as_f64().unwrap();
    assert!((min + 1.04).abs() < 0.01, "{min}");
    assert_eq!(o.summary["data"]["cp"], false);
    let csv_path = o.files.iter().find(|f| f.extension().unwrap() == "csv").unwrap();
    let csv = std::fs::read_to_string(csv_path).unwrap();
    assert!(csv.lines().next().unwrap().contains("order=basis-first"), "{csv}");
    assert_eq!(csv.lines().count(), 10);
}

#[test]
fn model_files_round_trip_through_quantize() {
    let tmp = tempfile::tempdir().unwrap();
    let o = execute(&config(CommandKind::Model, "hypercube2", tmp.path())).unwrap();
    let coupling = find(&o.files, "-coupling-");
    let chain = find(&o.files, "-chain-");
    let cfg = RunConfig {
        command: Some(CommandKind::Verify),
        chain: Some(chain),
        coupling: Some(coupling),
        out: Some(tmp.path().to_path_buf()),
        ..RunConfig::default()
    };
    let v = execute(&cfg).unwrap();
    assert_eq!(v.exit_code, EXIT_OK, "{:#?}", v.checks.iter().filter(|c| !c.pass).collect::<Vec<_>>());
    assert_eq!(v.summary["data"]["t_couple"], 3);
}

#[test]
fn malformed_chain_reports_location() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.json");
    std::fs::write(&path, "{\n  \"P\": [\n    [0.5, 0.5],\n    [0.5, 0.4]\n  ]\n}\n").unwrap();
    let cfg = RunConfig { command: Some(CommandKind::Validate), chain: Some(path), out: Some(tmp.path().into()), ..RunConfig::default() };
    let e = execute(&cfg).unwrap_err();
    assert_eq!(e.exit_code(), EXIT_INVALID_INPUT);
    let msg = e.to_string();
    assert!(msg.contains("bad.json") && msg.contains("P["), "{msg}");
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("run.json");
    let out = tmp.path().join("out");
    std::fs::write(&cfg_path, format!("{{\"command\": \"coalesce\", \"model\": \"hypercube8\", \"mc\": true, \"samples\": 500, \"seed\": 9, \"m-max\": 12, \"out\": {:?}}}", out)).unwrap();
    assert_eq!(run(&["--config", cfg_path.to_str().unwrap()]), EXIT_OK);
    assert_eq!(run(&["coalesce", "--seed", "10", "--config", cfg_path.to_str().unwrap()]), EXIT_OK);
    let names: Vec<String> = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    assert!(names.iter().any(|n| n.contains("seed9")) && names.iter().any(|n| n.contains("seed10")), "{names:?}");
    std::fs::write(&cfg_path, "{\"modle\": \"hypercube2\"}").unwrap();
    assert_eq!(run(&["verify", "--config", cfg_path.to_str().unwrap()]), EXIT_INVALID_INPUT);
}

#[test]
fn monte_carlo_outputs_ignore_worker_count() {
    let tmp = tempfile::tempdir().unwrap();
    let mut read = Vec::new();
    for (w, dir) in [(1, "a"), (4, "b"), (4, "c")] {
        let mut cfg = config(CommandKind::Coalesce, "hardcore-C6-l1/2", &tmp.path().join(dir));
        cfg.mc = Some(true);
        cfg.samples = Some(3000);
        cfg.workers = Some(w);
        let o = execute(&cfg).unwrap();
        read.push(o.files.iter().map(|f| (f.file_name().unwrap().to_owned(), std::fs::read(f).unwrap())).collect::<Vec<_>>());
    }
    assert_eq!(read[0], read[1]);
    assert_eq!(read[1], read[2]);
}

#[test]
fn evolve_and_dilate_summaries() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(CommandKind::Evolve, "hypercube3", tmp.path());
    cfg.rho = Some("basis:5".into());
    cfg.m_max = Some(30);
    let o = execute(&cfg).unwrap();
    assert_eq!(o.exit_code, EXIT_OK);
    assert!(o.summary["data"]["final_trace_distance"].as_f64().unwrap() < 1e-3);
    let trace = std::fs::read_to_string(find(&o.files, "-trace-")).unwrap();
    assert_eq!(trace.lines().filter(|l| !l.starts_with('#')).count(), 32);

    let d = execute(&config(CommandKind::Dilate, "hypercube2", tmp.path())).unwrap();
    assert_eq!(d.exit_code, EXIT_OK);
    assert_eq!(d.summary["data"]["kappa"], 4);
    assert_eq!(d.summary["data"]["mode"], "amplified");
}
