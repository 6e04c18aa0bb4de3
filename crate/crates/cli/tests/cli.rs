use std::fs;
use std::path::{Path, PathBuf};

use mafbench_cli::output::{read_manifest, read_runs, MANIFEST_FILE, REPORT_FILE, RUNS_FILE};
use mafbench_cli::{parse_and_dispatch, EXIT_FAILURE, EXIT_OK, EXIT_USAGE};

fn cli(args: &[&str]) -> i32 {
    parse_and_dispatch(std::iter::once("mafbench").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_world(dir: &Path) -> PathBuf {
    let cfg = dir.join("w.json");
    fs::write(&cfg, r#"{"samples_per_modality": 400}"#).unwrap();
    let out = dir.join("world");
    assert_eq!(cli(&["gen-world", "--config", s(&cfg), "--out", s(&out)]), EXIT_OK);
    out.join("world.json")
}

#[test]
fn gen_world_writes_resolved_config_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let world = small_world(dir.path());
    let text = fs::read_to_string(&world).unwrap();
    assert!(text.contains("\"samples_per_modality\": 400"));
    assert!(text.contains("\"essence_dim\": 8"));
    let m = read_manifest(world.parent().unwrap()).unwrap();
    assert_eq!(m.files.len(), 1);
    assert_eq!(m.files[0].path, "world.json");
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let world = small_world(dir.path());
    let out = dir.path().join("o");
    assert_eq!(cli(&["sweep", "--world", s(&world), "--protocol", "foo", "--out", s(&out)]), EXIT_USAGE);
    assert_eq!(cli(&["sweep", "--world", s(&world), "--bogus", "--out", s(&out)]), EXIT_USAGE);
    assert_eq!(cli(&["sweep", "--world", s(&world), "--algorithms", "erm,nope", "--out", s(&out)]), EXIT_USAGE);
    assert_eq!(cli(&["frobnicate"]), EXIT_USAGE);
    assert_eq!(cli(&["--help"]), EXIT_OK);
    assert_eq!(cli(&["sweep", "--help"]), EXIT_OK);
    assert!(!out.exists());

    let typo = dir.path().join("typo.json");
    fs::write(&typo, r#"{"essence_dmi": 8}"#).unwrap();
    assert_eq!(cli(&["gen-world", "--config", s(&typo), "--out", s(&out)]), EXIT_USAGE);
    let mistyped = dir.path().join("mistyped.json");
    fs::write(&mistyped, r#"{"essence_dim": "eight"}"#).unwrap();
    assert_eq!(cli(&["gen-world", "--config", s(&mistyped), "--out", s(&out)]), EXIT_USAGE);
}

#[test]
fn missing_world_is_a_run_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let missing = dir.path().join("nope.json");
    assert_eq!(cli(&["sweep", "--world", s(&missing), "--out", s(&out)]), EXIT_FAILURE);
}

fn sweep(world: &Path, out: &Path, threads: &str) -> i32 {
    cli(&[
        "sweep", "--world", s(world), "--setting", "weak", "--protocol", "loo", "--algorithms", "erm,irm,concat",
        "--trials", "2", "--seeds", "1", "--steps", "100", "--out", s(out), "--threads", threads, "--global-seed", "4",
    ])
}

#[test]
fn sweep_outputs_are_complete_verifiable_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let world = small_world(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(sweep(&world, &a, "1"), EXIT_OK);
    assert_eq!(sweep(&world, &b, "2"), EXIT_OK);
    for f in [RUNS_FILE, REPORT_FILE] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }

    let runs = read_runs(&a.join(RUNS_FILE)).unwrap();
    assert_eq!(runs.len(), 3 * 3 * 2);
    assert_eq!(runs.iter().filter(|r| r.selected).count(), 3 * 3);
    let first = fs::read_to_string(a.join(RUNS_FILE)).unwrap();
    let line = first.lines().next().unwrap();
    let keys = ["run_id", "setting", "algorithm", "family", "protocol", "seed", "trial", "test_modality", "hparams",
        "checkpoints", "final_test_auc", "selected", "wall_ms"];
    let pos: Vec<usize> = keys.iter().map(|k| line.find(&format!("\"{k}\":")).unwrap()).collect();
    assert!(pos.windows(2).all(|w| w[0] < w[1]));
    assert!(line.contains("\"wall_ms\":null"));

    let m = read_manifest(&a).unwrap();
    let mut listed: Vec<&str> = m.files.iter().map(|f| f.path.as_str()).collect();
    listed.sort_unstable();
    let mut on_disk: Vec<String> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n != MANIFEST_FILE)
        .collect();
    on_disk.sort_unstable();
    assert_eq!(listed, on_disk);
    assert_eq!(m.runs.len(), runs.len());
    assert_eq!(m.global_seed, Some(4));

    assert_eq!(cli(&["report", "--verify", s(&a)]), EXIT_OK);
    let mut bytes = fs::read(a.join(REPORT_FILE)).unwrap();
    let last = bytes.len() - 2;
    bytes[last] ^= 1;
    fs::write(a.join(REPORT_FILE), bytes).unwrap();
    assert_eq!(cli(&["report", "--verify", s(&a)]), EXIT_FAILURE);

    // re-selection and re-aggregation reproduce the sweep's own files
    let sel = dir.path().join("sel");
    assert_eq!(cli(&["select", "--runs", s(&b.join(RUNS_FILE)), "--out", s(&sel)]), EXIT_OK);
    assert_eq!(fs::read(sel.join(RUNS_FILE)).unwrap(), fs::read(b.join(RUNS_FILE)).unwrap());
    assert_eq!(fs::read(sel.join(REPORT_FILE)).unwrap(), fs::read(b.join(REPORT_FILE)).unwrap());
    let rep = dir.path().join("rep");
    assert_eq!(cli(&["report", "--runs", s(&b.join(RUNS_FILE)), "--out", s(&rep)]), EXIT_OK);
    assert_eq!(fs::read(rep.join(REPORT_FILE)).unwrap(), fs::read(b.join(REPORT_FILE)).unwrap());
}

#[test]
fn run_analyze_and_ablate_emit_their_files() {
    let dir = tempfile::tempdir().unwrap();
    let world = small_world(dir.path());
    let run = dir.path().join("run");
    assert_eq!(
        cli(&["run", "--world", s(&world), "--algorithm", "ogm", "--protocol", "oracle", "--steps", "100", "--out", s(&run)]),
        EXIT_OK
    );
    assert!(run.join("detector.ckpt").exists());
    let rec = &read_runs(&run.join(RUNS_FILE)).unwrap()[0];
    assert_eq!(rec.test_modality, 2);
    assert!(!rec.notes.is_empty());

    let ana = dir.path().join("ana");
    assert_eq!(cli(&["analyze", "--world", s(&world), "--steps", "100", "--out", s(&ana)]), EXIT_OK);
    for f in ["analysis.json", "kl.csv", "projection.csv", RUNS_FILE, REPORT_FILE] {
        assert!(ana.join(f).exists(), "{f}");
    }
    assert_eq!(cli(&["report", "--verify", s(&ana)]), EXIT_OK);

    let abl = dir.path().join("abl");
    assert_eq!(
        cli(&["ablate", "--world", s(&world), "--modes", "full,random_init", "--seeds", "1", "--steps", "50", "--out", s(&abl)]),
        EXIT_OK
    );
    let csv = fs::read_to_string(abl.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 3);
}

#[test]
fn zero_seeds_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let world = small_world(dir.path());
    let out = dir.path().join("o");
    assert_eq!(cli(&["sweep", "--world", s(&world), "--seeds", "0", "--out", s(&out)]), EXIT_USAGE);
}
