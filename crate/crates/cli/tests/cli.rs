use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

const BIN: &str = env!("CARGO_BIN_EXE_motionguide");
const PROMPT: &str = "a dog is running and a cat is sitting";

/// Model overrides that keep sweeps fast in tests.
const SMALL_MODEL: &[&str] = &[
    "--set",
    "model.frames=2",
    "--set",
    "model.latent_grid=8x8",
    "--set",
    "model.down_grid=4x4",
    "--set",
    "model.mid_grid=2x2",
    "--set",
    "model.up_grid=4x4",
    "--set",
    "model.dim=8",
];

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn last_line(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).lines().last().unwrap_or("").to_string()
}

fn generate(out: &Path, extra: &[&str]) -> Output {
    let boxes = fixture("dog_cat.txt");
    let mut args = vec!["generate", "--prompt", PROMPT, "--boxes", boxes.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    run(&args)
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

/// Relative path -> bytes for every file under `dir`.
fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn without_timestamps(mut v: serde_json::Value) -> serde_json::Value {
    let obj = v.as_object_mut().unwrap();
    obj.remove("started_unix");
    obj.remove("finished_unix");
    v
}

#[test]
fn generate_writes_full_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = generate(dir.path(), &[]);
    assert!(out.status.success(), "{}", last_line(&out));
    let trace = fs::read_to_string(dir.path().join("trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 70);
    assert_eq!(fs::read_to_string(dir.path().join("latents.jsonl")).unwrap().lines().count(), 51);
    let metrics = fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    for step in [1, 5, 25, 50] {
        let heat = dir.path().join(format!("heatmaps/step_{step:03}"));
        // dog, running, cat, sitting over 8 frames
        assert_eq!(fs::read_dir(&heat).unwrap().count(), 4 * 8, "step {step}");
        assert!(dir.path().join(format!("ca/step_{step:03}.json")).exists());
    }
    let m = manifest(dir.path());
    assert_eq!(m["complete"], true);
    assert_eq!(m["unguided"], false);
    assert_eq!(m["seeds"], serde_json::json!([0]));
    let digest = m["inputs"][0]["sha256"].as_str().unwrap();
    let bytes = fs::read(fixture("dog_cat.txt")).unwrap();
    let expected = sha2_hex(&bytes);
    assert_eq!(digest, expected);
}

fn sha2_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

#[test]
fn generate_is_byte_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let args = ["--set", "total_steps=12", "--set", "t1=2", "--set", "t2=6", "--seed", "4"];
    assert!(generate(a.path(), &args).status.success());
    assert!(generate(b.path(), &args).status.success());
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert_eq!(ta.len(), tb.len());
    for ((pa, ba), (pb, bb)) in ta.iter().zip(&tb) {
        assert_eq!(pa, pb);
        if pa.as_os_str() != "manifest.json" {
            assert!(ba == bb, "{} differs", pa.display());
        }
    }
    assert_eq!(without_timestamps(manifest(a.path())), without_timestamps(manifest(b.path())));
}

#[test]
fn zero_weights_are_flagged_unguided() {
    let dir = tempfile::tempdir().unwrap();
    let out = generate(dir.path(), &["--set", "lambda_sp=0", "--set", "lambda_syt=0", "--set", "total_steps=6", "--set", "t1=1", "--set", "t2=3"]);
    assert!(out.status.success(), "{}", last_line(&out));
    assert_eq!(manifest(dir.path())["unguided"], true);
}

#[test]
fn config_file_then_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# short run\ntotal_steps = 8\nt1 = 2\nt2 = 4\niters_spatial = 3\nmodel.seed = 2\n").unwrap();
    let out_dir = dir.path().join("out");
    let out = generate(&out_dir, &["--config", cfg.to_str().unwrap(), "--set", "iters_spatial=1"]);
    assert!(out.status.success(), "{}", last_line(&out));
    let trace = fs::read_to_string(out_dir.join("trace.jsonl")).unwrap();
    // two spatial steps at one iteration, two syntax steps
    assert_eq!(trace.lines().count(), 4);
    let m = manifest(&out_dir);
    assert_eq!(m["settings"]["model"]["seed"], 2);
    assert_eq!(m["inputs"].as_array().unwrap().len(), 2);

    fs::write(&cfg, "t1 = 2\n\nlambda_sp = lots\n").unwrap();
    let bad = generate(&out_dir, &["--config", cfg.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(last_line(&bad).contains("line 3"), "{}", last_line(&bad));
}

#[test]
fn malformed_boxes_exit_2_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let boxes = dir.path().join("boxes.txt");
    fs::write(
        &boxes,
        "Caption: x\nFrame 1: [{'id': 0, 'name': 'dog', 'box': [1, 2, 3, 4]}]\nFrame 2: [{'id': 0, 'name': 'dog', 'box': [1, 2, three, 4]}]\nBackground keyword: park\n",
    )
    .unwrap();
    let out = run(&["generate", "--prompt", "a dog is running", "--boxes", boxes.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let line = last_line(&out);
    assert!(line.starts_with("error[2]") && line.contains("line 3"), "{line}");
}

#[test]
fn validation_blocks_generate_unless_forced() {
    let dir = tempfile::tempdir().unwrap();
    let strict = generate(dir.path(), &["--max-step-px", "60", "--set", "total_steps=4", "--set", "t1=1", "--set", "t2=2"]);
    assert_eq!(strict.status.code(), Some(2));
    assert!(last_line(&strict).contains("VELOCITY"));
    let forced = generate(dir.path(), &["--max-step-px", "60", "--force", "--set", "total_steps=4", "--set", "t1=1", "--set", "t2=2"]);
    assert!(forced.status.success(), "{}", last_line(&forced));
}

#[test]
fn missing_input_is_io_error() {
    let out = run(&["parse-boxes", "/definitely/not/here.txt"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(last_line(&out).starts_with("error[4] io:"));
}

#[test]
fn box_commands() {
    let woman = fixture("woman_man.txt");
    let out = run(&["parse-boxes", woman.to_str().unwrap()]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["background"], "room");
    let lines = run(&["parse-boxes", "--lines", woman.to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&lines.stdout).contains("'box': [245, 70, 120, 200]"));

    let dog = fixture("dog_cat.txt");
    let v = run(&["validate-boxes", dog.to_str().unwrap(), "--max-step-px", "60"]);
    assert_eq!(v.status.code(), Some(2));
    let text = String::from_utf8_lossy(&v.stdout);
    assert!(text.lines().next().unwrap().starts_with("VELOCITY subject=0 frame=8"), "{text}");
    assert!(run(&["validate-boxes", dog.to_str().unwrap()]).status.success());

    let r = run(&["rasterize", dog.to_str().unwrap(), "--grid", "5x9"]);
    assert!(r.status.success());
    let text = String::from_utf8_lossy(&r.stdout);
    let first: Vec<&str> = text.lines().take(6).collect();
    assert_eq!(first[0], "subject 0 (running dog) frame 1");
    assert_eq!(first.len(), 6);
    assert!(first[1..].iter().all(|row| row.len() == 9));
}

#[test]
fn parse_prompt_lists_pairs() {
    let out = run(&["parse-prompt", "a man is walking and a dog is running"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let pairs = v["pairs"].as_array().unwrap();
    assert_eq!(pairs.len(), 2);
    assert_eq!((pairs[0]["noun_word"].as_str(), pairs[0]["verb_word"].as_str()), (Some("man"), Some("walking")));
    assert_eq!(pairs[1]["noun"], 6);
}

#[test]
fn gradcheck_suites_and_negative_control() {
    for component in ["stub", "losses"] {
        let out = run(&["gradcheck", component]);
        assert!(out.status.success(), "{component}: {}", last_line(&out));
        assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 6);
    }
    let bad = run(&["gradcheck", "stub", "--inject-fault"]);
    assert_eq!(bad.status.code(), Some(5));
    let line = last_line(&bad);
    assert!(line.starts_with("error[5] gradcheck: L_") && line.contains("coordinate"), "{line}");
}

#[test]
fn gradcheck_model_suite() {
    let out = run(&["gradcheck", "model"]);
    assert!(out.status.success(), "{}", last_line(&out));
}

fn ablate(dir: &Path, grid: Option<&Path>, extra: &[&str]) -> Output {
    let mut args = vec!["ablate", "--out", dir.to_str().unwrap()];
    if let Some(g) = grid {
        args.extend(["--grid", g.to_str().unwrap()]);
    }
    args.extend_from_slice(SMALL_MODEL);
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn ablate_row_counts_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.grid");
    fs::write(&empty, "# nothing swept\n").unwrap();
    let out = ablate(&dir.path().join("a"), Some(&empty), &["--seeds", "3", "--set", "total_steps=6", "--set", "t1=2", "--set", "t2=4"]);
    assert!(out.status.success(), "{}", last_line(&out));
    assert_eq!(fs::read_to_string(dir.path().join("a/rows.jsonl")).unwrap().lines().count(), 1);

    let bad = dir.path().join("bad.grid");
    fs::write(&bad, "t1 = 1, 2\nbogus = 1\n").unwrap();
    let out = ablate(&dir.path().join("b"), Some(&bad), &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(last_line(&out).contains("line 2"));
}

#[test]
fn ablate_default_grid_three_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = ablate(dir.path(), None, &["--seeds", "0,1,2", "--set", "total_steps=30"]);
    assert!(out.status.success(), "{}", last_line(&out));
    let rows = fs::read_to_string(dir.path().join("rows.jsonl")).unwrap();
    // 4 + 3 + 4 + 4 + 3 + 3 + 2 + 2 + 4 axis values
    assert_eq!(rows.lines().count(), 29 * 3);
    assert_eq!(manifest(dir.path())["complete"], true);
}

#[test]
fn ablate_output_independent_of_threads() {
    let dir = tempfile::tempdir().unwrap();
    let grid = dir.path().join("g.grid");
    fs::write(&grid, "mode = cartesian\nt1 = 1, 2\nlambda_syt = 10, 30\n").unwrap();
    let common = ["--seeds", "0,1", "--set", "total_steps=8", "--set", "t1=2", "--set", "t2=5"];
    let mut one = vec!["--threads", "1"];
    one.extend_from_slice(&common);
    let mut four = vec!["--threads", "4"];
    four.extend_from_slice(&common);
    assert!(ablate(&dir.path().join("one"), Some(&grid), &one).status.success());
    assert!(ablate(&dir.path().join("four"), Some(&grid), &four).status.success());
    for file in ["rows.jsonl", "table.txt"] {
        assert_eq!(fs::read(dir.path().join("one").join(file)).unwrap(), fs::read(dir.path().join("four").join(file)).unwrap(), "{file}");
    }
}

#[test]
fn interrupted_ablation_leaves_partial_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_path_buf();
    let mut args = vec!["--threads".to_string(), "1".into(), "ablate".into(), "--out".into(), out.to_str().unwrap().into(), "--seeds".into(), "0,1,2,3".into()];
    args.extend(SMALL_MODEL.iter().map(|s| s.to_string()));
    let mut child = Command::new(BIN).args(&args).stdout(Stdio::null()).stderr(Stdio::null()).spawn().unwrap();
    let rows = out.join("rows.jsonl");
    let start = Instant::now();
    while fs::read_to_string(&rows).map(|r| r.lines().count()).unwrap_or(0) < 2 {
        assert!(start.elapsed() < Duration::from_secs(120), "no rows streamed");
        std::thread::sleep(Duration::from_millis(20));
    }
    child.kill().unwrap();
    child.wait().unwrap();
    let m = manifest(&out);
    assert_eq!(m["complete"], false);
    assert!(m["finished_unix"].is_null());
    let partial = fs::read_to_string(&rows).unwrap();
    let n = partial.lines().count();
    assert!(n >= 2 && n < 29 * 4, "{n} rows");
    for line in partial.lines() {
        let row: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(row["label"].is_string());
    }
}

#[test]
fn render_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    assert!(generate(dir.path(), &["--set", "total_steps=3", "--set", "t1=1", "--set", "t2=2"]).status.success());
    let ca = dir.path().join("ca/step_002.json");
    let (a, b) = (dir.path().join("r/a.pgm"), dir.path().join("r/b.pgm"));
    for p in [&a, &b] {
        let out = run(&["render", "--ca", ca.to_str().unwrap(), "--token", "1", "--frame", "3", "--upscale", "2", "--out", p.to_str().unwrap()]);
        assert!(out.status.success(), "{}", last_line(&out));
    }
    let bytes = fs::read(&a).unwrap();
    assert_eq!(bytes, fs::read(&b).unwrap());
    assert!(bytes.starts_with(b"P5\n16 16\n255\n"));
    let bad = run(&["render", "--ca", ca.to_str().unwrap(), "--token", "40", "--out", a.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(2));
}
