use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;
use vetocert::{build_plan, io, AdversaryGeometry, Certifier, Image, VisionTransformer};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vetocert"))
        .args(args)
        .env_remove("VETOCERT_THREADS")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    /// Fragile toy weights plus `count` synthetic PNGs with a manifest.
    fn new(count: usize) -> Self {
        let ws = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        assert_eq!(code(&run(&["init", "--fragile", "--out", &ws.s("toy.pvwt")])), 0);
        let out = run(&[
            "synth", "--weights", &ws.s("toy.pvwt"), "--out-dir", &ws.s("data"), "--count", &count.to_string(),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn model(&self) -> VisionTransformer {
        let (cfg, w) = io::load(self.path("toy.pvwt")).unwrap();
        VisionTransformer::new(cfg, &w).unwrap()
    }

    fn image(&self, name: &str) -> Image {
        let img = image::open(self.path(name)).unwrap().to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
        Image::from_vec(h as usize, w as usize, 3, data).unwrap()
    }
}

#[test]
fn plan_reports_mask_counts() {
    let out = run(&["plan", "--image-size", "30", "--patch-size", "10", "--adv-width", "5", "--adv-height", "5"]);
    assert_eq!(code(&out), 0);
    assert_eq!(stdout(&out), "grid 3x3\nextent 2x2\nk 4\n");

    let out = run(&["plan", "--adv-size", "16", "--json"]);
    let doc: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(doc["k"], 169);
    assert_eq!(doc["grid"], serde_json::json!([14, 14]));
    assert_eq!(doc["extent"], serde_json::json!([2, 2]));
    assert_eq!(doc["origins"].as_array().unwrap().len(), 169);
    assert_eq!(doc["origins"][1], serde_json::json!([1, 0]));

    let out = run(&["plan", "--image-width", "64", "--image-height", "32", "--patch-size", "8",
        "--adv-width", "9", "--adv-height", "3"]);
    assert_eq!(stdout(&out), "grid 8x4\nextent 3x2\nk 18\n");
}

#[test]
fn plan_exit_codes() {
    let out = run(&["plan", "--image-size", "224", "--patch-size", "16", "--adv-size", "300"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("too large"));
    // every mask would hide the whole grid
    assert_eq!(code(&run(&["plan", "--image-size", "48", "--patch-size", "8", "--adv-size", "33"])), 2);
    assert_eq!(code(&run(&["plan", "--adv-width", "0", "--adv-height", "4"])), 1);
    assert_eq!(code(&run(&["plan", "--adv-width", "4"])), 1);
    assert_eq!(code(&run(&["plan"])), 1);
    assert_eq!(code(&run(&["plan", "--adv-size", "4", "--adv-width", "4", "--adv-height", "4"])), 1);
    assert_eq!(code(&run(&["plan", "--image-size", "30", "--patch-size", "16", "--adv-size", "4"])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["--threads", "0", "plan", "--adv-size", "4"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn certify_matches_the_library() {
    let ws = Workspace::new(4);
    let model = ws.model();
    let adv = AdversaryGeometry::square(6).unwrap();
    let certifier = Certifier::new(&model, build_plan(model.config(), adv).unwrap()).unwrap();
    for i in 0..4 {
        let name = format!("data/img{i:04}.png");
        let out = run(&["certify", "--weights", &ws.s("toy.pvwt"), "--input", &ws.s(&name), "--adv-size", "6"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let doc: Value = serde_json::from_str(&stdout(&out)).unwrap();
        let expected = certifier.certify(&ws.image(&name)).unwrap();
        assert_eq!(doc["id"], format!("img{i:04}.png"));
        assert_eq!(doc["prediction"], expected.prediction);
        assert_eq!(doc["verified"], expected.verified);
        assert_eq!(doc["k"], 16);
        assert_eq!(doc["votes"], serde_json::to_value(&expected.votes).unwrap());
        assert_eq!(doc["dissent_masks"], serde_json::to_value(&expected.dissent_masks).unwrap());
        assert!(doc["wall_ms"].as_f64().unwrap() >= 0.0);
    }
}

#[test]
fn certify_directory_writes_jsonl() {
    let ws = Workspace::new(10);
    let out = run(&["certify", "--weights", &ws.s("toy.pvwt"), "--input", &ws.s("data"),
        "--adv-width", "6", "--adv-height", "5", "--out", &ws.s("r.jsonl")]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = fs::read_to_string(ws.path("r.jsonl")).unwrap();
    let ids: Vec<String> = text
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["id"].as_str().unwrap().to_owned())
        .collect();
    let expected: Vec<String> = (0..10).map(|i| format!("img{i:04}.png")).collect();
    assert_eq!(ids, expected);
}

#[test]
fn certify_accepts_raw_tensors() {
    let ws = Workspace::new(1);
    let img = ws.image("data/img0000.png");
    let bytes: Vec<u8> = img.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(ws.path("x.bin"), &bytes).unwrap();
    let a = run(&["certify", "--weights", &ws.s("toy.pvwt"), "--input", &ws.s("x.bin"), "--raw", "--adv-size", "6"]);
    let b = run(&["certify", "--weights", &ws.s("toy.pvwt"), "--input", &ws.s("data/img0000.png"), "--adv-size", "6"]);
    let strip = |o: &Output| {
        let mut v: Value = serde_json::from_str(&stdout(o)).unwrap();
        v.as_object_mut().unwrap().remove("wall_ms");
        v.as_object_mut().unwrap().remove("id");
        v
    };
    assert_eq!(strip(&a), strip(&b));

    fs::write(ws.path("short.f32"), &bytes[..bytes.len() - 4]).unwrap();
    let out = run(&["certify", "--weights", &ws.s("toy.pvwt"), "--input", &ws.s("short.f32"), "--adv-size", "6"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn certify_error_codes() {
    let ws = Workspace::new(1);
    let w = ws.s("toy.pvwt");
    let img = ws.s("data/img0000.png");
    assert_eq!(code(&run(&["certify", "--weights", &w, "--input", &img, "--adv-width", "0", "--adv-height", "3"])), 1);
    assert_eq!(code(&run(&["certify", "--weights", &w, "--input", &img, "--adv-size", "30"])), 2);
    // 24px image, 4px patches: a 21px adversary needs 7 cells of a 6-cell grid
    assert_eq!(code(&run(&["certify", "--weights", &w, "--input", &img, "--adv-size", "21"])), 2);

    image::RgbImage::new(32, 32).save(ws.path("big.png")).unwrap();
    let out = run(&["certify", "--weights", &w, "--input", &ws.s("big.png"), "--adv-size", "6"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("32x32"));

    let out = run(&["certify", "--weights", &ws.s("nope.pvwt"), "--input", &img, "--adv-size", "6"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("nope.pvwt"));

    fs::write(ws.path("junk.pvwt"), b"PVWX....").unwrap();
    assert_eq!(code(&run(&["certify", "--weights", &ws.s("junk.pvwt"), "--input", &img, "--adv-size", "6"])), 1);
}

#[test]
fn evaluate_reproduces_hand_metrics() {
    let ws = Workspace::new(20);
    let model = ws.model();
    let adv = AdversaryGeometry::square(6).unwrap();
    let certifier = Certifier::new(&model, build_plan(model.config(), adv).unwrap()).unwrap();
    let outputs: Vec<(String, vetocert::CertifiedOutput)> = (0..20)
        .map(|i| {
            let name = format!("img{i:04}.png");
            let out = certifier.certify(&ws.image(&format!("data/{name}"))).unwrap();
            (name, out)
        })
        .collect();
    let verified: Vec<_> = outputs.iter().filter(|(_, o)| o.verified).take(2).collect();
    let unverified: Vec<_> = outputs.iter().filter(|(_, o)| !o.verified).take(2).collect();
    assert_eq!((verified.len(), unverified.len()), (2, 2), "toy data lacks a mix of verdicts");
    let wrong = |o: &vetocert::CertifiedOutput| (o.prediction + 1) % 10;
    // (correct, verified): (y, y), (n, y), (y, n), (n, n)
    let manifest = serde_json::json!([
        {"path": verified[0].0, "label": verified[0].1.prediction},
        {"path": verified[1].0, "label": wrong(&verified[1].1)},
        {"path": unverified[0].0, "label": unverified[0].1.prediction},
        {"path": unverified[1].0, "label": wrong(&unverified[1].1)},
    ]);
    fs::write(ws.path("data/hand.json"), manifest.to_string()).unwrap();

    let out = run(&["evaluate", "--weights", &ws.s("toy.pvwt"), "--manifest", &ws.s("data/hand.json"),
        "--adv-size", "6", "--out", &ws.s("m.json"), "--per-sample", &ws.s("p.jsonl"), "--csv", &ws.s("s.csv")]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let m: Value = serde_json::from_str(&fs::read_to_string(ws.path("m.json")).unwrap()).unwrap();
    assert_eq!(m["acc_clean"], 0.5);
    assert_eq!(m["acc_certified"], 0.25);
    assert_eq!(m["r_trust"], 0.5);
    assert_eq!(m["acc_in_trust"], 0.5);
    assert_eq!((m["total"].as_u64(), m["correct"].as_u64()), (Some(4), Some(2)));
    assert_eq!((m["verified"].as_u64(), m["verified_and_correct"].as_u64()), (Some(2), Some(1)));

    let per_sample = fs::read_to_string(ws.path("p.jsonl")).unwrap();
    assert_eq!(per_sample.lines().count(), 4);
    let first: Value = serde_json::from_str(per_sample.lines().next().unwrap()).unwrap();
    assert_eq!(first["correct"], true);
    assert_eq!(first["verified"], true);

    let csv = fs::read_to_string(ws.path("s.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("id,label,prediction,verified,num_dissent"));
    assert_eq!(lines.count(), 4);
}

#[test]
fn evaluate_csv_manifest_line_counts() {
    let ws = Workspace::new(7);
    let out = run(&["evaluate", "--weights", &ws.s("toy.pvwt"), "--manifest", &ws.s("data/manifest.csv"),
        "--adv-size", "6", "--per-sample", &ws.s("p.jsonl")]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let m: Value = serde_json::from_str(&stdout(&out)).unwrap();
    // synth labels images with the model's own prediction
    assert_eq!(m["acc_clean"], 1.0);
    assert_eq!(fs::read_to_string(ws.path("p.jsonl")).unwrap().lines().count(), 7);
}

#[test]
fn evaluate_error_codes() {
    let ws = Workspace::new(2);
    let w = ws.s("toy.pvwt");
    fs::write(ws.path("empty.csv"), "path,label\n").unwrap();
    assert_eq!(code(&run(&["evaluate", "--weights", &w, "--manifest", &ws.s("empty.csv"), "--adv-size", "6"])), 1);
    fs::write(ws.path("empty.json"), "[]").unwrap();
    assert_eq!(code(&run(&["evaluate", "--weights", &w, "--manifest", &ws.s("empty.json"), "--adv-size", "6"])), 1);

    fs::write(ws.path("missing.csv"), "path,label\ndata/ghost.png,0\n").unwrap();
    let out = run(&["evaluate", "--weights", &w, "--manifest", &ws.s("missing.csv"), "--adv-size", "6"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("ghost.png"));

    fs::write(ws.path("label.csv"), "path,label\ndata/img0000.png,10\n").unwrap();
    assert_eq!(code(&run(&["evaluate", "--weights", &w, "--manifest", &ws.s("label.csv"), "--adv-size", "6"])), 1);
    assert_eq!(code(&run(&["evaluate", "--weights", &w, "--manifest", &ws.s("nothing.csv"), "--adv-size", "6"])), 1);
}

#[test]
fn fuzz_default_run_is_clean() {
    let ws = Workspace::new(5);
    let out = run(&["fuzz", "--weights", &ws.s("toy.pvwt"), "--manifest", &ws.s("data/manifest.csv"),
        "--adv-size", "6", "--out", &ws.s("f.json")]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let r: Value = serde_json::from_str(&fs::read_to_string(ws.path("f.json")).unwrap()).unwrap();
    assert_eq!(r["seed"], 42);
    assert_eq!(r["totals"]["trials"], 500);
    assert_eq!(r["totals"]["violations"], 0);
    assert_eq!(r["totals"]["flips"], r["totals"]["flips_detected"]);
    assert!(!ws.path("counterexamples").exists());
}

#[test]
fn fuzz_greedy_flips_are_detected() {
    let ws = Workspace::new(2);
    let out = run(&["fuzz", "--weights", &ws.s("toy.pvwt"), "--manifest", &ws.s("data/manifest.csv"),
        "--adv-size", "6", "--mode", "greedy", "--trials", "50", "--steps", "10"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let r: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(r["mode"], "greedy");
    assert_eq!(r["totals"]["violations"], 0);
    assert_eq!(r["totals"]["flips"], r["totals"]["flips_detected"]);
    assert!(r["totals"]["trials"].as_u64().unwrap() >= 100);
}

#[test]
fn fuzz_catches_disabled_masking_and_bundles_replay() {
    let ws = Workspace::new(5);
    let bundles = ws.path("cx");
    let out = run(&["fuzz", "--weights", &ws.s("toy.pvwt"), "--manifest", &ws.s("data/manifest.csv"),
        "--adv-size", "6", "--trials", "50", "--disable-masks", "--bundle-dir", &ws.s("cx"), "--out", &ws.s("f.json")]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    let r: Value = serde_json::from_str(&fs::read_to_string(ws.path("f.json")).unwrap()).unwrap();
    let violations = r["totals"]["violations"].as_u64().unwrap();
    assert!(violations > 0);

    let mut jsons: Vec<PathBuf> = fs::read_dir(&bundles)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    jsons.sort();
    assert_eq!(jsons.len() as u64, violations);
    let bundle: Value = serde_json::from_str(&fs::read_to_string(&jsons[0]).unwrap()).unwrap();
    assert!(Path::new(bundle["image"].as_str().unwrap()).exists());
    let content = bundles.join(bundle["content_file"].as_str().unwrap());
    assert_eq!(fs::metadata(content).unwrap().len(), 6 * 6 * 3 * 4);

    let out = run(&["replay", "--weights", &ws.s("toy.pvwt"), "--bundle", jsons[0].to_str().unwrap()]);
    assert_eq!(code(&out), 3);
    let verdict: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(verdict["violation"], true);
}

#[test]
fn replaying_against_a_masked_engine_is_safe() {
    let ws = Workspace::new(5);
    let out = run(&["fuzz", "--weights", &ws.s("toy.pvwt"), "--manifest", &ws.s("data/manifest.csv"),
        "--adv-size", "6", "--trials", "50", "--disable-masks", "--bundle-dir", &ws.s("cx")]);
    assert_eq!(code(&out), 3);
    let first = fs::read_dir(ws.path("cx"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "json"))
        .unwrap();
    // same patch, masking restored: the patched image must not verify with a new label
    let text = fs::read_to_string(&first).unwrap().replace("\"disabled\"", "\"key_exclusion\"");
    fs::write(&first, text).unwrap();
    let out = run(&["replay", "--weights", &ws.s("toy.pvwt"), "--bundle", first.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
}

#[test]
fn thread_count_comes_from_the_environment() {
    let ws = Workspace::new(3);
    let args = ["fuzz", "--weights", &ws.s("toy.pvwt"), "--manifest", &ws.s("data/manifest.csv"),
        "--adv-size", "6", "--trials", "20"];
    let with_env = Command::new(env!("CARGO_BIN_EXE_vetocert"))
        .args(args)
        .env("VETOCERT_THREADS", "3")
        .output()
        .unwrap();
    assert_eq!(code(&with_env), 0);
    assert_eq!(stdout(&with_env), stdout(&run(&args)));
    let bad = Command::new(env!("CARGO_BIN_EXE_vetocert"))
        .args(args)
        .env("VETOCERT_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(code(&bad), 1);
}

#[test]
fn init_is_deterministic_and_loadable() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.pvwt");
    let b = dir.path().join("b.pvwt");
    let c = dir.path().join("c.pvwt");
    for p in [&a, &b] {
        assert_eq!(code(&run(&["init", "--seed", "9", "--out", p.to_str().unwrap()])), 0);
    }
    assert_eq!(code(&run(&["init", "--seed", "10", "--out", c.to_str().unwrap()])), 0);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
    let (cfg, w) = io::load(&a).unwrap();
    assert_eq!(cfg.grid(), (6, 6));
    w.validate(&cfg).unwrap();
    assert_eq!(code(&run(&["init", "--embed-dim", "30", "--heads", "4", "--out", c.to_str().unwrap()])), 1);
}
