use layoutfuse::io::{self, LayoutDoc, SceneDoc};
use layoutfuse::metrics::{evaluate, EvalReport, MatchThresholds};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_layoutfuse"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn")
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

/// Compares against a checked-in file; `LAYOUTFUSE_BLESS=1` rewrites it.
fn golden(name: &str, actual: &Path) {
    let bytes = std::fs::read(actual).unwrap();
    let path = golden_dir().join(name);
    if std::env::var_os("LAYOUTFUSE_BLESS").is_some() {
        std::fs::create_dir_all(golden_dir()).unwrap();
        std::fs::write(&path, &bytes).unwrap();
        return;
    }
    let expected = std::fs::read(&path).unwrap_or_else(|_| panic!("missing golden file {}", path.display()));
    assert!(expected == bytes, "{name} differs from {}", path.display());
}

fn synth(dir: &Path, extra: &[&str]) {
    let mut args = vec!["synth", "--out", s(dir)];
    args.extend_from_slice(extra);
    ok(&args);
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    synth(&a, &["--walls", "4", "--cams", "3", "--seed", "7"]);
    synth(&b, &["--walls", "4", "--cams", "3", "--seed", "7"]);
    let (fa, fb) = (files(&a), files(&b));
    assert_eq!(fa.len(), 6 * 5 + 2);
    assert!(fa == fb);
    golden("scene_w4_c3_s7.json", &a.join("scene.json"));
}

#[test]
fn synth_rejects_non_rectilinear_wall_count() {
    let t = tempfile::tempdir().unwrap();
    let out = run(&["synth", "--walls", "5", "--out", s(t.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rectilinear"));
}

#[test]
fn full_flow_matches_golden_files() {
    let t = tempfile::tempdir().unwrap();
    let (sd, pd) = (t.path().join("scene"), t.path().join("run"));
    synth(&sd, &["--walls", "6", "--cams", "3", "--seed", "11", "--noise", "0.02"]);
    let manifest = sd.join("manifest.json");
    ok(&["pipeline", "--manifest", s(&manifest), "--out", s(&pd)]);
    let eval = pd.join("eval.json");
    ok(&["eval", "--layout", s(&pd.join("layout.json")), "--scene", s(&sd.join("scene.json")), "--out", s(&eval)]);
    ok(&["render-birdview", "--layout", s(&pd.join("layout.json")), "--out", s(&pd.join("birdview.svg"))]);
    ok(&["render-wireframe", "--layout", s(&pd.join("layout.json")), "--out", s(&pd.join("wireframe.obj"))]);
    golden("layout_w6_c3_s11.json", &pd.join("layout.json"));
    golden("report_w6_c3_s11.json", &pd.join("report.json"));
    golden("eval_w6_c3_s11.json", &eval);
    golden("birdview_w6_c3_s11.svg", &pd.join("birdview.svg"));
    golden("wireframe_w6_c3_s11.obj", &pd.join("wireframe.obj"));

    // The staged commands reproduce the one-shot pipeline.
    let st = t.path().join("staged");
    ok(&["layout", "--manifest", s(&manifest), "--out", s(&st)]);
    ok(&["align", "--manifest", s(&manifest), "--out", s(&st)]);
    ok(&["merge", "--partials", s(&st.join("partials.json")), "--alignment", s(&st.join("alignment.json")), "--out", s(&st)]);
    assert!(std::fs::read(st.join("layout.json")).unwrap() == std::fs::read(pd.join("layout.json")).unwrap());
    let seg = st.join("segments.svg");
    ok(&["render-birdview", "--partials", s(&st.join("partials.json")), "--alignment", s(&st.join("alignment.json")), "--out", s(&seg)]);
    golden("segments_w6_c3_s11.svg", &seg);

    // The report holds exactly what the library computes.
    let doc: LayoutDoc = io::read_document(&pd.join("layout.json"), io::LAYOUT_FORMAT).unwrap();
    let scene: SceneDoc = io::read_document(&sd.join("scene.json"), io::SCENE_FORMAT).unwrap();
    let direct = evaluate(&doc.layout, &doc.pose_map(), doc.anchor_image_id, &scene.scene, &MatchThresholds::default()).unwrap();
    let from_cli: EvalReport = io::read_document(&eval, io::EVAL_FORMAT).unwrap();
    assert_eq!(from_cli, direct);
    let ladder: Vec<(f64, f64)> = from_cli.ladder.iter().map(|r| (r.thresholds.angle_deg, r.thresholds.offset_m)).collect();
    assert_eq!(ladder, vec![(5.0, 0.1), (10.0, 0.15), (15.0, 0.2), (30.0, 0.4)]);
}

#[test]
fn noiseless_cuboid_gives_six_planes_and_perfect_report() {
    let t = tempfile::tempdir().unwrap();
    let (sd, pd) = (t.path().join("scene"), t.path().join("run"));
    synth(&sd, &["--walls", "4", "--cams", "3", "--seed", "2"]);
    ok(&["pipeline", "--manifest", s(&sd.join("manifest.json")), "--out", s(&pd)]);
    let doc: LayoutDoc = io::read_document(&pd.join("layout.json"), io::LAYOUT_FORMAT).unwrap();
    assert_eq!(doc.layout.planes.len(), 6);
    let eval = pd.join("eval.json");
    ok(&["eval", "--layout", s(&pd.join("layout.json")), "--scene", s(&sd.join("scene.json")), "--out", s(&eval)]);
    let r: EvalReport = io::read_document(&eval, io::EVAL_FORMAT).unwrap();
    assert_eq!((r.planes.precision, r.planes.recall), (100.0, 100.0));
    assert!(r.re_iou > 99.99 && r.re_pe < 0.01 && r.re_rmse < 1e-4);
    assert!(r.pose_accuracy.iter().all(|(_, a)| a.rra == 100.0 && a.rta == 100.0));
    assert!(r.maa30 > 0.9999);
}

#[test]
fn missing_mask_file_is_an_input_error() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), &["--cams", "2"]);
    let victim = t.path().join("bundles/001_000/plane_masks.lfpm");
    std::fs::remove_file(&victim).unwrap();
    let out = run(&["pipeline", "--manifest", s(&t.path().join("manifest.json")), "--out", s(&t.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&victim)));
}

#[test]
fn truncated_pointmap_reports_byte_offset() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), &["--cams", "2"]);
    let victim = t.path().join("bundles/000_001/pointmap_self.lfpm");
    let bytes = std::fs::read(&victim).unwrap();
    std::fs::write(&victim, &bytes[..1000]).unwrap();
    let out = run(&["layout", "--manifest", s(&t.path().join("manifest.json")), "--out", s(&t.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("pointmap_self.lfpm") && err.contains("byte 1000"), "{err}");
}

#[test]
fn thread_cap_does_not_change_output() {
    let t = tempfile::tempdir().unwrap();
    synth(&t.path().join("s"), &["--walls", "6", "--cams", "2", "--seed", "3"]);
    let m = t.path().join("s/manifest.json");
    let mut outs = Vec::new();
    for threads in ["1", "3"] {
        let o = t.path().join(threads);
        let st = bin().env("LAYOUTFUSE_THREADS", threads).args(["pipeline", "--manifest", s(&m), "--out", s(&o)]).status().unwrap();
        assert!(st.success());
        outs.push(std::fs::read(o.join("layout.json")).unwrap());
    }
    assert!(outs[0] == outs[1]);
    let bad = bin().env("LAYOUTFUSE_THREADS", "zero").args(["pipeline", "--manifest", s(&m), "--out", s(t.path())]).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn eval_rejects_a_scene_without_the_cameras() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    synth(&a, &["--cams", "3"]);
    synth(&b, &["--cams", "2"]);
    ok(&["pipeline", "--manifest", s(&a.join("manifest.json")), "--out", s(&a)]);
    let out = run(&["eval", "--layout", s(&a.join("layout.json")), "--scene", s(&b.join("scene.json")), "--out", s(&t.path().join("e.json"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_parameters_exit_with_usage_code() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), &["--cams", "2"]);
    let m = t.path().join("manifest.json");
    let out = run(&["pipeline", "--manifest", s(&m), "--out", s(t.path()), "--proximity", "0"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["pipeline", "--manifest", s(&m), "--out", s(t.path()), "--epsilon1=-1"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn reruns_are_idempotent() {
    let t = tempfile::tempdir().unwrap();
    synth(&t.path().join("s"), &["--cams", "2", "--seed", "4"]);
    let m = t.path().join("s/manifest.json");
    let o = t.path().join("o");
    ok(&["pipeline", "--manifest", s(&m), "--out", s(&o)]);
    let first = files(&o);
    ok(&["pipeline", "--manifest", s(&m), "--out", s(&o)]);
    assert!(files(&o) == first);
}
