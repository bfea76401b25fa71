//! End-to-end checks of the command-line surface: file formats, manifests,
//! determinism, and exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use motiondiff::control::{ControlSpec, ControlSpecJson};
use motiondiff::dataset::{gen_dataset, sample_control};
use motiondiff::motion::{GlobalMotion, MotionJson};
use motiondiff::skeleton::Skeleton;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_motiondiff"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn motiondiff")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write(path: &Path, text: &str) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    std::fs::write(path, text).unwrap();
}

fn tiny_train(dir: &Path) -> (PathBuf, PathBuf) {
    let out = dir.join("train");
    let r = run(&[
        "train",
        "--out",
        out.to_str().unwrap(),
        "--samples",
        "10",
        "--frames",
        "24",
        "--epochs",
        "10",
        "--cn-epochs",
        "4",
        "--batch-size",
        "10",
        "--t-steps",
        "12",
        "--d-model",
        "16",
        "--n-layers",
        "1",
        "--n-heads",
        "2",
        "--ff-dim",
        "32",
        "--seed",
        "5",
    ]);
    assert_ok(&r);
    (out.join("base.ckpt"), out.join("controlnet.ckpt"))
}

#[test]
fn train_generate_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (base, cn) = tiny_train(dir.path());
    assert!(base.exists() && cn.exists());
    assert!(dir.path().join("train/train_base.csv").exists());
    assert!(dir.path().join("train/train_controlnet.csv").exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("train/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);

    // A 24-frame control spec from a planned line.
    let spec_path = dir.path().join("line.json");
    write(
        &spec_path,
        r#"{"kind":"line","start":[0,0.9,0],"end":[0,0.9,1.2],"n_frames":24}"#,
    );
    let plan_out = dir.path().join("plan");
    assert_ok(&run(&[
        "plan-traj",
        "--spec",
        spec_path.to_str().unwrap(),
        "--out",
        plan_out.to_str().unwrap(),
        "--stem",
        "line",
    ]));
    let csv = std::fs::read_to_string(plan_out.join("line.csv")).unwrap();
    assert_eq!(csv.lines().count(), 25); // header + 24 frames
    assert!(csv.starts_with("frame,x,y,z"));
    let control_path = plan_out.join("line.controlspec.json");
    let spec_json: ControlSpecJson =
        serde_json::from_str(&std::fs::read_to_string(&control_path).unwrap()).unwrap();
    assert_eq!(spec_json.n_frames, 24);

    // Generate with and without guidance.
    let gen_out = dir.path().join("gen");
    let gen_args = |extra: &[&str], out: &Path, stem: &str| {
        let mut v = vec![
            "generate".to_string(),
            "--base".into(),
            base.to_str().unwrap().into(),
            "--controlnet".into(),
            cn.to_str().unwrap().into(),
            "--spec".into(),
            control_path.to_str().unwrap().into(),
            "--out".into(),
            out.to_str().unwrap().into(),
            "--stem".into(),
            stem.into(),
            "--seed".into(),
            "9".into(),
            "--condition".into(),
            "walk_line".into(),
        ];
        v.extend(extra.iter().map(|s| s.to_string()));
        v
    };
    let a1 = gen_args(&["--tau", "0.05", "--bvh"], &gen_out, "g");
    assert_ok(&bin().args(&a1).output().unwrap());

    // Output frame count equals the spec's, overlay has the right shape.
    let motion_json: MotionJson =
        serde_json::from_str(&std::fs::read_to_string(gen_out.join("g.motion.json")).unwrap())
            .unwrap();
    assert_eq!(motion_json.frames.len(), 24);
    assert_eq!(motion_json.joints, Skeleton::canonical().joint_names());
    let overlay = std::fs::read_to_string(gen_out.join("g.overlay.csv")).unwrap();
    let mut lines = overlay.lines();
    assert_eq!(lines.next().unwrap(), "frame,gen_x,gen_z,ref_x,ref_z,masked");
    assert_eq!(lines.count(), 24);
    let bvh = std::fs::read_to_string(gen_out.join("g.bvh")).unwrap();
    assert!(bvh.starts_with("HIERARCHY"));
    assert!(bvh.contains("Frames: 24"));

    // Byte-identical on re-run with the same seed.
    let gen_out2 = dir.path().join("gen2");
    let a2 = gen_args(&["--tau", "0.05"], &gen_out2, "g");
    assert_ok(&bin().args(&a2).output().unwrap());
    assert_eq!(
        std::fs::read(gen_out.join("g.motion.json")).unwrap(),
        std::fs::read(gen_out2.join("g.motion.json")).unwrap()
    );

    // tau = 0 equals --no-guidance exactly.
    let gen_tau0 = dir.path().join("gen_tau0");
    let gen_off = dir.path().join("gen_off");
    assert_ok(&bin().args(gen_args(&["--tau", "0"], &gen_tau0, "g")).output().unwrap());
    assert_ok(&bin().args(gen_args(&["--no-guidance"], &gen_off, "g")).output().unwrap());
    assert_eq!(
        std::fs::read(gen_tau0.join("g.motion.json")).unwrap(),
        std::fs::read(gen_off.join("g.motion.json")).unwrap()
    );
}

#[test]
fn train_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (base1, cn1) = tiny_train(&dir.path().join("a"));
    let (base2, cn2) = tiny_train(&dir.path().join("b"));
    assert_eq!(std::fs::read(base1).unwrap(), std::fs::read(base2).unwrap());
    assert_eq!(std::fs::read(cn1).unwrap(), std::fs::read(cn2).unwrap());
}

#[test]
fn eval_ground_truth_against_itself_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let gen_dir = dir.path().join("generated");
    let spec_dir = dir.path().join("specs");
    std::fs::create_dir_all(&gen_dir).unwrap();
    std::fs::create_dir_all(&spec_dir).unwrap();

    // Five sparsity groups of ground-truth motions paired with their own
    // constraints.
    let ds = gen_dataset(10, 64, 42).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let skeleton = Skeleton::canonical();
    for (i, s) in ds.iter().enumerate() {
        let sparsity = [1usize, 2, 5, 49, 64][i % 5];
        let spec = sample_control(s, sparsity, &mut rng).unwrap();
        let name = format!("seq{i:02}.json");
        write(
            &gen_dir.join(&name),
            &serde_json::to_string(&s.global.to_json(&skeleton)).unwrap(),
        );
        write(
            &spec_dir.join(&name),
            &serde_json::to_string(&spec.to_json()).unwrap(),
        );
    }

    let out = dir.path().join("eval");
    assert_ok(&run(&[
        "eval",
        "--generated",
        gen_dir.to_str().unwrap(),
        "--specs",
        spec_dir.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]));

    let report: motiondiff::metrics::EvalReport =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    // Exactly the five sparsity rows plus the aggregate.
    assert_eq!(report.per_sparsity.len(), 5);
    let sparsities: Vec<usize> = report.per_sparsity.iter().map(|r| r.sparsity).collect();
    assert_eq!(sparsities, vec![1, 2, 5, 49, 64]);
    for row in &report.per_sparsity {
        assert_eq!(row.metrics.traj_err_50cm, 0.0);
        assert_eq!(row.metrics.loc_err_50cm, 0.0);
        assert!(row.metrics.avg_err < 1e-9);
        assert!(row.metrics.pose_dist < 1e-9);
    }
    // Aggregate equals the mean of the rows.
    let mean_avg: f64 = report
        .per_sparsity
        .iter()
        .map(|r| r.metrics.avg_err)
        .sum::<f64>()
        / 5.0;
    assert!((report.aggregate.avg_err - mean_avg).abs() < 1e-12);
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5 + 1);

    // Unpaired files abort with the config exit code.
    std::fs::remove_file(spec_dir.join("seq03.json")).unwrap();
    let r = run(&[
        "eval",
        "--generated",
        gen_dir.to_str().unwrap(),
        "--specs",
        spec_dir.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("seq03.json"));
}

#[test]
fn import_pose_and_axis_flags() {
    let dir = tempfile::tempdir().unwrap();
    // 30 raw joints; identity-prefix table takes the first 22.
    let joints: Vec<[f64; 3]> = (0..30)
        .map(|i| [0.01 * i as f64, -0.02 * i as f64, 0.5 + 0.01 * i as f64])
        .collect();
    let raw = serde_json::json!({"source": "estimator", "joints": joints});
    let pose_path = dir.path().join("raw.json");
    write(&pose_path, &raw.to_string());

    let out = dir.path().join("import");
    assert_ok(&run(&[
        "import-pose",
        "--pose",
        pose_path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--floor-contact",
    ]));
    let motion: MotionJson =
        serde_json::from_str(&std::fs::read_to_string(out.join("pose.pose.json")).unwrap()).unwrap();
    assert_eq!(motion.frames.len(), 1);
    assert_eq!(motion.frames[0].len(), 22);
    // Pelvis centered horizontally; lowest joint on the floor.
    assert_eq!(motion.frames[0][0][0], 0.0);
    assert_eq!(motion.frames[0][0][2], 0.0);
    let min_y = motion.frames[0]
        .iter()
        .map(|p| p[1])
        .fold(f64::INFINITY, f64::min);
    assert!(min_y.abs() < 1e-12);

    // Axis transform applied by default: raw y = -0.02i becomes positive
    // before grounding. With --no-axis-transform heights differ.
    let out2 = dir.path().join("import2");
    assert_ok(&run(&[
        "import-pose",
        "--pose",
        pose_path.to_str().unwrap(),
        "--out",
        out2.to_str().unwrap(),
        "--no-axis-transform",
        "--floor-contact",
    ]));
    let motion2: MotionJson =
        serde_json::from_str(&std::fs::read_to_string(out2.join("pose.pose.json")).unwrap())
            .unwrap();
    assert_ne!(motion.frames[0][5][1], motion2.frames[0][5][1]);
}

#[test]
fn plan_traj_composition_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let spec_path = dir.path().join("segments.json");
    write(
        &spec_path,
        r#"{"segments":[
            {"kind":"line","start":[0,0.9,0],"end":[0,0.9,2],"n_frames":5},
            {"kind":"line","start":[0,0.9,2],"end":[0,0.9,4],"n_frames":5}
        ]}"#,
    );
    let out = dir.path().join("plan");
    assert_ok(&run(&[
        "plan-traj",
        "--spec",
        spec_path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]));
    let csv = std::fs::read_to_string(out.join("traj.csv")).unwrap();
    assert_eq!(csv.lines().count(), 10); // header + 9 (bound frame deduped)

    // Discontinuous composition exits with the config code.
    write(
        &spec_path,
        r#"{"segments":[
            {"kind":"line","start":[0,0.9,0],"end":[0,0.9,2],"n_frames":5},
            {"kind":"line","start":[1,0.9,2],"end":[1,0.9,4],"n_frames":5}
        ]}"#,
    );
    let r = run(&[
        "plan-traj",
        "--spec",
        spec_path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(2));

    // start-at-origin translates the path.
    write(
        &spec_path,
        r#"{"kind":"circle","center":[0,0.9,0],"radius":2.0,"start_angle":0.0,"turns":0.5,"n_frames":8}"#,
    );
    assert_ok(&run(&[
        "plan-traj",
        "--spec",
        spec_path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--stem",
        "origin",
        "--start-at-origin",
    ]));
    let csv = std::fs::read_to_string(out.join("origin.csv")).unwrap();
    let first = csv.lines().nth(1).unwrap();
    let fields: Vec<&str> = first.split(',').collect();
    assert_eq!(fields[1].parse::<f64>().unwrap(), 0.0);
    assert_eq!(fields[3].parse::<f64>().unwrap(), 0.0);
}

#[test]
fn gradcheck_cli_reports_and_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gc");
    let r = run(&[
        "gradcheck",
        "--cases",
        "2",
        "--seed",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_ok(&r);
    assert!(String::from_utf8_lossy(&r.stdout).contains("PASS"));
    let report: motiondiff::gradcheck::GradcheckReport =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(report.pass);
    assert_eq!(report.results.len(), 10);
    assert!(report.results.iter().all(|c| c.max_rel_err.is_finite()));
}

#[test]
fn bad_config_and_io_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    // Unknown config keys are rejected (config class, exit 2).
    let cfg_path = dir.path().join("bad.json");
    write(&cfg_path, r#"{"samples": 4, "bogus_key": 1}"#);
    let r = run(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(2));

    // Missing checkpoint file: I/O class, exit 3.
    let spec_path = dir.path().join("spec.json");
    let spec = ControlSpec::empty(4);
    write(&spec_path, &serde_json::to_string(&spec.to_json()).unwrap());
    let r = run(&[
        "generate",
        "--base",
        dir.path().join("missing.ckpt").to_str().unwrap(),
        "--spec",
        spec_path.to_str().unwrap(),
        "--out",
        dir.path().join("y").to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(3));
}

#[test]
fn motion_json_schema_round_trips_through_lib_types() {
    // The CLI's motion files parse back into GlobalMotion.
    let ds = gen_dataset(1, 20, 9).unwrap();
    let skeleton = Skeleton::canonical();
    let text = serde_json::to_string(&ds[0].global.to_json(&skeleton)).unwrap();
    let parsed: MotionJson = serde_json::from_str(&text).unwrap();
    let motion = GlobalMotion::from_json(&parsed).unwrap();
    assert_eq!(motion, ds[0].global);
}
