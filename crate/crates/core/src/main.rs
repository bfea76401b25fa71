//! Command-line front end: train models, generate guided motions, evaluate
//! them, plan trajectories, import poses, and run the gradient check.
//!
//! Every command writes a manifest (config + hash + seed) next to its
//! outputs and is deterministic given the manifest. Exit codes: 0 success,
//! 2 configuration errors, 3 I/O errors, 4 numeric failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use motiondiff::checkpoint::{self, Dtype};
use motiondiff::control::{ControlSpec, ControlSpecJson};
use motiondiff::dataset::{self, N_CLASSES};
use motiondiff::diffusion::{sample, SampleConfig, SamplerModel};
use motiondiff::error::Error;
use motiondiff::guidance::GuidanceConfig;
use motiondiff::kinematics::to_global;
use motiondiff::manifest::RunManifest;
use motiondiff::metrics::{EvalReport, MetricValues, SparsityRow};
use motiondiff::motion::{GlobalMotion, MotionJson};
use motiondiff::pose_import::{
    axis_transform, canonicalize, map_joints, CanonicalizeOptions, JointMapTable, RawPoseFile,
};
use motiondiff::schedule::ScheduleKind;
use motiondiff::skeleton::Skeleton;
use motiondiff::train::{self, TrainConfig};
use motiondiff::trajplan::{compose, plan, CurveSpec, Trajectory};

#[derive(Parser)]
#[command(
    name = "motiondiff",
    version,
    about = "Trajectory- and keyframe-pose-guided motion diffusion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and train the base denoiser and the
    /// control branch.
    Train(TrainArgs),
    /// Sample a motion under a control spec.
    Generate(GenerateArgs),
    /// Score generated motions against their control specs.
    Eval(EvalArgs),
    /// Plan a root trajectory from parametric curve specs.
    PlanTraj(PlanTrajArgs),
    /// Canonicalize an external pose file into the 22-joint format.
    ImportPose(ImportPoseArgs),
    /// Verify the analytic guidance gradient against finite differences.
    Gradcheck(GradcheckArgs),
}

/// Resolve an output directory: explicit flag, else $MOTIONDIFF_OUT/<cmd>,
/// else ./out/<cmd>.
fn resolve_out(flag: &Option<PathBuf>, command: &str) -> PathBuf {
    if let Some(p) = flag {
        return p.clone();
    }
    let root = std::env::var_os("MOTIONDIFF_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("out"));
    root.join(command)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn parse_condition(s: &str) -> Result<usize, Error> {
    if let Ok(n) = s.parse::<usize>() {
        if n < N_CLASSES {
            return Ok(n);
        }
        return Err(Error::Config(format!(
            "condition label {n} outside [0, {N_CLASSES})"
        )));
    }
    let lowered = s.to_lowercase().replace('-', "_");
    for (i, class) in dataset::CLASSES.iter().enumerate() {
        let name = serde_json::to_string(class).unwrap().replace('"', "");
        if name == lowered {
            return Ok(i);
        }
    }
    Err(Error::Config(format!("unknown condition '{s}'")))
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// File form of the train command's configuration (flags override fields).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainFileConfig {
    samples: usize,
    frames: usize,
    /// Epochs for the control branch; defaults to the base epochs.
    cn_epochs: Option<usize>,
    base_only: bool,
    dtype: Dtype,
    dataset_cache: Option<PathBuf>,
    train: TrainConfig,
}

impl Default for TrainFileConfig {
    fn default() -> Self {
        TrainFileConfig {
            samples: 256,
            frames: 64,
            cn_epochs: None,
            base_only: false,
            dtype: Dtype::F32,
            dataset_cache: None,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// JSON config file (flags override its fields).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    cn_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    t_steps: Option<usize>,
    #[arg(long)]
    schedule: Option<ScheduleKind>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    ff_dim: Option<usize>,
    /// Disable rotation augmentation for the control branch.
    #[arg(long)]
    no_rotation_aug: bool,
    #[arg(long)]
    max_yaw: Option<f64>,
    /// Reuse (or create) a dataset cache file.
    #[arg(long)]
    dataset_cache: Option<PathBuf>,
    /// Train only the base denoiser.
    #[arg(long)]
    base_only: bool,
    /// Checkpoint storage precision.
    #[arg(long)]
    dtype: Option<String>,
}

fn run_train(args: TrainArgs) -> Result<(), Error> {
    let mut cfg: TrainFileConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => TrainFileConfig::default(),
    };
    if let Some(v) = args.samples {
        cfg.samples = v;
    }
    if let Some(v) = args.frames {
        cfg.frames = v;
    }
    if let Some(v) = args.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = args.cn_epochs {
        cfg.cn_epochs = Some(v);
    }
    if let Some(v) = args.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = args.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = args.t_steps {
        cfg.train.t_steps = v;
    }
    if let Some(v) = args.schedule {
        cfg.train.schedule = v;
    }
    if let Some(v) = &args.optimizer {
        cfg.train.optimizer = match v.as_str() {
            "adam" => train::OptimizerKind::Adam,
            "sgd" => train::OptimizerKind::Sgd,
            other => return Err(Error::Config(format!("unknown optimizer '{other}'"))),
        };
    }
    if let Some(v) = args.clip_norm {
        cfg.train.clip_norm = v;
    }
    if let Some(v) = args.d_model {
        cfg.train.d_model = v;
    }
    if let Some(v) = args.n_layers {
        cfg.train.n_layers = v;
    }
    if let Some(v) = args.n_heads {
        cfg.train.n_heads = v;
    }
    if let Some(v) = args.ff_dim {
        cfg.train.ff_dim = v;
    }
    if args.no_rotation_aug {
        cfg.train.rotation_aug.enabled = false;
    }
    if let Some(v) = args.max_yaw {
        cfg.train.rotation_aug.max_yaw = v;
    }
    if args.dataset_cache.is_some() {
        cfg.dataset_cache = args.dataset_cache.clone();
    }
    if args.base_only {
        cfg.base_only = true;
    }
    if let Some(v) = &args.dtype {
        cfg.dtype = v.parse()?;
    }
    cfg.train.validate()?;

    let out = resolve_out(&args.out, "train");
    std::fs::create_dir_all(&out)?;

    let dataset = match &cfg.dataset_cache {
        Some(cache) if cache.exists() => {
            dataset::load_cache(cache, cfg.samples, cfg.frames, cfg.train.seed)?
        }
        Some(cache) => {
            let ds = dataset::gen_dataset(cfg.samples, cfg.frames, cfg.train.seed)?;
            dataset::save_cache(cache, &ds, cfg.frames, cfg.train.seed)?;
            ds
        }
        None => dataset::gen_dataset(cfg.samples, cfg.frames, cfg.train.seed)?,
    };
    eprintln!("dataset: {} samples x {} frames", dataset.len(), cfg.frames);

    let base = train::train_base(&dataset, &cfg.train)?;
    checkpoint::save_base(&out.join("base.ckpt"), &base.params, &base.stats, cfg.dtype)?;
    write_text(&out.join("train_base.csv"), &train::log_to_csv(&base.log))?;
    eprintln!(
        "base: {} steps, final loss {:.6}",
        base.log.len(),
        base.log.last().map(|r| r.loss).unwrap_or(f64::NAN)
    );

    if !cfg.base_only {
        let mut cn_cfg = cfg.train.clone();
        if let Some(e) = cfg.cn_epochs {
            cn_cfg.epochs = e;
        }
        let cn = train::train_controlnet(&dataset, &base.params, &base.stats, &cn_cfg)?;
        checkpoint::save_controlnet(
            &out.join("controlnet.ckpt"),
            &cn.params,
            &base.params.cfg,
            cfg.dtype,
        )?;
        write_text(
            &out.join("train_controlnet.csv"),
            &train::log_to_csv(&cn.log),
        )?;
        eprintln!(
            "controlnet: {} steps, final loss {:.6}",
            cn.log.len(),
            cn.log.last().map(|r| r.loss).unwrap_or(f64::NAN)
        );
    }

    RunManifest::new("train", Some(cfg.train.seed), serde_json::to_value(&cfg)?)
        .write(&out.join("manifest.json"))?;
    println!("train: wrote checkpoints to {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

#[derive(Args)]
struct GenerateArgs {
    /// Base checkpoint.
    #[arg(long)]
    base: PathBuf,
    /// Control-branch checkpoint (omit for the unconditioned model).
    #[arg(long)]
    controlnet: Option<PathBuf>,
    /// Control spec JSON.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output file stem.
    #[arg(long, default_value = "gen")]
    stem: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Condition label id or class name.
    #[arg(long, default_value = "0")]
    condition: String,
    #[arg(long)]
    schedule: Option<ScheduleKind>,
    /// Disable the gradient perturbation.
    #[arg(long)]
    no_guidance: bool,
    /// Guidance strength.
    #[arg(long)]
    tau: Option<f64>,
    /// Gradient steps per denoising step.
    #[arg(long)]
    guidance_steps: Option<usize>,
    /// Also export a BVH file.
    #[arg(long)]
    bvh: bool,
}

fn run_generate(args: GenerateArgs) -> Result<(), Error> {
    let out = resolve_out(&args.out, "generate");
    std::fs::create_dir_all(&out)?;

    let (base, stats) = checkpoint::load_base(&args.base)?;
    let cn = match &args.controlnet {
        Some(p) => Some(checkpoint::load_controlnet(p, &base)?),
        None => None,
    };
    let spec_json: ControlSpecJson = read_json(&args.spec)?;
    let control = ControlSpec::from_json(&spec_json)?;

    let guidance = if args.no_guidance {
        None
    } else {
        let mut g = GuidanceConfig::default();
        if let Some(t) = args.tau {
            g.tau = t;
        }
        if let Some(s) = args.guidance_steps {
            g.steps_per_denoise = s;
        }
        Some(g)
    };

    let cfg = SampleConfig {
        seed: args.seed,
        t_steps: base.cfg.t_steps,
        n_frames: control.n_frames(),
        condition: parse_condition(&args.condition)?,
        schedule: args.schedule.unwrap_or_default(),
        guidance,
    };

    let model = SamplerModel {
        denoiser: &base,
        controlnet: cn.as_ref(),
        stats: &stats,
    };
    let features = sample(&model, &cfg, Some(&control))?;
    let motion = to_global(&features);
    let skeleton = Skeleton::canonical();

    let motion_path = out.join(format!("{}.motion.json", args.stem));
    write_text(
        &motion_path,
        &serde_json::to_string(&motion.to_json(&skeleton))?,
    )?;
    write_text(
        &out.join(format!("{}.features.json", args.stem)),
        &serde_json::to_string(&features.to_json())?,
    )?;

    // Overlay CSV pairing the generated root path with the constraint.
    let mut overlay = String::from("frame,gen_x,gen_z,ref_x,ref_z,masked\n");
    for n in 0..motion.n_frames() {
        let root = motion.joint(n, 0);
        let target = control.traj_point(n);
        let masked = control.traj_mask()[n] as u8;
        overlay.push_str(&format!(
            "{n},{},{},{},{},{masked}\n",
            root[0], root[2], target[0], target[2]
        ));
    }
    write_text(&out.join(format!("{}.overlay.csv", args.stem)), &overlay)?;

    if args.bvh {
        let text = motiondiff::bvh::to_bvh(&motion, &skeleton)?;
        write_text(&out.join(format!("{}.bvh", args.stem)), &text)?;
    }

    RunManifest::new(
        "generate",
        Some(args.seed),
        serde_json::json!({
            "base": args.base,
            "controlnet": args.controlnet,
            "spec": args.spec,
            "stem": args.stem,
            "sample": &cfg,
        }),
    )
    .write(&out.join(format!("{}.manifest.json", args.stem)))?;
    println!("generate: wrote {}", motion_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Args)]
struct EvalArgs {
    /// Directory of generated motion JSON files.
    #[arg(long)]
    generated: PathBuf,
    /// Directory of control spec JSON files with matching names.
    #[arg(long)]
    specs: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Keyframe error threshold in meters.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

fn json_files(dir: &Path) -> Result<Vec<String>, Error> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().to_string();
        if name.ends_with(".json") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

fn run_eval(args: EvalArgs) -> Result<(), Error> {
    let out = resolve_out(&args.out, "eval");
    std::fs::create_dir_all(&out)?;

    let gen_names = json_files(&args.generated)?;
    let spec_names = json_files(&args.specs)?;
    let missing_specs: Vec<&String> = gen_names.iter().filter(|n| !spec_names.contains(n)).collect();
    let missing_gen: Vec<&String> = spec_names.iter().filter(|n| !gen_names.contains(n)).collect();
    if !missing_specs.is_empty() || !missing_gen.is_empty() {
        return Err(Error::Config(format!(
            "unpaired files; missing specs: {missing_specs:?}, missing generated: {missing_gen:?}"
        )));
    }
    if gen_names.is_empty() {
        return Err(Error::Config("no motion files to evaluate".into()));
    }

    // Group by the spec's controlled-frame count (the sparsity level).
    let mut groups: std::collections::BTreeMap<usize, (Vec<GlobalMotion>, Vec<ControlSpec>)> =
        std::collections::BTreeMap::new();
    for name in &gen_names {
        let motion_json: MotionJson = read_json(&args.generated.join(name))?;
        let motion = GlobalMotion::from_json(&motion_json)?;
        let spec_json: ControlSpecJson = read_json(&args.specs.join(name))?;
        let spec = ControlSpec::from_json(&spec_json)?;
        let sparsity = if spec.has_traj() {
            spec.traj_count()
        } else {
            spec.pose_count()
        };
        let slot = groups.entry(sparsity).or_default();
        slot.0.push(motion);
        slot.1.push(spec);
    }

    let mut rows = Vec::new();
    for (sparsity, (motions, specs)) in &groups {
        let gen_refs: Vec<&GlobalMotion> = motions.iter().collect();
        let spec_refs: Vec<&ControlSpec> = specs.iter().collect();
        let mut metrics = MetricValues::compute(&gen_refs, &spec_refs)?;
        if args.threshold != motiondiff::metrics::ERR_THRESHOLD {
            metrics.traj_err_50cm =
                motiondiff::metrics::traj_err(&gen_refs, &spec_refs, args.threshold)?;
            metrics.loc_err_50cm =
                motiondiff::metrics::loc_err(&gen_refs, &spec_refs, args.threshold)?;
        }
        rows.push(SparsityRow {
            sparsity: *sparsity,
            n_sequences: motions.len(),
            metrics,
        });
    }
    let report = EvalReport::from_rows(rows)?;
    write_text(&out.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
    write_text(&out.join("report.csv"), &report.to_csv())?;
    RunManifest::new(
        "eval",
        None,
        serde_json::json!({
            "generated": args.generated,
            "specs": args.specs,
            "threshold": args.threshold,
            "files": gen_names,
        }),
    )
    .write(&out.join("manifest.json"))?;
    println!(
        "eval: {} sequences in {} sparsity groups; aggregate avg_err = {:.4} m, pose_dist = {:.4} m",
        report.n_sequences,
        report.per_sparsity.len(),
        report.aggregate.avg_err,
        report.aggregate.pose_dist
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// plan-traj
// ---------------------------------------------------------------------------

#[derive(Args)]
struct PlanTrajArgs {
    /// Curve spec JSON: a single spec or {"segments": [spec, ...]}.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "traj")]
    stem: String,
    /// Translate the planned path so frame 0 sits at x = z = 0 (the gauge
    /// generated motions start from).
    #[arg(long)]
    start_at_origin: bool,
}

fn run_plan_traj(args: PlanTrajArgs) -> Result<(), Error> {
    let out = resolve_out(&args.out, "plan-traj");
    std::fs::create_dir_all(&out)?;

    let value: serde_json::Value = read_json(&args.spec)?;
    let mut trajectory: Trajectory = if let Some(segments) = value.get("segments") {
        let specs: Vec<CurveSpec> = serde_json::from_value(segments.clone())?;
        compose(&specs)?
    } else {
        let spec: CurveSpec = serde_json::from_value(value.clone())?;
        plan(&spec)?
    };
    if args.start_at_origin {
        trajectory = trajectory.translated_to_origin();
    }

    write_text(&out.join(format!("{}.csv", args.stem)), &trajectory.to_csv())?;
    let control = trajectory.to_control_spec();
    write_text(
        &out.join(format!("{}.controlspec.json", args.stem)),
        &serde_json::to_string(&control.to_json())?,
    )?;
    RunManifest::new("plan-traj", None, value).write(&out.join(format!("{}.manifest.json", args.stem)))?;
    println!(
        "plan-traj: {} frames -> {}",
        trajectory.n_frames(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// import-pose
// ---------------------------------------------------------------------------

#[derive(Args)]
struct ImportPoseArgs {
    /// Raw pose JSON file.
    #[arg(long)]
    pose: PathBuf,
    /// Joint map table (22 raw indices); defaults to the identity prefix.
    #[arg(long)]
    map: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "pose")]
    stem: String,
    /// Skip the (x, -y, -z) axis flip.
    #[arg(long)]
    no_axis_transform: bool,
    /// Drop the pose so its lowest joint touches the ground.
    #[arg(long)]
    floor_contact: bool,
}

fn run_import_pose(args: ImportPoseArgs) -> Result<(), Error> {
    let out = resolve_out(&args.out, "import-pose");
    std::fs::create_dir_all(&out)?;

    let raw: RawPoseFile = read_json(&args.pose)?;
    let table = match &args.map {
        Some(p) => read_json::<JointMapTable>(p)?,
        None => JointMapTable::identity_prefix(),
    };
    let mut joints = map_joints(&raw, &table)?;
    if !args.no_axis_transform {
        joints = axis_transform(&joints);
    }
    let pose = canonicalize(
        &joints,
        CanonicalizeOptions {
            floor_contact: args.floor_contact,
        },
    )?;

    let skeleton = Skeleton::canonical();
    let motion = pose.to_motion();
    let path = out.join(format!("{}.pose.json", args.stem));
    write_text(&path, &serde_json::to_string(&motion.to_json(&skeleton))?)?;
    RunManifest::new(
        "import-pose",
        None,
        serde_json::json!({
            "pose": args.pose,
            "map": args.map,
            "source": raw.source,
            "axis_transform": !args.no_axis_transform,
            "floor_contact": args.floor_contact,
        }),
    )
    .write(&out.join(format!("{}.manifest.json", args.stem)))?;
    println!("import-pose: wrote {}", path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cases per sparsity level.
    #[arg(long, default_value_t = 20)]
    cases: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run_gradcheck(args: GradcheckArgs) -> Result<(), Error> {
    let out = resolve_out(&args.out, "gradcheck");
    std::fs::create_dir_all(&out)?;
    let report = motiondiff::gradcheck::run(args.seed, args.cases)?;
    write_text(&out.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
    println!(
        "gradcheck: {} over {} cases, max relative error {:.3e} (tolerance {:.0e})",
        if report.pass { "PASS" } else { "FAIL" },
        report.results.len(),
        report.max_rel_err,
        report.tolerance
    );
    if !report.pass {
        // Point at the worst case.
        if let Some(worst) = report
            .results
            .iter()
            .max_by(|a, b| a.max_rel_err.partial_cmp(&b.max_rel_err).unwrap())
        {
            eprintln!(
                "worst case: sparsity {} case {} rel err {:.3e}",
                worst.sparsity, worst.case, worst.max_rel_err
            );
        }
        return Err(Error::InvalidInput(format!(
            "gradient check failed with max relative error {:.3e}",
            report.max_rel_err
        )));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => run_train(args),
        Command::Generate(args) => run_generate(args),
        Command::Eval(args) => run_eval(args),
        Command::PlanTraj(args) => run_plan_traj(args),
        Command::ImportPose(args) => run_import_pose(args),
        Command::Gradcheck(args) => run_gradcheck(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.class().exit_code() as u8)
        }
    }
}
