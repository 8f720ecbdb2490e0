use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use activestereo::channel_exchange::{self, BnBranchParams, ExchangeConfig, ExchangeMode, DEMO_BRANCHES};
use activestereo::geometry::depth_to_normalized_disparity;
use activestereo::io;
use activestereo::landmarks::{self, LandmarkParams, SparseDepthImage};
use activestereo::losses::{LossWeights, PhotoMode};
use activestereo::metrics::{compute_metrics, format_table};
use activestereo::pipeline::{self, PipelineConfig};
use activestereo::refine::{self, Objective, Schedule};
use activestereo::scene_sim::{presets, sliding_trajectory, PassiveFrame, Scene};
use activestereo::sgm::{self, SgmParams};
use activestereo::{DepthMap, Image, Pose, StereoRig, Tensor};
use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Active-stereo depth completion toolkit.
#[derive(Parser)]
#[command(name = "activestereo", version)]
struct Cli {
    /// Seed for texture noise and demo parameters
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Worker threads (0 = all cores); results do not depend on it
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// Log progress (repeat for more detail)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    /// Stereo rig JSON; defaults to the 160×120 desk rig
    #[arg(long, global = true)]
    rig: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render an interleaved active/passive sequence with ground truth
    Synth(SynthArgs),
    /// Semi-dense depth from a rectified stereo pair
    Sgm(SgmArgs),
    /// Track landmarks over the passive frames of a rendered sequence
    Landmarks(LandmarkArgs),
    /// Complete depth for the central triplet of a sequence
    Refine(RefineArgs),
    /// Dump photometric loss maps at a given depth
    LossMap(LossMapArgs),
    /// Run channel exchange on toy features of a scene and dump its routing
    ExchangeDemo(ExchangeArgs),
    /// Score a depth map against ground truth
    Eval(EvalArgs),
}

#[derive(Args)]
struct SequenceArgs {
    /// Scene JSON file or preset name (blank-wall, textured-plane, occluder, occluded-floor, pattern-wall)
    #[arg(long)]
    scene: String,

    /// Trajectory file (`t tx ty tz qx qy qz qw`, world-from-camera per line)
    #[arg(long, conflicts_with_all = ["frames", "step"])]
    trajectory: Option<PathBuf>,

    /// Poses of the default sliding trajectory
    #[arg(long, default_value_t = pipeline::SEQUENCE_LENGTH)]
    frames: usize,

    /// Lateral step of the default trajectory, meters
    #[arg(long, default_value_t = pipeline::SEQUENCE_STEP)]
    step: f64,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    sequence: SequenceArgs,

    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SgmArgs {
    #[arg(long)]
    left: PathBuf,
    #[arg(long)]
    right: PathBuf,
    /// Output depth PFM (invalid pixels stored as 0)
    #[arg(long)]
    out: PathBuf,
    /// SGM parameter JSON; missing fields take defaults
    #[arg(long)]
    params: Option<PathBuf>,
}

#[derive(Args)]
struct LandmarkArgs {
    /// Directory written by `synth`
    #[arg(long)]
    frames: PathBuf,
    /// Output sparse depth PFM, rasterized at `--at`
    #[arg(long)]
    out: PathBuf,
    /// Frame index to rasterize at; defaults to the central active frame
    #[arg(long)]
    at: Option<usize>,
    /// Also write the landmark list as JSON
    #[arg(long)]
    json: Option<PathBuf>,
    /// Landmark parameter JSON; missing fields take defaults
    #[arg(long)]
    params: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Split,
    FullMin,
}

impl From<ModeArg> for PhotoMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Split => PhotoMode::Split,
            ModeArg::FullMin => PhotoMode::FullMin,
        }
    }
}

#[derive(Args)]
struct RefineArgs {
    #[command(flatten)]
    sequence: SequenceArgs,

    /// Iterations per scale, one value or one per scale (finest first)
    #[arg(long, value_delimiter = ',', default_value = "30")]
    iters_per_scale: Vec<usize>,

    /// Loss weight JSON; missing fields take the refiner defaults
    #[arg(long)]
    weights: Option<PathBuf>,

    /// Semi-dense depth PFM to use instead of running SGM
    #[arg(long)]
    semi_dense: Option<PathBuf>,

    /// Sparse depth PFM to use instead of tracking landmarks
    #[arg(long)]
    sparse: Option<PathBuf>,

    #[arg(long, value_enum, default_value = "split")]
    mode: ModeArg,

    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct LossMapArgs {
    #[command(flatten)]
    sequence: SequenceArgs,

    /// Depth PFM to evaluate at; defaults to ground truth
    #[arg(long)]
    depth: Option<PathBuf>,

    #[arg(long, value_enum, default_value = "split")]
    mode: ModeArg,

    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExchangeModeArg {
    Mean,
    Max,
}

#[derive(Args)]
struct ExchangeArgs {
    /// Scene JSON file or preset name
    #[arg(long, default_value = "occluded-floor")]
    scene: String,

    /// BN scale threshold below which a channel is replaced
    #[arg(long, default_value_t = ExchangeConfig::default().theta)]
    theta: f64,

    #[arg(long, value_enum, default_value = "max")]
    mode: ExchangeModeArg,

    /// Share of channels per branch given a near-zero BN scale
    #[arg(long, default_value_t = 0.25)]
    low_fraction: f64,

    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Initial (semi-dense) depth defining the with/without split
    #[arg(long)]
    initial: PathBuf,
    /// Metrics CSV; defaults to the prediction path with a `.metrics.csv` suffix
    #[arg(long)]
    csv: Option<PathBuf>,
}

/// Per-frame entry of a rendered sequence directory.
#[derive(Serialize, Deserialize)]
struct FrameEntry {
    index: usize,
    active: bool,
    dir: String,
}

const MANIFEST: &str = "frames.json";
const TRAJECTORY: &str = "trajectory.txt";

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global().context("building thread pool")?;
    }
    let rig = match &cli.rig {
        Some(p) => read_json::<StereoRig>(p)?,
        None => StereoRig::desk_default(),
    };
    match cli.command {
        Command::Synth(a) => synth(&a, &rig, cli.seed),
        Command::Sgm(a) => run_sgm(&a, &rig),
        Command::Landmarks(a) => run_landmarks(&a, &rig),
        Command::Refine(a) => run_refine(&a, &rig, cli.seed),
        Command::LossMap(a) => loss_map(&a, &rig, cli.seed),
        Command::ExchangeDemo(a) => exchange_demo(&a, &rig, cli.seed),
        Command::Eval(a) => eval(&a),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_scene(arg: &str) -> Result<Scene> {
    let path = Path::new(arg);
    if path.exists() {
        return Ok(io::read_scene(path)?);
    }
    presets::by_name(arg)
        .ok_or_else(|| anyhow!("no scene file or preset named {arg:?}; presets: {}", presets::NAMES.join(", ")))
}

fn trajectory(args: &SequenceArgs) -> Result<Vec<Pose>> {
    match &args.trajectory {
        Some(p) => Ok(io::read_trajectory(p)?.into_iter().map(|(_, pose)| pose).collect()),
        None => {
            if args.frames < 3 {
                bail!("--frames must be at least 3");
            }
            Ok(sliding_trajectory(args.frames, args.step, 0.0))
        }
    }
}

fn config(args: &SequenceArgs, rig: &StereoRig, seed: u64) -> Result<PipelineConfig> {
    Ok(PipelineConfig { rig: *rig, trajectory: trajectory(args)?, seed, ..Default::default() })
}

fn check_dims(rig: &StereoRig, image: &Image, what: &str) -> Result<()> {
    let expected = (rig.intrinsics.width, rig.intrinsics.height);
    if image.dims() != expected {
        bail!("{what} is {:?}, rig expects {expected:?}", image.dims());
    }
    Ok(())
}

fn synth(args: &SynthArgs, rig: &StereoRig, seed: u64) -> Result<()> {
    let scene = load_scene(&args.sequence.scene)?;
    let config = config(&args.sequence, rig, seed)?;
    let start = Instant::now();
    let seq = pipeline::render(&scene, &config)?;
    fs::create_dir_all(&args.out)?;
    let mut manifest = Vec::new();
    for f in &seq.frames {
        let name = format!("frame_{:03}", f.index);
        let dir = args.out.join(&name);
        fs::create_dir_all(&dir)?;
        let (left, right) = f.recorded();
        io::write_png16(dir.join("left.png"), left)?;
        io::write_png16(dir.join("right.png"), right)?;
        io::write_depth_pfm(dir.join("depth.pfm"), &f.passive.depth_left)?;
        io::write_depth_pfm(dir.join("depth_right.pfm"), &f.passive.depth_right)?;
        if f.is_active() {
            io::write_png16(dir.join("passive_left.png"), &f.passive.left)?;
            io::write_png16(dir.join("passive_right.png"), &f.passive.right)?;
        }
        manifest.push(FrameEntry { index: f.index, active: f.is_active(), dir: name });
    }
    let stamped: Vec<(f64, Pose)> = seq.frames.iter().map(|f| (f.index as f64, f.pose)).collect();
    fs::write(args.out.join(TRAJECTORY), io::format_trajectory(&stamped))?;
    write_json(&args.out.join(MANIFEST), &manifest)?;
    io::write_scene(args.out.join("scene.json"), &scene)?;
    info!("rendered {} frames in {:?}", seq.frames.len(), start.elapsed());
    println!("wrote {} frames to {}", seq.frames.len(), args.out.display());
    Ok(())
}

fn run_sgm(args: &SgmArgs, rig: &StereoRig) -> Result<()> {
    let params = match &args.params {
        Some(p) => read_json::<SgmParams>(p)?,
        None => SgmParams::default(),
    };
    let left = io::read_png(&args.left)?;
    let right = io::read_png(&args.right)?;
    check_dims(rig, &left, "left image")?;
    check_dims(rig, &right, "right image")?;
    let depth = sgm::semi_dense_depth(rig, &left, &right, &params)?;
    io::write_depth_pfm(&args.out, &depth)?;
    println!("valid pixels: {:.1}%", 100.0 * depth.valid_fraction());
    Ok(())
}

struct SequenceDir {
    entries: Vec<FrameEntry>,
    poses: Vec<Pose>,
}

fn read_sequence_dir(dir: &Path) -> Result<SequenceDir> {
    let entries: Vec<FrameEntry> = read_json(&dir.join(MANIFEST))?;
    let stamped = io::read_trajectory(dir.join(TRAJECTORY))?;
    if stamped.len() != entries.len() {
        bail!("{} lists {} frames but {} has {} poses", MANIFEST, entries.len(), TRAJECTORY, stamped.len());
    }
    Ok(SequenceDir { entries, poses: stamped.into_iter().map(|(_, p)| p).collect() })
}

fn run_landmarks(args: &LandmarkArgs, rig: &StereoRig) -> Result<()> {
    let params = match &args.params {
        Some(p) => read_json::<LandmarkParams>(p)?,
        None => LandmarkParams::default(),
    };
    let seq = read_sequence_dir(&args.frames)?;
    let mut frames = Vec::new();
    for (e, pose) in seq.entries.iter().zip(&seq.poses) {
        if e.active {
            continue;
        }
        let dir = args.frames.join(&e.dir);
        let left = io::read_png(dir.join("left.png"))?;
        let right = io::read_png(dir.join("right.png"))?;
        check_dims(rig, &left, "left image")?;
        check_dims(rig, &right, "right image")?;
        frames.push(PassiveFrame { left, right, pose: *pose });
    }
    let found = landmarks::triangulate_and_track(&frames, rig, &params)?;
    let at = match args.at {
        Some(i) => i,
        None => {
            let mid = seq.entries.len().saturating_sub(1) / 2;
            seq.entries
                .iter()
                .filter(|e| e.active)
                .min_by_key(|e| e.index.abs_diff(mid))
                .map(|e| e.index)
                .ok_or_else(|| anyhow!("sequence has no active frame; pass --at"))?
        }
    };
    let pose =
        seq.entries.iter().position(|e| e.index == at).map(|i| seq.poses[i]).ok_or_else(|| anyhow!("no frame {at}"))?;
    let sparse = landmarks::rasterize(&found, &rig.intrinsics, &pose);
    io::write_pfm(&args.out, &sparse.image)?;
    if let Some(p) = &args.json {
        let dump: Vec<_> = found
            .iter()
            .map(|l| serde_json::json!({ "id": l.id, "xyz": l.position, "track_length": l.track_length }))
            .collect();
        write_json(p, &dump)?;
    }
    println!("{} landmarks, {} rasterized at frame {at}", found.len(), sparse.count);
    Ok(())
}

fn read_sized_depth(path: &Path, rig: &StereoRig) -> Result<DepthMap> {
    let d = io::read_depth_pfm(path)?;
    check_dims(rig, &d.image, &path.display().to_string())?;
    Ok(d)
}

fn run_refine(args: &RefineArgs, rig: &StereoRig, seed: u64) -> Result<()> {
    let scene = load_scene(&args.sequence.scene)?;
    let mut config = config(&args.sequence, rig, seed)?;
    if let Some(p) = &args.weights {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        config.weights = merge_weights(pipeline::refine_weights(), &text)?;
    }
    config.weights.validate()?;
    config.mode = args.mode.into();
    let n = config.weights.n_scales;
    config.schedule = match args.iters_per_scale.as_slice() {
        [k] => Schedule::uniform(n, *k),
        ks if ks.len() == n => Schedule { iters_per_scale: ks.to_vec() },
        ks => bail!("--iters-per-scale needs 1 or {n} values, got {}", ks.len()),
    };

    let start = Instant::now();
    let seq = pipeline::render(&scene, &config)?;
    let triplet = pipeline::central_triplet(&seq, &config)?;
    let d_sd = match &args.semi_dense {
        Some(p) => read_sized_depth(p, rig)?,
        None => sgm::semi_dense_depth(rig, &triplet.active_left, &triplet.active_right, &config.sgm)?,
    };
    let (found, sparse) = match &args.sparse {
        Some(p) => {
            let img = io::read_pfm(p)?;
            check_dims(rig, &img, &p.display().to_string())?;
            (Vec::new(), SparseDepthImage::from_image(img))
        }
        None => {
            let found = landmarks::triangulate_and_track(&seq.passive_frames(), rig, &config.landmarks)?;
            let sparse = landmarks::rasterize(&found, &rig.intrinsics, &triplet.pose);
            (found, sparse)
        }
    };
    info!("inputs ready in {:?}: {} sparse pixels", start.elapsed(), sparse.count);
    let prepared = pipeline::assemble(triplet, d_sd, found, sparse, &config)?;
    let gt = prepared.triplet.gt_depth.clone();
    let out = &args.out_dir;
    fs::create_dir_all(out)?;
    io::write_depth_pfm(out.join("gt.pfm"), &gt)?;
    io::write_depth_pfm(out.join("semi_dense.pfm"), &prepared.d_sd)?;
    io::write_depth_pfm(out.join("initial.pfm"), &prepared.initial)?;
    io::write_depth_pfm(out.join("baseline.pfm"), &prepared.baseline)?;
    io::write_pfm(out.join("sparse.pfm"), &prepared.sparse.image)?;

    let (result, metrics, baseline_metrics) = pipeline::refine_prepared(prepared, &config)?;
    info!("refined in {:?}", start.elapsed());
    io::write_depth_pfm(out.join("depth.pfm"), &result.depth)?;
    let mut history = String::from("stage,level,iteration,total\n");
    for (s, stage) in result.stages.iter().enumerate() {
        for (i, v) in stage.history.iter().enumerate() {
            history.push_str(&format!("{s},{},{i},{v}\n", stage.level));
        }
    }
    fs::write(out.join("loss_history.csv"), history)?;
    let components = serde_json::json!({
        "weights": config.weights,
        "schedule": config.schedule,
        "breakdown": result.breakdown,
        "stages": result.stages,
        "metrics": metrics,
        "baseline_metrics": baseline_metrics,
    });
    write_json(&out.join("components.json"), &components)?;
    println!("refined\n{}", format_table(&metrics));
    println!("nearest-fill baseline\n{}", format_table(&baseline_metrics));
    Ok(())
}

/// Overlays the fields present in `json` onto `base`.
fn merge_weights(base: LossWeights, json: &str) -> Result<LossWeights> {
    let mut value = serde_json::to_value(base)?;
    let patch: serde_json::Value = serde_json::from_str(json).context("parsing weights")?;
    let (Some(obj), Some(p)) = (value.as_object_mut(), patch.as_object()) else {
        bail!("weights must be a JSON object");
    };
    for (k, v) in p {
        if !obj.contains_key(k) {
            bail!("unknown weight {k:?}");
        }
        obj.insert(k.clone(), v.clone());
    }
    Ok(serde_json::from_value(value)?)
}

fn loss_map(args: &LossMapArgs, rig: &StereoRig, seed: u64) -> Result<()> {
    let scene = load_scene(&args.sequence.scene)?;
    let config = config(&args.sequence, rig, seed)?;
    let seq = pipeline::render(&scene, &config)?;
    let triplet = pipeline::central_triplet(&seq, &config)?;
    let depth = match &args.depth {
        Some(p) => read_sized_depth(p, rig)?,
        None => triplet.gt_depth.clone(),
    };
    let filled = refine::nearest_fill(&depth.image, &depth.valid).ok_or_else(|| anyhow!("depth has no valid pixel"))?;
    let d_hat = filled.map(depth_to_normalized_disparity);
    let empty = SparseDepthImage::empty(filled.width(), filled.height());
    let inputs = activestereo::losses::LossInputs::new(&triplet, rig, &depth, &empty, config.weights.n_scales)?;
    let objective = Objective { inputs: &inputs, weights: config.weights, mode: args.mode.into() };
    let maps = objective.maps(&d_hat)?;
    let (total, breakdown) = objective.value(&d_hat)?;
    fs::create_dir_all(&args.out_dir)?;
    let out = &args.out_dir;
    io::write_png16(out.join("on.png"), &maps.on.map(|v| v.clamp(0.0, 1.0)))?;
    io::write_mask_png(out.join("on_valid.png"), &maps.on_valid)?;
    for (i, name) in ["temporal_right", "temporal_left", "stereo_prev", "stereo_next"].iter().enumerate() {
        io::write_png16(out.join(format!("off_{name}.png")), &maps.off[i].map(|v| v.clamp(0.0, 1.0)))?;
    }
    io::write_png16(out.join("off_min.png"), &maps.off_min.map(|v| v.clamp(0.0, 1.0)))?;
    io::write_mask_png(out.join("auto_mask.png"), &maps.auto_mask)?;
    write_json(&out.join("components.json"), &serde_json::json!({ "total": total, "breakdown": breakdown }))?;
    println!("total loss {total}");
    Ok(())
}

const ROUTE_PALETTE: [[u8; 3]; 4] = [[40, 40, 40], [230, 80, 60], [70, 170, 90], [60, 110, 220]];

fn exchange_demo(args: &ExchangeArgs, rig: &StereoRig, seed: u64) -> Result<()> {
    let scene = load_scene(&args.scene)?;
    let config = PipelineConfig { rig: *rig, seed, ..Default::default() };
    let prepared = pipeline::prepare(&scene, &config)?;
    let init = refine::initialize(&prepared.d_sd, &prepared.sparse);
    let sparse = prepared.sparse.image.map(|z| if z > 0.0 { depth_to_normalized_disparity(z) } else { 0.0 });
    let rasters = [init.d_hat, prepared.triplet.active_left.clone(), sparse];
    let features =
        rasters.iter().map(|r| channel_exchange::toy_features(&r.to_tensor())).collect::<Result<Vec<Tensor>, _>>()?;
    let channels = features[0].shape()[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: Vec<BnBranchParams> = (0..3)
        .map(|_| {
            let gamma = (0..channels)
                .map(|_| {
                    if rng.gen::<f64>() < args.low_fraction {
                        rng.gen_range(0.0..args.theta)
                    } else {
                        rng.gen_range(0.5..1.5)
                    }
                })
                .collect();
            BnBranchParams { gamma, ..BnBranchParams::identity(channels) }
        })
        .collect();
    let mode = match args.mode {
        ExchangeModeArg::Mean => ExchangeMode::Mean,
        ExchangeModeArg::Max => ExchangeMode::Max,
    };
    let cfg = ExchangeConfig { theta: args.theta, mode };
    let params: [BnBranchParams; 3] = params.try_into().expect("three branches");
    let (out, (w, h, codes)) =
        channel_exchange::exchange_demo([&features[0], &features[1], &features[2]], &params, &cfg)?;
    fs::create_dir_all(&args.out_dir)?;
    let mut palette = vec![[0u8; 3]; 256];
    palette[..ROUTE_PALETTE.len()].copy_from_slice(&ROUTE_PALETTE);
    palette[channel_exchange::ROUTE_MIXED as usize] = [240, 240, 240];
    io::write_indexed_png(args.out_dir.join("routing.png"), w, h, &codes, &palette)?;
    let mut legend = serde_json::Map::new();
    legend.insert(channel_exchange::ROUTE_SELF.to_string(), "own output".into());
    for (k, name) in DEMO_BRANCHES.iter().enumerate() {
        legend.insert((k + 1).to_string(), format!("copied from {name}").into());
    }
    legend.insert(channel_exchange::ROUTE_MIXED.to_string(), "mean of the other branches".into());
    let replaced: Vec<usize> =
        out.routing.iter().map(|r| r.iter().filter(|s| **s != channel_exchange::Source::Own).count()).collect();
    write_json(
        &args.out_dir.join("legend.json"),
        &serde_json::json!({
            "codes": legend,
            "rows": DEMO_BRANCHES,
            "columns": ["value", "d/dx", "d/dy", "box3"],
            "channel_size": [w / channels, h / 3],
            "gammas": params.iter().map(|p| p.gamma.clone()).collect::<Vec<_>>(),
            "config": cfg,
            "replaced_elements": replaced,
        }),
    )?;
    println!("routing {w}×{h} written; replaced elements per branch: {replaced:?}");
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let pred = io::read_depth_pfm(&args.pred)?;
    let gt = io::read_depth_pfm(&args.gt)?;
    let initial = io::read_depth_pfm(&args.initial)?;
    let metrics = compute_metrics(&pred, &gt, &initial)?;
    print!("{}", format_table(&metrics));
    let csv = args.csv.clone().unwrap_or_else(|| args.pred.with_extension("metrics.csv"));
    fs::write(&csv, io::format_metrics_csv(&metrics)).with_context(|| format!("writing {}", csv.display()))?;
    Ok(())
}
