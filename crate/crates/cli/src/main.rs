use clap::{Args, Parser, Subcommand, ValueEnum};
use layoutfuse::align::{align, AlignOptions};
use layoutfuse::io::{
    self, AlignmentDoc, IoError, LayoutDoc, PartialsDoc, PipelineReport, SceneDoc, ViewWarnings,
};
use layoutfuse::merge::{merge_views, MergeParams};
use layoutfuse::metrics::{evaluate, MatchThresholds};
use layoutfuse::pipeline::{partial_layouts, run_pipeline, view_transforms, PipelineParams};
use layoutfuse::render::{render_birdview, render_segments, render_wireframe};
use layoutfuse::scene::{all_ordered_pairs, emit_view_bundles, generate_room, SceneError, SceneSpec};
use layoutfuse::single_view::G1Params;
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "layoutfuse", version, about = "Multi-view room layout from structural-plane pointmaps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic room with view bundles and ground truth.
    Synth(SynthArgs),
    /// Single-view layouts only.
    Layout(StageArgs),
    /// Global alignment only.
    Align(StageArgs),
    /// Merge single-view layouts using an alignment.
    Merge(MergeArgs),
    /// Single-view layouts, alignment and merge.
    Pipeline(StageArgs),
    /// Score a layout against a synthetic scene.
    Eval(EvalArgs),
    /// Top-view SVG of a layout, or of pre-merge wall segments.
    RenderBirdview(BirdviewArgs),
    /// OBJ wireframe of a layout.
    RenderWireframe(WireframeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Pairing {
    /// Every ordered pair of views.
    All,
    /// Each view with the next, both directions.
    Ring,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 4)]
    walls: usize,
    #[arg(long, default_value_t = 3)]
    cams: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Nominal footprint size, meters.
    #[arg(long, default_value_t = 6.0)]
    extent: f64,
    #[arg(long, default_value_t = 2.8)]
    ceiling: f64,
    /// Pointmap noise standard deviation, meters.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 160)]
    width: usize,
    #[arg(long, default_value_t = 120)]
    height: usize,
    #[arg(long, default_value_t = 64.0)]
    focal: f64,
    #[arg(long, value_enum, default_value_t = Pairing::All)]
    pairs: Pairing,
    #[arg(long)]
    out: PathBuf,
}

/// Stage parameters; defaults match the library.
#[derive(Args)]
struct ParamArgs {
    #[arg(long, default_value_t = G1Params::default().epsilon1)]
    epsilon1: f64,
    #[arg(long, default_value_t = G1Params::default().min_pixels)]
    min_pixels: usize,
    #[arg(long, default_value_t = MergeParams::default().proximity_threshold)]
    proximity: f64,
    #[arg(long, default_value_t = MergeParams::default().overlap_threshold)]
    overlap: f64,
    #[arg(long, default_value_t = MergeParams::default().margin)]
    margin: f64,
    /// Degrees.
    #[arg(long, default_value_t = MergeParams::default().angle_snap_tol)]
    snap_tol: f64,
    #[arg(long, default_value_t = AlignOptions::default().max_iters)]
    max_iters: usize,
    #[arg(long, default_value_t = AlignOptions::default().lr)]
    lr: f64,
    #[arg(long, default_value_t = AlignOptions::default().tol)]
    tol: f64,
}

impl ParamArgs {
    fn params(&self) -> Result<PipelineParams, CliError> {
        let g1 = G1Params { epsilon1: self.epsilon1, min_pixels: self.min_pixels, ..G1Params::default() };
        g1.validate().map_err(|e| CliError::Input(e.to_string()))?;
        let merge = MergeParams {
            proximity_threshold: self.proximity,
            overlap_threshold: self.overlap,
            margin: self.margin,
            angle_snap_tol: self.snap_tol,
        };
        merge.validate().map_err(|e| CliError::Input(e.to_string()))?;
        if self.max_iters == 0 || !(self.lr > 0.0) || !(self.tol >= 0.0) {
            return Err(CliError::Input("alignment needs max-iters > 0, lr > 0 and tol >= 0".into()));
        }
        let align = AlignOptions { max_iters: self.max_iters, lr: self.lr, tol: self.tol };
        Ok(PipelineParams { g1, merge, align })
    }
}

#[derive(Args)]
struct StageArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    params: ParamArgs,
}

#[derive(Args)]
struct MergeArgs {
    #[arg(long)]
    partials: PathBuf,
    #[arg(long)]
    alignment: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    params: ParamArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    layout: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, default_value_t = MatchThresholds::default().angle_deg)]
    angle_deg: f64,
    #[arg(long, default_value_t = MatchThresholds::default().offset_m)]
    offset_m: f64,
    /// Report path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BirdviewArgs {
    #[arg(long, required_unless_present = "partials")]
    layout: Option<PathBuf>,
    /// Render pre-merge segments coloured by merged plane instead.
    #[arg(long, requires = "alignment", conflicts_with = "layout")]
    partials: Option<PathBuf>,
    #[arg(long)]
    alignment: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    params: ParamArgs,
}

#[derive(Args)]
struct WireframeArgs {
    #[arg(long)]
    layout: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
enum CliError {
    /// Bad flags or unreadable input; exit 2.
    Input(String),
    /// Anything else; exit 1.
    Internal(String),
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Input(e.to_string())
    }
}

fn internal(e: impl std::fmt::Display) -> CliError {
    CliError::Internal(e.to_string())
}

fn synth(a: &SynthArgs) -> Result<(), CliError> {
    let spec = SceneSpec {
        wall_count: a.walls,
        room_extent: a.extent,
        ceiling_height: a.ceiling,
        camera_count: a.cams,
        noise_sigma: a.noise,
        seed: a.seed,
        image_width: a.width,
        image_height: a.height,
        focal: a.focal,
    };
    let scene = generate_room(&spec).map_err(|e| match e {
        SceneError::Spec(_) => CliError::Input(e.to_string()),
        e => internal(e),
    })?;
    let pairs = match a.pairs {
        Pairing::All => all_ordered_pairs(a.cams),
        Pairing::Ring if a.cams < 2 => Vec::new(),
        Pairing::Ring => {
            let mut p: Vec<(usize, usize)> = (0..a.cams).flat_map(|i| [(i, (i + 1) % a.cams), ((i + 1) % a.cams, i)]).collect();
            p.sort_unstable();
            p.dedup();
            p
        }
    };
    let bundles = emit_view_bundles(&scene, &pairs, a.noise, a.seed).map_err(internal)?;
    io::write_bundles(&a.out, &bundles)?;
    io::write_document(&a.out.join("scene.json"), io::SCENE_FORMAT, &SceneDoc { spec, scene })?;
    log::info!("wrote {} bundles to {}", bundles.len(), a.out.display());
    Ok(())
}

fn layout_stage(a: &StageArgs) -> Result<(), CliError> {
    let params = a.params.params()?;
    let bundles = io::read_bundles(&a.manifest)?;
    let partials = partial_layouts(&bundles, &params.g1).map_err(internal)?;
    io::write_document(&a.out.join("partials.json"), io::PARTIALS_FORMAT, &PartialsDoc { partials })?;
    Ok(())
}

fn align_stage(a: &StageArgs) -> Result<(), CliError> {
    let params = a.params.params()?;
    let bundles = io::read_bundles(&a.manifest)?;
    let (state, report) = align(&bundles, &params.align).map_err(internal)?;
    let transforms = view_transforms(&bundles, &state);
    let poses: BTreeMap<_, _> = layoutfuse::align::canonical_bundles(&bundles)
        .into_iter()
        .filter_map(|(v, e)| state.camera_pose(v, e).map(|p| (v, p)))
        .collect();
    let doc = AlignmentDoc { anchor_image_id: state.views[0], camera_poses: io::camera_poses(&poses), transforms, report };
    io::write_document(&a.out.join("alignment.json"), io::ALIGNMENT_FORMAT, &doc)?;
    Ok(())
}

fn merge_stage(a: &MergeArgs) -> Result<(), CliError> {
    let params = a.params.params()?;
    let partials: PartialsDoc = io::read_document(&a.partials, io::PARTIALS_FORMAT)?;
    let alignment: AlignmentDoc = io::read_document(&a.alignment, io::ALIGNMENT_FORMAT)?;
    let out = merge_views(&partials.partials, &alignment.transforms, &params.merge).map_err(internal)?;
    let doc = LayoutDoc { anchor_image_id: alignment.anchor_image_id, camera_poses: alignment.camera_poses, layout: out.layout };
    io::write_document(&a.out.join("layout.json"), io::LAYOUT_FORMAT, &doc)?;
    Ok(())
}

fn pipeline(a: &StageArgs) -> Result<(), CliError> {
    let params = a.params.params()?;
    let bundles = io::read_bundles(&a.manifest)?;
    let out = run_pipeline(&bundles, &params).map_err(internal)?;
    let doc = LayoutDoc {
        anchor_image_id: out.state.views[0],
        camera_poses: io::camera_poses(&out.camera_poses),
        layout: out.merge.layout,
    };
    let report = PipelineReport {
        views: out.state.views.len(),
        bundles: bundles.len(),
        align: out.report,
        scene_rotation_deg: out.merge.theta.to_degrees(),
        merged_planes: doc.layout.planes.len(),
        merge_warnings: doc.layout.warnings.clone(),
        single_view_warnings: out
            .partials
            .iter()
            .map(|p| ViewWarnings { image_id: p.image_id, warnings: p.warnings.clone() })
            .collect(),
    };
    io::write_document(&a.out.join("layout.json"), io::LAYOUT_FORMAT, &doc)?;
    io::write_document(&a.out.join("report.json"), io::REPORT_FORMAT, &report)?;
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let layout: LayoutDoc = io::read_document(&a.layout, io::LAYOUT_FORMAT)?;
    let scene: SceneDoc = io::read_document(&a.scene, io::SCENE_FORMAT)?;
    let thr = MatchThresholds { angle_deg: a.angle_deg, offset_m: a.offset_m };
    let report = evaluate(&layout.layout, &layout.pose_map(), layout.anchor_image_id, &scene.scene, &thr)
        .map_err(|e| CliError::Input(e.to_string()))?;
    io::write_document(&a.out, io::EVAL_FORMAT, &report)?;
    Ok(())
}

fn birdview(a: &BirdviewArgs) -> Result<(), CliError> {
    let svg = match (&a.layout, &a.partials, &a.alignment) {
        (Some(l), _, _) => {
            let doc: LayoutDoc = io::read_document(l, io::LAYOUT_FORMAT)?;
            render_birdview(&doc.layout)
        }
        (None, Some(p), Some(al)) => {
            let params = a.params.params()?;
            let partials: PartialsDoc = io::read_document(p, io::PARTIALS_FORMAT)?;
            let alignment: AlignmentDoc = io::read_document(al, io::ALIGNMENT_FORMAT)?;
            let out = merge_views(&partials.partials, &alignment.transforms, &params.merge).map_err(internal)?;
            render_segments(&out.segments, &out.segment_plane)
        }
        _ => return Err(CliError::Input("give --layout, or --partials with --alignment".into())),
    };
    io::write_atomic(&a.out, svg.as_bytes())?;
    Ok(())
}

fn wireframe(a: &WireframeArgs) -> Result<(), CliError> {
    let doc: LayoutDoc = io::read_document(&a.layout, io::LAYOUT_FORMAT)?;
    io::write_atomic(&a.out, render_wireframe(&doc.layout).as_bytes())?;
    Ok(())
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("LAYOUTFUSE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Input(format!("LAYOUTFUSE_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(internal)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    configure_threads()?;
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Layout(a) => layout_stage(a),
        Command::Align(a) => align_stage(a),
        Command::Merge(a) => merge_stage(a),
        Command::Pipeline(a) => pipeline(a),
        Command::Eval(a) => eval(a),
        Command::RenderBirdview(a) => birdview(a),
        Command::RenderWireframe(a) => wireframe(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Input(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Internal(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
