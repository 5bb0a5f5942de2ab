use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use patchgraph::behavior::{load_model, save_model, FinalizeParams, ModelError, DEFAULT_MIN_SUPPORT, DEFAULT_PRUNE_THRESHOLD};
use patchgraph::eval::{compute_report, match_events, truth_items, DEFAULT_FRAME_TOL};
use patchgraph::ingest::{
    read_detections, tracks_from_detections, write_detections, Detection, IngestError, IngestParams, DEFAULT_FPS,
    DEFAULT_SMOOTHING_WINDOW,
};
use patchgraph::pipeline::{detect, learn, PipelineError};
use patchgraph::render::render_svg;
use patchgraph::rules::{read_events, write_events, AnomalyEvent, RuleError, DEFAULT_STOP_MARGIN};
use patchgraph::sim::{load_scenario, read_truth, simulate, write_truth, SimError, TruthRecord};
use patchgraph::topology::{load_map, IntersectionMap, MapError, DEFAULT_MIN_IOU};

#[derive(Parser)]
#[command(name = "patchgraph", version, about = "Learn normal intersection behavior and flag anomalous trajectories")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate labeled synthetic detections.
    Simulate(SimulateArgs),
    /// Learn a behavior model from detections.
    Learn(LearnArgs),
    /// Flag anomalies in detections against a model.
    Detect(DetectArgs),
    /// Score events against simulator truth.
    Eval(EvalArgs),
    /// Draw the map, trajectories, and anomalies as SVG.
    Render(RenderArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct IngestArgs {
    /// Minimum IoU for patch association.
    #[arg(long)]
    min_iou: Option<f64>,
    /// Odd window of the yaw median filter.
    #[arg(long)]
    smoothing_window: Option<usize>,
    /// Consecutive samples needed before a change of patch counts.
    #[arg(long)]
    min_visit_samples: Option<usize>,
}

#[derive(Args)]
struct LearnArgs {
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    dets: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_PRUNE_THRESHOLD)]
    prune_threshold: u64,
    #[arg(long, default_value_t = DEFAULT_MIN_SUPPORT)]
    min_support: u64,
    #[arg(long, default_value_t = DEFAULT_FPS)]
    fps: f64,
    /// Keep one pooled dwell mean per node instead of one per class.
    #[arg(long)]
    tavg_per_node: bool,
    #[command(flatten)]
    ingest: IngestArgs,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dets: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_STOP_MARGIN, allow_negative_numbers = true)]
    margin: f64,
    /// Ingest flags default to the values the model was trained with.
    #[command(flatten)]
    ingest: IngestArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    events: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_FRAME_TOL)]
    frame_tol: u64,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    dets: PathBuf,
    #[arg(long)]
    events: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Invalid(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Io(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Invalid(m) => write!(f, "error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<MapError> for CliError {
    fn from(e: MapError) -> Self {
        match e {
            MapError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<RuleError> for CliError {
    fn from(e: RuleError) -> Self {
        match e {
            RuleError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Model(m) => m.into(),
            PipelineError::Rule(r) => r.into(),
            PipelineError::Ingest(_) => CliError::Invalid(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w).and_then(|_| w.flush()).map_err(io_err(path))
}

fn read_dets(path: &Path) -> Result<Vec<Detection>> {
    read_detections(open(path)?).map_err(|e: IngestError| CliError::Invalid(format!("{}: {e}", path.display())))
}

fn read_truth_file(path: &Path) -> Result<Vec<TruthRecord>> {
    read_truth(open(path)?).map_err(|e| match e {
        SimError::Io(_) => CliError::Io(format!("{}: {e}", path.display())),
        _ => CliError::Invalid(format!("{}: {e}", path.display())),
    })
}

fn read_events_file(path: &Path) -> Result<Vec<AnomalyEvent>> {
    read_events(open(path)?).map_err(|e| match e {
        RuleError::Io(_) => CliError::Io(format!("{}: {e}", path.display())),
        _ => CliError::Invalid(format!("{}: {e}", path.display())),
    })
}

/// Recorded flags. Paths keep only their file name so that outputs do not
/// depend on the working directory.
struct Flags(BTreeMap<String, String>);

impl Flags {
    fn new(command: &str) -> Self {
        Flags(BTreeMap::from([("command".to_string(), command.to_string())]))
    }

    fn path(mut self, name: &str, p: &Path) -> Self {
        let base = p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        self.0.insert(name.to_string(), base);
        self
    }

    fn value(mut self, name: &str, v: impl ToString) -> Self {
        self.0.insert(name.to_string(), v.to_string());
        self
    }
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".provenance.json");
    PathBuf::from(s)
}

fn write_sidecar(out: &Path, flags: &Flags) -> Result<()> {
    let path = sidecar_path(out);
    let body = serde_json::to_string_pretty(&flags.0).expect("string map serializes");
    write_with(&path, |w| writeln!(w, "{body}"))
}

fn check(ok: bool, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(CliError::Invalid(msg.to_string()))
    }
}

fn ingest_params(a: &IngestArgs, min_iou: f64, min_visit_samples: usize) -> Result<IngestParams> {
    let p = IngestParams {
        smoothing_window: a.smoothing_window.unwrap_or(DEFAULT_SMOOTHING_WINDOW),
        assoc_min_iou: a.min_iou.unwrap_or(min_iou),
        min_visit_samples: a.min_visit_samples.unwrap_or(min_visit_samples),
        ..IngestParams::default()
    };
    check(
        p.assoc_min_iou > 0.0 && p.assoc_min_iou <= 1.0,
        "--min-iou must be in (0, 1]",
    )?;
    check(p.smoothing_window % 2 == 1, "--smoothing-window must be odd")?;
    check(p.min_visit_samples >= 1, "--min-visit-samples must be at least 1")?;
    Ok(p)
}

fn ingest_flags(flags: Flags, p: &IngestParams) -> Flags {
    flags
        .value("min_iou", p.assoc_min_iou)
        .value("smoothing_window", p.smoothing_window)
        .value("min_visit_samples", p.min_visit_samples)
}

fn run_simulate(a: SimulateArgs) -> Result<()> {
    let map = load_map(&a.map)?;
    let mut config = load_scenario(&a.scenario)?;
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    let out = simulate(&config, &map)?;
    let flags = Flags::new("simulate")
        .path("map", &a.map)
        .path("scenario", &a.scenario)
        .path("out", &a.out)
        .path("truth", &a.truth)
        .value("seed", config.seed);
    write_with(&a.out, |w| write_detections(w, &out.detections))?;
    write_with(&a.truth, |w| write_truth(w, &out.truth))?;
    write_sidecar(&a.out, &flags)?;
    write_sidecar(&a.truth, &flags)?;
    eprintln!(
        "simulate: {} tracks, {} detections, {} anomalies",
        out.tracks.len(),
        out.detections.len(),
        out.truth.iter().filter(|t| t.kind.is_some()).count()
    );
    Ok(())
}

fn run_learn(a: LearnArgs) -> Result<()> {
    check(a.fps.is_finite() && a.fps > 0.0, "--fps must be positive")?;
    let ingest = ingest_params(&a.ingest, DEFAULT_MIN_IOU, 1)?;
    let finalize = FinalizeParams {
        prune_threshold: a.prune_threshold,
        min_support: a.min_support,
        tavg_per_node: a.tavg_per_node,
    };
    let map = load_map(&a.map)?;
    let dets = read_dets(&a.dets)?;
    let mut model = learn(&dets, &map, &ingest, &finalize, a.fps)?;
    let flags = Flags::new("learn")
        .path("map", &a.map)
        .path("dets", &a.dets)
        .path("out", &a.out)
        .value("prune_threshold", a.prune_threshold)
        .value("min_support", a.min_support)
        .value("fps", a.fps)
        .value("tavg_per_node", a.tavg_per_node);
    model.meta.flags = ingest_flags(flags, &ingest).0;
    save_model(&model, &a.out)?;
    eprintln!(
        "learn: {} tracks, {} visits, {} nodes",
        model.meta.training_tracks,
        model.meta.training_visits,
        model.nodes.len()
    );
    Ok(())
}

fn run_detect(a: DetectArgs) -> Result<()> {
    check(a.margin.is_finite() && a.margin >= 1.0, "--margin must be at least 1")?;
    let map = load_map(&a.map)?;
    let model = load_model(&a.model, Some(&map))?;
    let ingest = ingest_params(
        &a.ingest,
        model.meta.min_iou.unwrap_or(DEFAULT_MIN_IOU),
        model.meta.min_visit_samples.unwrap_or(1),
    )?;
    let dets = read_dets(&a.dets)?;
    let events = detect(&model, &dets, &map, &ingest, a.margin)?;
    let flags = Flags::new("detect")
        .path("map", &a.map)
        .path("model", &a.model)
        .path("dets", &a.dets)
        .path("out", &a.out)
        .value("margin", a.margin);
    let flags = ingest_flags(flags, &ingest);
    write_with(&a.out, |w| write_events(w, &events))?;
    write_sidecar(&a.out, &flags)?;
    eprintln!("detect: {} events", events.len());
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let events = read_events_file(&a.events)?;
    let truth = truth_items(&read_truth_file(&a.truth)?);
    let m = match_events(&events, &truth, a.frame_tol);
    let flags = Flags::new("eval")
        .path("events", &a.events)
        .path("truth", &a.truth)
        .path("out", &a.out)
        .value("frame_tol", a.frame_tol);
    let report = compute_report(&m, flags.0);
    let body = report.to_json_string();
    write_with(&a.out, |w| writeln!(w, "{body}"))?;
    eprintln!(
        "eval: tp {} fp {} fn {} f1 {:.4}",
        report.tp, report.fp, report.fn_, report.f1
    );
    Ok(())
}

fn run_render(a: RenderArgs) -> Result<()> {
    let map: IntersectionMap = load_map(&a.map)?;
    let dets = read_dets(&a.dets)?;
    let tracks = tracks_from_detections(&dets, &IngestParams::default())
        .map_err(|e| CliError::Invalid(e.to_string()))?;
    let events = match &a.events {
        Some(p) => read_events_file(p)?,
        None => Vec::new(),
    };
    let mut flags = Flags::new("render")
        .path("map", &a.map)
        .path("dets", &a.dets)
        .path("out", &a.out);
    if let Some(p) = &a.events {
        flags = flags.path("events", p);
    }
    let svg = render_svg(&map, &tracks, &events, &flags.0);
    write_with(&a.out, |w| w.write_all(svg.as_bytes()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let res = match cli.command {
        Command::Simulate(a) => run_simulate(a),
        Command::Learn(a) => run_learn(a),
        Command::Detect(a) => run_detect(a),
        Command::Eval(a) => run_eval(a),
        Command::Render(a) => run_render(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}
