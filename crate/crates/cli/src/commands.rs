//! One function per subcommand. Each returns an [`Output`] carrying a JSON
//! report and a short human-readable form.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use luv_core::capture::{collect_session, sweep_exposures, SimRandomizer};
use luv_core::datastore::{decode_png_rgb, read_dataset, Dataset, DatasetWriter};
use luv_core::evalkit::{compare_labelers, cost_breakeven, format_table, spl_from_seconds, EvalReport, KEYPOINT_RADIUS};
use luv_core::maskgen::extract_labels;
use luv_core::plugnet::mock::MockPlug;
use luv_core::plugnet::{PlugClient, PlugEndpoint, RelayCommand, RelayState, DEFAULT_PORT, DEFAULT_TIMEOUT};
use luv_core::segmodel::{fit, predict, Hyper, ModelParams};
use luv_core::synthscene::{companion_profile, ground_truth, render_standard, render_uv, SceneKind, SceneSpec};
use luv_core::{LabelSet, PairedSample, TimingRecord};

use crate::config::read_profile;
use crate::{label_frames, AppConfig, CliError};

#[derive(Debug, Parser)]
#[command(name = "luv", version, about = "Self-supervised labeling with UV-fluorescent paint")]
pub struct Cli {
    /// JSON config file; defaults to $LUV_CONFIG.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Print a JSON report on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Capture and label a session of paired samples.
    Capture(CaptureArgs),
    /// Extract labels from UV frames on disk.
    Label(LabelArgs),
    /// Score candidate UV exposures and pick the best.
    Sweep(SweepArgs),
    /// Fit the pixel classifier on a labeled dataset.
    Train(TrainArgs),
    /// Compare two labelers, or a model against a dataset.
    Eval(EvalArgs),
    /// Write a synthetic dataset.
    Simulate(SimulateArgs),
    /// Switch or query a smart plug.
    Plug(PlugArgs),
    /// Break-even dataset size against paid labeling.
    Cost(CostArgs),
    /// Run the HTTP control service.
    Serve(ServeArgs),
    /// Run a loopback smart-plug emulator.
    MockPlug(MockPlugArgs),
}

/// Overrides shared by the commands that drive a rig.
#[derive(Debug, Clone, Default, Args)]
pub struct RigArgs {
    /// Simulated camera and lights.
    #[arg(long)]
    pub sim: bool,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub profile: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Scene family for the simulated camera.
    #[arg(long)]
    pub scene: Option<SceneKind>,
}

impl RigArgs {
    pub fn apply(&self, cfg: &mut AppConfig) {
        if self.sim {
            cfg.force_sim();
        }
        if let Some(d) = &self.dataset {
            cfg.dataset = Some(d.clone());
        }
        if let Some(p) = &self.profile {
            cfg.profile = Some(p.clone());
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(k) = self.scene {
            cfg.scene.kind = k;
        }
    }
}

#[derive(Debug, Args)]
pub struct CaptureArgs {
    #[command(flatten)]
    pub rig: RigArgs,
    /// Number of samples.
    #[arg(long, short)]
    pub n: usize,
    #[arg(long, default_value = "s")]
    pub prefix: String,
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    #[arg(long)]
    pub profile: Option<PathBuf>,
    /// UV frame (PNG); repeat for a bracket.
    #[arg(long, required = true)]
    pub uv: Vec<PathBuf>,
    /// Exposure of each `--uv` frame, in the same order. Defaults to the
    /// profile's UV exposure for a single frame.
    #[arg(long)]
    pub exposure: Vec<f64>,
    /// Where to write the class mask PNG.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub rig: RigArgs,
    #[arg(long, value_delimiter = ',', required = true)]
    pub exposures: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Model file to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset whose labels are judged.
    #[arg(long, conflicts_with = "model", required_unless_present = "model")]
    pub pred: Option<PathBuf>,
    /// Model whose predictions on the reference standard frames are judged.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Reference dataset.
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Keypoint matching radius, pixels.
    #[arg(long, default_value_t = KEYPOINT_RADIUS)]
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LabelSource {
    /// Labels extracted from the rendered UV frames.
    Luv,
    /// Exact labels from the scene geometry.
    Truth,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "mixed")]
    pub kind: SceneKind,
    #[arg(long, short, default_value_t = 10)]
    pub n: usize,
    #[arg(long, default_value_t = 320)]
    pub width: usize,
    #[arg(long, default_value_t = 240)]
    pub height: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.02)]
    pub sigma: f64,
    #[arg(long, value_enum, default_value_t = LabelSource::Luv)]
    pub labels: LabelSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlugState {
    On,
    Off,
    Query,
}

#[derive(Debug, Args)]
pub struct PlugArgs {
    #[arg(long)]
    pub host: String,
    #[arg(long, default_value_t = DEFAULT_PORT)]
    pub port: u16,
    #[arg(long, value_enum, default_value_t = PlugState::Query)]
    pub state: PlugState,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    /// One-off setup cost.
    #[arg(long, allow_negative_numbers = true)]
    pub setup: f64,
    /// Price of one paid label.
    #[arg(long, allow_negative_numbers = true)]
    pub price: f64,
    #[arg(long)]
    pub labels_per_image: u32,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub rig: RigArgs,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
}

#[derive(Debug, Args)]
pub struct MockPlugArgs {
    #[arg(long, default_value = "127.0.0.1:9999")]
    pub bind: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Output {
    pub json: Value,
    pub text: String,
}

impl Output {
    fn new(json: Value, text: impl Into<String>) -> Self {
        Self { json, text: text.into() }
    }
}

pub fn run(cli: &Cli) -> Result<Output, CliError> {
    let mut cfg = AppConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Capture(a) => cmd_capture(&mut cfg, a),
        Command::Label(a) => cmd_label(&cfg, a),
        Command::Sweep(a) => cmd_sweep(&mut cfg, a),
        Command::Train(a) => cmd_train(&cfg, a),
        Command::Eval(a) => cmd_eval(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Plug(a) => cmd_plug(a),
        Command::Cost(a) => cmd_cost(a),
        Command::Serve(a) => cmd_serve(&mut cfg, a),
        Command::MockPlug(a) => cmd_mock_plug(a),
    }
}

pub fn cmd_capture(cfg: &mut AppConfig, args: &CaptureArgs) -> Result<Output, CliError> {
    args.rig.apply(cfg);
    cfg.validate()?;
    if args.n == 0 {
        return Err(CliError::Config("--n must be at least 1".into()));
    }
    let profile = cfg.resolve_profile()?;
    let root = cfg.dataset()?.to_path_buf();
    let mut station = cfg.build_station(&profile)?;
    let mut writer = DatasetWriter::open(&root).map_err(CliError::runtime)?;
    let mut randomizer = station.sim.as_ref().map(|w| SimRandomizer { scene: w.scene.clone(), base: w.base.clone(), seed: cfg.seed });
    let summary = collect_session(
        station.camera.as_mut(),
        &mut station.rig,
        &profile,
        args.n,
        randomizer.as_mut().map(|r| r as _),
        &mut writer,
        &args.prefix,
    )
    .map_err(CliError::runtime)?;
    let json = json!({
        "dataset": root,
        "attempted": summary.attempted,
        "succeeded": summary.succeeded,
        "failures": summary.failures,
        "mean_capture_seconds": summary.mean_capture_seconds,
        "label_spl": summary.label_spl,
        "sample_ids": summary.sample_ids,
    });
    let spl = summary.label_spl.map_or("-".into(), |s| format!("{:.4}s", s.mean));
    let text = format!(
        "captured {}/{} samples into {} (mean capture {:.3}s, mean label {spl})",
        summary.succeeded,
        summary.attempted,
        root.display(),
        summary.mean_capture_seconds
    );
    Ok(Output::new(json, text))
}

pub fn cmd_label(cfg: &AppConfig, args: &LabelArgs) -> Result<Output, CliError> {
    let path = args.profile.as_ref().or(cfg.profile.as_ref());
    let profile = match path {
        Some(p) => read_profile(p)?,
        None => return Err(CliError::Config("label needs --profile".into())),
    };
    let exposures = match (args.exposure.len(), args.uv.len()) {
        (0, 1) => vec![profile.uv_exposure],
        (e, u) if e == u => args.exposure.clone(),
        (e, u) => return Err(CliError::Config(format!("{u} --uv frames but {e} --exposure values"))),
    };
    let frames = exposures
        .iter()
        .zip(&args.uv)
        .map(|(&e, p)| Ok((e, read_png(p)?)))
        .collect::<Result<Vec<_>, CliError>>()?;
    let report = label_frames(&frames, &profile)?;
    if let Some(out) = &args.out {
        std::fs::write(out, &report.mask_png).map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))?;
    }
    let counts: Vec<String> = report.per_class_pixel_counts.iter().map(|(c, n)| format!("class {c}: {n} px")).collect();
    let text = format!("{}; {} keypoints", counts.join(", "), report.keypoints.len());
    Ok(Output::new(serde_json::to_value(&report).map_err(CliError::runtime)?, text))
}

fn read_png(path: &Path) -> Result<luv_core::ImageRgb, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    decode_png_rgb(&bytes).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn cmd_sweep(cfg: &mut AppConfig, args: &SweepArgs) -> Result<Output, CliError> {
    args.rig.apply(cfg);
    cfg.validate()?;
    if args.exposures.is_empty() {
        return Err(CliError::Config("--exposures must list at least one value".into()));
    }
    let profile = cfg.resolve_profile()?;
    let mut station = cfg.build_station(&profile)?;
    let r = sweep_exposures(station.camera.as_mut(), &mut station.rig, &profile, &args.exposures).map_err(CliError::runtime)?;
    let json = json!({
        "best": r.best,
        "scores": r.scores.iter().map(|(e, s)| json!({"exposure": e, "score": s})).collect::<Vec<_>>(),
        "all_zero": r.all_zero,
    });
    let rows: Vec<String> = r.scores.iter().map(|(e, s)| format!("{e}: {s}")).collect();
    Ok(Output::new(json, format!("best exposure {} ({})", r.best, rows.join(", "))))
}

fn open_dataset(path: &Path) -> Result<Dataset, CliError> {
    if !path.is_dir() {
        return Err(CliError::Config(format!("dataset not found: {}", path.display())));
    }
    read_dataset(path).map_err(CliError::runtime)
}

fn labeled_samples(ds: &Dataset) -> Result<Vec<PairedSample>, CliError> {
    ds.records()
        .iter()
        .filter(|r| r.is_labeled())
        .map(|r| ds.load_sample(&r.id).map_err(CliError::runtime))
        .collect()
}

pub fn cmd_train(cfg: &AppConfig, args: &TrainArgs) -> Result<Output, CliError> {
    let root = args.dataset.as_deref().map_or_else(|| cfg.dataset(), Ok)?;
    let ds = open_dataset(root)?;
    let mut hyper = Hyper { seed: args.seed.unwrap_or(cfg.seed), ..Hyper::default() };
    if let Some(i) = args.iterations {
        hyper.iterations = i;
    }
    let samples = labeled_samples(&ds)?;
    let start = Instant::now();
    let report = fit(&samples, hyper).map_err(CliError::runtime)?;
    report.params.save(&args.out).map_err(CliError::runtime)?;
    let loss = report.loss_trace.last().copied().unwrap_or(f64::NAN);
    let json = json!({
        "model": args.out,
        "samples": samples.len(),
        "pixels": report.pixels,
        "classes": report.params.classes,
        "final_loss": loss,
        "steps": report.loss_trace.len().saturating_sub(1),
        "seconds": start.elapsed().as_secs_f64(),
    });
    let text = format!(
        "trained on {} samples ({} pixels), final loss {loss:.5}, model written to {}",
        samples.len(),
        report.pixels,
        args.out.display()
    );
    Ok(Output::new(json, text))
}

fn dataset_labels(ds: &Dataset) -> Result<Vec<(String, LabelSet)>, CliError> {
    let mut out = Vec::new();
    for rec in ds.records() {
        if let Some(l) = ds.load_labels(rec).map_err(CliError::runtime)? {
            out.push((rec.id.clone(), l));
        }
    }
    Ok(out)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<Output, CliError> {
    let reference = open_dataset(&args.reference)?;
    let truth = dataset_labels(&reference)?;
    let (name, report): (&str, EvalReport) = if let Some(model) = &args.model {
        let params = ModelParams::load(model).map_err(|e| CliError::Config(format!("{}: {e}", model.display())))?;
        let mut pred = Vec::with_capacity(truth.len());
        for (id, _) in &truth {
            let sample = reference.load_sample(id).map_err(CliError::runtime)?;
            pred.push((id.clone(), LabelSet { mask: predict(&params, &sample.std_image), keypoints: Vec::new() }));
        }
        ("model", compare_labelers(&pred, &truth, args.radius).map_err(CliError::runtime)?)
    } else {
        let path = args.pred.as_deref().expect("clap requires --pred without --model");
        let ds = open_dataset(path)?;
        let pred = dataset_labels(&ds)?;
        let mut report = compare_labelers(&pred, &truth, args.radius).map_err(CliError::runtime)?;
        let times: Vec<f64> = ds.records().iter().filter(|r| r.is_labeled()).map(|r| r.t_label).collect();
        if times.iter().all(|&t| t > 0.0) {
            if let Ok(spl) = spl_from_seconds(&times) {
                report = report.with_spl(spl);
            }
        }
        ("luv", report)
    };
    let text = format!("{}mean IOU {:.4}", format_table(&[(name, &report)]), report.mean_iou);
    Ok(Output::new(serde_json::to_value(&report).map_err(CliError::runtime)?, text))
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<Output, CliError> {
    if args.n == 0 || args.width == 0 || args.height == 0 {
        return Err(CliError::Config("--n, --width and --height must be positive".into()));
    }
    if !(args.sigma >= 0.0 && args.sigma.is_finite()) {
        return Err(CliError::Config("--sigma must be finite and non-negative".into()));
    }
    let profile = companion_profile();
    let mut writer = DatasetWriter::open(&args.out).map_err(CliError::runtime)?;
    writer.save_profile(&profile).map_err(CliError::runtime)?;
    let scenes = args.out.join("scenes");
    std::fs::create_dir_all(&scenes).map_err(CliError::runtime)?;
    let mut ids = Vec::with_capacity(args.n);
    for i in 0..args.n {
        let id = format!("sim-{:05}", writer.len());
        let spec = SceneSpec::generate(args.kind, args.width, args.height, args.seed.wrapping_add(i as u64), args.sigma);
        let uv: Vec<_> = profile.uv_exposures().into_iter().map(|e| (e, render_uv(&spec, e))).collect();
        let start = Instant::now();
        let labels = match args.labels {
            LabelSource::Luv => extract_labels(&uv, &profile).map_err(CliError::runtime)?,
            LabelSource::Truth => ground_truth(&spec),
        };
        let timing = TimingRecord { label_seconds: start.elapsed().as_secs_f64(), ..TimingRecord::default() };
        let sample = PairedSample::new(&id, render_standard(&spec, profile.std_exposure), uv, Some(labels), timing)
            .map_err(CliError::runtime)?;
        writer.write_sample(&sample, &profile.name).map_err(CliError::runtime)?;
        let text = serde_json::to_string_pretty(&spec).map_err(CliError::runtime)?;
        std::fs::write(scenes.join(format!("{id}.json")), text).map_err(CliError::runtime)?;
        ids.push(id);
    }
    let json = json!({ "dataset": args.out, "samples": ids });
    Ok(Output::new(json, format!("wrote {} {:?} samples to {}", ids.len(), args.kind, args.out.display())))
}

pub fn cmd_plug(args: &PlugArgs) -> Result<Output, CliError> {
    let endpoint = PlugEndpoint::new(args.host.clone(), args.port).map_err(|e| CliError::Config(e.to_string()))?;
    let client = PlugClient::new(endpoint, DEFAULT_TIMEOUT);
    match args.state {
        PlugState::On | PlugState::Off => {
            let state = RelayState::from_bool(args.state == PlugState::On);
            client.set_relay(RelayCommand { state }).map_err(CliError::runtime)?;
        }
        PlugState::Query => {}
    }
    let state = client.query_state().map_err(CliError::runtime)?;
    let word = if state.is_on() { "on" } else { "off" };
    Ok(Output::new(json!({ "host": args.host, "port": args.port, "state": word }), format!("{}:{} is {word}", args.host, args.port)))
}

pub fn cmd_cost(args: &CostArgs) -> Result<Output, CliError> {
    let n = cost_breakeven(args.setup, args.price, args.labels_per_image).map_err(|e| CliError::Config(e.to_string()))?;
    Ok(Output::new(json!({ "breakeven_images": n }), n.to_string()))
}

pub fn cmd_serve(cfg: &mut AppConfig, args: &ServeArgs) -> Result<Output, CliError> {
    args.rig.apply(cfg);
    if let Some(p) = args.port {
        cfg.port = p;
    }
    cfg.validate()?;
    let state = crate::service::AppState::from_config(cfg)?;
    let addr = format!("{}:{}", args.host, cfg.port);
    let rt = tokio::runtime::Runtime::new().map_err(CliError::runtime)?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::Runtime(format!("cannot listen on {addr}: {e}")))?;
        log::info!("serving on {}", listener.local_addr().map_err(CliError::runtime)?);
        axum::serve(listener, crate::service::router(state)).await.map_err(CliError::runtime)
    })?;
    Ok(Output::new(json!({}), "service stopped"))
}

pub fn cmd_mock_plug(args: &MockPlugArgs) -> Result<Output, CliError> {
    let plug = MockPlug::bind(&args.bind).map_err(|e| CliError::Runtime(format!("cannot bind {}: {e}", args.bind)))?;
    println!("mock plug listening on {}", plug.addr());
    let _ = std::io::stdout().flush();
    plug.join();
    Ok(Output::new(json!({}), "mock plug stopped"))
}
