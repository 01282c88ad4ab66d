//! The `gsvton` command line.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use gsvton_core::edit::TargetRegion;
use gsvton_core::metrics::{MetricReport, Pairing};
use gsvton_core::optimize::{fit_scene, FitConfig};
use gsvton_core::strategy::{EditJob, EditReport, Strategy};
use gsvton_core::synth::{red_garment_prompt, SynthConfig, SynthScene};

use crate::error::{IoError, Result};
use crate::io::manifest::{load_camera_path, load_dataset, read_json, read_manifest, write_dataset, write_json, Intrinsics};
use crate::io::{ply, png, raw};
use crate::pipeline::{
    compare_reports, load_job_file, load_prompt, relative_to, render_all, resolve_endpoint, run_with_bindings,
    write_edit_artifacts, EditOutputs, ErrorReport, JobFile, OutputIndex, Overrides,
};

#[derive(Debug, Parser)]
#[command(name = "gsvton", version, about = "Image-prompted garment editing of Gaussian-splatting scenes")]
pub struct Cli {
    /// Worker threads; defaults to the number of logical cores.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic mannequin scene, its views and a sample job.
    Synth(SynthArgs),
    /// Fit a scene's Gaussians to a dataset.
    Fit(FitArgs),
    /// Run an edit job.
    Edit(EditArgs),
    /// Render a scene along a camera path.
    Render(RenderArgs),
    /// Compute PSNR/SSIM for a dataset against renders or another dataset.
    Eval(EvalArgs),
    /// Diff two edit reports.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 24)]
    pub views: usize,
    /// Image width and height.
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Initial scene.
    #[arg(long)]
    pub ply: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Err,
    IterativeDu,
    Both,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub job: PathBuf,
    /// Overrides the job's scene path.
    #[arg(long)]
    pub ply: Option<PathBuf>,
    /// Overrides the job's manifest path.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub jitter: Option<f64>,
    /// Skip the final per-view renders.
    #[arg(long)]
    pub no_renders: bool,
    /// Also write original | target | render strips.
    #[arg(long)]
    pub grids: bool,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub ply: PathBuf,
    /// JSON list of 4×4 world-to-camera poses or full cameras.
    #[arg(long)]
    pub cameras: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Take intrinsics for bare poses from this manifest's first view.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    pub width: usize,
    #[arg(long, default_value_t = 128)]
    pub height: usize,
    #[arg(long, default_value_t = 190.0)]
    pub focal: f64,
    /// Also write linear float dumps.
    #[arg(long)]
    pub raw: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PairingArg {
    EditedVsOriginal,
    RenderVsEdited,
    RenderVsOriginal,
    RenderVsRender,
}

impl From<PairingArg> for Pairing {
    fn from(p: PairingArg) -> Self {
        match p {
            PairingArg::EditedVsOriginal => Pairing::EditedVsOriginal,
            PairingArg::RenderVsEdited => Pairing::RenderVsEdited,
            PairingArg::RenderVsOriginal => Pairing::RenderVsOriginal,
            PairingArg::RenderVsRender => Pairing::RenderVsRender,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Reference dataset.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Compare renders of this scene against the reference.
    #[arg(long, conflicts_with = "against", required_unless_present = "against")]
    pub ply: Option<PathBuf>,
    /// Compare this dataset's images against the reference.
    #[arg(long)]
    pub against: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Label for the pairing; defaults from the inputs.
    #[arg(long, value_enum)]
    pub pairing: Option<PairingArg>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    pub a: PathBuf,
    pub b: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Fit(_) => "fit",
            Command::Edit(_) => "edit",
            Command::Render(_) => "render",
            Command::Eval(_) => "eval",
            Command::Compare(_) => "compare",
        }
    }

    fn out(&self) -> &Path {
        match self {
            Command::Synth(a) => &a.out,
            Command::Fit(a) => &a.out,
            Command::Edit(a) => &a.out,
            Command::Render(a) => &a.out,
            Command::Eval(a) => &a.out,
            Command::Compare(a) => &a.out,
        }
    }
}

/// Writes the synthetic scene, its dataset, a garment prompt and a mock
/// job that edits it.
pub fn synth(args: &SynthArgs) -> Result<OutputIndex> {
    if args.views < 3 {
        return Err(gsvton_core::Error::InvalidParameter(format!("synth needs at least 3 views, got {}", args.views)).into());
    }
    let defaults = SynthConfig::default();
    // Keep the framing of the default image size.
    let config = SynthConfig {
        views: args.views,
        width: args.size,
        height: args.size,
        focal: defaults.focal * args.size as f64 / defaults.width as f64,
        seed: args.seed,
        ..defaults
    };
    let scene = SynthScene::build(&config)?;
    let dataset = scene.dataset()?;
    let out = &args.out;
    let mut index = OutputIndex::new("synth");
    ply::save_ply(&out.join("scene.ply"), &scene.cloud)?;
    index.add("scene", "scene.ply");
    for f in write_dataset(out, "dataset.json", "synth", &dataset)? {
        let kind = if f.ends_with(".json") {
            "dataset"
        } else if f.starts_with("parsing/") {
            "parsing"
        } else {
            "image"
        };
        index.add(kind, f);
    }
    let mut parts = std::collections::BTreeMap::<String, Vec<usize>>::new();
    for (i, p) in scene.parts.iter().enumerate() {
        parts.entry(format!("{p:?}").to_lowercase()).or_default().push(i);
    }
    write_json(&out.join("parts.json"), &parts)?;
    index.add("metadata", "parts.json");
    png::save_rgb(&out.join("garment.png"), &red_garment_prompt(64))?;
    index.add("prompt", "garment.png");
    let mut job = EditJob::mock(Strategy::Err, 1, 480, 0.2, args.seed);
    job.prompt_image = "garment.png".into();
    job.target_region = TargetRegion::Upper;
    let job_file = JobFile {
        scene: Some("scene.ply".into()),
        manifest: Some("dataset.json".into()),
        job,
    };
    write_json(&out.join("job.json"), &job_file)?;
    index.add("job", "job.json");
    index.write(out)?;
    Ok(index)
}

pub fn fit(args: &FitArgs) -> Result<OutputIndex> {
    let dataset = load_dataset(&args.manifest)?;
    let init = ply::load_ply(&args.ply)?;
    let cfg = FitConfig {
        seed: args.seed,
        ..FitConfig::default()
    };
    let (cloud, report) = fit_scene(&dataset, init, args.iters, &cfg)?;
    let mut index = OutputIndex::new("fit");
    ply::save_ply(&args.out.join("fitted.ply"), &cloud)?;
    index.add("scene", "fitted.ply");
    write_json(&args.out.join("fit_report.json"), &report)?;
    index.add("report", "fit_report.json");
    index.write(&args.out)?;
    Ok(index)
}

fn strategy_dir(s: Strategy) -> &'static str {
    s.as_str()
}

pub fn edit(args: &EditArgs) -> Result<OutputIndex> {
    let JobFile {
        scene,
        manifest,
        mut job,
    } = load_job_file(&args.job)?;
    let fixed = match args.strategy {
        Some(StrategyArg::Err) => Some(Strategy::Err),
        Some(StrategyArg::IterativeDu) => Some(Strategy::IterativeDu),
        _ => None,
    };
    let overrides = Overrides {
        seed: args.seed,
        strategy: fixed,
        tau: args.tau,
        rho: args.rho,
        jitter: args.jitter,
    };
    let mut logged = overrides.apply(&mut job)?;
    resolve_endpoint(&mut job);
    let input = |flag: &Option<PathBuf>, from_job: &Option<String>, what: &str| -> Result<PathBuf> {
        match (flag, from_job) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(p)) => Ok(relative_to(&args.job, p)),
            (None, None) => Err(gsvton_core::Error::Precondition(format!("no {what} given")).into()),
        }
    };
    let cloud = ply::load_ply(&input(&args.ply, &scene, "scene")?)?;
    let dataset = load_dataset(&input(&args.manifest, &manifest, "manifest")?)?;
    let prompt = load_prompt(&job, Some(&args.job))?;
    let outputs = EditOutputs {
        renders: !args.no_renders,
        grids: args.grids,
    };
    let mut index = OutputIndex::new("edit");
    let strategies = if args.strategy == Some(StrategyArg::Both) {
        logged.insert("strategy".into(), "both".into());
        vec![Strategy::Err, Strategy::IterativeDu]
    } else {
        vec![job.strategy]
    };
    let mut reports: Vec<EditReport> = Vec::new();
    for &s in &strategies {
        let mut job = job.clone();
        job.strategy = s;
        let mut ds = dataset.clone();
        let (edited, mut report) = run_with_bindings(&cloud, &mut ds, &job, &prompt)?;
        report.overrides = logged.clone();
        let prefix = if strategies.len() > 1 { strategy_dir(s) } else { "" };
        write_edit_artifacts(&args.out, prefix, &edited, &ds, &report, outputs, &mut index)?;
        reports.push(report);
    }
    if let [a, b] = &reports[..] {
        write_json(&args.out.join("comparison.json"), &compare_reports(a, b))?;
        index.add("comparison", "comparison.json");
    }
    index.write(&args.out)?;
    Ok(index)
}

pub fn render(args: &RenderArgs) -> Result<OutputIndex> {
    let cloud = ply::load_ply(&args.ply)?;
    let intrinsics = match &args.manifest {
        Some(m) => {
            let manifest = read_manifest(m)?;
            let v = manifest.views.first().ok_or_else(|| IoError::Manifest {
                path: m.clone(),
                msg: "no views".into(),
            })?;
            Intrinsics {
                focal: [v.fx, v.fy],
                principal_point: [v.cx, v.cy],
                width: v.width,
                height: v.height,
            }
        }
        None => Intrinsics {
            focal: [args.focal; 2],
            principal_point: [args.width as f64 * 0.5, args.height as f64 * 0.5],
            width: args.width,
            height: args.height,
        },
    };
    let cams = load_camera_path(&args.cameras, &intrinsics)?;
    let mut index = OutputIndex::new("render");
    for cam in &cams {
        let img = gsvton_core::render::render_view(&cloud, cam, &Default::default())?.pixels;
        let p = format!("frames/frame_{:04}.png", cam.view_index);
        png::save_rgb(&args.out.join(&p), &img)?;
        index.add("render", p);
        if args.raw {
            let p = format!("frames/frame_{:04}.raw", cam.view_index);
            raw::save_raw(&args.out.join(&p), &img)?;
            index.add("raw", p);
        }
    }
    index.write(&args.out)?;
    Ok(index)
}

pub fn eval(args: &EvalArgs) -> Result<OutputIndex> {
    let reference = load_dataset(&args.manifest)?;
    let (images, default_pairing) = match (&args.ply, &args.against) {
        (Some(p), _) => (render_all(&ply::load_ply(p)?, &reference)?, Pairing::RenderVsOriginal),
        (None, Some(m)) => {
            let other = load_dataset(m)?;
            let imgs = reference
                .records()
                .iter()
                .map(|r| Ok((r.view_index(), other.record(r.view_index())?.original().clone())))
                .collect::<Result<Vec<_>>>()?;
            (imgs, Pairing::EditedVsOriginal)
        }
        (None, None) => unreachable!("clap requires one of --ply/--against"),
    };
    let pairing = args.pairing.map(Pairing::from).unwrap_or(default_pairing);
    let pairs: Vec<_> = reference
        .records()
        .iter()
        .zip(&images)
        .map(|(r, (v, img))| (*v, img, r.original()))
        .collect();
    let id = read_manifest(&args.manifest)?.id;
    let report = MetricReport::compute(id, pairing, &pairs)?;
    let mut index = OutputIndex::new("eval");
    write_json(&args.out.join("metrics.json"), &report)?;
    index.add("metrics", "metrics.json");
    crate::io::write_file(&args.out.join("metrics.csv"), report.to_csv().as_bytes())?;
    index.add("metrics", "metrics.csv");
    index.write(&args.out)?;
    Ok(index)
}

pub fn compare(args: &CompareArgs) -> Result<OutputIndex> {
    let a: EditReport = read_json(&args.a)?;
    let b: EditReport = read_json(&args.b)?;
    let mut index = OutputIndex::new("compare");
    write_json(&args.out.join("comparison.json"), &compare_reports(&a, &b))?;
    index.add("comparison", "comparison.json");
    index.write(&args.out)?;
    Ok(index)
}

/// Runs a parsed command. Failures are written to `error.json` under the
/// output directory as well as returned.
pub fn run(cli: &Cli) -> Result<OutputIndex> {
    if let Some(n) = cli.jobs {
        // A second call in one process keeps the first pool; that only
        // matters to tests, and output does not depend on the count.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let result = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Fit(a) => fit(a),
        Command::Edit(a) => edit(a),
        Command::Render(a) => render(a),
        Command::Eval(a) => eval(a),
        Command::Compare(a) => compare(a),
    };
    if let Err(e) = &result {
        let report = ErrorReport::new(cli.command.name(), e);
        if let Err(w) = write_json(&cli.command.out().join("error.json"), &report) {
            log::error!("could not write error report: {w}");
        }
    }
    result
}

/// Entry point of the binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(_) => 0,
        Err(e) => {
            let report = ErrorReport::new(cli.command.name(), &e);
            eprintln!("{}", serde_json::to_string(&report).expect("report serializes"));
            1
        }
    }
}
