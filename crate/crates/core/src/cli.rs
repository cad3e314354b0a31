//! Command-line front end: `train`, `detect`, `eval`, `profile`, `stats`.

use std::collections::HashMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::boxes::Detections;
use crate::config::Settings;
use crate::data::{draw_boxes, parse_detections, save_image, write_detections, Dataset};
use crate::detector::{load_checkpoint, Detector, Trainer};
use crate::error::{Error, Result};
use crate::eval::fixtures::ap_fixtures;
use crate::eval::{
    aspect_ratio_histogram, average_precision, default_ratio_edges, histogram_svg, pr_curves_svg, profile,
};

/// Effective settings file written into every output directory.
pub const SETTINGS_FILE: &str = "settings.txt";

#[derive(Debug, Parser)]
#[command(name = "efficientface", version, about = "Single-stage face detector")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on a dataset directory or a synthetic set.
    Train(TrainArgs),
    /// Run a checkpoint over images and write detection files.
    Detect(DetectArgs),
    /// Average precision of a checkpoint or of detection files.
    Eval(EvalArgs),
    /// Parameter and MAC counts.
    Profile(ProfileArgs),
    /// Face aspect-ratio histogram of a dataset.
    Stats(StatsArgs),
}

/// Settings shared by every subcommand; applied in the order preset,
/// config file, individual flags, `--set`.
#[derive(Debug, Args, Clone, Default)]
pub struct ModelArgs {
    /// Starting point: `full` or `tiny`.
    #[arg(long, default_value = "full")]
    pub preset: String,
    /// `key=value` settings file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// sbifpn, fpn_panet or bifpn.
    #[arg(long)]
    pub neck: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    pub attn_depth: Option<i64>,
    #[arg(long)]
    pub no_rfe: bool,
    #[arg(long)]
    pub no_attn: bool,
    /// Backbone preset: tiny, b0 .. b5.
    #[arg(long)]
    pub backbone: Option<String>,
    /// Extra `key=value` overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ModelArgs {
    pub fn settings(&self) -> Result<Settings> {
        let mut s = Settings::preset(&self.preset)?;
        if let Some(path) = &self.config {
            s.apply_text(&std::fs::read_to_string(path)?)?;
        }
        if let Some(seed) = self.seed {
            s.seed = seed;
        }
        if let Some(tag) = &self.backbone {
            s.set("backbone", tag)?;
        }
        if let Some(neck) = &self.neck {
            s.set("model.neck", neck)?;
        }
        if let Some(d) = self.attn_depth {
            s.set("model.attn_depth", &d.to_string())?;
        }
        if self.no_attn {
            s.model.attn_depth = 0;
        }
        if self.no_rfe {
            s.model.rfe = false;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(vec![format!("--set expects KEY=VALUE, got `{kv}`")]))?;
            s.set(k.trim(), v.trim())?;
        }
        s.validate()?;
        Ok(s)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Directory with annotations.txt, or `synthN`.
    #[arg(long, default_value = "synth20")]
    pub dataset: String,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long, default_value = "runs/train")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: String,
    #[arg(long, default_value = "runs/detect")]
    pub out: PathBuf,
    /// Also write images with the detections drawn on them.
    #[arg(long)]
    pub draw: bool,
    #[arg(long)]
    pub score_thr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Evaluate the built-in hand fixtures.
    #[arg(long, conflicts_with_all = ["checkpoint", "detections"])]
    pub fixtures: bool,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Directory of detection files, as written by `detect`.
    #[arg(long, conflicts_with = "checkpoint")]
    pub detections: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<String>,
    /// Files listing image names, one per line; AP is reported per list.
    #[arg(long)]
    pub subset: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub iou: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Square input side.
    #[arg(long, default_value_t = 640)]
    pub input: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long, default_value = "synth20")]
    pub dataset: String,
    /// Side of synthetic images.
    #[arg(long, default_value_t = 640)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `argv` (including the program name) and runs the command.
/// Returns the process exit code: 0 on success, 2 for usage errors, 1 for
/// failed runs.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn execute(command: &Command) -> Result<()> {
    match command {
        Command::Train(a) => train(a),
        Command::Detect(a) => detect(a),
        Command::Eval(a) => eval(a),
        Command::Profile(a) => profile_cmd(a),
        Command::Stats(a) => stats(a),
    }
}

fn echo_settings(dir: &Path, settings: &Settings) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(SETTINGS_FILE), settings.to_text())?;
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut settings = a.model.settings()?;
    if let Some(e) = a.epochs {
        settings.train.epochs = e;
    }
    if a.max_steps.is_some() {
        settings.train.max_steps = a.max_steps;
    }
    settings.validate()?;
    echo_settings(&a.out, &settings)?;
    let data = Dataset::open(&a.dataset, settings.train.image_size, settings.seed)?;
    let mut detector = Detector::build(&settings.model, settings.seed)?;
    let mut trainer = Trainer::new(&detector, &settings)?;
    let report = trainer.fit(&mut detector, &data, Some(&a.out))?;
    println!(
        "trained {} steps over {} epochs; best epoch loss {:.6}",
        report.steps,
        report.epochs.len(),
        report.best_loss
    );
    println!("outputs in {}", a.out.display());
    Ok(())
}

fn run_detector(detector: &Detector, data: &Dataset) -> Result<Vec<Detections>> {
    data.samples
        .iter()
        .map(|s| {
            let padded = s.padded();
            Ok(detector.detect(&padded.image)?.remove(0))
        })
        .collect()
}

fn detect(a: &DetectArgs) -> Result<()> {
    let (mut settings, detector, _) = load_checkpoint(&a.checkpoint)?;
    let mut detector = detector;
    if let Some(t) = a.score_thr {
        settings.model.infer.score_thr = t;
        detector = rebuild_with_infer(detector, &settings)?;
    }
    echo_settings(&a.out, &settings)?;
    let data = Dataset::open(&a.dataset, settings.train.image_size, settings.seed)?;
    let dets = run_detector(&detector, &data)?;
    let paths = write_detections(&data.records, &dets, &a.out)?;
    if a.draw {
        for (s, d) in data.samples.iter().zip(&dets) {
            let stem = s.name.rsplit_once('.').map_or(s.name.as_str(), |(x, _)| x);
            save_image(
                &draw_boxes(&s.image, d),
                &a.out.join("annotated").join(format!("{stem}.png")),
            )?;
        }
    }
    let total: usize = dets.iter().map(Detections::len).sum();
    println!(
        "{total} detections over {} images; {} files in {}",
        dets.len(),
        paths.len(),
        a.out.display()
    );
    Ok(())
}

/// Copies parameters into a detector built with updated inference
/// settings.
fn rebuild_with_infer(old: Detector, settings: &Settings) -> Result<Detector> {
    let mut fresh = Detector::build(&settings.model, 0)?;
    fresh.params = old.params;
    Ok(fresh)
}

fn read_subset(path: &Path) -> Result<Vec<String>> {
    Ok(std::fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| l.rsplit(['/', '\\']).next().unwrap_or(l).to_string())
        .collect())
}

fn eval(a: &EvalArgs) -> Result<()> {
    if a.fixtures {
        for f in ap_fixtures() {
            let r = average_precision(&f.dets, &f.gts, a.iou)?;
            println!("{:<14} AP {}", f.name, r.ap);
        }
        return Ok(());
    }
    let dataset = a
        .dataset
        .as_deref()
        .ok_or_else(|| Error::Config(vec!["eval needs --dataset (or --fixtures)".into()]))?;
    let (data, dets) = match (&a.checkpoint, &a.detections) {
        (Some(ckpt), _) => {
            let (settings, detector, _) = load_checkpoint(ckpt)?;
            let data = Dataset::open(dataset, settings.train.image_size, settings.seed)?;
            let dets = run_detector(&detector, &data)?;
            (data, dets)
        }
        (None, Some(dir)) => {
            let echoed = dir.join(SETTINGS_FILE);
            let (size, seed) = if echoed.exists() {
                let s = Settings::load(&echoed)?;
                (s.train.image_size, s.seed)
            } else {
                (640, 0)
            };
            let data = Dataset::open(dataset, size, seed)?;
            let mut by_name: HashMap<String, Detections> = HashMap::new();
            for entry in std::fs::read_dir(dir)? {
                let path = entry?.path();
                if path.extension().is_some_and(|e| e == "txt") && path.file_name() != Some(SETTINGS_FILE.as_ref()) {
                    let (name, d) = parse_detections(&std::fs::read_to_string(&path)?)?;
                    by_name.insert(name, d);
                }
            }
            let dets = data
                .samples
                .iter()
                .map(|s| by_name.remove(&s.name).unwrap_or_default())
                .collect();
            (data, dets)
        }
        (None, None) => {
            return Err(Error::Config(vec![
                "eval needs --checkpoint, --detections or --fixtures".into(),
            ]));
        }
    };
    let gts: Vec<_> = data.samples.iter().map(|s| s.gt.clone()).collect();
    let names: Vec<&str> = data.samples.iter().map(|s| s.name.as_str()).collect();
    let mut rows = vec![("all".to_string(), average_precision(&dets, &gts, a.iou)?)];
    for path in &a.subset {
        let subset = read_subset(path)?;
        let keep: Vec<&str> = subset.iter().map(String::as_str).collect();
        let sd = crate::eval::filter_subset(&names, &dets, &keep);
        let sg = crate::eval::filter_subset(&names, &gts, &keep);
        let label = path
            .file_stem()
            .map_or("subset".into(), |s| s.to_string_lossy().into_owned());
        rows.push((label, average_precision(&sd, &sg, a.iou)?));
    }
    println!("{:<12} {:>8} {:>8} {:>8}", "subset", "AP", "faces", "dets");
    for (name, r) in &rows {
        println!("{name:<12} {:>8.4} {:>8} {:>8}", r.ap, r.num_gt, r.num_det);
    }
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out)?;
        for (name, r) in &rows {
            std::fs::write(out.join(format!("pr_{name}.csv")), r.curve.to_csv()?)?;
        }
        let curves: Vec<(&str, &crate::eval::PrCurve)> = rows.iter().map(|(n, r)| (n.as_str(), &r.curve)).collect();
        std::fs::write(out.join("pr.svg"), pr_curves_svg(&curves))?;
    }
    Ok(())
}

fn profile_cmd(a: &ProfileArgs) -> Result<()> {
    let settings = a.model.settings()?;
    let detector = Detector::build(&settings.model, settings.seed)?;
    let report = profile(&detector, a.input, a.input)?;
    print!("{}", report.table());
    if let Some(out) = &a.out {
        echo_settings(out, &settings)?;
        std::fs::write(out.join("profile.csv"), report.to_csv()?)?;
        std::fs::write(out.join("profile.txt"), report.table())?;
    }
    Ok(())
}

fn stats(a: &StatsArgs) -> Result<()> {
    let data = Dataset::open(&a.dataset, a.size, a.seed)?;
    let boxes = data.records.iter().flat_map(|r| r.gt.boxes.iter());
    let h = aspect_ratio_histogram(boxes, &default_ratio_edges())?;
    print!("{}", h.to_csv()?);
    if h.below + h.above > 0 {
        println!("outside range: {} below, {} above", h.below, h.above);
    }
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("aspect_ratios.csv"), h.to_csv()?)?;
        std::fs::write(out.join("aspect_ratios.svg"), histogram_svg(&h, "Face aspect ratios"))?;
    }
    Ok(())
}
