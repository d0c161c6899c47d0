//! `flowanchor`: pseudo-label mining, σ schedules, synthetic scenes, toy
//! training arms and PCK evaluation from the command line.
//!
//! Exit codes: 0 ok, 2 usage or constraint violation, 3 malformed input,
//! 4 numerical guard, 5 I/O.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use flowanchor_core::anchor::{mine_pseudo_labels, MiningConfig};
use flowanchor_core::io::{
    read_correspondence_file, read_feature_file, write_atomic, write_correspondence_file, CorrespondenceFile,
};
use flowanchor_core::matching::bbox_from_keypoints;
use flowanchor_core::metrics::{pck_aggregate, KeypointPrediction, PckRecord};
use flowanchor_core::objectives::{sigma_at, SigmaSchedule};
use flowanchor_core::{CorrespondenceSet, Error, PixelPoint, PixelRegion, Result};
use flowanchor_toylab::{synth_scene, train_toy, SceneSpec, SyntheticScene, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "flowanchor", version, about = "Dense pseudo-label mining and toy training on descriptor grids")]
struct Cli {
    /// Worker threads (default: rayon's choice). Outputs do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Report failures as one JSON object on stderr.
    #[arg(long, global = true)]
    errors_json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mine anchored dense pseudo-labels between two feature files.
    Mine(MineArgs),
    /// Print the coarse-to-fine bandwidth at every step.
    Schedule(ScheduleArgs),
    /// Render a synthetic scene into a directory.
    Synth(SynthArgs),
    /// Run one training arm on a synthetic scene.
    TrainToy(TrainToyArgs),
    /// PCK of keypoint predictions against annotations.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum RegionKind {
    /// Annotation boxes, or padded keypoint boxes when the file has none.
    Bbox,
    /// Mask blocks stored in both feature files.
    Mask,
    Full,
}

#[derive(Args)]
struct MineArgs {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    /// Annotation file; its seen split (or annotated pairs) anchors the flow.
    #[arg(long)]
    ann: PathBuf,
    #[arg(long, value_enum, default_value = "bbox")]
    region: RegionKind,
    #[arg(long, default_value_t = 15)]
    kinit: usize,
    /// Anchoring radius in source cells.
    #[arg(long, default_value_t = 1.5)]
    r_anchor: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Padding of keypoint boxes, as a fraction of the box diagonal.
    #[arg(long, default_value_t = 0.1)]
    bbox_margin: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum DumpFormat {
    Csv,
    Json,
}

#[derive(Args)]
struct ScheduleArgs {
    #[arg(long, default_value_t = 3.0)]
    sigma_max: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma_min: f64,
    /// Last step T; rows cover t = 0..=T.
    #[arg(long)]
    steps: usize,
    #[arg(long, value_enum, default_value = "csv")]
    dump: DumpFormat,
    /// Write here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Scene spec JSON; missing fields take their defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
struct TrainToyArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Training config JSON; the flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    dense: Option<Switch>,
    #[arg(long)]
    lambda_self: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Fixed bandwidth (cells) instead of the coarse-to-fine schedule.
    #[arg(long)]
    sigma_fixed: Option<f64>,
    /// Gaussian noise (px) added to pseudo-label targets.
    #[arg(long)]
    pseudo_noise: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Predictions: `[{"src", "tgt", "keypoints": [{"id", "x", "y"}]}]`.
    #[arg(long)]
    pred: PathBuf,
    /// One annotation file, or a JSON array of them.
    #[arg(long)]
    ann: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.01,0.05,0.1")]
    alphas: Vec<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PredKeypoint {
    id: u32,
    x: f64,
    y: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PredRecord {
    src: String,
    tgt: String,
    keypoints: Vec<PredKeypoint>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum AnnInput {
    Many(Vec<CorrespondenceFile>),
    One(Box<CorrespondenceFile>),
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn run_mine(args: &MineArgs) -> Result<()> {
    let src = read_feature_file(&args.src)?;
    let tgt = read_feature_file(&args.tgt)?;
    let ann = read_correspondence_file(&args.ann)?;
    let annotated = ann.supervision()?;
    let (region_src, region_tgt) = match args.region {
        RegionKind::Full => (PixelRegion::Full, PixelRegion::Full),
        RegionKind::Mask => match (src.mask.clone(), tgt.mask.clone()) {
            (Some(s), Some(t)) => (PixelRegion::Mask(s), PixelRegion::Mask(t)),
            _ => {
                return Err(Error::InvalidInput(
                    "--region mask needs a mask block in both feature files".into(),
                ))
            }
        },
        RegionKind::Bbox => match &ann.bbox {
            Some(b) => (PixelRegion::BBox(b.src), PixelRegion::BBox(b.tgt)),
            None => bbox_from_keypoints(
                &annotated,
                args.bbox_margin,
                src.grid.lattice().extent_px(),
                tgt.grid.lattice().extent_px(),
            )?,
        },
    };
    let config = MiningConfig {
        k_init: args.kinit,
        r_anchor_cells: args.r_anchor,
        seed: args.seed,
        ..Default::default()
    };
    let outcome = mine_pseudo_labels(&src.grid, &tgt.grid, &annotated, &region_src, &region_tgt, &config)?;
    let mut file = CorrespondenceFile::new(ann.image_pair.clone(), &outcome.pseudo);
    file.diagnostics = Some(serde_json::json!({
        "config": config,
        "stats": outcome.stats,
        "hull_cells": outcome.field.valid_count(),
    }));
    write_correspondence_file(&args.out, &file)
}

fn run_schedule(args: &ScheduleArgs) -> Result<()> {
    let schedule = SigmaSchedule::new(args.sigma_min, args.sigma_max, args.steps)?;
    let rows = (0..=args.steps)
        .map(|t| Ok((t, sigma_at(&schedule, t)?)))
        .collect::<Result<Vec<_>>>()?;
    let text = match args.dump {
        DumpFormat::Csv => {
            let mut s = String::from("t,sigma\n");
            for (t, sigma) in rows {
                s.push_str(&format!("{t},{sigma:?}\n"));
            }
            s
        }
        DumpFormat::Json => {
            let rows: Vec<_> = rows.iter().map(|(t, s)| serde_json::json!({"t": t, "sigma": s})).collect();
            serde_json::to_string_pretty(&rows)? + "\n"
        }
    };
    emit(args.out.as_deref(), &text)
}

fn run_synth(args: &SynthArgs) -> Result<()> {
    let spec: SceneSpec = match &args.spec {
        Some(p) => read_json(p)?,
        None => SceneSpec::default(),
    };
    let scene = synth_scene(&spec, args.seed)?;
    scene.save(&args.out)?;
    for (a, b) in scene.ordered_pairs() {
        write_correspondence_file(&args.out.join(format!("ann_{a}_{b}.json")), &scene.annotation_file(a, b))?;
    }
    Ok(())
}

fn run_train(args: &TrainToyArgs) -> Result<()> {
    let scene = SyntheticScene::load(&args.scene)?;
    let mut config: TrainConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(d) = args.dense {
        config.use_dense_loss = d == Switch::On;
    }
    if let Some(sigma) = args.sigma_fixed {
        config.sigma_max = sigma;
        config.sigma_min = sigma;
    }
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = args.$field { config.$field = v; })* };
    }
    set!(lambda_self, steps, seed, lr, beta, eval_every);
    if let Some(v) = args.pseudo_noise {
        config.pseudo_noise_px = v;
    }
    let (_, trace) = train_toy(&scene, &config)?;
    create_dir(&args.out)?;
    write_atomic(&args.out.join("metrics.json"), (serde_json::to_string_pretty(&trace)? + "\n").as_bytes())?;
    let last = trace.last();
    let mut csv = String::from("split,alpha,pck\n");
    for (split, values) in [("seen", &last.seen), ("unseen", &last.unseen)] {
        for (alpha, v) in last.alphas.iter().zip(values) {
            csv.push_str(&format!("{split},{alpha},{v:.6}\n"));
        }
    }
    write_atomic(&args.out.join("pck.csv"), csv.as_bytes())
}

/// Records of one split for one annotation file; `None` when the split has
/// no keypoints in this file.
fn eval_record(ann: &CorrespondenceFile, pred: &PredRecord, ids: Option<&[u32]>) -> Result<Option<PckRecord>> {
    let name = format!("{}->{}", ann.image_pair.src, ann.image_pair.tgt);
    let preds: BTreeMap<u32, &PredKeypoint> = pred.keypoints.iter().map(|k| (k.id, k)).collect();
    let mut keypoints = Vec::new();
    let mut gt_set = Vec::new();
    for p in &ann.pairs {
        let Some(id) = p.id else {
            return Err(Error::Annotation(format!("{name}: evaluation needs keypoint ids")));
        };
        if ids.is_some_and(|ids| !ids.contains(&id)) {
            continue;
        }
        let Some(k) = preds.get(&id) else {
            return Err(Error::Annotation(format!("{name}: no prediction for keypoint {id}")));
        };
        let gt = PixelPoint::new(p.tx, p.ty);
        gt_set.push((gt, gt));
        keypoints.push(KeypointPrediction {
            id: id as usize,
            pred: PixelPoint::new(k.x, k.y),
            gt,
        });
    }
    if keypoints.is_empty() {
        return Ok(None);
    }
    let bbox = match &ann.bbox {
        Some(b) => b.tgt,
        None => {
            let [h, w] = ann.image_pair.tgt_hw;
            let (_, region) = bbox_from_keypoints(&CorrespondenceSet::annotated(&gt_set)?, 0.0, (w, h), (w, h))?;
            match region {
                PixelRegion::BBox(b) => b,
                _ => unreachable!("keypoint boxes are boxes"),
            }
        }
    };
    Ok(Some(PckRecord {
        image: name,
        bbox_h: bbox.height(),
        bbox_w: bbox.width(),
        keypoints,
    }))
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let preds: Vec<PredRecord> = read_json(&args.pred)?;
    let anns = match read_json::<AnnInput>(&args.ann)? {
        AnnInput::Many(v) => v,
        AnnInput::One(f) => vec![*f],
    };
    if anns.is_empty() {
        return Err(Error::Annotation("annotation list is empty".into()));
    }
    let by_pair: BTreeMap<(&str, &str), &PredRecord> =
        preds.iter().map(|p| ((p.src.as_str(), p.tgt.as_str()), p)).collect();
    let mut csv = String::from("split,alpha,pck\n");
    let split_names = ["all", "seen", "unseen"];
    for split in split_names {
        let mut records = Vec::new();
        for ann in &anns {
            ann.validate()?;
            let ids = match split {
                "seen" => Some(ann.splits.seen.as_slice()),
                "unseen" => Some(ann.splits.unseen.as_slice()),
                _ => None,
            };
            let key = (ann.image_pair.src.as_str(), ann.image_pair.tgt.as_str());
            let Some(pred) = by_pair.get(&key) else {
                return Err(Error::Annotation(format!("no predictions for pair {} -> {}", key.0, key.1)));
            };
            records.extend(eval_record(ann, pred, ids)?);
        }
        if records.is_empty() {
            continue;
        }
        for (alpha, v) in args.alphas.iter().zip(pck_aggregate(&records, &args.alphas)?) {
            csv.push_str(&format!("{split},{alpha},{v:.6}\n"));
        }
    }
    emit(args.out.as_deref(), &csv)
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidInput("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Mine(a) => run_mine(a),
        Command::Schedule(a) => run_schedule(a),
        Command::Synth(a) => run_synth(a),
        Command::TrainToy(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
    }
}

fn report(json: bool, kind: &str, message: &str, code: u8) -> ExitCode {
    if json {
        eprintln!("{}", serde_json::json!({"error": kind, "message": message, "exit_code": code}));
    } else {
        eprintln!("error: {message}");
    }
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let json = std::env::args().any(|a| a == "--errors-json");
            if !json {
                let _ = e.print();
                return ExitCode::from(2);
            }
            let message = e.kind().to_string();
            return report(true, "usage", &message, 2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(cli.errors_json, e.kind(), &e.to_string(), e.exit_code() as u8),
    }
}
