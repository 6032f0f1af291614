//! `corrhal`: synthetic data generation, training, inference, pose
//! estimation and evaluation reports.
//!
//! Every failure prints one JSON object `{code, message, context}` on stderr
//! and exits nonzero.

use clap::{Args, Parser, Subcommand};
use corrhal::corrmap::{read_maps, write_map_pgm, write_maps, CorrespondenceMap};
use corrhal::eval::{build_report, evaluate_maps, PoseOutcome, ReportConfig};
use corrhal::net::{infer, load_checkpoint, save_checkpoint};
use corrhal::pose::{estimate, PoseConfig, PoseEstimate, PoseEstimateRecord, PoseProblem};
use corrhal::synth::{load_dataset, sample_pairs, save_dataset, Pair, PairConfig};
use corrhal::train::{train_with_progress, write_metrics_csv, TrainConfig};
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "corrhal", version, about = "Correspondence hallucination toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic pair dataset.
    SynthGen {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        count: usize,
    },
    /// Train the network; writes model.ckpt and metrics.csv.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        data: PathBuf,
        /// Validation dataset; the training pairs are used when absent.
        #[arg(long)]
        val: Option<PathBuf>,
    },
    /// Predict correspondence maps for every keypoint of each pair.
    Infer {
        #[command(flatten)]
        common: Common,
        /// Must match the checkpoint when given.
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Restrict to one pair by manifest name.
        #[arg(long)]
        pair: Option<String>,
        /// Graymap previews written per pair (first keypoints).
        #[arg(long, default_value_t = 2)]
        previews: usize,
    },
    /// Estimate the relative pose of each pair from its maps.
    Pose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        maps: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pair: Option<String>,
    },
    /// Write NRE, argmax-error and pose-precision tables.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        maps: PathBuf,
        /// Directory of pose JSONs; pose curves are omitted when absent.
        #[arg(long)]
        poses: Option<PathBuf>,
    },
}

#[derive(Debug, Serialize)]
struct CliError {
    code: String,
    message: String,
    context: String,
}

impl CliError {
    fn new(code: &str, message: impl Into<String>, context: impl Into<String>) -> Self {
        Self {
            code: code.into(),
            message: message.into(),
            context: context.into(),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

trait Context<T> {
    fn ctx(self, context: impl Into<String>) -> CliResult<T>;
}

impl<T> Context<T> for corrhal::Result<T> {
    fn ctx(self, context: impl Into<String>) -> CliResult<T> {
        self.map_err(|e| CliError::new(e.code(), e.to_string(), context))
    }
}

impl<T> Context<T> for std::io::Result<T> {
    fn ctx(self, context: impl Into<String>) -> CliResult<T> {
        self.map_err(corrhal::Error::from).ctx(context)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::new("usage", e.kind().to_string(), e.to_string().trim_end());
            return report_error(&err, 2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report_error(&e, 1),
    }
}

fn report_error(e: &CliError, status: u8) -> ExitCode {
    let json = serde_json::to_string(e).unwrap_or_else(|_| format!("{{\"code\":\"{}\"}}", e.code));
    eprintln!("{json}");
    ExitCode::from(status)
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::SynthGen { common, count } => synth_gen(&common, count),
        Command::Train { common, gamma, data, val } => train(&common, gamma, &data, val.as_deref()),
        Command::Infer {
            common,
            gamma,
            ckpt,
            data,
            pair,
            previews,
        } => run_infer(&common, gamma, &ckpt, &data, pair.as_deref(), previews),
        Command::Pose { common, maps, data, pair } => run_pose(&common, &maps, &data, pair.as_deref()),
        Command::Report {
            common,
            data,
            maps,
            poses,
        } => report(&common, &data, &maps, poses.as_deref()),
    }
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let ctx = format!("reading config {}", path.display());
    let file = File::open(path).ctx(&ctx)?;
    serde_json::from_reader(BufReader::new(file))
        .map_err(corrhal::Error::from)
        .ctx(ctx)
}

fn create_out(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).ctx(format!("creating {}", dir.display()))
}

fn create_file(path: &Path) -> CliResult<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).ctx(format!("creating {}", path.display()))?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let ctx = format!("writing {}", path.display());
    let mut w = create_file(path)?;
    serde_json::to_writer_pretty(&mut w, value)
        .map_err(corrhal::Error::from)
        .ctx(&ctx)?;
    w.write_all(b"\n").ctx(&ctx)?;
    w.flush().ctx(ctx)
}

/// Loads a dataset and returns `(name, pair)` entries, optionally filtered
/// to one pair.
fn load_pairs(dir: &Path, only: Option<&str>) -> CliResult<(PairConfig, Vec<(String, Pair)>)> {
    let (manifest, pairs) = load_dataset(dir).ctx(format!("loading dataset {}", dir.display()))?;
    let named: Vec<(String, Pair)> = manifest
        .pairs
        .iter()
        .map(|e| e.name.clone())
        .zip(pairs)
        .filter(|(name, _)| only.is_none_or(|o| o == name))
        .collect();
    if let Some(o) = only {
        if named.is_empty() {
            return Err(CliError::new("not_found", format!("no pair named {o}"), dir.display().to_string()));
        }
    }
    Ok((manifest.config, named))
}

fn synth_gen(common: &Common, count: usize) -> CliResult<()> {
    let config: PairConfig = load_config(common.config.as_deref())?;
    let seed = common.seed.unwrap_or(0);
    let pairs = sample_pairs(seed, count, &config).ctx("sampling pairs")?;
    save_dataset(&common.out, &pairs, &config).ctx(format!("writing dataset {}", common.out.display()))?;
    Ok(())
}

fn train(common: &Common, gamma: Option<f64>, data: &Path, val: Option<&Path>) -> CliResult<()> {
    let mut config: TrainConfig = load_config(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(gamma) = gamma {
        config.gamma = gamma;
    }
    let (_, train_pairs) = load_pairs(data, None)?;
    let val_pairs = match val {
        Some(v) => load_pairs(v, None)?.1,
        None => Vec::new(),
    };
    let strip = |v: Vec<(String, Pair)>| v.into_iter().map(|(_, p)| p).collect::<Vec<_>>();
    let (train_pairs, val_pairs) = (strip(train_pairs), strip(val_pairs));
    let outcome = train_with_progress(&config, &train_pairs, &val_pairs, |m| {
        eprintln!(
            "epoch {:>3}  lr {:.2e}  train {:.4}  val {:.4}  dropped {}",
            m.epoch, m.lr, m.train_nre, m.val_nre, m.dropped_keypoints
        );
    })
    .ctx("training")?;
    create_out(&common.out)?;
    let ckpt = common.out.join("model.ckpt");
    save_checkpoint(&ckpt, &outcome.params, config.gamma).ctx(format!("writing {}", ckpt.display()))?;
    let metrics = common.out.join("metrics.csv");
    write_metrics_csv(create_file(&metrics)?, &outcome.metrics).ctx(format!("writing {}", metrics.display()))?;
    write_json(&common.out.join("train_config.json"), &config)
}

fn run_infer(
    common: &Common,
    gamma: Option<f64>,
    ckpt: &Path,
    data: &Path,
    only: Option<&str>,
    previews: usize,
) -> CliResult<()> {
    let (params, ckpt_gamma) = load_checkpoint(ckpt).ctx(format!("loading {}", ckpt.display()))?;
    if let Some(g) = gamma {
        if g != ckpt_gamma {
            return Err(CliError::new(
                "invalid_config",
                format!("--gamma {g} does not match the checkpoint's {ckpt_gamma}"),
                ckpt.display().to_string(),
            ));
        }
    }
    let (_, pairs) = load_pairs(data, only)?;
    create_out(&common.out)?;
    for (name, pair) in &pairs {
        let ctx = format!("pair {name}");
        if pair.keypoints.is_empty() {
            return Err(CliError::new("empty_batch", "pair has no valid keypoints", ctx));
        }
        let kps: Vec<(f64, f64)> = pair.keypoints.iter().map(|k| (k.keypoint.x, k.keypoint.y)).collect();
        let maps = infer(&params, &pair.source.image, &pair.target.image, &kps, ckpt_gamma).ctx(&ctx)?;
        let path = common.out.join(format!("{name}.maps"));
        let mut w = create_file(&path)?;
        write_maps(&mut w, &maps).ctx(&ctx)?;
        w.flush().ctx(&ctx)?;
        for (k, m) in maps.iter().take(previews).enumerate() {
            let mut w = create_file(&common.out.join(format!("{name}_kp{k}.pgm")))?;
            write_map_pgm(&mut w, m).ctx(&ctx)?;
            w.flush().ctx(&ctx)?;
        }
    }
    Ok(())
}

fn read_pair_maps(dir: &Path, name: &str) -> CliResult<Vec<CorrespondenceMap<f64>>> {
    let path = dir.join(format!("{name}.maps"));
    let ctx = format!("reading {}", path.display());
    let file = File::open(&path).ctx(&ctx)?;
    read_maps(&mut BufReader::new(file)).ctx(ctx)
}

fn run_pose(common: &Common, maps_dir: &Path, data: &Path, only: Option<&str>) -> CliResult<()> {
    let mut config: PoseConfig = load_config(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        config.msac.seed = seed;
    }
    let (_, pairs) = load_pairs(data, only)?;
    create_out(&common.out)?;
    for (name, pair) in &pairs {
        let ctx = format!("pair {name}");
        let maps = read_pair_maps(maps_dir, name)?;
        let kps: Vec<_> = pair.keypoints.iter().map(|k| k.keypoint).collect();
        let problem = PoseProblem::new(&maps, &kps, &pair.source.camera, &pair.target.camera).ctx(&ctx)?;
        let est = estimate(&problem, &config).ctx(&ctx)?;
        write_json(&common.out.join(format!("{name}.pose.json")), &est.record())?;
    }
    Ok(())
}

fn read_pose(dir: &Path, name: &str) -> CliResult<PoseEstimate> {
    let path = dir.join(format!("{name}.pose.json"));
    let ctx = format!("reading {}", path.display());
    let file = File::open(&path).ctx(&ctx)?;
    let record: PoseEstimateRecord = serde_json::from_reader(BufReader::new(file))
        .map_err(corrhal::Error::from)
        .ctx(&ctx)?;
    Ok(PoseEstimate {
        pose: record.pose.to_pose().ctx(&ctx)?,
        inlier_count: record.inlier_count,
        cost: record.cost.unwrap_or(f64::INFINITY),
        status: record.status,
        hypotheses: record.work.hypotheses,
        iterations: record.work.gnc_iterations,
    })
}

fn report(common: &Common, data: &Path, maps_dir: &Path, poses: Option<&Path>) -> CliResult<()> {
    let config: ReportConfig = load_config(common.config.as_deref())?;
    let (pair_config, pairs) = load_pairs(data, None)?;
    let (mut evals, mut dropped, mut outcomes) = (Vec::new(), 0, Vec::new());
    let mut frame = None;
    for (name, pair) in &pairs {
        let maps = read_pair_maps(maps_dir, name)?;
        if maps.len() != pair.keypoints.len() {
            return Err(CliError::new(
                "shape_mismatch",
                format!("{} maps for {} keypoints", maps.len(), pair.keypoints.len()),
                format!("pair {name}"),
            ));
        }
        if let Some(m) = maps.first() {
            if frame.is_some_and(|f| f != *m.frame()) {
                return Err(CliError::new("shape_mismatch", "maps use different frames", format!("pair {name}")));
            }
            frame = Some(*m.frame());
        }
        let (e, d) = evaluate_maps(&maps, &pair.keypoints);
        evals.extend(e);
        dropped += d;
        if let Some(dir) = poses {
            let est = read_pose(dir, name)?;
            outcomes.push(PoseOutcome::new(pair.overlap, &est, &pair.pose_ts()));
        }
    }
    let Some(frame) = frame else {
        return Err(CliError::new("empty_dataset", "no maps to evaluate", data.display().to_string()));
    };
    let seed = common.seed.unwrap_or(0);
    let report = build_report(&evals, dropped, &frame, &outcomes, pair_config.scene.scale(), &config, seed);
    create_out(&common.out)?;
    let tables: [(&str, fn(&corrhal::eval::EvalReport, BufWriter<File>) -> corrhal::Result<()>); 4] = [
        ("nre.csv", |r, w| r.write_nre_csv(w)),
        ("argmax.csv", |r, w| r.write_argmax_csv(w)),
        ("summary.csv", |r, w| r.write_summary_csv(w)),
        ("pose.csv", |r, w| r.write_pose_csv(w)),
    ];
    for (file, write) in tables {
        let path = common.out.join(file);
        write(&report, create_file(&path)?).ctx(format!("writing {}", path.display()))?;
    }
    Ok(())
}
