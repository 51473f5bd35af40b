mod plot;
mod settings;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use p2preg::config::{Method, Profile, RunConfig};
use p2preg::data::{ply, read_manifest, write_manifest, DatasetManifest, PairRecord, RegistrationPair, Split};
use p2preg::geometry::{PointCloud, RigidTransform};
use p2preg::icp::icp;
use p2preg::metrics::{aggregate, MetricsReport, SampleErrors};
use p2preg::model::{contribution_map, Branch, RegistrationNet};
use p2preg::train::{load_model, sensitivity_distances, SensitivityDistances, Trainer};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "p2preg", version, about = "Partial-to-partial point cloud registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Paper,
    Desk,
    Test,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Paper => Profile::Paper,
            ProfileArg::Desk => Profile::Desk,
            ProfileArg::Test => Profile::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Learned,
    Icp,
}

#[derive(Args)]
struct Common {
    /// Preset the configuration file is layered on.
    #[arg(long, value_enum, default_value = "desk")]
    profile: ProfileArg,
    /// TOML file overriding parts of the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for weights, data and training randomness.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        settings::resolve(self.profile.into(), self.config.as_deref(), self.seed)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a dataset manifest and the PLY files of its pairs.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train a network and write checkpoints and loss logs.
    Train {
        #[command(flatten)]
        common: Common,
        /// Manifest to train on; without it the configured data is used.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Continue from a checkpoint written with the same settings.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a method on a dataset split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Dataset manifest written by `generate`.
        #[arg(long)]
        dataset: PathBuf,
        /// Trained weights; required for the learned method.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Registration method; defaults to the configured one.
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        /// Split to read pairs from; defaults to the configured one.
        #[arg(long)]
        split: Option<Split>,
    },
    /// Register one PLY file onto another.
    Register {
        #[command(flatten)]
        common: Common,
        /// Trained weights; required for the learned method.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Registration method; defaults to the configured one.
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        /// PLY cloud to move.
        #[arg(long)]
        source: PathBuf,
        /// PLY cloud to align onto.
        #[arg(long)]
        reference: PathBuf,
    },
    /// Dump contribution maps and sensitivity distances for one pair.
    Inspect {
        #[command(flatten)]
        common: Common,
        /// Trained weights.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset manifest written by `generate`.
        #[arg(long)]
        dataset: PathBuf,
        /// Split to read pairs from; defaults to the configured one.
        #[arg(long)]
        split: Option<Split>,
        /// Index of the pair within the split.
        #[arg(long, default_value_t = 0)]
        pair: usize,
        /// Also render saliency overlays.
        #[arg(long)]
        plot: bool,
    },
    /// Render figures from report.json and inspect.json files.
    Plot {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// report.json and inspect.json files to draw.
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { common } => generate(&common),
        Command::Train {
            common,
            dataset,
            resume,
        } => train(&common, dataset.as_deref(), resume.as_deref()),
        Command::Eval {
            common,
            dataset,
            checkpoint,
            method,
            split,
        } => eval(&common, &dataset, checkpoint.as_deref(), method, split),
        Command::Register {
            common,
            checkpoint,
            method,
            source,
            reference,
        } => register(&common, checkpoint.as_deref(), method, &source, &reference),
        Command::Inspect {
            common,
            checkpoint,
            dataset,
            split,
            pair,
            plot,
        } => inspect(&common, &checkpoint, &dataset, split, pair, plot),
        Command::Plot { out, files } => plot_files(&out, &files),
    }
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn pair_name(r: &PairRecord) -> String {
    format!("{}_{:04}", r.split, r.index)
}

#[derive(Serialize, Deserialize)]
struct GroundTruth {
    split: Split,
    index: usize,
    gt: RigidTransform<f32>,
}

fn generate(common: &Common) -> Result<()> {
    let config = common.resolve()?;
    settings::echo(&config, &common.out)?;
    let manifest = DatasetManifest::plan::<f32>(&config.data, config.train.seed, &Split::ALL)?;
    write_manifest(&common.out.join("manifest.json"), &manifest)?;
    let pairs = manifest.generate::<f32>(None)?;
    let dir = common.out.join("pairs");
    fs::create_dir_all(&dir)?;
    let mut truth = Vec::with_capacity(pairs.len());
    for (r, p) in &pairs {
        let name = pair_name(r);
        ply::write_ply(&dir.join(format!("{name}_source.ply")), &p.source)?;
        ply::write_ply(&dir.join(format!("{name}_reference.ply")), &p.reference)?;
        truth.push(GroundTruth {
            split: r.split,
            index: r.index,
            gt: p.gt,
        });
    }
    write_json(&common.out.join("ground_truth.json"), &truth)?;
    info!("wrote {} pairs to {}", pairs.len(), common.out.display());
    Ok(())
}

fn load_pairs(manifest: &DatasetManifest, split: Split) -> Result<Vec<(PairRecord, RegistrationPair<f32>)>> {
    let pairs = manifest.generate::<f32>(Some(split))?;
    if pairs.is_empty() {
        bail!("dataset has no {split} pairs");
    }
    Ok(pairs)
}

fn train(common: &Common, dataset: Option<&Path>, resume: Option<&Path>) -> Result<()> {
    let mut config = common.resolve()?;
    let manifest = match dataset {
        Some(path) => {
            let m = read_manifest(path).with_context(|| format!("reading {}", path.display()))?;
            config.data = m.config.clone();
            m
        }
        None => DatasetManifest::plan::<f32>(&config.data, config.train.seed, &[Split::Train])?,
    };
    settings::echo(&config, &common.out)?;
    let pairs: Vec<RegistrationPair<f32>> = load_pairs(&manifest, Split::Train)?.into_iter().map(|(_, p)| p).collect();
    let mut trainer = match resume {
        Some(path) => Trainer::<f32>::resume(path, config.model.clone(), config.loss.clone(), config.train.clone())?,
        None => Trainer::<f32>::new(config.model.clone(), config.loss.clone(), config.train.clone())?,
    };
    let out = common.out.clone();
    let mut log = String::new();
    let mut losses = String::from("step\ttotal\tparam\tsensitivity\tdropout\n");
    let every = config.train.checkpoint_every;
    let log_every = config.train.log_every;
    let last = config.train.steps;
    trainer.run(&pairs, |t, r| {
        let l = &r.losses;
        let _ = writeln!(losses, "{}\t{:e}\t{:e}\t{:e}\t{:e}", r.step, l.total, l.param, l.sensitivity, l.dropout);
        if r.step % log_every == 0 || t.step() == last {
            let _ = writeln!(log, "{r}");
        }
        if every > 0 && t.step() % every == 0 && t.step() < last {
            t.save_checkpoint(&out.join(format!("checkpoint-{:07}.bin", t.step())))?;
        }
        Ok(())
    })?;
    trainer.save_checkpoint(&common.out.join("checkpoint.bin"))?;
    fs::write(common.out.join("train.log"), log)?;
    fs::write(common.out.join("losses.tsv"), losses)?;
    info!("finished at step {}", trainer.step());
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct Condition {
    split: Split,
    index: usize,
    gt_angle_deg: f64,
    gt_translation: f64,
}

#[derive(Serialize, Deserialize)]
struct EvalOutput {
    method: Method,
    checkpoint: Option<String>,
    split: Split,
    metrics: MetricsReport,
    conditions: Vec<Condition>,
}

enum Estimator {
    Learned(RegistrationNet<f32>),
    Icp(p2preg::icp::IcpConfig),
}

impl Estimator {
    fn new(config: &RunConfig, checkpoint: Option<&Path>, method: Option<MethodArg>) -> Result<(Self, Method)> {
        let method = match method {
            Some(MethodArg::Learned) => Method::Learned,
            Some(MethodArg::Icp) => Method::Icp,
            None => config.eval.method,
        };
        let est = match method {
            Method::Learned => {
                let path = checkpoint.ok_or_else(|| anyhow!("--checkpoint is required for the learned method"))?;
                Estimator::Learned(load_model(path).with_context(|| format!("loading {}", path.display()))?)
            }
            Method::Icp => Estimator::Icp(config.eval.icp.clone()),
        };
        Ok((est, method))
    }

    /// Final estimate and the per-iteration steps that produced it.
    fn estimate(&self, source: &PointCloud<f32>, reference: &PointCloud<f32>) -> Result<(RigidTransform<f32>, Vec<RigidTransform<f32>>)> {
        match self {
            Estimator::Learned(net) => {
                let r = net.register(source, reference)?;
                Ok((r.final_transform, r.per_iteration))
            }
            Estimator::Icp(cfg) => {
                let r = icp(&source.cast::<f64>(), &reference.cast::<f64>(), &RigidTransform::identity(), cfg)?;
                let t = r.transform.cast();
                Ok((t, vec![t]))
            }
        }
    }
}

fn eval(
    common: &Common,
    dataset: &Path,
    checkpoint: Option<&Path>,
    method: Option<MethodArg>,
    split: Option<Split>,
) -> Result<()> {
    let mut config = common.resolve()?;
    let manifest = read_manifest(dataset).with_context(|| format!("reading {}", dataset.display()))?;
    config.data = manifest.config.clone();
    let split = split.unwrap_or(config.eval.split);
    let (est, method) = Estimator::new(&config, checkpoint, method)?;
    config.eval.method = method;
    config.eval.split = split;
    settings::echo(&config, &common.out)?;
    let pairs = load_pairs(&manifest, split)?;
    let samples = pairs
        .par_iter()
        .map(|(_, p)| {
            let (t, _) = est.estimate(&p.source, &p.reference)?;
            Ok(SampleErrors::evaluate(&t.cast::<f64>(), &p.gt.cast::<f64>()))
        })
        .collect::<Result<Vec<_>>>()?;
    let metrics = aggregate(&samples)?;
    let conditions = pairs
        .iter()
        .map(|(r, p)| {
            let gt = p.gt.cast::<f64>();
            Condition {
                split: r.split,
                index: r.index,
                gt_angle_deg: gt.rotation.angle().to_degrees(),
                gt_translation: gt.translation.iter().map(|v| v * v).sum::<f64>().sqrt(),
            }
        })
        .collect();
    let label = match method {
        Method::Learned => "learned",
        Method::Icp => "icp",
    };
    let table = metrics.table(label);
    let mut text = table.clone();
    text.push_str("\nsplit\tindex\terr_yaw\terr_pitch\terr_roll\terr_x\terr_y\terr_z\terror_r\terror_t\tdegenerate\n");
    for ((r, _), s) in pairs.iter().zip(&metrics.samples) {
        let _ = writeln!(
            text,
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}",
            r.split,
            r.index,
            s.rotation_deg[0],
            s.rotation_deg[1],
            s.rotation_deg[2],
            s.translation[0],
            s.translation[1],
            s.translation[2],
            s.error_r_deg,
            s.error_t,
            s.degenerate
        );
    }
    fs::write(common.out.join("report.txt"), text)?;
    write_json(
        &common.out.join("report.json"),
        &EvalOutput {
            method,
            checkpoint: checkpoint.map(|p| p.display().to_string()),
            split,
            metrics,
            conditions,
        },
    )?;
    print!("{table}");
    Ok(())
}

#[derive(Serialize)]
struct RegistrationOutput {
    method: Method,
    quaternion_wxyz: [f32; 4],
    translation: [f32; 3],
    per_iteration: Vec<RigidTransform<f32>>,
}

fn register(
    common: &Common,
    checkpoint: Option<&Path>,
    method: Option<MethodArg>,
    source: &Path,
    reference: &Path,
) -> Result<()> {
    let mut config = common.resolve()?;
    let (est, method) = Estimator::new(&config, checkpoint, method)?;
    config.eval.method = method;
    settings::echo(&config, &common.out)?;
    let x: PointCloud<f32> = ply::read_ply(source)?;
    let y: PointCloud<f32> = ply::read_ply(reference)?;
    let (t, steps) = est.estimate(&x, &y)?;
    let q = t.rotation.to_array();
    println!("quaternion (w, x, y, z): {:.6} {:.6} {:.6} {:.6}", q[0], q[1], q[2], q[3]);
    println!("translation: {:.6} {:.6} {:.6}", t.translation[0], t.translation[1], t.translation[2]);
    for (i, s) in steps.iter().enumerate() {
        let q = s.rotation.to_array();
        println!(
            "iteration {}: q = [{:.6}, {:.6}, {:.6}, {:.6}] t = [{:.6}, {:.6}, {:.6}]",
            i + 1,
            q[0],
            q[1],
            q[2],
            q[3],
            s.translation[0],
            s.translation[1],
            s.translation[2]
        );
    }
    ply::write_ply(&common.out.join("aligned.ply"), &t.apply(&x))?;
    write_json(
        &common.out.join("registration.json"),
        &RegistrationOutput {
            method,
            quaternion_wxyz: q,
            translation: t.translation,
            per_iteration: steps,
        },
    )?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ContributionMaps {
    rotation_source: Vec<usize>,
    rotation_reference: Vec<usize>,
    translation_source: Vec<usize>,
    translation_reference: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct InspectIteration {
    iteration: usize,
    source_points: Vec<[f32; 3]>,
    reference_points: Vec<[f32; 3]>,
    step: RigidTransform<f32>,
    saliency_source: [f32; 3],
    saliency_reference: [f32; 3],
    contributions: ContributionMaps,
    /// Rotation branch: translated copy versus rotated copy.
    rotation_ratio: f64,
    /// Translation branch: rotated copy versus translated copy.
    translation_ratio: f64,
    distances: SensitivityDistances,
}

#[derive(Serialize, Deserialize)]
struct InspectOutput {
    split: Split,
    pair: usize,
    iterations: Vec<InspectIteration>,
}

fn inspect(common: &Common, checkpoint: &Path, dataset: &Path, split: Option<Split>, pair: usize, plot: bool) -> Result<()> {
    let mut config = common.resolve()?;
    let manifest = read_manifest(dataset).with_context(|| format!("reading {}", dataset.display()))?;
    config.data = manifest.config.clone();
    let split = split.unwrap_or(config.eval.split);
    settings::echo(&config, &common.out)?;
    let net: RegistrationNet<f32> = load_model(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let pairs = load_pairs(&manifest, split)?;
    let (_, p) = pairs
        .iter()
        .find(|(r, _)| r.index == pair)
        .ok_or_else(|| anyhow!("no {split} pair with index {pair}"))?;
    let result = net.register(&p.source, &p.reference)?;
    let distances = sensitivity_distances(&net, &p.source, &p.reference)?;
    let mut acc = RigidTransform::identity();
    let mut iterations = Vec::new();
    for (i, step) in result.per_iteration.iter().enumerate() {
        let moved = acc.apply(&p.source);
        let (fx, fy) = net.features(&moved, &p.reference);
        let d = distances[i];
        iterations.push(InspectIteration {
            iteration: i + 1,
            source_points: moved.points().to_vec(),
            reference_points: p.reference.points().to_vec(),
            step: *step,
            saliency_source: result.saliency_source[i],
            saliency_reference: result.saliency_reference[i],
            contributions: ContributionMaps {
                rotation_source: contribution_map(&moved, fx.branch(Branch::Rotation))?,
                rotation_reference: contribution_map(&p.reference, fy.branch(Branch::Rotation))?,
                translation_source: contribution_map(&moved, fx.branch(Branch::Translation))?,
                translation_reference: contribution_map(&p.reference, fy.branch(Branch::Translation))?,
            },
            rotation_ratio: d.rotation_to_translated / d.rotation_to_rotated.max(f64::MIN_POSITIVE),
            translation_ratio: d.translation_to_rotated / d.translation_to_translated.max(f64::MIN_POSITIVE),
            distances: d,
        });
        acc = step.compose(&acc);
    }
    let output = InspectOutput {
        split,
        pair,
        iterations,
    };
    write_json(&common.out.join("inspect.json"), &output)?;
    for it in &output.iterations {
        println!(
            "iteration {}: rotation-branch ratio {:.4}, translation-branch ratio {:.4}",
            it.iteration, it.rotation_ratio, it.translation_ratio
        );
    }
    if plot {
        render_inspect(&output, &common.out)?;
    }
    Ok(())
}

fn to64(points: &[[f32; 3]]) -> Vec<[f64; 3]> {
    points.iter().map(|p| p.map(f64::from)).collect()
}

fn render_inspect(output: &InspectOutput, out: &Path) -> Result<()> {
    for it in &output.iterations {
        let views = [
            ("rotation_source", &it.source_points, &it.contributions.rotation_source, it.saliency_source),
            ("translation_source", &it.source_points, &it.contributions.translation_source, it.saliency_source),
            ("rotation_reference", &it.reference_points, &it.contributions.rotation_reference, it.saliency_reference),
            (
                "translation_reference",
                &it.reference_points,
                &it.contributions.translation_reference,
                it.saliency_reference,
            ),
        ];
        for (name, points, counts, saliency) in views {
            plot::saliency_overlay(
                &out.join(format!("saliency_iter{}_{name}.svg", it.iteration)),
                &format!("{name}, iteration {}", it.iteration),
                &to64(points),
                counts,
                saliency.map(f64::from),
            )?;
        }
    }
    Ok(())
}

fn plot_files(out: &Path, files: &[PathBuf]) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut rot = Vec::new();
    let mut trans = Vec::new();
    for f in files {
        let text = fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
        let value: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", f.display()))?;
        let stem = f
            .parent()
            .and_then(|p| p.file_name())
            .or_else(|| f.file_stem())
            .and_then(|s| s.to_str())
            .unwrap_or("report")
            .to_string();
        if value.get("metrics").is_some() {
            let report: EvalOutput = serde_json::from_value(value).with_context(|| format!("reading report {}", f.display()))?;
            let label = format!("{stem} ({})", if report.method == Method::Icp { "icp" } else { "learned" });
            rot.push(plot::Curve {
                label: label.clone(),
                samples: report
                    .conditions
                    .iter()
                    .zip(&report.metrics.samples)
                    .map(|(c, s)| (c.gt_angle_deg, s.error_r_deg))
                    .collect(),
            });
            trans.push(plot::Curve {
                label,
                samples: report
                    .conditions
                    .iter()
                    .zip(&report.metrics.samples)
                    .map(|(c, s)| (c.gt_translation, s.error_t))
                    .collect(),
            });
        } else if value.get("iterations").is_some() {
            let inspect: InspectOutput =
                serde_json::from_value(value).with_context(|| format!("reading inspection {}", f.display()))?;
            let dir = out.join(&stem);
            fs::create_dir_all(&dir)?;
            render_inspect(&inspect, &dir)?;
        } else {
            bail!("{} is neither an evaluation report nor an inspection dump", f.display());
        }
    }
    if !rot.is_empty() {
        plot::error_curves(
            &out.join("error_r_vs_angle.svg"),
            "Rotation error by initial misalignment",
            "ground-truth rotation angle (deg)",
            "mean Error(R) (deg)",
            &rot,
            9,
        )?;
        plot::error_curves(
            &out.join("error_t_vs_translation.svg"),
            "Translation error by initial offset",
            "ground-truth translation norm",
            "mean Error(t)",
            &trans,
            9,
        )?;
    }
    info!("figures written to {}", out.display());
    Ok(())
}
