use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use vitdistill::data::{self, Dataset, Generator, SyntheticDatasetSpec};
use vitdistill::error::{Error, Result};
use vitdistill::pipeline::{
    self, canonical_hash, read_json, ClassifierTrainConfig, DistillPlan, EvalConfig, EvalMode, GridData, GridSpec,
    StageChain,
};
use vitdistill::relations::{relation_matrix, write_csv, RelationPair};
use vitdistill::report;
use vitdistill::vit::{ForwardOptions, ViTConfig, ViTModel};
use vitdistill::Graph;

#[derive(Parser)]
#[command(name = "vitdistill", version, about = "Distill ViTs through attention relations, features or class tokens")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum GeneratorArg {
    Shapes,
    GaussianTextures,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    LinearProbe,
    FineTune,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset.
    GenData {
        /// JSON dataset spec; overrides the individual flags.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        num_samples: usize,
        #[arg(long, default_value_t = 16)]
        image_size: usize,
        #[arg(long, default_value_t = 4)]
        num_classes: usize,
        #[arg(long, value_enum, default_value = "shapes")]
        generator: GeneratorArg,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train a ViT classifier with labels (e.g. a toy teacher).
    TrainTeacher {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Optional JSON training schedule.
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Checkpoint manifest to write (`x.json`, blob beside it).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Run one distillation stage from a plan file.
    Distill {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "runs")]
        runs_dir: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Run a sequential chain of distillation stages.
    Chain {
        #[arg(long)]
        chain: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "runs")]
        runs_dir: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Run an ablation grid.
    Grid {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Labeled sets for per-cell evaluation (both required together).
        #[arg(long, requires = "test_data")]
        train_data: Option<PathBuf>,
        #[arg(long, requires = "train_data")]
        test_data: Option<PathBuf>,
        #[arg(long, default_value = "runs")]
        runs_dir: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint by linear probe or fine-tuning.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        train_data: PathBuf,
        #[arg(long)]
        test_data: PathBuf,
        #[arg(long, value_enum, default_value = "fine-tune")]
        mode: ModeArg,
        /// Optional JSON training schedule for the evaluation head/backbone.
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump one relation matrix of one head to CSV.
    InspectRelations {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// 1-based block; defaults to the last.
        #[arg(long)]
        block: Option<usize>,
        /// QQ, KK, VV or QK.
        #[arg(long, default_value = "QK")]
        pair: String,
        #[arg(long, default_value_t = 0)]
        head: usize,
        #[arg(long)]
        no_softmax: bool,
        #[arg(long)]
        exclude_cls: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge run, chain or grid directories into aligned text tables.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Makes a fresh output directory, refusing to touch an existing one unless
/// `force` is set.
fn fresh_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        if !force {
            return Err(Error::Contract(format!(
                "{} already exists; pass --force to replace it",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn relative_to(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

/// Resolves the plan's checkpoint paths against the directory of the file
/// that referenced them.
fn resolve_plan(plan: &mut DistillPlan, file: &Path) {
    let base = file.parent().unwrap_or(Path::new(""));
    relative_to(base, &mut plan.teacher_checkpoint);
    relative_to(base, &mut plan.student_init_checkpoint);
}

fn write_data_ref(dir: &Path, data: &Path) -> Result<()> {
    let index = fs::read(data.join(data::INDEX_FILE)).map_err(|e| Error::io(data, e))?;
    let v = json!({
        "path": data,
        "index_sha256": vitdistill::checkpoint::sha256_hex(&index),
    });
    let p = dir.join("data.json");
    fs::write(&p, serde_json::to_string_pretty(&v).unwrap()).map_err(|e| Error::io(&p, e))
}

fn load_data(dir: &Path) -> Result<Dataset> {
    Ok(Dataset::load(dir)?.0)
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).unwrap());
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            spec,
            num_samples,
            image_size,
            num_classes,
            generator,
            channels,
            seed,
            out,
            force,
        } => {
            let spec = match spec {
                Some(p) => read_json::<SyntheticDatasetSpec>(&p)?,
                None => SyntheticDatasetSpec {
                    num_samples,
                    image_size,
                    num_classes,
                    generator: match generator {
                        GeneratorArg::Shapes => Generator::Shapes,
                        GeneratorArg::GaussianTextures => Generator::GaussianTextures,
                    },
                    seed,
                    channels,
                },
            };
            spec.validate()?;
            fresh_dir(&out, force)?;
            let (ds, stats) = data::generate(&spec)?;
            ds.save(&out, Some(&spec), stats)?;
            print_json(&json!({"out": out, "num_samples": ds.len(), "class_counts": ds.class_counts()}));
        }
        Command::TrainTeacher {
            config,
            data,
            train,
            seed,
            out,
            force,
        } => {
            let cfg: ViTConfig = read_json(&config)?;
            cfg.validate("$")?;
            let mut tc = match train {
                Some(p) => read_json::<ClassifierTrainConfig>(&p)?,
                None => ClassifierTrainConfig {
                    layer_decay: 1.0,
                    ..Default::default()
                },
            };
            tc.seed = seed;
            if out.exists() && !force {
                return Err(Error::Contract(format!("{} already exists; pass --force to replace it", out.display())));
            }
            let ds = load_data(&data)?;
            let mut model = ViTModel::new(cfg, seed)?;
            let log = pipeline::train_classifier(&mut model, &ds, &tc)?;
            let hash = model.save(&out)?;
            let acc = pipeline::accuracy(&model, &ds)?;
            print_json(&json!({
                "checkpoint": out,
                "hash": hash,
                "steps": log.rows.len(),
                "final_loss": log.last_loss(),
                "train_accuracy": acc,
            }));
        }
        Command::Distill {
            plan: plan_path,
            data,
            runs_dir,
            force,
        } => {
            let mut plan: DistillPlan = read_json(&plan_path)?;
            plan.validate("$")?;
            let dir = runs_dir.join(format!("distill-{}", plan.config_hash()));
            resolve_plan(&mut plan, &plan_path);
            let teacher = plan
                .teacher_checkpoint
                .clone()
                .ok_or_else(|| Error::config("$.teacher_checkpoint", "distill needs a teacher checkpoint"))?;
            let ds = load_data(&data)?;
            fresh_dir(&dir, force)?;
            write_data_ref(&dir, &data)?;
            let summary = pipeline::run_stage(&plan, &teacher, &ds, &dir)?;
            print_json(&json!({"run_dir": dir, "summary": summary}));
        }
        Command::Chain {
            chain: chain_path,
            data,
            runs_dir,
            force,
        } => {
            let mut chain: StageChain = read_json(&chain_path)?;
            let dir = runs_dir.join(format!("chain-{}", chain.config_hash()));
            for s in &mut chain.stages {
                resolve_plan(s, &chain_path);
            }
            chain.validate()?;
            let ds = load_data(&data)?;
            fresh_dir(&dir, force)?;
            write_data_ref(&dir, &data)?;
            let p = dir.join("chain.json");
            fs::write(&p, serde_json::to_string_pretty(&chain).unwrap()).map_err(|e| Error::io(&p, e))?;
            let summaries = pipeline::run_sequential(&chain, &ds, &dir)?;
            print_json(&json!({"run_dir": dir, "stages": summaries}));
        }
        Command::Grid {
            grid,
            data,
            train_data,
            test_data,
            runs_dir,
            force,
        } => {
            let mut spec: GridSpec = read_json(&grid)?;
            spec.validate()?;
            let dir = runs_dir.join(format!("grid-{}", canonical_hash(&spec)));
            resolve_plan(&mut spec.base_plan, &grid);
            let ds = load_data(&data)?;
            let labeled = match (train_data, test_data) {
                (Some(a), Some(b)) => Some((load_data(&a)?, load_data(&b)?)),
                _ => None,
            };
            fresh_dir(&dir, force)?;
            write_data_ref(&dir, &data)?;
            let gd = GridData {
                distill: &ds,
                eval: labeled.as_ref().map(|(a, b)| (a, b)),
            };
            let report = pipeline::run_grid(&spec, &gd, &dir)?;
            println!("{}", dir.display());
            print!("{}", report.table().render());
            let failed = report.failed();
            if failed > 0 {
                return Err(Error::PartialGrid {
                    failed,
                    total: report.rows.len(),
                });
            }
        }
        Command::Eval {
            checkpoint,
            train_data,
            test_data,
            mode,
            train,
            out,
        } => {
            let model = ViTModel::load(&checkpoint)?;
            let cfg = EvalConfig {
                mode: match mode {
                    ModeArg::LinearProbe => EvalMode::LinearProbe,
                    ModeArg::FineTune => EvalMode::FineTune,
                },
                train: match train {
                    Some(p) => read_json(&p)?,
                    None => ClassifierTrainConfig::default(),
                },
            };
            let report = pipeline::evaluate(&model, &load_data(&train_data)?, &load_data(&test_data)?, &cfg)?;
            if let Some(p) = out {
                if p.exists() {
                    return Err(Error::Contract(format!("{} already exists", p.display())));
                }
                fs::write(&p, serde_json::to_string_pretty(&report).unwrap()).map_err(|e| Error::io(&p, e))?;
            }
            print_json(&json!(report));
        }
        Command::InspectRelations {
            checkpoint,
            data,
            index,
            block,
            pair,
            head,
            no_softmax,
            exclude_cls,
            out,
        } => {
            let pair = RelationPair::parse(&pair)
                .ok_or_else(|| Error::config("--pair", format!("{pair:?} is not one of QQ, KK, VV, QK")))?;
            let model = ViTModel::load(&checkpoint)?;
            let ds = load_data(&data)?;
            if index >= ds.len() {
                return Err(Error::config("--index", format!("dataset has {} samples", ds.len())));
            }
            let block = block.unwrap_or(model.config.depth);
            let mut g = Graph::new();
            let p = model.params.bind(&mut g, false);
            let opts = ForwardOptions {
                stop_after_block: Some(block),
                with_head: false,
                ..ForwardOptions::eval()
            };
            let fwd = model.forward_with_taps(&mut g, &p, &ds.batch(&[index]), &opts)?;
            let taps = fwd.taps.block(block)?;
            if head >= taps.heads {
                return Err(Error::config("--head", format!("block {block} has {} heads", taps.heads)));
            }
            let take = |v| g.value(v).index0(0);
            let rel = relation_matrix(&take(taps.q), &take(taps.k), &take(taps.v), pair, !no_softmax, exclude_cls)?;
            let matrix = rel.index0(head);
            if out.exists() {
                return Err(Error::Contract(format!("{} already exists", out.display())));
            }
            write_csv(&out, &matrix)?;
            print_json(&json!({"out": out, "tokens": matrix.shape()[0], "block": block, "pair": pair.to_string()}));
        }
        Command::Report { dirs, out } => {
            let refs: Vec<&Path> = dirs.iter().map(PathBuf::as_path).collect();
            let text = report::report(&refs)?;
            if let Some(p) = out {
                if p.exists() {
                    return Err(Error::Contract(format!("{} already exists", p.display())));
                }
                fs::write(&p, &text).map_err(|e| Error::io(&p, e))?;
            }
            print!("{text}");
        }
    }
    Ok(())
}
