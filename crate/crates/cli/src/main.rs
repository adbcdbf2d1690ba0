use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use expnet_core::datagen::generate_dataset;
use expnet_core::eval::{attribute_histogram, evaluate, evaluate_bucketed, robustness_sweep, Attribute};
use expnet_core::gradcheck::gradient_check;
use expnet_core::io::{
    read_checkpoint, read_dataset, write_checkpoint, write_confusion_csv, write_dataset, write_hist_csv,
    write_history_csv, write_report_csv, write_sweep_csv,
};
use expnet_core::optim::softmax;
use expnet_core::train::{arch_for, EpochRecord, Trainer};
use expnet_core::{AdamConfig, ArchConfig, Error, GenConfig, MultiOutputModel, Result, Rng, Tensor, TrainConfig};

#[derive(Parser)]
#[command(name = "expnet", version, about = "Read base^exponent images with a two-head CNN")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepAttr {
    Noise,
    Blur,
}

#[derive(Clone, Copy, ValueEnum)]
enum HistAttr {
    Base,
    Exponent,
    Noise,
    Blur,
    Font,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset file
    Generate {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Square image side in pixels
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        #[arg(long, default_value_t = 0.3)]
        noise_max: f64,
        #[arg(long, default_value_t = 2.0)]
        blur_max: f64,
        #[arg(long, default_value_t = 2.0)]
        font_min: f64,
        #[arg(long, default_value_t = 3.5)]
        font_max: f64,
        /// Index of the first sample; sets drawn from disjoint index ranges never overlap
        #[arg(long, default_value_t = 0)]
        start_index: u64,
    },
    /// Train the default architecture on a dataset file
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f32,
        #[arg(long, default_value_t = 5)]
        patience: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        history: Option<PathBuf>,
        /// Continue from a checkpoint that carries optimiser state
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset file
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        confusion: Option<PathBuf>,
        /// Add per-bucket accuracy rows for this attribute
        #[arg(long, value_enum)]
        by: Option<HistAttr>,
        #[arg(long, default_value_t = 10)]
        bins: usize,
    },
    /// Accuracy under one corruption pinned to several levels
    Sweep {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum)]
        attr: SweepAttr,
        #[arg(long, value_delimiter = ',', required = true)]
        levels: Vec<f64>,
        #[arg(long, default_value_t = 200)]
        count_per_level: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        start_index: u64,
    },
    /// Histogram of a label or metadata attribute
    Hist {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        attr: HistAttr,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict one sample and show both heads' probabilities
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        index: usize,
    },
    /// Finite-difference check of every gradient on a tiny model
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl From<HistAttr> for Attribute {
    fn from(a: HistAttr) -> Self {
        match a {
            HistAttr::Base => Attribute::Base,
            HistAttr::Exponent => Attribute::Exponent,
            HistAttr::Noise => Attribute::Noise,
            HistAttr::Blur => Attribute::Blur,
            HistAttr::Font => Attribute::FontScale,
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn print_epoch(r: &EpochRecord) {
    eprintln!(
        "epoch {:>3}  train {:.4} (base {:.4}, exp {:.4})  val {:.4}  val acc base {:.3} exp {:.3}",
        r.epoch, r.train_total, r.train_base, r.train_exp, r.val_total, r.val_base_acc, r.val_exp_acc
    );
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Generate {
            count,
            seed,
            out,
            image_size,
            noise_max,
            blur_max,
            font_min,
            font_max,
            start_index,
        } => {
            let cfg = GenConfig {
                count,
                start_index,
                image_size: (image_size, image_size),
                font_scale_range: (font_min, font_max),
                noise_sigma_range: (0.0, noise_max),
                blur_sigma_range: (0.0, blur_max),
                master_seed: seed,
                ..GenConfig::default()
            };
            let data = generate_dataset(&cfg)?;
            write_dataset(&data, &out)?;
            println!("wrote {} samples to {}", data.len(), out.display());
        }
        Command::Train {
            data,
            out,
            epochs,
            batch,
            lr,
            patience,
            seed,
            history,
            resume,
        } => {
            let dataset = read_dataset(&data)?;
            let config = TrainConfig {
                epochs,
                batch_size: batch,
                adam: AdamConfig { lr, ..AdamConfig::default() },
                patience,
                seed,
                ..TrainConfig::default()
            };
            let mut trainer = match &resume {
                Some(path) => {
                    let ckpt = read_checkpoint(path)?;
                    let state = ckpt.resume.ok_or_else(|| {
                        Error::InvalidArgument(format!("{} carries no optimiser state", path.display()))
                    })?;
                    Trainer::resume(ckpt.model, state, &dataset, config)?
                }
                None => Trainer::new(MultiOutputModel::new(&arch_for(&dataset), seed)?, &dataset, config)?,
            };
            eprintln!(
                "training on {} samples, validating on {}",
                trainer.train_indices().len(),
                trainer.validation_indices().len()
            );
            while !trainer.finished() {
                print_epoch(&trainer.run_epoch()?);
            }
            let (best_epoch, model) = trainer.best().ok_or_else(|| {
                Error::InvalidArgument(format!("checkpoint already completed {} epochs", trainer.epochs_completed()))
            })?;
            // Optimiser state only matches the parameters of the last epoch.
            let state = trainer.resume_state();
            let last = trainer.epochs_completed();
            write_checkpoint(model, (best_epoch == last).then_some(&state), &out)?;
            if let Some(path) = history {
                write_history_csv(trainer.history(), create(&path)?)?;
            }
            println!("best epoch {best_epoch} of {last}; wrote {}", out.display());
        }
        Command::Eval {
            model,
            data,
            report,
            confusion,
            by,
            bins,
        } => {
            let m = read_checkpoint(&model)?.model;
            let dataset = read_dataset(&data)?;
            let r = match by {
                Some(attr) => evaluate_bucketed(&m, &dataset, attr.into(), bins)?,
                None => evaluate(&m, &dataset)?,
            };
            println!(
                "samples {}  base acc {:.4}  exponent acc {:.4}  joint acc {:.4}  mean loss {:.4}",
                r.count, r.base_accuracy, r.exp_accuracy, r.joint_accuracy, r.mean_loss
            );
            for b in &r.buckets {
                println!(
                    "  {} [{}, {}]  n {}  base {:.4}  exponent {:.4}  joint {:.4}",
                    b.attribute, b.lo, b.hi, b.count, b.base_accuracy, b.exp_accuracy, b.joint_accuracy
                );
            }
            if let Some(path) = report {
                write_report_csv(&r, create(&path)?)?;
            }
            if let Some(path) = confusion {
                write_confusion_csv(&r, create(&path)?)?;
            }
        }
        Command::Sweep {
            model,
            attr,
            levels,
            count_per_level,
            seed,
            out,
            start_index,
        } => {
            let m = read_checkpoint(&model)?.model;
            let [_, h, w] = m.input_shape();
            let base = GenConfig {
                count: count_per_level,
                start_index,
                image_size: (h, w),
                master_seed: seed,
                ..GenConfig::default()
            };
            let attribute = match attr {
                SweepAttr::Noise => Attribute::Noise,
                SweepAttr::Blur => Attribute::Blur,
            };
            let rows = robustness_sweep(&m, &base, attribute, &levels, count_per_level)?;
            for (level, r) in &rows {
                println!(
                    "{attribute} {level}: base {:.4}  exponent {:.4}  joint {:.4}  loss {:.4}",
                    r.base_accuracy, r.exp_accuracy, r.joint_accuracy, r.mean_loss
                );
            }
            write_sweep_csv(attribute.name(), &rows, create(&out)?)?;
        }
        Command::Hist { data, attr, bins, out } => {
            let dataset = read_dataset(&data)?;
            let buckets = attribute_histogram(&dataset, attr.into(), bins)?;
            for b in &buckets {
                println!("{:>16} {}", b.label(), b.count);
            }
            write_hist_csv(&buckets, create(&out)?)?;
        }
        Command::Predict { model, data, index } => {
            let m = read_checkpoint(&model)?.model;
            let dataset = read_dataset(&data)?;
            let sample = dataset.samples.get(index).ok_or_else(|| {
                Error::InvalidArgument(format!("index {index} out of range for {} samples", dataset.len()))
            })?;
            let (b, e, _) = m.forward(&sample.image)?;
            let (pb, pe) = (softmax(&b)?, softmax(&e)?);
            let (bi, ei) = (expnet_core::nn::argmax(pb.data()), expnet_core::nn::argmax(pe.data()));
            let (base_lo, exp_lo) = (dataset.base_range.0 as usize, dataset.exp_range.0 as usize);
            let (tb, te) = dataset.values(sample);
            println!("predicted {}^{}  (true {tb}^{te})", base_lo + bi, exp_lo + ei);
            for (name, lo, p) in [("base", base_lo, &pb), ("exponent", exp_lo, &pe)] {
                let cells: Vec<String> = p.data().iter().enumerate().map(|(k, v)| format!("{}:{v:.4}", lo + k)).collect();
                println!("{name:<9} {}", cells.join(" "));
            }
        }
        Command::Gradcheck { seed, out } => {
            let model = MultiOutputModel::new(&ArchConfig::tiny(), seed)?;
            let [c, h, w] = model.input_shape();
            let mut rng = Rng::new(seed);
            let image = Tensor::from_vec(&[c, h, w], (0..c * h * w).map(|_| rng.uniform(0.0, 1.0) as f32).collect())?;
            let labels = (
                rng.int_inclusive(0, model.base_classes() as i64 - 1) as usize,
                rng.int_inclusive(0, model.exp_classes() as i64 - 1) as usize,
            );
            let report = gradient_check(&model, &image, labels, 1e-3, 1e-3)?;
            println!("{:<24} {:>12} {:>8} {:>8}  status", "parameter", "max rel err", "checked", "skipped");
            for r in &report.rows {
                println!(
                    "{:<24} {:>12.3e} {:>8} {:>8}  {}",
                    r.name,
                    r.max_rel_err,
                    r.checked,
                    r.skipped,
                    if r.passed { "pass" } else { "FAIL" }
                );
            }
            if let Some(path) = out {
                report.write_csv(create(&path)?)?;
            }
            return Ok(report.all_passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
