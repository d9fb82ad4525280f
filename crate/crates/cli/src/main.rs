use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fixhead::audit::{count_total, headless_transform, load_spec, savings, shipped, ArchitectureSpec};
use fixhead::cam::export_cam;
use fixhead::checkpoint::{load_checkpoint, save_checkpoint};
use fixhead::compare::{compare_heads, write_compare_csv};
use fixhead::data::{batch_iter, AugmentConfig, Normalization};
use fixhead::heads::HeadKind;
use fixhead::train::{evaluate, load_datasets, train_on, write_metrics_csv, DataSource, TrainConfig};
use fixhead::ExecMode;

#[derive(Parser)]
#[command(name = "fixhead", version, about = "Train and audit CNNs with learned, fixed or removed classifier heads")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model; writes metrics.csv and checkpoint/ under --out.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint until --epochs are complete.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Top-1 accuracy of a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Parameter counts of an architecture spec.
    Audit {
        /// Spec file, or one of: resnet18, resnet50, mobilenet_v2, shufflenet_v2_x0.5.
        #[arg(long)]
        spec: String,
        /// Resize the classifier to this many classes first.
        #[arg(long)]
        classes: Option<usize>,
        /// Also report the headless variant and the savings.
        #[arg(long)]
        headless: bool,
        /// Append a row to this CSV file (header written when new).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Class activation maps of an identity-head checkpoint.
    Cam {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Test-split image indices.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        images: Vec<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train every listed head with the same seed and data; writes head,top1,gap.
    Compare {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "learned,fixed_orthogonal,fixed_hadamard,fixed_identity")]
        heads: Vec<HeadKind>,
        #[arg(long)]
        out: PathBuf,
        /// Per-head metrics CSVs go here.
        #[arg(long)]
        metrics_dir: Option<PathBuf>,
    },
}

/// Flags override values from `--config`.
#[derive(Args, Default)]
struct ConfigArgs {
    /// JSON file with TrainConfig fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    head: Option<HeadKind>,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    eval_batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    lr_milestones: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
    /// Synthetic training images per class.
    #[arg(long)]
    synth_per_class: Option<usize>,
    #[arg(long)]
    synth_test_per_class: Option<usize>,
    #[arg(long)]
    synth_size: Option<usize>,
    #[arg(long, requires_all = ["train_labels", "test_images", "test_labels"])]
    train_images: Option<PathBuf>,
    #[arg(long)]
    train_labels: Option<PathBuf>,
    #[arg(long)]
    test_images: Option<PathBuf>,
    #[arg(long)]
    test_labels: Option<PathBuf>,
    #[arg(long)]
    train_limit: Option<usize>,
    #[arg(long)]
    pad: Option<usize>,
    #[arg(long)]
    crop: Option<usize>,
    #[arg(long)]
    hflip_prob: Option<f64>,
    #[arg(long, value_delimiter = ',', requires = "norm_std")]
    norm_mean: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    norm_std: Option<Vec<f64>>,
    /// Disable data-parallel kernels.
    #[arg(long)]
    sequential: bool,
    /// Record per-epoch wall time (makes metrics non-reproducible).
    #[arg(long)]
    wall_time: bool,
}

impl ConfigArgs {
    fn resolve(&self, base: Option<TrainConfig>) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => base.unwrap_or_default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = &self.$field { c.$field = v.clone(); }
            )*};
        }
        set!(head, arch, widths, classes, epochs, batch_size, eval_batch_size, lr, momentum, weight_decay, lr_milestones, seed);
        if self.train_limit.is_some() {
            c.train_limit = self.train_limit;
        }
        if let (Some(ti), Some(tl), Some(vi), Some(vl)) =
            (&self.train_images, &self.train_labels, &self.test_images, &self.test_labels)
        {
            c.data = DataSource::Idx {
                train_images: ti.clone(),
                train_labels: tl.clone(),
                test_images: vi.clone(),
                test_labels: vl.clone(),
            };
        }
        if self.synth_per_class.is_some() || self.synth_test_per_class.is_some() || self.synth_size.is_some() {
            let current = match &c.data {
                DataSource::Synth { .. } => c.data.clone(),
                DataSource::Idx { .. } => DataSource::default(),
            };
            let DataSource::Synth {
                n_per_class: mut n,
                test_per_class: mut t,
                size: mut s,
                seed,
            } = current
            else {
                unreachable!()
            };
            n = self.synth_per_class.unwrap_or(n);
            t = self.synth_test_per_class.unwrap_or(t);
            s = self.synth_size.unwrap_or(s);
            c.data = DataSource::Synth {
                n_per_class: n,
                test_per_class: t,
                size: s,
                seed,
            };
        }
        let AugmentConfig { pad, crop, hflip_prob } = c.augment;
        c.augment = AugmentConfig {
            pad: self.pad.unwrap_or(pad),
            crop: self.crop.unwrap_or(crop),
            hflip_prob: self.hflip_prob.unwrap_or(hflip_prob),
        };
        if let (Some(mean), Some(std)) = (&self.norm_mean, &self.norm_std) {
            c.normalization = Some(Normalization {
                mean: mean.clone(),
                std: std.clone(),
            });
        }
        if self.sequential {
            c.exec = ExecMode::Sequential;
        }
        if self.wall_time {
            c.record_wall_time = true;
        }
        Ok(c)
    }
}

fn report_model(cfg: &TrainConfig, model: &fixhead::model::Model) -> Result<()> {
    let audit = count_total(&model.arch_spec())?;
    let r = &model.head_report;
    eprintln!(
        "{} / {}: {} trainable parameters (feature extractor {}, head {} trainable, {} stored)",
        cfg.arch,
        cfg.head,
        model.trainable_param_count(),
        audit.feature_params,
        r.trainable_param_count,
        r.stored_param_count
    );
    if r.duplicate_row_count > 0 {
        eprintln!("warning: head has {} duplicate rows", r.duplicate_row_count);
    }
    Ok(())
}

fn cmd_train(cfg: TrainConfig, out: &Path, resume: Option<&Path>) -> Result<()> {
    cfg.validate()?;
    let (train_set, test_set) = load_datasets(&cfg)?;
    let state = match resume {
        Some(dir) => Some(load_checkpoint(dir)?.0),
        None => None,
    };
    let start = state.as_ref().map_or(0, |s| s.epochs_completed);
    let outcome = {
        let preview = match &state {
            Some(s) => s.model.clone(),
            None => fixhead::model::build_model(&cfg.model_config(train_set.shape()[1]), cfg.seed)?,
        };
        report_model(&cfg, &preview)?;
        train_on(&cfg, &train_set, &test_set, state)?
    };
    std::fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    let metrics_path = out.join("metrics.csv");
    if start > 0 {
        rows = read_metrics(&metrics_path).unwrap_or_default();
        rows.retain(|r: &fixhead::train::MetricsRow| r.epoch < start);
    }
    rows.extend(outcome.metrics.iter().cloned());
    write_metrics_csv(&metrics_path, &rows)?;
    for r in &outcome.metrics {
        eprintln!(
            "epoch {:>3}  loss {:.4}  train {:.4}  test {:.4}  lr {}",
            r.epoch, r.train_loss, r.train_acc, r.test_acc, r.lr
        );
    }
    save_checkpoint(out.join("checkpoint"), &outcome.state, Some(&cfg))?;
    println!("{}", out.join("checkpoint").display());
    Ok(())
}

fn read_metrics(path: &Path) -> Option<Vec<fixhead::train::MetricsRow>> {
    let text = std::fs::read_to_string(path).ok()?;
    text.lines()
        .skip(1)
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            Some(fixhead::train::MetricsRow {
                epoch: f.first()?.parse().ok()?,
                train_loss: f.get(1)?.parse().ok()?,
                train_acc: f.get(2)?.parse().ok()?,
                test_acc: f.get(3)?.parse().ok()?,
                lr: f.get(4)?.parse().ok()?,
                wall_ms: f.get(5)?.parse().ok()?,
            })
        })
        .collect()
}

fn cmd_eval(checkpoint: &Path, args: &ConfigArgs) -> Result<()> {
    let (state, manifest) = load_checkpoint(checkpoint)?;
    let cfg = args.resolve(manifest.config)?;
    let (_, test_set) = load_datasets(&cfg)?;
    let acc = evaluate(&state.model, &test_set, &state.normalization, cfg.eval_batch_size, cfg.exec)?;
    println!("{acc}");
    Ok(())
}

fn cmd_cam(checkpoint: &Path, out: &Path, images: &[usize], args: &ConfigArgs) -> Result<()> {
    let (state, manifest) = load_checkpoint(checkpoint)?;
    let cfg = args.resolve(manifest.config)?;
    let (_, test_set) = load_datasets(&cfg)?;
    for &i in images {
        if i >= test_set.len() {
            bail!("image index {i} out of range for {} test images", test_set.len());
        }
        let one = test_set.slice(i, 1)?;
        let batch = batch_iter(&one, 1, None, &state.normalization)?
            .next()
            .expect("one image");
        let hm = export_cam(&state.model, &batch.x, &format!("img{i}"), out, Some(batch.y[0]), cfg.exec)?;
        println!("img{i}: predicted {} (label {})", hm.predicted, batch.y[0]);
    }
    Ok(())
}

fn load_any_spec(spec: &str) -> Result<ArchitectureSpec> {
    if let Some(s) = shipped::by_name(spec) {
        if !Path::new(spec).exists() {
            return Ok(s?);
        }
    }
    Ok(load_spec(spec)?)
}

fn cmd_audit(spec: &str, classes: Option<usize>, headless: bool, csv: Option<&Path>) -> Result<()> {
    let mut arch = load_any_spec(spec)?;
    if let Some(k) = classes {
        if k != arch.num_classes {
            arch = arch.with_classes(k)?;
        }
    }
    let base = count_total(&arch)?;
    println!("name: {}", arch.name);
    println!("classes: {}", arch.num_classes);
    println!("total: {}", base.total_params);
    println!("classifier: {}", base.classifier_params);
    println!("classifier_fraction: {:.4}", base.classifier_fraction);
    let mut headless_total = String::new();
    let mut saving = String::new();
    if headless {
        let h = count_total(&headless_transform(&arch, arch.num_classes)?)?;
        let s = savings(&base, &h);
        println!("headless_total: {}", h.total_params);
        println!("savings: {:.2}%", 100.0 * s);
        headless_total = h.total_params.to_string();
        saving = format!("{s}");
    }
    if let Some(path) = csv {
        use std::io::Write;
        let new = !path.exists();
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        if new {
            writeln!(f, "name,classes,total,classifier,fraction,headless_total,savings")?;
        }
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            arch.name,
            arch.num_classes,
            base.total_params,
            base.classifier_params,
            base.classifier_fraction,
            headless_total,
            saving
        )?;
    }
    Ok(())
}

fn cmd_compare(cfg: TrainConfig, heads: &[HeadKind], out: &Path, metrics_dir: Option<&Path>) -> Result<()> {
    cfg.validate()?;
    let (train_set, test_set) = load_datasets(&cfg)?;
    let cmp = compare_heads(&cfg, heads, &train_set, &test_set)?;
    if let Some(dir) = metrics_dir {
        std::fs::create_dir_all(dir)?;
        let mut kinds = heads.to_vec();
        if !kinds.contains(&HeadKind::Learned) {
            kinds.insert(0, HeadKind::Learned);
        }
        for (k, run) in kinds.iter().zip(&cmp.runs) {
            write_metrics_csv(dir.join(format!("{}.csv", k.as_str())), &run.metrics)?;
        }
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    write_compare_csv(out, &cmp.rows)?;
    for r in &cmp.rows {
        println!("{:<16} top1 {:.4}  gap {:+.4}", r.head.as_str(), r.top1, r.gap);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { cfg, out, resume } => cmd_train(cfg.resolve(None)?, &out, resume.as_deref()),
        Command::Eval { checkpoint, cfg } => cmd_eval(&checkpoint, &cfg),
        Command::Audit {
            spec,
            classes,
            headless,
            csv,
        } => cmd_audit(&spec, classes, headless, csv.as_deref()),
        Command::Cam {
            checkpoint,
            out,
            images,
            cfg,
        } => cmd_cam(&checkpoint, &out, &images, &cfg),
        Command::Compare {
            cfg,
            heads,
            out,
            metrics_dir,
        } => cmd_compare(cfg.resolve(None)?, &heads, &out, metrics_dir.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
