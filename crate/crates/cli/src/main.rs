//! `cfnet`: dataset synthesis, pre-training, HOG extraction, fine-tuning and
//! evaluation from the command line.

mod config;
mod pgm;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cfnet::metrics::{self, format_db, ConfusionMatrix};
use cfnet::pipeline::{self, train, Dataset, HogFeatures, Manifest, Split};

use config::{RunConfig, KEYS};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] cfnet::Error),
}

#[derive(Parser, Debug)]
#[command(name = "cfnet", version, about = "Two-stage learning on 1-bit SAR imagery")]
struct Cli {
    /// Worker threads for data-parallel work (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key (repeatable), e.g. `--set train.pretrain_epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for s in &self.sets {
            c.set_pair(s)?;
        }
        Ok(c)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize or preview datasets.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Stage 1: self-supervised pre-training.
    Pretrain {
        /// Dataset manifest (file or directory).
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory for checkpoints and curves.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Stage 2: HOG descriptors for every row.
    Hog {
        #[arg(long)]
        manifest: PathBuf,
        /// Pre-training checkpoint (needed for `--source reconstructed`).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// reconstructed | raw1bit | off (overrides `hog.source`).
        #[arg(long)]
        source: Option<String>,
        /// Output directory; receives `hog/` and an updated manifest.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Stage 3: two-phase fine-tuning.
    Finetune {
        /// Manifest written by `hog` (or any manifest, for a HOG-free model).
        #[arg(long)]
        manifest: PathBuf,
        /// `scratch` or a pre-training checkpoint path.
        #[arg(long)]
        init: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a classifier, or score a stored confusion matrix / predictions.
    Eval {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Classifier checkpoint written by `finetune`.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Pre-training checkpoint for reconstruction PSNR and triptychs.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Score a confusion-matrix CSV and exit.
        #[arg(long, value_name = "CSV", conflicts_with_all = ["model", "predictions"])]
        matrix_only: Option<PathBuf>,
        /// Score a `id,label,pred` CSV instead of running a model.
        #[arg(long, value_name = "CSV", conflicts_with = "model")]
        predictions: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Every stage end to end: dataset, pretrain, hog, finetune, eval.
    Run {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Print every config key with its effective value and description.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Subcommand, Debug)]
enum DatasetCmd {
    /// Simulate paired 1-bit / 16-bit images of synthetic targets.
    Synth {
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// balanced | table1
        #[arg(long)]
        imbalance: Option<String>,
        /// e.g. 70/15/15 or 70/30
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write PGM previews (1-bit | 16-bit) of manifest rows.
    Preview {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Preview at most this many rows.
        #[arg(long)]
        limit: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = cli.workers.map_or(Ok(()), |n| cfnet::par::init_workers(n).map_err(CliError::from)).and_then(|()| run(cli.cmd));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Dataset(DatasetCmd::Synth { classes, per_class, size, seed, imbalance, split, out, cfg }) => {
            let mut c = cfg.resolve()?;
            let flags = [
                ("dataset.classes", classes.map(|v| v.to_string())),
                ("dataset.per_class", per_class.map(|v| v.to_string())),
                ("dataset.size", size.map(|v| v.to_string())),
                ("seed", seed.map(|v| v.to_string())),
                ("dataset.imbalance", imbalance),
                ("dataset.split", split),
            ];
            for (k, v) in flags {
                if let Some(v) = v {
                    c.set(k, &v)?;
                }
            }
            cmd_synth(&c, &out)
        }
        Command::Dataset(DatasetCmd::Preview { manifest, out, limit }) => cmd_preview(&manifest, &out, limit),
        Command::Pretrain { manifest, out, cfg } => cmd_pretrain(&cfg.resolve()?, &manifest, &out),
        Command::Hog { manifest, ckpt, source, out, cfg } => {
            let mut c = cfg.resolve()?;
            if let Some(s) = source {
                c.set("hog.source", &s)?;
            }
            cmd_hog(&c, &manifest, ckpt.as_deref(), &out)
        }
        Command::Finetune { manifest, init, out, cfg } => {
            let mut c = cfg.resolve()?;
            let ckpt = if init == "scratch" {
                c.set("train.init", "scratch")?;
                None
            } else {
                c.set("train.init", "pretrained")?;
                Some(PathBuf::from(init))
            };
            cmd_finetune(&c, &manifest, ckpt.as_deref(), &out)
        }
        Command::Eval { manifest, model, ckpt, matrix_only, predictions, out, cfg } => {
            let c = cfg.resolve()?;
            if let Some(m) = matrix_only {
                return cmd_matrix_only(&m, out.as_deref());
            }
            if let Some(p) = predictions {
                return cmd_predictions(&p, manifest.as_deref(), out.as_deref());
            }
            let (Some(manifest), Some(model), Some(out)) = (manifest, model, out) else {
                return Err(CliError::Usage("eval needs --manifest, --model and --out (or --matrix-only / --predictions)".into()));
            };
            cmd_eval(&c, &manifest, &model, ckpt.as_deref(), &out)
        }
        Command::Run { out, cfg } => cmd_run(&cfg.resolve()?, &out),
        Command::Config { cfg } => {
            let c = cfg.resolve()?;
            for (k, _, doc) in KEYS {
                println!("{k} = {}  # {doc}", c.get(k));
            }
            Ok(())
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| cfnet::Error::Io { path: dir.into(), source: e })?;
    Ok(())
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| cfnet::Error::Io { path: path.into(), source: e })?;
    Ok(())
}

fn cmd_synth(c: &RunConfig, out: &Path) -> Result<(), CliError> {
    let s = c.synth()?;
    let m = pipeline::synth_dataset(&s, out)?;
    c.write_resolved(out)?;
    let n = |sp| m.indices(sp).len();
    println!(
        "wrote {} pairs to {} (train {}, val {}, test {})",
        m.rows.len(),
        out.display(),
        n(Split::Train),
        n(Split::Val),
        n(Split::Test)
    );
    Ok(())
}

fn cmd_preview(manifest: &Path, out: &Path, limit: Option<usize>) -> Result<(), CliError> {
    let ds = Dataset::load(manifest)?;
    create_dir(out)?;
    let n = limit.unwrap_or(ds.len()).min(ds.len());
    for i in 0..n {
        let img = pgm::hconcat(&[&ds.img_1bit[i], &ds.img_16bit[i]]);
        write(&out.join(format!("{}.pgm", ds.manifest.rows[i].id)), pgm::encode(&img))?;
    }
    println!("wrote {n} previews to {}", out.display());
    Ok(())
}

fn cmd_pretrain(c: &RunConfig, manifest: &Path, out: &Path) -> Result<(), CliError> {
    let ds = Dataset::load(manifest)?;
    let cfg = c.pretrain()?;
    c.write_resolved(out)?;
    let o = pipeline::pretrain(&ds, &cfg, Some(out))?;
    if let (Some(first), Some(last)) = (o.curves.first(), o.curves.last()) {
        println!(
            "pre-trained {} epochs: l_rec {:.5} -> {:.5}, best l_total at epoch {}",
            o.curves.len(),
            first.l_rec,
            last.l_rec,
            o.best_epoch
        );
    }
    println!("checkpoints in {}", out.display());
    Ok(())
}

fn cmd_hog(c: &RunConfig, manifest: &Path, ckpt: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let ds = Dataset::load(manifest)?;
    let source = c.hog_source()?;
    let net = match (source, ckpt) {
        (pipeline::HogSource::Reconstructed, None) => {
            return Err(CliError::Usage(
                "hog.source=reconstructed needs --ckpt <pretrain-out>/ckpt_best.cfck; run `cfnet pretrain` first".into(),
            ))
        }
        (pipeline::HogSource::Reconstructed, Some(p)) => Some(train::load_cfnet(p)?),
        _ => None,
    };
    c.write_resolved(out)?;
    let (m, f) = pipeline::extract_hog_stage(&ds, net.as_ref(), source, &c.hog()?, out)?;
    match f {
        Some(f) => println!("wrote {} {}-dim descriptors ({source}) to {}", m.rows.len(), f.dim(), out.display()),
        None => println!("HOG disabled; manifest without descriptors written to {}", out.display()),
    }
    Ok(())
}

fn load_hog(c: &RunConfig, ds: &Dataset) -> Result<Option<HogFeatures>, CliError> {
    Ok(HogFeatures::load(ds, c.hog()?)?)
}

fn cmd_finetune(c: &RunConfig, manifest: &Path, ckpt: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let ds = Dataset::load(manifest)?;
    let hog = load_hog(c, &ds)?;
    let cfg = c.finetune(ds.manifest.num_classes(), hog.as_ref().map(HogFeatures::dim))?;
    let backbone = match ckpt {
        Some(p) => Some(pipeline::Checkpoint::load(p)?.params()?),
        None => None,
    };
    c.write_resolved(out)?;
    let o = pipeline::finetune(&ds, hog.as_ref(), backbone.as_ref(), &cfg, Some(out))?;
    println!(
        "fine-tuned {} epochs; best val accuracy {:.4} at epoch {}; model in {}",
        o.curves.len(),
        o.best_val_acc,
        o.best_epoch,
        out.join(train::CLASSIFIER_BEST).display()
    );
    Ok(())
}

fn report_outputs(m: &ConfusionMatrix, names: &[String], out: Option<&Path>) -> Result<(), CliError> {
    let r = metrics::report(m)?;
    print!("{}", r.to_text(names));
    if let Some(dir) = out {
        create_dir(dir)?;
        write(&dir.join("metrics.csv"), r.to_csv(names))?;
        write(&dir.join("confusion.csv"), m.to_csv(names))?;
        write(&dir.join("report.txt"), r.to_text(names))?;
    }
    Ok(())
}

fn cmd_matrix_only(path: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let text = fs::read_to_string(path).map_err(|e| cfnet::Error::Io { path: path.into(), source: e })?;
    let (m, names) = ConfusionMatrix::from_csv(&text)?;
    report_outputs(&m, &names, out)
}

/// Reads `id,label,pred` rows.
fn read_predictions(text: &str) -> Result<Vec<(String, usize, usize)>, CliError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next().map(str::trim) != Some("id,label,pred") {
        return Err(CliError::Usage("predictions file must start with `id,label,pred`".into()));
    }
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').map(str::trim).collect();
            match f[..] {
                [id, a, b] => match (a.parse(), b.parse()) {
                    (Ok(a), Ok(b)) => Ok((id.to_string(), a, b)),
                    _ => Err(CliError::Usage(format!("bad predictions row `{l}`"))),
                },
                _ => Err(CliError::Usage(format!("bad predictions row `{l}`"))),
            }
        })
        .collect()
}

fn cmd_predictions(path: &Path, manifest: Option<&Path>, out: Option<&Path>) -> Result<(), CliError> {
    let text = fs::read_to_string(path).map_err(|e| cfnet::Error::Io { path: path.into(), source: e })?;
    let rows = read_predictions(&text)?;
    let names = match manifest {
        Some(p) => Manifest::load(p)?.0.classes,
        None => {
            let c = rows.iter().map(|r| r.1.max(r.2) + 1).max().unwrap_or(0);
            (0..c).map(|i| format!("class{i}")).collect()
        }
    };
    let labels: Vec<usize> = rows.iter().map(|r| r.1).collect();
    let preds: Vec<usize> = rows.iter().map(|r| r.2).collect();
    let m = metrics::confusion(&preds, &labels, names.len())?;
    report_outputs(&m, &names, out)
}

fn cmd_eval(c: &RunConfig, manifest: &Path, model: &Path, ckpt: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let ds = Dataset::load(manifest)?;
    let hog = load_hog(c, &ds)?;
    let clf = train::load_classifier(model)?;
    let split: Split = c.get("eval.split").parse()?;
    let (m, preds) = train::evaluate(&clf, &ds, hog.as_ref(), split)?;
    let names = ds.manifest.classes.clone();
    c.write_resolved(out)?;
    report_outputs(&m, &names, Some(out))?;

    let idx = ds.manifest.indices(split);
    let mut pred_csv = String::from("id,label,pred\n");
    for (&i, p) in idx.iter().zip(&preds) {
        let r = &ds.manifest.rows[i];
        pred_csv.push_str(&format!("{},{},{}\n", r.id, r.label, p));
    }
    write(&out.join("predictions.csv"), pred_csv)?;

    if let Some(p) = ckpt {
        let net = train::load_cfnet(p)?;
        let ps = train::reconstruction_psnr(&net, &ds, &idx)?;
        let mut csv = String::from("id,psnr_reconstructed,psnr_1bit\n");
        for (&i, (a, b)) in idx.iter().zip(&ps) {
            csv.push_str(&format!("{},{},{}\n", ds.manifest.rows[i].id, format_db(*a), format_db(*b)));
        }
        let mean = |f: fn(&(f64, f64)) -> f64| ps.iter().map(f).sum::<f64>() / ps.len() as f64;
        let (mr, mb) = (mean(|p| p.0), mean(|p| p.1));
        csv.push_str(&format!("mean,{},{}\n", format_db(mr), format_db(mb)));
        write(&out.join("psnr.csv"), csv)?;
        println!("mean PSNR: reconstructed {} dB, 1-bit {} dB", format_db(mr), format_db(mb));

        let k: usize = c.parse("eval.triptychs")?;
        let dir = out.join("triptychs");
        create_dir(&dir)?;
        for &i in idx.iter().take(k) {
            let rec = net.student_reconstruct(&ds.img_1bit[i])?;
            let img = pgm::hconcat(&[&ds.img_1bit[i], &rec, &ds.img_16bit[i]]);
            write(&dir.join(format!("{}.pgm", ds.manifest.rows[i].id)), pgm::encode(&img))?;
        }
    }
    println!("reports in {}", out.display());
    Ok(())
}

fn cmd_run(c: &RunConfig, out: &Path) -> Result<(), CliError> {
    let (data, pre, hog, ft, ev) =
        (out.join("data"), out.join("pretrain"), out.join("hog"), out.join("finetune"), out.join("eval"));
    c.write_resolved(out)?;
    cmd_synth(c, &data)?;
    cmd_pretrain(c, &data, &pre)?;
    let best = pre.join(train::CKPT_BEST);
    let source = c.hog_source()?;
    let ckpt = (source == pipeline::HogSource::Reconstructed).then_some(best.as_path());
    cmd_hog(c, &data, ckpt, &hog)?;
    let init = (c.get("train.init") != "scratch").then_some(best.as_path());
    cmd_finetune(c, &hog, init, &ft)?;
    cmd_eval(c, &hog, &ft.join(train::CLASSIFIER_BEST), Some(&best), &ev)
}
