use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mgsd_core::config::Config;
use mgsd_core::features::{synth_generate, Manifest, SynthSpec};
use mgsd_core::io::write_new;
use mgsd_core::objectives::{condition_breakdown, eer, read_scores, write_scores};
use mgsd_core::report::{ablation_run, heatmap_csv, parse_kernel_sets, parse_modes, CellResult};
use mgsd_core::train::{full_graph_grad_check, score, train_to_dir, Checkpoint, Dataset};

#[derive(Parser)]
#[command(name = "mgsd", version, about = "Gated multi-kernel convolution back-end for spoofed-speech detection")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic two-class corpus (feature files plus manifests).
    SynthData(SynthArgs),
    /// Train with early stopping on dev EER.
    Train(TrainArgs),
    /// Score a manifest with a checkpoint, one utterance at a time.
    Score {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pooled EER of a score file, optionally broken down by condition tags.
    EvalEer {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Condition key to group by; repeat for a cross-product.
        #[arg(long)]
        by: Vec<String>,
    },
    /// Compare analytic and finite-difference gradients of the full objective.
    GradCheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, default_value_t = 2)]
        batch: usize,
        #[arg(long, default_value_t = 7)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-6)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Kernel-set by loss-mode ablation matrix of dev EER%.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
        /// Kernel sets, e.g. "3,7;11,15;3,7,11,15".
        #[arg(long)]
        kernels: String,
        /// Loss modes, e.g. "ce,ce+cka".
        #[arg(long, default_value = "ce,ce+cka")]
        modes: String,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// EER% grid over two condition keys.
    Heatmap {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        rows: String,
        #[arg(long)]
        cols: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 100)]
    n_dev: usize,
    #[arg(long = "L", default_value_t = 4)]
    layers: usize,
    #[arg(long = "D", default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 16)]
    t_min: usize,
    #[arg(long, default_value_t = 32)]
    t_max: usize,
    #[arg(long, default_value_t = 6.0)]
    sep: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

/// Flags that override config keys.
#[derive(Args, Default)]
struct Overrides {
    /// Any config key, e.g. `--set multiconv.kernels=[3,5]`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    train_seed: Option<u64>,
    /// Enable or disable the CKA term.
    #[arg(long)]
    cka: Option<bool>,
    #[arg(long)]
    m_max: Option<usize>,
    #[arg(long)]
    clip_norm: Option<f64>,
}

impl Overrides {
    fn pairs(&self) -> Vec<String> {
        let mut v = self.set.clone();
        let mut push = |k: &str, val: Option<String>| {
            if let Some(val) = val {
                v.push(format!("train.{k}={val}"));
            }
        };
        push("lr", self.lr.map(|x| format!("{x:e}")));
        push("weight_decay", self.weight_decay.map(|x| format!("{x:e}")));
        push("batch_size", self.batch_size.map(|x| x.to_string()));
        push("patience", self.patience.map(|x| x.to_string()));
        push("max_epochs", self.max_epochs.map(|x| x.to_string()));
        push("seed", self.train_seed.map(|x| x.to_string()));
        push("cka", self.cka.map(|x| x.to_string()));
        push("m_max", self.m_max.map(|x| x.to_string()));
        push("clip_norm", self.clip_norm.map(|x| format!("{x:e}")));
        v
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

fn load_config(path: Option<&Path>, overrides: &Overrides) -> Result<Config> {
    let base = match path {
        Some(p) => Config::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => Config::default(),
    };
    Ok(base.with_overrides(&overrides.pairs())?)
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    Manifest::load(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::SynthData(a) => {
            let spec = SynthSpec {
                n_utts: a.n,
                n_dev: a.n_dev,
                layers: a.layers,
                dim: a.dim,
                t_min: a.t_min,
                t_max: a.t_max,
                class_separation: a.sep,
                seed: a.seed,
            };
            let out = synth_generate(&spec, &a.out)?;
            println!(
                "wrote {} train and {} dev utterances to {}",
                out.train.len(),
                out.dev.as_ref().map_or(0, |m| m.len()),
                a.out.display()
            );
        }
        Cmd::Train(a) => {
            let cfg = load_config(a.config.as_deref(), &a.overrides)?;
            let train_m = load_manifest(&a.train)?;
            let dev_m = load_manifest(&a.dev)?;
            let (outcome, art) = train_to_dir(&cfg, &train_m, &dev_m, &a.out, |e| {
                eprintln!(
                    "epoch {:>3}  ce {:.5}  cka {:.5}  train EER {:.2}%  dev EER {:.2}%{}",
                    e.epoch,
                    e.train_ce,
                    e.train_cka,
                    100.0 * e.train_eer,
                    100.0 * e.dev_eer,
                    if e.improved { "  *" } else { "" }
                )
            })?;
            println!(
                "best epoch {} dev EER {:.2}%  checkpoint {}",
                outcome.best_epoch,
                100.0 * outcome.best_dev.eer.eer,
                art.checkpoint.display()
            );
        }
        Cmd::Score { ckpt, manifest, out } => {
            let model = Checkpoint::load(&ckpt)?.to_model()?;
            let data = Dataset::load(&load_manifest(&manifest)?)?;
            let records = score(&model, &data)?;
            write_scores(&out, &records)?;
            println!("scored {} utterances into {}", records.len(), out.display());
        }
        Cmd::EvalEer { scores, manifest, by } => {
            let records = read_scores(&scores, &load_manifest(&manifest)?)?;
            let pooled = eer(&records)?;
            println!("EER {:.4}%  threshold {}", 100.0 * pooled.eer, pooled.threshold);
            if !by.is_empty() {
                print!("{}", condition_breakdown(&records, &by)?.to_csv());
            }
        }
        Cmd::GradCheck {
            config,
            overrides,
            batch,
            frames,
            seed,
            step,
            tol,
        } => {
            let cfg = load_config(config.as_deref(), &overrides)?;
            let r = full_graph_grad_check(&cfg, batch, frames, seed, step)?;
            println!(
                "checked {} scalars  max rel err {:.3e}  max abs err {:.3e}  worst {}[{}]",
                r.checked, r.max_rel_err, r.max_abs_err, r.worst_param, r.worst_index
            );
            if !(r.max_rel_err < tol) {
                println!("FAIL: max relative error is not below {tol:e}");
                return Ok(ExitCode::from(2));
            }
            println!("PASS");
        }
        Cmd::Ablate {
            config,
            overrides,
            kernels,
            modes,
            train,
            dev,
            out,
        } => {
            let cfg = load_config(config.as_deref(), &overrides)?;
            let sets = parse_kernel_sets(&kernels)?;
            let modes = parse_modes(&modes)?;
            let train_set = Dataset::load(&load_manifest(&train)?)?;
            let dev_set = Dataset::load(&load_manifest(&dev)?)?;
            if out.exists() {
                bail!("{} already exists", out.display());
            }
            let table = ablation_run(&cfg, &sets, &modes, &train_set, &dev_set, |ks, m, r| match r {
                CellResult::Eer(e) => eprintln!("{ks:?} {m}: dev EER {:.2}%", 100.0 * e),
                CellResult::Error(msg) => eprintln!("{ks:?} {m}: ERROR {msg}"),
            });
            write_new(&out, table.to_csv().as_bytes())?;
            print!("{}", table.to_csv());
        }
        Cmd::Heatmap {
            scores,
            manifest,
            rows,
            cols,
            out,
        } => {
            let records = read_scores(&scores, &load_manifest(&manifest)?)?;
            let grid = heatmap_csv(&records, &rows, &cols)?;
            write_new(&out, grid.as_bytes())?;
            print!("{grid}");
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
