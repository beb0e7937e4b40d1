use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use indoorworld::{house_set, load_houses, sample_from_houses, save_houses, Domain, HousePlan, ImageBank, Split};
use jrt::agent::AgentArch;
use jrt::evalkit::{evaluate_in, heatmap, pgm_bytes, EpisodeSet};
use jrt::fadapt::{adapt, AdaptConfig};
use jrt::harness::{run_pipeline, save_encoder, sweep, PipelineConfig, SweepParam, SweepSpec};
use jrt::pmimic::{mimic_train, MimicConfig};
use jrt::rl::{finetune, load_checkpoint, save_checkpoint, train_baseline};
use jrt::{Error, Result};
use nncore::checkpoint;

#[derive(Parser)]
#[command(name = "jrt", about = "Sim-to-real navigation transfer experiments")]
struct Cli {
    /// `key = value` file with defaults for every stage.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Extra `key=value` settings applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a house bank.
    GenHouses {
        #[arg(long)]
        domain: Domain,
        #[arg(long)]
        split: Split,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render random views from a house bank into an image bank.
    SampleImages {
        #[arg(long)]
        domain: Domain,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        houses: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from scratch, or fine-tune every parameter with `--from`.
    Train {
        #[arg(long)]
        domain: Domain,
        #[arg(long)]
        from: Option<PathBuf>,
        /// House bank; defaults to the generated training split.
        #[arg(long)]
        houses: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Adversarial adaptation of the encoder.
    Adapt {
        #[arg(long)]
        ms: PathBuf,
        #[arg(long)]
        sim_images: PathBuf,
        #[arg(long)]
        real_images: PathBuf,
        #[arg(long)]
        idt: Option<f64>,
        #[arg(long)]
        norm: Option<f64>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Policy mimic on top of an adapted encoder.
    Mimic {
        #[arg(long)]
        mr: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        houses: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Greedy evaluation on a fixed episode set.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Episode set CSV; with `--houses` instead, a set is sampled and saved.
        #[arg(long)]
        episodes: Option<PathBuf>,
        #[arg(long)]
        houses: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Last-convolution activation map of one image as a PGM file.
    Heatmap {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image_bank: PathBuf,
        #[arg(long)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Every stage of the transfer pipeline for every configured seed.
    Pipeline {
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Ablation over the identity or mimic weight on top of the pipeline.
    Sweep {
        #[arg(long)]
        param: SweepParam,
        /// Comma-separated values; defaults to the configured list.
        #[arg(long)]
        values: Option<String>,
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn config(cli: &Cli) -> Result<PipelineConfig> {
    let mut c = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    for s in &cli.sets {
        let (k, v) = s.split_once('=').ok_or_else(|| Error::Config(format!("`--set {s}` is not key=value")))?;
        c.set(k.trim(), v.trim())?;
    }
    Ok(c)
}

fn train_houses(path: &Option<PathBuf>, domain: Domain, cfg: &PipelineConfig, seed: u64) -> Result<Vec<Arc<HousePlan>>> {
    let houses = match path {
        Some(p) => load_houses(p)?,
        None => house_set(domain, Split::Train, cfg.train_houses, seed)?,
    };
    Ok(houses.into_iter().map(Arc::new).collect())
}

fn write(path: &PathBuf, text: &str) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = config(&cli)?;
    let arch = AgentArch::default();
    match cli.cmd {
        Cmd::GenHouses { domain, split, count, seed, out } => {
            let houses = house_set(domain, split, count, seed)?;
            save_houses(&houses, &out)?;
            println!("wrote {} {domain} houses to {}", houses.len(), out.display());
        }
        Cmd::SampleImages { domain, count, houses, seed, out } => {
            let houses = load_houses(&houses)?;
            let bank = sample_from_houses(&houses, domain, count, seed, cfg.train.exec);
            bank.save(&out)?;
            println!("wrote {} images to {}", bank.len(), out.display());
        }
        Cmd::Train { domain, from, houses, steps, workers, seed, out, log } => {
            let houses = train_houses(&houses, domain, &cfg, seed)?;
            let mut tc = cfg.train.clone();
            tc.domain = domain;
            tc.seed = seed;
            tc.steps = steps.unwrap_or(if from.is_some() { cfg.ft_steps } else { cfg.baseline_steps });
            if let Some(w) = workers {
                tc.workers = w;
            }
            let outcome = match from {
                Some(p) => {
                    let (params, start) = load_checkpoint(p)?;
                    finetune(params, start, &arch, &tc, &houses, None)?
                }
                None => train_baseline(&arch, &tc, &houses, None)?,
            };
            save_checkpoint(&outcome.params, outcome.steps, &out)?;
            if let Some(l) = log {
                write(&l, &outcome.log.to_csv())?;
            }
            println!("trained to {} steps -> {}", outcome.steps, out.display());
        }
        Cmd::Adapt { ms, sim_images, real_images, idt, norm, iters, batch, seed, out, log } => {
            let (source, _) = load_checkpoint(ms)?;
            let ac = AdaptConfig {
                idt_weight: idt.unwrap_or(cfg.adapt.idt_weight),
                norm_weight: norm.unwrap_or(cfg.adapt.norm_weight),
                iterations: iters.unwrap_or(cfg.adapt.iterations),
                batch: batch.unwrap_or(cfg.adapt.batch),
                seed,
                ..cfg.adapt.clone()
            };
            let outcome = adapt(&source, &arch, &ImageBank::load(sim_images)?, &ImageBank::load(real_images)?, &ac)?;
            save_encoder(&outcome.encoder, &out)?;
            if let Some(l) = log {
                write(&l, &outcome.log.to_csv())?;
            }
            println!("adapted encoder -> {}", out.display());
        }
        Cmd::Mimic { mr, teacher, lambda, houses, steps, workers, seed, out, log } => {
            let encoder = checkpoint::load(mr)?;
            let (teacher, _) = load_checkpoint(teacher)?;
            let houses = train_houses(&houses, Domain::Real, &cfg, seed)?;
            let mut mc = MimicConfig {
                lambda: lambda.unwrap_or(cfg.mimic_weight),
                train: cfg.train.clone(),
            };
            mc.train.domain = Domain::Real;
            mc.train.seed = seed;
            mc.train.steps = steps.unwrap_or(cfg.mimic_steps);
            if let Some(w) = workers {
                mc.train.workers = w;
            }
            let outcome = mimic_train(&encoder, &teacher, &arch, &houses, &mc, None)?;
            save_checkpoint(&outcome.params, outcome.steps, &out)?;
            if let Some(l) = log {
                write(&l, &outcome.log.to_csv())?;
            }
            println!("student trained for {} steps -> {}", outcome.steps, out.display());
        }
        Cmd::Eval { model, episodes, houses, seed, out } => {
            let (params, _) = load_checkpoint(model)?;
            let set = match (episodes, houses) {
                (Some(e), _) => EpisodeSet::load(e)?,
                (None, Some(h)) => {
                    let set = EpisodeSet::sample(&load_houses(h)?, cfg.episodes_per_house, cfg.eval_max_steps, seed)?;
                    set.save(out.join("episodes.csv"))?;
                    set
                }
                (None, None) => return Err(Error::Config("eval needs --episodes or --houses".into())),
            };
            let report = evaluate_in(&params, &arch, &set, &set.houses()?, seed, cfg.train.exec)?;
            write(&out.join("report.csv"), &report.to_csv())?;
            println!("success {:.2}%  spl {:.2}%  ({} episodes)", report.success_rate(), report.spl(), report.episodes.len());
        }
        Cmd::Heatmap { model, image_bank, index, out } => {
            let (params, _) = load_checkpoint(model)?;
            let bank = ImageBank::load(image_bank)?;
            let image = bank
                .images
                .get(index)
                .ok_or_else(|| Error::Config(format!("image index {index} out of range ({} images)", bank.len())))?;
            let map = heatmap(&params, &arch, image)?;
            if let Some(d) = out.parent() {
                std::fs::create_dir_all(d)?;
            }
            std::fs::write(&out, pgm_bytes(&map))?;
            println!("wrote {}x{} heatmap to {}", map.shape()[1], map.shape()[0], out.display());
        }
        Cmd::Pipeline { resume, seed } => {
            let mut cfg = cfg;
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            let summary = run_pipeline(&cfg, resume)?;
            println!("model,seeds,success_mean,success_std,spl_mean,spl_std");
            for r in &summary.rows {
                println!("{},{},{:.2},{:.2},{:.2},{:.2}", r.model, r.seeds, r.success_mean, r.success_std, r.spl_mean, r.spl_std);
            }
        }
        Cmd::Sweep { param, values, resume, seed } => {
            let mut cfg = cfg;
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            let values: Vec<f64> = match values {
                Some(v) => v
                    .split(',')
                    .map(|x| x.trim().parse().map_err(|_| Error::Config(format!("sweep value `{x}`"))))
                    .collect::<Result<_>>()?,
                None => match param {
                    SweepParam::Idt => cfg.idt_sweep.clone(),
                    SweepParam::Mimic => cfg.mimic_sweep.clone(),
                },
            };
            let result = sweep(&cfg, &SweepSpec::new(param, values)?, resume)?;
            print!("{}", result.summary_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = match &cli.cmd {
        Cmd::GenHouses { .. } => "gen-houses",
        Cmd::SampleImages { .. } => "sample-images",
        Cmd::Train { .. } => "train",
        Cmd::Adapt { .. } => "adapt",
        Cmd::Mimic { .. } => "mimic",
        Cmd::Eval { .. } => "eval",
        Cmd::Heatmap { .. } => "heatmap",
        Cmd::Pipeline { .. } => "pipeline",
        Cmd::Sweep { .. } => "sweep",
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let e = match e {
                e @ Error::Stage { .. } => e,
                e => e.in_stage(name),
            };
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
