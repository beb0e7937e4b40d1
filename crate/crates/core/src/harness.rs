//! Configuration, the staged transfer pipeline and ablation sweeps.
//!
//! Every stage writes its outputs under `<out_dir>/seed<S>/`; with `resume`
//! a stage whose outputs already exist is skipped.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use indoorworld::{house_set_with, load_houses, sample_from_houses, save_houses, Domain, HousePlan, ImageBank, Split};
use nncore::{checkpoint, Exec, ParamSet};

use crate::agent::{AgentArch, ENCODER};
use crate::error::{Error, Result};
use crate::evalkit::{aggregate_csv, compare, comparison_csv, evaluate_in, write_file, ComparisonRow, EpisodeSet, EvalReport, LabeledReport};
use crate::fadapt::{adapt, bank_features, probe_accuracy, AdaptConfig, ProbeConfig};
use crate::mix_seed;
use crate::pmimic::{mimic_train, MimicConfig};
use crate::rl::{finetune, load_checkpoint, save_checkpoint, train_baseline, TrainConfig, TrainMode, TrainOutcome, Validation};

/// Table rows in report order.
pub const MODELS: [&str; 6] = ["sim", "real", "sim+FT", "sim+FA", "sim+PM", "sim+FA+PM"];

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub train_houses: usize,
    pub val_houses: usize,
    pub test_houses: usize,
    pub episodes_per_house: usize,
    pub eval_max_steps: usize,
    pub images_per_domain: usize,
    pub probe_images: usize,
    /// Baseline training budget; fine-tuning and mimic use their own.
    pub baseline_steps: u64,
    pub ft_steps: u64,
    pub mimic_steps: u64,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
    pub probe: ProbeConfig,
    pub mimic_weight: f64,
    pub idt_sweep: Vec<f64>,
    pub mimic_sweep: Vec<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs"),
            seeds: vec![0, 1, 2],
            train_houses: 24,
            val_houses: 8,
            test_houses: 8,
            episodes_per_house: 10,
            eval_max_steps: indoorworld::DEFAULT_MAX_STEPS,
            images_per_domain: 10_000,
            probe_images: 1000,
            baseline_steps: 200_000,
            ft_steps: 100_000,
            mimic_steps: 100_000,
            train: TrainConfig {
                eval_every: 0,
                ..TrainConfig::default()
            },
            adapt: AdaptConfig::default(),
            probe: ProbeConfig::default(),
            mimic_weight: 0.1,
            idt_sweep: vec![0.0, 5e-6, 5e-4, 5e-2],
            mimic_sweep: vec![0.0, 0.1, 0.2, 0.5],
        }
    }
}

fn parse_list<T: std::str::FromStr>(v: &str) -> Option<Vec<T>> {
    v.split(',').map(|s| s.trim()).filter(|s| !s.is_empty()).map(|s| s.parse().ok()).collect()
}

fn list_str<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl PipelineConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Config(format!("invalid value `{value}` for `{key}`"));
        macro_rules! p {
            ($t:ty) => {
                value.parse::<$t>().map_err(|_| bad())?
            };
        }
        match key {
            "out_dir" => self.out_dir = PathBuf::from(value),
            "seeds" => self.seeds = parse_list(value).ok_or_else(bad)?,
            "train_houses" => self.train_houses = p!(usize),
            "val_houses" => self.val_houses = p!(usize),
            "test_houses" => self.test_houses = p!(usize),
            "episodes_per_house" => self.episodes_per_house = p!(usize),
            "eval_max_steps" => self.eval_max_steps = p!(usize),
            "images_per_domain" => self.images_per_domain = p!(usize),
            "probe_images" => self.probe_images = p!(usize),
            "baseline_steps" => self.baseline_steps = p!(u64),
            "ft_steps" => self.ft_steps = p!(u64),
            "mimic_steps" => self.mimic_steps = p!(u64),
            "workers" => self.train.workers = p!(usize),
            "unroll" => self.train.unroll = p!(usize),
            "lr" => self.train.lr = p!(f64),
            "rms_decay" => self.train.rms_decay = p!(f64),
            "rms_eps" => self.train.rms_eps = p!(f64),
            "gamma" => self.train.gamma = p!(f64),
            "value_coef" => self.train.weights.value_coef = p!(f64),
            "entropy_coef" => self.train.weights.entropy_coef = p!(f64),
            "max_grad_norm" => self.train.max_grad_norm = p!(f64),
            "train_max_steps" => self.train.max_steps = p!(usize),
            "eval_every" => self.train.eval_every = p!(u64),
            "mode" => {
                self.train.mode = match value {
                    "sync" => TrainMode::Sync,
                    "async" => TrainMode::Async,
                    _ => return Err(bad()),
                }
            }
            "exec" => {
                self.train.exec = match value {
                    "sequential" => Exec::Sequential,
                    "parallel" => Exec::Parallel,
                    _ => return Err(bad()),
                }
            }
            "idt_weight" => self.adapt.idt_weight = p!(f64),
            "norm_weight" => self.adapt.norm_weight = p!(f64),
            "adapt_lr" => self.adapt.lr = p!(f64),
            "adapt_beta1" => self.adapt.beta1 = p!(f64),
            "adapt_beta2" => self.adapt.beta2 = p!(f64),
            "adapt_eps" => self.adapt.eps = p!(f64),
            "disc_lr" => self.adapt.disc_lr = p!(f64),
            "adapt_standardize" => self.adapt.standardize = p!(bool),
            "adapt_iterations" => self.adapt.iterations = p!(usize),
            "adapt_batch" => self.adapt.batch = p!(usize),
            "disc_hidden" => self.adapt.disc_hidden = p!(usize),
            "probe_hidden" => self.probe.hidden = p!(usize),
            "probe_iterations" => self.probe.iterations = p!(usize),
            "probe_lr" => self.probe.lr = p!(f64),
            "probe_batch" => self.probe.batch = p!(usize),
            "mimic_weight" => self.mimic_weight = p!(f64),
            "idt_sweep" => self.idt_sweep = parse_list(value).ok_or_else(bad)?,
            "mimic_sweep" => self.mimic_sweep = parse_list(value).ok_or_else(bad)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Every key with its resolved value; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let a = &self.adapt;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("out_dir", self.out_dir.display().to_string());
        kv("seeds", list_str(&self.seeds));
        kv("train_houses", self.train_houses.to_string());
        kv("val_houses", self.val_houses.to_string());
        kv("test_houses", self.test_houses.to_string());
        kv("episodes_per_house", self.episodes_per_house.to_string());
        kv("eval_max_steps", self.eval_max_steps.to_string());
        kv("images_per_domain", self.images_per_domain.to_string());
        kv("probe_images", self.probe_images.to_string());
        kv("baseline_steps", self.baseline_steps.to_string());
        kv("ft_steps", self.ft_steps.to_string());
        kv("mimic_steps", self.mimic_steps.to_string());
        kv("workers", t.workers.to_string());
        kv("unroll", t.unroll.to_string());
        kv("lr", format!("{:?}", t.lr));
        kv("rms_decay", format!("{:?}", t.rms_decay));
        kv("rms_eps", format!("{:?}", t.rms_eps));
        kv("gamma", format!("{:?}", t.gamma));
        kv("value_coef", format!("{:?}", t.weights.value_coef));
        kv("entropy_coef", format!("{:?}", t.weights.entropy_coef));
        kv("max_grad_norm", format!("{:?}", t.max_grad_norm));
        kv("train_max_steps", t.max_steps.to_string());
        kv("eval_every", t.eval_every.to_string());
        kv("mode", if t.mode == TrainMode::Sync { "sync" } else { "async" }.into());
        kv("exec", if t.exec == Exec::Sequential { "sequential" } else { "parallel" }.into());
        kv("idt_weight", format!("{:?}", a.idt_weight));
        kv("norm_weight", format!("{:?}", a.norm_weight));
        kv("adapt_lr", format!("{:?}", a.lr));
        kv("adapt_beta1", format!("{:?}", a.beta1));
        kv("adapt_beta2", format!("{:?}", a.beta2));
        kv("adapt_eps", format!("{:?}", a.eps));
        kv("disc_lr", format!("{:?}", a.disc_lr));
        kv("adapt_standardize", a.standardize.to_string());
        kv("adapt_iterations", a.iterations.to_string());
        kv("adapt_batch", a.batch.to_string());
        kv("disc_hidden", a.disc_hidden.to_string());
        kv("probe_hidden", self.probe.hidden.to_string());
        kv("probe_iterations", self.probe.iterations.to_string());
        kv("probe_lr", format!("{:?}", self.probe.lr));
        kv("probe_batch", self.probe.batch.to_string());
        kv("mimic_weight", format!("{:?}", self.mimic_weight));
        kv("idt_sweep", self.idt_sweep.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(","));
        kv("mimic_sweep", self.mimic_sweep.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(","));
        s
    }

    /// FNV-1a of the resolved text, excluding the output directory.
    pub fn hash(&self) -> u64 {
        let text: String = self.to_text().lines().filter(|l| !l.starts_with("out_dir")).collect();
        text.bytes().fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("no seeds".into()));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(Error::Config("duplicate seeds".into()));
        }
        if self.train_houses == 0 || self.test_houses == 0 || self.episodes_per_house == 0 || self.images_per_domain == 0 {
            return Err(Error::Config("house, episode and image counts must be positive".into()));
        }
        if self.mimic_weight < 0.0 {
            return Err(Error::Config("mimic_weight must be non-negative".into()));
        }
        self.train.validate()?;
        self.adapt.validate()?;
        SweepSpec::new(SweepParam::Idt, self.idt_sweep.clone())?;
        SweepSpec::new(SweepParam::Mimic, self.mimic_sweep.clone())?;
        Ok(())
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.out_dir.join(format!("seed{seed}"))
    }

    fn train_cfg(&self, domain: Domain, steps: u64, seed: u64, stream: u64) -> TrainConfig {
        TrainConfig {
            domain,
            steps,
            seed: mix_seed(&[seed, stream]),
            ..self.train.clone()
        }
    }
}

fn split_tag(s: Split) -> u64 {
    match s {
        Split::Train => 1,
        Split::Val => 2,
        Split::Test => 3,
    }
}

/// Paths of every artifact of one seed.
#[derive(Clone, Debug)]
pub struct SeedPaths {
    pub root: PathBuf,
}

impl SeedPaths {
    pub fn houses(&self, domain: Domain, split: Split) -> PathBuf {
        self.root.join("houses").join(format!("{domain}-{split}.bin"))
    }
    pub fn episodes(&self, domain: Domain, split: Split) -> PathBuf {
        self.root.join("episodes").join(format!("{domain}-{split}.csv"))
    }
    pub fn images(&self, domain: Domain) -> PathBuf {
        self.root.join("images").join(format!("{domain}.bin"))
    }
    pub fn model(&self, name: &str) -> PathBuf {
        self.root.join("models").join(format!("{}.ckpt", file_stem(name)))
    }
    pub fn log(&self, name: &str) -> PathBuf {
        self.root.join("logs").join(format!("{}.csv", file_stem(name)))
    }
    pub fn eval(&self, name: &str) -> PathBuf {
        self.root.join("eval").join(format!("{}.csv", file_stem(name)))
    }
    pub fn encoder(&self) -> PathBuf {
        self.root.join("models").join("fa-encoder.ckpt")
    }
    pub fn probe(&self) -> PathBuf {
        self.root.join("logs").join("probe.csv")
    }
}

/// `sim+FA+PM` -> `sim-fa-pm`
pub fn file_stem(model: &str) -> String {
    model.to_ascii_lowercase().replace('+', "-")
}

/// Writes through a temporary sibling so a half-written file never looks
/// like a finished stage.
fn atomic<F: FnOnce(&Path) -> Result<()>>(path: &Path, f: F) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    let tmp = path.with_extension("partial");
    f(&tmp)?;
    fs::rename(&tmp, path)?;
    if path.extension().is_some_and(|e| e == "ckpt") {
        fs::write(digest_path(path), format!("{:016x}\n", file_digest(path)?))?;
    }
    Ok(())
}

/// FNV-1a over a file's bytes.
pub fn file_digest(path: &Path) -> Result<u64> {
    Ok(fs::read(path)?.iter().fold(0xcbf29ce484222325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x100000001b3)))
}

/// Sidecar holding the digest a checkpoint had when its stage wrote it.
pub fn digest_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("ckpt.fnv")
}

/// Digest recorded at write time, if any.
pub fn recorded_digest(ckpt: &Path) -> Result<Option<u64>> {
    match fs::read_to_string(digest_path(ckpt)) {
        Ok(t) => u64::from_str_radix(t.trim(), 16)
            .map(Some)
            .map_err(|_| Error::Format(format!("digest sidecar of {}", ckpt.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Encoder-only checkpoint (no step counter).
pub fn save_encoder(params: &ParamSet, path: &Path) -> Result<()> {
    atomic(path, |p| Ok(checkpoint::save(&params.subset(ENCODER), p)?))
}

pub fn encoder_bytes(params: &ParamSet) -> Vec<u8> {
    checkpoint::to_bytes(&params.subset(ENCODER))
}

#[derive(Clone, Debug, Default)]
pub struct PipelineSummary {
    /// Environment steps plus adaptation iterations actually run.
    pub work: u64,
    pub reports: Vec<LabeledReport>,
    pub rows: Vec<ComparisonRow>,
}

struct Ctx<'a> {
    cfg: &'a PipelineConfig,
    arch: AgentArch,
    seed: u64,
    paths: SeedPaths,
    resume: bool,
    work: u64,
    /// Wall-clock seconds of the stages that actually ran.
    timings: Vec<(String, f64)>,
}

impl Ctx<'_> {
    fn timed(&mut self, name: &str, start: Instant) {
        self.timings.push((name.to_string(), start.elapsed().as_secs_f64()));
    }

    /// Merges this run's timings into `timings.csv`, keeping entries of
    /// stages that were skipped.
    fn write_timings(&self) -> Result<()> {
        let path = self.paths.root.join("timings.csv");
        let mut rows: Vec<(String, f64)> = match fs::read_to_string(&path) {
            Ok(t) => t.lines().skip(1).filter_map(|l| l.rsplit_once(',')).filter_map(|(k, v)| Some((k.to_string(), v.parse().ok()?))).collect(),
            Err(_) => Vec::new(),
        };
        for (k, v) in &self.timings {
            match rows.iter_mut().find(|r| &r.0 == k) {
                Some(r) => r.1 = *v,
                None => rows.push((k.clone(), *v)),
            }
        }
        let mut text = String::from("stage,seconds\n");
        for (k, v) in rows {
            writeln!(text, "{k},{v:.3}").unwrap();
        }
        write_file(path, &text)
    }

    fn done(&self, outputs: &[PathBuf]) -> bool {
        self.resume && outputs.iter().all(|p| p.exists())
    }

    fn stage<T>(&self, name: &str, r: Result<T>) -> Result<T> {
        r.map_err(|e| e.in_stage(format!("seed {} {name}", self.seed)))
    }

    fn houses(&self, domain: Domain, split: Split) -> Result<Vec<HousePlan>> {
        Ok(load_houses(self.paths.houses(domain, split))?)
    }

    fn arc_houses(&self, domain: Domain, split: Split) -> Result<Vec<Arc<HousePlan>>> {
        Ok(self.houses(domain, split)?.into_iter().map(Arc::new).collect())
    }

    fn gen_houses(&mut self) -> Result<()> {
        let t0 = Instant::now();
        let mut ran = false;
        for domain in [Domain::Synthetic, Domain::Real] {
            for (split, n) in [(Split::Train, self.cfg.train_houses), (Split::Val, self.cfg.val_houses), (Split::Test, self.cfg.test_houses)] {
                let path = self.paths.houses(domain, split);
                if self.done(&[path.clone()]) {
                    continue;
                }
                ran = true;
                let houses = house_set_with(domain, split, n, self.seed, self.cfg.train.exec)?;
                atomic(&path, |p| Ok(save_houses(&houses, p)?))?;
                if n > 0 && split != Split::Train {
                    let stream = mix_seed(&[self.seed, domain.tag() as u64, split_tag(split), 0xe915]);
                    let set = EpisodeSet::sample(&houses, self.cfg.episodes_per_house, self.cfg.eval_max_steps, stream)?;
                    atomic(&self.paths.episodes(domain, split), |p| set.save(p))?;
                }
            }
        }
        if ran {
            self.timed("gen-houses", t0);
        }
        Ok(())
    }

    fn with_validation<T>(&self, domain: Domain, f: impl FnOnce(Option<&Validation>) -> Result<T>) -> Result<T> {
        let path = self.paths.episodes(domain, Split::Val);
        if self.cfg.train.eval_every == 0 || !path.exists() {
            return f(None);
        }
        let episodes = EpisodeSet::load(&path)?;
        let houses = episodes.houses()?;
        f(Some(&Validation {
            episodes: &episodes,
            houses: &houses,
        }))
    }

    fn save_outcome(&mut self, name: &str, out: &TrainOutcome, start: u64, t0: Instant) -> Result<()> {
        self.work += out.steps - start;
        self.timed(name, t0);
        atomic(&self.paths.log(name), |p| write_file(p, &out.log.to_csv()))?;
        atomic(&self.paths.model(name), |p| save_checkpoint(&out.params, out.steps, p))
    }

    fn baseline(&mut self, name: &str, domain: Domain, stream: u64) -> Result<()> {
        if self.done(&[self.paths.model(name)]) {
            return Ok(());
        }
        let t0 = Instant::now();
        let houses = self.arc_houses(domain, Split::Train)?;
        let tc = self.cfg.train_cfg(domain, self.cfg.baseline_steps, self.seed, stream);
        let out = self.with_validation(domain, |v| train_baseline(&self.arch, &tc, &houses, v))?;
        self.save_outcome(name, &out, 0, t0)
    }

    fn finetune(&mut self) -> Result<()> {
        if self.done(&[self.paths.model("sim+FT")]) {
            return Ok(());
        }
        let t0 = Instant::now();
        let (sim, start) = load_checkpoint(self.paths.model("sim"))?;
        let houses = self.arc_houses(Domain::Real, Split::Train)?;
        let tc = self.cfg.train_cfg(Domain::Real, self.cfg.ft_steps, self.seed, 0xf7);
        let out = self.with_validation(Domain::Real, |v| finetune(sim, start, &self.arch, &tc, &houses, v))?;
        self.save_outcome("sim+FT", &out, start, t0)
    }

    fn images(&mut self) -> Result<()> {
        for domain in [Domain::Synthetic, Domain::Real] {
            let path = self.paths.images(domain);
            if self.done(&[path.clone()]) {
                continue;
            }
            let t0 = Instant::now();
            let houses = self.houses(domain, Split::Train)?;
            let stream = mix_seed(&[self.seed, domain.tag() as u64, 0x1a6e]);
            let bank = sample_from_houses(&houses, domain, self.cfg.images_per_domain, stream, self.cfg.train.exec);
            atomic(&path, |p| Ok(bank.save(p)?))?;
            self.timed(&format!("images {domain}"), t0);
        }
        Ok(())
    }

    fn adapt(&mut self) -> Result<()> {
        let enc = self.paths.encoder();
        let log = self.paths.log("adapt");
        if self.done(&[enc.clone(), log.clone()]) {
            return Ok(());
        }
        let t0 = Instant::now();
        let (sim, _) = load_checkpoint(self.paths.model("sim"))?;
        let out = run_adapt(&sim, &self.arch, &self.paths, &self.cfg.adapt, self.seed)?;
        self.work += self.cfg.adapt.iterations as u64;
        atomic(&log, |p| write_file(p, &out.log.to_csv()))?;
        save_encoder(&out.encoder, &enc)?;
        self.timed("adapt", t0);
        Ok(())
    }

    fn probe(&mut self) -> Result<()> {
        let path = self.paths.probe();
        if self.done(&[path.clone()]) || self.cfg.probe_images == 0 || self.cfg.val_houses == 0 {
            return Ok(());
        }
        let t0 = Instant::now();
        let (sim, _) = load_checkpoint(self.paths.model("sim"))?;
        let mr = checkpoint::load(self.paths.encoder())?;
        let (before, after) = probe_pair(&sim, &mr, &self.arch, self, self.cfg.probe_images)?;
        atomic(&path, |p| write_file(p, &format!("stage,accuracy\nbefore,{before}\nafter,{after}\n")))?;
        self.timed("probe", t0);
        Ok(())
    }

    fn mimic(&mut self, name: &str, encoder: &ParamSet, lambda: f64, stream: u64, out_path: &Path, log_path: &Path) -> Result<()> {
        if self.done(&[out_path.to_path_buf()]) {
            return Ok(());
        }
        let t0 = Instant::now();
        let (sim, _) = load_checkpoint(self.paths.model("sim"))?;
        let houses = self.arc_houses(Domain::Real, Split::Train)?;
        let mc = MimicConfig {
            lambda,
            train: self.cfg.train_cfg(Domain::Real, self.cfg.mimic_steps, self.seed, stream),
        };
        let before = sim.checksum();
        let out = self.with_validation(Domain::Real, |v| mimic_train(encoder, &sim, &self.arch, &houses, &mc, v))?;
        if sim.checksum() != before {
            return Err(Error::Config(format!("{name}: teacher parameters changed")));
        }
        self.work += out.steps;
        atomic(log_path, |p| write_file(p, &out.log.to_csv()))?;
        atomic(out_path, |p| save_checkpoint(&out.params, out.steps, p))?;
        self.timed(name, t0);
        Ok(())
    }

    /// Parameters evaluated under a table row name.
    fn model_params(&self, name: &str) -> Result<ParamSet> {
        match name {
            "sim+FA" => {
                let (mut p, _) = load_checkpoint(self.paths.model("sim"))?;
                p.overwrite_from(&checkpoint::load(self.paths.encoder())?)?;
                Ok(p)
            }
            _ => Ok(load_checkpoint(self.paths.model(name))?.0),
        }
    }

    fn evaluate(&mut self, name: &str, params: &ParamSet, out: &Path) -> Result<LabeledReport> {
        let set = EpisodeSet::load(self.paths.episodes(Domain::Real, Split::Test))?;
        let report = if self.done(&[out.to_path_buf()]) {
            EvalReport::from_csv(&fs::read_to_string(out)?, self.seed)?
        } else {
            let t0 = Instant::now();
            let houses = set.houses()?;
            let r = evaluate_in(params, &self.arch, &set, &houses, self.seed, self.cfg.train.exec)?;
            atomic(out, |p| write_file(p, &r.to_csv()))?;
            self.timed(&format!("eval {name}"), t0);
            r
        };
        Ok(LabeledReport {
            model: name.to_string(),
            report,
            episode_set: set.fingerprint(),
        })
    }
}

fn run_adapt(sim: &ParamSet, arch: &AgentArch, paths: &SeedPaths, cfg: &AdaptConfig, seed: u64) -> Result<crate::fadapt::AdaptOutcome> {
    let s_bank = ImageBank::load(paths.images(Domain::Synthetic))?;
    let r_bank = ImageBank::load(paths.images(Domain::Real))?;
    let ac = AdaptConfig {
        seed: mix_seed(&[seed, cfg.seed, 0xfa]),
        ..cfg.clone()
    };
    adapt(sim, arch, &s_bank, &r_bank, &ac)
}

/// Probe accuracy before (`M_s` on both domains) and after (`M_r` on real)
/// adaptation, on images from held-out validation houses.
fn probe_pair(sim: &ParamSet, mr: &ParamSet, arch: &AgentArch, ctx: &Ctx<'_>, n: usize) -> Result<(f64, f64)> {
    let stream = mix_seed(&[ctx.seed, 0x9b0e]);
    let s = sample_from_houses(&ctx.houses(Domain::Synthetic, Split::Val)?, Domain::Synthetic, n, stream, ctx.cfg.train.exec);
    let r = sample_from_houses(&ctx.houses(Domain::Real, Split::Val)?, Domain::Real, n, stream, ctx.cfg.train.exec);
    let fs = bank_features(sim, arch, ENCODER, &s)?;
    let pc = ProbeConfig {
        seed: ctx.seed,
        ..ctx.cfg.probe.clone()
    };
    let before = probe_accuracy(&fs, &bank_features(sim, arch, ENCODER, &r)?, &pc)?;
    let after = probe_accuracy(&fs, &bank_features(mr, arch, ENCODER, &r)?, &pc)?;
    Ok((before, after))
}

/// Runs every stage for every seed, then writes `aggregate.csv` and
/// `comparison.csv` at the top of the output directory.
pub fn run_pipeline(cfg: &PipelineConfig, resume: bool) -> Result<PipelineSummary> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)?;
    write_file(cfg.out_dir.join("config.resolved"), &cfg.to_text())?;
    let mut summary = PipelineSummary::default();
    for &seed in &cfg.seeds {
        let (work, reports) = run_seed(cfg, seed, resume)?;
        summary.work += work;
        summary.reports.extend(reports);
    }
    summary.rows = compare(&summary.reports)?;
    write_file(cfg.out_dir.join("aggregate.csv"), &aggregate_csv(&summary.reports))?;
    write_file(cfg.out_dir.join("comparison.csv"), &comparison_csv(&summary.rows))?;
    Ok(summary)
}

fn run_seed(cfg: &PipelineConfig, seed: u64, resume: bool) -> Result<(u64, Vec<LabeledReport>)> {
    let mut ctx = Ctx {
        cfg,
        arch: AgentArch::default(),
        seed,
        paths: SeedPaths { root: cfg.seed_dir(seed) },
        resume,
        work: 0,
        timings: Vec::new(),
    };
    write_file(ctx.paths.root.join("config.resolved"), &cfg.to_text())?;
    write_file(ctx.paths.root.join("provenance.txt"), &format!("config_hash = {:016x}\nseed = {seed}\n", cfg.hash()))?;
    let r = ctx.gen_houses();
    ctx.stage("gen-houses", r)?;
    let r = ctx.baseline("sim", Domain::Synthetic, 0x5);
    ctx.stage("train sim", r)?;
    let r = ctx.baseline("real", Domain::Real, 0x7);
    ctx.stage("train real", r)?;
    let r = ctx.finetune();
    ctx.stage("finetune", r)?;
    let r = ctx.images();
    ctx.stage("sample-images", r)?;
    let r = ctx.adapt();
    ctx.stage("adapt", r)?;
    let r = ctx.probe();
    ctx.stage("probe", r)?;

    let r = checkpoint::load(ctx.paths.encoder()).map_err(Error::from);
    let mr = ctx.stage("mimic", r)?;
    let (p, l) = (ctx.paths.model("sim+FA+PM"), ctx.paths.log("sim+FA+PM"));
    let r = ctx.mimic("sim+FA+PM", &mr, cfg.mimic_weight, 0x9a, &p, &l);
    ctx.stage("mimic", r)?;
    // sim+PM: the student keeps an unadapted copy of M_s
    let r = load_checkpoint(ctx.paths.model("sim")).map(|(s, _)| s.subset(ENCODER));
    let ms = ctx.stage("mimic sim+PM", r)?;
    let (p, l) = (ctx.paths.model("sim+PM"), ctx.paths.log("sim+PM"));
    let r = ctx.mimic("sim+PM", &ms, cfg.mimic_weight, 0x9a, &p, &l);
    ctx.stage("mimic sim+PM", r)?;

    let mut reports = Vec::new();
    for m in MODELS {
        let r = ctx.model_params(m).and_then(|params| {
            let out = ctx.paths.eval(m);
            ctx.evaluate(m, &params, &out)
        });
        reports.push(ctx.stage(&format!("eval {m}"), r)?);
    }
    if !ctx.timings.is_empty() {
        ctx.write_timings()?;
    }
    Ok((ctx.work, reports))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Idt,
    Mimic,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "idt" | "idt_weight" => Ok(SweepParam::Idt),
            "mimic" | "mimic_weight" => Ok(SweepParam::Mimic),
            _ => Err(Error::Config(format!("unknown sweep parameter `{s}`"))),
        }
    }
}

impl std::fmt::Display for SweepParam {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepParam::Idt => "idt_weight",
            SweepParam::Mimic => "mimic_weight",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

impl SweepSpec {
    pub fn new(param: SweepParam, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config(format!("{param} sweep values must be non-negative")));
        }
        for (i, a) in values.iter().enumerate() {
            if values[..i].contains(a) {
                return Err(Error::Config(format!("{param} sweep value {a} repeated")));
            }
        }
        Ok(Self { param, values })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub seed: u64,
    pub success_rate: f64,
    pub spl: f64,
}

#[derive(Clone, Debug, Default)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub work: u64,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("param_value,seed,success_rate,spl\n");
        for r in &self.rows {
            writeln!(s, "{:?},{},{},{}", r.value, r.seed, r.success_rate, r.spl).unwrap();
        }
        s
    }

    /// `(value, success mean, success std, spl mean, spl std)` in sweep order.
    pub fn summary(&self) -> Vec<(f64, f64, f64, f64, f64)> {
        let mut values: Vec<f64> = Vec::new();
        for r in &self.rows {
            if !values.contains(&r.value) {
                values.push(r.value);
            }
        }
        values
            .into_iter()
            .map(|v| {
                let sr: Vec<f64> = self.rows.iter().filter(|r| r.value == v).map(|r| r.success_rate).collect();
                let spl: Vec<f64> = self.rows.iter().filter(|r| r.value == v).map(|r| r.spl).collect();
                let (a, b) = crate::evalkit::mean_std(&sr);
                let (c, d) = crate::evalkit::mean_std(&spl);
                (v, a, b, c, d)
            })
            .collect()
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("param_value,success_mean,success_std,spl_mean,spl_std\n");
        for (v, a, b, c, d) in self.summary() {
            writeln!(s, "{v:?},{a:.4},{b:.4},{c:.4},{d:.4}").unwrap();
        }
        s
    }
}

/// Varies one parameter on top of the base pipeline's artifacts. The idt
/// sweep evaluates `sim+FA`, the mimic sweep `sim+FA+PM`; the base value
/// reuses the pipeline's own evaluation.
pub fn sweep(cfg: &PipelineConfig, spec: &SweepSpec, resume: bool) -> Result<SweepResult> {
    cfg.validate()?;
    let mut result = SweepResult::default();
    let name = match spec.param {
        SweepParam::Idt => "idt",
        SweepParam::Mimic => "mimic",
    };
    for &seed in &cfg.seeds {
        let mut ctx = Ctx {
            cfg,
            arch: AgentArch::default(),
            seed,
            paths: SeedPaths { root: cfg.seed_dir(seed) },
            resume: true,
            work: 0,
            timings: Vec::new(),
        };
        for need in [ctx.paths.model("sim"), ctx.paths.encoder(), ctx.paths.episodes(Domain::Real, Split::Test)] {
            if !need.exists() {
                return Err(Error::Config(format!("missing base artifact {}", need.display())).in_stage(format!("seed {seed} sweep {name}")));
            }
        }
        for &v in &spec.values {
            let dir = ctx.paths.root.join("sweeps").join(name).join(format!("{v:?}"));
            let r = (|| -> Result<LabeledReport> {
                match spec.param {
                    SweepParam::Idt if v == cfg.adapt.idt_weight => {
                        let p = ctx.model_params("sim+FA")?;
                        let out = ctx.paths.eval("sim+FA");
                        ctx.evaluate("sim+FA", &p, &out)
                    }
                    SweepParam::Idt => {
                        let enc = dir.join("encoder.ckpt");
                        if !(resume && enc.exists()) {
                            let (sim, _) = load_checkpoint(ctx.paths.model("sim"))?;
                            let ac = AdaptConfig {
                                idt_weight: v,
                                ..cfg.adapt.clone()
                            };
                            let out = run_adapt(&sim, &ctx.arch, &ctx.paths, &ac, seed)?;
                            ctx.work += ac.iterations as u64;
                            atomic(&dir.join("adapt.csv"), |p| write_file(p, &out.log.to_csv()))?;
                            save_encoder(&out.encoder, &enc)?;
                        }
                        let (mut p, _) = load_checkpoint(ctx.paths.model("sim"))?;
                        p.overwrite_from(&checkpoint::load(&enc)?)?;
                        ctx.resume = resume;
                        let r = ctx.evaluate("sim+FA", &p, &dir.join("eval.csv"));
                        ctx.resume = true;
                        r
                    }
                    SweepParam::Mimic if v == cfg.mimic_weight => {
                        let p = ctx.model_params("sim+FA+PM")?;
                        let out = ctx.paths.eval("sim+FA+PM");
                        ctx.evaluate("sim+FA+PM", &p, &out)
                    }
                    SweepParam::Mimic => {
                        let mr = checkpoint::load(ctx.paths.encoder())?;
                        let model = dir.join("model.ckpt");
                        ctx.resume = resume;
                        ctx.mimic("sim+FA+PM", &mr, v, 0x9a, &model, &dir.join("train.csv"))?;
                        let (p, _) = load_checkpoint(&model)?;
                        let r = ctx.evaluate("sim+FA+PM", &p, &dir.join("eval.csv"));
                        ctx.resume = true;
                        r
                    }
                }
            })();
            let rep = ctx.stage(&format!("sweep {name}={v:?}"), r)?;
            result.rows.push(SweepRow {
                value: v,
                seed,
                success_rate: rep.report.success_rate(),
                spl: rep.report.spl(),
            });
        }
        result.work += ctx.work;
    }
    let dir = cfg.out_dir.join("sweeps");
    write_file(dir.join(format!("{name}.csv")), &result.to_csv())?;
    write_file(dir.join(format!("{name}-summary.csv")), &result.summary_csv())?;
    Ok(result)
}
