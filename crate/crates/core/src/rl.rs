//! Actor-critic training over parallel environment workers.
//!
//! The default mode is synchronous: every worker plays one unroll with the
//! same parameter snapshot, the per-worker losses are averaged into a single
//! gradient and the coordinator alone applies it. The asynchronous mode
//! gives each worker its own thread and applies gradients under a lock as
//! they arrive; it is not bitwise reproducible.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::{Arc, Mutex};

use indoorworld::{sample_episode, Action, Domain, Episode, HousePlan, Image};
use nncore::{checkpoint, Exec, Gradients, Graph, OptimState, ParamSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::{a3c_loss_on, act_on_images, image_batch, unroll, AgentArch, LossWeights, StepRecord, Trajectory, ENCODER};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate_in, EpisodeSet};
use crate::mix_seed;
use crate::pmimic::mimic_loss;

/// Name under which the environment-step counter is stored in checkpoints.
pub const STEP_COUNTER: &str = "meta.env_steps";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    Sync,
    Async,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub domain: Domain,
    /// Environment steps to run (summed over workers).
    pub steps: u64,
    pub workers: usize,
    pub unroll: usize,
    pub lr: f64,
    pub rms_decay: f64,
    pub rms_eps: f64,
    pub gamma: f64,
    pub weights: LossWeights,
    pub max_grad_norm: f64,
    /// Episode step cap during training.
    pub max_steps: usize,
    pub seed: u64,
    /// Validation cadence in environment steps; 0 evaluates only at the end.
    pub eval_every: u64,
    pub mode: TrainMode,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            domain: Domain::Synthetic,
            steps: 200_000,
            workers: 4,
            unroll: 20,
            lr: 7e-4,
            rms_decay: 0.99,
            rms_eps: 1e-5,
            gamma: 0.99,
            weights: LossWeights::default(),
            max_grad_norm: 40.0,
            max_steps: indoorworld::DEFAULT_MAX_STEPS,
            seed: 0,
            eval_every: 50_000,
            mode: TrainMode::Sync,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 || self.unroll == 0 || self.max_steps == 0 {
            return Err(Error::Config("workers, unroll and max_steps must be positive".into()));
        }
        if !(self.lr > 0.0 && self.gamma >= 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("lr {} gamma {}", self.lr, self.gamma)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub steps: u64,
    pub mean_reward: f64,
    pub success_rate: f64,
    pub spl: f64,
    pub l_mimic: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mimic = self.records.iter().any(|r| r.l_mimic.is_some());
        let mut s = String::from("steps,mean_reward,success_rate,spl");
        s.push_str(if mimic { ",l_mimic\n" } else { "\n" });
        for r in &self.records {
            write!(s, "{},{:.6},{:.4},{:.4}", r.steps, r.mean_reward, r.success_rate, r.spl).unwrap();
            if mimic {
                write!(s, ",{:.6}", r.l_mimic.unwrap_or(f64::NAN)).unwrap();
            }
            s.push('\n');
        }
        s
    }
}

/// Teacher distillation added to the actor-critic loss.
#[derive(Clone, Copy, Debug)]
pub struct Distill<'a> {
    /// Full teacher model (`M.`, `G.`, `R.`, `P.`, `V.`).
    pub teacher: &'a ParamSet,
    pub weight: f64,
}

/// Houses and fixed episodes used for validation during training.
pub struct Validation<'a> {
    pub episodes: &'a EpisodeSet,
    pub houses: &'a HashMap<(Domain, u64), Arc<HousePlan>>,
}

pub struct TrainOutcome {
    pub params: ParamSet,
    /// Environment-step counter after training (continues the input's).
    pub steps: u64,
    pub log: TrainLog,
}

pub fn save_checkpoint(params: &ParamSet, steps: u64, path: impl AsRef<Path>) -> Result<()> {
    let mut p = params.clone();
    p.set(STEP_COUNTER, Tensor::vector(vec![steps as f32]))?;
    checkpoint::save(&p, path)?;
    Ok(())
}

/// Loads a checkpoint and splits off its step counter (0 when absent).
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ParamSet, u64)> {
    let mut p = checkpoint::load(path)?;
    let steps = p.value(STEP_COUNTER).map(|t| t.data()[0] as u64).unwrap_or(0);
    p.remove_prefix("meta.");
    Ok((p, steps))
}

struct Worker {
    rng: ChaCha8Rng,
    episode: Episode,
    hidden: Vec<f32>,
    teacher_hidden: Vec<f32>,
    reward: f64,
}

impl Worker {
    fn new(id: usize, seed: u64, houses: &[Arc<HousePlan>], cfg: &TrainConfig, arch: &AgentArch) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x3a11, id as u64]));
        let episode = new_episode(&mut rng, houses, cfg.max_steps)?;
        Ok(Self {
            rng,
            episode,
            hidden: vec![0.0; arch.hidden],
            teacher_hidden: vec![0.0; arch.hidden],
            reward: 0.0,
        })
    }
}

fn new_episode(rng: &mut ChaCha8Rng, houses: &[Arc<HousePlan>], max_steps: usize) -> Result<Episode> {
    let house = &houses[rng.gen_range(0..houses.len())];
    let spec = sample_episode(house, max_steps, rng)?;
    Ok(Episode::new(house.clone(), &spec)?)
}

fn sample_action(rng: &mut ChaCha8Rng, probs: &[f32]) -> usize {
    let u: f32 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn stack(rows: impl Iterator<Item = Vec<f32>>, w: usize, d: usize) -> Tensor {
    Tensor::new(vec![w, d], rows.flatten().collect()).expect("stacked rows")
}

#[derive(Default)]
struct EpisodeStats {
    rewards: Vec<f64>,
}

/// Plays `t_len` steps in every worker with a fixed parameter snapshot.
#[allow(clippy::too_many_arguments)]
fn collect(
    params: &ParamSet,
    arch: &AgentArch,
    cfg: &TrainConfig,
    workers: &mut [Worker],
    houses: &[Arc<HousePlan>],
    distill: Option<&Distill>,
    t_len: usize,
    stats: &mut EpisodeStats,
) -> Result<Trajectory> {
    let w = workers.len();
    let hd = arch.hidden;
    let h0 = stack(workers.iter().map(|k| k.hidden.clone()), w, hd);
    let mut steps = Vec::with_capacity(t_len);
    let mut h = h0.clone();
    let mut th = distill.map(|_| stack(workers.iter().map(|k| k.teacher_hidden.clone()), w, hd));
    for _ in 0..t_len {
        let obs: Vec<Image> = cfg.exec.map_mut(workers, |_, k| k.episode.observe().image);
        let refs: Vec<&Image> = obs.iter().collect();
        let images = image_batch(&refs);
        let goals: Vec<usize> = workers.iter().map(|k| k.episode.goal.index()).collect();
        let out = act_on_images(params, arch, ENCODER, &images, &goals, &h)?;
        let teacher_probs = match (distill, th.as_mut()) {
            (Some(d), Some(th)) => {
                let t = act_on_images(d.teacher, arch, ENCODER, &images, &goals, th)?;
                *th = t.hidden;
                Some(t.probs)
            }
            _ => None,
        };
        let actions: Vec<usize> = workers
            .iter_mut()
            .enumerate()
            .map(|(i, k)| sample_action(&mut k.rng, out.probs.row(i)))
            .collect();
        let results: Vec<Result<(f32, bool, Option<f64>)>> = cfg.exec.map_mut(workers, |i, k| {
            let (r, done) = k.episode.step(Action::from_index(actions[i]).expect("action index"));
            k.reward += r;
            let mut finished = None;
            if done {
                finished = Some(k.reward);
                k.reward = 0.0;
                k.episode = new_episode(&mut k.rng, houses, cfg.max_steps)?;
            }
            Ok((r as f32, done, finished))
        });
        let mut rewards = Vec::with_capacity(w);
        let mut dones = Vec::with_capacity(w);
        for r in results {
            let (r, d, fin) = r?;
            rewards.push(r);
            dones.push(d);
            stats.rewards.extend(fin);
        }
        h = mask_rows(out.hidden, &dones);
        if let Some(th) = th.as_mut() {
            *th = mask_rows(th.clone(), &dones);
        }
        steps.push(StepRecord {
            images,
            goals,
            actions,
            rewards,
            dones,
            probs: out.probs,
            values: out.values,
            teacher_probs,
        });
    }
    for (i, k) in workers.iter_mut().enumerate() {
        k.hidden = h.row(i).to_vec();
        if let Some(th) = &th {
            k.teacher_hidden = th.row(i).to_vec();
        }
    }
    let obs: Vec<Image> = workers.iter().map(|k| k.episode.observe().image).collect();
    let refs: Vec<&Image> = obs.iter().collect();
    let goals: Vec<usize> = workers.iter().map(|k| k.episode.goal.index()).collect();
    let boot = act_on_images(params, arch, ENCODER, &image_batch(&refs), &goals, &h)?;
    Ok(Trajectory {
        h0,
        steps,
        bootstrap: boot.values,
        gamma: cfg.gamma,
    })
}

fn mask_rows(mut t: Tensor, dones: &[bool]) -> Tensor {
    let (_, d) = t.as_matrix_dims();
    for (i, &done) in dones.iter().enumerate() {
        if done {
            t.data_mut()[i * d..(i + 1) * d].fill(0.0);
        }
    }
    t
}

struct UpdateOut {
    grads: Gradients,
    loss: f64,
    mimic: Option<f64>,
}

fn compute_update(params: &ParamSet, arch: &AgentArch, traj: &Trajectory, weights: LossWeights, distill: Option<&Distill>) -> Result<UpdateOut> {
    let mut g = Graph::new(params);
    let un = unroll(&mut g, arch, ENCODER, traj)?;
    let mut loss = a3c_loss_on(&mut g, &un, traj, weights)?;
    let mut mimic = None;
    if let Some(d) = distill {
        let mut terms = Vec::with_capacity(traj.steps.len());
        for (t, s) in traj.steps.iter().enumerate() {
            let tp = s.teacher_probs.as_ref().expect("teacher probabilities recorded");
            terms.push(mimic_loss(&mut g, tp, un.logits[t])?);
        }
        let total = g.add_all(&terms)?;
        mimic = Some(g.item(total) as f64 / traj.steps.len() as f64);
        let weighted = g.scale(total, d.weight);
        // a zero weight keeps the actor-critic loss bit-identical
        if d.weight != 0.0 {
            loss = g.add(loss, weighted)?;
        }
    }
    let value = g.item(loss) as f64;
    if !value.is_finite() {
        return Err(Error::Diverged {
            at: "actor-critic update".into(),
            detail: format!("loss {value}"),
        });
    }
    Ok(UpdateOut {
        grads: g.backward(loss)?,
        loss: value,
        mimic,
    })
}

fn apply(params: &mut ParamSet, optim: &mut OptimState, grads: &Gradients, max_norm: f64) -> Result<()> {
    params.zero_grads();
    params.accumulate(grads)?;
    if max_norm > 0.0 {
        params.clip_grad_norm(max_norm as f32);
    }
    optim.step(params)?;
    if !params.all_finite() {
        return Err(Error::Diverged {
            at: "parameter update".into(),
            detail: "non-finite parameter".into(),
        });
    }
    Ok(())
}

fn validate_now(params: &ParamSet, arch: &AgentArch, val: Option<&Validation>, cfg: &TrainConfig) -> Result<(f64, f64)> {
    match val {
        Some(v) => {
            let r = evaluate_in(params, arch, v.episodes, v.houses, cfg.seed, cfg.exec)?;
            Ok((r.success_rate(), r.spl()))
        }
        None => Ok((f64::NAN, f64::NAN)),
    }
}

/// Runs actor-critic training from `params` for `cfg.steps` environment steps.
///
/// Only parameters that are trainable in `params` change. With `distill`
/// the teacher's cross-entropy is added with its weight.
pub fn train(
    mut params: ParamSet,
    start_steps: u64,
    arch: &AgentArch,
    cfg: &TrainConfig,
    houses: &[Arc<HousePlan>],
    val: Option<&Validation>,
    distill: Option<Distill>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.steps == 0 {
        return Ok(TrainOutcome {
            params,
            steps: start_steps,
            log: TrainLog::default(),
        });
    }
    if houses.is_empty() {
        return Err(Error::Config("no training houses".into()));
    }
    match cfg.mode {
        TrainMode::Sync => train_sync(&mut params, start_steps, arch, cfg, houses, val, distill.as_ref()),
        TrainMode::Async => train_async(&mut params, start_steps, arch, cfg, houses, val, distill.as_ref()),
    }
    .map(|(steps, log)| TrainOutcome { params, steps, log })
}

fn train_sync(
    params: &mut ParamSet,
    start_steps: u64,
    arch: &AgentArch,
    cfg: &TrainConfig,
    houses: &[Arc<HousePlan>],
    val: Option<&Validation>,
    distill: Option<&Distill>,
) -> Result<(u64, TrainLog)> {
    let mut workers = (0..cfg.workers)
        .map(|i| Worker::new(i, cfg.seed, houses, cfg, arch))
        .collect::<Result<Vec<_>>>()?;
    let mut optim = OptimState::new(
        nncore::Algorithm::RmsProp {
            decay: cfg.rms_decay,
            eps: cfg.rms_eps,
        },
        cfg.lr,
        params,
    );
    let mut log = TrainLog::default();
    let mut stats = EpisodeStats::default();
    let mut mimic_acc = (0.0, 0usize);
    let mut done: u64 = 0;
    let mut next_eval = if cfg.eval_every > 0 { cfg.eval_every } else { u64::MAX };
    let w = cfg.workers as u64;
    while done < cfg.steps {
        let t_len = ((cfg.steps - done).div_ceil(w) as usize).min(cfg.unroll);
        let traj = collect(params, arch, cfg, &mut workers, houses, distill, t_len, &mut stats)?;
        let up = compute_update(params, arch, &traj, cfg.weights, distill).map_err(|e| match e {
            Error::Diverged { detail, .. } => Error::Diverged {
                at: format!("step {}", start_steps + done),
                detail,
            },
            e => e,
        })?;
        let _ = up.loss;
        if let Some(m) = up.mimic {
            mimic_acc.0 += m;
            mimic_acc.1 += 1;
        }
        apply(params, &mut optim, &up.grads, cfg.max_grad_norm)?;
        done += t_len as u64 * w;
        if done >= next_eval || done >= cfg.steps {
            let (sr, spl) = validate_now(params, arch, val, cfg)?;
            log.records.push(LogRecord {
                steps: start_steps + done,
                mean_reward: mean_or_zero(&stats.rewards),
                success_rate: sr,
                spl,
                l_mimic: distill.map(|_| if mimic_acc.1 > 0 { mimic_acc.0 / mimic_acc.1 as f64 } else { 0.0 }),
            });
            stats.rewards.clear();
            mimic_acc = (0.0, 0);
            while next_eval <= done {
                next_eval = next_eval.saturating_add(cfg.eval_every.max(1));
            }
        }
    }
    Ok((start_steps + done, log))
}

fn mean_or_zero(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

struct Shared {
    params: ParamSet,
    optim: OptimState,
    done: u64,
    next_eval: u64,
}

fn train_async(
    params: &mut ParamSet,
    start_steps: u64,
    arch: &AgentArch,
    cfg: &TrainConfig,
    houses: &[Arc<HousePlan>],
    val: Option<&Validation>,
    distill: Option<&Distill>,
) -> Result<(u64, TrainLog)> {
    let optim = OptimState::new(
        nncore::Algorithm::RmsProp {
            decay: cfg.rms_decay,
            eps: cfg.rms_eps,
        },
        cfg.lr,
        params,
    );
    let shared = Mutex::new(Shared {
        params: params.clone(),
        optim,
        done: 0,
        next_eval: if cfg.eval_every > 0 { cfg.eval_every } else { u64::MAX },
    });
    let log = Mutex::new((TrainLog::default(), EpisodeStats::default()));
    let thread_cfg = TrainConfig {
        exec: Exec::Sequential,
        ..cfg.clone()
    };
    let results: Vec<Result<()>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..cfg.workers)
            .map(|id| {
                let (shared, log, cfg) = (&shared, &log, &thread_cfg);
                s.spawn(move || -> Result<()> {
                    let mut me = [Worker::new(id, cfg.seed, houses, cfg, arch)?];
                    loop {
                        let snapshot = {
                            let sh = shared.lock().expect("trainer lock");
                            if sh.done >= cfg.steps {
                                return Ok(());
                            }
                            sh.params.clone()
                        };
                        let mut stats = EpisodeStats::default();
                        let traj = collect(&snapshot, arch, cfg, &mut me, houses, distill, cfg.unroll, &mut stats)?;
                        let up = compute_update(&snapshot, arch, &traj, cfg.weights, distill)?;
                        let eval_params = {
                            let mut sh = shared.lock().expect("trainer lock");
                            let Shared { params, optim, .. } = &mut *sh;
                            apply(params, optim, &up.grads, cfg.max_grad_norm)?;
                            sh.done += cfg.unroll as u64;
                            let finished = sh.done >= cfg.steps;
                            if sh.done >= sh.next_eval || finished {
                                while sh.next_eval <= sh.done {
                                    sh.next_eval = sh.next_eval.saturating_add(cfg.eval_every.max(1));
                                }
                                Some((sh.params.clone(), sh.done))
                            } else {
                                None
                            }
                        };
                        let mut lg = log.lock().expect("log lock");
                        lg.1.rewards.extend(stats.rewards);
                        if let Some((p, at)) = eval_params {
                            let (sr, spl) = validate_now(&p, arch, val, cfg)?;
                            let mean_reward = mean_or_zero(&lg.1.rewards);
                            lg.1.rewards.clear();
                            lg.0.records.push(LogRecord {
                                steps: start_steps + at,
                                mean_reward,
                                success_rate: sr,
                                spl,
                                l_mimic: up.mimic,
                            });
                        }
                    }
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker thread")).collect()
    });
    for r in results {
        r?;
    }
    let sh = shared.into_inner().expect("trainer lock");
    *params = sh.params;
    let (mut log, _) = log.into_inner().expect("log lock");
    log.records.sort_by_key(|r| r.steps);
    Ok((start_steps + sh.done, log))
}

/// Fresh model trained from scratch in `cfg.domain`.
pub fn train_baseline(arch: &AgentArch, cfg: &TrainConfig, houses: &[Arc<HousePlan>], val: Option<&Validation>) -> Result<TrainOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0x1417]));
    let params = arch.init_params(&mut rng)?;
    train(params, 0, arch, cfg, houses, val, None)
}

/// Continues training every parameter of a source model on new houses.
pub fn finetune(
    mut params: ParamSet,
    start_steps: u64,
    arch: &AgentArch,
    cfg: &TrainConfig,
    houses: &[Arc<HousePlan>],
    val: Option<&Validation>,
) -> Result<TrainOutcome> {
    params.set_all_trainable(true);
    train(params, start_steps, arch, cfg, houses, val, None)
}
