//! Shared fixtures for the gradient and acceptance suites.
#![allow(dead_code)]

use jrt::agent::{self, AgentArch, LossWeights, StepRecord, Trajectory, ENCODER};
use jrt::fadapt::{self, DISC, SOURCE};
use jrt::pmimic::mimic_loss;
use nncore::{grad_check, Graph, LossBuilder, ParamSet, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_EPS: f64 = 1e-4;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn row_probs(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = rand_tensor(rng, vec![rows, cols], 0.05, 1.0);
    for r in 0..rows {
        let s: f32 = t.row(r).iter().sum();
        for c in 0..cols {
            t.data_mut()[r * cols + c] /= s;
        }
    }
    t
}

/// A random `steps x rows` trajectory with one episode ending mid-unroll.
pub fn random_traj(arch: &AgentArch, rows: usize, steps: usize, teacher: bool, rng: &mut ChaCha8Rng) -> Trajectory {
    let s = arch.image_size;
    let records = (0..steps)
        .map(|t| StepRecord {
            images: rand_tensor(rng, vec![rows, arch.channels, s, s], 0.0, 1.0),
            goals: (0..rows).map(|_| rng.gen_range(0..arch.num_goals)).collect(),
            actions: (0..rows).map(|_| rng.gen_range(0..arch.actions)).collect(),
            rewards: (0..rows).map(|_| rng.gen_range(-0.3..1.2)).collect(),
            dones: (0..rows).map(|i| i == 0 && t == steps / 2).collect(),
            probs: row_probs(rng, rows, arch.actions),
            values: vec![0.0; rows],
            teacher_probs: teacher.then(|| row_probs(rng, rows, arch.actions)),
        })
        .collect();
    Trajectory {
        h0: rand_tensor(rng, vec![rows, arch.hidden], -0.5, 0.5),
        steps: records,
        bootstrap: (0..rows).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        gamma: 0.9,
    }
}

/// Agent parameters with a random (non-zero) goal embedding and biases.
pub fn agent_params(arch: &AgentArch, rng: &mut ChaCha8Rng) -> ParamSet {
    let mut p = arch.init_params(rng).unwrap();
    let names: Vec<String> = p.names().map(String::from).collect();
    for n in names {
        for v in p.get_mut(&n).unwrap().value.data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    p
}

/// Weighted sum of a var so every output element carries gradient.
fn project<T: Scalar>(g: &mut Graph<'_, T>, x: Var, seed: u64) -> nncore::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(x).to_vec();
    let c = Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-1.0..1.0)));
    let y = g.mul_const(x, c)?;
    Ok(g.sum(y))
}

pub struct EncoderLoss<'a> {
    pub arch: &'a AgentArch,
    pub images: Tensor,
}

impl LossBuilder for EncoderLoss<'_> {
    fn build<T: Scalar>(&self, g: &mut Graph<'_, T>) -> nncore::Result<Var> {
        let f = agent::encode_input(g, self.arch, ENCODER, &self.images)?;
        project(g, f, 1)
    }
}

pub struct UnrollLoss<'a> {
    pub arch: &'a AgentArch,
    pub traj: &'a Trajectory,
}

impl LossBuilder for UnrollLoss<'_> {
    fn build<T: Scalar>(&self, g: &mut Graph<'_, T>) -> nncore::Result<Var> {
        let un = agent::unroll(g, self.arch, ENCODER, self.traj)?;
        let mut terms = Vec::new();
        for (t, (&l, &v)) in un.logits.iter().zip(&un.values).enumerate() {
            terms.push(project(g, l, 10 + t as u64)?);
            terms.push(project(g, v, 100 + t as u64)?);
        }
        g.add_all(&terms)
    }
}

/// A3C surrogate with advantages frozen at the base parameters.
pub struct A3cLoss<'a> {
    pub arch: &'a AgentArch,
    pub traj: &'a Trajectory,
    pub adv: Vec<Vec<f64>>,
}

impl<'a> A3cLoss<'a> {
    pub fn new(arch: &'a AgentArch, traj: &'a Trajectory, params: &ParamSet) -> Self {
        let p64: ParamSet<f64> = params.cast();
        let mut g = Graph::inference(&p64);
        let un = agent::unroll(&mut g, arch, ENCODER, traj).unwrap();
        let adv = agent::advantages(&g, &un, traj);
        Self { arch, traj, adv }
    }
}

impl LossBuilder for A3cLoss<'_> {
    fn build<T: Scalar>(&self, g: &mut Graph<'_, T>) -> nncore::Result<Var> {
        let un = agent::unroll(g, self.arch, ENCODER, self.traj)?;
        agent::a3c_loss_with(g, &un, self.traj, LossWeights::default(), &self.adv)
    }
}

pub struct MimicLoss<'a> {
    pub arch: &'a AgentArch,
    pub traj: &'a Trajectory,
}

impl LossBuilder for MimicLoss<'_> {
    fn build<T: Scalar>(&self, g: &mut Graph<'_, T>) -> nncore::Result<Var> {
        let un = agent::unroll(g, self.arch, ENCODER, self.traj)?;
        let mut terms = Vec::new();
        for (s, &l) in self.traj.steps.iter().zip(&un.logits) {
            let p = s.teacher_probs.as_ref().expect("teacher labels").cast();
            terms.push(mimic_loss(g, &p, l)?);
        }
        g.add_all(&terms)
    }
}

#[derive(Clone, Copy)]
pub enum FaTerm {
    Cls,
    Adv,
    Idt,
}

/// Adaptation losses over a source encoder `Ms.`, target encoder `M.` and
/// discriminator `D.`; trainable flags on the parameter set pick the side.
pub struct FaLoss<'a> {
    pub arch: &'a AgentArch,
    pub term: FaTerm,
    pub sim: Tensor,
    pub real: Tensor,
}

impl LossBuilder for FaLoss<'_> {
    fn build<T: Scalar>(&self, g: &mut Graph<'_, T>) -> nncore::Result<Var> {
        match self.term {
            FaTerm::Cls => {
                let fs = agent::encode_input(g, self.arch, SOURCE, &self.sim)?;
                let fr = agent::encode_input(g, self.arch, ENCODER, &self.real)?;
                let ds = fadapt::discriminator(g, DISC, fs)?;
                let dr = fadapt::discriminator(g, DISC, fr)?;
                Ok(fadapt::cls_loss(g, ds, dr))
            }
            FaTerm::Adv => {
                let fr = agent::encode_input(g, self.arch, ENCODER, &self.real)?;
                let dr = fadapt::discriminator(g, DISC, fr)?;
                Ok(fadapt::adv_loss(g, dr))
            }
            FaTerm::Idt => {
                let fs = agent::encode_input(g, self.arch, SOURCE, &self.sim)?;
                let ft = agent::encode_input(g, self.arch, ENCODER, &self.sim)?;
                fadapt::identity_loss(g, fs, ft)
            }
        }
    }
}

/// `Ms.` + `M.` (independently initialised) + `D.`, with only the named
/// prefixes trainable.
pub fn fa_params(arch: &AgentArch, trainable: &[&str], rng: &mut ChaCha8Rng) -> ParamSet {
    let mut p = arch.init_encoder(SOURCE, rng).unwrap();
    p.overwrite_from(&arch.init_encoder(ENCODER, rng).unwrap()).unwrap();
    p.overwrite_from(&fadapt::init_discriminator(arch.feature_dim, 4, rng).unwrap()).unwrap();
    p.set_all_trainable(false);
    for t in trainable {
        p.set_trainable_prefix(t, true);
    }
    p
}

/// Runs every loss of the gradient suite; returns `(name, max_rel_error)`.
pub fn gradient_suite(seed: u64) -> Vec<(&'static str, f64)> {
    let arch = AgentArch::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = arch.image_size;
    let mut out = Vec::new();
    let mut run = |name, params: &ParamSet, loss: &dyn Fn(&ParamSet) -> f64| out.push((name, loss(params)));

    let p = agent_params(&arch, &mut rng);
    let images = rand_tensor(&mut rng, vec![3, arch.channels, s, s], 0.0, 1.0);
    let enc = p.subset(ENCODER);
    run("encoder", &enc, &|p| check(p, &EncoderLoss { arch: &arch, images: images.clone() }));

    let traj = random_traj(&arch, 2, 5, true, &mut rng);
    run("unroll (5 steps)", &p, &|p| check(p, &UnrollLoss { arch: &arch, traj: &traj }));
    run("a3c_loss", &p, &|p| check(p, &A3cLoss::new(&arch, &traj, p)));
    let mut student = p.clone();
    student.set_trainable_prefix(ENCODER, false);
    run("mimic_loss", &student, &|p| check(p, &MimicLoss { arch: &arch, traj: &traj }));

    let sim = rand_tensor(&mut rng, vec![4, arch.channels, s, s], 0.0, 1.0);
    let real = rand_tensor(&mut rng, vec![4, arch.channels, s, s], 0.0, 1.0);
    let fa = |term| FaLoss { arch: &arch, term, sim: sim.clone(), real: real.clone() };
    let pd = fa_params(&arch, &[DISC], &mut rng);
    run("L_cls (D)", &pd, &|p| check(p, &fa(FaTerm::Cls)));
    let pm = fa_params(&arch, &[ENCODER], &mut rng);
    run("L_adv (M_r)", &pm, &|p| check(p, &fa(FaTerm::Adv)));
    run("L_idt (M_r)", &pm, &|p| check(p, &fa(FaTerm::Idt)));
    out
}

fn check(p: &ParamSet, loss: &impl LossBuilder) -> f64 {
    let r = grad_check(p, loss, GRAD_EPS).unwrap();
    assert!(r.checked_elements > 0);
    r.max_rel_error
}

/// `n` reports with random `(S_i, p_i, l_i)`; returns the number of reports
/// with SPL above the success rate and the largest deviation of SPL from a
/// direct evaluation of its formula.
pub fn metric_identities(n: usize, seed: u64) -> (usize, f64) {
    use jrt::evalkit::{EpisodeRecord, EvalReport};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut above = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let k = rng.gen_range(1..60);
        let episodes: Vec<EpisodeRecord> = (0..k)
            .map(|i| EpisodeRecord {
                episode_id: i,
                success: rng.gen_bool(0.5),
                // path lengths can be shorter than l_i (a lucky cut through a door cell)
                path_len: rng.gen_range(0.0..30.0),
                shortest_len: rng.gen_range(0.5..20.0),
                steps: rng.gen_range(1..500),
            })
            .collect();
        let r = EvalReport { episodes, seed: 0 };
        let direct: f64 = r
            .episodes
            .iter()
            .map(|e| if e.success { e.shortest_len / e.path_len.max(e.shortest_len) } else { 0.0 })
            .sum::<f64>()
            / k as f64
            * 100.0;
        if r.spl() > r.success_rate() + 1e-12 {
            above += 1;
        }
        worst = worst.max((r.spl() - direct).abs() / 100.0);
    }
    (above, worst)
}

/// A pipeline small enough to run in seconds.
pub fn tiny_pipeline(dir: &std::path::Path) -> jrt::harness::PipelineConfig {
    let mut cfg = jrt::harness::PipelineConfig::default();
    let text = format!(
        "out_dir = {}
seeds = 0
train_houses = 2
val_houses = 1
test_houses = 1
episodes_per_house = 3
eval_max_steps = 40
images_per_domain = 64
probe_images = 32
baseline_steps = 240
ft_steps = 120
mimic_steps = 120
workers = 1
exec = sequential
adapt_iterations = 4
adapt_batch = 8
probe_iterations = 10
idt_sweep = 0.0005
mimic_sweep = 0.1
",
        dir.display()
    );
    cfg.apply_text(&text).unwrap();
    cfg
}

/// Multi-source BFS outward from every goal-room cell, in cells.
pub fn oracle_distance(h: &indoorworld::HousePlan, start: (usize, usize), goal: indoorworld::RoomType) -> Option<usize> {
    let mut frontier: Vec<(usize, usize)> = h
        .floor_cells()
        .filter(|&(x, y)| h.room_at_cell(x, y).map(|r| h.rooms[r].room_type) == Some(goal))
        .collect();
    let mut visited = vec![false; h.width * h.height];
    for &(x, y) in &frontier {
        visited[y * h.width + x] = true;
    }
    let mut level = 0;
    while !frontier.is_empty() {
        if frontier.contains(&start) {
            return Some(level);
        }
        let mut next = Vec::new();
        for &(x, y) in &frontier {
            for (dx, dy) in [(0i64, 1i64), (1, 0), (0, -1), (-1, 0)] {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if h.is_floor(nx, ny) && !visited[ny as usize * h.width + nx as usize] {
                    visited[ny as usize * h.width + nx as usize] = true;
                    next.push((nx as usize, ny as usize));
                }
            }
        }
        frontier = next;
        level += 1;
    }
    None
}

/// Instances out of 100 where the geodesic disagrees with the oracle.
pub fn bfs_mismatches(seed: u64) -> usize {
    use indoorworld::{generate_house, sample_episode, shortest_path_length, Domain, CELL_SIZE};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..100u64)
        .filter(|&i| {
            let domain = if i % 2 == 0 { Domain::Synthetic } else { Domain::Real };
            let h = generate_house(domain, 7000 + i).unwrap();
            let ep = sample_episode(&h, 500, &mut rng).unwrap();
            let (cx, cy) = ep.start.cell();
            let want = oracle_distance(&h, (cx as usize, cy as usize), ep.goal).map(|d| d as f64 * CELL_SIZE);
            want != Some(shortest_path_length(&h, &ep.start, ep.goal).unwrap())
        })
        .count()
}

/// Random actions for `n` steps; returns how many poses landed off the floor.
pub fn fuzz_walls(n: usize, seed: u64) -> usize {
    use indoorworld::env::{is_valid_pose, random_pose, step, Action};
    use indoorworld::{generate_house, Domain};
    let houses: Vec<_> = (0..20u64)
        .map(|s| generate_house(if s % 2 == 0 { Domain::Real } else { Domain::Synthetic }, 300 + s).unwrap())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut steps, mut bad) = (0, 0);
    while steps < n {
        let h = &houses[rng.gen_range(0..houses.len())];
        let cells: Vec<_> = h.floor_cells().collect();
        let goal = h.rooms[rng.gen_range(0..h.rooms.len())].room_type;
        let mut pose = random_pose(h, &cells, &mut rng);
        for _ in 0..500.min(n - steps) {
            let out = step(h, &pose, Action::ALL[rng.gen_range(0..3)], goal);
            if !is_valid_pose(h, &out.pose) {
                bad += 1;
            }
            pose = out.pose;
            steps += 1;
        }
    }
    bad
}

/// Every file under `root` except wall-clock timings, sorted by path.
pub fn file_tree(root: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if !p.ends_with("timings.csv") {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
