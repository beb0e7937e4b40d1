//! Greedy evaluation on fixed episode sets, success rate and SPL,
//! across-seed comparison tables and encoder heatmaps.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use indoorworld::{
    sample_episode, shortest_path_length, Action, AgentPose, Domain, Episode, EpisodeSpec, HousePlan, Image, RoomType,
};
use nncore::{Exec, Graph, ParamSet, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::agent::{act_on_images, encode, image_batch, AgentArch, ENCODER};
use crate::error::{Error, Result};

/// Episodes evaluated together in one batched forward pass.
const EVAL_CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub episode_id: usize,
    pub success: bool,
    pub path_len: f64,
    pub shortest_len: f64,
    pub steps: usize,
}

impl EpisodeRecord {
    pub fn spl_term(&self) -> f64 {
        if self.success {
            self.shortest_len / self.path_len.max(self.shortest_len)
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub episodes: Vec<EpisodeRecord>,
    pub seed: u64,
}

impl EvalReport {
    /// Success rate in percent.
    pub fn success_rate(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        100.0 * self.episodes.iter().filter(|e| e.success).count() as f64 / self.episodes.len() as f64
    }

    /// SPL in percent.
    pub fn spl(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        100.0 * self.episodes.iter().map(EpisodeRecord::spl_term).sum::<f64>() / self.episodes.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("episode_id,success,path_len,shortest_len,steps\n");
        for e in &self.episodes {
            writeln!(s, "{},{},{},{},{}", e.episode_id, e.success as u8, e.path_len, e.shortest_len, e.steps).unwrap();
        }
        s
    }

    pub fn from_csv(text: &str, seed: u64) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("episode_id,success,path_len,shortest_len,steps") {
            return Err(Error::Format("eval report header".into()));
        }
        let episodes = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                let bad = || Error::Format(format!("eval report row `{l}`"));
                if f.len() != 5 {
                    return Err(bad());
                }
                Ok(EpisodeRecord {
                    episode_id: f[0].parse().map_err(|_| bad())?,
                    success: f[1] == "1",
                    path_len: f[2].parse().map_err(|_| bad())?,
                    shortest_len: f[3].parse().map_err(|_| bad())?,
                    steps: f[4].parse().map_err(|_| bad())?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { episodes, seed })
    }
}

/// Fixed list of episodes shared by every model under comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeSet {
    pub episodes: Vec<EpisodeSpec>,
}

impl EpisodeSet {
    /// `per_house` episodes for each house, drawn from a seeded stream.
    pub fn sample(houses: &[HousePlan], per_house: usize, max_steps: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut episodes = Vec::with_capacity(houses.len() * per_house);
        for h in houses {
            for _ in 0..per_house {
                episodes.push(sample_episode(h, max_steps, &mut rng)?);
            }
        }
        Ok(Self { episodes })
    }

    /// Identifies the episode set; reports are only comparable when equal.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for line in self.to_csv().bytes() {
            h ^= line as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("domain,house_seed,x,y,heading,goal,max_steps\n");
        for e in &self.episodes {
            writeln!(
                s,
                "{},{},{:?},{:?},{:?},{},{}",
                e.domain, e.house_seed, e.start.x, e.start.y, e.start.heading, e.goal, e.max_steps
            )
            .unwrap();
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("domain,house_seed,x,y,heading,goal,max_steps") {
            return Err(Error::Format("episode set header".into()));
        }
        let episodes = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                let bad = || Error::Format(format!("episode row `{l}`"));
                if f.len() != 7 {
                    return Err(bad());
                }
                Ok(EpisodeSpec {
                    domain: f[0].parse::<Domain>()?,
                    house_seed: f[1].parse().map_err(|_| bad())?,
                    start: AgentPose::new(
                        f[2].parse().map_err(|_| bad())?,
                        f[3].parse().map_err(|_| bad())?,
                        f[4].parse().map_err(|_| bad())?,
                    ),
                    goal: f[5].parse::<RoomType>()?,
                    max_steps: f[6].parse().map_err(|_| bad())?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { episodes })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path, &self.to_csv())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv(&fs::read_to_string(path)?)
    }

    /// Regenerates the houses the episodes refer to.
    pub fn houses(&self) -> Result<HashMap<(Domain, u64), Arc<HousePlan>>> {
        let mut map = HashMap::new();
        for e in &self.episodes {
            if let std::collections::hash_map::Entry::Vacant(v) = map.entry((e.domain, e.house_seed)) {
                v.insert(Arc::new(indoorworld::generate_house(e.domain, e.house_seed)?));
            }
        }
        Ok(map)
    }
}

pub(crate) fn write_file(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

/// Greedy rollout of every episode; the encoder is read from `M.`.
pub fn evaluate(params: &ParamSet, arch: &AgentArch, set: &EpisodeSet, seed: u64, exec: Exec) -> Result<EvalReport> {
    let houses = set.houses()?;
    evaluate_in(params, arch, set, &houses, seed, exec)
}

pub fn evaluate_in(
    params: &ParamSet,
    arch: &AgentArch,
    set: &EpisodeSet,
    houses: &HashMap<(Domain, u64), Arc<HousePlan>>,
    seed: u64,
    exec: Exec,
) -> Result<EvalReport> {
    for e in &set.episodes {
        arch.check_goal(e.goal.index())?;
    }
    let chunks: Vec<&[EpisodeSpec]> = set.episodes.chunks(EVAL_CHUNK).collect();
    let results = exec.map(chunks.len(), |c| eval_chunk(params, arch, chunks[c], houses));
    let mut episodes = Vec::with_capacity(set.episodes.len());
    for (c, r) in results.into_iter().enumerate() {
        for (i, mut rec) in r?.into_iter().enumerate() {
            rec.episode_id = c * EVAL_CHUNK + i;
            episodes.push(rec);
        }
    }
    Ok(EvalReport { episodes, seed })
}

fn eval_chunk(
    params: &ParamSet,
    arch: &AgentArch,
    specs: &[EpisodeSpec],
    houses: &HashMap<(Domain, u64), Arc<HousePlan>>,
) -> Result<Vec<EpisodeRecord>> {
    let mut eps = Vec::with_capacity(specs.len());
    let mut shortest = Vec::with_capacity(specs.len());
    for s in specs {
        let house = houses
            .get(&(s.domain, s.house_seed))
            .ok_or_else(|| Error::Config(format!("house {} {} missing", s.domain, s.house_seed)))?;
        shortest.push(shortest_path_length(house, &s.start, s.goal)?);
        eps.push(Episode::new(house.clone(), s)?);
    }
    let mut hidden: Vec<Tensor> = vec![Tensor::zeros(vec![1, arch.hidden]); specs.len()];
    loop {
        let active: Vec<usize> = (0..eps.len()).filter(|&i| !eps[i].is_done()).collect();
        if active.is_empty() {
            break;
        }
        let obs: Vec<Image> = active.iter().map(|&i| eps[i].observe().image).collect();
        let refs: Vec<&Image> = obs.iter().collect();
        let goals: Vec<usize> = active.iter().map(|&i| eps[i].goal.index()).collect();
        let mut h = Vec::with_capacity(active.len() * arch.hidden);
        for &i in &active {
            h.extend_from_slice(hidden[i].data());
        }
        let h = Tensor::new(vec![active.len(), arch.hidden], h)?;
        let out = act_on_images(params, arch, ENCODER, &image_batch(&refs), &goals, &h)?;
        for (row, &i) in active.iter().enumerate() {
            let p = Tensor::vector(out.probs.row(row).to_vec());
            let action = Action::from_index(p.argmax()).expect("policy width");
            hidden[i] = Tensor::new(vec![1, arch.hidden], out.hidden.row(row).to_vec())?;
            eps[i].step(action);
        }
    }
    Ok(eps
        .iter()
        .zip(shortest)
        .map(|(e, l)| EpisodeRecord {
            episode_id: 0,
            success: e.reached,
            path_len: e.path_len,
            shortest_len: l,
            steps: e.steps,
        })
        .collect())
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// One evaluated (model, seed) cell of a comparison.
#[derive(Clone, Debug)]
pub struct LabeledReport {
    pub model: String,
    pub report: EvalReport,
    pub episode_set: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub model: String,
    pub seeds: usize,
    pub success_mean: f64,
    pub success_std: f64,
    pub spl_mean: f64,
    pub spl_std: f64,
}

/// Per-model mean and std over seeds, in first-appearance order of models.
pub fn compare(reports: &[LabeledReport]) -> Result<Vec<ComparisonRow>> {
    let mut order: Vec<&str> = Vec::new();
    for r in reports {
        if !order.contains(&r.model.as_str()) {
            order.push(&r.model);
        }
    }
    // every report of one seed must come from the same episode set
    let mut sets: HashMap<u64, u64> = HashMap::new();
    for r in reports {
        let prev = *sets.entry(r.report.seed).or_insert(r.episode_set);
        if prev != r.episode_set {
            return Err(Error::Comparison(format!(
                "`{}` seed {} evaluated on a different episode set",
                r.model, r.report.seed
            )));
        }
    }
    Ok(order
        .into_iter()
        .map(|m| {
            let rs: Vec<&LabeledReport> = reports.iter().filter(|r| r.model == m).collect();
            let sr: Vec<f64> = rs.iter().map(|r| r.report.success_rate()).collect();
            let spl: Vec<f64> = rs.iter().map(|r| r.report.spl()).collect();
            let (success_mean, success_std) = mean_std(&sr);
            let (spl_mean, spl_std) = mean_std(&spl);
            ComparisonRow {
                model: m.to_string(),
                seeds: rs.len(),
                success_mean,
                success_std,
                spl_mean,
                spl_std,
            }
        })
        .collect())
}

pub fn aggregate_csv(reports: &[LabeledReport]) -> String {
    let mut s = String::from("model,seed,success_rate,spl\n");
    for r in reports {
        writeln!(s, "{},{},{},{}", r.model, r.report.seed, r.report.success_rate(), r.report.spl()).unwrap();
    }
    s
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut s = String::from("model,seeds,success_mean,success_std,spl_mean,spl_std\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{:.4},{:.4},{:.4},{:.4}",
            r.model, r.seeds, r.success_mean, r.success_std, r.spl_mean, r.spl_std
        )
        .unwrap();
    }
    s
}

/// Mean absolute activation of the last convolution per spatial cell,
/// min-max normalised to [0, 1] (all zeros when the map is flat).
pub fn heatmap(params: &ParamSet, arch: &AgentArch, image: &Image) -> Result<Tensor> {
    let mut g = Graph::inference(params);
    let x = g.input(image_batch(&[image]));
    let enc = encode(&mut g, arch, ENCODER, x)?;
    let act = g.value(enc.last_conv);
    let (c, h, w) = (act.shape()[1], act.shape()[2], act.shape()[3]);
    let mut map = vec![0f32; h * w];
    for ch in 0..c {
        for (k, m) in map.iter_mut().enumerate() {
            *m += act.data()[ch * h * w + k].abs() / c as f32;
        }
    }
    let lo = map.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = map.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    for m in map.iter_mut() {
        *m = if span > 1e-12 { (*m - lo) / span } else { 0.0 };
    }
    Ok(Tensor::new(vec![h, w], map)?)
}

/// Binary portable graymap (`P5`, maxval 255).
pub fn pgm_bytes(map: &Tensor) -> Vec<u8> {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}
