//! Adversarial feature adaptation of the encoder.
//!
//! The target encoder `M_r` starts as a copy of the frozen source encoder
//! `M_s`; a discriminator `D` learns to tell source-domain features
//! `M_s(x_s)` (label 1) from target-domain features `M_r(x_r)` (label 0),
//! and `M_r` is trained to fool it while staying close to `M_s` on source
//! images.

use std::fmt::Write as _;

use indoorworld::{Image, ImageBank};
use nncore::init::glorot_uniform;
use nncore::optim::add_l2_penalty;
use nncore::{Graph, NnError, OptimState, ParamSet, Scalar, Tensor, Var, LOG_EPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::{encode, encode_images, image_batch, AgentArch, ENCODER};
use crate::error::{Error, Result};
use crate::mix_seed;

pub const DISC: &str = "D.";
/// Frozen source encoder inside the adaptation parameter set.
pub const SOURCE: &str = "Ms.";

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptConfig {
    pub idt_weight: f64,
    pub norm_weight: f64,
    pub lr: f64,
    /// Discriminator learning rate.
    pub disc_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub iterations: usize,
    /// Total batch, split evenly between the two domains.
    pub batch: usize,
    pub disc_hidden: usize,
    /// Standardise discriminator inputs with fixed source statistics.
    pub standardize: bool,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            idt_weight: 5e-4,
            norm_weight: 1e-4,
            lr: 1e-4,
            disc_lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            iterations: 1000,
            batch: 64,
            disc_hidden: 64,
            standardize: false,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.idt_weight < 0.0 || self.norm_weight < 0.0 {
            return Err(Error::Config("adaptation weights must be non-negative".into()));
        }
        if self.batch < 2 || self.batch % 2 != 0 {
            return Err(Error::Config(format!("batch {} cannot be split evenly", self.batch)));
        }
        Ok(())
    }
}

pub fn init_discriminator<R: Rng + ?Sized>(feature_dim: usize, hidden: usize, rng: &mut R) -> Result<ParamSet> {
    let mut p = ParamSet::new();
    p.insert("D.fc1.w", glorot_uniform(rng, &[feature_dim, hidden], feature_dim, hidden))?;
    p.insert("D.fc1.b", Tensor::zeros(vec![hidden]))?;
    p.insert("D.fc2.w", glorot_uniform(rng, &[hidden, 1], hidden, 1))?;
    p.insert("D.fc2.b", Tensor::zeros(vec![1]))?;
    Ok(p)
}

/// `D(f)` in (0, 1) for every row of `f [B, feature_dim]`.
pub fn discriminator<T: Scalar>(g: &mut Graph<'_, T>, prefix: &str, f: Var) -> nncore::Result<Var> {
    let (w1, b1) = (g.param(&format!("{prefix}fc1.w"))?, g.param(&format!("{prefix}fc1.b"))?);
    let h = g.dense(f, w1, Some(b1))?;
    let h = g.leaky_relu(h, 0.2);
    let (w2, b2) = (g.param(&format!("{prefix}fc2.w"))?, g.param(&format!("{prefix}fc2.b"))?);
    let o = g.dense(h, w2, Some(b2))?;
    let o = g.sigmoid(o);
    let b = g.shape(o)[0];
    g.reshape(o, vec![b])
}

/// `-mean ln D(f_s) - mean ln(1 - D(f_r))`, logs clamped at 1e-8.
pub fn cls_loss<T: Scalar>(g: &mut Graph<'_, T>, d_s: Var, d_r: Var) -> Var {
    let ls = g.ln_clamped(d_s, LOG_EPS);
    let ls = g.mean(ls);
    let nr = g.one_minus(d_r);
    let lr = g.ln_clamped(nr, LOG_EPS);
    let lr = g.mean(lr);
    let s = g.add(ls, lr).expect("scalar add");
    g.scale(s, -1.0)
}

/// Non-saturating generator loss `-mean ln D(M_r(x_r))`.
pub fn adv_loss<T: Scalar>(g: &mut Graph<'_, T>, d_r: Var) -> Var {
    let l = g.ln_clamped(d_r, LOG_EPS);
    let l = g.mean(l);
    g.scale(l, -1.0)
}

/// Mean over the batch of `||f_src - f_tgt||_2`.
pub fn identity_loss<T: Scalar>(g: &mut Graph<'_, T>, f_src: Var, f_tgt: Var) -> nncore::Result<Var> {
    let d = g.sub(f_src, f_tgt)?;
    let n = g.row_norm(d);
    Ok(g.mean(n))
}

/// Fixed per-dimension standardisation in front of the discriminator,
/// estimated once from source features.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub shift: Vec<f32>,
    pub scale: Vec<f32>,
}

impl Standardizer {
    /// Mean and inverse standard deviation of the rows of `f [N, D]`.
    pub fn fit(f: &Tensor) -> Self {
        let (n, d) = (f.shape()[0], f.shape()[1]);
        let mut mean = vec![0f64; d];
        let mut sq = vec![0f64; d];
        for i in 0..n {
            for (j, &v) in f.row(i).iter().enumerate() {
                mean[j] += v as f64;
                sq[j] += (v as f64) * (v as f64);
            }
        }
        let mut shift = Vec::with_capacity(d);
        let mut scale = Vec::with_capacity(d);
        for j in 0..d {
            let m = mean[j] / n as f64;
            let var = (sq[j] / n as f64 - m * m).max(0.0);
            shift.push(-m as f32);
            scale.push((1.0 / (var.sqrt() + 1e-3)) as f32);
        }
        Self { shift, scale }
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<'_, T>, f: Var) -> nncore::Result<Var> {
        let rows = g.shape(f)[0];
        let shift = g.input(Tensor::vector(self.shift.iter().map(|&v| T::lit(v as f64)).collect()));
        let x = g.add_bias(f, shift)?;
        let tiled: Vec<T> = (0..rows).flat_map(|_| self.scale.iter().map(|&v| T::lit(v as f64))).collect();
        g.mul_const(x, Tensor::new(vec![rows, self.scale.len()], tiled)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptRecord {
    pub iter: usize,
    pub l_cls: f64,
    pub l_adv: f64,
    pub l_idt: f64,
    /// Squared L2 norm of the target encoder's weights.
    pub l_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdaptLog {
    pub records: Vec<AdaptRecord>,
}

impl AdaptLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,l_cls,l_adv,l_idt,l_norm\n");
        for r in &self.records {
            writeln!(s, "{},{:.6},{:.6},{:.6},{:.6}", r.iter, r.l_cls, r.l_adv, r.l_idt, r.l_norm).unwrap();
        }
        s
    }
}

pub struct AdaptOutcome {
    /// Adapted encoder under `M.`.
    pub encoder: ParamSet,
    pub discriminator: ParamSet,
    pub log: AdaptLog,
}

fn batch_of<'a, R: Rng>(bank: &'a ImageBank, n: usize, rng: &mut R) -> Vec<&'a Image> {
    (0..n).map(|_| &bank.images[rng.gen_range(0..bank.len())]).collect()
}

fn diverged(iter: usize, what: &str, v: f64) -> Error {
    Error::Diverged {
        at: format!("adaptation iteration {iter}"),
        detail: format!("{what} = {v}"),
    }
}

/// Alternating adaptation: per iteration one discriminator step on
/// `L_cls + norm * ||D||^2`, then one target-encoder step on
/// `L_adv + idt * L_idt + norm * ||M_r||^2` against the updated `D`.
pub fn adapt(source: &ParamSet, arch: &AgentArch, sim: &ImageBank, real: &ImageBank, cfg: &AdaptConfig) -> Result<AdaptOutcome> {
    cfg.validate()?;
    if sim.is_empty() || real.is_empty() {
        return Err(Error::Config("empty image bank".into()));
    }
    let ms = source.subset(ENCODER);
    if ms.is_empty() {
        return Err(Error::Nn(NnError::UnknownParam("M.* encoder".into())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0xada9]));
    let mut params = ms.renamed_prefix(ENCODER, SOURCE);
    params.overwrite_from(&ms)?;
    params.overwrite_from(&init_discriminator(arch.feature_dim, cfg.disc_hidden, &mut rng)?)?;
    params.set_all_trainable(false);
    let std = if cfg.standardize {
        let n = sim.len().min(512);
        let refs: Vec<&Image> = sim.images[..n].iter().collect();
        Some(Standardizer::fit(&encode_images(&params, arch, SOURCE, &image_batch(&refs))?))
    } else {
        None
    };
    let disc_in = |g: &mut Graph<'_, f32>, f: Var| -> nncore::Result<Var> {
        let f = match &std {
            Some(s) => s.apply(g, f)?,
            None => f,
        };
        discriminator(g, DISC, f)
    };

    let mut opt_d = OptimState::new(nncore::Algorithm::Adam { beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps }, cfg.disc_lr, &params);
    let mut opt_m = OptimState::new(nncore::Algorithm::Adam { beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps }, cfg.lr, &params);
    let half = cfg.batch / 2;
    let mut log = AdaptLog::default();
    for iter in 0..cfg.iterations {
        let xs = image_batch(&batch_of(sim, half, &mut rng));
        let xr = image_batch(&batch_of(real, half, &mut rng));
        let fs = encode_images(&params, arch, SOURCE, &xs)?;

        // discriminator step on features of the current target encoder
        params.set_trainable_prefix(DISC, true);
        let fr = encode_images(&params, arch, ENCODER, &xr)?;
        let (l_cls, grads) = {
            let mut g = Graph::new(&params);
            let (vs, vr) = (g.input(fs.clone()), g.input(fr));
            let ds = disc_in(&mut g, vs)?;
            let dr = disc_in(&mut g, vr)?;
            let l = cls_loss(&mut g, ds, dr);
            (g.item(l) as f64, g.backward(l)?)
        };
        if !l_cls.is_finite() {
            return Err(diverged(iter, "l_cls", l_cls));
        }
        params.zero_grads();
        params.accumulate(&grads)?;
        add_l2_penalty(&mut params, DISC, cfg.norm_weight);
        opt_d.step(&mut params)?;
        params.set_trainable_prefix(DISC, false);

        // target encoder step against the updated discriminator
        params.set_trainable_prefix(ENCODER, true);
        let (l_adv, l_idt, grads) = {
            let mut g = Graph::new(&params);
            let vr = g.input(xr.clone());
            let fr = encode(&mut g, arch, ENCODER, vr)?.feature;
            let dr = disc_in(&mut g, fr)?;
            let l_adv = adv_loss(&mut g, dr);
            let vs = g.input(xs.clone());
            let fs_r = encode(&mut g, arch, ENCODER, vs)?.feature;
            let fs_c = g.input(fs);
            let l_idt = identity_loss(&mut g, fs_c, fs_r)?;
            let weighted = g.scale(l_idt, cfg.idt_weight);
            let total = g.add(l_adv, weighted)?;
            (g.item(l_adv) as f64, g.item(l_idt) as f64, g.backward(total)?)
        };
        if !(l_adv.is_finite() && l_idt.is_finite()) {
            return Err(diverged(iter, "l_adv + l_idt", l_adv + l_idt));
        }
        params.zero_grads();
        params.accumulate(&grads)?;
        let l_norm = weight_norm(&params, ENCODER);
        add_l2_penalty(&mut params, ENCODER, cfg.norm_weight);
        opt_m.step(&mut params)?;
        params.set_trainable_prefix(ENCODER, false);
        if !params.all_finite() {
            return Err(diverged(iter, "parameters", f64::NAN));
        }
        log.records.push(AdaptRecord {
            iter,
            l_cls,
            l_adv,
            l_idt,
            l_norm,
        });
    }
    let mut encoder = params.subset(ENCODER);
    encoder.set_all_trainable(true);
    let mut disc = params.subset(DISC);
    disc.set_all_trainable(true);
    Ok(AdaptOutcome {
        encoder,
        discriminator: disc,
        log,
    })
}

/// Sum of squared `.w` entries under `prefix`.
pub fn weight_norm(params: &ParamSet, prefix: &str) -> f64 {
    params
        .iter()
        .filter(|(n, _)| n.starts_with(prefix) && n.ends_with(".w"))
        .map(|(_, p)| p.value.sum_squares() as f64)
        .sum()
}

/// Features of every bank image under the encoder at `prefix`.
pub fn bank_features(params: &ParamSet, arch: &AgentArch, prefix: &str, bank: &ImageBank) -> Result<Tensor> {
    let mut data = Vec::with_capacity(bank.len() * arch.feature_dim);
    for chunk in bank.images.chunks(256) {
        let refs: Vec<&Image> = chunk.iter().collect();
        data.extend_from_slice(encode_images(params, arch, prefix, &image_batch(&refs))?.data());
    }
    Ok(Tensor::new(vec![bank.len(), arch.feature_dim], data)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub iterations: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            iterations: 1000,
            lr: 1e-3,
            batch: 64,
            seed: 0,
        }
    }
}

/// Held-out accuracy of a freshly trained two-layer classifier separating
/// rows of `a` (label 1) from rows of `b` (label 0). Each set is split in
/// half: the first halves train the probe, the second halves test it.
pub fn probe_accuracy(a: &Tensor, b: &Tensor, cfg: &ProbeConfig) -> Result<f64> {
    let dim = a.shape()[1];
    if b.shape()[1] != dim || a.shape()[0] < 2 || b.shape()[0] < 2 {
        return Err(Error::Nn(NnError::Shape(format!("probe inputs {:?} vs {:?}", a.shape(), b.shape()))));
    }
    let (na, nb) = (a.shape()[0] / 2, b.shape()[0] / 2);
    // standardise with training statistics so the probe's step size does not
    // depend on the feature scale
    let mut mean = vec![0f64; dim];
    let mut var = vec![0f64; dim];
    let train_rows: Vec<&[f32]> = (0..na).map(|i| a.row(i)).chain((0..nb).map(|i| b.row(i))).collect();
    for r in &train_rows {
        for (j, &v) in r.iter().enumerate() {
            mean[j] += v as f64 / train_rows.len() as f64;
        }
    }
    for r in &train_rows {
        for (j, &v) in r.iter().enumerate() {
            var[j] += (v as f64 - mean[j]).powi(2) / train_rows.len() as f64;
        }
    }
    let norm = |row: &[f32]| -> Vec<f32> {
        row.iter()
            .enumerate()
            .map(|(j, &v)| ((v as f64 - mean[j]) / (var[j].sqrt() + 1e-6)) as f32)
            .collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0x9b0e]));
    let mut params = init_discriminator(dim, cfg.hidden, &mut rng)?;
    let mut opt = OptimState::adam(cfg.lr, &params);
    let train: Vec<(Vec<f32>, f32)> = (0..na)
        .map(|i| (norm(a.row(i)), 1.0))
        .chain((0..nb).map(|i| (norm(b.row(i)), 0.0)))
        .collect();
    for _ in 0..cfg.iterations {
        let picks: Vec<&(Vec<f32>, f32)> = (0..cfg.batch).map(|_| &train[rng.gen_range(0..train.len())]).collect();
        let x = Tensor::new(vec![picks.len(), dim], picks.iter().flat_map(|p| p.0.iter().copied()).collect())?;
        let y = Tensor::vector(picks.iter().map(|p| p.1).collect());
        let mut g = Graph::new(&params);
        let xv = g.input(x);
        let d = discriminator(&mut g, DISC, xv)?;
        // binary cross-entropy
        let ld = g.ln_clamped(d, LOG_EPS);
        let pos = g.mul_const(ld, y.clone())?;
        let nd = g.one_minus(d);
        let lnd = g.ln_clamped(nd, LOG_EPS);
        let neg = g.mul_const(lnd, y.map(|v| 1.0 - v))?;
        let s = g.add(pos, neg)?;
        let m = g.mean(s);
        let l = g.scale(m, -1.0);
        let grads = g.backward(l)?;
        params.zero_grads();
        params.accumulate(&grads)?;
        opt.step(&mut params)?;
    }
    let test: Vec<(Vec<f32>, bool)> = (na..a.shape()[0])
        .map(|i| (norm(a.row(i)), true))
        .chain((nb..b.shape()[0]).map(|i| (norm(b.row(i)), false)))
        .collect();
    let x = Tensor::new(vec![test.len(), dim], test.iter().flat_map(|t| t.0.iter().copied()).collect())?;
    let mut g = Graph::inference(&params);
    let xv = g.input(x);
    let d = discriminator(&mut g, DISC, xv)?;
    let correct = g
        .value(d)
        .data()
        .iter()
        .zip(&test)
        .filter(|(&p, t)| (p > 0.5) == t.1)
        .count();
    Ok(correct as f64 / test.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss_of(ds: &[f32], dr: &[f32]) -> (f64, f64) {
        let p = ParamSet::new();
        let mut g = Graph::<f32>::inference(&p);
        let a = g.input(Tensor::vector(ds.to_vec()));
        let b = g.input(Tensor::vector(dr.to_vec()));
        let c = cls_loss(&mut g, a, b);
        let d = adv_loss(&mut g, b);
        (g.item(c) as f64, g.item(d) as f64)
    }

    #[test]
    fn closed_form_values() {
        let (c, a) = loss_of(&[0.5, 0.5], &[0.5, 0.5]);
        assert!((c - 2.0 * 2f64.ln()).abs() < 1e-5);
        assert!((a - 2f64.ln()).abs() < 1e-5);
        let (c, _) = loss_of(&[1.0], &[0.0]);
        assert!(c.abs() < 1e-5);
        let (_, a) = loss_of(&[0.3], &[1.0]);
        assert!(a.abs() < 1e-6);
    }

    #[test]
    fn identity_constant_offset() {
        let p = ParamSet::new();
        let mut g = Graph::<f32>::inference(&p);
        let a = g.input(Tensor::new(vec![2, 2], vec![1.0, 2.0, -1.0, 0.0]).unwrap());
        let b = g.input(Tensor::new(vec![2, 2], vec![4.0, 6.0, 2.0, 4.0]).unwrap());
        let l = identity_loss(&mut g, a, b).unwrap();
        assert!((g.item(l) - 5.0).abs() < 1e-6);
        let z = identity_loss(&mut g, a, a).unwrap();
        assert_eq!(g.item(z), 0.0);
    }
}
