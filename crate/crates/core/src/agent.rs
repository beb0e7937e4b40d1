//! Recurrent actor-critic: encoder `M`, goal embedding `G`, gated recurrent
//! core `R`, policy head `P` and value head `V`.
//!
//! Parameter names start with the component prefix so later stages can
//! freeze, copy or replace a component by prefix.

use indoorworld::{Action, Image, RoomType};
use nncore::graph::ConvGeom;
use nncore::init::fan_in_uniform;
use nncore::{Graph, NnError, ParamSet, Result, Scalar, Tensor, Var, LOG_EPS};
use rand::Rng;

pub const ENCODER: &str = "M.";
pub const GOAL: &str = "G.";
pub const CORE: &str = "R.";
pub const POLICY: &str = "P.";
pub const VALUE: &str = "V.";
/// Everything trained on the policy side (all but the encoder).
pub const POLICY_SIDE: [&str; 4] = [GOAL, CORE, POLICY, VALUE];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentArch {
    pub image_size: usize,
    pub channels: usize,
    pub convs: Vec<ConvSpec>,
    pub feature_dim: usize,
    pub num_goals: usize,
    pub goal_dim: usize,
    pub hidden: usize,
    pub actions: usize,
    pub leaky_slope: f64,
}

impl Default for AgentArch {
    fn default() -> Self {
        Self {
            image_size: indoorworld::IMAGE_SIZE,
            channels: 3,
            convs: vec![
                ConvSpec {
                    out_ch: 8,
                    kernel: 4,
                    stride: 2,
                },
                ConvSpec {
                    out_ch: 16,
                    kernel: 4,
                    stride: 2,
                },
            ],
            feature_dim: 128,
            num_goals: RoomType::COUNT,
            goal_dim: 16,
            hidden: 128,
            actions: Action::COUNT,
            leaky_slope: 0.01,
        }
    }
}

impl AgentArch {
    /// A scaled-down variant with the same structure, small enough for
    /// finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            image_size: 8,
            channels: 3,
            convs: vec![
                ConvSpec {
                    out_ch: 2,
                    kernel: 3,
                    stride: 2,
                },
                ConvSpec {
                    out_ch: 3,
                    kernel: 2,
                    stride: 1,
                },
            ],
            feature_dim: 6,
            num_goals: RoomType::COUNT,
            goal_dim: 3,
            hidden: 5,
            actions: Action::COUNT,
            leaky_slope: 0.01,
        }
    }

    pub fn input_len(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    /// `(channels, h, w)` after each convolution.
    pub fn conv_shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        let mut hw = (self.image_size, self.image_size);
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            hw = ConvGeom::out_dims(hw.0, hw.1, c.kernel, c.stride, 0)
                .ok_or_else(|| NnError::Shape(format!("conv{} does not fit {hw:?}", i + 1)))?;
            out.push((c.out_ch, hw.0, hw.1));
        }
        Ok(out)
    }

    pub fn flat_dim(&self) -> Result<usize> {
        let &(c, h, w) = self.conv_shapes()?.last().ok_or_else(|| NnError::Shape("no conv layers".into()))?;
        Ok(c * h * w)
    }

    /// Encoder parameters under `prefix` (normally `M.`).
    pub fn init_encoder<R: Rng + ?Sized>(&self, prefix: &str, rng: &mut R) -> Result<ParamSet> {
        let mut p = ParamSet::new();
        let mut in_ch = self.channels;
        for (i, c) in self.convs.iter().enumerate() {
            let fan_in = in_ch * c.kernel * c.kernel;
            let name = format!("{prefix}conv{}", i + 1);
            p.insert(format!("{name}.w"), fan_in_uniform(rng, &[c.out_ch, in_ch, c.kernel, c.kernel], fan_in, 3f64.sqrt()))?;
            p.insert(format!("{name}.b"), Tensor::zeros(vec![c.out_ch]))?;
            in_ch = c.out_ch;
        }
        let flat = self.flat_dim()?;
        p.insert(format!("{prefix}fc.w"), fan_in_uniform(rng, &[flat, self.feature_dim], flat, 3f64.sqrt()))?;
        p.insert(format!("{prefix}fc.b"), Tensor::zeros(vec![self.feature_dim]))?;
        Ok(p)
    }

    /// Full model with every component prefix.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamSet> {
        let mut p = self.init_encoder(ENCODER, rng)?;
        p.insert("G.emb", fan_in_uniform(rng, &[self.num_goals, self.goal_dim], 1, 1.0))?;
        let input = self.feature_dim + self.goal_dim;
        let h = self.hidden;
        p.insert("R.w", fan_in_uniform(rng, &[input, 3 * h], input, 3f64.sqrt()))?;
        p.insert("R.u", fan_in_uniform(rng, &[h, 3 * h], h, 3f64.sqrt()))?;
        p.insert("R.b", Tensor::zeros(vec![3 * h]))?;
        // near-uniform initial policy
        p.insert("P.w", fan_in_uniform(rng, &[h, self.actions], h, 0.01))?;
        p.insert("P.b", Tensor::zeros(vec![self.actions]))?;
        p.insert("V.w", fan_in_uniform(rng, &[h, 1], h, 1.0))?;
        p.insert("V.b", Tensor::zeros(vec![1]))?;
        Ok(p)
    }

    pub fn check_goal(&self, goal: usize) -> Result<()> {
        if goal >= self.num_goals {
            return Err(NnError::Shape(format!("goal id {goal} outside the {} known goals", self.num_goals)));
        }
        Ok(())
    }
}

/// Stacks images into a `[B, C, S, S]` batch.
pub fn image_batch(images: &[&Image]) -> Tensor {
    let mut data = Vec::with_capacity(images.len() * indoorworld::IMAGE_LEN);
    for im in images {
        data.extend(im.to_chw());
    }
    let s = indoorworld::IMAGE_SIZE;
    Tensor::new(vec![images.len(), 3, s, s], data).expect("image batch shape")
}

/// Encoder outputs: the last convolution's activations and the feature.
pub struct Encoded {
    pub last_conv: Var,
    pub feature: Var,
}

/// `x [B, C, S, S] -> f [B, feature_dim]` with parameters under `prefix`.
pub fn encode<T: Scalar>(g: &mut Graph<'_, T>, arch: &AgentArch, prefix: &str, x: Var) -> Result<Encoded> {
    let b = g.shape(x)[0];
    let mut h = x;
    for (i, c) in arch.convs.iter().enumerate() {
        let name = format!("{prefix}conv{}", i + 1);
        let (w, bias) = (g.param(&format!("{name}.w"))?, g.param(&format!("{name}.b"))?);
        h = g.conv2d(h, w, bias, c.stride, 0)?;
        h = g.leaky_relu(h, arch.leaky_slope);
    }
    let last_conv = h;
    let flat = g.reshape(h, vec![b, arch.flat_dim()?])?;
    let (w, bias) = (g.param(&format!("{prefix}fc.w"))?, g.param(&format!("{prefix}fc.b"))?);
    let f = g.dense(flat, w, Some(bias))?;
    let feature = g.leaky_relu(f, arch.leaky_slope);
    Ok(Encoded { last_conv, feature })
}

pub fn encode_input<T: Scalar>(g: &mut Graph<'_, T>, arch: &AgentArch, prefix: &str, images: &Tensor) -> Result<Var> {
    if images.rank() != 4 || images.shape()[1..] != [arch.channels, arch.image_size, arch.image_size] {
        return Err(NnError::Shape(format!("encoder input {:?}", images.shape())));
    }
    let x = g.input(images.cast());
    Ok(encode(g, arch, prefix, x)?.feature)
}

/// One gated recurrent step on `[f, G.emb[goal]]`:
/// `z = s(x Wz + h Uz + bz)`, `r = s(x Wr + h Ur + br)`,
/// `n = tanh(x Wn + bn + r * (h Un))`, `h' = n + z * (h - n)`.
pub fn recurrent_step<T: Scalar>(g: &mut Graph<'_, T>, arch: &AgentArch, f: Var, goals: &[usize], h: Var) -> Result<Var> {
    for &goal in goals {
        arch.check_goal(goal)?;
    }
    let hd = arch.hidden;
    let emb = g.param("G.emb")?;
    let ge = g.gather_rows(emb, goals)?;
    let x = g.concat_cols(f, ge)?;
    let (w, u, b) = (g.param("R.w")?, g.param("R.u")?, g.param("R.b")?);
    let gx = g.dense(x, w, Some(b))?;
    let gh = g.matmul(h, u)?;
    let (xz, xr, xn) = (g.slice_cols(gx, 0, hd)?, g.slice_cols(gx, hd, hd)?, g.slice_cols(gx, 2 * hd, hd)?);
    let (hz, hr, hn) = (g.slice_cols(gh, 0, hd)?, g.slice_cols(gh, hd, hd)?, g.slice_cols(gh, 2 * hd, hd)?);
    let z = g.add(xz, hz)?;
    let z = g.sigmoid(z);
    let r = g.add(xr, hr)?;
    let r = g.sigmoid(r);
    let rh = g.mul(r, hn)?;
    let n = g.add(xn, rh)?;
    let n = g.tanh(n);
    let d = g.sub(h, n)?;
    let zd = g.mul(z, d)?;
    g.add(n, zd)
}

/// Policy logits `[B, actions]` and values `[B]`.
pub fn heads<T: Scalar>(g: &mut Graph<'_, T>, h: Var) -> Result<(Var, Var)> {
    let (pw, pb) = (g.param("P.w")?, g.param("P.b")?);
    let logits = g.dense(h, pw, Some(pb))?;
    let (vw, vb) = (g.param("V.w")?, g.param("V.b")?);
    let v = g.dense(h, vw, Some(vb))?;
    let b = g.shape(v)[0];
    let v = g.reshape(v, vec![b])?;
    Ok((logits, v))
}

/// Result of one forward step for a batch of agents.
#[derive(Clone, Debug, PartialEq)]
pub struct ActOutput {
    /// `[B, actions]` row-stochastic.
    pub probs: Tensor,
    pub values: Vec<f32>,
    pub hidden: Tensor,
}

/// Forward-only step from precomputed features `[B, feature_dim]`.
pub fn act(params: &ParamSet, arch: &AgentArch, features: &Tensor, goals: &[usize], h_prev: &Tensor) -> Result<ActOutput> {
    let mut g = Graph::inference(params);
    let f = g.input(features.clone());
    let h = g.input(h_prev.clone());
    let h = recurrent_step(&mut g, arch, f, goals, h)?;
    let (logits, v) = heads(&mut g, h)?;
    let probs = g.softmax_rows(logits);
    let out = ActOutput {
        probs: g.value(probs).clone(),
        values: g.value(v).data().to_vec(),
        hidden: g.value(h).clone(),
    };
    out.hidden.ensure_finite("hidden state")?;
    out.probs.ensure_finite("policy")?;
    Ok(out)
}

/// Forward-only encoder.
pub fn encode_images(params: &ParamSet, arch: &AgentArch, prefix: &str, images: &Tensor) -> Result<Tensor> {
    let mut g = Graph::inference(params);
    let f = encode_input(&mut g, arch, prefix, images)?;
    Ok(g.value(f).clone())
}

/// Encoder, recurrent step and heads for one batch of observations.
pub fn act_on_images(
    params: &ParamSet,
    arch: &AgentArch,
    prefix: &str,
    images: &Tensor,
    goals: &[usize],
    h_prev: &Tensor,
) -> Result<ActOutput> {
    let f = encode_images(params, arch, prefix, images)?;
    act(params, arch, &f, goals, h_prev)
}

/// One recorded time step of a batch of `W` parallel episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// `[W, C, S, S]`.
    pub images: Tensor,
    pub goals: Vec<usize>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f32>,
    /// Episode ended after this step (goal reached or step cap).
    pub dones: Vec<bool>,
    /// Behaviour policy at acting time, `[W, actions]`.
    pub probs: Tensor,
    pub values: Vec<f32>,
    /// Teacher policy on the same observations when distilling.
    pub teacher_probs: Option<Tensor>,
}

/// An unroll of at most `unroll` steps for `W` episodes run side by side.
/// An episode that ends inside the unroll is cut there; the row's recurrent
/// state is reset to zero and the next episode continues in the same row.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub h0: Tensor,
    pub steps: Vec<StepRecord>,
    /// Value of the state after the last step, per row (ignored for rows
    /// whose episode ended on that step).
    pub bootstrap: Vec<f32>,
    pub gamma: f64,
}

impl Trajectory {
    pub fn rows(&self) -> usize {
        self.h0.shape()[0]
    }

    /// n-step returns `R_t = r_t + gamma * R_{t+1}`, restarting at episode ends.
    pub fn returns(&self) -> Vec<Vec<f64>> {
        let w = self.rows();
        let mut out = vec![vec![0.0; w]; self.steps.len()];
        let mut r: Vec<f64> = self.bootstrap.iter().map(|&v| v as f64).collect();
        for (t, s) in self.steps.iter().enumerate().rev() {
            for i in 0..w {
                if s.dones[i] {
                    r[i] = 0.0;
                }
                r[i] = s.rewards[i] as f64 + self.gamma * r[i];
                out[t][i] = r[i];
            }
        }
        out
    }
}

/// Brute-force discounted sum for a single episode fragment.
pub fn discounted_returns(rewards: &[f64], gamma: f64, bootstrap: f64) -> Vec<f64> {
    let n = rewards.len();
    (0..n)
        .map(|t| {
            let mut acc = 0.0;
            for k in t..n {
                acc += gamma.powi((k - t) as i32) * rewards[k];
            }
            acc + gamma.powi((n - t) as i32) * bootstrap
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub value_coef: f64,
    pub entropy_coef: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            value_coef: 0.5,
            entropy_coef: 0.01,
        }
    }
}

/// Per-step graph handles from [`unroll`].
pub struct Unrolled {
    pub logits: Vec<Var>,
    pub values: Vec<Var>,
    pub features: Vec<Var>,
}

/// Replays a trajectory through encoder (batched over all steps), recurrent
/// core and heads, with the encoder taken from `encoder_prefix`.
pub fn unroll<T: Scalar>(g: &mut Graph<'_, T>, arch: &AgentArch, encoder_prefix: &str, traj: &Trajectory) -> Result<Unrolled> {
    let (t_len, w) = (traj.steps.len(), traj.rows());
    if t_len == 0 {
        return Err(NnError::Shape("empty trajectory".into()));
    }
    let mut all = Vec::with_capacity(t_len * w * arch.input_len());
    for s in &traj.steps {
        if s.images.shape()[0] != w {
            return Err(NnError::Shape("trajectory rows disagree".into()));
        }
        all.extend(s.images.data().iter().map(|&v| T::from_f64(v as f64)));
    }
    let x = g.input(Tensor::new(vec![t_len * w, arch.channels, arch.image_size, arch.image_size], all)?);
    let f_all = encode(g, arch, encoder_prefix, x)?.feature;
    let f_all = g.reshape(f_all, vec![1, t_len * w * arch.feature_dim])?;
    let mut h = g.input(traj.h0.cast());
    let mut out = Unrolled {
        logits: Vec::with_capacity(t_len),
        values: Vec::with_capacity(t_len),
        features: Vec::with_capacity(t_len),
    };
    for (t, s) in traj.steps.iter().enumerate() {
        // rows t*W .. (t+1)*W of the batched features
        let f = slice_row(g, f_all, t, w, arch.feature_dim)?;
        h = recurrent_step(g, arch, f, &s.goals, h)?;
        let (logits, v) = heads(g, h)?;
        out.logits.push(logits);
        out.values.push(v);
        out.features.push(f);
        if s.dones.iter().any(|&d| d) && t + 1 < t_len {
            let mask = Tensor::from_fn(vec![w, arch.hidden], |k| if s.dones[k / arch.hidden] { T::zero() } else { T::one() });
            h = g.mul_const(h, mask)?;
        }
    }
    Ok(out)
}

/// Rows `t*w .. (t+1)*w` of `m`, given as `[1, rows*d]`.
fn slice_row<T: Scalar>(g: &mut Graph<'_, T>, flat: Var, t: usize, w: usize, d: usize) -> Result<Var> {
    let row = g.slice_cols(flat, t * w * d, w * d)?;
    g.reshape(row, vec![w, d])
}

/// A3C loss summed over steps and averaged over rows:
/// `sum_t [-ln pi(a_t) * sg(R_t - V_t) + c_v (R_t - V_t)^2 - beta H(pi_t)] / W`.
pub fn a3c_loss_on<T: Scalar>(g: &mut Graph<'_, T>, un: &Unrolled, traj: &Trajectory, weights: LossWeights) -> Result<Var> {
    let adv = advantages(g, un, traj);
    a3c_loss_with(g, un, traj, weights, &adv)
}

/// `R_t - V_t` per step and row, read off the current graph values.
pub fn advantages<T: Scalar>(g: &Graph<'_, T>, un: &Unrolled, traj: &Trajectory) -> Vec<Vec<f64>> {
    traj.returns()
        .iter()
        .zip(&un.values)
        .map(|(r, &v)| r.iter().zip(g.value(v).data()).map(|(r, v)| r - v.as_f64()).collect())
        .collect()
}

/// [`a3c_loss_on`] with the policy-gradient weights supplied by the caller.
/// The surrogate treats them as constants, so a finite-difference check
/// must hold them fixed too.
pub fn a3c_loss_with<T: Scalar>(
    g: &mut Graph<'_, T>,
    un: &Unrolled,
    traj: &Trajectory,
    weights: LossWeights,
    adv: &[Vec<f64>],
) -> Result<Var> {
    let returns = traj.returns();
    let w = traj.rows();
    let mut terms = Vec::with_capacity(traj.steps.len() * 3);
    for (t, s) in traj.steps.iter().enumerate() {
        let logits = un.logits[t];
        let v = un.values[t];
        let p = g.softmax_rows(logits);
        let logp = g.ln_clamped(p, LOG_EPS);
        let chosen = g.pick_cols(logp, &s.actions)?;
        let a: Vec<T> = adv[t].iter().map(|&x| T::from_f64(x)).collect();
        let pg = g.mul_const(chosen, Tensor::new(vec![w], a)?)?;
        let pg = g.sum(pg);
        terms.push(g.scale(pg, -1.0 / w as f64));

        let r = g.input(Tensor::new(vec![w], returns[t].iter().map(|&x| T::from_f64(x)).collect())?);
        let diff = g.sub(r, v)?;
        let sq = g.sum_squares(diff);
        terms.push(g.scale(sq, weights.value_coef / w as f64));

        if weights.entropy_coef != 0.0 {
            let plogp = g.mul(p, logp)?;
            let neg_h = g.sum(plogp);
            terms.push(g.scale(neg_h, weights.entropy_coef / w as f64));
        }
    }
    g.add_all(&terms)
}

pub fn a3c_loss<T: Scalar>(g: &mut Graph<'_, T>, arch: &AgentArch, traj: &Trajectory, weights: LossWeights) -> Result<Var> {
    let un = unroll(g, arch, ENCODER, traj)?;
    a3c_loss_on(g, &un, traj, weights)
}

/// Entropy of each row of a probability matrix.
pub fn row_entropy(probs: &Tensor) -> Vec<f64> {
    let (rows, cols) = probs.as_matrix_dims();
    (0..rows)
        .map(|r| {
            -probs.data()[r * cols..(r + 1) * cols]
                .iter()
                .map(|&p| p as f64 * (p as f64).max(LOG_EPS).ln())
                .sum::<f64>()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_shapes() {
        let arch = AgentArch::default();
        assert_eq!(arch.conv_shapes().unwrap(), vec![(8, 15, 15), (16, 6, 6)]);
        assert_eq!(arch.flat_dim().unwrap(), 576);
        let p = arch.init_params(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(p.value("R.w").unwrap().shape(), &[144, 384]);
        for name in p.names() {
            assert!(["M.", "G.", "R.", "P.", "V."].iter().any(|pre| name.starts_with(pre)), "{name}");
        }
    }

    #[test]
    fn returns_match_recursion() {
        assert_eq!(discounted_returns(&[1.0, 0.0, 0.0], 0.99, 0.0), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn unknown_goal_rejected() {
        let arch = AgentArch::tiny();
        let p = arch.init_params(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let f = Tensor::zeros(vec![1, arch.feature_dim]);
        let h = Tensor::zeros(vec![1, arch.hidden]);
        assert!(act(&p, &arch, &f, &[7], &h).is_err());
        assert!(act(&p, &arch, &f, &[4], &h).is_ok());
    }
}
