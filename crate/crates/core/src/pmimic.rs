//! Policy mimic: the policy side of a student agent is trained in the target
//! domain on top of a frozen (adapted) encoder, with the actor-critic loss
//! plus a cross-entropy towards a frozen teacher's action distribution.

use std::sync::Arc;

use indoorworld::HousePlan;
use nncore::{Graph, ParamSet, Scalar, Tensor, Var, LOG_EPS};

use crate::agent::{act_on_images, AgentArch, ENCODER};
use crate::error::{Error, Result};
use crate::rl::{train, Distill, TrainConfig, TrainOutcome, Validation};

#[derive(Clone, Debug, PartialEq)]
pub struct MimicConfig {
    pub lambda: f64,
    pub train: TrainConfig,
}

impl Default for MimicConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            train: TrainConfig::default(),
        }
    }
}

/// Teacher action distribution for a batch of observations. Returns the
/// probabilities `[B, actions]` and the advanced hidden state.
pub fn teacher_distribution(teacher: &ParamSet, arch: &AgentArch, images: &Tensor, goals: &[usize], hidden: &Tensor) -> Result<(Tensor, Tensor)> {
    let out = act_on_images(teacher, arch, ENCODER, images, goals, hidden)?;
    Ok((out.probs, out.hidden))
}

/// `-sum_a p(a) ln max(softmax(logits)(a), 1e-8)`, averaged over rows.
pub fn mimic_loss<T: Scalar>(g: &mut Graph<'_, T>, teacher: &Tensor<T>, logits: Var) -> nncore::Result<Var> {
    let rows = teacher.shape()[0];
    let p = g.softmax_rows(logits);
    let logp = g.ln_clamped(p, LOG_EPS);
    let weighted = g.mul_const(logp, teacher.clone())?;
    let s = g.sum(weighted);
    Ok(g.scale(s, -1.0 / rows as f64))
}

/// Student parameters: the teacher's policy side on top of the adapted
/// encoder, with the encoder frozen.
pub fn student_init(encoder: &ParamSet, teacher: &ParamSet) -> Result<ParamSet> {
    let mr = encoder.subset(ENCODER);
    if mr.is_empty() {
        return Err(Error::Config("student encoder has no M.* parameters".into()));
    }
    let mut p = teacher.clone();
    p.overwrite_from(&mr)?;
    p.set_all_trainable(true);
    p.set_trainable_prefix(ENCODER, false);
    Ok(p)
}

pub fn mimic_train(
    encoder: &ParamSet,
    teacher: &ParamSet,
    arch: &AgentArch,
    houses: &[Arc<HousePlan>],
    cfg: &MimicConfig,
    val: Option<&Validation>,
) -> Result<TrainOutcome> {
    if !(cfg.lambda >= 0.0) {
        return Err(Error::Config(format!("mimic weight {} must be non-negative", cfg.lambda)));
    }
    let student = student_init(encoder, teacher)?;
    let distill = Distill {
        teacher,
        weight: cfg.lambda,
    };
    let mut out = train(student, 0, arch, &cfg.train, houses, val, Some(distill))?;
    out.params.set_all_trainable(true);
    Ok(out)
}
