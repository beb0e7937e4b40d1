//! Central finite-difference verification of [`Graph::backward`].
//!
//! Both the analytic and the numeric side run through the `f64`
//! instantiation of the same kernels, so the comparison measures the
//! backward rules rather than single-precision round-off.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::net::{LossHead, Sequential};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Something that can record a scalar loss on a graph of any precision.
pub trait LossBuilder {
    fn build<T: Scalar>(&self, g: &mut Graph<'_, T>) -> Result<Var>;
}

pub struct SequentialLoss<'a> {
    pub net: &'a Sequential,
    pub input: &'a Tensor,
    pub head: &'a LossHead,
}

impl LossBuilder for SequentialLoss<'_> {
    fn build<T: Scalar>(&self, g: &mut Graph<'_, T>) -> Result<Var> {
        self.net.loss(g, self.input, self.head)
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over parameter tensors of `|a - n| / max(1e-6, |a| + |n|)`,
    /// with `|.|` the Euclidean norm over the tensor's elements.
    pub max_rel_error: f64,
    pub worst_param: String,
    pub per_param: Vec<(String, f64)>,
    /// Same ratio taken element by element (informational; sensitive to
    /// rectifier kinks crossed by the perturbation).
    pub max_elementwise: f64,
    pub checked_elements: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-6)
}

/// Compares analytic gradients with central differences of step `eps` for
/// every trainable parameter element.
pub fn grad_check<L: LossBuilder>(params: &ParamSet, loss: &L, eps: f64) -> Result<GradCheckReport> {
    let base: ParamSet<f64> = params.cast();
    let analytic = {
        let mut g = Graph::new(&base);
        let l = loss.build(&mut g)?;
        g.backward(l)?
    };
    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let mut g = Graph::inference(p);
        let l = loss.build(&mut g)?;
        Ok(g.item(l))
    };

    let mut work = base.clone();
    let mut per_param = Vec::new();
    let mut max_elementwise: f64 = 0.0;
    let mut checked = 0;
    for i in 0..base.len() {
        let (name, p) = base.by_index(i);
        if !p.trainable {
            continue;
        }
        let name = name.to_string();
        let a_tensor = analytic.get(i).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec()));
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for j in 0..p.value.len() {
            let orig = p.value.data()[j];
            work.get_mut(&name)?.value.data_mut()[j] = orig + eps;
            let up = eval(&work)?;
            work.get_mut(&name)?.value.data_mut()[j] = orig - eps;
            let down = eval(&work)?;
            work.get_mut(&name)?.value.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = a_tensor.data()[j];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
            max_elementwise = max_elementwise.max(rel(a, numeric));
            checked += 1;
        }
        let err = diff2.sqrt() / (a2.sqrt() + n2.sqrt()).max(1e-6);
        per_param.push((name, err));
    }
    let (worst_param, max_rel_error) = per_param
        .iter()
        .cloned()
        .fold((String::new(), 0.0), |acc, (n, e)| if e > acc.1 { (n, e) } else { acc });
    Ok(GradCheckReport {
        max_rel_error,
        worst_param,
        per_param,
        max_elementwise,
        checked_elements: checked,
    })
}
