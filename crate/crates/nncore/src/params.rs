use indexmap::IndexMap;

use crate::error::{NnError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Scalar = f32> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

/// Ordered collection of named parameters with a gradient buffer each.
///
/// Names are dotted paths whose first segment is the component prefix
/// (`M.`, `G.`, `R.`, `P.`, `V.`, `D.` ...), which is what freezing and
/// stage hand-off operate on.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T: Scalar = f32> {
    entries: IndexMap<String, Param<T>>,
}

/// Per-parameter gradients produced by one backward pass, aligned with the
/// order of the [`ParamSet`] the graph was built against.
#[derive(Clone, Debug)]
pub struct Gradients<T: Scalar = f32> {
    pub(crate) grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(params: &ParamSet<T>) -> Self {
        Self {
            grads: vec![None; params.len()],
        }
    }

    pub fn get(&self, index: usize) -> Option<&Tensor<T>> {
        self.grads.get(index).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds `other` into `self`; both must come from the same parameter layout.
    pub fn merge(&mut self, other: &Gradients<T>) {
        assert_eq!(self.grads.len(), other.grads.len(), "gradient layout mismatch");
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => a.add_assign(b),
                (None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, c: T) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_assign(c);
        }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(NnError::DuplicateParam(name));
        }
        let grad = Tensor::zeros(value.shape().to_vec());
        self.entries.insert(
            name,
            Param {
                value,
                grad,
                trainable: true,
            },
        );
        Ok(())
    }

    /// Inserts or overwrites, keeping position for existing names.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        match self.entries.get_mut(name) {
            Some(p) => {
                if p.value.shape() != value.shape() {
                    return Err(NnError::Shape(format!(
                        "`{name}`: {:?} vs {:?}",
                        p.value.shape(),
                        value.shape()
                    )));
                }
                p.value = value;
                Ok(())
            }
            None => self.insert(name, value),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.entries
            .get_index_of(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name).map(|p| &p.value)
    }

    pub fn by_index(&self, index: usize) -> (&str, &Param<T>) {
        let (k, v) = self.entries.get_index(index).expect("param index");
        (k.as_str(), v)
    }

    pub(crate) fn by_index_mut(&mut self, index: usize) -> (&str, &mut Param<T>) {
        let (k, v) = self.entries.get_index_mut(index).expect("param index");
        (k.as_str(), v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.fill(T::zero());
        }
    }

    /// Marks every parameter whose name starts with `prefix` as (non-)trainable.
    /// Returns how many parameters matched.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for (k, p) in self.entries.iter_mut() {
            if k.starts_with(prefix) {
                p.trainable = trainable;
                n += 1;
            }
        }
        n
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in self.entries.values_mut() {
            p.trainable = trainable;
        }
    }

    /// Adds a backward pass' gradients into the trainable parameters' buffers.
    /// Frozen parameters keep an all-zero gradient.
    pub fn accumulate(&mut self, grads: &Gradients<T>) -> Result<()> {
        if grads.grads.len() != self.entries.len() {
            return Err(NnError::Shape(format!(
                "gradient layout has {} entries, parameter set {}",
                grads.grads.len(),
                self.entries.len()
            )));
        }
        for (p, g) in self.entries.values_mut().zip(&grads.grads) {
            if let (true, Some(g)) = (p.trainable, g) {
                p.grad.add_assign(g);
            }
        }
        Ok(())
    }

    pub fn grad_norm(&self) -> T {
        self.entries
            .values()
            .map(|p| p.grad.sum_squares())
            .sum::<T>()
            .sqrt()
    }

    /// Rescales gradients so that their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: T) -> T {
        let norm = self.grad_norm();
        if norm > max_norm && norm > T::zero() {
            let c = max_norm / norm;
            for p in self.entries.values_mut() {
                p.grad.scale_assign(c);
            }
        }
        norm
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            grad: p.grad.cast(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// New set holding copies of the parameters under `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamSet<T> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, p)| (k.clone(), p.clone()))
                .collect(),
        }
    }

    /// Copies every value of `other` into `self`, inserting unknown names.
    pub fn overwrite_from(&mut self, other: &ParamSet<T>) -> Result<()> {
        for (k, p) in other.iter() {
            self.set(k, p.value.clone())?;
        }
        Ok(())
    }

    /// Same names under a different leading component, e.g. `M.` to `Ms.`.
    pub fn renamed_prefix(&self, from: &str, to: &str) -> ParamSet<T> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    let name = match k.strip_prefix(from) {
                        Some(rest) => format!("{to}{rest}"),
                        None => k.clone(),
                    };
                    (name, p.clone())
                })
                .collect(),
        }
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.entries.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|p| p.value.is_finite())
    }

    /// FNV-1a over names and the bit patterns of all values.
    pub fn checksum(&self) -> u64 {
        const PRIME: u64 = 0x100000001b3;
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(PRIME);
        };
        for (k, p) in &self.entries {
            k.bytes().for_each(&mut eat);
            for v in p.value.data() {
                v.as_f64().to_bits().to_le_bytes().into_iter().for_each(&mut eat);
            }
        }
        h
    }

    pub fn checksum_prefix(&self, prefix: &str) -> u64 {
        self.subset(prefix).checksum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("M.w", Tensor::full(vec![2, 2], 1.0)).unwrap();
        p.insert("P.w", Tensor::full(vec![3], 2.0)).unwrap();
        p
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = sample();
        assert!(matches!(
            p.insert("M.w", Tensor::zeros(vec![1])),
            Err(NnError::DuplicateParam(_))
        ));
    }

    #[test]
    fn frozen_params_receive_no_gradient() {
        let mut p = sample();
        p.set_trainable_prefix("M.", false);
        let mut g = Gradients::zeros_like(&p);
        g.grads[0] = Some(Tensor::full(vec![2, 2], 5.0));
        g.grads[1] = Some(Tensor::full(vec![3], 1.0));
        p.accumulate(&g).unwrap();
        assert!(p.get("M.w").unwrap().grad.data().iter().all(|&v| v == 0.0));
        assert!(p.get("P.w").unwrap().grad.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut p = sample();
        p.get_mut("P.w").unwrap().grad = Tensor::vector(vec![3.0, 4.0, 0.0]);
        let before = p.clip_grad_norm(1.0);
        assert!((before - 5.0).abs() < 1e-6);
        assert!((p.grad_norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn checksum_sees_single_bit() {
        let p = sample();
        let mut q = p.clone();
        q.get_mut("P.w").unwrap().value.data_mut()[1] = f32::from_bits(2.0f32.to_bits() + 1);
        assert_ne!(p.checksum(), q.checksum());
        assert_eq!(p.checksum_prefix("M."), q.checksum_prefix("M."));
    }

    #[test]
    fn rename_prefix() {
        let p = sample().renamed_prefix("M.", "Ms.");
        assert!(p.contains("Ms.w"));
        assert!(p.contains("P.w"));
    }
}
