//! Data-parallel fan-out with an order-preserving sequential fallback.
//!
//! Results always come back in index order, so reductions done by the
//! caller are identical whichever mode ran the work.

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    /// Rayon work-stealing when the `parallel` feature is enabled,
    /// sequential otherwise.
    #[default]
    Parallel,
}

impl Exec {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    pub fn map<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    pub fn map_mut<I, R, F>(self, items: &mut [I], f: F) -> Vec<R>
    where
        I: Send,
        R: Send,
        F: Fn(usize, &mut I) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            use rayon::prelude::*;
            return items.par_iter_mut().enumerate().map(|(i, it)| f(i, it)).collect();
        }
        items.iter_mut().enumerate().map(|(i, it)| f(i, it)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_agree() {
        let f = |i: usize| (i as f32).sqrt() * 3.0;
        assert_eq!(Exec::Sequential.map(1000, f), Exec::Parallel.map(1000, f));
        let mut a: Vec<u32> = (0..50).collect();
        let mut b = a.clone();
        let ra = Exec::Sequential.map_mut(&mut a, |i, v| {
            *v += 1;
            i as u32 * *v
        });
        let rb = Exec::Parallel.map_mut(&mut b, |i, v| {
            *v += 1;
            i as u32 * *v
        });
        assert_eq!(ra, rb);
        assert_eq!(a, b);
    }
}
