//! Execution strategy for the data-parallel loops (mini-batch gradients,
//! evaluation episodes, lockstep actors, experiment sweeps).
//!
//! Work is always split into the same chunks in the same order, and partial
//! results are combined sequentially, so both strategies produce
//! bit-identical results. Without the `parallel` feature `Parallel`
//! degrades to `Sequential`.

/// How data-parallel loops are executed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// Whether this build can actually run work on more than one thread.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }

    /// Maps `f` over `0..n`, returning results in index order.
    pub fn map_indices<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Applies `f` to every element of `items` in place.
    pub fn for_each_mut<T, F>(self, items: &mut [T], f: F)
    where
        T: Send,
        F: Fn(usize, &mut T) + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            use rayon::prelude::*;
            items.par_iter_mut().enumerate().for_each(|(i, t)| f(i, t));
            return;
        }
        items.iter_mut().enumerate().for_each(|(i, t)| f(i, t));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategies_agree_on_order() {
        let seq = Execution::Sequential.map_indices(100, |i| i * i);
        let par = Execution::Parallel.map_indices(100, |i| i * i);
        assert_eq!(seq, par);
    }

    #[test]
    fn for_each_mut_visits_every_item() {
        let mut items = vec![0usize; 37];
        Execution::Parallel.for_each_mut(&mut items, |i, x| *x = i + 1);
        assert_eq!(items.iter().sum::<usize>(), (1..=37).sum());
    }
}
