//! Data-parallel maps with a sequential fallback.
//!
//! Every helper here returns results in input order, and reductions happen
//! sequentially over that order, so a parallel run is bit-identical to a
//! sequential one.

/// How a batch map is executed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// `Parallel` only when the crate was built with the `parallel` feature.
    pub fn effective(self) -> Exec {
        if cfg!(feature = "parallel") {
            self
        } else {
            Exec::Sequential
        }
    }
}

pub fn threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// Ordered map over a slice.
pub fn map<T, R, F>(exec: Exec, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match exec.effective() {
        Exec::Sequential => items.iter().map(f).collect(),
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            items.par_iter().map(f).collect()
        }
        #[cfg(not(feature = "parallel"))]
        Exec::Parallel => unreachable!(),
    }
}

/// Ordered map over `0..n`.
pub fn map_range<R, F>(exec: Exec, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match exec.effective() {
        Exec::Sequential => (0..n).map(f).collect(),
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        #[cfg(not(feature = "parallel"))]
        Exec::Parallel => unreachable!(),
    }
}

/// Map items in chunks of at most `threads()` and fold each chunk's results
/// in order. Peak memory is one chunk of `R` instead of the whole batch.
pub fn map_fold<T, R, A, F, G>(exec: Exec, items: &[T], init: A, f: F, mut fold: G) -> A
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
    G: FnMut(A, R) -> A,
{
    let chunk = match exec.effective() {
        Exec::Sequential => 1,
        Exec::Parallel => threads().max(1),
    };
    let mut acc = init;
    for block in items.chunks(chunk) {
        for r in map(exec, block, &f) {
            acc = fold(acc, r);
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        let f = |x: &f64| x * x + 0.1;
        assert_eq!(map(Exec::Sequential, &xs, f), map(Exec::Parallel, &xs, f));
        let fold = |a: f64, r: f64| a + r;
        let s = map_fold(Exec::Sequential, &xs, 0.0, f, fold);
        let p = map_fold(Exec::Parallel, &xs, 0.0, f, fold);
        assert_eq!(s.to_bits(), p.to_bits());
    }
}
