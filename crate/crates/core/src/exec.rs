//! Data-parallel execution helpers.
//!
//! With the `parallel` feature (default) per-item work is fanned out over the
//! rayon pool; without it everything runs on the calling thread. Results are
//! always returned in input order, so any reduction performed by the caller
//! over the returned vector is bit-identical in both modes.

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Parallel,
    Sequential,
}

/// Overrides the execution mode process-wide. `Parallel` is a no-op when the
/// crate was built without the `parallel` feature.
pub fn set_mode(mode: Mode) {
    FORCE_SEQUENTIAL.store(mode == Mode::Sequential, Ordering::SeqCst);
}

pub fn mode() -> Mode {
    if cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::SeqCst) {
        Mode::Parallel
    } else {
        Mode::Sequential
    }
}

/// Maps `f` over `items`, preserving order.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode() == Mode::Parallel {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    items.iter().map(f).collect()
}

/// Maps `f` over `0..n`, preserving order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode() == Mode::Parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let xs: Vec<u32> = (0..1000).collect();
        let ys = map(&xs, |x| x * 2);
        assert_eq!(ys, xs.iter().map(|x| x * 2).collect::<Vec<_>>());
        assert_eq!(map_range(5, |i| i), vec![0, 1, 2, 3, 4]);
    }
}
