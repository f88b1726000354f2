//! Data-parallel helpers with a sequential path.
//!
//! Without the `parallel` feature every call runs sequentially, whatever
//! the requested [`Execution`]. Results are always returned in input order,
//! so both paths produce identical output.

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// Whether work will actually be spread over threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Maps `f` over `items`, keeping order.
pub fn map<T, R, F>(exec: Execution, items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return items.into_par_iter().map(f).collect();
    }
    let _ = exec;
    items.into_iter().map(f).collect()
}

/// Maps `f` over `0..n`, keeping order.
pub fn map_range<R, F>(exec: Execution, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Like [`map_range`], but every worker gets scratch state from `init`
/// that it may reuse across indices. `f` must leave the state as it found
/// it for results to be independent of scheduling.
pub fn map_range_init<S, R, I, F>(exec: Execution, n: usize, init: I, f: F) -> Vec<R>
where
    R: Send,
    I: Fn() -> S + Sync + Send,
    F: Fn(&mut S, usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map_init(&init, |s, i| f(s, i)).collect();
    }
    let _ = exec;
    let mut state = init();
    (0..n).map(|i| f(&mut state, i)).collect()
}
