//! Sequential / data-parallel dispatch.
//!
//! Callers pick an [`ExecMode`]; every helper returns results in index order so
//! that both schedules are bit-identical. With the `parallel` feature disabled,
//! [`ExecMode::Parallel`] silently runs sequentially.

/// Execution schedule for data-parallel loops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ExecMode {
    Sequential,
    #[default]
    Parallel,
}

impl ExecMode {
    /// True when work will actually be spread over the rayon pool.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == ExecMode::Parallel
    }
}

/// `(0..n).map(f).collect()` under the chosen schedule.
pub fn map_range<T, F>(mode: ExecMode, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = mode;
    (0..n).map(f).collect()
}

/// `items.iter().map(f).collect()` under the chosen schedule.
pub fn map_slice<S, T, F>(mode: ExecMode, items: &[S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    let _ = mode;
    items.iter().map(f).collect()
}

/// Apply `f(row_index, row)` to every `width`-long row of `buf`.
pub fn for_each_row<T, F>(mode: ExecMode, buf: &mut [T], width: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if width == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        use rayon::prelude::*;
        buf.par_chunks_mut(width)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
        return;
    }
    let _ = mode;
    buf.chunks_mut(width)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}

/// Short-circuiting `any` over a slice.
pub fn any<S, F>(mode: ExecMode, items: &[S], f: F) -> bool
where
    S: Sync,
    F: Fn(&S) -> bool + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        use rayon::prelude::*;
        return items.par_iter().any(f);
    }
    let _ = mode;
    items.iter().any(f)
}
