//! Data-parallel helpers.
//!
//! With the `parallel` feature (on by default) batch work fans out over the
//! rayon pool; without it, or with [`ExecMode::Sequential`], the same closures
//! run in order on the calling thread. Results are always returned in input
//! order and reductions are performed sequentially afterwards, so the mode
//! never changes numerical output.

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ExecMode {
    Sequential,
    #[default]
    Parallel,
}

impl ExecMode {
    /// `Parallel` when the crate was built with rayon support.
    pub fn available() -> Self {
        if cfg!(feature = "parallel") {
            ExecMode::Parallel
        } else {
            ExecMode::Sequential
        }
    }
}

/// Maps `f` over `0..n` and collects results in index order.
pub fn map_indexed<T, F>(mode: ExecMode, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

pub fn map_slice<I, T, F>(mode: ExecMode, items: &[I], f: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> T + Sync + Send,
{
    map_indexed(mode, items.len(), |i| f(&items[i]))
}

/// Mutable variant of [`map_slice`]; each closure call gets exclusive access
/// to one element.
pub fn map_slice_mut<I, T, F>(mode: ExecMode, items: &mut [I], f: F) -> Vec<T>
where
    I: Send,
    T: Send,
    F: Fn(&mut I) -> T + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            use rayon::prelude::*;
            items.par_iter_mut().map(f).collect()
        }
        _ => items.iter_mut().map(f).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_and_preserve_order() {
        let seq = map_indexed(ExecMode::Sequential, 100, |i| (i as f64).sqrt());
        let par = map_indexed(ExecMode::available(), 100, |i| (i as f64).sqrt());
        assert_eq!(seq, par);
        let mut items: Vec<u32> = (0..10).collect();
        let out = map_slice_mut(ExecMode::available(), &mut items, |v| {
            *v *= 2;
            *v + 1
        });
        assert_eq!(items, (0..10).map(|v| v * 2).collect::<Vec<_>>());
        assert_eq!(out[3], 7);
    }
}
