//! Data-parallel helpers that fall back to sequential iteration when the
//! `parallel` feature is off or sequential mode is requested.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    #[default]
    Parallel,
    Sequential,
}

impl ExecMode {
    /// Parallel only if the crate was built with rayon.
    pub fn effective(self) -> Self {
        if cfg!(feature = "parallel") { self } else { ExecMode::Sequential }
    }
}

/// Maps `f` over `items`, preserving order.
pub fn map<T, R, F>(mode: ExecMode, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match mode.effective() {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            use rayon::prelude::*;
            items.par_iter().map(f).collect()
        }
        _ => items.iter().map(f).collect(),
    }
}

/// Number of worker threads `map` would use.
pub fn threads(mode: ExecMode) -> usize {
    match mode.effective() {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => rayon::current_num_threads(),
        _ => 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let xs: Vec<u64> = (0..100).collect();
        let a = map(ExecMode::Parallel, &xs, |x| x * x);
        let b = map(ExecMode::Sequential, &xs, |x| x * x);
        assert_eq!(a, b);
    }
}
