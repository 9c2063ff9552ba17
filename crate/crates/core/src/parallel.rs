//! Data-parallel map over independent work items.
//!
//! With the `parallel` feature (default) an [`Executor`] with more than one
//! worker runs on its own rayon pool; otherwise everything runs sequentially
//! on the calling thread. Results always come back in input order, so any
//! reduction the caller performs afterwards is deterministic regardless of
//! the worker count.

#[cfg(feature = "parallel")]
use std::sync::Arc;

#[derive(Clone)]
pub struct Executor {
    workers: usize,
    #[cfg(feature = "parallel")]
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Executor")
            .field("workers", &self.workers)
            .finish()
    }
}

impl Default for Executor {
    fn default() -> Self {
        Executor::sequential()
    }
}

impl Executor {
    pub fn sequential() -> Self {
        Executor {
            workers: 1,
            #[cfg(feature = "parallel")]
            pool: None,
        }
    }

    /// `workers == 0` means one worker per available core.
    pub fn new(workers: usize) -> Self {
        #[cfg(feature = "parallel")]
        {
            let workers = if workers == 0 {
                std::thread::available_parallelism().map_or(1, |n| n.get())
            } else {
                workers
            };
            if workers <= 1 {
                return Executor::sequential();
            }
            match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
                Ok(pool) => Executor {
                    workers,
                    pool: Some(Arc::new(pool)),
                },
                Err(e) => {
                    log::warn!("could not start {workers} workers ({e}); running sequentially");
                    Executor::sequential()
                }
            }
        }
        #[cfg(not(feature = "parallel"))]
        {
            if workers != 1 {
                log::warn!("built without the `parallel` feature; ignoring workers={workers}");
            }
            Executor::sequential()
        }
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            use rayon::prelude::*;
            return pool.install(|| items.par_iter().map(&f).collect());
        }
        items.iter().map(f).collect()
    }

    pub fn map_range<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            use rayon::prelude::*;
            return pool.install(|| (0..n).into_par_iter().map(&f).collect());
        }
        (0..n).map(f).collect()
    }

    /// `map` over fallible work, stopping at the first error in input order.
    pub fn try_map<T, R, E, F>(&self, items: &[T], f: F) -> Result<Vec<R>, E>
    where
        T: Sync,
        R: Send,
        E: Send,
        F: Fn(&T) -> Result<R, E> + Sync + Send,
    {
        self.map(items, f).into_iter().collect()
    }
}
