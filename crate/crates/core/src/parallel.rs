//! Fixed-size worker pool for sweeps. With one thread, or without the
//! `parallel` feature, work runs in order on the calling thread.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug)]
pub struct Workers {
    threads: usize,
    #[cfg(feature = "parallel")]
    pool: Option<rayon::ThreadPool>,
}

impl Workers {
    pub fn new(threads: usize) -> Result<Self, String> {
        if threads == 0 {
            return Err("parallelism must be at least 1".into());
        }
        #[cfg(feature = "parallel")]
        let pool = if threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .thread_name(|i| format!("sweep-worker-{i}"))
                    .build()
                    .map_err(|e| e.to_string())?,
            )
        } else {
            None
        };
        Ok(Workers {
            threads,
            #[cfg(feature = "parallel")]
            pool,
        })
    }

    pub fn sequential() -> Self {
        Workers::new(1).expect("one thread is valid")
    }

    pub fn threads(&self) -> usize {
        self.threads
    }

    /// Maps `f` over `items`, preserving order in the output.
    pub fn map<T, R, F>(&self, items: Vec<T>, f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            return pool.install(|| items.into_par_iter().map(&f).collect());
        }
        items.into_iter().map(f).collect()
    }
}
