//! Experiment orchestration: configuration, content-addressed caching, the
//! staged pipeline and report emission.

pub mod cache;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;

pub use config::{ExperimentConfig, Stage};
pub use error::HarnessError;
pub use pipeline::{run_pipeline, RunOptions};
pub use report::{emit_report, Format, MetricsReport};

/// Environment variable overriding the worker thread count.
pub const THREADS_ENV: &str = "PHYPROBE_THREADS";

/// Worker threads: the environment override, else the available parallelism.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Maps `f` over `items` on up to `threads` scoped threads. Output order
/// matches input order, so results do not depend on scheduling.
pub fn par_map<T, R, F>(threads: usize, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<R>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_map_preserves_order() {
        let items: Vec<u64> = (0..37).collect();
        for threads in [1, 2, 5, 64] {
            assert_eq!(par_map(threads, &items, |x| x * x), items.iter().map(|x| x * x).collect::<Vec<_>>());
        }
        assert!(par_map(4, &Vec::<u8>::new(), |x| *x).is_empty());
    }
}
