//! Order-preserving parallel map over independent jobs.

use std::num::NonZeroUsize;
use std::thread;

fn workers() -> usize {
    thread::available_parallelism().map(NonZeroUsize::get).unwrap_or(1)
}

/// `(0..n).map(f)` computed on a bounded pool; output order is by index.
pub fn map<T: Send, F: Fn(usize) -> T + Sync>(n: usize, f: F) -> Vec<T> {
    let w = workers().min(n);
    if w <= 1 {
        return (0..n).map(f).collect();
    }
    let f = &f;
    let mut parts: Vec<Vec<T>> = thread::scope(|scope| {
        let handles: Vec<_> =
            (0..w).map(|k| scope.spawn(move || (k..n).step_by(w).map(f).collect::<Vec<T>>())).collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut iters: Vec<_> = parts.iter_mut().map(|p| p.drain(..)).collect();
    (0..n).map(|i| iters[i % w].next().expect("worker produced too few results")).collect()
}
