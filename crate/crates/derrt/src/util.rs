//! Small shared helpers.

/// Worker count for parallel sections: `DERRT_THREADS` if set, otherwise the
/// machine's available parallelism.
pub fn worker_threads() -> usize {
    if let Ok(v) = std::env::var("DERRT_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

/// Run `jobs` items through `work` on up to [`worker_threads`] threads,
/// collecting results in job order regardless of completion order.
pub fn parallel_map<T, R, F>(jobs: Vec<T>, work: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    let n_workers = worker_threads().min(jobs.len().max(1));
    if n_workers <= 1 {
        return jobs.into_iter().map(work).collect();
    }
    let jobs: Vec<std::sync::Mutex<Option<T>>> = jobs
        .into_iter()
        .map(|j| std::sync::Mutex::new(Some(j)))
        .collect();
    let results: Vec<std::sync::Mutex<Option<R>>> = (0..jobs.len())
        .map(|_| std::sync::Mutex::new(None))
        .collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..n_workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let job = jobs[i].lock().unwrap().take().unwrap();
                let out = work(job);
                *results[i].lock().unwrap() = Some(out);
            });
        }
    });
    results
        .into_iter()
        .map(|m| m.into_inner().unwrap().unwrap())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_map_preserves_order() {
        let jobs: Vec<usize> = (0..100).collect();
        let out = parallel_map(jobs, |i| i * i);
        for (i, v) in out.iter().enumerate() {
            assert_eq!(*v, i * i);
        }
    }
}
