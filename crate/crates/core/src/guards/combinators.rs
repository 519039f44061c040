use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use super::{Dependencies, Guard, GuardError, Verdict};
use crate::state::Context;

pub const PARALLEL_FEEDBACK_SEPARATOR: &str = "\n---\n";

/// Conjunction evaluated in order, stopping at the first failure.
pub struct CompositeGuard {
    guards: Vec<Arc<dyn Guard>>,
}

impl CompositeGuard {
    pub fn new(guards: Vec<Arc<dyn Guard>>) -> Result<Self, GuardError> {
        if guards.is_empty() {
            return Err(GuardError::Misconfigured("composite guard needs at least one member".into()));
        }
        Ok(Self { guards })
    }
}

impl Guard for CompositeGuard {
    fn type_name(&self) -> &str {
        "composite"
    }

    fn is_replayable(&self) -> bool {
        self.guards.iter().all(|g| g.is_replayable())
    }

    fn evaluate(&self, artifact: &str, ctx: &Context, deps: &Dependencies) -> Result<Verdict, GuardError> {
        for guard in &self.guards {
            let verdict = guard.evaluate(artifact, ctx, deps)?;
            if !verdict.passed {
                return Ok(verdict);
            }
        }
        Ok(Verdict::pass())
    }
}

/// Conjunction evaluated concurrently on up to `max_workers` threads.
///
/// Every member runs; failing feedback is joined in registration order so
/// the verdict does not depend on completion order.
pub struct ParallelGuard {
    guards: Vec<Arc<dyn Guard>>,
    max_workers: usize,
}

impl ParallelGuard {
    pub const DEFAULT_MAX_WORKERS: usize = 4;

    pub fn new(guards: Vec<Arc<dyn Guard>>, max_workers: usize) -> Result<Self, GuardError> {
        if max_workers == 0 {
            return Err(GuardError::Misconfigured("parallel guard needs max_workers >= 1".into()));
        }
        Ok(Self { guards, max_workers })
    }
}

impl Guard for ParallelGuard {
    fn type_name(&self) -> &str {
        "parallel"
    }

    fn is_replayable(&self) -> bool {
        self.guards.iter().all(|g| g.is_replayable())
    }

    fn evaluate(&self, artifact: &str, ctx: &Context, deps: &Dependencies) -> Result<Verdict, GuardError> {
        let results: Vec<Mutex<Option<Result<Verdict, GuardError>>>> =
            self.guards.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = self.max_workers.min(self.guards.len());
        thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(guard) = self.guards.get(i) else { break };
                    let r = guard.evaluate(artifact, ctx, deps);
                    *results[i].lock().expect("result slot") = Some(r);
                });
            }
        });

        let mut failures = Vec::new();
        for slot in results {
            match slot.into_inner().expect("result slot").expect("every member evaluated") {
                Err(e) => return Err(e),
                Ok(v) if !v.passed => failures.push(v.feedback),
                Ok(_) => {}
            }
        }
        Ok(if failures.is_empty() {
            Verdict::pass()
        } else {
            Verdict::fail(failures.join(PARALLEL_FEEDBACK_SEPARATOR))
        })
    }
}
