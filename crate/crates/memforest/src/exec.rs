//! Thread-backed executor and wall clock.

use std::any::Any;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use memforest_core::backends::{Clock, Executor};

/// Runs tasks on up to `budget` scoped threads. Results come back in task
/// order.
#[derive(Debug, Clone, Copy)]
pub struct Threads {
    budget: usize,
}

impl Threads {
    pub fn new(budget: usize) -> Self {
        Self { budget: budget.max(1) }
    }
}

impl Executor for Threads {
    fn budget(&self) -> usize {
        self.budget
    }

    fn execute(
        &self,
        count: usize,
        task: &(dyn Fn(usize) -> Box<dyn Any + Send> + Sync),
    ) -> Vec<Box<dyn Any + Send>> {
        let workers = self.budget.min(count);
        if workers <= 1 {
            return (0..count).map(task).collect();
        }
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Box<dyn Any + Send>>>> = (0..count).map(|_| Mutex::new(None)).collect();
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= count {
                        break;
                    }
                    let r = task(i);
                    *slots[i].lock().expect("slot") = Some(r);
                });
            }
        });
        slots
            .into_iter()
            .map(|m| m.into_inner().expect("slot").expect("task ran"))
            .collect()
    }
}

/// Microseconds since construction.
#[derive(Debug, Clone, Copy)]
pub struct SystemClock {
    start: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        Self { start: Instant::now() }
    }
}

impl Clock for SystemClock {
    fn now_micros(&self) -> Option<u64> {
        Some(self.start.elapsed().as_micros() as u64)
    }
}
