use alloc::boxed::Box;
use alloc::vec::Vec;
use core::any::Any;

/// Runs independent tasks, possibly concurrently.
///
/// Implementations must return results in task order regardless of
/// completion order. The trait is object safe; use [`par_map`] for a typed
/// interface.
pub trait Executor: Sync {
    /// Maximum number of tasks in flight.
    fn budget(&self) -> usize;

    fn execute(
        &self,
        count: usize,
        task: &(dyn Fn(usize) -> Box<dyn Any + Send> + Sync),
    ) -> Vec<Box<dyn Any + Send>>;
}

/// Runs every task on the calling thread, in order.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn budget(&self) -> usize {
        1
    }

    fn execute(
        &self,
        count: usize,
        task: &(dyn Fn(usize) -> Box<dyn Any + Send> + Sync),
    ) -> Vec<Box<dyn Any + Send>> {
        (0..count).map(task).collect()
    }
}

/// Maps `f` over `items` through `exec`, preserving order.
pub fn par_map<T, R, F>(exec: &dyn Executor, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send + 'static,
    F: Fn(&T) -> R + Sync,
{
    if items.is_empty() {
        return Vec::new();
    }
    let task = |i: usize| -> Box<dyn Any + Send> { Box::new(f(&items[i])) };
    exec.execute(items.len(), &task)
        .into_iter()
        .map(|b| *b.downcast::<R>().expect("executor returned a foreign result type"))
        .collect()
}

/// Monotonic microsecond clock. `None` means timing is not collected.
pub trait Clock: Sync {
    fn now_micros(&self) -> Option<u64>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NullClock;

impl Clock for NullClock {
    fn now_micros(&self) -> Option<u64> {
        None
    }
}
