//! Retry with exponential backoff and bounded-parallel mapping, shared by the
//! remote embedding client and the oracle dispatcher.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

/// Failure reported by a remote transport.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{message}")]
pub struct TransportError {
    pub message: String,
    /// Whether another attempt could plausibly succeed.
    pub retryable: bool,
}

impl TransportError {
    pub fn retryable(message: impl Into<String>) -> Self {
        Self { message: message.into(), retryable: true }
    }

    pub fn fatal(message: impl Into<String>) -> Self {
        Self { message: message.into(), retryable: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Attempts after the first one.
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 3, base_delay_ms: 500, max_delay_ms: 8_000 }
    }
}

impl RetryPolicy {
    pub fn no_delay(max_retries: u32) -> Self {
        Self { max_retries, base_delay_ms: 0, max_delay_ms: 0 }
    }

    fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u64.checked_shl(attempt).unwrap_or(u64::MAX);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }
}

/// Run `op` until it succeeds, fails with a non-retryable error, or the
/// retry budget is spent. Returns the last error together with the number of
/// attempts made.
pub fn retry<T>(
    policy: &RetryPolicy,
    mut op: impl FnMut() -> Result<T, TransportError>,
) -> Result<T, (TransportError, u32)> {
    let mut attempt = 0;
    loop {
        match op() {
            Ok(value) => return Ok(value),
            Err(err) if err.retryable && attempt < policy.max_retries => {
                tracing::debug!(attempt, error = %err, "transient failure, backing off");
                std::thread::sleep(policy.delay(attempt));
                attempt += 1;
            }
            Err(err) => return Err((err, attempt + 1)),
        }
    }
}

/// Apply `f` to every item with at most `parallelism` concurrent workers.
/// Output order matches input order regardless of completion order.
pub fn bounded_map<I, O, F>(items: &[I], parallelism: usize, f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(usize, &I) -> O + Sync,
{
    let workers = parallelism.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().enumerate().map(|(i, item)| f(i, item)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<O>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let index = next.fetch_add(1, Ordering::Relaxed);
                if index >= items.len() {
                    break;
                }
                let out = f(index, &items[index]);
                slots.lock().expect("result slots poisoned")[index] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots poisoned")
        .into_iter()
        .map(|slot| slot.expect("every index visited"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn retry_stops_after_budget() {
        let calls = Cell::new(0);
        let out: Result<(), _> = retry(&RetryPolicy::no_delay(2), || {
            calls.set(calls.get() + 1);
            Err(TransportError::retryable("down"))
        });
        let (err, attempts) = out.unwrap_err();
        assert_eq!(err.message, "down");
        assert_eq!(attempts, 3);
        assert_eq!(calls.get(), 3);
    }

    #[test]
    fn fatal_errors_are_not_retried() {
        let calls = Cell::new(0);
        let out: Result<(), _> = retry(&RetryPolicy::no_delay(5), || {
            calls.set(calls.get() + 1);
            Err(TransportError::fatal("bad request"))
        });
        assert!(out.is_err());
        assert_eq!(calls.get(), 1);
    }

    #[test]
    fn retry_recovers() {
        let calls = Cell::new(0);
        let out = retry(&RetryPolicy::no_delay(3), || {
            calls.set(calls.get() + 1);
            if calls.get() < 3 {
                Err(TransportError::retryable("flaky"))
            } else {
                Ok(calls.get())
            }
        });
        assert_eq!(out.unwrap(), 3);
    }

    #[test]
    fn bounded_map_preserves_order() {
        let items: Vec<u64> = (0..100).collect();
        let out = bounded_map(&items, 7, |i, x| {
            std::thread::sleep(Duration::from_micros((100 - x) * 10));
            (i as u64) * 10 + x
        });
        assert_eq!(out, (0..100).map(|x| x * 11).collect::<Vec<_>>());
    }

    #[test]
    fn backoff_is_capped() {
        let policy = RetryPolicy { max_retries: 10, base_delay_ms: 100, max_delay_ms: 1000 };
        assert_eq!(policy.delay(0), Duration::from_millis(100));
        assert_eq!(policy.delay(3), Duration::from_millis(800));
        assert_eq!(policy.delay(9), Duration::from_millis(1000));
    }
}
