use std::time::Duration;

use serde::{Deserialize, Serialize};

/// Exponential backoff: attempt `k` (0-based) waits `base * 2^k`, capped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 4,
            base_delay_ms: 500,
            max_delay_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        RetryPolicy {
            max_retries: 0,
            base_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u64.checked_shl(attempt).unwrap_or(u64::MAX);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }

    /// Run `op` until it succeeds, fails with a non-retryable error, or the
    /// retry budget is spent. The last error is returned.
    pub fn run<T, E>(&self, mut op: impl FnMut() -> Result<T, E>, retryable: impl Fn(&E) -> bool) -> Result<T, E> {
        let mut attempt = 0;
        loop {
            match op() {
                Ok(v) => return Ok(v),
                Err(e) if attempt < self.max_retries && retryable(&e) => {
                    let wait = self.delay(attempt);
                    tracing::warn!(attempt, wait_ms = wait.as_millis() as u64, "retrying after transient failure");
                    std::thread::sleep(wait);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy {
            max_retries: 10,
            base_delay_ms: 100,
            max_delay_ms: 1000,
        };
        let ms: Vec<u128> = (0..6).map(|a| p.delay(a).as_millis()).collect();
        assert_eq!(ms, [100, 200, 400, 800, 1000, 1000]);
        assert_eq!(p.delay(200).as_millis(), 1000);
    }

    #[test]
    fn retries_transient_then_succeeds() {
        let p = RetryPolicy {
            max_retries: 3,
            base_delay_ms: 0,
            max_delay_ms: 0,
        };
        let mut calls = 0;
        let r: Result<u32, &str> = p.run(
            || {
                calls += 1;
                if calls < 3 { Err("busy") } else { Ok(7) }
            },
            |_| true,
        );
        assert_eq!(r, Ok(7));
        assert_eq!(calls, 3);
    }

    #[test]
    fn gives_up_and_skips_fatal() {
        let p = RetryPolicy {
            max_retries: 2,
            base_delay_ms: 0,
            max_delay_ms: 0,
        };
        let mut calls = 0;
        let r: Result<(), &str> = p.run(
            || {
                calls += 1;
                Err("busy")
            },
            |_| true,
        );
        assert!(r.is_err());
        assert_eq!(calls, 3);

        calls = 0;
        let r: Result<(), &str> = p.run(
            || {
                calls += 1;
                Err("fatal")
            },
            |e| *e != "fatal",
        );
        assert!(r.is_err());
        assert_eq!(calls, 1);
    }
}
