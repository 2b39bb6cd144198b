use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Provider, ProviderError, Request, Response};

/// Counters shared by the wrappers; snapshot with [`CallStats::snapshot`].
#[derive(Debug, Default)]
pub struct CallStats {
    pub calls: AtomicU64,
    pub cache_hits: AtomicU64,
    pub retries: AtomicU64,
    pub failures: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounts {
    /// Calls that reached the wrapped provider.
    pub calls: u64,
    pub cache_hits: u64,
    pub retries: u64,
    pub failures: u64,
}

impl CallStats {
    pub fn snapshot(&self) -> CallCounts {
        CallCounts {
            calls: self.calls.load(Ordering::Relaxed),
            cache_hits: self.cache_hits.load(Ordering::Relaxed),
            retries: self.retries.load(Ordering::Relaxed),
            failures: self.failures.load(Ordering::Relaxed),
        }
    }
}

/// Disk cache keyed by [`Request::cache_key`]. Only successes are stored.
pub struct CachedProvider<P> {
    inner: P,
    dir: PathBuf,
    pub stats: CallStats,
}

impl<P: Provider> CachedProvider<P> {
    pub fn new(inner: P, dir: impl Into<PathBuf>) -> Self {
        CachedProvider {
            inner,
            dir: dir.into(),
            stats: CallStats::default(),
        }
    }

    /// `KEYSG_CACHE_DIR` when set, otherwise `default`.
    pub fn from_env(inner: P, default: &Path) -> Self {
        let dir = std::env::var_os("KEYSG_CACHE_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|| default.to_path_buf());
        Self::new(inner, dir)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(&key[..2]).join(format!("{key}.json"))
    }

    fn store(&self, path: &Path, value: &Response) {
        let Some(parent) = path.parent() else { return };
        if std::fs::create_dir_all(parent).is_err() {
            return;
        }
        // Write-then-rename keeps concurrent writers of one key from
        // exposing a torn file; the last rename wins with identical bytes.
        let tmp = parent.join(format!(
            ".{}.{:?}.tmp",
            std::process::id(),
            std::thread::current().id()
        ));
        let bytes = serde_json::to_vec(value).expect("response serializes");
        if std::fs::write(&tmp, bytes).is_ok() && std::fs::rename(&tmp, path).is_err() {
            let _ = std::fs::remove_file(&tmp);
        }
    }
}

impl<P: Provider> Provider for CachedProvider<P> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn call(&self, request: &Request<'_>) -> Result<Response, ProviderError> {
        let key = request.cache_key(&self.inner.id());
        let path = self.path_for(&key);
        if let Ok(bytes) = std::fs::read(&path) {
            if let Ok(v) = serde_json::from_slice::<Response>(&bytes) {
                self.stats.cache_hits.fetch_add(1, Ordering::Relaxed);
                return Ok(v);
            }
            log::warn!("discarding unreadable cache entry {}", path.display());
        }
        self.stats.calls.fetch_add(1, Ordering::Relaxed);
        let out = self.inner.call(request);
        match &out {
            Ok(v) => self.store(&path, v),
            Err(_) => {
                self.stats.failures.fetch_add(1, Ordering::Relaxed);
            }
        }
        out
    }
}

/// Bounded concurrency plus exponential backoff on retryable errors.
pub struct Resilient<P> {
    inner: P,
    retries: u32,
    backoff: Duration,
    max_in_flight: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
    pub stats: CallStats,
}

impl<P: Provider> Resilient<P> {
    pub fn new(inner: P, max_in_flight: usize, retries: u32, backoff: Duration) -> Self {
        assert!(max_in_flight >= 1);
        Resilient {
            inner,
            retries,
            backoff,
            max_in_flight,
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
            stats: CallStats::default(),
        }
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }

    fn acquire(&self) {
        let mut n = self.in_flight.lock().expect("in-flight lock");
        while *n >= self.max_in_flight {
            n = self.freed.wait(n).expect("in-flight lock");
        }
        *n += 1;
    }

    fn release(&self) {
        *self.in_flight.lock().expect("in-flight lock") -= 1;
        self.freed.notify_one();
    }
}

impl<P: Provider> Provider for Resilient<P> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn call(&self, request: &Request<'_>) -> Result<Response, ProviderError> {
        let mut attempt = 0;
        loop {
            self.acquire();
            self.stats.calls.fetch_add(1, Ordering::Relaxed);
            let out = self.inner.call(request);
            self.release();
            match out {
                Err(e) if e.retryable() && attempt < self.retries => {
                    self.stats.retries.fetch_add(1, Ordering::Relaxed);
                    std::thread::sleep(self.backoff * 2u32.saturating_pow(attempt));
                    attempt += 1;
                }
                Err(e) => {
                    self.stats.failures.fetch_add(1, Ordering::Relaxed);
                    return Err(e);
                }
                ok => return ok,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::{MockProvider, ProviderExt};
    use std::sync::atomic::AtomicUsize;
    use std::sync::Arc;

    struct Flaky {
        left: AtomicUsize,
        active: AtomicUsize,
        peak: AtomicUsize,
    }

    impl Provider for Flaky {
        fn id(&self) -> String {
            "flaky".into()
        }
        fn call(&self, request: &Request<'_>) -> Result<Response, ProviderError> {
            let now = self.active.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(2));
            self.active.fetch_sub(1, Ordering::SeqCst);
            if self
                .left
                .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
                .is_ok()
            {
                return Err(ProviderError::from_status(429, "slow down"));
            }
            MockProvider::default().call(request)
        }
    }

    #[test]
    fn cache_replays_without_calls() {
        let dir = tempfile::tempdir().unwrap();
        let first = CachedProvider::new(MockProvider::default(), dir.path());
        let a = first.embed_text("kitchen mug").unwrap();
        assert_eq!(first.stats.snapshot().calls, 1);
        let second = CachedProvider::new(MockProvider::default().failing(&["embed_text"]), dir.path());
        assert_eq!(second.embed_text("kitchen mug").unwrap(), a);
        let s = second.stats.snapshot();
        assert_eq!((s.calls, s.cache_hits), (0, 1));
        assert!(second.embed_text("other").is_err());
    }

    #[test]
    fn retries_then_succeeds() {
        let flaky = Flaky {
            left: AtomicUsize::new(2),
            active: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        };
        let r = Resilient::new(flaky, 4, 3, Duration::from_millis(1));
        assert!(r.embed_text("mug").is_ok());
        assert_eq!(r.stats.snapshot().retries, 2);

        let flaky = Flaky {
            left: AtomicUsize::new(10),
            active: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        };
        let r = Resilient::new(flaky, 4, 1, Duration::from_millis(1));
        assert!(r.embed_text("mug").unwrap_err().retryable());
    }

    #[test]
    fn in_flight_is_bounded() {
        let r = Arc::new(Resilient::new(
            Flaky {
                left: AtomicUsize::new(0),
                active: AtomicUsize::new(0),
                peak: AtomicUsize::new(0),
            },
            2,
            0,
            Duration::ZERO,
        ));
        let handles: Vec<_> = (0..8)
            .map(|i| {
                let r = Arc::clone(&r);
                std::thread::spawn(move || r.embed_text(&format!("t{i}")).unwrap())
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(r.inner().peak.load(Ordering::SeqCst) <= 2);
    }
}
