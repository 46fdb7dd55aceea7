//! Worker-thread configuration.
//!
//! Every kernel splits its work into pieces whose boundaries do not depend
//! on the number of threads, so results are identical for any pool size.

use crate::error::{Error, Result};

/// Environment variable capping worker threads; `0` or unset means one per
/// available core.
pub const THREADS_ENV: &str = "XVFI_THREADS";

/// Parses a thread-count setting. Empty or missing values mean automatic.
pub fn parse_threads(value: Option<&str>) -> Result<usize> {
    match value.map(str::trim) {
        None | Some("") => Ok(0),
        Some(v) => v
            .parse()
            .map_err(|_| Error::invalid(format!("{THREADS_ENV}={v:?} is not a thread count"))),
    }
}

pub fn threads_from_env() -> Result<usize> {
    parse_threads(std::env::var(THREADS_ENV).ok().as_deref())
}

/// A pool with `threads` workers, or rayon's default size for `0`.
pub fn build_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker threads: {e}")))
}

/// Runs `f` on a dedicated pool of `threads` workers.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    Ok(build_pool(threads)?.install(f))
}
