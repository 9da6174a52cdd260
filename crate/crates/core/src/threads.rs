//! Kernel thread-pool sizing from the `SODM_THREADS` environment variable.

use crate::error::{Error, Result};

pub const THREADS_ENV: &str = "SODM_THREADS";

/// Parses a thread count; zero and garbage are rejected.
pub fn parse_threads(value: &str) -> Result<usize> {
    match value.trim().parse::<usize>() {
        Ok(n) if n > 0 => Ok(n),
        _ => Err(Error::Config(format!(
            "{THREADS_ENV} must be a positive integer, got `{value}`"
        ))),
    }
}

/// Sizes rayon's global pool from `SODM_THREADS` when it is set and returns
/// the pool's thread count. The global pool can only be built once per
/// process; later calls leave it as it is.
pub fn configure_threads() -> Result<usize> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n = parse_threads(&v)?;
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(rayon::current_num_threads())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_positive_counts_only() {
        assert_eq!(parse_threads("4").unwrap(), 4);
        assert_eq!(parse_threads(" 1\n").unwrap(), 1);
        assert!(parse_threads("0").is_err());
        assert!(parse_threads("many").is_err());
    }
}
