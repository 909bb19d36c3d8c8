use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{CliResult, Failure};

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Git-style content hash: SHA-256 over `blob <len>\0<bytes>`.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

/// Hash of several named content hashes, in the given order.
pub fn combined_hash(parts: &[(String, String)]) -> String {
    let mut h = Sha256::new();
    for (name, hash) in parts {
        h.update(name.as_bytes());
        h.update(b"\0");
        h.update(hash.as_bytes());
        h.update(b"\n");
    }
    hex(&h.finalize())
}

pub fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| Failure::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Failure::io(path, e))
}

pub fn create(path: &Path) -> CliResult<std::io::BufWriter<std::fs::File>> {
    let f = std::fs::File::create(path).map_err(|e| Failure::io(path, e))?;
    Ok(std::io::BufWriter::new(f))
}

/// Parse `start:end:step` into an evenly spaced grid including both ends.
pub fn parse_grid(spec: &str) -> CliResult<Vec<f64>> {
    let bad = || Failure::validation(format!("grid `{spec}` is not of the form start:end:step"));
    let parts: Vec<f64> = spec
        .split(':')
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<CliResult<_>>()?;
    let [a, b, step] = parts[..] else { return Err(bad()) };
    if !(step > 0.0) || !(b >= a) {
        return Err(bad());
    }
    let steps = (b - a) / step;
    let n = steps.round();
    if (steps - n).abs() > 1e-6 {
        return Err(Failure::validation(format!("grid step {step} does not divide [{a}, {b}]")));
    }
    let n = n as u32;
    if n == 0 {
        return Ok(vec![a]);
    }
    Ok((0..=n).map(|k| a + (b - a) * f64::from(k) / f64::from(n)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_matches_library() {
        assert_eq!(parse_grid("0:1:0.1").ok().unwrap(), netgps::estimator::default_g_grid());
        let g = parse_grid("0.2:0.6:0.2").ok().unwrap();
        assert_eq!(g.len(), 3);
        for (a, b) in g.iter().zip([0.2, 0.4, 0.6]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(parse_grid("0:1").is_err());
        assert!(parse_grid("0:1:0.3").is_err());
        assert!(parse_grid("1:0:0.1").is_err());
    }

    #[test]
    fn content_hash_is_git_style() {
        // `git hash-object` uses SHA-1; the framing is the same.
        let a = content_hash(b"hello\n");
        assert_eq!(a.len(), 64);
        assert_ne!(a, content_hash(b"hello"));
        assert_eq!(a, "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4");
    }
}
