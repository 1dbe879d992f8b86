use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::ByteTokenizer;
use crate::model::TokenId;

/// Reads one calibration sample per non-blank line, truncates each to
/// `max_len` tokens and draws a seeded subsample of at most `max_samples`.
///
/// Selected samples keep their file order.
pub fn load_calibration(
    path: impl AsRef<Path>,
    max_samples: usize,
    max_len: usize,
    seed: u64,
) -> Result<Vec<Vec<TokenId>>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    calibration_from_bytes(&bytes, max_samples, max_len, seed)
}

pub fn calibration_from_bytes(
    bytes: &[u8],
    max_samples: usize,
    max_len: usize,
    seed: u64,
) -> Result<Vec<Vec<TokenId>>> {
    if max_samples == 0 || max_len == 0 {
        return Err(Error::InvalidArgument(
            "max_samples and max_len must be at least 1".into(),
        ));
    }
    let lines: Vec<&[u8]> = bytes
        .split(|&b| b == b'\n')
        .map(|l| l.strip_suffix(b"\r").unwrap_or(l))
        .filter(|l| !l.iter().all(u8::is_ascii_whitespace))
        .collect();
    if lines.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let chosen: Vec<usize> = if lines.len() <= max_samples {
        if lines.len() < max_samples {
            log::warn!(
                "calibration file has {} samples, fewer than the {} requested; using all",
                lines.len(),
                max_samples
            );
        }
        (0..lines.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = rand::seq::index::sample(&mut rng, lines.len(), max_samples).into_vec();
        idx.sort_unstable();
        idx
    };
    Ok(chosen
        .into_iter()
        .map(|i| {
            let line = lines[i];
            ByteTokenizer.encode(&line[..line.len().min(max_len)])
        })
        .collect())
}

/// Whole-file byte-level tokenization.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<TokenId>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(ByteTokenizer.encode(bytes))
}
