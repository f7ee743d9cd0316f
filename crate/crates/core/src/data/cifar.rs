//! CIFAR-10 binary batches: records of one label byte followed by the red,
//! green and blue 32×32 planes.

use std::fs;
use std::path::Path;

use crate::error::{Result, SaolError};
use crate::tensor::Tensor;

use super::LabeledImage;

const SIDE: usize = 32;
const PLANE: usize = SIDE * SIDE;
/// Bytes per record.
pub const CIFAR_RECORD: usize = 1 + 3 * PLANE;

pub fn parse_cifar10(bytes: &[u8]) -> Result<Vec<LabeledImage>> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(SaolError::Format(format!(
            "CIFAR-10 data of {} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    bytes
        .chunks_exact(CIFAR_RECORD)
        .enumerate()
        .map(|(i, rec)| {
            let label = rec[0] as usize;
            if label >= 10 {
                return Err(SaolError::Format(format!("record {i} has label byte {label}")));
            }
            let pixels = rec[1..].iter().map(|&b| b as f64 / 255.0).collect();
            LabeledImage::new(Tensor::new([3, SIDE, SIDE], pixels)?, label, None)
        })
        .collect()
}

/// Reads one batch file, or every `data_batch_*.bin` / `test_batch.bin` when
/// `path` is a directory (selected by `test`).
pub fn load_cifar10(path: &Path, test: bool) -> Result<Vec<LabeledImage>> {
    let files = if path.is_dir() {
        if test {
            vec![path.join("test_batch.bin")]
        } else {
            (1..=5).map(|i| path.join(format!("data_batch_{i}.bin"))).collect()
        }
    } else {
        vec![path.to_path_buf()]
    };
    let mut out = Vec::new();
    for f in files {
        let bytes = fs::read(&f).map_err(|e| SaolError::io(&f, e))?;
        out.extend(parse_cifar10(&bytes)?);
    }
    Ok(out)
}
