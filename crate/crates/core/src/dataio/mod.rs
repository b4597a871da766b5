//! On-disk formats, dataset loading and the synthetic dataset generator.

mod dataset;
mod matrix_file;
mod synth;

use std::fs;
use std::io::Write;
use std::path::Path;

pub use dataset::{
    read_captions, write_captions, CaptionRecord, Dataset, Manifest, SplitView, Splits, Vocabulary, UNK,
};
pub use matrix_file::{
    decode_matrix, decode_matrix_prefix, encode_matrix, load_matrix, save_matrix, Precision, HEADER_LEN, MAGIC,
};
pub use synth::{generative_alignment, generate_synthetic, SynthConfig};

use crate::error::{Error, Result};

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp_name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
