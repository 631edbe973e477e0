use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes `bytes` to a sibling temporary file, syncs it, then renames it over
/// `path`. Readers never observe a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::format(path, "not a file path"))?
        .to_string_lossy();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Splits a container into its text header (through the `end` line) and the
/// bytes that follow.
pub(crate) fn split_header<'a>(path: &Path, bytes: &'a [u8], magic: &str) -> Result<(Vec<&'a str>, &'a [u8])> {
    let mut lines = Vec::new();
    let mut pos = 0;
    loop {
        let rest = &bytes[pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(path, "truncated header"))?;
        let line = std::str::from_utf8(&rest[..nl]).map_err(|_| Error::format(path, "header is not UTF-8"))?;
        pos += nl + 1;
        if lines.is_empty() && line != magic {
            return Err(Error::format(path, format!("missing `{magic}` signature")));
        }
        if line == "end" {
            return Ok((lines, &bytes[pos..]));
        }
        lines.push(line);
    }
}

pub(crate) fn f32s_to_le(values: impl IntoIterator<Item = f32>, out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn le_to_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}
