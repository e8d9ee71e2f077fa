//! Little-endian helpers shared by the container formats.

use std::fs::{self, File};
use std::io::{self, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{truncated, Error, Result};

pub(crate) fn read_magic(r: &mut impl Read, expected: &[u8], what: &str) -> Result<()> {
    let mut buf = vec![0u8; expected.len()];
    r.read_exact(&mut buf).map_err(truncated(what))?;
    if buf != expected {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(expected).into_owned(),
            found: String::from_utf8_lossy(&buf).into_owned(),
        });
    }
    Ok(())
}

pub(crate) fn check_version(found: u16, expected: u16) -> Result<()> {
    if found != expected {
        return Err(Error::UnsupportedVersion { expected, found });
    }
    Ok(())
}

/// Fail unless the reader is exhausted.
pub(crate) fn expect_eof(r: &mut impl Read, what: &str) -> Result<()> {
    let mut b = [0u8; 1];
    match r.read(&mut b)? {
        0 => Ok(()),
        _ => Err(Error::Data(format!("{what}: trailing bytes after payload"))),
    }
}

/// Write to a temporary sibling and rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> io::Result<()>) -> Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(e) => format!("{}.partial", e.to_string_lossy()),
        None => "partial".into(),
    });
    {
        let file = File::create(&tmp)?;
        let mut w = BufWriter::new(file);
        if let Err(e) = f(&mut w).and_then(|_| w.flush()) {
            drop(w);
            let _ = fs::remove_file(&tmp);
            return Err(e.into());
        }
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
