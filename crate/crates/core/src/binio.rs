//! Little-endian primitives shared by the store and model file formats.

use std::io::{self, Read, Write};

use crate::error::{Error, Result};

pub(crate) fn write_u16(w: &mut impl Write, v: u16) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn write_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn write_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn write_f64(w: &mut impl Write, v: f64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

/// `nameLen u16 ‖ UTF-8 bytes`
pub(crate) fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    let len = u16::try_from(s.len())
        .map_err(|_| Error::InvalidArgument(format!("string of {} bytes is too long", s.len())))?;
    write_u16(w, len)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

/// `count u32 ‖ {nameLen u16 ‖ UTF-8 bytes}×count`
pub(crate) fn write_labels(w: &mut impl Write, labels: &[String]) -> Result<()> {
    write_u32(w, labels.len() as u32)?;
    for l in labels {
        write_str(w, l)?;
    }
    Ok(())
}

pub(crate) fn labels_byte_len(labels: &[String]) -> usize {
    4 + labels.iter().map(|l| 2 + l.len()).sum::<usize>()
}

/// Maps a short read to [`Error::Corrupt`].
fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Corrupt(format!("truncated while reading {what}")),
        _ => Error::Io(e),
    })
}

pub(crate) fn read_array<const N: usize>(r: &mut impl Read, what: &str) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    read_exact(r, &mut b, what)?;
    Ok(b)
}

pub(crate) fn read_u16(r: &mut impl Read, what: &str) -> Result<u16> {
    Ok(u16::from_le_bytes(read_array(r, what)?))
}

pub(crate) fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r, what)?))
}

pub(crate) fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r, what)?))
}

pub(crate) fn read_f64(r: &mut impl Read, what: &str) -> Result<f64> {
    Ok(f64::from_le_bytes(read_array(r, what)?))
}

pub(crate) fn read_str(r: &mut impl Read, what: &str) -> Result<String> {
    let len = read_u16(r, what)? as usize;
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf, what)?;
    String::from_utf8(buf).map_err(|_| Error::Format(format!("{what} is not valid UTF-8")))
}

pub(crate) fn read_labels(r: &mut impl Read) -> Result<Vec<String>> {
    let count = read_u32(r, "label count")? as usize;
    // Each name costs at least its two length bytes; refuse absurd counts early.
    if count > u16::MAX as usize {
        return Err(Error::Format(format!("implausible label count {count}")));
    }
    (0..count).map(|_| read_str(r, "label name")).collect()
}

pub(crate) fn check_labels(labels: &[String]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::Label("label list is empty".into()));
    }
    let mut seen = std::collections::HashSet::new();
    for l in labels {
        if !seen.insert(l.as_str()) {
            return Err(Error::Label(format!("duplicate label `{l}`")));
        }
    }
    Ok(())
}

pub(crate) fn read_f32_into(r: &mut impl Read, out: &mut [f32], what: &str) -> Result<()> {
    let mut buf = vec![0u8; out.len() * 4];
    read_exact(r, &mut buf, what)?;
    for (v, b) in out.iter_mut().zip(buf.chunks_exact(4)) {
        *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
    }
    Ok(())
}

pub(crate) fn read_f64_vec(r: &mut impl Read, n: usize, what: &str) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    read_exact(r, &mut buf, what)?;
    Ok(buf
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect())
}
