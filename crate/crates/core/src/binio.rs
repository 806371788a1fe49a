//! Little-endian framing helpers shared by the binary file formats
//! (`MMBF`, `MMBG`, `MMBE`, `MMBC`, `MMBS`).

use std::io::{self, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

pub fn write_magic<W: Write>(w: &mut W, magic: &[u8; 4], version: u32) -> Result<()> {
    w.write_all(magic)?;
    w.write_u32::<LittleEndian>(version)?;
    Ok(())
}

/// Reads and checks the 4-byte magic, returning the version that follows.
pub fn read_magic<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(truncated)?;
    if &buf != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&buf),
            String::from_utf8_lossy(magic)
        )));
    }
    read_u32(r)
}

pub fn write_u8<W: Write>(w: &mut W, v: u8) -> Result<()> {
    Ok(w.write_u8(v)?)
}

pub fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    Ok(w.write_u32::<LittleEndian>(v)?)
}

pub fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    Ok(w.write_u64::<LittleEndian>(v)?)
}

pub fn write_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    Ok(w.write_f64::<LittleEndian>(v)?)
}

pub fn write_len<W: Write>(w: &mut W, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Format(format!("length {n} overflows u32")))?;
    write_u32(w, n)
}

/// Length-prefixed (u32) UTF-8 bytes.
pub fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    write_len(w, s.len())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub fn write_f32s<W: Write>(w: &mut W, xs: &[f32]) -> Result<()> {
    for &x in xs {
        w.write_f32::<LittleEndian>(x)?;
    }
    Ok(())
}

pub fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> Result<()> {
    for &x in xs {
        w.write_f64::<LittleEndian>(x)?;
    }
    Ok(())
}

pub fn write_strs<W: Write>(w: &mut W, xs: &[String]) -> Result<()> {
    write_u64(w, xs.len() as u64)?;
    for s in xs {
        write_str(w, s)?;
    }
    Ok(())
}

fn truncated(e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::Format("truncated file".into())
    } else {
        Error::Io(e)
    }
}

pub fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    r.read_u8().map_err(truncated)
}

pub fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    r.read_u32::<LittleEndian>().map_err(truncated)
}

pub fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    r.read_u64::<LittleEndian>().map_err(truncated)
}

pub fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    r.read_f64::<LittleEndian>().map_err(truncated)
}

pub fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n = read_u32(r)? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(truncated)?;
    String::from_utf8(buf).map_err(|e| Error::Format(format!("invalid utf-8 id: {e}")))
}

pub fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut out = vec![0f32; n];
    r.read_f32_into::<LittleEndian>(&mut out).map_err(truncated)?;
    Ok(out)
}

pub fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut out = vec![0f64; n];
    r.read_f64_into::<LittleEndian>(&mut out).map_err(truncated)?;
    Ok(out)
}

pub fn read_u32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<u32>> {
    let mut out = vec![0u32; n];
    r.read_u32_into::<LittleEndian>(&mut out).map_err(truncated)?;
    Ok(out)
}

pub fn read_u64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<u64>> {
    let mut out = vec![0u64; n];
    r.read_u64_into::<LittleEndian>(&mut out).map_err(truncated)?;
    Ok(out)
}

pub fn read_strs<R: Read>(r: &mut R) -> Result<Vec<String>> {
    let n = read_u64(r)? as usize;
    (0..n).map(|_| read_str(r)).collect()
}

/// Fails if any bytes remain after a complete record.
pub fn expect_eof<R: Read>(r: &mut R) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(Error::Format("trailing bytes after end of record".into())),
    }
}
