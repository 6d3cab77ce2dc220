//! Little-endian binary framing shared by the dataset and checkpoint formats.
//!
//! Layout: `magic[4] | version u32 | body_len u64 | body | fnv1a64 u64`, the
//! trailing checksum covering every preceding byte.

use std::hash::Hasher;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = fnv::FnvHasher::default();
    h.write(bytes);
    h.finish()
}

#[derive(Default)]
pub struct Enc {
    pub buf: Vec<u8>,
}

impl Enc {
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    pub fn bytes(&mut self, v: &[u8]) {
        self.usize(v.len());
        self.buf.extend_from_slice(v);
    }
    pub fn str(&mut self, v: &str) {
        self.bytes(v.as_bytes());
    }
    pub fn f32s(&mut self, v: &[f32]) {
        self.usize(v.len());
        for x in v {
            self.f32(*x);
        }
    }
    pub fn f64s(&mut self, v: &[f64]) {
        self.usize(v.len());
        for x in v {
            self.f64(*x);
        }
    }
}

pub struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Dec<'a> {
    pub fn new(buf: &'a [u8], path: &'a Path) -> Self {
        Self { buf, pos: 0, path }
    }

    pub fn err(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated at byte {} while reading {what}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    pub fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    pub fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    pub fn bool(&mut self, what: &str) -> Result<bool> {
        match self.u8(what)? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(self.err(format!("{what}: invalid boolean {v}"))),
        }
    }

    /// A length or count, checked against the bytes that remain so corrupt
    /// values cannot trigger huge allocations.
    pub fn len(&mut self, what: &str, elem_size: usize) -> Result<usize> {
        let n = self.u64(what)?;
        let left = (self.buf.len() - self.pos) as u64;
        if n.saturating_mul(elem_size.max(1) as u64) > left {
            return Err(self.err(format!("{what}: length {n} exceeds the remaining {left} bytes")));
        }
        Ok(n as usize)
    }

    pub fn usize(&mut self, what: &str) -> Result<usize> {
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| self.err(format!("{what}: {v} does not fit in usize")))
    }
    pub fn bytes(&mut self, what: &str) -> Result<&'a [u8]> {
        let n = self.len(what, 1)?;
        self.take(n, what)
    }
    pub fn str(&mut self, what: &str) -> Result<String> {
        let b = self.bytes(what)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.err(format!("{what}: invalid UTF-8")))
    }
    pub fn f32s(&mut self, what: &str) -> Result<Vec<f32>> {
        let n = self.len(what, 4)?;
        (0..n).map(|_| self.f32(what)).collect()
    }
    pub fn f64s(&mut self, what: &str) -> Result<Vec<f64>> {
        let n = self.len(what, 8)?;
        (0..n).map(|_| self.f64(what)).collect()
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err(format!("{} trailing bytes after body", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn seal(magic: &[u8; 4], version: u32, body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(body.len() + 24);
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(body);
    let sum = fnv1a64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

/// Validates framing and returns the body. Checks run in order: magic,
/// version, length, checksum.
pub fn unseal<'a>(path: &Path, bytes: &'a [u8], magic: &[u8; 4], version: u32) -> Result<&'a [u8]> {
    let fmt = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(fmt(format!("bad magic, expected {:?}", String::from_utf8_lossy(magic))));
    }
    if bytes.len() < 16 {
        return Err(fmt(format!("truncated header ({} bytes)", bytes.len())));
    }
    let found = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if found != version {
        return Err(Error::Version {
            path: path.to_path_buf(),
            expected: version,
            found,
        });
    }
    let body_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let expect = body_len.checked_add(24);
    if expect != Some(bytes.len() as u64) {
        return Err(fmt(format!(
            "length mismatch: header declares a {body_len}-byte body, file has {} bytes",
            bytes.len()
        )));
    }
    let split = bytes.len() - 8;
    let stored = u64::from_le_bytes(bytes[split..].try_into().unwrap());
    let computed = fnv1a64(&bytes[..split]);
    if stored != computed {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
            stored,
            computed,
        });
    }
    Ok(&bytes[16..split])
}

/// Writes via a temporary sibling and rename so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        // published FNV-1a 64 test vectors
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn seal_roundtrip_and_rejections() {
        let p = Path::new("x.bin");
        let sealed = seal(b"TEST", 3, b"hello");
        assert_eq!(unseal(p, &sealed, b"TEST", 3).unwrap(), b"hello");
        assert!(matches!(unseal(p, &sealed, b"TEST", 4), Err(Error::Version { found: 3, .. })));
        assert!(matches!(unseal(p, &sealed, b"ABCD", 3), Err(Error::Format { .. })));
        let mut bad = sealed.clone();
        bad[17] ^= 1;
        assert!(matches!(unseal(p, &bad, b"TEST", 3), Err(Error::Checksum { .. })));
        for n in 0..sealed.len() {
            assert!(unseal(p, &sealed[..n], b"TEST", 3).is_err());
        }
    }

    #[test]
    fn decoder_guards_lengths() {
        let mut e = Enc::default();
        e.u64(u64::MAX);
        let p = Path::new("x");
        let mut d = Dec::new(&e.buf, p);
        assert!(d.f32s("v").is_err());
    }
}
