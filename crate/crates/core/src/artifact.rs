//! Stage artifacts: fixed-precision JSON and content hashing.

use std::io;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};
use sha2::{Digest, Sha256};

use crate::error::Result;

/// Pretty JSON with every float written as 17 significant digits, so equal
/// values always serialise to equal bytes and parse back exactly.
pub struct FixedPrecisionFormatter<'a> {
    inner: PrettyFormatter<'a>,
}

impl Default for FixedPrecisionFormatter<'_> {
    fn default() -> Self {
        Self {
            inner: PrettyFormatter::new(),
        }
    }
}

impl Formatter for FixedPrecisionFormatter<'_> {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, value as f64)
    }

    fn begin_array<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.begin_array(writer)
    }

    fn end_array<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.end_array(writer)
    }

    fn begin_array_value<W: ?Sized + io::Write>(&mut self, writer: &mut W, first: bool) -> io::Result<()> {
        self.inner.begin_array_value(writer, first)
    }

    fn end_array_value<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.end_array_value(writer)
    }

    fn begin_object<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.begin_object(writer)
    }

    fn end_object<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.end_object(writer)
    }

    fn begin_object_key<W: ?Sized + io::Write>(&mut self, writer: &mut W, first: bool) -> io::Result<()> {
        self.inner.begin_object_key(writer, first)
    }

    fn begin_object_value<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.begin_object_value(writer)
    }

    fn end_object_value<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.end_object_value(writer)
    }
}

/// Serialises with [`FixedPrecisionFormatter`]; non-finite floats become `null`.
pub fn to_json_bytes<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, FixedPrecisionFormatter::default());
    value.serialize(&mut ser)?;
    out.push(b'\n');
    Ok(out)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, to_json_bytes(value)?)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash over several labelled parts; labels keep `("ab", "c")` distinct from
/// `("a", "bc")`.
pub fn combined_hash<'a>(parts: impl IntoIterator<Item = (&'a str, &'a [u8])>) -> String {
    let mut h = Sha256::new();
    for (label, bytes) in parts {
        h.update((label.len() as u64).to_le_bytes());
        h.update(label.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    }
    hex::encode(h.finalize())
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Envelope written by every pipeline stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub stage: String,
    pub run_id: i64,
    pub config_hash: String,
    /// Hash of everything the stage read; equal hashes mean the stage can
    /// be skipped.
    pub input_hash: String,
    pub seed: u64,
    pub payload: T,
}

/// Envelope fields without the payload, for cheap cache checks.
#[derive(Debug, Clone, Deserialize)]
pub struct ArtifactHeader {
    pub stage: String,
    pub run_id: i64,
    pub config_hash: String,
    pub input_hash: String,
    pub seed: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Sample {
        a: f64,
        b: Vec<f64>,
        c: Option<f64>,
    }

    #[test]
    fn floats_round_trip_at_seventeen_digits() {
        let s = Sample {
            a: 0.1 + 0.2,
            b: vec![1.0, -2.5e-300, f64::MAX, 1.0 / 3.0],
            c: None,
        };
        let bytes = to_json_bytes(&s).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.contains("3.0000000000000004e-1"), "{text}");
        assert!(text.contains("1.0000000000000000e0"));
        let back: Sample = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(to_json_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn non_finite_becomes_null() {
        let text = String::from_utf8(to_json_bytes(&vec![f64::NAN, f64::INFINITY]).unwrap()).unwrap();
        assert_eq!(text.matches("null").count(), 2);
    }

    #[test]
    fn labelled_hash_separates_boundaries() {
        let a = combined_hash([("x", b"ab".as_slice()), ("y", b"c".as_slice())]);
        let b = combined_hash([("x", b"a".as_slice()), ("y", b"bc".as_slice())]);
        assert_ne!(a, b);
        assert_eq!(sha256_hex(b""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }

    #[test]
    fn header_ignores_payload() {
        let art = Artifact {
            stage: "fit".into(),
            run_id: 3,
            config_hash: "c".into(),
            input_hash: "i".into(),
            seed: 9,
            payload: vec![1.0, 2.0],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.json");
        write_json(&p, &art).unwrap();
        let h: ArtifactHeader = read_json(&p).unwrap();
        assert_eq!((h.stage.as_str(), h.run_id, h.seed), ("fit", 3, 9));
    }
}
