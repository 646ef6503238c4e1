//! Portable knowledge snapshots.
//!
//! Layout: a gzip stream of JSON lines (one header line, then one entry per
//! line sorted by kind and key), followed by a 44-byte footer:
//! `b"CKSN"`, the compressed length as little-endian `u64`, and the SHA-256 of
//! the compressed bytes.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::{Compression, GzBuilder};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CacheKind, KnowledgeCache};
use crate::error::{CoolError, Result};

const FOOTER_MAGIC: &[u8; 4] = b"CKSN";
const FOOTER_LEN: usize = 4 + 8 + 32;
const FORMAT: &str = "cool-knowledge-snapshot";

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    entries: usize,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    kind: CacheKind,
    key: String,
    body: String,
}

/// Serializes every cache entry into a snapshot archive.
pub fn encode_snapshot(cache: &KnowledgeCache) -> Result<Vec<u8>> {
    let entries = cache.entries();
    let mut payload = String::new();
    payload.push_str(&serde_json::to_string(&Header {
        format: FORMAT.into(),
        version: 1,
        entries: entries.len(),
    })?);
    payload.push('\n');
    for (kind, key, body) in entries {
        payload.push_str(&serde_json::to_string(&Entry { kind, key, body })?);
        payload.push('\n');
    }
    let mut enc = GzBuilder::new().mtime(0).write(Vec::new(), Compression::default());
    enc.write_all(payload.as_bytes())?;
    let mut out = enc.finish()?;
    let digest = Sha256::digest(&out);
    let len = out.len() as u64;
    out.extend_from_slice(FOOTER_MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Verifies the checksum footer and returns the decoded entries.
pub fn decode_snapshot(bytes: &[u8]) -> Result<Vec<(CacheKind, String, String)>> {
    if bytes.len() < FOOTER_LEN {
        return Err(CoolError::Snapshot("archive shorter than its footer".into()));
    }
    let (body, footer) = bytes.split_at(bytes.len() - FOOTER_LEN);
    if &footer[..4] != FOOTER_MAGIC {
        return Err(CoolError::Snapshot("missing footer magic".into()));
    }
    let len = u64::from_le_bytes(footer[4..12].try_into().expect("8 bytes"));
    if len != body.len() as u64 {
        return Err(CoolError::Snapshot(format!(
            "length mismatch: footer says {len}, payload has {}",
            body.len()
        )));
    }
    if Sha256::digest(body).as_slice() != &footer[12..] {
        return Err(CoolError::Snapshot("checksum mismatch".into()));
    }
    let mut text = String::new();
    GzDecoder::new(body)
        .read_to_string(&mut text)
        .map_err(|e| CoolError::Snapshot(format!("decompression failed: {e}")))?;
    let mut lines = text.lines();
    let header: Header = serde_json::from_str(
        lines
            .next()
            .ok_or_else(|| CoolError::Snapshot("missing header".into()))?,
    )?;
    if header.format != FORMAT {
        return Err(CoolError::Snapshot(format!("unknown format {:?}", header.format)));
    }
    let entries = lines
        .map(|l| serde_json::from_str::<Entry>(l).map(|e| (e.kind, e.key, e.body)))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if entries.len() != header.entries {
        return Err(CoolError::Snapshot(format!(
            "header announces {} entries, found {}",
            header.entries,
            entries.len()
        )));
    }
    Ok(entries)
}

pub fn snapshot_export(cache: &KnowledgeCache, path: &Path) -> Result<()> {
    fs::write(path, encode_snapshot(cache)?)?;
    Ok(())
}

/// Loads an archive into `cache`. Conflicting keys abort the import and are
/// all listed in the error; nothing is written in that case.
pub fn snapshot_import(cache: &KnowledgeCache, path: &Path) -> Result<usize> {
    let entries = decode_snapshot(&fs::read(path)?)?;
    cache.put_all(&entries)?;
    Ok(entries.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn filled(n: usize) -> KnowledgeCache {
        let c = KnowledgeCache::in_memory();
        for i in 0..n {
            let kind = CacheKind::ALL[i % 3];
            c.put(kind, &format!("key{i}"), &format!("{{\"v\":{i}}}")).unwrap();
        }
        c
    }

    #[test]
    fn empty_cache_exports_zero_entries() {
        let bytes = encode_snapshot(&KnowledgeCache::in_memory()).unwrap();
        assert!(decode_snapshot(&bytes).unwrap().is_empty());
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.snap");
        snapshot_export(&filled(100), &a).unwrap();
        let c = KnowledgeCache::in_memory();
        assert_eq!(snapshot_import(&c, &a).unwrap(), 100);
        let b = dir.path().join("b.snap");
        snapshot_export(&c, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        assert_eq!(c.entries(), filled(100).entries());
    }

    #[test]
    fn corrupt_archive_fails_checksum() {
        let mut bytes = encode_snapshot(&filled(5)).unwrap();
        bytes[3] ^= 0xff;
        let err = decode_snapshot(&bytes).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn conflicting_import_lists_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.snap");
        snapshot_export(&filled(3), &p).unwrap();
        let c = KnowledgeCache::in_memory();
        c.put(CacheKind::Link, "key0", "different").unwrap();
        match snapshot_import(&c, &p) {
            Err(CoolError::SnapshotConflict(keys)) => assert_eq!(keys, vec!["link:key0"]),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(c.len(), 1);
    }
}
