//! Versioned binary index file.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic    [u8; 8]  "SFBM25IX"
//! version  u32
//! n_docs   u64
//! avgdl    f64
//! k1       f64
//! b        f64
//! docs     n_docs × { doc_id u64, len u32, text_len u32, text [u8] }
//! n_terms  u64
//! terms    n_terms × { term_len u32, term [u8], n_post u32, n_post × { doc_id u64, tf u32 } }
//! sha256   [u8; 32] over every preceding byte
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use super::{Bm25Params, DocEntry, IndexError, InvertedIndex, Posting};

pub const MAGIC: &[u8; 8] = b"SFBM25IX";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8 + 8 + 8 + 8;
const CHECKSUM_LEN: usize = 32;

impl InvertedIndex {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        // Writes into a Vec cannot fail.
        buf.write_u32::<LittleEndian>(FORMAT_VERSION).unwrap();
        buf.write_u64::<LittleEndian>(self.num_docs()).unwrap();
        buf.write_f64::<LittleEndian>(self.avgdl()).unwrap();
        buf.write_f64::<LittleEndian>(self.params().k1).unwrap();
        buf.write_f64::<LittleEndian>(self.params().b).unwrap();
        for (id, doc) in self.docs() {
            buf.write_u64::<LittleEndian>(*id).unwrap();
            buf.write_u32::<LittleEndian>(doc.len).unwrap();
            write_str(&mut buf, &doc.text);
        }
        buf.write_u64::<LittleEndian>(self.terms().len() as u64).unwrap();
        for (term, list) in self.terms() {
            write_str(&mut buf, term);
            buf.write_u32::<LittleEndian>(list.len() as u32).unwrap();
            for p in list {
                buf.write_u64::<LittleEndian>(p.doc_id).unwrap();
                buf.write_u32::<LittleEndian>(p.tf).unwrap();
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IndexError> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(IndexError::BadMagic);
        }
        if bytes.len() < 12 {
            return Err(IndexError::Checksum);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(IndexError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        if bytes.len() < HEADER_LEN + CHECKSUM_LEN {
            return Err(IndexError::Checksum);
        }
        let (body, checksum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
        if Sha256::digest(body).as_slice() != checksum {
            return Err(IndexError::Checksum);
        }

        let mut cur = Cursor::new(&body[12..]);
        let n_docs = cur.read_u64::<LittleEndian>().map_err(corrupt)?;
        let stored_avgdl = cur.read_f64::<LittleEndian>().map_err(corrupt)?;
        let params = Bm25Params {
            k1: cur.read_f64::<LittleEndian>().map_err(corrupt)?,
            b: cur.read_f64::<LittleEndian>().map_err(corrupt)?,
        };
        let mut docs = BTreeMap::new();
        for _ in 0..n_docs {
            let id = cur.read_u64::<LittleEndian>().map_err(corrupt)?;
            let len = cur.read_u32::<LittleEndian>().map_err(corrupt)?;
            let text = read_str(&mut cur)?;
            docs.insert(id, DocEntry { len, text });
        }
        let n_terms = cur.read_u64::<LittleEndian>().map_err(corrupt)?;
        let mut postings = BTreeMap::new();
        for _ in 0..n_terms {
            let term = read_str(&mut cur)?;
            let n = cur.read_u32::<LittleEndian>().map_err(corrupt)?;
            let mut list = Vec::with_capacity(n as usize);
            for _ in 0..n {
                let doc_id = cur.read_u64::<LittleEndian>().map_err(corrupt)?;
                let tf = cur.read_u32::<LittleEndian>().map_err(corrupt)?;
                if !docs.contains_key(&doc_id) {
                    return Err(IndexError::Corrupt(format!(
                        "posting for unknown doc {doc_id}"
                    )));
                }
                list.push(Posting { doc_id, tf });
            }
            postings.insert(term, list);
        }
        if cur.position() as usize != cur.get_ref().len() {
            return Err(IndexError::Corrupt("trailing bytes".into()));
        }
        let index = InvertedIndex::from_parts(params, postings, docs)?;
        if index.avgdl().to_bits() != stored_avgdl.to_bits() {
            return Err(IndexError::Corrupt("header avgdl disagrees with length table".into()));
        }
        Ok(index)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), IndexError> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|source| IndexError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, IndexError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| IndexError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

fn corrupt(e: std::io::Error) -> IndexError {
    IndexError::Corrupt(e.to_string())
}

fn write_str(buf: &mut Vec<u8>, s: &str) {
    buf.write_u32::<LittleEndian>(s.len() as u32).unwrap();
    buf.extend_from_slice(s.as_bytes());
}

fn read_str(cur: &mut Cursor<&[u8]>) -> Result<String, IndexError> {
    let len = cur.read_u32::<LittleEndian>().map_err(corrupt)? as usize;
    let remaining = cur.get_ref().len() - cur.position() as usize;
    if len > remaining {
        return Err(IndexError::Corrupt("string runs past end of file".into()));
    }
    let mut bytes = vec![0; len];
    cur.read_exact(&mut bytes).map_err(corrupt)?;
    String::from_utf8(bytes).map_err(|e| IndexError::Corrupt(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::super::{build_index, Document};
    use super::*;

    fn sample() -> InvertedIndex {
        build_index(
            vec![
                Document::new(5, "Aspirin inhibits platelet aggregation."),
                Document::new(2, "Warfarin interaction with aspirin increases bleeding."),
                Document::new(9, "Platelet counts in leukemia."),
            ],
            Bm25Params { k1: 1.5, b: 0.6 },
        )
        .unwrap()
    }

    #[test]
    fn round_trip_preserves_queries() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx.bin");
        let idx = sample();
        idx.save(&path).unwrap();
        let back = InvertedIndex::load(&path).unwrap();
        assert_eq!(back, idx);
        assert_eq!(
            back.query_top_k("aspirin platelet", 3).unwrap(),
            idx.query_top_k("aspirin platelet", 3).unwrap()
        );
    }

    #[test]
    fn truncated_file_fails_checksum() {
        let bytes = sample().to_bytes();
        for cut in [bytes.len() - 1, bytes.len() - 40, HEADER_LEN + 3, 20] {
            assert!(
                matches!(InvertedIndex::from_bytes(&bytes[..cut]), Err(IndexError::Checksum)),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let mut bytes = sample().to_bytes();
        bytes[HEADER_LEN + 5] ^= 0x20;
        assert!(matches!(InvertedIndex::from_bytes(&bytes), Err(IndexError::Checksum)));
    }

    #[test]
    fn version_mismatch_detected() {
        let mut bytes = sample().to_bytes();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            InvertedIndex::from_bytes(&bytes),
            Err(IndexError::VersionMismatch { found: 7, expected: 1 })
        ));
    }

    #[test]
    fn bad_paths_and_magic() {
        assert!(matches!(InvertedIndex::load(""), Err(IndexError::Io { .. })));
        assert!(matches!(InvertedIndex::from_bytes(b""), Err(IndexError::BadMagic)));
        assert!(matches!(InvertedIndex::from_bytes(b"not an index"), Err(IndexError::BadMagic)));
    }
}
