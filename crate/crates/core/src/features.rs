//! Per-set embedding records and the `FCV1` feature cache.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FCV1"            4 bytes
//! count             u32
//! per record:
//!   id_len          u32
//!   volume_id       id_len bytes, UTF-8
//!   set_index       i32
//!   label           i8   (0 covid, 1 non-covid, -1 unknown)
//!   embedding       512 × f32
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::classifier::test_clips;
use crate::error::{Error, Result};
use crate::ingest::Label;
use crate::nn::model::Classifier3d;
use crate::prepare::PreparedVolume;

pub const CACHE_MAGIC: &[u8; 4] = b"FCV1";
pub const EMBED_DIM: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub volume_id: String,
    pub set_index: i32,
    pub label: Option<Label>,
    pub embedding: Vec<f32>,
}

impl EmbeddingRecord {
    fn validate(&self) -> Result<()> {
        if self.embedding.len() != EMBED_DIM {
            return Err(Error::Shape(format!(
                "embedding for {} has {} values, expected {EMBED_DIM}",
                self.volume_id,
                self.embedding.len()
            )));
        }
        if let Some(v) = self.embedding.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!("non-finite embedding value {v} for {}", self.volume_id)));
        }
        Ok(())
    }
}

fn label_code(label: Option<Label>) -> i8 {
    match label.and_then(|l| l.class_index()) {
        Some(c) => c as i8,
        None => -1,
    }
}

fn label_from_code(code: i8) -> Option<Option<Label>> {
    match code {
        -1 => Some(None),
        0 | 1 => Some(Some(Label::from_class_index(code as usize))),
        _ => None,
    }
}

/// Serialize one record body (everything after the header).
pub fn encode_record(rec: &EmbeddingRecord, out: &mut Vec<u8>) -> Result<()> {
    rec.validate()?;
    let id = rec.volume_id.as_bytes();
    let len = u32::try_from(id.len()).map_err(|_| Error::InvalidData("volume id too long".into()))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(id);
    out.extend_from_slice(&rec.set_index.to_le_bytes());
    out.extend_from_slice(&label_code(rec.label).to_le_bytes());
    for v in &rec.embedding {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

/// Single appending writer; the record count is patched in on [`finish`](Self::finish).
pub struct FeatureCacheWriter {
    path: PathBuf,
    out: BufWriter<File>,
    count: u32,
    buf: Vec<u8>,
}

impl FeatureCacheWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        out.write_all(CACHE_MAGIC).map_err(|e| Error::io(path, e))?;
        out.write_all(&0u32.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        Ok(FeatureCacheWriter {
            path: path.to_path_buf(),
            out,
            count: 0,
            buf: Vec::new(),
        })
    }

    pub fn append(&mut self, rec: &EmbeddingRecord) -> Result<()> {
        self.buf.clear();
        encode_record(rec, &mut self.buf)?;
        self.out.write_all(&self.buf).map_err(|e| Error::io(&self.path, e))?;
        self.count = self
            .count
            .checked_add(1)
            .ok_or_else(|| Error::InvalidData("feature cache record count overflow".into()))?;
        Ok(())
    }

    pub fn count(&self) -> u32 {
        self.count
    }

    pub fn finish(self) -> Result<u32> {
        let path = self.path;
        let mut file = self.out.into_inner().map_err(|e| Error::io(&path, e.into_error()))?;
        file.seek(SeekFrom::Start(4)).map_err(|e| Error::io(&path, e))?;
        file.write_all(&self.count.to_le_bytes()).map_err(|e| Error::io(&path, e))?;
        file.sync_all().map_err(|e| Error::io(&path, e))?;
        Ok(self.count)
    }
}

pub fn write_feature_cache(path: &Path, records: &[EmbeddingRecord]) -> Result<()> {
    let mut w = FeatureCacheWriter::create(path)?;
    for r in records {
        w.append(r)?;
    }
    w.finish().map(|_| ())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format(path, format!("truncated while reading {what}"))
        } else {
            Error::io(path, e)
        }
    })
}

pub fn decode_records<R: Read>(r: &mut R, path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, path, "magic")?;
    if &magic != CACHE_MAGIC {
        return Err(Error::format(path, "not a feature cache (bad magic)"));
    }
    let mut word = [0u8; 4];
    read_exact(r, &mut word, path, "record count")?;
    let count = u32::from_le_bytes(word) as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    let mut values = vec![0u8; EMBED_DIM * 4];
    for i in 0..count {
        read_exact(r, &mut word, path, "id length")?;
        let mut id = vec![0u8; u32::from_le_bytes(word) as usize];
        read_exact(r, &mut id, path, "volume id")?;
        let volume_id = String::from_utf8(id)
            .map_err(|_| Error::format(path, format!("record {i}: volume id is not UTF-8")))?;
        read_exact(r, &mut word, path, "set index")?;
        let set_index = i32::from_le_bytes(word);
        let mut code = [0u8; 1];
        read_exact(r, &mut code, path, "label")?;
        let label = label_from_code(code[0] as i8)
            .ok_or_else(|| Error::format(path, format!("record {i}: bad label code {}", code[0] as i8)))?;
        read_exact(r, &mut values, path, "embedding")?;
        let embedding = values
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        records.push(EmbeddingRecord {
            volume_id,
            set_index,
            label,
            embedding,
        });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::format(path, "trailing bytes after the last record"));
    }
    Ok(records)
}

pub fn read_feature_cache(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    decode_records(&mut BufReader::new(file), path)
}

/// One record per test-time set (strata plus the center set), in set order.
pub fn extract_features(pv: &PreparedVolume, model: &Classifier3d) -> Result<Vec<EmbeddingRecord>> {
    let cfg = model.config();
    test_clips(pv, cfg.frames, cfg.crop_size)?
        .into_iter()
        .enumerate()
        .map(|(i, (_, clip))| {
            let (_, embedding) = model.predict_clip(&clip)?;
            let rec = EmbeddingRecord {
                volume_id: pv.volume_id.clone(),
                set_index: i as i32,
                label: pv.label,
                embedding,
            };
            rec.validate()?;
            Ok(rec)
        })
        .collect()
}

/// Group records by volume, keeping first-seen volume order.
pub fn group_by_volume(records: &[EmbeddingRecord]) -> Vec<(String, Option<Label>, Vec<&EmbeddingRecord>)> {
    let mut groups: Vec<(String, Option<Label>, Vec<&EmbeddingRecord>)> = Vec::new();
    let mut index = std::collections::HashMap::new();
    for r in records {
        let slot = *index.entry(r.volume_id.clone()).or_insert_with(|| {
            groups.push((r.volume_id.clone(), r.label, Vec::new()));
            groups.len() - 1
        });
        groups[slot].2.push(r);
    }
    groups
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, set: i32, label: Option<Label>) -> EmbeddingRecord {
        EmbeddingRecord {
            volume_id: id.into(),
            set_index: set,
            label,
            embedding: (0..EMBED_DIM).map(|i| i as f32 * 0.5 - set as f32).collect(),
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        let recs = vec![rec("a", 0, Some(Label::Covid)), rec("ü", 3, None), rec("b", -2, Some(Label::NonCovid))];
        write_feature_cache(&path, &recs).unwrap();
        assert_eq!(read_feature_cache(&path).unwrap(), recs);
    }

    #[test]
    fn byte_layout() {
        let mut buf = Vec::new();
        encode_record(&rec("ab", 7, None), &mut buf).unwrap();
        assert_eq!(&buf[0..4], &2u32.to_le_bytes());
        assert_eq!(&buf[4..6], b"ab");
        assert_eq!(&buf[6..10], &7i32.to_le_bytes());
        assert_eq!(buf[10] as i8, -1);
        assert_eq!(buf.len(), 11 + EMBED_DIM * 4);
    }

    #[test]
    fn rejects_wrong_dim_and_truncation() {
        let mut r = rec("a", 0, None);
        r.embedding.pop();
        assert!(encode_record(&r, &mut Vec::new()).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        write_feature_cache(&path, &[rec("a", 0, None)]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_feature_cache(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn grouping_keeps_order() {
        let recs = vec![rec("b", 0, None), rec("a", 0, None), rec("b", 1, None)];
        let g = group_by_volume(&recs);
        assert_eq!(g.len(), 2);
        assert_eq!(g[0].0, "b");
        assert_eq!(g[0].2.len(), 2);
    }
}
