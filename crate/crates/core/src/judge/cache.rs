use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::tensor::Judgement;
use crate::dataset::ImageId;
use crate::vocab::ClassId;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("judge cache {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("judge cache {path}, line {line}: {source}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

/// One completed judge call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub cache_key: String,
    pub image_id: ImageId,
    pub class_id: ClassId,
    pub judge_id: String,
    pub question_id: String,
    pub raw: String,
    pub normalized: Judgement,
}

/// Digest of everything that determines a judge output.
pub fn cache_key(prompt: &str, judge_id: &str, decoding: &str) -> String {
    let mut h = Sha256::new();
    h.update(judge_id.as_bytes());
    h.update([0]);
    h.update(decoding.as_bytes());
    h.update([0]);
    h.update(prompt.as_bytes());
    hex::encode(h.finalize())
}

/// Append-only JSON-lines cache of judge results.
#[derive(Debug)]
pub struct JudgeCache {
    path: PathBuf,
    entries: HashMap<String, CacheRecord>,
    file: File,
}

impl JudgeCache {
    /// Open or create the cache. A torn final line left by an interrupted
    /// write is cut off; any other unreadable line is an error.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, CacheError> {
        let path = path.as_ref().to_path_buf();
        let io = |source| CacheError::Io {
            path: path.clone(),
            source,
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(io)?;
        }
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&path)
            .map_err(io)?;

        let mut entries = HashMap::new();
        let mut good_len = 0u64;
        let mut reader = BufReader::new(&mut file);
        let mut line = String::new();
        let mut lineno = 0;
        loop {
            line.clear();
            let n = reader.read_line(&mut line).map_err(io)?;
            if n == 0 {
                break;
            }
            lineno += 1;
            if !line.ends_with('\n') {
                log::warn!("dropping torn final line of judge cache {}", path.display());
                break;
            }
            if !line.trim().is_empty() {
                let record: CacheRecord =
                    serde_json::from_str(&line).map_err(|source| CacheError::Corrupt {
                        path: path.clone(),
                        line: lineno,
                        source,
                    })?;
                entries.insert(record.cache_key.clone(), record);
            }
            good_len += n as u64;
        }
        drop(reader);
        if file.seek(SeekFrom::End(0)).map_err(io)? != good_len {
            file.set_len(good_len).map_err(io)?;
        }
        Ok(Self {
            path,
            entries,
            file,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&CacheRecord> {
        self.entries.get(key)
    }

    /// Write and flush one record; the record counts as cached only once this returns.
    pub fn append(&mut self, record: CacheRecord) -> Result<(), CacheError> {
        let mut line = serde_json::to_string(&record).expect("cache records serialize");
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|source| CacheError::Io {
                path: self.path.clone(),
                source,
            })?;
        self.entries.insert(record.cache_key.clone(), record);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(key: &str, v: Judgement) -> CacheRecord {
        CacheRecord {
            cache_key: key.into(),
            image_id: ImageId(1),
            class_id: ClassId(2),
            judge_id: "j".into(),
            question_id: "q".into(),
            raw: "yes".into(),
            normalized: v,
        }
    }

    #[test]
    fn keys_separate_inputs() {
        let a = cache_key("p", "j", "d");
        assert_eq!(a.len(), 64);
        assert_eq!(a, cache_key("p", "j", "d"));
        assert_ne!(a, cache_key("p", "k", "d"));
        assert_ne!(a, cache_key("p", "j", "e"));
        assert_ne!(a, cache_key("q", "j", "d"));
        // field boundaries matter
        assert_ne!(cache_key("b", "a", "d"), cache_key("", "ab", "d"));
    }

    #[test]
    fn persists_across_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/cache.jsonl");
        {
            let mut c = JudgeCache::open(&path).unwrap();
            assert!(c.is_empty());
            c.append(record("a", Judgement::Yes)).unwrap();
            c.append(record("b", Judgement::Invalid)).unwrap();
        }
        let c = JudgeCache::open(&path).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.get("b").unwrap().normalized, Judgement::Invalid);
    }

    #[test]
    fn torn_tail_is_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        {
            let mut c = JudgeCache::open(&path).unwrap();
            c.append(record("a", Judgement::Yes)).unwrap();
        }
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("{\"cache_key\":\"b\",\"ima");
        std::fs::write(&path, &text).unwrap();
        {
            let mut c = JudgeCache::open(&path).unwrap();
            assert_eq!(c.len(), 1);
            c.append(record("c", Judgement::No)).unwrap();
        }
        let c = JudgeCache::open(&path).unwrap();
        assert_eq!(c.len(), 2);
        assert!(c.get("c").is_some());
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        std::fs::write(&path, "garbage\n").unwrap();
        assert!(matches!(
            JudgeCache::open(&path),
            Err(CacheError::Corrupt { line: 1, .. })
        ));
    }
}
