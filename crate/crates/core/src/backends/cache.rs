//! Content-addressed embedding cache.
//!
//! Keys are `sha256(embedder identifier || 0x00 || text)`. Entries live in
//! memory and, when a directory is configured, as `<dir>/<ab>/<key>.f64`
//! files holding little-endian `f64`s.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::RwLock;

use sha2::{Digest, Sha256};

use super::{check_uniform_dim, BackendError, Embedder, EmbeddingVector};

pub struct CachedEmbedder<E> {
    inner: E,
    ident: String,
    memory: RwLock<HashMap<String, EmbeddingVector>>,
    dir: Option<PathBuf>,
    inner_calls: AtomicUsize,
    inner_texts: AtomicUsize,
}

impl<E: Embedder> CachedEmbedder<E> {
    pub fn new(inner: E) -> Self {
        let ident = inner.identifier();
        CachedEmbedder {
            inner,
            ident,
            memory: RwLock::new(HashMap::new()),
            dir: None,
            inner_calls: AtomicUsize::new(0),
            inner_texts: AtomicUsize::new(0),
        }
    }

    /// Also persist entries under `dir`.
    pub fn with_dir(mut self, dir: impl Into<PathBuf>) -> Result<Self, BackendError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        self.dir = Some(dir);
        Ok(self)
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }

    /// Batches forwarded to the wrapped embedder.
    pub fn backend_calls(&self) -> usize {
        self.inner_calls.load(Ordering::SeqCst)
    }

    /// Texts the wrapped embedder has been asked to embed.
    pub fn backend_texts(&self) -> usize {
        self.inner_texts.load(Ordering::SeqCst)
    }

    pub fn key(&self, text: &str) -> String {
        let mut h = Sha256::new();
        h.update(self.ident.as_bytes());
        h.update([0u8]);
        h.update(text.as_bytes());
        hex::encode(h.finalize())
    }

    fn path_for(dir: &Path, key: &str) -> PathBuf {
        dir.join(&key[..2]).join(format!("{key}.f64"))
    }

    fn read_disk(&self, key: &str) -> Option<EmbeddingVector> {
        let dir = self.dir.as_ref()?;
        let bytes = fs::read(Self::path_for(dir, key)).ok()?;
        if bytes.is_empty() || bytes.len() % 8 != 0 {
            return None;
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        EmbeddingVector::new(values).ok()
    }

    fn write_disk(&self, key: &str, v: &EmbeddingVector) -> Result<(), BackendError> {
        let Some(dir) = self.dir.as_ref() else {
            return Ok(());
        };
        let path = Self::path_for(dir, key);
        fs::create_dir_all(path.parent().unwrap())?;
        let bytes: Vec<u8> = v.values().iter().flat_map(|x| x.to_le_bytes()).collect();
        // rename keeps concurrent readers from seeing a partial file
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, &path)?;
        Ok(())
    }

    fn lookup(&self, key: &str) -> Option<EmbeddingVector> {
        if let Some(v) = self.memory.read().expect("cache lock poisoned").get(key) {
            return Some(v.clone());
        }
        let v = self.read_disk(key)?;
        self.memory
            .write()
            .expect("cache lock poisoned")
            .insert(key.to_string(), v.clone());
        Some(v)
    }
}

impl<E: Embedder> Embedder for CachedEmbedder<E> {
    fn identifier(&self) -> String {
        self.ident.clone()
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError> {
        let keys: Vec<String> = texts.iter().map(|t| self.key(t)).collect();
        let mut found: Vec<Option<EmbeddingVector>> = keys.iter().map(|k| self.lookup(k)).collect();

        let mut miss_keys: Vec<&str> = Vec::new();
        let mut miss_texts: Vec<String> = Vec::new();
        for (i, slot) in found.iter().enumerate() {
            if slot.is_none() && !miss_keys.contains(&keys[i].as_str()) {
                miss_keys.push(&keys[i]);
                miss_texts.push(texts[i].clone());
            }
        }

        if !miss_texts.is_empty() {
            self.inner_calls.fetch_add(1, Ordering::SeqCst);
            self.inner_texts.fetch_add(miss_texts.len(), Ordering::SeqCst);
            let fresh = self.inner.embed(&miss_texts)?;
            if fresh.len() != miss_texts.len() {
                return Err(BackendError::BadResponse(format!(
                    "asked for {} embeddings, got {}",
                    miss_texts.len(),
                    fresh.len()
                )));
            }
            check_uniform_dim(&fresh)?;
            let mut fresh_by_key = HashMap::new();
            {
                let mut mem = self.memory.write().expect("cache lock poisoned");
                for (k, v) in miss_keys.iter().zip(fresh) {
                    self.write_disk(k, &v)?;
                    mem.insert(k.to_string(), v.clone());
                    fresh_by_key.insert(*k, v);
                }
            }
            for (i, slot) in found.iter_mut().enumerate() {
                if slot.is_none() {
                    *slot = fresh_by_key.get(keys[i].as_str()).cloned();
                }
            }
        }

        let out: Vec<EmbeddingVector> = found.into_iter().map(|v| v.expect("filled")).collect();
        check_uniform_dim(&out)?;
        Ok(out)
    }
}
