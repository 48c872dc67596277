use std::fs;
use std::path::{Path, PathBuf};

use super::{io_err, Kb, KbError, VerifyReport};
use crate::canon;

impl Kb {
    fn blob_path(&self, digest: &str) -> Option<PathBuf> {
        self.dir
            .as_ref()
            .map(|d| d.join("objects").join(&digest[..2]).join(&digest[2..]))
    }

    /// Stores a file by content digest; returns (digest, size).
    pub fn put_blob(&mut self, path: &Path) -> Result<(String, u64), KbError> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        self.put_bytes(bytes)
    }

    pub fn put_bytes(&mut self, bytes: Vec<u8>) -> Result<(String, u64), KbError> {
        let digest = canon::sha256_hex(&bytes);
        let size = bytes.len() as u64;
        match self.blob_path(&digest) {
            None => {
                self.mem_blobs.entry(digest.clone()).or_insert(bytes);
            }
            Some(dest) => {
                if !dest.exists() {
                    let parent = dest.parent().expect("fan-out directory");
                    fs::create_dir_all(parent).map_err(io_err(parent))?;
                    let tmp = dest.with_extension(format!("tmp{}", std::process::id()));
                    fs::write(&tmp, &bytes).map_err(io_err(&tmp))?;
                    fs::rename(&tmp, &dest).map_err(io_err(&dest))?;
                }
                let actual = canon::digest_file(&dest).map_err(io_err(&dest))?;
                if actual != digest {
                    return Err(KbError::DigestMismatch {
                        expected: digest,
                        actual,
                    });
                }
            }
        }
        Ok((digest, size))
    }

    pub fn read_blob(&self, digest: &str) -> Result<Vec<u8>, KbError> {
        let bytes = match self.blob_path(digest) {
            None => self
                .mem_blobs
                .get(digest)
                .cloned()
                .ok_or_else(|| KbError::MissingBlob(digest.to_string()))?,
            Some(p) if p.is_file() => fs::read(&p).map_err(io_err(&p))?,
            Some(_) => return Err(KbError::MissingBlob(digest.to_string())),
        };
        let actual = canon::sha256_hex(&bytes);
        if actual != digest {
            return Err(KbError::DigestMismatch {
                expected: digest.to_string(),
                actual,
            });
        }
        Ok(bytes)
    }

    pub fn has_blob(&self, digest: &str) -> bool {
        match self.blob_path(digest) {
            None => self.mem_blobs.contains_key(digest),
            Some(p) => p.is_file(),
        }
    }

    /// Writes the blob to `dest` and checks the written file's digest.
    pub fn restore_blob(&self, digest: &str, dest: &Path) -> Result<(), KbError> {
        if let Some(parent) = dest.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        match self.blob_path(digest) {
            None => {
                let bytes = self
                    .mem_blobs
                    .get(digest)
                    .ok_or_else(|| KbError::MissingBlob(digest.to_string()))?;
                fs::write(dest, bytes).map_err(io_err(dest))?;
            }
            Some(src) => {
                if !src.is_file() {
                    return Err(KbError::MissingBlob(digest.to_string()));
                }
                fs::copy(&src, dest).map_err(io_err(dest))?;
            }
        }
        let actual = canon::digest_file(dest).map_err(io_err(dest))?;
        if actual != digest {
            return Err(KbError::DigestMismatch {
                expected: digest.to_string(),
                actual,
            });
        }
        Ok(())
    }

    pub fn blob_digests(&self) -> Vec<String> {
        let Some(dir) = &self.dir else {
            let mut v: Vec<String> = self.mem_blobs.keys().cloned().collect();
            v.sort();
            return v;
        };
        let mut out = Vec::new();
        let Ok(fans) = fs::read_dir(dir.join("objects")) else {
            return out;
        };
        for fan in fans.flatten() {
            let prefix = fan.file_name().to_string_lossy().into_owned();
            let Ok(files) = fs::read_dir(fan.path()) else {
                continue;
            };
            for f in files.flatten() {
                let rest = f.file_name().to_string_lossy().into_owned();
                if !rest.contains('.') {
                    out.push(format!("{prefix}{rest}"));
                }
            }
        }
        out.sort();
        out
    }

    /// Recomputes every blob digest and checks that every recorded output exists.
    pub fn verify(&self) -> VerifyReport {
        let mut report = VerifyReport::default();
        for digest in self.blob_digests() {
            report.blobs_checked += 1;
            let ok = match self.blob_path(&digest) {
                None => self
                    .mem_blobs
                    .get(&digest)
                    .is_some_and(|b| canon::sha256_hex(b) == digest),
                Some(p) => canon::digest_file(&p).is_ok_and(|d| d == digest),
            };
            if !ok {
                report.corrupt_blobs.push(digest);
            }
        }
        let mut missing: Vec<String> = self
            .state
            .executions
            .iter()
            .flat_map(|r| r.outputs.values())
            .filter(|o| !self.has_blob(&o.digest))
            .map(|o| o.digest.clone())
            .collect();
        missing.sort();
        missing.dedup();
        report.missing_blobs = missing;
        report
    }
}
