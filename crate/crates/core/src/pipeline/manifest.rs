use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PipelineError;

/// Subdirectory of the run directory holding one manifest per stage.
pub const MANIFEST_DIR: &str = "manifests";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

pub fn sha256_file(path: &Path) -> Result<String, PipelineError> {
    let bytes = fs::read(path).map_err(PipelineError::io(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Record of one stage execution: settings plus the hashes of every file
/// read and written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config: BTreeMap<String, String>,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

impl Manifest {
    pub fn new(stage: &str, config: BTreeMap<String, String>) -> Self {
        Self {
            stage: stage.into(),
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn path(out: &Path, stage: &str) -> PathBuf {
        out.join(MANIFEST_DIR).join(format!("{stage}.json"))
    }

    pub fn input(&mut self, path: &Path) -> Result<(), PipelineError> {
        self.inputs.push(FileHash {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<(), PipelineError> {
        self.outputs.push(FileHash {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    pub fn write(&self, out: &Path) -> Result<(), PipelineError> {
        let p = Self::path(out, &self.stage);
        fs::create_dir_all(p.parent().expect("manifest path has a parent")).map_err(PipelineError::io(&p))?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&p, text).map_err(PipelineError::io(&p))
    }

    pub fn load(out: &Path, stage: &str) -> Result<Self, PipelineError> {
        let p = Self::path(out, stage);
        let text = fs::read_to_string(&p).map_err(|_| PipelineError::Stale {
            stage: stage.into(),
            detail: format!("no manifest for stage `{stage}` at {}", p.display()),
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Checks that `path` is the file `stage` last wrote and that the
    /// stage's own inputs are unchanged since.
    pub fn require(out: &Path, stage: &str, path: &Path) -> Result<(), PipelineError> {
        let m = Self::load(out, stage)?;
        let stale = |detail: String| PipelineError::Stale {
            stage: stage.into(),
            detail,
        };
        let key = path.display().to_string();
        let rec = m
            .outputs
            .iter()
            .find(|f| f.path == key)
            .ok_or_else(|| stale(format!("{key} was not produced by `{stage}`")))?;
        if !path.exists() {
            return Err(stale(format!("{key} is missing")));
        }
        if sha256_file(path)? != rec.sha256 {
            return Err(stale(format!("{key} changed after `{stage}` wrote it")));
        }
        for f in &m.inputs {
            let p = Path::new(&f.path);
            if !p.exists() || sha256_file(p)? != f.sha256 {
                return Err(stale(format!("input {} of `{stage}` changed", f.path)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_changed_outputs_and_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path();
        let inp = out.join("in.txt");
        let res = out.join("res.txt");
        fs::write(&inp, "a").unwrap();
        fs::write(&res, "b").unwrap();
        let mut m = Manifest::new("stage1", BTreeMap::new());
        m.input(&inp).unwrap();
        m.output(&res).unwrap();
        m.write(out).unwrap();
        Manifest::require(out, "stage1", &res).unwrap();

        fs::write(&res, "c").unwrap();
        let e = Manifest::require(out, "stage1", &res).unwrap_err();
        assert!(e.to_string().ends_with("rerun `stage1`"), "{e}");

        fs::write(&res, "b").unwrap();
        fs::write(&inp, "z").unwrap();
        assert!(matches!(Manifest::require(out, "stage1", &res), Err(PipelineError::Stale { .. })));

        let e = Manifest::require(out, "stage2", &res).unwrap_err();
        assert!(e.to_string().contains("rerun `stage2`"));
    }

    #[test]
    fn hash_is_sha256() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x");
        fs::write(&p, "abc").unwrap();
        assert_eq!(
            sha256_file(&p).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
