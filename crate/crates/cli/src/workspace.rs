//! Artifact layout of an output directory and the manifest each command
//! leaves behind.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use cxs_core::checkpoint::{blob_path, load_checkpoint, save_checkpoint};
use cxs_core::config::{digest_bytes, RunConfig};
use cxs_core::dataset::read_dataset;
use cxs_core::encoders::OracleEncoders;
use cxs_core::error::CxsError;
use cxs_core::scene::Scene;
use numkernel::Tensor;
use serde_json::{json, Value};

use crate::error::{CliError, CliResult};

pub const TRAIN_DATA: &str = "train.cxsd";
pub const TEST_DATA: &str = "test.cxsd";
pub const TRAIN_SUPERVISION: &str = "supervision-train.cxsg";
pub const TEST_SUPERVISION: &str = "supervision-test.cxsg";
pub const SAMPLER: &str = "sampler.json";
pub const PREDICTOR: &str = "predictor.json";
pub const HEAD: &str = "head.json";
pub const CALIBRATION: &str = "calibration.json";
pub const EVALUATION: &str = "evaluation.json";
pub const SWEEP: &str = "sweep.csv";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_JSON: &str = "ablation.json";
pub const GRADCHECK: &str = "gradcheck.json";

pub struct Workspace {
    pub cfg: RunConfig,
    /// Keys set by the config file or a flag rather than left at default.
    pub explicit: BTreeSet<String>,
    pub out: PathBuf,
    pub workers: usize,
}

impl Workspace {
    pub fn new(cfg: RunConfig, explicit: BTreeSet<String>, out: PathBuf, workers: usize) -> CliResult<Self> {
        fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
        Ok(Self { cfg, explicit, out, workers })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn train_data(&self) -> PathBuf {
        match self.cfg.train_data.as_str() {
            "" => self.path(TRAIN_DATA),
            p => PathBuf::from(p),
        }
    }

    pub fn test_data(&self) -> PathBuf {
        match self.cfg.test_data.as_str() {
            "" => self.path(TEST_DATA),
            p => PathBuf::from(p),
        }
    }

    pub fn encoders(&self) -> CliResult<OracleEncoders> {
        let c = &self.cfg;
        Ok(OracleEncoders::new(&c.scene, c.dim, c.text_dim, c.encoder_seed)?)
    }

    pub fn start(&self, command: &'static str) -> Run<'_> {
        log::info!("{command}: config digest {}", self.cfg.digest());
        Run {
            ws: self,
            command,
            started: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }
}

pub fn require(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingInput(path.to_path_buf()))
    }
}

fn file_digest(path: &Path) -> CliResult<String> {
    Ok(digest_bytes(&fs::read(path).map_err(|e| CliError::io(path, e))?))
}

/// One command invocation: records the files it reads and writes, then
/// leaves `<command>.manifest.json` in the output directory.
pub struct Run<'w> {
    pub ws: &'w Workspace,
    command: &'static str,
    started: Instant,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Run<'_> {
    pub fn input(&mut self, path: &Path) -> CliResult<PathBuf> {
        require(path)?;
        self.inputs.push(path.to_path_buf());
        Ok(path.to_path_buf())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn scenes(&mut self, path: &Path) -> CliResult<Vec<Scene>> {
        self.input(path)?;
        let (header, scenes) = read_dataset(path)?;
        header.matches(&self.ws.cfg.scene)?;
        Ok(scenes)
    }

    pub fn write(&mut self, name: &str, contents: &[u8]) -> CliResult<PathBuf> {
        let path = self.ws.path(name);
        fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
        self.output(&path);
        Ok(path)
    }

    pub fn write_json(&mut self, name: &str, value: &Value) -> CliResult<PathBuf> {
        let text = serde_json::to_string_pretty(value).map_err(CxsError::from)? + "\n";
        self.write(name, text.as_bytes())
    }

    pub fn save_checkpoint(&mut self, name: &str, kind: &str, meta: Value, tensors: &[(String, &Tensor)]) -> CliResult<()> {
        let path = save_checkpoint(&self.ws.path(name), kind, meta, tensors)?;
        self.output(&blob_path(&path));
        self.output(&path);
        Ok(())
    }

    pub fn load_checkpoint(&mut self, name: &str, kind: &str) -> CliResult<(Value, Vec<(String, Tensor)>)> {
        let path = self.ws.path(name);
        self.input(&path)?;
        self.input(&blob_path(&path))?;
        let (manifest, tensors) = load_checkpoint(&path, kind)?;
        Ok((manifest.meta, tensors))
    }

    pub fn read_json(&mut self, name: &str) -> CliResult<Value> {
        let path = self.input(&self.ws.path(name))?;
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        Ok(serde_json::from_str(&text).map_err(CxsError::from)?)
    }

    pub fn finish(self) -> CliResult<()> {
        let digests = |paths: &[PathBuf]| -> CliResult<Vec<Value>> {
            paths
                .iter()
                .map(|p| Ok(json!({ "path": p.display().to_string(), "sha256": file_digest(p)? })))
                .collect()
        };
        let finished = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let cfg = &self.ws.cfg;
        let manifest = json!({
            "command": self.command,
            "config": cfg.to_json(),
            "config_text": cfg.to_text(),
            "config_digest": cfg.digest(),
            "seed": cfg.seed,
            "workers": self.ws.workers,
            "inputs": digests(&self.inputs)?,
            "outputs": digests(&self.outputs)?,
            "wall_ms": self.started.elapsed().as_millis() as u64,
            "finished_unix": finished,
        });
        let path = self.ws.path(&format!("{}.manifest.json", self.command));
        let text = serde_json::to_string_pretty(&manifest).map_err(CxsError::from)? + "\n";
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        log::info!("{}: wrote {}", self.command, path.display());
        Ok(())
    }
}
