use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::Utc;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::jobs::Job;

/// Environment variable naming the directory that holds run directories.
pub const OUT_ENV: &str = "CDDS_OUT";
pub const DEFAULT_OUT: &str = "runs";
pub const MANIFEST: &str = "manifest.json";

pub fn out_root() -> PathBuf {
    env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn revision() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

fn now() -> String {
    Utc::now().to_rfc3339()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub argv: Vec<String>,
    pub job: Job,
    pub seed: u64,
    pub revision: String,
    pub started: String,
    pub finished: Option<String>,
    pub run_dir: PathBuf,
    pub outputs: Vec<PathBuf>,
}

pub fn read_manifest(path: &Path) -> CliResult<RunManifest> {
    if !path.exists() {
        return Err(CliError::MissingInput(path.to_path_buf()));
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// One run directory, `<timestamp>-s<seed>-<command>` under the output root.
#[derive(Debug)]
pub struct RunDir {
    pub path: PathBuf,
    manifest: RunManifest,
}

impl RunDir {
    pub fn create(root: &Path, job: &Job, argv: Vec<String>) -> CliResult<Self> {
        fs::create_dir_all(root)?;
        let path = loop {
            let stamp = Utc::now().format("%Y%m%dT%H%M%S%3f");
            let p = root.join(format!("{stamp}-s{}-{}", job.seed(), job.name()));
            match fs::create_dir(&p) {
                Ok(()) => break p,
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    std::thread::sleep(std::time::Duration::from_millis(2));
                }
                Err(e) => return Err(e.into()),
            }
        };
        let manifest = RunManifest {
            argv,
            job: job.clone(),
            seed: job.seed(),
            revision: revision(),
            started: now(),
            finished: None,
            run_dir: path.clone(),
            outputs: Vec::new(),
        };
        let run = Self { path, manifest };
        run.write_manifest()?;
        Ok(run)
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    fn write_manifest(&self) -> CliResult<()> {
        fs::write(self.file(MANIFEST), serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(())
    }

    pub fn finish(mut self, mut outputs: Vec<PathBuf>) -> CliResult<RunManifest> {
        outputs.sort();
        self.manifest.outputs = outputs;
        self.manifest.finished = Some(now());
        self.write_manifest()?;
        Ok(self.manifest)
    }
}

/// Most recent run of `command` under `root`, by directory name.
pub fn latest_run(root: &Path, command: &str) -> Option<PathBuf> {
    let suffix = format!("-{command}");
    fs::read_dir(root)
        .ok()?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.is_dir()
                && p.join(MANIFEST).is_file()
                && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(&suffix))
        })
        .max()
}
