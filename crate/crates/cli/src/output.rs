//! Run directories: everything is written to a hidden sibling staging
//! directory and renamed into place only after the run succeeded, so a
//! failed run leaves nothing behind. A `<dir>.lock` file marks ownership
//! while the run is in progress.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde::Serialize;

pub const BUILD_ID: &str = env!("RTD_BUILD_ID");

pub struct RunDir {
    target: PathBuf,
    staging: PathBuf,
    lock: PathBuf,
    started: Instant,
    started_unix: u64,
    finished: bool,
}

fn sibling(target: &Path, suffix: &str) -> Result<PathBuf> {
    let name = target
        .file_name()
        .with_context(|| format!("output path {} has no final component", target.display()))?
        .to_string_lossy()
        .into_owned();
    let parent = target.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    Ok(parent.join(format!("{name}{suffix}")))
}

impl RunDir {
    /// Claims `target`. Fails if it exists (unless `force`) or if another run
    /// holds the lock.
    pub fn create(target: &Path, force: bool) -> Result<Self> {
        if target.exists() && !force {
            bail!("output directory {} already exists (pass --force to replace it)", target.display());
        }
        if let Some(parent) = target.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        let lock = sibling(target, ".lock")?;
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
            .with_context(|| format!("{} is locked by another run ({})", target.display(), lock.display()))?;
        writeln!(f, "{}", std::process::id()).ok();
        let name = target.file_name().expect("checked").to_string_lossy().into_owned();
        let parent = target.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let staging = parent.join(format!(".{name}.staging-{}", std::process::id()));
        let dir = RunDir {
            target: target.to_path_buf(),
            staging,
            lock,
            started: Instant::now(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            finished: false,
        };
        if dir.staging.exists() {
            fs::remove_dir_all(&dir.staging)?;
        }
        fs::create_dir_all(&dir.staging).with_context(|| format!("creating {}", dir.staging.display()))?;
        Ok(dir)
    }

    /// Path of an artifact inside the staging directory.
    pub fn path(&self, name: &str) -> PathBuf {
        self.staging.join(name)
    }

    pub fn create_file(&self, name: &str) -> Result<File> {
        let p = self.path(name);
        File::create(&p).with_context(|| format!("creating {}", p.display()))
    }

    pub fn write_json(&self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(self.path(name), text).with_context(|| format!("writing {name}"))
    }

    /// Writes `run.json` and moves the directory into place.
    pub fn finish(mut self, command: &str, config: &impl Serialize, seed: u64) -> Result<PathBuf> {
        let mut artifacts: Vec<String> = fs::read_dir(&self.staging)?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        artifacts.push("run.json".into());
        artifacts.sort();
        let record = RunRecord {
            command,
            args: std::env::args().skip(1).collect(),
            seed,
            build: BUILD_ID,
            started_unix: self.started_unix,
            wall_time_secs: self.started.elapsed().as_secs_f64(),
            artifacts,
            config,
        };
        self.write_json("run.json", &record)?;
        if self.target.exists() {
            fs::remove_dir_all(&self.target).with_context(|| format!("replacing {}", self.target.display()))?;
        }
        fs::rename(&self.staging, &self.target)
            .with_context(|| format!("moving results to {}", self.target.display()))?;
        self.finished = true;
        Ok(self.target.clone())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        if !self.finished {
            let _ = fs::remove_dir_all(&self.staging);
        }
        let _ = fs::remove_file(&self.lock);
    }
}

#[derive(Serialize)]
struct RunRecord<'a, C: Serialize> {
    command: &'a str,
    args: Vec<String>,
    seed: u64,
    build: &'a str,
    started_unix: u64,
    wall_time_secs: f64,
    artifacts: Vec<String>,
    config: &'a C,
}
