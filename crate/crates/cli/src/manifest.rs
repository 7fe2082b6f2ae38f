use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::Value;

use curveseg::fmda::MODEL_FORMAT_VERSION;

use crate::Failure;

#[derive(Debug, Serialize)]
struct Versions {
    curveseg: &'static str,
    model_format: u32,
}

#[derive(Debug, Serialize)]
struct Timing {
    phase: String,
    seconds: f64,
}

/// Record of one run: what was asked, what was read and written, and how
/// long each phase took. Written once, after every output exists.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    subcommand: String,
    config: Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    seed: Option<u64>,
    versions: Versions,
    started_unix_seconds: u64,
    timings: Vec<Timing>,
    total_seconds: f64,
    summary: Value,
    #[serde(skip)]
    clock: Instant,
    #[serde(skip)]
    phase_start: Instant,
}

impl RunManifest {
    pub fn start(subcommand: &str, config: &impl Serialize, seed: Option<u64>) -> Self {
        let now = Instant::now();
        Self {
            subcommand: subcommand.to_string(),
            config: serde_json::to_value(config).unwrap_or(Value::Null),
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed,
            versions: Versions {
                curveseg: env!("CARGO_PKG_VERSION"),
                model_format: MODEL_FORMAT_VERSION,
            },
            started_unix_seconds: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            timings: Vec::new(),
            total_seconds: 0.0,
            summary: Value::Null,
            clock: now,
            phase_start: now,
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Closes the running phase under `name` and starts the next one.
    pub fn phase(&mut self, name: &str) {
        let now = Instant::now();
        self.timings.push(Timing {
            phase: name.to_string(),
            seconds: (now - self.phase_start).as_secs_f64(),
        });
        self.phase_start = now;
    }

    pub fn summary(&mut self, summary: Value) {
        self.summary = summary;
    }

    /// Writes the manifest to `explicit`, or next to `primary` as
    /// `<stem>.manifest.json`.
    pub fn finish(mut self, explicit: Option<&Path>, primary: &Path) -> Result<(), Failure> {
        self.total_seconds = self.clock.elapsed().as_secs_f64();
        let path = explicit.map_or_else(|| sibling(primary, "manifest.json"), Path::to_path_buf);
        let mut text = serde_json::to_string_pretty(&self).map_err(|e| Failure::Usage(e.to_string()))?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| {
            Failure::Core(curveseg::Error::Io {
                path: path.clone(),
                source: e,
            })
        })?;
        log::info!("manifest written to {}", path.display());
        Ok(())
    }
}

/// `dir/stem.csv` becomes `dir/stem.<suffix>`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}.{suffix}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sibling_replaces_the_extension() {
        assert_eq!(
            sibling(Path::new("out/model.json"), "report.json"),
            PathBuf::from("out/model.report.json")
        );
        assert_eq!(
            sibling(Path::new("curves"), "truth.csv"),
            PathBuf::from("curves.truth.csv")
        );
        assert_eq!(
            sibling(Path::new("plots/inspect"), "manifest.json"),
            PathBuf::from("plots/inspect.manifest.json")
        );
    }
}
