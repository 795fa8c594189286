// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run manifests, provenance-stamped artifacts and the command-line front
//! end.
//!
//! Every file a command writes carries the run id, the dataset hash and the
//! digests of the models involved, so artifacts from different runs cannot
//! be mixed silently. Files are written to a temporary sibling and renamed
//! into place.

pub mod cli;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::model::{sha256_hex, ModelBundle};
use crate::toy::{build_model, IdleStyle, PlantedSpec};

/// Environment variable naming the directory corrupted-mean activations
/// are spilled to and reused from.
pub const CACHE_ENV: &str = "CIRCUIT_ALIGN_CACHE";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelRef {
    pub name: String,
    /// As given on the command line.
    pub spec: String,
    pub digest: String,
}

/// Identity and outputs of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub flags: Value,
    pub models: Vec<ModelRef>,
    pub dataset_hash: Option<String>,
    pub corrupted_hash: Option<String>,
    pub seeds: Vec<u64>,
    pub toolkit_version: String,
    /// Digest of everything above; stamped into every artifact.
    pub run_id: String,
    pub started: String,
    pub wall_clock_secs: f64,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(
        command: &str,
        flags: Value,
        models: Vec<ModelRef>,
        dataset_hash: Option<String>,
        corrupted_hash: Option<String>,
        seeds: Vec<u64>,
    ) -> Result<Self> {
        let mut m = Self {
            command: command.to_string(),
            flags,
            models,
            dataset_hash,
            corrupted_hash,
            seeds,
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            run_id: String::new(),
            started: crate::alignment::timestamp_now(),
            wall_clock_secs: 0.0,
            outputs: Vec::new(),
        };
        m.run_id = m.identity_digest()?;
        Ok(m)
    }

    /// sha256 over command, flags, models, dataset hashes, seeds and
    /// version. Independent of timing, outputs and the execution-only
    /// flags in [`EXECUTION_FLAGS`].
    pub fn identity_digest(&self) -> Result<String> {
        let mut flags = self.flags.clone();
        strip_execution_flags(&mut flags);
        let identity = serde_json::json!({
            "command": self.command,
            "flags": flags,
            "models": self.models,
            "dataset_hash": self.dataset_hash,
            "corrupted_hash": self.corrupted_hash,
            "seeds": self.seeds,
            "toolkit_version": self.toolkit_version,
        });
        Ok(sha256_hex(&serde_json::to_vec(&identity)?))
    }

    fn model_digests(&self) -> Map<String, Value> {
        self.models
            .iter()
            .map(|m| (m.name.clone(), Value::String(m.digest.clone())))
            .collect()
    }
}

/// Flags that choose where or how a run executes but not what it computes.
/// Dataset paths are listed because the files are identified by content hash.
pub const EXECUTION_FLAGS: [&str; 5] = ["out_dir", "threads", "sequential", "dataset_path", "corrupted_path"];

fn strip_execution_flags(v: &mut Value) {
    match v {
        Value::Object(m) => {
            for k in EXECUTION_FLAGS {
                m.remove(k);
            }
            m.values_mut().for_each(strip_execution_flags);
        }
        Value::Array(a) => a.iter_mut().for_each(strip_execution_flags),
        _ => {}
    }
}

/// Write `bytes` to `path` via a temporary sibling and a rename, so a
/// reader never sees a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("no file name in {}", path.display())))?
        .to_string_lossy();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    Ok(result?)
}

/// Writes provenance-stamped artifacts for one run and records them in the
/// manifest.
#[derive(Debug)]
pub struct ArtifactWriter {
    dir: PathBuf,
    pub manifest: RunManifest,
    started: std::time::Instant,
}

impl ArtifactWriter {
    pub fn new(dir: &Path, manifest: RunManifest) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            started: std::time::Instant::now(),
        })
    }

    /// Measure wall-clock time from `start` instead of from construction.
    pub fn started_at(mut self, start: std::time::Instant) -> Self {
        self.started = start;
        self
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn provenance(&self) -> Map<String, Value> {
        let mut p = Map::new();
        p.insert("run_id".into(), Value::String(self.manifest.run_id.clone()));
        if let Some(h) = &self.manifest.dataset_hash {
            p.insert("dataset_hash".into(), Value::String(h.clone()));
        }
        p.insert("model_digests".into(), Value::Object(self.manifest.model_digests()));
        p
    }

    fn record(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        atomic_write(&path, bytes)?;
        self.manifest.outputs.push(name.to_string());
        Ok(path)
    }

    /// JSON object with the provenance keys first. Non-object values are
    /// nested under `key`. Keys already present in `value` win.
    pub fn write_json<T: Serialize>(&mut self, name: &str, key: &str, value: &T) -> Result<PathBuf> {
        let mut out = self.provenance();
        match serde_json::to_value(value)? {
            Value::Object(fields) => {
                for (k, v) in fields {
                    out.insert(k, v);
                }
            }
            other => {
                out.insert(key.to_string(), other);
            }
        }
        let mut bytes = serde_json::to_vec_pretty(&Value::Object(out))?;
        bytes.push(b'\n');
        self.record(name, &bytes)
    }

    /// CSV body preceded by one `#` provenance line.
    pub fn write_csv(&mut self, name: &str, body: &str) -> Result<PathBuf> {
        let text = format!("{}\n{body}", self.comment_line("#"));
        self.record(name, text.as_bytes())
    }

    /// Graphviz source preceded by a `//` provenance line.
    pub fn write_dot(&mut self, name: &str, body: &str) -> Result<PathBuf> {
        let text = format!("{}\n{body}", self.comment_line("//"));
        self.record(name, text.as_bytes())
    }

    fn comment_line(&self, marker: &str) -> String {
        let models: Vec<String> = self.manifest.models.iter().map(|m| format!("{}:{}", m.name, m.digest)).collect();
        format!(
            "{marker} run_id={} dataset_hash={} models={}",
            self.manifest.run_id,
            self.manifest.dataset_hash.as_deref().unwrap_or("-"),
            models.join(",")
        )
    }

    /// Write `manifest.json` last, with the wall-clock time and output list.
    pub fn finish(mut self) -> Result<RunManifest> {
        self.manifest.wall_clock_secs = self.started.elapsed().as_secs_f64();
        let mut bytes = serde_json::to_vec_pretty(&self.manifest)?;
        bytes.push(b'\n');
        atomic_write(&self.dir.join("manifest.json"), &bytes)?;
        Ok(self.manifest)
    }
}

/// Split a `#`/`//` provenance header line into its `key=value` fields.
pub fn parse_provenance_line(line: &str) -> BTreeMap<String, String> {
    line.trim_start_matches(['#', '/'])
        .split_whitespace()
        .filter_map(|kv| kv.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

/// Resolve a model argument: `toy:teacher`, `toy:student-high` (or
/// `toy:high`, `-medium`, `-low`), or a bundle directory.
pub fn resolve_model(spec: &str) -> Result<ModelBundle> {
    if let Some(name) = spec.strip_prefix("toy:") {
        let planted = match name.trim_start_matches("student-").trim_start_matches("student_") {
            "teacher" => PlantedSpec::teacher(),
            "high" => PlantedSpec::student(IdleStyle::Base),
            "medium" => PlantedSpec::student(IdleStyle::Rotated),
            "low" => PlantedSpec::student(IdleStyle::Orthogonal),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "unknown toy model `{spec}` (toy:teacher, toy:student-high, toy:student-medium, toy:student-low)"
                )))
            }
        };
        return build_model(&planted);
    }
    ModelBundle::load_dir(Path::new(spec))
}

/// Mean-activation spill directory from the environment, if set.
pub fn cache_dir_from_env() -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

/// Structured error body printed on stderr by the binary.
pub fn error_json(command: &str, err: &Error) -> Value {
    serde_json::json!({
        "error": {
            "kind": err.kind(),
            "message": err.to_string(),
            "command": command,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> RunManifest {
        let models = vec![ModelRef { name: "m".into(), spec: "toy:teacher".into(), digest: "abc".into() }];
        RunManifest::new("baseline", serde_json::json!({"n": 4}), models, Some("h".into()), None, vec![0]).unwrap()
    }

    #[test]
    fn run_id_ignores_timing_and_outputs() {
        let mut a = manifest();
        let b = manifest();
        a.wall_clock_secs = 12.0;
        a.outputs.push("x.csv".into());
        a.started = "then".into();
        assert_eq!(a.identity_digest().unwrap(), b.run_id);
        let mut c = manifest();
        c.seeds = vec![1];
        assert_ne!(c.identity_digest().unwrap(), b.run_id);
    }

    #[test]
    fn run_id_ignores_where_and_how_a_run_executes() {
        let with = |flags: Value| {
            let models = vec![ModelRef { name: "m".into(), spec: "toy:teacher".into(), digest: "abc".into() }];
            RunManifest::new("baseline", flags, models, None, None, vec![0]).unwrap().run_id
        };
        let a = with(serde_json::json!({"global": {"n": 4, "out_dir": "a", "sequential": false}}));
        let b = with(serde_json::json!({"global": {"n": 4, "out_dir": "b", "sequential": true, "threads": 2}}));
        let c = with(serde_json::json!({"global": {"n": 5, "out_dir": "a", "sequential": false}}));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn artifacts_carry_provenance_and_leave_no_temp_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = ArtifactWriter::new(dir.path(), manifest()).unwrap();
        let run_id = w.manifest.run_id.clone();
        w.write_json("rows.json", "rows", &vec![1, 2, 3]).unwrap();
        w.write_csv("t.csv", "a,b\n1,2\n").unwrap();
        let m = w.finish().unwrap();
        assert_eq!(m.outputs, vec!["rows.json", "t.csv"]);

        let json: Value = serde_json::from_slice(&std::fs::read(dir.path().join("rows.json")).unwrap()).unwrap();
        assert_eq!(json["run_id"], run_id.as_str());
        assert_eq!(json["dataset_hash"], "h");
        assert_eq!(json["model_digests"]["m"], "abc");
        assert_eq!(json["rows"], serde_json::json!([1, 2, 3]));

        let csv = std::fs::read_to_string(dir.path().join("t.csv")).unwrap();
        let fields = parse_provenance_line(csv.lines().next().unwrap());
        assert_eq!(fields["run_id"], run_id);
        assert_eq!(fields["models"], "m:abc");
        assert_eq!(csv.lines().nth(1), Some("a,b"));

        let names: Vec<String> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        assert!(names.iter().all(|n| !n.contains(".tmp")), "{names:?}");
        assert!(names.contains(&"manifest.json".to_string()));
    }

    #[test]
    fn toy_specs_resolve_and_unknown_ones_fail() {
        assert_eq!(resolve_model("toy:teacher").unwrap().name, "toy_teacher");
        assert_eq!(resolve_model("toy:high").unwrap().digest, resolve_model("toy:student-high").unwrap().digest);
        assert!(matches!(resolve_model("toy:giant"), Err(Error::InvalidArgument(_))));
        assert!(matches!(resolve_model("/nonexistent/bundle"), Err(Error::Load(_)) | Err(Error::Io(_))));
    }
}
