//! Run directories, parameter resolution and artifact writers.
//!
//! A run directory is `<out>/<command>-<hash>` where the hash is the first
//! 12 hex digits of the SHA-256 of `config.json`, the resolved snapshot.
//! Creating it is exclusive, so an identical configuration never overwrites
//! earlier results.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use anyhow::{anyhow, bail, Context, Result};
use dinolens::image::Image;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

/// Log sink that writes to stderr and, once a run directory exists, to its
/// `run.log`.
#[derive(Clone, Default)]
pub struct LogSink(Arc<Mutex<Option<File>>>);

impl LogSink {
    fn attach(&self, file: File) {
        *self.0.lock().expect("log sink poisoned") = Some(file);
    }
}

impl Write for LogSink {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        std::io::stderr().write_all(buf)?;
        if let Some(f) = self.0.lock().expect("log sink poisoned").as_mut() {
            f.write_all(buf)?;
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        if let Some(f) = self.0.lock().expect("log sink poisoned").as_mut() {
            f.flush()?;
        }
        std::io::stderr().flush()
    }
}

pub fn init_logging() -> LogSink {
    let sink = LogSink::default();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Pipe(Box::new(sink.clone())))
        .init();
    sink
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Overlays `patch` onto `base`. Keys absent from `base` are rejected so
/// typos surface instead of being ignored. Objects carrying an enum `kind`
/// tag replace the default wholesale, since their fields depend on the tag.
fn merge(base: &mut Value, patch: Value, path: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) if !p.contains_key("kind") => {
            for (k, v) in p {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &here)?,
                    None => bail!("unknown parameter `{here}`"),
                }
            }
            Ok(())
        }
        (b, p) => {
            *b = p;
            Ok(())
        }
    }
}

/// Parses `a.b.c=<json>`; values that are not valid JSON are taken as
/// strings.
fn set_to_patch(spec: &str) -> Result<Value> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{spec}`"))?;
    let mut v: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    for part in key.split('.').rev() {
        if part.is_empty() {
            bail!("empty key segment in `{spec}`");
        }
        let mut m = Map::new();
        m.insert(part.to_string(), v);
        v = Value::Object(m);
    }
    Ok(v)
}

fn set_seeds(v: &mut Value, seed: u64) {
    match v {
        Value::Object(m) => {
            for (k, x) in m.iter_mut() {
                if k == "seed" && x.is_u64() {
                    *x = Value::from(seed);
                } else {
                    set_seeds(x, seed);
                }
            }
        }
        Value::Array(a) => a.iter_mut().for_each(|x| set_seeds(x, seed)),
        _ => {}
    }
}

/// Defaults, then the `--config` file, then `--set` overrides, then
/// `--seed`, which replaces every `seed` field.
pub fn resolve_params<P: Serialize + DeserializeOwned + Default>(config: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<P> {
    let mut v = serde_json::to_value(P::default())?;
    if let Some(path) = config {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let file: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        merge(&mut v, file, "").with_context(|| format!("in config {}", path.display()))?;
    }
    for s in sets {
        merge(&mut v, set_to_patch(s)?, "").with_context(|| format!("in --set {s}"))?;
    }
    if let Some(s) = seed {
        set_seeds(&mut v, s);
    }
    serde_json::from_value(v).context("invalid parameters")
}

#[derive(Clone, Debug, Serialize)]
pub struct InputRef {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

fn collect_files(dir: &Path, rel: &Path, out: &mut Vec<(PathBuf, PathBuf)>) -> Result<()> {
    let rd = fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))?;
    for entry in rd {
        let entry = entry?;
        let p = entry.path();
        let r = rel.join(entry.file_name());
        if p.is_dir() {
            collect_files(&p, &r, out)?;
        } else {
            out.push((r, p));
        }
    }
    Ok(())
}

/// Content hash of a file, or of a directory tree (sorted relative paths
/// and file hashes).
pub fn input_ref(role: &str, path: &Path) -> Result<InputRef> {
    let sha256 = if path.is_dir() {
        let mut files = Vec::new();
        collect_files(path, Path::new(""), &mut files)?;
        files.sort();
        let mut h = Sha256::new();
        for (rel, p) in &files {
            h.update(rel.to_string_lossy().as_bytes());
            h.update([0]);
            h.update(sha256_hex(&fs::read(p).with_context(|| format!("reading {}", p.display()))?).as_bytes());
            h.update([b'\n']);
        }
        format!("{:x}", h.finalize())
    } else {
        sha256_hex(&fs::read(path).with_context(|| format!("reading input {}", path.display()))?)
    };
    Ok(InputRef {
        role: role.to_string(),
        path: path.display().to_string(),
        sha256,
    })
}

#[derive(Serialize)]
struct Snapshot<'a, P: Serialize> {
    command: &'a str,
    params: &'a P,
    inputs: &'a [InputRef],
}

pub struct Run {
    pub dir: PathBuf,
}

impl Run {
    /// Writes the snapshot and creates the run directory exclusively.
    pub fn create<P: Serialize>(out: &Path, command: &str, params: &P, inputs: &[InputRef], log: &LogSink) -> Result<Run> {
        let mut snapshot = serde_json::to_vec_pretty(&Snapshot { command, params, inputs })?;
        snapshot.push(b'\n');
        let dir = out.join(format!("{command}-{}", &sha256_hex(&snapshot)[..12]));
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        match fs::create_dir(&dir) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                bail!("run directory {} already exists: this configuration has already been run", dir.display())
            }
            Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
        }
        fs::write(dir.join("config.json"), &snapshot)?;
        log.attach(File::create(dir.join("run.log"))?);
        log::info!("run directory {}", dir.display());
        Ok(Run { dir })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        fs::write(self.path(name), bytes).with_context(|| format!("writing {name}"))
    }

    pub fn csv<I>(&self, name: &str, header: &[&str], rows: I) -> Result<()>
    where
        I: IntoIterator<Item = Vec<String>>,
    {
        let mut w = csv::Writer::from_path(self.path(name)).with_context(|| format!("writing {name}"))?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(&r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn png(&self, name: &str, image: &Image) -> Result<()> {
        image.save(&self.path(name))?;
        Ok(())
    }
}

/// Shortest round-trip decimal form, so CSV cells are reproducible.
pub fn num(v: f64) -> String {
    format!("{v}")
}
