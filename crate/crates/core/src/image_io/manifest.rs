//! Line-delimited JSON triplet manifests.
//!
//! The first line is a header `{"format": "mvlle-triplets", "version": 1,
//! "split": "train"}`; every following non-blank line is one scene:
//!
//! ```text
//! {"scene": "s000", "low": [..3 paths], "gt": [..3 paths], "params": [..3 objects]}
//! ```
//!
//! Paths are relative to the manifest's directory. `shot_gain` is written as
//! `null` when shot noise is disabled.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::synthesis::DegradationParams;

pub const MANIFEST_FORMAT: &str = "mvlle-triplets";
pub const MANIFEST_VERSION: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::schema(
                "split",
                format!("expected \"train\" or \"test\", got {other:?}"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub scene: String,
    pub low: [PathBuf; 3],
    pub gt: [PathBuf; 3],
    pub params: [DegradationParams; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletManifest {
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
}

impl TripletManifest {
    pub fn new(split: Split) -> Self {
        TripletManifest {
            split,
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parses manifest text without touching the file system.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| {
            Error::schema("header", "manifest is empty; a header line is required")
        })?;
        let header = parse_object(header, "header")?;
        match header.get("format").and_then(Value::as_str) {
            Some(MANIFEST_FORMAT) => {}
            _ => {
                return Err(Error::schema(
                    "header.format",
                    format!("expected {MANIFEST_FORMAT:?}"),
                ))
            }
        }
        match header.get("version").and_then(Value::as_u64) {
            Some(MANIFEST_VERSION) => {}
            Some(v) => return Err(Error::Unsupported(format!("manifest version {v}"))),
            None => return Err(Error::schema("header.version", "missing or not an integer")),
        }
        let split: Split = header
            .get("split")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::schema("header.split", "missing or not a string"))?
            .parse()?;

        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (lineno, line) in lines {
            let ctx = format!("line {}", lineno + 1);
            let obj = parse_object(line, &ctx)?;
            let entry = parse_entry(&obj, &ctx)?;
            if !seen.insert(entry.scene.clone()) {
                return Err(Error::schema(
                    format!("{ctx}.scene"),
                    format!("duplicate scene id {:?}", entry.scene),
                ));
            }
            entries.push(entry);
        }
        Ok(TripletManifest { split, entries })
    }

    pub fn to_text(&self) -> String {
        let mut out = json!({
            "format": MANIFEST_FORMAT,
            "version": MANIFEST_VERSION,
            "split": self.split.to_string(),
        })
        .to_string();
        out.push('\n');
        for e in &self.entries {
            let paths = |ps: &[PathBuf; 3]| -> Value {
                ps.iter()
                    .map(|p| Value::from(p.to_string_lossy().into_owned()))
                    .collect()
            };
            let line = json!({
                "scene": e.scene,
                "low": paths(&e.low),
                "gt": paths(&e.gt),
                "params": e.params.iter().map(params_to_json).collect::<Vec<_>>(),
            });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }
}

/// Loads a manifest and checks that every referenced file exists relative to
/// the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<TripletManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest = TripletManifest::parse(&text)?;
    let root = manifest_root(path);
    for (i, e) in manifest.entries.iter().enumerate() {
        for (kind, paths) in [("low", &e.low), ("gt", &e.gt)] {
            for (v, p) in paths.iter().enumerate() {
                if !root.join(p).is_file() {
                    return Err(Error::schema(
                        format!("entries[{i}].{kind}[{v}]"),
                        format!("referenced file {} does not exist", root.join(p).display()),
                    ));
                }
            }
        }
    }
    Ok(manifest)
}

pub fn write_manifest(m: &TripletManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, m.to_text()).map_err(|e| Error::io(path, e))
}

/// Directory against which a manifest's relative paths resolve.
pub fn manifest_root(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn parse_object(line: &str, ctx: &str) -> Result<Map<String, Value>> {
    match serde_json::from_str::<Value>(line) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(Error::schema(ctx, "expected a JSON object")),
        Err(e) => Err(Error::Malformed(format!("{ctx}: {e}"))),
    }
}

fn parse_entry(obj: &Map<String, Value>, ctx: &str) -> Result<ManifestEntry> {
    for key in obj.keys() {
        if !matches!(key.as_str(), "scene" | "low" | "gt" | "params") {
            return Err(Error::schema(format!("{ctx}.{key}"), "unknown field"));
        }
    }
    let scene = obj
        .get("scene")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::schema(format!("{ctx}.scene"), "missing or not a string"))?
        .to_string();
    let three = |key: &str| -> Result<&Vec<Value>> {
        let field = format!("{ctx}.{key}");
        let arr = obj
            .get(key)
            .and_then(Value::as_array)
            .ok_or_else(|| Error::schema(&field, "missing or not an array"))?;
        if arr.len() != 3 {
            return Err(Error::schema(
                field,
                format!("exactly three views required, found {}", arr.len()),
            ));
        }
        Ok(arr)
    };
    let paths = |key: &str| -> Result<[PathBuf; 3]> {
        let arr = three(key)?;
        let mut out: [PathBuf; 3] = Default::default();
        for (i, v) in arr.iter().enumerate() {
            out[i] = v
                .as_str()
                .map(PathBuf::from)
                .ok_or_else(|| Error::schema(format!("{ctx}.{key}[{i}]"), "not a string"))?;
        }
        Ok(out)
    };
    let low = paths("low")?;
    let gt = paths("gt")?;
    let raw = three("params")?;
    let mut params = [DegradationParams::identity(); 3];
    for (i, v) in raw.iter().enumerate() {
        params[i] = params_from_json(v, &format!("{ctx}.params[{i}]"))?;
    }
    Ok(ManifestEntry {
        scene,
        low,
        gt,
        params,
    })
}

fn params_to_json(p: &DegradationParams) -> Value {
    json!({
        "alpha": p.alpha,
        "beta": p.beta,
        "gamma": p.gamma,
        "shot_gain": if p.shot_gain.is_finite() { Value::from(p.shot_gain) } else { Value::Null },
        "read_sigma": p.read_sigma,
        "seed": p.seed,
    })
}

fn params_from_json(v: &Value, ctx: &str) -> Result<DegradationParams> {
    let obj = v
        .as_object()
        .ok_or_else(|| Error::schema(ctx, "expected an object"))?;
    for key in obj.keys() {
        if !matches!(
            key.as_str(),
            "alpha" | "beta" | "gamma" | "shot_gain" | "read_sigma" | "seed"
        ) {
            return Err(Error::schema(format!("{ctx}.{key}"), "unknown field"));
        }
    }
    let num = |key: &str| -> Result<f64> {
        obj.get(key)
            .and_then(Value::as_f64)
            .ok_or_else(|| Error::schema(format!("{ctx}.{key}"), "missing or not a number"))
    };
    let shot_gain = match obj.get("shot_gain") {
        Some(Value::Null) => f64::INFINITY,
        _ => num("shot_gain")?,
    };
    let seed = obj.get("seed").and_then(Value::as_u64).ok_or_else(|| {
        Error::schema(format!("{ctx}.seed"), "missing or not an unsigned integer")
    })?;
    let p = DegradationParams {
        alpha: num("alpha")?,
        beta: num("beta")?,
        gamma: num("gamma")?,
        shot_gain,
        read_sigma: num("read_sigma")?,
        seed,
    };
    p.validate()
        .map_err(|e| Error::schema(ctx, e.to_string()))?;
    Ok(p)
}
