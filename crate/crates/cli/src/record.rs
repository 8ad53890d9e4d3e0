//! Reproducibility record written beside every command's output: the
//! effective argument list, seeds and SHA-256 hashes of the artifacts read
//! and written.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use mrfusion::Result;
use sha2::{Digest, Sha256};

#[derive(Debug, Default)]
pub struct Record {
    pub args: Vec<String>,
    pub seeds: Vec<(&'static str, u64)>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

const RASTER_KEYS: [&str; 5] = ["pan", "ms", "labels", "objects", "fused"];

fn sha256(path: &Path) -> io::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Files under `path` (itself if it is a file), sorted.
fn files(path: &Path) -> io::Result<Vec<PathBuf>> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(path)? {
        out.extend(files(&entry?.path())?);
    }
    out.sort();
    Ok(out)
}

/// `<dir>/run.txt` for directory outputs, `<file>.run.txt` otherwise.
pub fn location(out: &Path) -> PathBuf {
    if out.is_dir() {
        out.join("run.txt")
    } else {
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".run.txt");
        out.with_file_name(name)
    }
}

impl Record {
    pub fn new(args: &[std::ffi::OsString]) -> Self {
        Self {
            args: args.iter().map(|a| a.to_string_lossy().into_owned()).collect(),
            ..Self::default()
        }
    }

    /// A dataset manifest together with the rasters it names.
    pub fn dataset(&mut self, manifest: &Path) {
        self.named(manifest, &RASTER_KEYS);
    }

    /// A model file together with its weights.
    pub fn model(&mut self, manifest: &Path) {
        self.named(manifest, &["checkpoint"]);
    }

    /// A `key=value` file plus the files it names under `keys`.
    fn named(&mut self, manifest: &Path, keys: &[&str]) {
        self.inputs.push(manifest.to_path_buf());
        let dir = manifest.parent().unwrap_or(Path::new("."));
        if let Ok(text) = fs::read_to_string(manifest) {
            for line in text.lines() {
                if let Some((_, v)) = line.split_once('=').filter(|(k, _)| keys.contains(&k.trim())) {
                    let p = Path::new(v.trim());
                    self.inputs.push(if p.is_relative() { dir.join(p) } else { p.to_path_buf() });
                }
            }
        }
    }

    pub fn to_text(&self) -> Result<String> {
        let mut s = String::new();
        writeln!(s, "version={}", env!("CARGO_PKG_VERSION")).unwrap();
        writeln!(s, "args={}", self.args.join(" ")).unwrap();
        for (name, v) in &self.seeds {
            writeln!(s, "seed.{name}={v}").unwrap();
        }
        for (tag, paths) in [("input", &self.inputs), ("output", &self.outputs)] {
            for p in paths {
                for f in files(p)? {
                    if f.file_name().is_some_and(|n| n == "run.txt" || n.to_string_lossy().ends_with(".run.txt")) {
                        continue;
                    }
                    writeln!(s, "{tag}.sha256 {} {}", sha256(&f)?, f.display()).unwrap();
                }
            }
        }
        Ok(s)
    }

    /// Writes the record beside `out`.
    pub fn write(&self, out: &Path) -> Result<PathBuf> {
        let path = location(out);
        fs::write(&path, self.to_text()?)?;
        Ok(path)
    }
}
