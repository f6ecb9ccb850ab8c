//! Directory-backed datasets.
//!
//! Either `root/{train,val,test}/` subdirectories, or a `root/splits.txt`
//! manifest with one `<split> <relative path>` pair per line (`#` comments
//! allowed). Images are decoded as 8-bit RGB and scaled by 1/255.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub const SPLIT_MANIFEST: &str = "splits.txt";
pub const DEFAULT_GLOB: &str = "*.{png,jpg,jpeg,tif,tiff,bmp}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub glob: String,
    pub splits: BTreeMap<Split, Vec<PathBuf>>,
}

#[derive(Debug, Clone)]
pub struct LoadedImage {
    pub id: String,
    pub image: ImageTensor,
}

/// Shell-style match supporting `*`, `?` and one `{a,b}` alternation group.
pub fn glob_match(pattern: &str, name: &str) -> bool {
    if let (Some(open), Some(close)) = (pattern.find('{'), pattern.find('}')) {
        if open < close {
            let (head, tail) = (&pattern[..open], &pattern[close + 1..]);
            return pattern[open + 1..close]
                .split(',')
                .any(|alt| glob_match(&format!("{head}{alt}{tail}"), name));
        }
    }
    fn rec(p: &[u8], s: &[u8]) -> bool {
        match (p.first(), s.first()) {
            (None, None) => true,
            (Some(b'*'), _) => rec(&p[1..], s) || (!s.is_empty() && rec(p, &s[1..])),
            (Some(b'?'), Some(_)) => rec(&p[1..], &s[1..]),
            (Some(a), Some(b)) if a.eq_ignore_ascii_case(b) => rec(&p[1..], &s[1..]),
            _ => false,
        }
    }
    rec(pattern.as_bytes(), name.as_bytes())
}

fn list_dir(dir: &Path, glob: &str) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| glob_match(glob, n))
        })
        .collect();
    out.sort();
    Ok(out)
}

impl DatasetSpec {
    pub fn discover(root: impl AsRef<Path>, glob: Option<&str>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let glob = glob.unwrap_or(DEFAULT_GLOB).to_string();
        if !root.is_dir() {
            return Err(Error::Data(format!(
                "dataset root {} is not a directory",
                root.display()
            )));
        }
        let manifest = root.join(SPLIT_MANIFEST);
        let mut splits: BTreeMap<Split, Vec<PathBuf>> =
            Split::ALL.iter().map(|&s| (s, Vec::new())).collect();
        if manifest.is_file() {
            for (lineno, line) in fs::read_to_string(&manifest)?.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (split, path) = line.split_once(char::is_whitespace).ok_or_else(|| {
                    Error::Data(format!(
                        "{SPLIT_MANIFEST}:{}: expected `<split> <path>`",
                        lineno + 1
                    ))
                })?;
                let split = Split::parse(split).ok_or_else(|| {
                    Error::Data(format!(
                        "{SPLIT_MANIFEST}:{}: unknown split `{split}`",
                        lineno + 1
                    ))
                })?;
                splits
                    .get_mut(&split)
                    .expect("all splits present")
                    .push(root.join(path.trim()));
            }
        } else {
            for split in Split::ALL {
                splits.insert(split, list_dir(&root.join(split.name()), &glob)?);
            }
        }
        let spec = Self { root, glob, splits };
        spec.check_disjoint()?;
        Ok(spec)
    }

    fn check_disjoint(&self) -> Result<()> {
        let mut seen: BTreeMap<PathBuf, Split> = BTreeMap::new();
        for (&split, paths) in &self.splits {
            for p in paths {
                let key = fs::canonicalize(p).unwrap_or_else(|_| p.clone());
                if let Some(prev) = seen.insert(key, split) {
                    return Err(Error::Data(format!(
                        "{} appears in both {} and {}",
                        p.display(),
                        prev.name(),
                        split.name()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn paths(&self, split: Split) -> &[PathBuf] {
        self.splits.get(&split).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn load(&self, split: Split) -> Result<Vec<LoadedImage>> {
        self.paths(split)
            .iter()
            .map(|p| {
                let image = ImageTensor::load(p)
                    .map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
                let id = p
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or("image")
                    .to_string();
                Ok(LoadedImage { id, image })
            })
            .collect()
    }
}
