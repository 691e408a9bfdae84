use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::ndgrad::io;
use crate::ndgrad::Tensor;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const CLASSES_FILE: &str = "classes.txt";
const HEADER: &str = "id,path_1bit,path_16bit,label,split,path_hog";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Format(format!("unknown split {s:?}"))),
        }
    }
}

/// One manifest row. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplePair {
    pub id: String,
    pub path_1bit: String,
    pub path_16bit: String,
    pub label: usize,
    pub split: Split,
    pub path_hog: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<SamplePair>,
    pub classes: Vec<String>,
}

fn check_cell(s: &str) -> Result<()> {
    if s.contains([',', '\n', '\r']) {
        return Err(Error::Format(format!("manifest field {s:?} contains a delimiter")));
    }
    Ok(())
}

impl Manifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.rows.len()).filter(|&i| self.rows[i].split == split).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.label).collect()
    }

    /// Rows per class within `split`.
    pub fn class_counts(&self, split: Split) -> Vec<usize> {
        let mut c = vec![0; self.num_classes()];
        for r in self.rows.iter().filter(|r| r.split == split) {
            c[r.label] += 1;
        }
        c
    }

    pub fn has_hog(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.path_hog.is_some())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut s = String::from(HEADER);
        s.push('\n');
        for r in &self.rows {
            for f in [&r.id, &r.path_1bit, &r.path_16bit] {
                check_cell(f)?;
            }
            let hog = r.path_hog.as_deref().unwrap_or("");
            check_cell(hog)?;
            s.push_str(&format!("{},{},{},{},{},{}\n", r.id, r.path_1bit, r.path_16bit, r.label, r.split, hog));
        }
        Ok(s)
    }

    pub fn from_csv(text: &str, classes: Vec<String>) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == HEADER => {}
            other => return Err(Error::Format(format!("manifest header must be {HEADER:?}, got {other:?}"))),
        }
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 6 {
                return Err(Error::Format(format!("manifest line {}: expected 6 fields, got {}", n + 2, f.len())));
            }
            let label: usize = f[3]
                .parse()
                .map_err(|_| Error::Format(format!("manifest line {}: bad label {:?}", n + 2, f[3])))?;
            if label >= classes.len() {
                return Err(Error::Format(format!(
                    "manifest line {}: label {label} but only {} classes",
                    n + 2,
                    classes.len()
                )));
            }
            rows.push(SamplePair {
                id: f[0].into(),
                path_1bit: f[1].into(),
                path_16bit: f[2].into(),
                label,
                split: f[4].parse()?,
                path_hog: (!f[5].is_empty()).then(|| f[5].to_string()),
            });
        }
        Ok(Manifest { rows, classes })
    }

    /// Writes `manifest.csv` and `classes.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let m = dir.join(MANIFEST_FILE);
        fs::write(&m, self.to_csv()?).map_err(|e| Error::io(&m, e))?;
        let c = dir.join(CLASSES_FILE);
        let mut names = self.classes.join("\n");
        names.push('\n');
        fs::write(&c, names).map_err(|e| Error::io(&c, e))
    }

    /// Loads a manifest file (or a directory containing `manifest.csv`).
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        let text = fs::read_to_string(&file).map_err(|_| Error::MissingInput {
            path: file.clone(),
            hint: "create it with `cfnet dataset synth`".into(),
        })?;
        let cpath = root.join(CLASSES_FILE);
        let classes: Vec<String> = fs::read_to_string(&cpath)
            .map_err(|e| Error::io(&cpath, e))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        Ok((Manifest::from_csv(&text, classes)?, root))
    }
}

/// A manifest with its images held in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub root: PathBuf,
    pub img_1bit: Vec<Tensor<f32>>,
    pub img_16bit: Vec<Tensor<f32>>,
}

impl Dataset {
    pub fn load(path: &Path) -> Result<Self> {
        let (manifest, root) = Manifest::load(path)?;
        Self::from_manifest(manifest, root)
    }

    pub fn from_manifest(manifest: Manifest, root: PathBuf) -> Result<Self> {
        let load = |rel: &str| {
            let p = root.join(rel);
            if !p.exists() {
                return Err(Error::MissingInput { path: p, hint: "regenerate the dataset".into() });
            }
            io::load_f32(&p)
        };
        let mut img_1bit = Vec::with_capacity(manifest.rows.len());
        let mut img_16bit = Vec::with_capacity(manifest.rows.len());
        for r in &manifest.rows {
            let (a, b) = (load(&r.path_1bit)?, load(&r.path_16bit)?);
            if a.shape() != b.shape() || a.rank() != 2 {
                return Err(Error::shape(
                    "dataset",
                    format!("{}: 1-bit {:?} vs 16-bit {:?}", r.id, a.shape(), b.shape()),
                ));
            }
            img_1bit.push(a);
            img_16bit.push(b);
        }
        Ok(Dataset { manifest, root, img_1bit, img_16bit })
    }

    pub fn len(&self) -> usize {
        self.img_1bit.len()
    }

    pub fn is_empty(&self) -> bool {
        self.img_1bit.is_empty()
    }

    pub fn image_shape(&self) -> Result<[usize; 2]> {
        let t = self.img_1bit.first().ok_or_else(|| Error::Precondition("empty dataset".into()))?;
        Ok([t.shape()[0], t.shape()[1]])
    }
}
