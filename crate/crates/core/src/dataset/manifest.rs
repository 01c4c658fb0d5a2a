use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample;

use super::image_io::{load_image, load_mask};
use super::Sample;
use crate::error::{invalid, Error, Result};
use crate::rng::{stream, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
            other => Err(Error::Format(format!(
                "unknown split `{other}` (expected train or test)"
            ))),
        }
    }
}

/// One manifest line. Relative paths are resolved against the manifest's
/// directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub id: String,
    pub image: PathBuf,
    pub gt: PathBuf,
    pub fov: Option<PathBuf>,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<Record>,
    /// Directory relative paths resolve against.
    pub base: PathBuf,
}

fn field_ok(s: &str) -> bool {
    !s.is_empty() && !s.contains(['\t', '\n', '\r'])
}

impl Manifest {
    pub fn new(records: Vec<Record>, base: impl Into<PathBuf>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !field_ok(&r.id) {
                return Err(Error::Format(format!("invalid sample id `{}`", r.id)));
            }
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Format(format!("duplicate sample id `{}`", r.id)));
            }
        }
        Ok(Manifest {
            records,
            base: base.into(),
        })
    }

    /// Parses the tab-separated `id image gt fov split` format. Blank lines
    /// and `#` comments are skipped.
    pub fn parse(text: &str, base: impl Into<PathBuf>) -> Result<Self> {
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let [id, image, gt, fov, split] = cols[..] else {
                return Err(Error::Format(format!(
                    "manifest line {}: expected 5 tab-separated fields, got {}",
                    n + 1,
                    cols.len()
                )));
            };
            records.push(Record {
                id: id.to_string(),
                image: image.into(),
                gt: gt.into(),
                fov: (fov != "-").then(|| fov.into()),
                split: split
                    .parse()
                    .map_err(|e| Error::Format(format!("manifest line {}: {e}", n + 1)))?,
            });
        }
        Self::new(records, base)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let fov = r.fov.as_ref().map_or("-".to_string(), |p| p.display().to_string());
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                r.id,
                r.image.display(),
                r.gt.display(),
                fov,
                r.split
            ));
        }
        out
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn load(&self, record: &Record) -> Result<Sample> {
        let image = load_image(&self.resolve(&record.image))?;
        let gt = load_mask(&self.resolve(&record.gt))?;
        let fov = record.fov.as_ref().map(|p| load_mask(&self.resolve(p))).transpose()?;
        Sample::new(record.id.clone(), image, gt, fov).map_err(|e| Error::Data(e.to_string()))
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        self.split(split).map(|r| self.load(r)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Drive,
    Stare,
    Chase,
    Synthetic,
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "drive" => Ok(DatasetKind::Drive),
            "stare" => Ok(DatasetKind::Stare),
            "chase" | "chase_db1" => Ok(DatasetKind::Chase),
            "synthetic" => Ok(DatasetKind::Synthetic),
            other => Err(invalid!(
                "unknown dataset `{other}` (expected drive, stare, chase or synthetic)"
            )),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Drive => "drive",
            DatasetKind::Stare => "stare",
            DatasetKind::Chase => "chase",
            DatasetKind::Synthetic => "synthetic",
        })
    }
}

const EXTENSIONS: [&str; 5] = ["png", "ppm", "pgm", "pnm", "pbm"];
const STARE_TEST: usize = 10;
const CHASE_TEST: usize = 10;

/// Collects lookups and reports every missing file at once.
struct Finder<'a> {
    root: &'a Path,
    missing: Vec<String>,
}

impl Finder<'_> {
    /// `dir/stem.<ext>` for the first supported extension that exists,
    /// relative to the root.
    fn find(&mut self, dir: &str, stem: &str) -> PathBuf {
        for ext in EXTENSIONS {
            let rel = Path::new(dir).join(format!("{stem}.{ext}"));
            if self.root.join(&rel).is_file() {
                return rel;
            }
        }
        let rel = Path::new(dir).join(format!("{stem}.{{{}}}", EXTENSIONS.join(",")));
        self.missing.push(rel.display().to_string());
        rel
    }

    fn finish(self) -> Result<()> {
        if self.missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Data(format!(
                "{} missing file(s) under {}:\n  {}",
                self.missing.len(),
                self.root.display(),
                self.missing.join("\n  ")
            )))
        }
    }
}

/// Stems of supported images in `dir` (sorted), filtered by `keep`.
fn list_stems(root: &Path, dir: &str, keep: impl Fn(&str) -> bool) -> Result<Vec<String>> {
    let path = root.join(dir);
    let entries = fs::read_dir(&path).map_err(|e| Error::io(&path, e))?;
    let mut stems = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&path, e))?;
        let p = entry.path();
        let ext_ok = p
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if let (true, Some(stem)) = (ext_ok, p.file_stem().and_then(|s| s.to_str())) {
            if keep(stem) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    stems.dedup();
    Ok(stems)
}

fn seeded_test_set(n: usize, n_test: usize, seed: u64, name: &str) -> Result<HashSet<usize>> {
    if n <= n_test {
        return Err(Error::Data(format!(
            "{name}: need more than {n_test} images for a {n_test}-image test split, found {n}"
        )));
    }
    let mut rng = stream(seed, Stream::Split, 0);
    Ok(sample(&mut rng, n, n_test).into_iter().collect())
}

/// Builds the manifest for a dataset laid out under `root`. Paths in the
/// result are relative to `root`.
///
/// Layouts (any of png/ppm/pgm):
/// * drive: `training/images/NN_training`, `training/1st_manual/NN_manual1`,
///   `training/mask/NN_training_mask` for NN in 21..=40, and the `test/`
///   equivalents for 01..=20.
/// * stare: `stare-images/<stem>` with `labels-ah/<stem>.ah`.
/// * chase: `Image_XXY` with `Image_XXY_1stHO`, all in the root.
/// * synthetic: `images/<id>`, `gt/<id>`, `fov/<id>`; even indices train.
pub fn make_split(root: &Path, kind: DatasetKind, seed: u64) -> Result<Manifest> {
    let mut finder = Finder {
        root,
        missing: Vec::new(),
    };
    let mut records = Vec::new();
    match kind {
        DatasetKind::Drive => {
            for (dir, split, range) in [("training", Split::Train, 21..=40), ("test", Split::Test, 1..=20)] {
                for n in range {
                    let id = format!("{n:02}_{dir}");
                    records.push(Record {
                        image: finder.find(&format!("{dir}/images"), &id),
                        gt: finder.find(&format!("{dir}/1st_manual"), &format!("{n:02}_manual1")),
                        fov: Some(finder.find(&format!("{dir}/mask"), &format!("{id}_mask"))),
                        split,
                        id,
                    });
                }
            }
        }
        DatasetKind::Stare => {
            let stems = list_stems(root, "stare-images", |_| true)?;
            let test = seeded_test_set(stems.len(), STARE_TEST, seed, "stare")?;
            for (i, stem) in stems.iter().enumerate() {
                records.push(Record {
                    id: stem.clone(),
                    image: finder.find("stare-images", stem),
                    gt: finder.find("labels-ah", &format!("{stem}.ah")),
                    fov: None,
                    split: if test.contains(&i) { Split::Test } else { Split::Train },
                });
            }
        }
        DatasetKind::Chase => {
            let stems = list_stems(root, ".", |s| s.starts_with("Image_") && !s.contains("HO"))?;
            let test = seeded_test_set(stems.len(), CHASE_TEST, seed, "chase")?;
            for (i, stem) in stems.iter().enumerate() {
                records.push(Record {
                    id: stem.clone(),
                    image: finder.find("", stem),
                    gt: finder.find("", &format!("{stem}_1stHO")),
                    fov: None,
                    split: if test.contains(&i) { Split::Test } else { Split::Train },
                });
            }
        }
        DatasetKind::Synthetic => {
            let stems = list_stems(root, "images", |_| true)?;
            if stems.is_empty() {
                return Err(Error::Data(format!(
                    "no images under {}",
                    root.join("images").display()
                )));
            }
            for (i, stem) in stems.iter().enumerate() {
                records.push(Record {
                    id: stem.clone(),
                    image: finder.find("images", stem),
                    gt: finder.find("gt", stem),
                    fov: Some(finder.find("fov", stem)),
                    split: if i % 2 == 0 { Split::Train } else { Split::Test },
                });
            }
        }
    }
    finder.finish()?;
    Manifest::new(records, root)
}
