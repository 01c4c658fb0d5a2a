//! `key = value` run configuration.
//!
//! Every key has a schema entry with a type and a default taken from the
//! library defaults. A file is applied first, command-line flags after it.
//! The digest hashes every non-path key, so two runs with the same digest
//! and the same input data produce the same outputs.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rsgn_core::autodiff::AdamConfig;
use rsgn_core::connectivity::{DEFAULT_DELTA, DEFAULT_PAIRS};
use rsgn_core::{ArchConfig, TileConfig, TrainConfig};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Int,
    Real,
    Bool,
    /// Comma-separated unsigned integers.
    IntList,
    Text,
    /// Filesystem location; excluded from the digest.
    Path,
}

#[derive(Clone, Copy, Debug)]
pub struct Key {
    pub name: &'static str,
    pub flag: &'static str,
    pub kind: Kind,
    pub help: &'static str,
}

const fn key(name: &'static str, flag: &'static str, kind: Kind, help: &'static str) -> Key {
    Key { name, flag, kind, help }
}

pub const KEYS: &[Key] = &[
    key("seed", "seed", Kind::Int, "seed for every random stream"),
    key("c1", "c1", Kind::Int, "first encoder width"),
    key("c2", "c2", Kind::Int, "second encoder width"),
    key("c3", "c3", Kind::Int, "third encoder width"),
    key(
        "ppm_out",
        "ppm-out",
        Kind::Int,
        "channels of the pyramid pooling output",
    ),
    key(
        "semantics_guided",
        "semantics-guided",
        Kind::Bool,
        "enable the pyramid pooling and semantics flows",
    ),
    key(
        "iterations",
        "iterations",
        Kind::Int,
        "refinement passes in stage 2 and at inference",
    ),
    key(
        "stage1_epochs",
        "stage1-epochs",
        Kind::Int,
        "epochs trained with a single pass",
    ),
    key(
        "stage2_epochs",
        "stage2-epochs",
        Kind::Int,
        "epochs trained with all refinement passes",
    ),
    key("batch_size", "batch-size", Kind::Int, "patches per optimizer step"),
    key(
        "steps_per_epoch",
        "steps-per-epoch",
        Kind::Int,
        "optimizer steps per epoch",
    ),
    key("patch_size", "patch-size", Kind::Int, "training patch extent"),
    key(
        "pos_fraction",
        "pos-fraction",
        Kind::Real,
        "share of patches centred on a vessel pixel",
    ),
    key("val_patches", "val-patches", Kind::Int, "fixed validation patches"),
    key("lr", "lr", Kind::Real, "Adam learning rate"),
    key("beta1", "beta1", Kind::Real, "Adam first-moment decay"),
    key("beta2", "beta2", Kind::Real, "Adam second-moment decay"),
    key("adam_eps", "adam-eps", Kind::Real, "Adam denominator offset"),
    key(
        "detach",
        "detach",
        Kind::Bool,
        "cut gradients between refinement passes",
    ),
    key("tile", "tile", Kind::Int, "inference tile extent"),
    key("overlap", "overlap", Kind::Int, "overlap between inference tiles"),
    key(
        "n_pairs",
        "n-pairs",
        Kind::Int,
        "point pairs sampled per image for COR/INF",
    ),
    key("delta", "delta", Kind::Real, "relative path-length tolerance for COR"),
    key("n_images", "n-images", Kind::Int, "synthetic images to generate"),
    key("extent", "extent", Kind::Int, "synthetic image side length"),
    key(
        "dataset",
        "dataset",
        Kind::Text,
        "layout under data_root: drive, stare, chase or synthetic",
    ),
    key(
        "ablate_seeds",
        "ablate-seeds",
        Kind::IntList,
        "seeds of the ablation grid",
    ),
    key(
        "gradcheck_extent",
        "gradcheck-extent",
        Kind::Int,
        "input extent of the whole-network gradient check",
    ),
    key(
        "gradcheck_iterations",
        "gradcheck-iterations",
        Kind::Int,
        "refinement passes of the whole-network gradient check",
    ),
    key("manifest", "manifest", Kind::Path, "dataset manifest (TSV)"),
    key(
        "data_root",
        "data-root",
        Kind::Path,
        "dataset directory, used when no manifest is given",
    ),
    key(
        "checkpoint",
        "checkpoint",
        Kind::Path,
        "checkpoint file (default: <out>/model.rsgn)",
    ),
    key("image", "image", Kind::Path, "input image for infer"),
    key("out", "out", Kind::Path, "output directory"),
];

pub const ARCH_KEYS: [&str; 5] = ["c1", "c2", "c3", "ppm_out", "semantics_guided"];

fn defaults() -> BTreeMap<&'static str, String> {
    let arch = ArchConfig::default();
    let train = TrainConfig::default();
    let adam = AdamConfig::default();
    let tiles = TileConfig::default();
    let pairs: [(&str, String); 34] = [
        ("seed", "7".into()),
        ("c1", arch.widths[0].to_string()),
        ("c2", arch.widths[1].to_string()),
        ("c3", arch.widths[2].to_string()),
        ("ppm_out", arch.ppm_out.to_string()),
        ("semantics_guided", arch.semantics_guided.to_string()),
        ("iterations", train.iterations.to_string()),
        ("stage1_epochs", train.stage1_epochs.to_string()),
        ("stage2_epochs", train.stage2_epochs.to_string()),
        ("batch_size", train.batch_size.to_string()),
        ("steps_per_epoch", train.steps_per_epoch.to_string()),
        ("patch_size", train.patch_size.to_string()),
        ("pos_fraction", train.pos_fraction.to_string()),
        ("val_patches", train.val_patches.to_string()),
        ("lr", adam.lr.to_string()),
        ("beta1", adam.beta1.to_string()),
        ("beta2", adam.beta2.to_string()),
        ("adam_eps", adam.eps.to_string()),
        ("detach", train.detach.to_string()),
        ("tile", tiles.tile.to_string()),
        ("overlap", tiles.overlap.to_string()),
        ("n_pairs", DEFAULT_PAIRS.to_string()),
        ("delta", DEFAULT_DELTA.to_string()),
        ("n_images", "20".into()),
        ("extent", "128".into()),
        ("dataset", "synthetic".into()),
        ("ablate_seeds", "1,2,3,4,5".into()),
        ("gradcheck_extent", "28".into()),
        ("gradcheck_iterations", "2".into()),
        ("manifest", String::new()),
        ("data_root", String::new()),
        ("checkpoint", String::new()),
        ("image", String::new()),
        ("out", "out".into()),
    ];
    pairs.into_iter().collect()
}

pub fn lookup(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

/// Canonical spelling of a value, or why it does not parse.
fn canonical(key: &Key, value: &str) -> Result<String, String> {
    let v = value.trim();
    match key.kind {
        Kind::Int => v
            .parse::<u64>()
            .map(|n| n.to_string())
            .map_err(|_| "expected a non-negative integer".into()),
        Kind::Real => match v.parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(x.to_string()),
            _ => Err("expected a finite real number".into()),
        },
        Kind::Bool => match v {
            "true" | "1" | "yes" | "on" => Ok("true".into()),
            "false" | "0" | "no" | "off" => Ok("false".into()),
            _ => Err("expected true or false".into()),
        },
        Kind::IntList => v
            .split(',')
            .map(|s| s.trim().parse::<u64>().map(|n| n.to_string()))
            .collect::<Result<Vec<_>, _>>()
            .map(|xs| xs.join(","))
            .map_err(|_| "expected comma-separated non-negative integers".into()),
        Kind::Text | Kind::Path => Ok(v.to_string()),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
    explicit: BTreeSet<&'static str>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: defaults(),
            explicit: BTreeSet::new(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, name: &str, value: &str) -> CliResult<()> {
        let key = lookup(name).ok_or_else(|| CliError::usage(format!("unknown configuration key `{name}`")))?;
        let v = canonical(key, value).map_err(|e| CliError::usage(format!("key `{name}` = `{value}`: {e}")))?;
        self.values.insert(key.name, v);
        self.explicit.insert(key.name);
        Ok(())
    }

    /// Applies `key = value` lines; blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> CliResult<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::usage(format!("{origin}:{}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| CliError::usage(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> CliResult<()> {
        let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn raw(&self, name: &str) -> &str {
        self.values
            .get(name)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("`{name}` is not a schema key"))
    }

    pub fn is_explicit(&self, name: &str) -> bool {
        self.explicit.contains(name)
    }

    pub fn int(&self, name: &str) -> usize {
        self.raw(name).parse().expect("validated on set")
    }

    pub fn u64(&self, name: &str) -> u64 {
        self.raw(name).parse().expect("validated on set")
    }

    pub fn real(&self, name: &str) -> f64 {
        self.raw(name).parse().expect("validated on set")
    }

    pub fn flag(&self, name: &str) -> bool {
        self.raw(name) == "true"
    }

    pub fn list(&self, name: &str) -> Vec<u64> {
        self.raw(name)
            .split(',')
            .map(|s| s.parse().expect("validated on set"))
            .collect()
    }

    pub fn path(&self, name: &str) -> Option<PathBuf> {
        let v = self.raw(name);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn seed(&self) -> u64 {
        self.u64("seed")
    }

    pub fn out_dir(&self) -> PathBuf {
        self.path("out").unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.path("checkpoint")
            .unwrap_or_else(|| self.out_dir().join("model.rsgn"))
    }

    pub fn arch(&self, in_channels: usize) -> CliResult<ArchConfig> {
        let arch = ArchConfig {
            in_channels,
            widths: [self.int("c1"), self.int("c2"), self.int("c3")],
            ppm_out: self.int("ppm_out"),
            semantics_guided: self.flag("semantics_guided"),
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn train_config(&self) -> CliResult<TrainConfig> {
        let cfg = TrainConfig {
            iterations: self.int("iterations"),
            stage1_epochs: self.int("stage1_epochs"),
            stage2_epochs: self.int("stage2_epochs"),
            batch_size: self.int("batch_size"),
            steps_per_epoch: self.int("steps_per_epoch"),
            patch_size: self.int("patch_size"),
            pos_fraction: self.real("pos_fraction"),
            val_patches: self.int("val_patches"),
            seed: self.seed(),
            adam: AdamConfig {
                lr: self.real("lr"),
                beta1: self.real("beta1"),
                beta2: self.real("beta2"),
                eps: self.real("adam_eps"),
            },
            detach: self.flag("detach"),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn tiles(&self) -> CliResult<TileConfig> {
        let t = TileConfig {
            tile: self.int("tile"),
            overlap: self.int("overlap"),
        };
        t.validate()?;
        Ok(t)
    }

    /// Hex SHA-256 over the canonical non-path keys.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for k in KEYS.iter().filter(|k| k.kind != Kind::Path) {
            h.update(format!("{}={}\n", k.name, self.raw(k.name)));
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// The resolved configuration as a loadable file.
    pub fn to_text(&self) -> String {
        let mut s = format!("# digest {}\n", self.digest());
        for k in KEYS {
            s.push_str(&format!("{} = {}\n", k.name, self.raw(k.name)));
        }
        s
    }
}
