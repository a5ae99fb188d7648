//! Flat `key = value` run configuration with an optional `[sweep]` section
//! of comma-separated lists.
//!
//! ```text
//! dataset = mnist
//! train_images = data/train-images-idx3-ubyte.gz
//! ...
//! architecture = mlp-mnist
//! epochs = 30
//!
//! [sweep]
//! variant = MBGD, SBPCA
//! rank = 1, 3, 10
//! seed = 0, 1, 2
//! ```
//!
//! Relative paths are taken relative to the config file. Only `variant`,
//! `rank`, `alpha_fc`, `seed` and `batch_size` may be swept; every other key
//! is scalar.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::train::{Hyperparams, Method};

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Mnist {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    /// Directory holding `data_batch_1.bin` … `test_batch.bin`.
    Cifar10 { dir: PathBuf },
    /// [`gaussian_blobs`](crate::data::gaussian_blobs) with train and test
    /// drawn from the same centres.
    Blobs {
        train: usize,
        test: usize,
        dims: usize,
        classes: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataSource,
    /// Leading-slice limits applied after loading.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    /// Per-channel standardization with training-set statistics.
    pub standardize: bool,
    pub architecture: String,
    pub output_dir: PathBuf,
    /// Concurrent runs; zero means one per available thread.
    pub workers: usize,
    /// Scalar hyperparameters. Swept fields are overwritten per run.
    pub base: Hyperparams,
    pub variants: Vec<Method>,
    pub ranks: Vec<usize>,
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub batch_sizes: Vec<usize>,
}

/// One point of the sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub name: String,
    pub hyperparams: Hyperparams,
}

const SWEEPABLE: [&str; 5] = ["variant", "rank", "alpha_fc", "seed", "batch_size"];

const SCALAR: [&str; 30] = [
    "dataset",
    "train_images",
    "train_labels",
    "test_images",
    "test_labels",
    "cifar_dir",
    "blobs_train",
    "blobs_test",
    "blobs_dims",
    "blobs_classes",
    "blobs_seed",
    "train_limit",
    "test_limit",
    "standardize",
    "architecture",
    "output_dir",
    "workers",
    "block_size",
    "alpha_conv",
    "epochs",
    "dropout",
    "tracking_every",
    "sigma_floor",
    "check_orthonormality",
    "wall_clock",
    // also accepted as single values outside [sweep]
    "variant",
    "rank",
    "alpha_fc",
    "seed",
    "batch_size",
];

struct Entry {
    line: usize,
    values: Vec<String>,
}

struct Parsed<'a> {
    path: &'a Path,
    entries: BTreeMap<String, Entry>,
}

impl Parsed<'_> {
    fn err(&self, line: usize, key: &str, msg: impl std::fmt::Display) -> Error {
        Error::Config(format!("{}:{line}: {key}: {msg}", self.path.display()))
    }

    fn missing(&self, key: &str) -> Error {
        Error::Config(format!("{}: missing required key {key:?}", self.path.display()))
    }

    fn list<T>(&self, key: &str, parse: impl Fn(&str) -> std::result::Result<T, String>) -> Result<Option<Vec<T>>> {
        let Some(e) = self.entries.get(key) else {
            return Ok(None);
        };
        e.values
            .iter()
            .map(|v| parse(v).map_err(|m| self.err(e.line, key, m)))
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    fn scalar<T>(&self, key: &str, parse: impl Fn(&str) -> std::result::Result<T, String>) -> Result<Option<T>> {
        match self.list(key, parse)? {
            None => Ok(None),
            Some(mut v) if v.len() == 1 => Ok(v.pop()),
            Some(_) => Err(self.err(self.entries[key].line, key, "expected a single value")),
        }
    }

    fn path(&self, key: &str, base: &Path) -> Result<PathBuf> {
        let raw = self.scalar(key, |s| Ok(PathBuf::from(s)))?.ok_or_else(|| self.missing(key))?;
        Ok(if raw.is_relative() { base.join(raw) } else { raw })
    }
}

fn number<T: std::str::FromStr>(s: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse::<T>().map_err(|e| format!("{s:?}: {e}"))
}

fn flag(s: &str) -> std::result::Result<bool, String> {
    match s.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(format!("{s:?} is not a boolean")),
    }
}

fn real(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = number(s)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{s:?} is not finite"))
    }
}

fn method(s: &str) -> std::result::Result<Method, String> {
    s.parse::<Method>().map_err(|e| e.to_string())
}

fn lex<'a>(text: &str, path: &'a Path) -> Result<Parsed<'a>> {
    let mut parsed = Parsed {
        path,
        entries: BTreeMap::new(),
    };
    let mut in_sweep = false;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if content.starts_with('[') {
            if content == "[sweep]" {
                in_sweep = true;
                continue;
            }
            return Err(Error::Config(format!(
                "{}:{line}: unknown section {content} (only [sweep] is recognised)",
                path.display()
            )));
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(Error::Config(format!("{}:{line}: expected key = value", path.display())));
        };
        let key = key.trim().to_string();
        let allowed = if in_sweep {
            SWEEPABLE.contains(&key.as_str())
        } else {
            SCALAR.contains(&key.as_str())
        };
        if !allowed {
            let what = if in_sweep { "cannot be swept" } else { "unknown key" };
            return Err(parsed.err(line, &key, what));
        }
        if parsed.entries.contains_key(&key) {
            return Err(parsed.err(line, &key, "set more than once"));
        }
        let values: Vec<String> = if in_sweep {
            value.split(',').map(|v| v.trim().to_string()).collect()
        } else {
            vec![value.trim().to_string()]
        };
        if values.iter().any(String::is_empty) {
            return Err(parsed.err(line, &key, "empty value"));
        }
        parsed.entries.insert(key, Entry { line, values });
    }
    Ok(parsed)
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: cannot read config: {e}", path.display())))?;
        Self::parse(&text, path)
    }

    /// Parses config text; `path` names the file in diagnostics and anchors
    /// relative paths.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let p = lex(text, path)?;
        let base = path.parent().unwrap_or(Path::new(""));

        let dataset = p.scalar("dataset", |s| Ok(s.to_ascii_lowercase()))?.ok_or_else(|| p.missing("dataset"))?;
        let data = match dataset.as_str() {
            "mnist" => DataSource::Mnist {
                train_images: p.path("train_images", base)?,
                train_labels: p.path("train_labels", base)?,
                test_images: p.path("test_images", base)?,
                test_labels: p.path("test_labels", base)?,
            },
            "cifar10" => DataSource::Cifar10 {
                dir: p.path("cifar_dir", base)?,
            },
            "blobs" => DataSource::Blobs {
                train: p.scalar("blobs_train", number)?.unwrap_or(512),
                test: p.scalar("blobs_test", number)?.unwrap_or(256),
                dims: p.scalar("blobs_dims", number)?.unwrap_or(16),
                classes: p.scalar("blobs_classes", number)?.unwrap_or(4),
                seed: p.scalar("blobs_seed", number)?.unwrap_or(0),
            },
            other => {
                let line = p.entries["dataset"].line;
                return Err(p.err(line, "dataset", format!("{other:?} (expected mnist, cifar10 or blobs)")));
            }
        };

        let defaults = Hyperparams::default();
        let base_hp = Hyperparams {
            batch_size: defaults.batch_size,
            block_size: p.scalar("block_size", number)?,
            rank: defaults.rank,
            alpha_fc: defaults.alpha_fc,
            alpha_conv: p.scalar("alpha_conv", real)?.unwrap_or(defaults.alpha_conv),
            epochs: p.scalar("epochs", number)?.unwrap_or(defaults.epochs),
            method: defaults.method,
            dropout: p.scalar("dropout", flag)?.unwrap_or(defaults.dropout),
            seed: defaults.seed,
            tracking_every: p.scalar("tracking_every", number)?.unwrap_or(defaults.tracking_every),
            sigma_floor: p.scalar("sigma_floor", real)?.unwrap_or(defaults.sigma_floor),
            check_orthonormality: p.scalar("check_orthonormality", flag)?.unwrap_or(false),
            wall_clock: p.scalar("wall_clock", flag)?.unwrap_or(true),
        };

        let config = RunConfig {
            data,
            train_limit: p.scalar("train_limit", number)?,
            test_limit: p.scalar("test_limit", number)?,
            standardize: p.scalar("standardize", flag)?.unwrap_or(false),
            architecture: p
                .scalar("architecture", |s| Ok(s.to_string()))?
                .ok_or_else(|| p.missing("architecture"))?,
            output_dir: {
                let raw = p.scalar("output_dir", |s| Ok(PathBuf::from(s)))?.unwrap_or_else(|| "runs".into());
                if raw.is_relative() {
                    base.join(raw)
                } else {
                    raw
                }
            },
            workers: p.scalar("workers", number)?.unwrap_or(0),
            base: base_hp,
            variants: p.list("variant", method)?.unwrap_or(vec![defaults.method]),
            ranks: p.list("rank", number)?.unwrap_or(vec![defaults.rank]),
            alphas: p.list("alpha_fc", real)?.unwrap_or(vec![defaults.alpha_fc]),
            seeds: p.list("seed", number)?.unwrap_or(vec![defaults.seed]),
            batch_sizes: p.list("batch_size", number)?.unwrap_or(vec![defaults.batch_size]),
        };
        config.runs()?;
        Ok(config)
    }

    /// Sweep points in a fixed order: variant, rank, batch size, alpha,
    /// seed. The rank axis collapses for MBGD.
    pub fn runs(&self) -> Result<Vec<RunSpec>> {
        let mut runs = Vec::new();
        for &method in &self.variants {
            let ranks: &[usize] = if method == Method::Mbgd { &[0] } else { &self.ranks };
            for &rank in ranks {
                for &batch_size in &self.batch_sizes {
                    for &alpha_fc in &self.alphas {
                        for &seed in &self.seeds {
                            let hyperparams = Hyperparams {
                                method,
                                rank,
                                batch_size,
                                alpha_fc,
                                seed,
                                ..self.base.clone()
                            };
                            let name = run_name(&hyperparams);
                            if runs.iter().any(|r: &RunSpec| r.name == name) {
                                return Err(Error::Config(format!("sweep repeats run {name}")));
                            }
                            runs.push(RunSpec { name, hyperparams });
                        }
                    }
                }
            }
        }
        if runs.is_empty() {
            return Err(Error::Config("sweep produces no runs".into()));
        }
        Ok(runs)
    }

    /// Every resolved setting, one `key = value` per line in a fixed order.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        let join = |v: Vec<String>| v.join(", ");
        match &self.data {
            DataSource::Mnist {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let _ = writeln!(out, "dataset = mnist");
                let _ = writeln!(out, "train_images = {}", train_images.display());
                let _ = writeln!(out, "train_labels = {}", train_labels.display());
                let _ = writeln!(out, "test_images = {}", test_images.display());
                let _ = writeln!(out, "test_labels = {}", test_labels.display());
            }
            DataSource::Cifar10 { dir } => {
                let _ = writeln!(out, "dataset = cifar10\ncifar_dir = {}", dir.display());
            }
            DataSource::Blobs {
                train,
                test,
                dims,
                classes,
                seed,
            } => {
                let _ = writeln!(
                    out,
                    "dataset = blobs\nblobs_train = {train}\nblobs_test = {test}\nblobs_dims = {dims}\nblobs_classes = {classes}\nblobs_seed = {seed}"
                );
            }
        }
        let b = &self.base;
        let mut opt = |key: &str, v: Option<usize>| {
            if let Some(v) = v {
                let _ = writeln!(out, "{key} = {v}");
            }
        };
        opt("train_limit", self.train_limit);
        opt("test_limit", self.test_limit);
        opt("block_size", b.block_size);
        let _ = writeln!(out, "standardize = {}", self.standardize);
        let _ = writeln!(out, "architecture = {}", self.architecture);
        let _ = writeln!(out, "alpha_conv = {:?}", b.alpha_conv);
        let _ = writeln!(out, "epochs = {}", b.epochs);
        let _ = writeln!(out, "dropout = {}", b.dropout);
        let _ = writeln!(out, "tracking_every = {}", b.tracking_every);
        let _ = writeln!(out, "sigma_floor = {:?}", b.sigma_floor);
        let _ = writeln!(out, "check_orthonormality = {}", b.check_orthonormality);
        let _ = writeln!(out, "wall_clock = {}", b.wall_clock);
        out.push_str("\n[sweep]\n");
        let _ = writeln!(out, "variant = {}", join(self.variants.iter().map(|m| m.to_string()).collect()));
        let _ = writeln!(out, "rank = {}", join(self.ranks.iter().map(|r| r.to_string()).collect()));
        let _ = writeln!(out, "batch_size = {}", join(self.batch_sizes.iter().map(|r| r.to_string()).collect()));
        let _ = writeln!(out, "alpha_fc = {}", join(self.alphas.iter().map(|a| format!("{a:?}")).collect()));
        let _ = writeln!(out, "seed = {}", join(self.seeds.iter().map(|s| s.to_string()).collect()));
        out
    }

    /// First 16 hex digits of the SHA-256 of [`canonical`](Self::canonical).
    /// Output directory and worker count do not enter the hash.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().take(8).fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

/// `<variant>-k<rank>-b<batch>-a<alpha_fc>-s<seed>`; MBGD omits the rank.
pub fn run_name(hp: &Hyperparams) -> String {
    let variant = hp.method.name().to_ascii_lowercase();
    let rank = if hp.method == Method::Mbgd {
        String::new()
    } else {
        format!("-k{}", hp.rank)
    };
    format!("{variant}{rank}-b{}-a{:?}-s{}", hp.batch_size, hp.alpha_fc, hp.seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::parse(text, Path::new("/cfg/exp.conf"))
    }

    const BLOBS: &str = "dataset = blobs\narchitecture = mlp:16-8-4\n";

    #[test]
    fn defaults_and_relative_paths() {
        let c = parse(
            "dataset = mnist # comment\ntrain_images = a.gz\ntrain_labels = /abs/b.gz\n\
             test_images = c\ntest_labels = d\narchitecture = mlp-mnist\n",
        )
        .unwrap();
        let DataSource::Mnist {
            train_images,
            train_labels,
            ..
        } = &c.data
        else {
            panic!()
        };
        assert_eq!(train_images, Path::new("/cfg/a.gz"));
        assert_eq!(train_labels, Path::new("/abs/b.gz"));
        assert_eq!(c.output_dir, Path::new("/cfg/runs"));
        assert_eq!(c.runs().unwrap().len(), 1);
        assert_eq!(c.base.alpha_conv, 1e-2);
    }

    #[test]
    fn sweep_cardinality() {
        let c = parse(&format!("{BLOBS}[sweep]\nvariant = SBPCA\nrank = 1, 3, 10\n")).unwrap();
        let runs = c.runs().unwrap();
        assert_eq!(runs.len(), 3);
        assert_eq!(runs[2].name, "sbpca-k10-b128-a0.01-s0");
        let c = parse(&format!("{BLOBS}[sweep]\nvariant = MBGD, SBPCA\nrank = 1, 3\nseed = 0, 1\n")).unwrap();
        let names: Vec<String> = c.runs().unwrap().into_iter().map(|r| r.name).collect();
        assert_eq!(names.len(), 2 + 4);
        assert_eq!(names[0], "mbgd-b128-a0.01-s0");
    }

    #[test]
    fn scalar_variant_outside_sweep() {
        let c = parse(&format!("{BLOBS}variant = sbpcav\nbatch_size = 64\nrank = 2\n")).unwrap();
        let run = &c.runs().unwrap()[0];
        assert_eq!(run.hyperparams.method, Method::Sbpcav);
        assert_eq!(run.hyperparams.batch_size, 64);
    }

    #[test]
    fn diagnostics_name_line_and_key() {
        let cases = [
            (format!("{BLOBS}epochs = ten\n"), ":3: epochs"),
            (format!("{BLOBS}colour = red\n"), ":3: colour: unknown key"),
            (format!("{BLOBS}[sweep]\nepochs = 1, 2\n"), ":4: epochs: cannot be swept"),
            (format!("{BLOBS}[grid]\n"), ":3: unknown section"),
            (format!("{BLOBS}epochs = 1\nepochs = 2\n"), ":4: epochs: set more than once"),
            (format!("{BLOBS}just words\n"), ":3: expected key = value"),
            (format!("{BLOBS}[sweep]\nrank = 1,,2\n"), ":4: rank: empty value"),
            (format!("{BLOBS}[sweep]\nvariant = SGD\n"), ":4: variant"),
            ("architecture = x\n".to_string(), "missing required key \"dataset\""),
            (format!("{BLOBS}alpha_fc = inf\n"), ":3: alpha_fc"),
        ];
        for (text, needle) in cases {
            let err = parse(&text).unwrap_err();
            assert!(matches!(err, Error::Config(_)));
            assert!(err.to_string().contains(needle), "{err} lacks {needle}");
        }
    }

    #[test]
    fn hash_ignores_layout_and_output_but_not_settings() {
        let a = parse(&format!("{BLOBS}epochs = 3\n")).unwrap();
        let b = parse(&format!("# x\n\n{BLOBS}output_dir = elsewhere\nworkers = 4\nepochs=3")).unwrap();
        let c = parse(&format!("{BLOBS}epochs = 4\n")).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 16);
        // canonical text parses back to the same settings
        let again = parse(&a.canonical()).unwrap();
        assert_eq!(again.canonical(), a.canonical());
    }
}
