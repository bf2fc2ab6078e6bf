//! `--data` specifications.
//!
//! ```text
//! blobs[:classes=3,per_class=250,dim=16,spread=0.5,radius=2,seed=7]
//! idx:dir=PATH
//! csv:train=PATH[,test=PATH][,label=COL][,header=true][,classes=N]
//! ```

use std::collections::BTreeMap;
use std::path::PathBuf;

use patchwipe::data::{gen_blobs, BlobConfig, CsvOptions, Dataset, Split, Standardization};
use patchwipe::fixtures::{load_mnist, BLOB_DOMAIN_PAD};
use patchwipe::geometry::DomainBox;

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Blobs(BlobConfig),
    Idx {
        dir: PathBuf,
    },
    Csv {
        train: PathBuf,
        test: Option<PathBuf>,
        label: usize,
        header: bool,
        classes: Option<usize>,
    },
}

pub struct Loaded {
    pub train: Dataset,
    pub test: Option<Dataset>,
    pub standardization: Option<Standardization>,
}

fn parse_kv(body: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for part in body.split(',').filter(|p| !p.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("expected key=value in data source, got {part:?}")))?;
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(CliError::Usage(format!("data source key {k:?} given twice")));
        }
    }
    Ok(out)
}

fn take<T: std::str::FromStr>(kv: &mut BTreeMap<String, String>, key: &str) -> Result<Option<T>, CliError> {
    match kv.remove(key) {
        None => Ok(None),
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("bad value {v:?} for data source key {key:?}"))),
    }
}

fn no_leftovers(kv: BTreeMap<String, String>) -> Result<(), CliError> {
    match kv.keys().next() {
        Some(k) => Err(CliError::Usage(format!("unknown data source key {k:?}"))),
        None => Ok(()),
    }
}

impl std::str::FromStr for DataSource {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        let (kind, body) = s.split_once(':').unwrap_or((s, ""));
        let mut kv = parse_kv(body)?;
        let source = match kind {
            "blobs" => {
                let d = BlobConfig::default();
                DataSource::Blobs(BlobConfig {
                    classes: take(&mut kv, "classes")?.unwrap_or(d.classes),
                    per_class: take(&mut kv, "per_class")?.unwrap_or(d.per_class),
                    dim: take(&mut kv, "dim")?.unwrap_or(d.dim),
                    spread: take(&mut kv, "spread")?.unwrap_or(d.spread),
                    radius: take(&mut kv, "radius")?.unwrap_or(d.radius),
                    seed: take(&mut kv, "seed")?.unwrap_or(d.seed),
                })
            }
            "idx" => DataSource::Idx {
                dir: take(&mut kv, "dir")?.ok_or_else(|| CliError::Usage("idx data source needs dir=PATH".into()))?,
            },
            "csv" => DataSource::Csv {
                train: take(&mut kv, "train")?
                    .ok_or_else(|| CliError::Usage("csv data source needs train=PATH".into()))?,
                test: take(&mut kv, "test")?,
                label: take(&mut kv, "label")?.unwrap_or(0),
                header: take(&mut kv, "header")?.unwrap_or(false),
                classes: take(&mut kv, "classes")?,
            },
            other => return Err(CliError::Usage(format!("unknown data kind {other:?} (blobs, idx, csv)"))),
        };
        no_leftovers(kv)?;
        Ok(source)
    }
}

impl DataSource {
    /// Files the data is read from, for the manifest.
    pub fn files(&self) -> Vec<PathBuf> {
        match self {
            DataSource::Blobs(_) => vec![],
            DataSource::Idx { dir } => [
                "train-images-idx3-ubyte",
                "train-labels-idx1-ubyte",
                "test-images-idx3-ubyte",
                "test-labels-idx1-ubyte",
            ]
            .iter()
            .map(|f| dir.join(f))
            .collect(),
            DataSource::Csv { train, test, .. } => std::iter::once(train.clone()).chain(test.clone()).collect(),
        }
    }

    /// Load the data. CSV features are standardized with `stats` when given
    /// (the statistics stored with a model), otherwise with statistics
    /// fitted on the training file.
    pub fn load(&self, stats: Option<&Standardization>) -> Result<Loaded, CliError> {
        match self {
            DataSource::Blobs(cfg) => {
                let (train, test) = gen_blobs(cfg)?;
                Ok(Loaded {
                    train,
                    test: Some(test),
                    standardization: None,
                })
            }
            DataSource::Idx { dir } => {
                let (train, test) = load_mnist(dir)?;
                Ok(Loaded {
                    train,
                    test: Some(test),
                    standardization: None,
                })
            }
            DataSource::Csv {
                train,
                test,
                label,
                header,
                classes,
            } => {
                let mut opts = CsvOptions {
                    label_column: *label,
                    has_header: *header,
                    standardization: stats.cloned(),
                    num_classes: *classes,
                };
                let (tr, fitted) = patchwipe::data::load_csv(train, &opts, Split::Train)?;
                opts.standardization = Some(fitted.clone());
                opts.num_classes = Some(tr.num_classes);
                let te = match test {
                    Some(p) => Some(patchwipe::data::load_csv(p, &opts, Split::Test)?.0),
                    None => None,
                };
                Ok(Loaded {
                    train: tr,
                    test: te,
                    standardization: Some(fitted),
                })
            }
        }
    }

    /// Input box for region computations: the unit box for pixels, the
    /// padded training range otherwise.
    pub fn domain(&self, train: &Dataset) -> Result<DomainBox, CliError> {
        match self {
            DataSource::Idx { .. } => Ok(DomainBox::unit(train.dim())),
            _ => Ok(DomainBox::from_points(
                train.features.iter().map(Vec::as_slice),
                BLOB_DOMAIN_PAD,
            )?),
        }
    }
}
