//! `--select` / `--drop` / `--unlearned`: `random:N`, `ids:FILE`, `class:C`.

use std::path::{Path, PathBuf};

use patchwipe::data::Dataset;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Selection {
    Random(usize),
    Ids(PathBuf),
    Class(usize),
}

impl std::str::FromStr for Selection {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        let bad = || CliError::Usage(format!("bad selection {s:?}; expected random:N, ids:FILE or class:C"));
        let (kind, arg) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "random" => arg.parse().map(Selection::Random).map_err(|_| bad()),
            "ids" if !arg.is_empty() => Ok(Selection::Ids(arg.into())),
            "class" => arg.parse().map(Selection::Class).map_err(|_| bad()),
            _ => Err(bad()),
        }
    }
}

impl std::fmt::Display for Selection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Selection::Random(n) => write!(f, "random:{n}"),
            Selection::Ids(p) => write!(f, "ids:{}", p.display()),
            Selection::Class(c) => write!(f, "class:{c}"),
        }
    }
}

/// Indices separated by whitespace or commas; `#` starts a comment.
pub fn read_ids(path: &Path) -> Result<Vec<usize>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("");
        for tok in line.split(|c: char| c.is_whitespace() || c == ',').filter(|t| !t.is_empty()) {
            let id = tok.parse().map_err(|_| {
                CliError::Data(format!("{}: line {}: bad index {tok:?}", path.display(), line_no + 1))
            })?;
            out.push(id);
        }
    }
    Ok(out)
}

impl Selection {
    pub fn file(&self) -> Option<&Path> {
        match self {
            Selection::Ids(p) => Some(p),
            _ => None,
        }
    }

    pub fn class(&self) -> Option<usize> {
        match self {
            Selection::Class(c) => Some(*c),
            _ => None,
        }
    }

    /// Resolve to sorted-as-drawn training indices. `random:N` draws without
    /// replacement from a generator seeded with `seed`.
    pub fn resolve(&self, train: &Dataset, seed: u64) -> Result<Vec<usize>, CliError> {
        let ids = match self {
            Selection::Random(n) => {
                if *n == 0 || *n > train.len() {
                    return Err(CliError::Usage(format!(
                        "cannot draw {n} of {} training points",
                        train.len()
                    )));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                sample(&mut rng, train.len(), *n).into_vec()
            }
            Selection::Ids(path) => read_ids(path)?,
            Selection::Class(c) => {
                if *c >= train.num_classes {
                    return Err(CliError::Usage(format!("class {c} out of range")));
                }
                (0..train.len()).filter(|&i| train.labels[i] == *c).collect()
            }
        };
        if let Some(&i) = ids.iter().find(|&&i| i >= train.len()) {
            return Err(CliError::Usage(format!(
                "index {i} out of range for {} training points",
                train.len()
            )));
        }
        Ok(ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use patchwipe::data::Split;

    #[test]
    fn parse_and_resolve() {
        assert_eq!("random:5".parse::<Selection>().unwrap(), Selection::Random(5));
        assert_eq!("class:2".parse::<Selection>().unwrap(), Selection::Class(2));
        assert!("class:x".parse::<Selection>().is_err());
        assert!("first:3".parse::<Selection>().is_err());
        assert!("ids:".parse::<Selection>().is_err());

        let d = Dataset::new(vec![vec![0.0]; 6], vec![0, 1, 1, 0, 1, 0], 2, Split::Train).unwrap();
        assert_eq!(Selection::Class(1).resolve(&d, 0).unwrap(), vec![1, 2, 4]);
        let r = Selection::Random(3).resolve(&d, 9).unwrap();
        assert_eq!(r, Selection::Random(3).resolve(&d, 9).unwrap());
        assert_eq!(r.len(), 3);
        assert!(Selection::Random(7).resolve(&d, 0).is_err());

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ids.txt");
        std::fs::write(&p, "# drop these\n3, 5\n0\n").unwrap();
        assert_eq!(Selection::Ids(p.clone()).resolve(&d, 0).unwrap(), vec![3, 5, 0]);
        std::fs::write(&p, "9\n").unwrap();
        assert!(Selection::Ids(p.clone()).resolve(&d, 0).is_err());
        std::fs::write(&p, "1 two\n").unwrap();
        assert!(matches!(read_ids(&p), Err(CliError::Data(_))));
    }
}
