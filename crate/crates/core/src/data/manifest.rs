//! Line-oriented dataset manifest: `split<TAB>image_path<TAB>mask_path`.
//!
//! Relative paths are resolved against the manifest's directory.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{write_image, write_mask, Sample};
use crate::error::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub split: Split,
    pub image: PathBuf,
    pub mask: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory relative paths are resolved against.
    pub root: PathBuf,
}

/// Sample counts per split; train takes whatever val and test leave.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    /// 10% validation, 10% test (rounded down), rest training.
    pub fn for_count(n: usize) -> Self {
        let val = n / 10;
        let test = n / 10;
        SplitCounts {
            train: n - val - test,
            val,
            test,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    fn split_of(&self, i: usize) -> Split {
        if i < self.train {
            Split::Train
        } else if i < self.train + self.val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

impl Manifest {
    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut entries = Vec::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let trimmed = line.trim_end_matches(['\n', '\r']);
            if !trimmed.is_empty() && !trimmed.starts_with('#') {
                let cols: Vec<&str> = trimmed.split('\t').collect();
                if cols.len() != 3 {
                    return Err(Error::Parse {
                        offset,
                        reason: format!("expected 3 tab-separated columns, found {}", cols.len()),
                    });
                }
                let split = cols[0].parse().map_err(|e: Error| Error::Parse {
                    offset,
                    reason: e.to_string(),
                })?;
                entries.push(ManifestEntry {
                    split,
                    image: PathBuf::from(cols[1]),
                    mask: PathBuf::from(cols[2]),
                });
            }
            offset += line.len();
        }
        let m = Manifest {
            entries,
            root: root.into(),
        };
        m.check_disjoint()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let _ = writeln!(s, "{}\t{}\t{}", e.split, e.image.display(), e.mask.display());
        }
        s
    }

    /// No image or mask path may appear under two splits.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen: BTreeMap<&Path, Split> = BTreeMap::new();
        for e in &self.entries {
            for p in [e.image.as_path(), e.mask.as_path()] {
                if let Some(&other) = seen.get(p) {
                    if other != e.split {
                        return Err(Error::invalid(format!(
                            "{} appears in both {other} and {} splits",
                            p.display(),
                            e.split
                        )));
                    }
                }
                seen.insert(p, e.split);
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        self.split(split)
            .map(|e| Sample::load(&self.resolve(&e.image), &self.resolve(&e.mask)))
            .collect()
    }
}

/// Writes each sample as an image/mask PGM pair under `dir` and returns
/// the manifest (also written to `dir/manifest.tsv`). Samples are assigned
/// to splits in order: train first, then val, then test.
pub fn write_dataset(samples: &[Sample], dir: &Path, counts: SplitCounts) -> Result<Manifest> {
    if counts.total() != samples.len() {
        return Err(Error::invalid(format!(
            "split counts cover {} samples, {} given",
            counts.total(),
            samples.len()
        )));
    }
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let image = PathBuf::from(format!("images/{i:05}.pgm"));
        let mask = PathBuf::from(format!("masks/{i:05}.pgm"));
        write_image(&dir.join(&image), s.width, s.height, &s.image)?;
        write_mask(&dir.join(&mask), s.width, s.height, &s.mask)?;
        entries.push(ManifestEntry {
            split: counts.split_of(i),
            image,
            mask,
        });
    }
    let manifest = Manifest {
        entries,
        root: dir.to_path_buf(),
    };
    std::fs::write(dir.join("manifest.tsv"), manifest.to_text())?;
    Ok(manifest)
}
