use std::fmt;
use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;

use super::image_ops::load_preprocessed;
use super::labels::{parse_utk_filename, LabelTriple};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// UTKFace part I is used for training, part II for testing, part III for validation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
    Val,
}

impl Split {
    pub fn from_part(part: u8) -> Option<Self> {
        match part {
            1 => Some(Split::Train),
            2 => Some(Split::Test),
            3 => Some(Split::Val),
            _ => None,
        }
    }

    pub fn part(self) -> u8 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
            Split::Val => 3,
        }
    }

    /// Image count of the full UTKFace part.
    pub fn expected_count(self) -> usize {
        match self {
            Split::Train => 10_437,
            Split::Test => 10_719,
            Split::Val => 3_252,
        }
    }

    pub fn dir_name(self) -> String {
        format!("part{}", self.part())
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Val => "val",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub path: PathBuf,
    pub label: LabelTriple,
}

/// One split on disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub split: Split,
    pub samples: Vec<Sample>,
    /// The tree was produced by the augmenter (it carries a `manifest.csv`).
    pub masked: bool,
    pub warnings: Vec<String>,
}

pub const IMAGE_EXTENSIONS: [&str; 2] = ["png", "ppm"];

pub fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Enumerates `root/part{n}` in lexicographic filename order.
pub fn load_split(root: &Path, split: Split) -> Result<Dataset> {
    let dir = root.join(split.dir_name());
    if !dir.is_dir() {
        return Err(Error::MissingDirectory(dir));
    }
    let mut names: Vec<PathBuf> = std::fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && has_image_extension(p))
        .collect();
    names.sort();
    let mut samples = Vec::with_capacity(names.len());
    let mut warnings = Vec::new();
    for path in names {
        let file = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        match parse_utk_filename(file) {
            Ok(label) => samples.push(Sample { path, label }),
            Err(e) => {
                warn!("skipping {}: {e}", path.display());
                warnings.push(format!("{}: {e}", path.display()));
            }
        }
    }
    if samples.len() != split.expected_count() {
        let msg = format!(
            "{split} split has {} samples, full UTKFace part {} has {}",
            samples.len(),
            split.part(),
            split.expected_count()
        );
        warn!("{msg}");
        warnings.push(msg);
    }
    Ok(Dataset {
        split,
        samples,
        masked: root.join("manifest.csv").is_file(),
        warnings,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Decodes and preprocesses every sample up front, in sample order.
    pub fn load_into_memory(&self) -> Result<InMemoryDataset> {
        let images = self
            .samples
            .par_iter()
            .map(|s| load_preprocessed(&s.path))
            .collect::<Result<Vec<_>>>()?;
        Ok(InMemoryDataset {
            images,
            labels: self.samples.iter().map(|s| s.label).collect(),
        })
    }
}

/// Anything that can hand out preprocessed `3 x 48 x 48` images with labels.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn label(&self, index: usize) -> LabelTriple;

    fn image(&self, index: usize) -> Result<Tensor<f32>>;
}

impl SampleSource for Dataset {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn label(&self, index: usize) -> LabelTriple {
        self.samples[index].label
    }

    fn image(&self, index: usize) -> Result<Tensor<f32>> {
        load_preprocessed(&self.samples[index].path)
    }
}

/// Preprocessed images held in memory.
#[derive(Clone, Debug, Default)]
pub struct InMemoryDataset {
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<LabelTriple>,
}

impl InMemoryDataset {
    pub fn new(images: Vec<Tensor<f32>>, labels: Vec<LabelTriple>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::InvalidArgument {
                op: "InMemoryDataset",
                reason: format!("{} images but {} labels", images.len(), labels.len()),
            });
        }
        Ok(Self { images, labels })
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

impl SampleSource for InMemoryDataset {
    fn len(&self) -> usize {
        self.images.len()
    }

    fn label(&self, index: usize) -> LabelTriple {
        self.labels[index]
    }

    fn image(&self, index: usize) -> Result<Tensor<f32>> {
        Ok(self.images[index].clone())
    }
}
