use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use super::format::{read_cloud, write_cloud, CloudFormat};
use super::synth::ShapeKind;
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::network::Task;

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
            _ => Err(Error::Argument(format!("unknown split `{s}`"))),
        }
    }
}

/// How a dataset was produced.
#[derive(Clone, Debug, PartialEq)]
pub enum Generator {
    Classification {
        kinds: Vec<ShapeKind>,
        per_class: usize,
        n_points: usize,
        noise_sigma: f64,
        seed: u64,
    },
    Segmentation {
        count: usize,
        n_points: usize,
        seed: u64,
    },
}

/// Labelled clouds with a train/test assignment per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    task: Task,
    samples: Vec<PointCloud>,
    split: Vec<Split>,
    /// `None` for datasets read back from disk.
    pub generator: Option<Generator>,
}

pub const MANIFEST: &str = "manifest.csv";

impl Dataset {
    pub fn new(task: Task, samples: Vec<PointCloud>, split: Vec<Split>, generator: Option<Generator>) -> Result<Self> {
        if samples.len() != split.len() {
            return Err(Error::dim(
                "dataset",
                format!("{} samples but {} split marks", samples.len(), split.len()),
            ));
        }
        for (i, s) in samples.iter().enumerate() {
            let ok = match task {
                Task::Classify => s.class_label.is_some(),
                Task::Segment => s.label_cols() > 0,
            };
            if !ok {
                return Err(Error::Argument(format!("sample {i} lacks the labels a {task} dataset needs")));
            }
        }
        Ok(Dataset {
            task,
            samples,
            split,
            generator,
        })
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[PointCloud] {
        &self.samples
    }

    pub fn split(&self) -> &[Split] {
        &self.split
    }

    fn part(&self, which: Split) -> Vec<PointCloud> {
        self.samples
            .iter()
            .zip(&self.split)
            .filter(|(_, s)| **s == which)
            .map(|(c, _)| c.clone())
            .collect()
    }

    pub fn train(&self) -> Vec<PointCloud> {
        self.part(Split::Train)
    }

    pub fn test(&self) -> Vec<PointCloud> {
        self.part(Split::Test)
    }

    /// Number of classes implied by the labels: largest label plus one.
    pub fn num_classes(&self) -> usize {
        let max = match self.task {
            Task::Classify => self.samples.iter().filter_map(|s| s.class_label).max(),
            Task::Segment => self.samples.iter().flat_map(|s| s.point_labels().unwrap_or_default()).max(),
        };
        max.map_or(0, |m| m.max(0) as usize + 1)
    }

    /// Writes one cloud file per sample plus `manifest.csv` with columns
    /// `file,split,class` into `dir`, creating it if needed.
    pub fn save(&self, dir: &Path, format: CloudFormat) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::from("file,split,class\n");
        for (i, (cloud, split)) in self.samples.iter().zip(&self.split).enumerate() {
            let name = format!("sample_{i:05}.{}", format.extension());
            write_cloud(&dir.join(&name), cloud, format)?;
            let class = cloud.class_label.map(|c| c.to_string()).unwrap_or_default();
            manifest.push_str(&format!("{name},{split},{class}\n"));
        }
        let path = dir.join(MANIFEST);
        fs::write(&path, manifest).map_err(|e| Error::io(path, e))
    }

    /// Reads a directory written by [`Dataset::save`]. The task is
    /// classification when the manifest carries class labels.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == "file,split,class" => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    msg: "manifest must start with `file,split,class`".into(),
                })
            }
        }
        let mut samples = Vec::new();
        let mut split = Vec::new();
        let mut classes = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Parse { line: i + 1, msg };
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 3 {
                return Err(bad(format!("expected 3 columns, found {}", cols.len())));
            }
            let file = cols[0];
            if file.contains('/') || file.contains('\\') || file.starts_with('.') {
                return Err(bad(format!("sample file `{file}` must be a plain name in the dataset directory")));
            }
            let format = CloudFormat::from_path(Path::new(file)).ok_or_else(|| bad(format!("unknown extension on `{file}`")))?;
            let mut cloud = read_cloud(&dir.join(file), format)?;
            let class = match cols[2].trim() {
                "" => None,
                c => Some(c.parse::<i32>().map_err(|_| bad(format!("bad class `{c}`")))?),
            };
            cloud.class_label = class;
            classes.push(class.is_some());
            split.push(cols[1].trim().parse().map_err(|e: Error| bad(e.to_string()))?);
            samples.push(cloud);
        }
        if samples.is_empty() {
            return Err(Error::Format(format!("{} lists no samples", path.display())));
        }
        let task = if classes.iter().all(|&c| c) {
            Task::Classify
        } else if classes.iter().all(|&c| !c) {
            Task::Segment
        } else {
            return Err(Error::Format("manifest mixes classified and unclassified samples".into()));
        };
        Dataset::new(task, samples, split, None)
    }
}
