//! Graph instances and the line-delimited JSON dataset format.
//!
//! A dataset file is UTF-8 JSONL: the first line is a [`DatasetHeader`]
//! carrying schema facts that records alone cannot (class count, feature
//! dimension, environment partition), and every following line is one
//! [`GraphInstance`] with fields in the order
//! `{id, split, env, label, noisy, nodes, edges}`. An empty dataset is a
//! header-only file.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which partition an instance belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One labeled graph: per-node feature rows plus an undirected edge list.
///
/// `noisy` flags instances whose stored `label` differs from the class that
/// generated the features; it is ground truth bookkeeping for diagnostics
/// and is never shown to training code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphInstance {
    pub id: u64,
    pub split: Split,
    pub env: usize,
    pub label: usize,
    pub noisy: bool,
    /// Node feature matrix, one row per node.
    pub nodes: Vec<Vec<f64>>,
    /// Undirected edges as `[u, v]` node-index pairs.
    pub edges: Vec<(usize, usize)>,
}

impl GraphInstance {
    /// Checks internal consistency against the dataset schema.
    pub fn validate(&self, header: &DatasetHeader) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::InvalidInput(format!(
                "instance {}: graph has no nodes",
                self.id
            )));
        }
        if self.label >= header.num_classes {
            return Err(Error::InvalidInput(format!(
                "instance {}: label {} outside 0..{}",
                self.id, self.label, header.num_classes
            )));
        }
        for (i, row) in self.nodes.iter().enumerate() {
            if row.len() != header.feature_dim {
                return Err(Error::Shape(format!(
                    "instance {}: node {} has {} features, expected {}",
                    self.id,
                    i,
                    row.len(),
                    header.feature_dim
                )));
            }
            if let Some(x) = row.iter().find(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "instance {}: node {} contains {x}",
                    self.id, i
                )));
            }
        }
        let n = self.nodes.len();
        for &(u, v) in &self.edges {
            if u >= n || v >= n {
                return Err(Error::InvalidInput(format!(
                    "instance {}: edge ({u}, {v}) exceeds node count {n}",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// Schema line written at the top of every dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Environments that appear in the train and val splits.
    pub train_envs: Vec<usize>,
    /// Held-out environments that appear only in the test split.
    pub test_envs: Vec<usize>,
}

/// An in-memory dataset: schema header plus all instances across splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub instances: Vec<GraphInstance>,
}

impl Dataset {
    /// Instances belonging to one split, in file order.
    pub fn split(&self, split: Split) -> Vec<&GraphInstance> {
        self.instances.iter().filter(|g| g.split == split).collect()
    }

    /// Per-class instance counts within a split.
    pub fn class_counts(&self, split: Split) -> Vec<usize> {
        let mut counts = vec![0usize; self.header.num_classes];
        for g in self.instances.iter().filter(|g| g.split == split) {
            counts[g.label] += 1;
        }
        counts
    }

    /// The class with the fewest training instances (lowest index on ties).
    pub fn minority_class(&self) -> usize {
        let counts = self.class_counts(Split::Train);
        counts
            .iter()
            .enumerate()
            .min_by_key(|&(_, &c)| c)
            .map(|(i, _)| i)
            .unwrap_or(0)
    }

    /// Empirical class frequencies over the training split — the prior `p`
    /// for group reweighting. Zero-count classes receive a zero frequency.
    pub fn train_class_frequencies(&self) -> Vec<f64> {
        let counts = self.class_counts(Split::Train);
        let total: usize = counts.iter().sum();
        if total == 0 {
            return vec![0.0; counts.len()];
        }
        counts.iter().map(|&c| c as f64 / total as f64).collect()
    }

    /// Writes the dataset as header + one JSON record per line.
    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        let mut out = BufWriter::new(file);
        serde_json::to_writer(&mut out, &self.header)?;
        out.write_all(b"\n")?;
        for instance in &self.instances {
            serde_json::to_writer(&mut out, instance)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a dataset file, validating every record. Errors name the
    /// 1-based line at fault.
    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        let reader = BufReader::new(file);
        let mut lines = reader.lines().enumerate();

        let header: DatasetHeader = match lines.next() {
            Some((_, line)) => {
                let line = line?;
                serde_json::from_str(&line).map_err(|e| Error::Parse {
                    line: 1,
                    message: format!("bad header: {e}"),
                })?
            }
            None => {
                return Err(Error::Parse {
                    line: 1,
                    message: "file is empty, expected a header line".into(),
                })
            }
        };

        let mut instances = Vec::new();
        for (idx, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let instance: GraphInstance =
                serde_json::from_str(&line).map_err(|e| Error::Parse {
                    line: idx + 1,
                    message: e.to_string(),
                })?;
            instance.validate(&header).map_err(|e| Error::Parse {
                line: idx + 1,
                message: e.to_string(),
            })?;
            instances.push(instance);
        }
        Ok(Self { header, instances })
    }
}
