//! Trainable/frozen partition of the model parameters by tag.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamTag, Snapshot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Adapters and CBAM only.
    #[default]
    Peft,
    /// Everything, starting from existing weights.
    Full,
    /// Everything, starting from a fresh initialisation.
    Scratch,
}

impl Mode {
    pub fn trainable(&self, tag: ParamTag) -> bool {
        match self {
            Mode::Peft => matches!(tag, ParamTag::Adapter | ParamTag::Cbam),
            Mode::Full | Mode::Scratch => true,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Peft => "peft",
            Mode::Full => "full",
            Mode::Scratch => "scratch",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "peft" => Ok(Mode::Peft),
            "full" => Ok(Mode::Full),
            "scratch" => Ok(Mode::Scratch),
            other => Err(Error::invalid(format!(
                "unknown training mode '{other}' (expected peft, full or scratch)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionEntry {
    pub name: String,
    pub tag: ParamTag,
    pub numel: usize,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterPartition {
    entries: Vec<PartitionEntry>,
    trainable_tags: BTreeMap<ParamTag, bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TagCensus {
    pub tensors: usize,
    pub elements: usize,
    pub trainable: bool,
}

impl ParameterPartition {
    /// Partition with an explicit set of trainable tags.
    pub fn with_trainable(
        params: &[(String, ParamTag, Vec<usize>)],
        trainable: impl Fn(ParamTag) -> bool,
    ) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        let mut entries = Vec::with_capacity(params.len());
        for (name, tag, shape) in params {
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidState(format!("parameter '{name}' listed twice")));
            }
            entries.push(PartitionEntry {
                name: name.clone(),
                tag: *tag,
                numel: shape.iter().product(),
                trainable: trainable(*tag),
            });
        }
        let trainable_tags = ParamTag::ALL.iter().map(|&t| (t, trainable(t))).collect();
        Ok(Self {
            entries,
            trainable_tags,
        })
    }

    pub fn entries(&self) -> &[PartitionEntry] {
        &self.entries
    }

    pub fn is_trainable(&self, name: &str) -> Option<bool> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.trainable)
    }

    pub fn tag_trainable(&self, tag: ParamTag) -> bool {
        self.trainable_tags[&tag]
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.name.as_str())
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.numel).sum()
    }

    pub fn trainable_elements(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.numel).sum()
    }

    /// Per-tag tensor and element counts; every tag is listed, even if empty.
    pub fn census(&self) -> BTreeMap<ParamTag, TagCensus> {
        let mut out: BTreeMap<ParamTag, TagCensus> = ParamTag::ALL
            .iter()
            .map(|&t| {
                (
                    t,
                    TagCensus {
                        trainable: self.tag_trainable(t),
                        ..Default::default()
                    },
                )
            })
            .collect();
        for e in &self.entries {
            let c = out.get_mut(&e.tag).expect("all tags present");
            c.tensors += 1;
            c.elements += e.numel;
        }
        out
    }

    pub fn census_table(&self) -> String {
        let total = self.total_elements().max(1) as f64;
        let mut s = String::from("tag\ttensors\telements\tshare\ttrainable\n");
        for (tag, c) in self.census() {
            s.push_str(&format!(
                "{tag}\t{}\t{}\t{:.6}\t{}\n",
                c.tensors,
                c.elements,
                c.elements as f64 / total,
                c.trainable
            ));
        }
        s.push_str(&format!(
            "total\t{}\t{}\t1.000000\t{:.6}\n",
            self.entries.len(),
            self.total_elements(),
            trainable_fraction(self)
        ));
        s
    }
}

pub fn partition_parameters(
    params: &[(String, ParamTag, Vec<usize>)],
    mode: Mode,
) -> Result<ParameterPartition> {
    ParameterPartition::with_trainable(params, |t| mode.trainable(t))
}

/// Trainable elements over all elements; 0 for an empty model.
pub fn trainable_fraction(p: &ParameterPartition) -> f64 {
    let total = p.total_elements();
    if total == 0 {
        return 0.0;
    }
    p.trainable_elements() as f64 / total as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct FreezeReport {
    /// Largest absolute change over frozen parameters.
    pub frozen_max_delta: f64,
    /// Frozen parameters that changed: `(name, tag, max |Δ|)`.
    pub violators: Vec<(String, ParamTag, f64)>,
    /// Number of changed trainable tensors per tag.
    pub changed_trainable: BTreeMap<ParamTag, usize>,
}

impl FreezeReport {
    pub fn passed(&self) -> bool {
        self.violators.is_empty()
    }
}

/// Compares two snapshots. Frozen values must be bitwise identical.
pub fn verify_frozen(before: &Snapshot, after: &Snapshot, p: &ParameterPartition) -> Result<FreezeReport> {
    if before.values.len() != p.entries().len() || after.values.len() != p.entries().len() {
        return Err(Error::InvalidState(format!(
            "snapshot sizes {} / {} do not match partition of {}",
            before.values.len(),
            after.values.len(),
            p.entries().len()
        )));
    }
    let mut report = FreezeReport {
        frozen_max_delta: 0.0,
        violators: Vec::new(),
        changed_trainable: BTreeMap::new(),
    };
    for e in p.entries() {
        let missing = || Error::InvalidState(format!("parameter '{}' missing from snapshot", e.name));
        let (_, a) = before.values.get(&e.name).ok_or_else(missing)?;
        let (_, b) = after.values.get(&e.name).ok_or_else(missing)?;
        if a.len() != b.len() {
            return Err(Error::shape(a.len(), b.len()));
        }
        let bitwise_equal = a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
        let delta = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        if e.trainable {
            if !bitwise_equal {
                *report.changed_trainable.entry(e.tag).or_default() += 1;
            }
        } else {
            report.frozen_max_delta = report.frozen_max_delta.max(delta);
            if !bitwise_equal {
                report.violators.push((e.name.clone(), e.tag, delta));
            }
        }
    }
    Ok(report)
}
