use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const INDEX_FORMAT_VERSION: u32 = 1;
const INDEX_HEADER_PREFIX: &str = "#fakescope-index v";

/// Class label. Real images are the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Fake = 0,
    Real = 1,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn as_target(self) -> f32 {
        self as u8 as f32
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Label::Fake),
            1 => Some(Label::Real),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Fake => "fake",
            Label::Real => "real",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

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
            other => Err(Error::Index(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub path: PathBuf,
    pub label: Label,
    pub split: Split,
}

/// Per-split real/fake tallies.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub real: usize,
    pub fake: usize,
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.real + self.fake
    }

    fn bump(&mut self, label: Label) {
        match label {
            Label::Real => self.real += 1,
            Label::Fake => self.fake += 1,
        }
    }
}

/// Ordered catalog of labeled samples. Counts are always derived from the
/// records, never stored independently.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetIndex {
    records: Vec<SampleRecord>,
    counts: BTreeMap<Split, ClassCounts>,
}

impl DatasetIndex {
    pub fn new(records: Vec<SampleRecord>) -> Result<Self> {
        let mut seen = std::collections::HashSet::with_capacity(records.len());
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Index(format!("duplicate sample id '{}'", r.id)));
            }
        }
        let counts = tally(&records);
        Ok(Self { records, counts })
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn counts(&self, split: Split) -> ClassCounts {
        self.counts.get(&split).copied().unwrap_or_default()
    }

    /// Counts summed over all splits.
    pub fn total_counts(&self) -> ClassCounts {
        self.counts.values().fold(ClassCounts::default(), |acc, c| ClassCounts {
            real: acc.real + c.real,
            fake: acc.fake + c.fake,
        })
    }

    /// Positions (into `records()`) of the given split, in index order.
    pub fn positions(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn split_records(&self, split: Split) -> Vec<&SampleRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// Recomputes the tallies from the records and compares.
    pub fn counts_consistent(&self) -> bool {
        tally(&self.records) == self.counts
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "{INDEX_HEADER_PREFIX}{INDEX_FORMAT_VERSION} id|path|label|split")?;
        for r in &self.records {
            writeln!(
                w,
                "{}|{}|{}|{}",
                r.id,
                r.path.display(),
                r.label.as_u8(),
                r.split
            )?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        for r in &self.records {
            let p = r.path.to_string_lossy();
            if r.id.contains(['|', '\n']) || p.contains(['|', '\n']) {
                return Err(Error::Index(format!(
                    "record '{}' contains a reserved character ('|' or newline)",
                    r.id
                )));
            }
        }
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let header = match lines.next() {
            Some(line) => line.map_err(|e| Error::Index(e.to_string()))?,
            None => return Err(Error::Index("missing header line".into())),
        };
        let version = header
            .strip_prefix(INDEX_HEADER_PREFIX)
            .and_then(|rest| rest.split_whitespace().next())
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| Error::Index(format!("bad header line '{header}'")))?;
        if version != INDEX_FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: INDEX_FORMAT_VERSION,
            });
        }
        let mut records = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::Index(e.to_string()))?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('|').collect();
            let [id, path, label, split] = fields[..] else {
                return Err(Error::Index(format!(
                    "line {}: expected 4 fields, found {}",
                    lineno + 2,
                    fields.len()
                )));
            };
            let label = label
                .parse::<u8>()
                .ok()
                .and_then(Label::from_u8)
                .ok_or_else(|| Error::Index(format!("line {}: bad label '{label}'", lineno + 2)))?;
            records.push(SampleRecord {
                id: id.to_string(),
                path: PathBuf::from(path),
                label,
                split: split.parse()?,
            });
        }
        Self::new(records)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file))
    }
}

fn tally(records: &[SampleRecord]) -> BTreeMap<Split, ClassCounts> {
    let mut counts = BTreeMap::new();
    for r in records {
        counts
            .entry(r.split)
            .or_insert_with(ClassCounts::default)
            .bump(r.label);
    }
    counts
}
