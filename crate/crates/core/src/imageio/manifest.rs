//! Labeled dataset manifests and the Real-n / Mixed-n split presets.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Particle class. The discriminant order is the canonical class order used
/// by confusion matrices and report columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    SiliconeOil = 0,
    AirBubble = 1,
    Protein = 2,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::SiliconeOil, Label::AirBubble, Label::Protein];
    pub const MINORITY: [Label; 2] = [Label::SiliconeOil, Label::AirBubble];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::SiliconeOil => "silicone_oil",
            Label::AirBubble => "air_bubble",
            Label::Protein => "protein",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Label::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::Manifest(format!("unknown label {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Real,
    Generated,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Real => "real",
            Provenance::Generated => "generated",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: String,
    pub label: Label,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub split_name: String,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn new(split_name: impl Into<String>, records: Vec<ManifestRecord>) -> Result<Self> {
        let m = Self { split_name: split_name.into(), records };
        m.check_unique_paths()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn check_unique_paths(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.records.len());
        for r in &self.records {
            if !seen.insert(r.path.as_str()) {
                return Err(Error::Manifest(format!("duplicate path {}", r.path)));
            }
        }
        Ok(())
    }

    /// `[class][provenance]` counts, provenance index 0 = real, 1 = generated.
    pub fn counts(&self) -> [[usize; 2]; 3] {
        let mut c = [[0; 2]; 3];
        for r in &self.records {
            c[r.label.index()][usize::from(r.provenance == Provenance::Generated)] += 1;
        }
        c
    }

    /// Labels present, in canonical order.
    pub fn labels(&self) -> Vec<Label> {
        let counts = self.counts();
        Label::ALL.into_iter().filter(|l| counts[l.index()].iter().sum::<usize>() > 0).collect()
    }

    pub fn filter(&self, name: impl Into<String>, keep: impl Fn(&ManifestRecord) -> bool) -> Self {
        Self {
            split_name: name.into(),
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
        }
    }

    /// Checks that per-class counts equal `spec` exactly.
    pub fn validate_against(&self, spec: &SplitSpec) -> Result<()> {
        let counts = self.counts();
        for label in Label::ALL {
            let i = label.index();
            let want = [spec.real[i], spec.generated[i]];
            if counts[i] != want {
                return Err(Error::Manifest(format!(
                    "{}: {label} has {}/{} real/generated, expected {}/{}",
                    self.split_name, counts[i][0], counts[i][1], want[0], want[1]
                )));
            }
        }
        if counts[Label::Protein.index()][1] > 0 {
            return Err(Error::Manifest("generated protein records are not allowed".into()));
        }
        Ok(())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
        w.write_record(["path", "label", "provenance"])?;
        for r in &self.records {
            w.write_record([r.path.as_str(), r.label.as_str(), r.provenance.as_str()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Reads a `path,label,provenance` CSV; the split name is the file stem.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::Reader::from_reader(file);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["path", "label", "provenance"] {
            return Err(Error::Manifest(format!(
                "{}: header must be path,label,provenance",
                path.display()
            )));
        }
        let records = rdr.deserialize().collect::<std::result::Result<Vec<ManifestRecord>, _>>()?;
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("manifest");
        Self::new(name, records)
    }
}

/// Per-class real and generated counts of a training split, indexed by
/// [`Label::index`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub name: String,
    pub real: [usize; 3],
    pub generated: [usize; 3],
}

const K: usize = 1000;

impl SplitSpec {
    pub const PRESETS: [&'static str; 9] = [
        "Real-0", "Real-1", "Real-2", "Real-3", "Real-4", "Mixed-1", "Mixed-2", "Mixed-3", "Mixed-4",
    ];

    pub fn new(name: impl Into<String>, real: [usize; 3], generated: [usize; 3]) -> Result<Self> {
        if generated[Label::Protein.index()] != 0 {
            return Err(Error::Param("protein generated count must be 0".into()));
        }
        Ok(Self { name: name.into(), real, generated })
    }

    /// Training-set configurations: minority classes keep 1K real images,
    /// protein grows to 2K/5K/10K/20K, and Mixed-n tops the minority
    /// classes up with generated images to match the protein count.
    pub fn preset(name: &str) -> Result<Self> {
        let protein = |n: usize| -> Option<usize> { [2 * K, 5 * K, 10 * K, 20 * K].get(n.checked_sub(1)?).copied() };
        let parsed = name
            .strip_prefix("Real-")
            .map(|n| (false, n))
            .or_else(|| name.strip_prefix("Mixed-").map(|n| (true, n)))
            .and_then(|(mixed, n)| n.parse::<usize>().ok().map(|n| (mixed, n)));
        let spec = match parsed {
            Some((false, 0)) => Some(([K, K, K], [0, 0, 0])),
            Some((mixed, n)) => protein(n).map(|p| {
                let gen = if mixed { p - K } else { 0 };
                ([K, K, p], [gen, gen, 0])
            }),
            None => None,
        };
        let (real, generated) = spec.ok_or_else(|| Error::UnknownPreset {
            name: name.to_string(),
            valid: Self::PRESETS.join(", "),
        })?;
        Self::new(name, real, generated)
    }

    /// Divides every count by `divisor` (rounding to nearest, minimum 1 for
    /// non-zero counts) for desk-scale experiments.
    pub fn scaled(&self, divisor: usize) -> Self {
        let f = |v: usize| if v == 0 { 0 } else { ((v + divisor / 2) / divisor.max(1)).max(1) };
        Self {
            name: self.name.clone(),
            real: self.real.map(f),
            generated: self.generated.map(f),
        }
    }

    pub fn total(&self) -> usize {
        self.real.iter().chain(&self.generated).sum()
    }
}

/// Samples a split from real and generated pools without replacement.
///
/// Candidates are ordered by path and drawn with a `ChaCha8` stream keyed by
/// `(seed, "split/<name>/<class>/<provenance>")`, so the result depends only
/// on the pool contents, the spec and the seed. Output is sorted by class,
/// provenance and path.
pub fn build_split(
    spec: &SplitSpec,
    real_pool: &DatasetManifest,
    generated_pool: &DatasetManifest,
    seed: u64,
) -> Result<DatasetManifest> {
    let mut records = Vec::with_capacity(spec.total());
    for label in Label::ALL {
        for (prov, pool, need) in [
            (Provenance::Real, real_pool, spec.real[label.index()]),
            (Provenance::Generated, generated_pool, spec.generated[label.index()]),
        ] {
            if need == 0 {
                continue;
            }
            let mut candidates: Vec<&ManifestRecord> = pool
                .records
                .iter()
                .filter(|r| r.label == label && r.provenance == prov)
                .collect();
            if candidates.len() < need {
                return Err(Error::InsufficientPool {
                    class: label.to_string(),
                    provenance: prov.to_string(),
                    needed: need,
                    available: candidates.len(),
                });
            }
            candidates.sort_by(|a, b| a.path.cmp(&b.path));
            let mut stream = rng::stream(seed, &format!("split/{}/{label}/{prov}", spec.name), 0);
            let mut chosen: Vec<&ManifestRecord> =
                sample(&mut stream, candidates.len(), need).into_iter().map(|i| candidates[i]).collect();
            chosen.sort_by(|a, b| a.path.cmp(&b.path));
            records.extend(chosen.into_iter().cloned());
        }
    }
    let manifest = DatasetManifest::new(spec.name.clone(), records)?;
    manifest.validate_against(spec)?;
    Ok(manifest)
}
