//! Experiment protocols and reproducible split manifests.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const KVASIR: &str = "Kvasir";
pub const CLINIC_DB: &str = "CVC-ClinicDB";
pub const COLON_DB: &str = "CVC-ColonDB";
pub const ETIS: &str = "ETIS-LaribPolypDB";
pub const CVC_300: &str = "CVC-300";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Protocol {
    /// Each dataset split 80/10/10 at case level; frozen at best validation mDice.
    LearningAbility,
    /// Train on 90% of Kvasir + CVC-ClinicDB, test on unseen CVC-ColonDB and ETIS.
    Generalizability,
    /// Same training set; test on the held-out 10% of both training datasets
    /// plus CVC-ColonDB, CVC-300 and ETIS. Frozen at the last epoch.
    PowerBalance,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [
        Protocol::LearningAbility,
        Protocol::Generalizability,
        Protocol::PowerBalance,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::LearningAbility => "learning-ability",
            Protocol::Generalizability => "generalizability",
            Protocol::PowerBalance => "power-balance",
        }
    }

    /// Datasets that must be present. Learning ability runs on whatever it is given.
    pub fn required_datasets(self) -> &'static [&'static str] {
        match self {
            Protocol::LearningAbility => &[],
            Protocol::Generalizability => &[KVASIR, CLINIC_DB, COLON_DB, ETIS],
            Protocol::PowerBalance => &[KVASIR, CLINIC_DB, COLON_DB, CVC_300, ETIS],
        }
    }

    /// Datasets whose frames are partly used for training.
    pub fn training_datasets(self) -> &'static [&'static str] {
        match self {
            Protocol::LearningAbility => &[],
            _ => &[KVASIR, CLINIC_DB],
        }
    }

    pub fn has_validation(self) -> bool {
        self != Protocol::PowerBalance
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        Protocol::ALL
            .into_iter()
            .find(|p| p.as_str() == norm)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown protocol `{s}` (learning-ability, generalizability, power-balance)"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Subset {
    Train,
    Validation,
    Test,
}

impl Subset {
    pub fn as_str(self) -> &'static str {
        match self {
            Subset::Train => "train",
            Subset::Validation => "val",
            Subset::Test => "test",
        }
    }
}

impl FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Subset::Train),
            "val" => Ok(Subset::Validation),
            "test" => Ok(Subset::Test),
            _ => Err(Error::Validation(format!("unknown subset `{s}`"))),
        }
    }
}

/// The identity of a dataset's frames: `(frame id, case id)` pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetIndex {
    pub name: String,
    pub items: Vec<(String, String)>,
}

impl DatasetIndex {
    /// Every frame is its own case.
    pub fn from_frames(name: &str, frames: impl IntoIterator<Item = String>) -> Self {
        DatasetIndex {
            name: name.to_string(),
            items: frames.into_iter().map(|f| (f.clone(), f)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct SplitEntry {
    pub subset: Subset,
    pub dataset: String,
    pub id: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SplitManifest {
    pub protocol: Protocol,
    pub seed: u64,
    pub dataset_hash: String,
    pub entries: Vec<SplitEntry>,
}

/// SHA-256 over the sorted `dataset, frame, case` triples.
pub fn dataset_hash(datasets: &[DatasetIndex]) -> String {
    let mut lines: Vec<String> = datasets
        .iter()
        .flat_map(|d| {
            d.items
                .iter()
                .map(move |(f, c)| format!("{}\t{f}\t{c}\n", d.name))
        })
        .collect();
    lines.sort();
    let mut h = Sha256::new();
    for l in &lines {
        h.update(l.as_bytes());
    }
    format!("{:x}", h.finalize())
}

fn dataset_rng(seed: u64, name: &str) -> StdRng {
    let digest = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(name.as_bytes())
        .finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    StdRng::from_seed(key)
}

/// Partition a dataset's cases into consecutive groups whose frame counts
/// reach `targets` in turn (the last group takes the rest). Cases are
/// shuffled first, so no case is ever split.
fn partition_cases(d: &DatasetIndex, seed: u64, targets: &[usize]) -> Vec<Vec<String>> {
    let mut cases: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (f, c) in &d.items {
        cases.entry(c.as_str()).or_default().push(f.as_str());
    }
    let mut order: Vec<&str> = cases.keys().copied().collect();
    order.shuffle(&mut dataset_rng(seed, &d.name));
    let mut groups = vec![Vec::new(); targets.len() + 1];
    let mut g = 0;
    for case in order {
        while g < targets.len() && groups[g].len() >= targets[g] {
            g += 1;
        }
        let mut frames: Vec<String> = cases[case].iter().map(|s| s.to_string()).collect();
        frames.sort();
        groups[g].extend(frames);
    }
    groups
}

/// Train/val/test frame targets for an 80/10/10 split of `n` frames. Small
/// sets still get one validation and one test frame when `n >= 3`.
fn eighty_ten_ten(n: usize) -> (usize, usize) {
    let mut val = n / 10;
    let mut test = n - n * 8 / 10 - val;
    if n >= 3 {
        val = val.max(1);
        test = test.max(1);
    }
    (n - val - test, val)
}

/// Datasets a protocol does not use are ignored (and left out of the hash).
pub fn make_split(
    protocol: Protocol,
    datasets: &[DatasetIndex],
    seed: u64,
) -> Result<SplitManifest> {
    let required = protocol.required_datasets();
    let datasets: Vec<DatasetIndex> = datasets
        .iter()
        .filter(|d| required.is_empty() || required.contains(&d.name.as_str()))
        .cloned()
        .collect();
    let mut by_name = BTreeMap::new();
    for d in &datasets {
        if d.items.is_empty() {
            return Err(Error::Validation(format!("dataset {} is empty", d.name)));
        }
        if by_name.insert(d.name.as_str(), d).is_some() {
            return Err(Error::Validation(format!("dataset {} given twice", d.name)));
        }
        let frames: BTreeSet<&str> = d.items.iter().map(|(f, _)| f.as_str()).collect();
        if frames.len() != d.items.len() {
            return Err(Error::Validation(format!(
                "dataset {} has duplicate frame ids",
                d.name
            )));
        }
    }
    let missing: Vec<String> = protocol
        .required_datasets()
        .iter()
        .filter(|n| !by_name.contains_key(*n))
        .map(|n| n.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingDatasets {
            root: Default::default(),
            missing,
        });
    }

    if datasets.is_empty() {
        return Err(Error::Validation("no datasets given".into()));
    }

    let mut entries = Vec::new();
    let mut push = |subset: Subset, dataset: &str, ids: Vec<String>| {
        entries.extend(ids.into_iter().map(|id| SplitEntry {
            subset,
            dataset: dataset.to_string(),
            id,
        }));
    };
    for d in by_name.values() {
        let n = d.items.len();
        match protocol {
            Protocol::LearningAbility => {
                let (train, val) = eighty_ten_ten(n);
                let mut g = partition_cases(d, seed, &[train, val]).into_iter();
                push(Subset::Train, &d.name, g.next().unwrap_or_default());
                push(Subset::Validation, &d.name, g.next().unwrap_or_default());
                push(Subset::Test, &d.name, g.next().unwrap_or_default());
            }
            _ if protocol.training_datasets().contains(&d.name.as_str()) => {
                let held = if protocol == Protocol::Generalizability {
                    Subset::Validation
                } else {
                    Subset::Test
                };
                let mut g = partition_cases(d, seed, &[n * 9 / 10]).into_iter();
                push(Subset::Train, &d.name, g.next().unwrap_or_default());
                push(held, &d.name, g.next().unwrap_or_default());
            }
            _ => push(
                Subset::Test,
                &d.name,
                d.items.iter().map(|(f, _)| f.clone()).collect(),
            ),
        }
    }
    entries.sort();
    Ok(SplitManifest {
        protocol,
        seed,
        dataset_hash: dataset_hash(&datasets),
        entries,
    })
}

impl SplitManifest {
    pub fn subset(&self, subset: Subset) -> impl Iterator<Item = &SplitEntry> {
        self.entries.iter().filter(move |e| e.subset == subset)
    }

    pub fn count(&self, subset: Subset) -> usize {
        self.subset(subset).count()
    }

    /// Datasets with at least one entry in `subset`, sorted.
    pub fn datasets_in(&self, subset: Subset) -> Vec<String> {
        let set: BTreeSet<&str> = self.subset(subset).map(|e| e.dataset.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    /// Fails if the manifest was made from different data.
    pub fn verify(&self, datasets: &[DatasetIndex]) -> Result<()> {
        let required = self.protocol.required_datasets();
        let used: Vec<DatasetIndex> = datasets
            .iter()
            .filter(|d| required.is_empty() || required.contains(&d.name.as_str()))
            .cloned()
            .collect();
        let actual = dataset_hash(&used);
        if actual != self.dataset_hash {
            return Err(Error::Validation(format!(
                "split manifest was built from dataset hash {} but the data hashes to {actual}",
                self.dataset_hash
            )));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "protocol\t{}\nseed\t{}\ndataset_hash\t{}\n",
            self.protocol, self.seed, self.dataset_hash
        );
        for e in &self.entries {
            s.push_str(&format!("{}\t{}\t{}\n", e.subset.as_str(), e.dataset, e.id));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |n: usize, why: &str| {
            Error::Validation(format!("split manifest line {}: {why}", n + 1))
        };
        let (mut protocol, mut seed, mut hash) = (None, None, None);
        let mut entries = Vec::new();
        let mut seen = BTreeSet::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            match fields.as_slice() {
                ["protocol", p] => protocol = Some(p.parse::<Protocol>()?),
                ["seed", s] => {
                    seed = Some(
                        s.parse::<u64>()
                            .map_err(|_| bad(n, "seed is not an integer"))?,
                    )
                }
                ["dataset_hash", h] => hash = Some(h.to_string()),
                [subset, dataset, id] => {
                    let subset: Subset = subset.parse().map_err(|_| bad(n, "unknown subset"))?;
                    if !seen.insert((dataset.to_string(), id.to_string())) {
                        return Err(bad(n, &format!("{dataset}/{id} listed twice")));
                    }
                    entries.push(SplitEntry {
                        subset,
                        dataset: dataset.to_string(),
                        id: id.to_string(),
                    });
                }
                _ => {
                    return Err(bad(
                        n,
                        "expected `key<TAB>value` or `subset<TAB>dataset<TAB>id`",
                    ))
                }
            }
        }
        let missing = |k: &str| Error::Validation(format!("split manifest has no `{k}` line"));
        entries.sort();
        Ok(SplitManifest {
            protocol: protocol.ok_or_else(|| missing("protocol"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
            dataset_hash: hash.ok_or_else(|| missing("dataset_hash"))?,
            entries,
        })
    }
}
