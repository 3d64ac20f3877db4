//! Run configuration: TOML file merged with flags, and the provenance
//! header written in front of every artifact.
//!
//! The header embeds the full resolved config as `#@ `-prefixed TOML lines.
//! Any artifact can be passed back as `--config` to rerun with the same
//! settings; only the `#@ ` lines are read in that case.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use esfpnet::stream::StreamConfig;
use esfpnet::train::TrainConfig;
use esfpnet::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

const EMBED: &str = "#@ ";

/// Everything a run depends on besides the input data.
///
/// `seed` and `variant` are authoritative and copied into `train` when
/// resolving, so the two never disagree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub subcommand: String,
    pub seed: u64,
    pub variant: String,
    pub data_root: Option<PathBuf>,
    pub protocol: String,
    /// Dataset directory names under `data_root`.
    pub datasets: Vec<String>,
    /// Model file for `eval` and `stream`.
    pub model: Option<PathBuf>,
    /// Frame directory or `.y4m` file for `stream`.
    pub input: Option<PathBuf>,
    /// Generated frames for `stream` when no input is given.
    pub synthetic_frames: usize,
    /// NCHW shape for `bench`.
    pub input_shape: [usize; 4],
    pub train: TrainConfig,
    pub stream: StreamConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            subcommand: String::new(),
            seed: 0,
            variant: "B0".into(),
            data_root: None,
            protocol: "learning-ability".into(),
            datasets: Vec::new(),
            model: None,
            input: None,
            synthetic_frames: 100,
            input_shape: [1, 3, 352, 352],
            train: TrainConfig::default(),
            stream: StreamConfig::default(),
        }
    }
}

/// Config file text as TOML: the embedded lines of an artifact header, or
/// the whole file when it has none.
fn config_toml(text: &str) -> String {
    let embedded: Vec<&str> = text
        .lines()
        .filter_map(|l| {
            l.strip_prefix(EMBED)
                .or_else(|| (l == EMBED.trim_end()).then_some(""))
        })
        .collect();
    if embedded.is_empty() {
        text.to_string()
    } else {
        embedded.join("\n")
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&config_toml(&text))
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn from_file_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    /// Copy the top-level seed and variant into the sections that use them.
    pub fn resolve(mut self, subcommand: &str) -> Self {
        self.subcommand = subcommand.to_string();
        self.train.seed = self.seed;
        self.train.variant = self.variant.clone();
        self
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the serialized config, hex encoded.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn provenance(&self) -> Result<String> {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# esfpnet {} {}",
            env!("CARGO_PKG_VERSION"),
            self.subcommand
        );
        let _ = writeln!(out, "# config_sha256={}", self.hash()?);
        let _ = writeln!(out, "# seed={}", self.seed);
        let _ = writeln!(out, "# variant={}", self.variant);
        for line in self.to_toml()?.lines() {
            let _ = writeln!(out, "{}{line}", EMBED);
        }
        Ok(out)
    }

    pub fn data_root(&self) -> Result<&Path> {
        self.data_root.as_deref().ok_or_else(|| {
            Error::Config(
                "no data root: pass --data-root, set ESFPNET_DATA or `data_root` in the config"
                    .into(),
            )
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_round_trips_to_the_same_config() {
        let mut c = RunConfig {
            seed: 7,
            variant: "B2".into(),
            datasets: vec!["Kvasir".into()],
            ..Default::default()
        }
        .resolve("split");
        c.train.grad_clip = Some(1.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("artifact.txt");
        fs::write(&p, format!("{}body line\n", c.provenance().unwrap())).unwrap();
        let back = RunConfig::load(&p).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        fs::write(&p, "seed = 3\n[train]\nepochs = 5\n").unwrap();
        let c = RunConfig::load(&p).unwrap().resolve("train");
        assert_eq!((c.seed, c.train.seed, c.train.epochs), (3, 3, 5));
        assert_eq!(c.train.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        fs::write(&p, "sede = 3\n").unwrap();
        assert!(RunConfig::load(&p).is_err());
    }

    #[test]
    fn resolve_makes_sections_agree() {
        let c = RunConfig {
            seed: 9,
            variant: "B4".into(),
            ..Default::default()
        }
        .resolve("train");
        assert_eq!((c.train.seed, c.train.variant.as_str()), (9, "B4"));
    }
}
