//! Run configuration assembled from defaults, flags and an optional
//! `key = value` file (the file wins).

use std::path::Path;

use permgnn::bench::HashMethod;
use permgnn::graph::SplitRatios;
use permgnn::hash::HasherConfig;
use permgnn::trainer::{parse_kv, TrainConfig};
use permgnn::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CandidateSet {
    /// Every pair that is not a disclosed edge.
    Potential,
    /// The query's test-fold partners only.
    Test,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub ratios: SplitRatios,
    pub train: TrainConfig,
    pub hasher: HasherConfig,
    pub hash: HashMethod,
    pub j: usize,
    pub l: usize,
    pub k: usize,
    pub candidates: CandidateSet,
    pub cutoff: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            ratios: SplitRatios::default(),
            train: TrainConfig::default(),
            hasher: HasherConfig::default(),
            hash: HashMethod::Learned,
            j: 8,
            l: 4,
            k: 10,
            candidates: CandidateSet::Potential,
            cutoff: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => {
                self.seed = parse(key, value)?;
                self.train.seed = self.seed;
                self.hasher.seed = self.seed;
            }
            "ratios" => {
                let v: Vec<f64> = value
                    .split(|c: char| c == ',' || c.is_whitespace())
                    .filter(|t| !t.is_empty())
                    .map(|t| parse(key, t))
                    .collect::<Result<_>>()?;
                if v.len() != 3 {
                    return Err(Error::Config("`ratios` needs three values".into()));
                }
                self.ratios = SplitRatios::new(v[0], v[1], v[2])?;
            }
            "bits" => self.hasher.bits = parse(key, value)?,
            "alpha" => self.hasher.weights.alpha = parse(key, value)?,
            "beta" => self.hasher.weights.beta = parse(key, value)?,
            "gamma" => self.hasher.weights.gamma = parse(key, value)?,
            "hash_lr" => self.hasher.lr = parse(key, value)?,
            "hash_epochs" => self.hasher.epochs = parse(key, value)?,
            "sample_factor" => self.hasher.sample_factor = parse(key, value)?,
            "val_fraction" => self.hasher.val_fraction = parse(key, value)?,
            "hash" => self.hash = value.parse()?,
            "j" | "J" => self.j = parse(key, value)?,
            "l" | "L" => self.l = parse(key, value)?,
            "k" | "K" => self.k = parse(key, value)?,
            "candidates" => {
                self.candidates = match value {
                    "potential" => CandidateSet::Potential,
                    "test" => CandidateSet::Test,
                    other => return Err(Error::Config(format!("unknown candidate set `{other}`"))),
                }
            }
            "cutoff" => {
                self.cutoff = match value {
                    "inf" | "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            other => self.train.set(other, value)?,
        }
        Ok(())
    }

    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Flags first, then the config file on top.
    pub fn assemble(flags: &[(String, String)], file: Option<&Path>) -> Result<Self> {
        let mut cfg = Self::default();
        // a preset replaces the training block, so it goes first
        let (presets, rest): (Vec<_>, Vec<_>) =
            flags.iter().cloned().partition(|(k, _)| k == "preset");
        cfg.apply(&presets)?;
        cfg.apply(&rest)?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)?;
            let pairs = parse_kv(&text, &path.display().to_string())?;
            let (presets, rest): (Vec<_>, Vec<_>) =
                pairs.into_iter().partition(|(k, _)| k == "preset");
            cfg.apply(&presets)?;
            cfg.apply(&rest)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.ratios.validate()?;
        self.train.validate()?;
        self.hasher.weights.validate()?;
        if self.hasher.bits == 0 || self.hasher.bits > permgnn::hash::MAX_BITS {
            return Err(Error::Config(format!(
                "bits must be in 1..={}",
                permgnn::hash::MAX_BITS
            )));
        }
        if self.k == 0 || self.l == 0 || self.j == 0 {
            return Err(Error::Config("J, L and K must be at least 1".into()));
        }
        Ok(())
    }

    /// Canonical listing; the config hash is taken over it.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let r = &self.ratios;
        let h = &self.hasher;
        let mut out: Vec<(String, String)> = vec![
            ("seed".into(), self.seed.to_string()),
            ("ratios".into(), format!("{} {} {}", r.train, r.val, r.test)),
        ];
        out.extend(
            self.train
                .to_pairs()
                .into_iter()
                .filter(|(k, _)| k != "seed"),
        );
        out.extend(
            [
                ("bits", h.bits.to_string()),
                ("alpha", h.weights.alpha.to_string()),
                ("beta", h.weights.beta.to_string()),
                ("gamma", h.weights.gamma.to_string()),
                ("hash_lr", h.lr.to_string()),
                ("hash_epochs", h.epochs.to_string()),
                ("sample_factor", h.sample_factor.to_string()),
                ("val_fraction", h.val_fraction.to_string()),
                ("hash", self.hash.to_string()),
                ("j", self.j.to_string()),
                ("l", self.l.to_string()),
                ("k", self.k.to_string()),
                (
                    "candidates",
                    match self.candidates {
                        CandidateSet::Potential => "potential".into(),
                        CandidateSet::Test => "test".into(),
                    },
                ),
                (
                    "cutoff",
                    self.cutoff.map_or("inf".into(), |c| c.to_string()),
                ),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v)),
        );
        out
    }

    /// FNV-1a over the canonical listing, as 16 hex digits.
    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (k, v) in self.to_pairs() {
            for b in k.bytes().chain([b'=']).chain(v.bytes()).chain([b'\n']) {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        format!("{h:016x}")
    }

    /// Header lines every artifact starts with.
    pub fn header(&self, command: &str) -> Vec<String> {
        vec![
            format!("permgnn {command}"),
            format!("config {}", self.hash()),
            format!("seed {}", self.seed),
        ]
    }
}
