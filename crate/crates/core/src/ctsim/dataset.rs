//! On-disk dataset: `samples/<id>/{Y,Xgt,X0,I}.fnt` + `meta.json`, and a
//! top-level `manifest.json` listing the splits.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{make_sample, CtSample, SampleConfig, SampleMeta, SizeClass};
use crate::config::{load_json, save_json};
use crate::error::{Error, Result};
use crate::fnt;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];
const ATTEMPTS_PER_SAMPLE: usize = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: &str) -> usize {
        match split {
            "train" => self.train,
            "val" => self.val,
            "test" => self.test,
            _ => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub sample: SampleConfig,
    pub splits: SplitCounts,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            sample: SampleConfig::default(),
            splits: SplitCounts {
                train: 16,
                val: 4,
                test: 4,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: DatasetConfig,
    pub splits: BTreeMap<String, Vec<String>>,
    pub counts: BTreeMap<String, usize>,
    pub class_counts: BTreeMap<String, BTreeMap<SizeClass, usize>>,
}

impl Manifest {
    pub fn ids(&self, split: &str) -> Result<&[String]> {
        self.splits
            .get(split)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::config("split", format!("no split named `{split}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Failure {
    pub split: String,
    pub seed: u64,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct GenerateReport {
    pub manifest: Manifest,
    pub failures: Vec<Failure>,
    /// Splits that ended up with fewer samples than requested.
    pub short: Vec<String>,
}

pub fn sample_dir(root: &Path, id: &str) -> PathBuf {
    root.join("samples").join(id)
}

pub fn write_sample(root: &Path, sample: &CtSample, meta: &SampleMeta) -> Result<()> {
    let dir = sample_dir(root, &sample.id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (name, t) in [
        ("Y", &sample.y),
        ("Xgt", &sample.x_gt),
        ("X0", &sample.x0),
        ("I", &sample.mask),
    ] {
        fnt::save(&dir.join(format!("{name}.fnt")), t)?;
    }
    save_json(&dir.join("meta.json"), meta)
}

pub fn read_sample(root: &Path, id: &str) -> Result<CtSample> {
    let inner = || -> Result<CtSample> {
        let dir = sample_dir(root, id);
        let meta: SampleMeta = load_json(&dir.join("meta.json"))?;
        let read = |name: &str| fnt::load(&dir.join(format!("{name}.fnt")));
        let sample = CtSample {
            id: id.to_string(),
            y: read("Y")?,
            x_gt: read("Xgt")?,
            mask: read("I")?,
            x0: read("X0")?,
            size_class: meta.size_class,
            no_metal: meta.no_metal,
        };
        sample.check()?;
        Ok(sample)
    };
    inner().map_err(|e| Error::Sample {
        id: id.to_string(),
        source: Box::new(e),
    })
}

/// Generates every split. Sample seeds come from one stream seeded with
/// `cfg.seed`; a failed sample is retried with the next seed.
pub fn generate_dataset(root: &Path, cfg: &DatasetConfig) -> Result<GenerateReport> {
    cfg.sample.validate()?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut seeds = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut splits = BTreeMap::new();
    let mut counts = BTreeMap::new();
    let mut class_counts = BTreeMap::new();
    let mut failures = Vec::new();
    let mut short = Vec::new();
    for split in SPLITS {
        let want = cfg.splits.get(split);
        let mut ids = Vec::with_capacity(want);
        let mut classes: BTreeMap<SizeClass, usize> =
            SizeClass::ALL.iter().map(|&c| (c, 0)).collect();
        for slot in 0..want {
            let id = format!("{split}-{slot:04}");
            for _ in 0..ATTEMPTS_PER_SAMPLE {
                let seed: u64 = seeds.random();
                match make_sample(&id, seed, &cfg.sample) {
                    Ok((sample, meta)) => {
                        write_sample(root, &sample, &meta)?;
                        *classes.entry(meta.size_class).or_default() += 1;
                        ids.push(id.clone());
                        break;
                    }
                    Err(e @ (Error::Generation(_) | Error::Completion(_))) => {
                        failures.push(Failure {
                            split: split.to_string(),
                            seed,
                            reason: e.to_string(),
                        });
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        if ids.len() < want {
            short.push(split.to_string());
        }
        counts.insert(split.to_string(), ids.len());
        class_counts.insert(split.to_string(), classes);
        splits.insert(split.to_string(), ids);
    }
    let manifest = Manifest {
        config: cfg.clone(),
        splits,
        counts,
        class_counts,
    };
    save_json(&root.join("manifest.json"), &manifest)?;
    Ok(GenerateReport {
        manifest,
        failures,
        short,
    })
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    load_json(&root.join("manifest.json"))
}

pub fn load_split(root: &Path, split: &str) -> Result<Vec<CtSample>> {
    let manifest = read_manifest(root)?;
    manifest
        .ids(split)?
        .iter()
        .map(|id| read_sample(root, id))
        .collect()
}
