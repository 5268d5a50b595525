//! Dataset synthesis: subject-independent splits with multiple noise
//! realizations per study, plus the on-disk manifest.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    derive_seed, generate_phantom, load_volume, save_volume, simulate_counts, CountLevel,
    PhantomConfig, Volume3D,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split '{other}'"))),
        }
    }
}

/// Configuration for synthesizing a dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub train_studies: usize,
    pub val_studies: usize,
    pub test_studies: usize,
    /// Noise realizations per study (all splits).
    pub realizations: usize,
    /// Volume dims (H, W, D).
    pub dims: (usize, usize, usize),
    /// Count scale of the full-count reference; low-count variance is
    /// `lambda / (delta * c_full)`.
    pub c_full: f64,
    /// Uniform sampling range for the count level.
    pub delta_range: (f64, f64),
    pub master_seed: u64,
    pub phantom: PhantomConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            train_studies: 3,
            val_studies: 1,
            test_studies: 1,
            realizations: 4,
            dims: (32, 32, 16),
            c_full: 200.0,
            delta_range: CountLevel::SAMPLING_RANGE,
            master_seed: 0,
            phantom: PhantomConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRealization {
    pub delta: f64,
    pub path: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestStudy {
    pub study_id: String,
    pub split: Split,
    pub ground_truth_path: String,
    pub full_count_path: String,
    pub realizations: Vec<ManifestRealization>,
}

/// Dataset manifest: study list plus the generating config echo. Paths are
/// relative to the manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: DatasetConfig,
    pub studies: Vec<ManifestStudy>,
    #[serde(skip)]
    root: PathBuf,
}

impl DatasetManifest {
    pub const FILE_NAME: &'static str = "manifest.json";

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Format(format!("manifest {}: {e}", path.display())))?;
        m.root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        m.validate_splits()?;
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(Self::FILE_NAME);
        let json = serde_json::to_vec_pretty(self)
            .map_err(|e| Error::Format(format!("manifest encode: {e}")))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn studies_in(&self, split: Split) -> impl Iterator<Item = &ManifestStudy> {
        self.studies.iter().filter(move |s| s.split == split)
    }

    pub fn load_volume(&self, rel: &str) -> Result<Volume3D> {
        load_volume(&self.resolve(rel))
    }

    /// Splits must be study-disjoint.
    pub fn validate_splits(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for s in &self.studies {
            if !seen.insert(&s.study_id) {
                return Err(Error::Format(format!(
                    "study {} appears in more than one manifest entry",
                    s.study_id
                )));
            }
        }
        Ok(())
    }
}

/// Generate phantoms and count realizations under `out_dir` and write the
/// manifest. Fully deterministic for a given config.
pub fn build_dataset(config: &DatasetConfig, out_dir: &Path) -> Result<DatasetManifest> {
    if config.train_studies == 0 || config.val_studies == 0 || config.test_studies == 0 {
        return Err(Error::InvalidArgument(
            "every split needs at least one study".into(),
        ));
    }
    if config.realizations == 0 {
        return Err(Error::InvalidArgument(
            "need at least one realization per study".into(),
        ));
    }
    let (dlo, dhi) = config.delta_range;
    if !(dlo > 0.0 && dhi <= 1.0 && dlo <= dhi) {
        return Err(Error::InvalidArgument(format!(
            "delta range must satisfy 0 < lo <= hi <= 1, got ({dlo}, {dhi})"
        )));
    }

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let total = config.train_studies + config.val_studies + config.test_studies;
    let mut studies = Vec::with_capacity(total);
    for idx in 0..total {
        let split = if idx < config.train_studies {
            Split::Train
        } else if idx < config.train_studies + config.val_studies {
            Split::Val
        } else {
            Split::Test
        };
        let study_id = format!("study_{idx:03}");
        let study_dir_rel = format!("studies/{study_id}");
        let study_dir = out_dir.join(&study_dir_rel);
        fs::create_dir_all(&study_dir).map_err(|e| Error::io(&study_dir, e))?;

        let phantom_seed = derive_seed(config.master_seed, &[1, idx as u64]);
        let mut truth = generate_phantom(phantom_seed, config.dims, &config.phantom)?;
        truth.study_id = study_id.clone();
        let gt_rel = format!("{study_dir_rel}/ground_truth.pvol");
        save_volume(&truth, &out_dir.join(&gt_rel))?;

        let full_seed = derive_seed(config.master_seed, &[2, idx as u64]);
        let full = simulate_counts(&truth, CountLevel::new(1.0)?, config.c_full, full_seed)?;
        let fc_rel = format!("{study_dir_rel}/full_count.pvol");
        save_volume(&full, &out_dir.join(&fc_rel))?;

        let mut realizations = Vec::with_capacity(config.realizations);
        for k in 0..config.realizations {
            let delta_seed = derive_seed(config.master_seed, &[3, idx as u64, k as u64]);
            let mut drng = ChaCha8Rng::seed_from_u64(delta_seed);
            let delta = if dlo == dhi {
                dlo
            } else {
                drng.random_range(dlo..dhi)
            };
            let sim_seed = derive_seed(config.master_seed, &[4, idx as u64, k as u64]);
            let mut low =
                simulate_counts(&truth, CountLevel::new(delta)?, config.c_full, sim_seed)?;
            low.realization = k as u32;
            let low_rel = format!("{study_dir_rel}/low_{k:03}.pvol");
            save_volume(&low, &out_dir.join(&low_rel))?;
            realizations.push(ManifestRealization {
                delta,
                path: low_rel,
                seed: sim_seed,
            });
        }

        studies.push(ManifestStudy {
            study_id,
            split,
            ground_truth_path: gt_rel,
            full_count_path: fc_rel,
            realizations,
        });
    }

    let manifest = DatasetManifest {
        config: config.clone(),
        studies,
        root: out_dir.to_path_buf(),
    };
    manifest.save(out_dir)?;
    Ok(manifest)
}
