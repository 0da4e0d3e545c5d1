//! The run directory: config snapshot, manifest and artefact loaders.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use rfpa::dataset::{Manifest, Message, Split};
use rfpa::evalkit::{export_csv, CsvTable};
use rfpa::experiment::ExperimentConfig;
use rfpa::fingerprint::{first_per_transmitter, AuthPolicy, EmbedderModel};
use rfpa::formats::{embedder_from_file, gan_from_file, DatasetFile, ModelFile};
use rfpa::spoofing::GanModel;

pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const DATASET_FILE: &str = "dataset.satv";
pub const CLEAN_FILE: &str = "clean.satv";
pub const GAN_DATASET_FILE: &str = "gan_dataset.satv";
pub const EMBEDDER_FILE: &str = "embedder.satm";
pub const GAN_FILE: &str = "gan.satm";
pub const CALIBRATION_FILE: &str = "calibration.toml";

/// Split ids plus a content hash of every file a stage wrote.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub splits: Manifest,
    pub gan_train: Vec<u64>,
    pub gan_test: Vec<u64>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub config_hash: String,
    pub accept: f64,
    pub update: f64,
    pub capacity: usize,
    pub target_tpr: f64,
    /// Share of calibration pairs the threshold accepts.
    pub achieved_tpr: f64,
    pub calibration_pairs: usize,
    /// Enrolled reference message of each transmitter.
    pub reference_ids: Vec<u64>,
}

pub struct Run {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub hash: String,
}

/// Hash of everything that affects results; the output directory does not.
pub fn run_hash(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    c.output_dir.clear();
    c.hash()
}

fn file_digest(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

impl Run {
    /// Resolve the declared config and check it against the run directory's
    /// snapshot, writing the snapshot on first use.
    pub fn open(config: Option<&Path>, seed: Option<u64>, out: Option<&Path>) -> Result<Self> {
        let mut declared = match config {
            Some(p) => Some(ExperimentConfig::load(p)?),
            None => None,
        };
        let dir = match (out, &declared) {
            (Some(o), _) => o.to_path_buf(),
            (None, Some(c)) => PathBuf::from(&c.output_dir),
            (None, None) => PathBuf::from(ExperimentConfig::default().output_dir),
        };
        let snapshot_path = dir.join(CONFIG_FILE);
        let snapshot = if snapshot_path.exists() {
            Some(ExperimentConfig::load(&snapshot_path).context("reading the run's config snapshot")?)
        } else {
            None
        };
        if declared.is_none() {
            declared = Some(snapshot.clone().unwrap_or_default());
        }
        let mut cfg = declared.expect("set above");
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.output_dir = dir.display().to_string();
        let cfg = cfg.resolved();
        let hash = run_hash(&cfg);
        match snapshot {
            Some(s) if run_hash(&s) != hash => bail!(
                "config hash mismatch: {} was written with {}, the declared config hashes to {hash}",
                dir.display(),
                run_hash(&s)
            ),
            Some(_) => {}
            None => {
                fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                fs::write(&snapshot_path, cfg.to_toml()?).with_context(|| format!("writing {}", snapshot_path.display()))?;
                fs::write(dir.join("config.hash"), format!("{hash}\n"))?;
            }
        }
        Ok(Self { dir, config: cfg, hash })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn require(&self, name: &str) -> Result<PathBuf> {
        let p = self.path(name);
        ensure!(p.exists(), "missing input {} (run the stage that writes it first)", p.display());
        Ok(p)
    }

    fn check_hash(&self, what: &str, found: &str) -> Result<()> {
        ensure!(
            found == self.hash,
            "config hash mismatch: {what} was produced by config {found}, this run is {}",
            self.hash
        );
        Ok(())
    }

    pub fn manifest(&self) -> Result<RunManifest> {
        let p = self.require(MANIFEST_FILE)?;
        let m: RunManifest = toml::from_str(&fs::read_to_string(&p)?).with_context(|| format!("parsing {}", p.display()))?;
        self.check_hash(MANIFEST_FILE, &m.config_hash)?;
        m.splits.check_disjoint()?;
        Ok(m)
    }

    pub fn save_manifest(&self, m: &RunManifest) -> Result<()> {
        fs::write(self.path(MANIFEST_FILE), toml::to_string(m)?)?;
        Ok(())
    }

    /// Record a written file's digest in the manifest.
    fn record(&self, name: &str, bytes: &[u8]) -> Result<()> {
        if !self.path(MANIFEST_FILE).exists() {
            return Ok(());
        }
        let mut m = self.manifest()?;
        m.outputs.insert(name.into(), file_digest(bytes));
        self.save_manifest(&m)
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))?;
        self.record(name, bytes)?;
        log::info!("wrote {}", p.display());
        Ok(())
    }

    pub fn write_csv(&self, name: &str, table: &CsvTable) -> Result<()> {
        export_csv(table, &self.path(name))?;
        self.record(name, &table.to_bytes()?)?;
        log::info!("wrote {}", self.path(name).display());
        Ok(())
    }

    pub fn messages(&self, file: &str) -> Result<Vec<Message>> {
        Ok(DatasetFile::load(&self.require(file)?)?.messages)
    }

    /// Messages of one split of the main dataset.
    pub fn split(&self, split: Split) -> Result<Vec<Message>> {
        let m = self.manifest()?;
        let all = self.messages(DATASET_FILE)?;
        let first = all.first().map_or(0, |m| m.id);
        m.splits
            .ids(split)
            .iter()
            .map(|&id| {
                all.get((id - first) as usize)
                    .filter(|m| m.id == id)
                    .cloned()
                    .with_context(|| format!("manifest lists message {id}, absent from {DATASET_FILE}"))
            })
            .collect()
    }

    pub fn embedder(&self) -> Result<EmbedderModel> {
        let f = ModelFile::load(&self.require(EMBEDDER_FILE)?)?;
        self.check_hash(EMBEDDER_FILE, &f.config_hash)?;
        Ok(embedder_from_file(&f, Some(&self.config.embedder.arch))?)
    }

    pub fn gan(&self) -> Result<GanModel> {
        let f = ModelFile::load(&self.require(GAN_FILE)?)?;
        self.check_hash(GAN_FILE, &f.config_hash)?;
        Ok(gan_from_file(&f)?)
    }

    pub fn calibration(&self) -> Result<Calibration> {
        let p = self.require(CALIBRATION_FILE)?;
        let c: Calibration = toml::from_str(&fs::read_to_string(&p)?)?;
        self.check_hash(CALIBRATION_FILE, &c.config_hash)?;
        Ok(c)
    }

    /// The calibrated policy with each transmitter's reference enrolled.
    pub fn policy(&self, model: &EmbedderModel) -> Result<AuthPolicy> {
        let c = self.calibration()?;
        let mut p = AuthPolicy::new(c.accept, c.update, c.capacity)?;
        let val = self.split(Split::Validation)?;
        for m in val.iter().filter(|m| c.reference_ids.contains(&m.id)) {
            p.enroll(m.transmitter_id, rfpa::fingerprint::embed(model, &m.waveform)?);
        }
        Ok(p)
    }

    /// Validation messages that are not enrolled references.
    pub fn non_reference_validation(&self) -> Result<Vec<Message>> {
        let val = self.split(Split::Validation)?;
        let refs: Vec<u64> = first_per_transmitter(&val.iter().collect::<Vec<_>>()).values().map(|m| m.id).collect();
        Ok(val.into_iter().filter(|m| !refs.contains(&m.id)).collect())
    }
}
