//! Stage orchestration: pretrain, knockoffs, selection, pruning, fine-tuning.

mod config;
mod planted;
mod store;
mod train;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

pub use config::{
    Criterion, DataConfig, DatasetName, ExperimentConfig, KnockoffConfig, PruneConfig, SelectionStageConfig,
};
pub use planted::{build_teacher, planted_diagnostic, precision, top_k, PlantedConfig, PlantedOutcome};
pub use store::{sha256_hex, stage_key, ArtifactRef, ArtifactStore};
pub use train::{evaluate, recalibrate_batchnorm, train_network, TrainConfig, TrainReport, MOMENTUM};

use crate::data::checkpoint::{decode_checkpoint, encode_checkpoint};
use crate::data::{
    load_cifar10, load_mnist, make_synthetic_images, normalize_pair, Dataset, Normalization, Split,
};
use crate::error::{Error, Result};
use crate::knockoff::{decode_knockoff_cache, encode_knockoff_cache, fit_knockoff_model, generate_knockoff_dataset};
use crate::nn::{build_arch, Network};
use crate::pruning::{
    apply_plan, compute_importance, l1_importance, make_plan, random_importance, reduction_summary, PruningPlan,
    ReductionSummary,
};
use crate::rng::stream;
use crate::selection::{optimize_scaling, ControlMode, ControlSource, SelectionConfig, SelectionState};
use crate::tensor::Tensor;

const EVAL_BATCH: usize = 500;

/// Normalized train and test splits plus a digest of the training data.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub normalization: Normalization,
    pub digest: String,
}

fn default_dir(name: DatasetName) -> PathBuf {
    match name {
        DatasetName::Mnist => PathBuf::from("data/mnist"),
        DatasetName::Cifar10 => PathBuf::from("data/cifar10"),
        DatasetName::Synthetic => PathBuf::new(),
    }
}

fn dataset_digest(ds: &Dataset) -> String {
    let mut bytes = ds.images.to_le_bytes();
    bytes.extend(ds.labels.iter().flat_map(|&l| (l as u64).to_le_bytes()));
    sha256_hex(&bytes)
}

pub fn load_data(config: &DataConfig, seed: u64) -> Result<Prepared> {
    let dir = config.dir.clone().unwrap_or_else(|| default_dir(config.name));
    let (mut train, mut test) = match config.name {
        DatasetName::Mnist => load_mnist(&dir)?,
        DatasetName::Cifar10 => load_cifar10(&dir)?,
        DatasetName::Synthetic => (
            make_synthetic_images(seed, 2000, [1, 12, 12], 10, 0.35, Split::Train)?,
            make_synthetic_images(seed, 500, [1, 12, 12], 10, 0.35, Split::Test)?,
        ),
    };
    if let Some(n) = config.train_limit {
        train = train.head(n)?;
    }
    if let Some(n) = config.test_limit {
        test = test.head(n)?;
    }
    let normalization = normalize_pair(&mut train, &mut test);
    let mut digest_src = dataset_digest(&train);
    digest_src.push_str(&dataset_digest(&test));
    Ok(Prepared {
        train,
        test,
        normalization,
        digest: sha256_hex(digest_src.as_bytes()),
    })
}

/// A stage result and the artifact holding its serialized form.
#[derive(Clone, Debug)]
pub struct Staged<T> {
    pub value: T,
    pub artifact: ArtifactRef,
}

impl<T> Staged<T> {
    /// Reads an artifact file written outside a store.
    pub fn load(path: &Path, stage: &str, decode: impl Fn(&[u8]) -> Result<T>) -> Result<Self> {
        let bytes = crate::data::read_file(path)?;
        Ok(Self {
            value: decode(&bytes)?,
            artifact: ArtifactRef {
                stage: stage.into(),
                hash: sha256_hex(&bytes),
                file: path.display().to_string(),
            },
        })
    }
}

pub fn encode_network(net: &Network) -> Vec<u8> {
    encode_checkpoint(&net.to_sections())
}

pub fn decode_network(bytes: &[u8]) -> Result<Network> {
    Network::from_sections(&decode_checkpoint(bytes)?)
}

pub fn encode_state(s: &SelectionState) -> Vec<u8> {
    encode_checkpoint(&s.to_sections())
}

pub fn decode_state(bytes: &[u8]) -> Result<SelectionState> {
    SelectionState::from_sections(&decode_checkpoint(bytes)?)
}

pub fn encode_plan(p: &PruningPlan) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(p).expect("plans serialize");
    v.push(b'\n');
    v
}

pub fn decode_plan(bytes: &[u8]) -> Result<PruningPlan> {
    Ok(serde_json::from_slice(bytes)?)
}

/// Counts of `β` per layer over ten equal bins of `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BetaHistogram {
    pub layer: usize,
    pub counts: Vec<usize>,
}

pub fn beta_histograms(state: &SelectionState) -> Vec<BetaHistogram> {
    state
        .layers
        .iter()
        .map(|l| {
            let mut counts = vec![0; 10];
            for b in l.beta() {
                counts[((b * 10.0) as usize).min(9)] += 1;
            }
            BetaHistogram {
                layer: l.layer.conv,
                counts,
            }
        })
        .collect()
}

/// One JSON-lines metrics row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub label: String,
    pub config: ExperimentConfig,
    pub baseline_accuracy: f64,
    pub pruned_accuracy: f64,
    pub final_accuracy: f64,
    /// `baseline_accuracy - final_accuracy`.
    pub error_gap: f64,
    pub reduction: ReductionSummary,
    pub beta_histograms: Vec<BetaHistogram>,
    /// Artifact hash per stage.
    pub artifacts: BTreeMap<String, String>,
    /// Seconds since the Unix epoch; the only field allowed to differ between reruns.
    pub timestamp: u64,
}

impl MetricsRecord {
    /// The record with its timestamp zeroed, for reproducibility checks.
    pub fn without_timestamp(&self) -> Self {
        Self {
            timestamp: 0,
            ..self.clone()
        }
    }
}

pub fn append_metrics(path: &Path, record: &MetricsRecord) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut line = serde_json::to_vec(record)?;
    line.push(b'\n');
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(&line).map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

fn now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

#[derive(Clone, Debug)]
pub struct ScopOutcome {
    pub network: Network,
    pub plan: PruningPlan,
    pub state: Option<SelectionState>,
    pub record: MetricsRecord,
}

/// Runs stages for one config, reusing stored artifacts unless `force` is set.
pub struct Runner<'s> {
    pub config: ExperimentConfig,
    pub store: Option<&'s ArtifactStore>,
    pub force: bool,
}

impl<'s> Runner<'s> {
    pub fn new(config: ExperimentConfig, store: Option<&'s ArtifactStore>, force: bool) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, store, force })
    }

    fn with_config(&self, config: ExperimentConfig) -> Result<Self> {
        Runner::new(config, self.store, self.force)
    }

    fn stage<T>(
        &self,
        stage: &str,
        ext: &str,
        material: serde_json::Value,
        encode: impl Fn(&T) -> Vec<u8>,
        decode: impl Fn(&[u8]) -> Result<T>,
        compute: impl FnOnce() -> Result<T>,
    ) -> Result<Staged<T>> {
        let key = stage_key(stage, &material);
        if let (Some(store), false) = (self.store, self.force) {
            if let Some((artifact, bytes)) = store.lookup(stage, &key)? {
                log::info!("{stage}: reusing {}", artifact.hash);
                return Ok(Staged {
                    value: decode(&bytes)?,
                    artifact,
                });
            }
        }
        log::info!("{stage}: computing");
        let value = compute()?;
        let bytes = encode(&value);
        let artifact = match self.store {
            Some(store) => store.put(stage, &key, ext, &bytes)?,
            None => ArtifactRef {
                stage: stage.into(),
                hash: sha256_hex(&bytes),
                file: String::new(),
            },
        };
        Ok(Staged { value, artifact })
    }

    pub fn pretrain(&self, data: &Prepared) -> Result<Staged<Network>> {
        let c = &self.config;
        let init = build_arch(
            &c.arch,
            data.train.example_shape(),
            data.train.num_classes,
            &mut stream(c.seed, "init"),
        )?;
        let material = json!({
            "init": sha256_hex(&encode_network(&init)),
            "data": data.digest,
            "seed": c.seed,
            "pretrain": c.pretrain,
        });
        self.stage("pretrain", "ckpt", material, encode_network, decode_network, move || {
            let mut net = init;
            let report = train_network(&mut net, &data.train, &c.pretrain, c.seed, "pretrain", None)?;
            log::info!("pretrain losses {:?}", report.epoch_losses);
            Ok(net)
        })
    }

    /// The training subset that selection (and knockoff generation) sees.
    pub fn selection_set(&self, data: &Prepared) -> Result<Dataset> {
        match self.config.selection.examples {
            Some(n) if n < data.train.len() => data.train.sample(n, &mut stream(self.config.seed, "selection-subset")),
            _ => Ok(data.train.clone()),
        }
    }

    /// Knockoffs fitted on the full training split, generated for `set`.
    pub fn knockoffs(&self, data: &Prepared, set: &Dataset) -> Result<Staged<Tensor>> {
        let c = &self.config;
        let material = json!({
            "data": data.digest,
            "seed": c.seed,
            "ridge": c.knockoff.ridge,
            "examples": c.selection.examples,
        });
        self.stage("knockoff", "knk", material, encode_knockoff_cache, decode_knockoff_cache, || {
            let flat = data.train.images.reshape(&[data.train.len(), data.train.example_dim()])?;
            let model = fit_knockoff_model(&flat, c.knockoff.ridge)?;
            Ok(generate_knockoff_dataset(&model, set, c.seed, None)?.images)
        })
    }

    pub fn select(
        &self,
        net: &Staged<Network>,
        set: &Dataset,
        knockoffs: Option<&Staged<Tensor>>,
    ) -> Result<Staged<SelectionState>> {
        let c = &self.config;
        let s = &c.selection;
        let knock_hash = knockoffs.filter(|_| s.control == ControlMode::Knockoff).map(|k| k.artifact.hash.clone());
        let material = json!({
            "net": net.artifact.hash,
            "set": dataset_digest(set),
            "knockoffs": knock_hash,
            "selection": s,
            "seed": c.seed,
        });
        self.stage("select", "ckpt", material, encode_state, decode_state, || {
            let knock = knockoffs.map(|k| &k.value).filter(|_| s.control == ControlMode::Knockoff);
            let source = ControlSource::new(s.control, set, knock)?;
            let config = SelectionConfig {
                lr: s.lr,
                batch: s.batch,
                epochs: s.epochs,
                seed: c.seed,
                bias: s.bias,
                detach_control: s.detach_control,
                ..Default::default()
            };
            let (state, report) = optimize_scaling(&net.value, SelectionState::init(&net.value)?, &source, &config)?;
            log::info!("selection losses {:?}", report.epoch_losses);
            Ok(state)
        })
    }

    pub fn plan(&self, net: &Staged<Network>, state: Option<&Staged<SelectionState>>) -> Result<Staged<PruningPlan>> {
        let c = &self.config;
        let p = &c.prune;
        let state_hash = state.filter(|_| p.criterion == Criterion::Scop).map(|s| s.artifact.hash.clone());
        let material = json!({"net": net.artifact.hash, "state": state_hash, "prune": p, "seed": c.seed});
        self.stage("plan", "json", material, encode_plan, decode_plan, || {
            let report = match p.criterion {
                Criterion::Scop => {
                    let state = state.ok_or_else(|| Error::invalid("scop criterion needs a selection state"))?;
                    compute_importance(&state.value, &net.value, p.bn_scale)?
                }
                Criterion::L1 => l1_importance(&net.value),
                Criterion::Random => random_importance(&net.value, &mut stream(c.seed, "random-plan"))?,
            };
            make_plan(&report, p.rate)
        })
    }

    pub fn prune(&self, net: &Staged<Network>, plan: &Staged<PruningPlan>) -> Result<Staged<Network>> {
        let material = json!({"net": net.artifact.hash, "plan": plan.artifact.hash});
        self.stage("prune", "ckpt", material, encode_network, decode_network, || {
            apply_plan(&net.value, &plan.value)
        })
    }

    pub fn finetune(&self, net: &Staged<Network>, data: &Prepared) -> Result<Staged<Network>> {
        let c = &self.config;
        let material = json!({"net": net.artifact.hash, "data": data.digest, "finetune": c.finetune, "seed": c.seed});
        self.stage("finetune", "ckpt", material, encode_network, decode_network, || {
            let mut n = net.value.clone();
            let report = train_network(&mut n, &data.train, &c.finetune, c.seed, "finetune", None)?;
            log::info!("finetune losses {:?}", report.epoch_losses);
            Ok(n)
        })
    }

    /// Full sequence from data loading to the metrics record.
    pub fn run(&self, data: &Prepared) -> Result<ScopOutcome> {
        let net = self.pretrain(data)?;
        let baseline = evaluate(&net.value, &data.test, EVAL_BATCH)?;
        self.run_from(data, &net, baseline, None)
    }

    /// Everything after pretraining. `shared` supplies an already computed
    /// selection subset and knockoffs.
    pub fn run_from(
        &self,
        data: &Prepared,
        net: &Staged<Network>,
        baseline_accuracy: f64,
        shared: Option<(&Dataset, &Staged<Tensor>)>,
    ) -> Result<ScopOutcome> {
        let c = &self.config;
        let mut artifacts = BTreeMap::new();
        artifacts.insert("pretrain".to_string(), net.artifact.hash.clone());
        let state = if c.prune.criterion == Criterion::Scop {
            let owned;
            let (set, knock) = match shared {
                Some((set, k)) => (set, (c.selection.control == ControlMode::Knockoff).then_some(k)),
                None => {
                    let set = self.selection_set(data)?;
                    let knock = if c.selection.control == ControlMode::Knockoff {
                        Some(self.knockoffs(data, &set)?)
                    } else {
                        None
                    };
                    owned = (set, knock);
                    (&owned.0, owned.1.as_ref())
                }
            };
            if let Some(k) = knock {
                artifacts.insert("knockoff".into(), k.artifact.hash.clone());
            }
            let st = self.select(net, set, knock)?;
            artifacts.insert("select".into(), st.artifact.hash.clone());
            Some(st)
        } else {
            None
        };
        let plan = self.plan(net, state.as_ref())?;
        let pruned = self.prune(net, &plan)?;
        let pruned_accuracy = evaluate(&pruned.value, &data.test, EVAL_BATCH)?;
        let tuned = self.finetune(&pruned, data)?;
        let final_accuracy = evaluate(&tuned.value, &data.test, EVAL_BATCH)?;
        for (k, v) in [("plan", &plan.artifact), ("prune", &pruned.artifact), ("finetune", &tuned.artifact)] {
            artifacts.insert(k.into(), v.hash.clone());
        }
        let record = MetricsRecord {
            label: self.label(),
            config: c.clone(),
            baseline_accuracy,
            pruned_accuracy,
            final_accuracy,
            error_gap: baseline_accuracy - final_accuracy,
            reduction: reduction_summary(&net.value, &pruned.value)?,
            beta_histograms: state.as_ref().map(|s| beta_histograms(&s.value)).unwrap_or_default(),
            artifacts,
            timestamp: now(),
        };
        Ok(ScopOutcome {
            network: tuned.value,
            plan: plan.value,
            state: state.map(|s| s.value),
            record,
        })
    }

    fn label(&self) -> String {
        let c = &self.config;
        match c.prune.criterion {
            Criterion::Scop => format!(
                "scop/{}/bias-{}",
                c.selection.control,
                if c.selection.bias { "on" } else { "off" }
            ),
            other => other.to_string(),
        }
    }

    /// Every control mode with and without bias pairs, sharing the
    /// pretrained network and knockoffs.
    pub fn ablate(&self, data: &Prepared) -> Result<Vec<MetricsRecord>> {
        let net = self.pretrain(data)?;
        let baseline = evaluate(&net.value, &data.test, EVAL_BATCH)?;
        let set = self.selection_set(data)?;
        let knock = self.knockoffs(data, &set)?;
        ablation_configs(&self.config)
            .into_iter()
            .map(|cfg| {
                let r = self.with_config(cfg)?;
                Ok(r.run_from(data, &net, baseline, Some((&set, &knock)))?.record)
            })
            .collect()
    }
}

/// The eight control-mode by bias-flag variants of `base`, SCOP criterion.
pub fn ablation_configs(base: &ExperimentConfig) -> Vec<ExperimentConfig> {
    ControlMode::ALL
        .into_iter()
        .flat_map(|mode| [true, false].map(|bias| (mode, bias)))
        .map(|(mode, bias)| {
            let mut c = base.clone();
            c.selection.control = mode;
            c.selection.bias = bias;
            c.prune.criterion = Criterion::Scop;
            c
        })
        .collect()
}

#[cfg(test)]
mod tests;
