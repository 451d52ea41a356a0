//! Cross-validated experiments: preprocess every run once, then for each
//! fold fit the standardizer on the training runs, train (resumably), and
//! evaluate epoch accuracy and the target-by-block curve on the test runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arch::{Model, ModelConfig, Topology};
use crate::checkpoint;
use crate::data::EpochSet;
use crate::dsp::{preprocess_run, PreprocessConfig, RunId, Standardizer};
use crate::error::{Error, Result};
use crate::eval::{target_by_block_curve, CurveRecord, Fold, ResultRecord, Strategy};
use crate::sim::{run_seed, Scorer, SessionDataset};
use crate::train::{score, History, TrainConfig, Trainer};

/// Everything that shapes a trained model; hashed into every result row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub preprocess: PreprocessConfig,
    pub train: TrainConfig,
    pub fnb_rules: usize,
    pub max_blocks: u32,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            preprocess: PreprocessConfig::default(),
            train: TrainConfig::default(),
            fnb_rules: 4,
            max_blocks: 20,
            seed: 42,
        }
    }
}

impl ExperimentConfig {
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        crate::sim::sha256_hex(json.as_bytes())[..16].to_string()
    }

    pub fn model_config(&self, topology: Topology, channels: usize, samples: usize) -> ModelConfig {
        let mut m = ModelConfig::new(topology);
        m.channels = channels;
        m.samples = samples;
        m.fnb_rules = self.fnb_rules;
        m
    }

    /// Seed for one (topology, fold) pair, independent of training order.
    pub fn fold_seed(&self, topology: Topology, fold: &Fold) -> u64 {
        let t = Topology::ALL
            .iter()
            .position(|&x| x == topology)
            .expect("listed") as u32;
        let s = match fold.strategy {
            Strategy::Session => 0,
            Strategy::Subject => 1,
        };
        run_seed(self.seed, fold.subject, fold.index + 100 * s, t)
    }
}

/// Preprocessed (not yet standardized) epochs of every run.
#[derive(Clone, Debug, Default)]
pub struct Prepared {
    pub runs: BTreeMap<RunId, EpochSet>,
}

impl Prepared {
    /// Load and preprocess the runs of `subjects` (all when `None`).
    pub fn load(
        ds: &SessionDataset,
        cfg: &PreprocessConfig,
        subjects: Option<&[u32]>,
        parallel: bool,
    ) -> Result<Self> {
        let entries: Vec<_> = ds
            .runs()
            .iter()
            .filter(|e| subjects.map_or(true, |s| s.contains(&e.subject)))
            .collect();
        if entries.is_empty() {
            return Err(Error::invalid("no runs selected from the dataset"));
        }
        let one = |e: &&crate::sim::RunEntry| -> Result<(RunId, EpochSet)> {
            let raw = ds.load_run(e)?;
            Ok((e.id(), preprocess_run(&raw, e.id(), cfg)?.epochs))
        };
        let runs: Vec<(RunId, EpochSet)> = if parallel {
            entries.par_iter().map(one).collect::<Result<_>>()?
        } else {
            entries.iter().map(one).collect::<Result<_>>()?
        };
        Ok(Prepared {
            runs: runs.into_iter().collect(),
        })
    }

    pub fn ids(&self) -> Vec<RunId> {
        self.runs.keys().copied().collect()
    }

    fn get(&self, id: &RunId) -> Result<&EpochSet> {
        self.runs
            .get(id)
            .ok_or_else(|| Error::invalid(format!("run {id:?} was not loaded")))
    }

    fn concat(&self, ids: &[RunId]) -> Result<EpochSet> {
        let first = self.get(ids.first().ok_or_else(|| Error::invalid("empty split"))?)?;
        let mut out = EpochSet::new(first.channels, first.samples);
        for id in ids {
            out.extend(self.get(id)?.clone())?;
        }
        Ok(out)
    }

    /// Standardized splits of one fold; statistics come from `fold.train` only.
    pub fn fold_data(&self, fold: &Fold) -> Result<FoldData> {
        let mut train = self.concat(&fold.train)?;
        let mut validation = self.concat(&fold.validation)?;
        let standardizer = Standardizer::fit(&train)?;
        standardizer.apply(&mut train)?;
        standardizer.apply(&mut validation)?;
        let test = fold
            .test
            .iter()
            .map(|id| {
                let mut s = self.get(id)?.clone();
                standardizer.apply(&mut s)?;
                Ok(s)
            })
            .collect::<Result<_>>()?;
        Ok(FoldData {
            train,
            validation,
            test,
            standardizer,
        })
    }
}

#[derive(Clone, Debug)]
pub struct FoldData {
    pub train: EpochSet,
    pub validation: EpochSet,
    /// One set per test run.
    pub test: Vec<EpochSet>,
    pub standardizer: Standardizer,
}

impl FoldData {
    pub fn test_all(&self) -> Result<EpochSet> {
        let mut all = EpochSet::new(self.train.channels, self.train.samples);
        for s in &self.test {
            all.extend(s.clone())?;
        }
        Ok(all)
    }
}

/// Where a fold's artifacts live: `<root>/<topology>/<strategy>/<fold>.*`.
pub fn fold_path(root: &Path, topology: Topology, fold: &Fold, ext: &str) -> PathBuf {
    root.join(topology.name())
        .join(fold.strategy.name())
        .join(format!("{}.{ext}", fold.label()))
}

/// Train one topology on one fold. With `out`, the trainer state is saved
/// after every epoch (and resumed from if present) and the final model is
/// written as a checkpoint; a fold whose checkpoint is complete is loaded
/// instead of retrained. The returned model is exactly the checkpointed
/// one (weights rounded to 32 bits).
pub fn train_fold(
    topology: Topology,
    fold: &Fold,
    data: &FoldData,
    cfg: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<(Model, History)> {
    let seed = cfg.fold_seed(topology, fold);
    let state_path = out.map(|o| fold_path(o, topology, fold, "state.json"));
    if let (Some(o), Some(state)) = (out, &state_path) {
        let ckpt = fold_path(o, topology, fold, "tcfn");
        let hist = fold_path(o, topology, fold, "history.json");
        if ckpt.exists() && hist.exists() && !state.exists() {
            log::info!("{}: {} already trained", topology, fold.label());
            let text = std::fs::read_to_string(&hist).map_err(|e| Error::io(&hist, e))?;
            let history =
                serde_json::from_str(&text).map_err(|e| Error::format(&hist, e.to_string()))?;
            return Ok((checkpoint::load(&ckpt)?, history));
        }
    }
    let mut trainer = match &state_path {
        Some(p) if p.exists() => {
            let t = Trainer::load(p)?;
            log::info!(
                "{}: resuming {} after epoch {}",
                topology,
                fold.label(),
                t.epochs_done()
            );
            t
        }
        _ => {
            let mcfg = cfg.model_config(topology, data.train.channels, data.train.samples);
            let model = Model::new(mcfg, seed)?;
            Trainer::new(
                model,
                TrainConfig {
                    seed,
                    ..cfg.train.clone()
                },
            )?
        }
    };
    if let Some(p) = &state_path {
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    trainer.fit_with(&data.train, &data.validation, |t| match &state_path {
        Some(p) => t.save(p),
        None => Ok(()),
    })?;
    let (model, history) = trainer.finish();
    let model = checkpoint::rounded(&model);
    if let Some(o) = out {
        checkpoint::save(&model, &fold_path(o, topology, fold, "tcfn"))?;
        let hist = fold_path(o, topology, fold, "history.json");
        let text = serde_json::to_string_pretty(&history)
            .map_err(|e| Error::format(&hist, e.to_string()))?;
        std::fs::write(&hist, text + "\n").map_err(|e| Error::io(&hist, e))?;
        // Only needed to resume an interrupted fold.
        if let Some(p) = &state_path {
            std::fs::remove_file(p).map_err(|e| Error::io(p, e))?;
        }
    }
    Ok((model, history))
}

/// Held-out epoch metrics plus the target-by-block curve of one fold.
pub fn evaluate_fold<S: Scorer + Sync + ?Sized>(
    scorer: &S,
    model: Option<&Model>,
    label: &str,
    fold: &Fold,
    data: &FoldData,
    cfg: &ExperimentConfig,
) -> Result<(ResultRecord, Vec<CurveRecord>)> {
    let test = data.test_all()?;
    let (accuracy, cross_entropy) = match model {
        Some(m) => {
            let s = score(m, &test, 256)?;
            (s.accuracy, s.cross_entropy)
        }
        None => {
            // Scorers without class probabilities: confidence is P(target).
            let conf = scorer.confidences(&test)?;
            let probs: Vec<Vec<f64>> = conf.iter().map(|&c| vec![1.0 - c, c]).collect();
            let preds: Vec<usize> = conf.iter().map(|&c| usize::from(c > 0.5)).collect();
            let labels = test.labels();
            (
                crate::eval::accuracy(&preds, &labels)?,
                crate::eval::cross_entropy(&probs, &labels)?,
            )
        }
    };
    let record = ResultRecord {
        topology: label.to_string(),
        strategy: fold.strategy,
        subject: fold.subject,
        fold: fold.label(),
        accuracy,
        cross_entropy,
        test_epochs: test.len(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
    };
    let curve = target_by_block_curve(scorer, &data.test, cfg.max_blocks)?
        .into_iter()
        .map(|p| CurveRecord {
            topology: label.to_string(),
            strategy: fold.strategy,
            subject: fold.subject,
            fold: fold.label(),
            blocks: p.blocks,
            time_s: p.time_s,
            accuracy: p.accuracy,
            bitrate: p.bitrate,
        })
        .collect();
    Ok((record, curve))
}

/// Outcome of training and evaluating one (topology, fold) pair.
#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub record: ResultRecord,
    pub curve: Vec<CurveRecord>,
    pub history: History,
}

/// Train and evaluate every `(topology, fold)` job, `jobs` at a time.
/// Results come back in job order regardless of scheduling.
pub fn run_jobs(
    prepared: &Prepared,
    topologies: &[Topology],
    folds: &[Fold],
    cfg: &ExperimentConfig,
    out: Option<&Path>,
    jobs: usize,
) -> Result<Vec<FoldOutcome>> {
    let work: Vec<(Topology, &Fold)> = topologies
        .iter()
        .flat_map(|&t| folds.iter().map(move |f| (t, f)))
        .collect();
    let one = |&(t, fold): &(Topology, &Fold)| -> Result<FoldOutcome> {
        let data = prepared.fold_data(fold)?;
        let (model, history) = train_fold(t, fold, &data, cfg, out)?;
        let (record, curve) = evaluate_fold(&model, Some(&model), t.name(), fold, &data, cfg)?;
        log::info!(
            "{t} {}: accuracy {:.2}% CE {:.4}",
            fold.label(),
            record.accuracy,
            record.cross_entropy
        );
        Ok(FoldOutcome {
            record,
            curve,
            history,
        })
    };
    if jobs <= 1 {
        return work.iter().map(one).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::invalid(e.to_string()))?;
    pool.install(|| work.par_iter().map(one).collect())
}

/// What a training directory holds: the settings, the dataset it was
/// trained on and the folds, so evaluation can rebuild every split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub config_hash: String,
    pub dataset_hash: String,
    pub experiment: ExperimentConfig,
    pub topologies: Vec<Topology>,
    pub folds: Vec<Fold>,
}

impl Plan {
    pub const FILE: &'static str = "plan.json";

    pub fn new(
        experiment: ExperimentConfig,
        dataset_hash: &str,
        topologies: Vec<Topology>,
        folds: Vec<Fold>,
    ) -> Self {
        Plan {
            config_hash: experiment.hash(),
            dataset_hash: dataset_hash.to_string(),
            experiment,
            topologies,
            folds,
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(Self::FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let plan: Plan =
            serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        if plan.experiment.hash() != plan.config_hash {
            return Err(Error::format(
                &path,
                "config hash does not match the stored configuration",
            ));
        }
        Ok(plan)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(Self::FILE);
        let text =
            serde_json::to_string_pretty(self).map_err(|e| Error::format(&path, e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Combine with the plan already in an output directory. Resuming is
    /// only allowed with the same settings, data and folds; new topologies
    /// are added.
    pub fn merge_existing(mut self, dir: &Path) -> Result<Self> {
        if !dir.join(Self::FILE).exists() {
            return Ok(self);
        }
        let old = Plan::load(dir)?;
        if old.config_hash != self.config_hash
            || old.dataset_hash != self.dataset_hash
            || old.folds != self.folds
        {
            return Err(Error::invalid(format!(
                "{} was trained with a different configuration or dataset (config {} vs {}); use a fresh output directory",
                dir.display(),
                old.config_hash,
                self.config_hash
            )));
        }
        let mut all = old.topologies;
        all.extend(
            self.topologies
                .iter()
                .copied()
                .filter(|t| !all.contains(t))
                .collect::<Vec<_>>(),
        );
        all.sort_by_key(|t| Topology::ALL.iter().position(|x| x == t));
        self.topologies = all;
        Ok(self)
    }
}
