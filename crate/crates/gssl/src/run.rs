//! End-to-end runs on the synthetic benchmark: data, pretraining, the
//! consistency curriculum and evaluation.

use std::collections::BTreeMap;
use std::path::Path;

use gssl_core::metrics::{PixelRecord, SweepSummary};
use gssl_core::model::ModelState;
use gssl_core::synth::{generate_domain, Dataset};
use gssl_core::train::{evaluate_records, pretrain, train_from, Ablation, LogEntry, TrainOutput};

use crate::config::{BenchmarkConfig, RunConfig};
use crate::dataset::load_dataset;
use crate::error::{IoError, Result};
use crate::report::Summary;

/// Generates a benchmark domain. Training splits other than the source
/// carry no labels.
pub fn generate(cfg: &BenchmarkConfig, name: &str) -> Result<Dataset> {
    let spec = cfg
        .domain(name)
        .ok_or_else(|| IoError::Invalid(format!("unknown domain `{name}`")))?;
    let mut data = generate_domain(&spec)?;
    if !BenchmarkConfig::is_labelled(name) {
        data.labels = None;
    }
    Ok(data)
}

/// Reads `dir/name` when a data directory is given, else generates.
pub fn domain(cfg: &BenchmarkConfig, data_dir: Option<&Path>, name: &str) -> Result<Dataset> {
    match data_dir {
        Some(dir) => load_dataset(&dir.join(name)),
        None => generate(cfg, name),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub records: Vec<Vec<PixelRecord>>,
    pub summary: Summary,
    pub sweep: SweepSummary,
}

/// Records and metrics of `state` on a labelled dataset. The trained
/// threshold row is filled when `use_gamma` is set and the state has one.
pub fn evaluate(state: &ModelState, data: &Dataset, cfg: &RunConfig, use_gamma: bool) -> Result<Evaluation> {
    let records = evaluate_records(state, data, cfg.eval.chunk)?;
    let gamma = if use_gamma { state.gamma } else { None };
    let (summary, sweep) = Summary::new(&records, cfg.eval.beta, gamma)?;
    Ok(Evaluation {
        records,
        summary,
        sweep,
    })
}

/// Data and pretrained state shared by every run of one configuration.
pub struct Bench {
    pub cfg: RunConfig,
    pub domains: BTreeMap<String, Dataset>,
    pub pretrained: ModelState,
    pub pretrain_log: Vec<LogEntry>,
}

impl Bench {
    pub fn new(cfg: &RunConfig, data_dir: Option<&Path>) -> Result<Self> {
        cfg.validate()?;
        let mut names: Vec<&str> = vec!["a", &cfg.test];
        names.extend(cfg.curriculum.iter().map(String::as_str));
        let mut domains = BTreeMap::new();
        for name in names {
            if !domains.contains_key(name) {
                domains.insert(name.to_string(), domain(&cfg.benchmark, data_dir, name)?);
            }
        }
        let (pretrained, pretrain_log) = pretrain(&cfg.train, &domains["a"])?;
        Ok(Self {
            cfg: cfg.clone(),
            domains,
            pretrained,
            pretrain_log,
        })
    }

    /// Loads any domain not already held.
    pub fn ensure(&mut self, name: &str, data_dir: Option<&Path>) -> Result<&Dataset> {
        if !self.domains.contains_key(name) {
            let d = domain(&self.cfg.benchmark, data_dir, name)?;
            self.domains.insert(name.to_string(), d);
        }
        Ok(&self.domains[name])
    }

    /// Consistency training from the shared pretrained state. The log starts
    /// with the pretraining entries.
    pub fn run(&self, ablation: Ablation, curriculum: &[String]) -> Result<TrainOutput> {
        let mut train = self.cfg.train.clone();
        train.ablation = ablation;
        let stages = curriculum
            .iter()
            .map(|n| {
                self.domains
                    .get(n)
                    .ok_or_else(|| IoError::Invalid(format!("domain `{n}` is not loaded")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = train_from(self.pretrained.clone(), &train, &self.domains["a"], &stages)?;
        let mut log = self.pretrain_log.clone();
        log.append(&mut out.log);
        out.log = log;
        out.phase_states.insert(0, self.pretrained.clone());
        Ok(out)
    }

    pub fn evaluate(&self, state: &ModelState, test: &str, use_gamma: bool) -> Result<Evaluation> {
        let data = self
            .domains
            .get(test)
            .ok_or_else(|| IoError::Invalid(format!("domain `{test}` is not loaded")))?;
        evaluate(state, data, &self.cfg, use_gamma)
    }
}
