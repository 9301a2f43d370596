//! End-to-end runs: data generation, teacher, student variants, evaluation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::eval::{evaluate, EvalReport, Evaluation, ModelSegmenter, Protocol};
use crate::model::{Checkpoint, Model, ModelConfig};
use crate::trainer::{train_student, train_teacher, variant_factory, Strategy, StudentOutput, TrainContext, TrainLog};
use crate::world::Dataset;

pub struct Experiment {
    pub config: ExperimentConfig,
    pub dataset: Dataset,
    model_config: ModelConfig,
}

impl Experiment {
    pub fn new(config: ExperimentConfig, dataset: Dataset) -> Self {
        let mut model_config = config.model.clone();
        model_config.embed_dim = dataset.embeddings.dim();
        Self { config, dataset, model_config }
    }

    pub fn generate(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let dataset = Dataset::generate(&config.data)?;
        Ok(Self::new(config, dataset))
    }

    pub fn context(&self) -> TrainContext<'_> {
        TrainContext { data: &self.dataset, model: &self.model_config, proposals: &self.config.proposals, loss: &self.config.loss }
    }

    pub fn train_teacher(&self, log: &mut dyn TrainLog) -> Result<Checkpoint> {
        train_teacher(&self.config.teacher, &self.context(), None, log)
    }

    pub fn train_variant(&self, teacher: &Model, strategy: Strategy, log: &mut dyn TrainLog) -> Result<StudentOutput> {
        train_student(&variant_factory(strategy, &self.config.student), teacher, &self.context(), None, log)
    }

    pub fn segmenter<'a>(&'a self, model: &'a Model) -> ModelSegmenter<'a> {
        ModelSegmenter { model, table: &self.dataset.embeddings, proposals: self.config.proposals.clone(), config: self.config.inference.clone() }
    }

    pub fn evaluate(&self, model: &Model, protocol: Protocol) -> Result<Evaluation> {
        evaluate(&self.segmenter(model), &self.dataset.test, &self.dataset.vocab, protocol, self.config.inference.iou_threshold)
    }

    /// Reports for every protocol whose test subset is nonempty.
    pub fn evaluate_all(&self, model: &Model) -> Result<BTreeMap<Protocol, EvalReport>> {
        let mut out = BTreeMap::new();
        for p in Protocol::ALL {
            if self.dataset.test.iter().any(|s| s.subset == p.subset()) {
                out.insert(p, self.evaluate(model, p)?.report);
            }
        }
        Ok(out)
    }

    /// Trains every strategy from one teacher and evaluates each result.
    pub fn ablate(&self, teacher: &Model, strategies: &[Strategy]) -> Result<Vec<AblationRow>> {
        strategies
            .iter()
            .map(|&s| {
                let out = self.train_variant(teacher, s, &mut crate::trainer::NoLog)?;
                let reports = self.evaluate_all(&out.checkpoint.model)?;
                Ok(AblationRow::new(s, out.eta, &reports))
            })
            .collect()
    }
}

/// One strategy's headline numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub strategy: Strategy,
    pub eta: f64,
    pub generalized_target: Option<f64>,
    pub generalized_base: Option<f64>,
    pub generalized_all: Option<f64>,
    pub constrained_base: Option<f64>,
    pub constrained_target: Option<f64>,
}

impl AblationRow {
    pub fn new(strategy: Strategy, eta: f64, reports: &BTreeMap<Protocol, EvalReport>) -> Self {
        let get = |p: Protocol| reports.get(&p);
        Self {
            strategy,
            eta,
            generalized_target: get(Protocol::Generalized).and_then(|r| r.map_target),
            generalized_base: get(Protocol::Generalized).and_then(|r| r.map_base),
            generalized_all: get(Protocol::Generalized).and_then(|r| r.map_all),
            constrained_base: get(Protocol::ConstrainedBase).and_then(|r| r.map_base),
            constrained_target: get(Protocol::ConstrainedTarget).and_then(|r| r.map_target),
        }
    }

    pub const CSV_HEADER: &'static str = "strategy,eta,generalized_target,generalized_base,generalized_all,constrained_base,constrained_target";

    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.strategy.name(),
            self.eta,
            f(self.generalized_target),
            f(self.generalized_base),
            f(self.generalized_all),
            f(self.constrained_base),
            f(self.constrained_target)
        )
    }
}
