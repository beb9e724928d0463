use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::metrics::{
    f1_score, mean_std, write_records, write_summary, CsvError, EpochRecord, F1Average, TelemetryRecord,
};
use crate::graph::{make_folds_with, Fold, FoldOptions, Graph, GraphError};
use crate::layers::AttentionKind;
use crate::model::{
    derive_seed, save_checkpoint, CcagnnModel, MiMode, ModelConfig, ModelError, NodeClassifier, PlainGat, StepContext,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("fold {fold}, epoch {epoch}: {source}")]
    Step {
        fold: usize,
        epoch: usize,
        #[source]
        source: ModelError,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: std::path::PathBuf,
        #[source]
        source: CsvError,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Full,
    BasicMi,
    NoLearnedGate,
    NoCustomLoss,
    Gatv1,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 5] = [
        AblationVariant::Full,
        AblationVariant::BasicMi,
        AblationVariant::NoLearnedGate,
        AblationVariant::NoCustomLoss,
        AblationVariant::Gatv1,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::BasicMi => "basic_mi",
            AblationVariant::NoLearnedGate => "no_learned_gate",
            AblationVariant::NoCustomLoss => "no_custom_loss",
            AblationVariant::Gatv1 => "gatv1",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    /// The variant's modifications to a model configuration.
    pub fn apply(self, cfg: &mut ModelConfig) {
        match self {
            AblationVariant::Full => {}
            AblationVariant::BasicMi => cfg.mi_mode = MiMode::Basic,
            AblationVariant::NoLearnedGate => cfg.fixed_gate = Some(0.5),
            AblationVariant::NoCustomLoss => {
                cfg.weights.contrastive = 0.0;
                cfg.weights.center = 0.0;
                cfg.weights.adaptive = 0.0;
            }
            AblationVariant::Gatv1 => cfg.attention = AttentionKind::Gat,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Ccagnn,
    PlainGat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub patience: usize,
    pub adam: AdamConfig,
    pub folds: usize,
    pub val_fraction: f64,
    pub allow_unstratified: bool,
    pub seed: u64,
    pub jobs: usize,
    pub average: F1Average,
    pub kind: ModelKind,
    pub variant: AblationVariant,
    /// Template; input width and class count are taken from the graph.
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            patience: 5,
            adam: AdamConfig::default(),
            folds: 5,
            val_fraction: 0.2,
            allow_unstratified: false,
            seed: 0,
            jobs: 1,
            average: F1Average::Macro,
            kind: ModelKind::Ccagnn,
            variant: AblationVariant::Full,
            model: ModelConfig::new(1, 2),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::Invalid("epochs must be positive".into()));
        }
        if self.patience == 0 {
            return Err(TrainError::Invalid("patience must be positive".into()));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(TrainError::Invalid(format!("learning rate {} must be positive", self.adam.lr)));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) || self.adam.eps <= 0.0 {
            return Err(TrainError::Invalid("Adam betas must lie in [0, 1) and eps must be positive".into()));
        }
        if self.folds < 2 {
            return Err(TrainError::Invalid("need at least 2 folds".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(TrainError::Invalid(format!("val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        if self.jobs == 0 {
            return Err(TrainError::Invalid("jobs must be positive".into()));
        }
        Ok(())
    }

    /// Model configuration for `g` and fold `fold`, with the variant applied.
    pub fn model_config(&self, g: &Graph, fold: usize) -> ModelConfig {
        let mut cfg = self.model.clone();
        cfg.in_dim = g.num_features();
        cfg.num_classes = g.num_classes();
        cfg.seed = derive_seed(self.seed, 0xF01D, fold as u64);
        self.variant.apply(&mut cfg);
        cfg
    }

    pub fn build_model(&self, g: &Graph, fold: usize) -> Result<Box<dyn NodeClassifier>, ModelError> {
        let cfg = self.model_config(g, fold);
        Ok(match self.kind {
            ModelKind::Ccagnn => Box::new(CcagnnModel::new(cfg)?),
            ModelKind::PlainGat => Box::new(PlainGat::new(cfg)?),
        })
    }
}

pub struct FoldResult {
    pub fold: usize,
    pub records: Vec<EpochRecord>,
    pub telemetry: Vec<TelemetryRecord>,
    pub test_f1: f64,
    /// 1-based epoch whose parameters were restored.
    pub best_epoch: usize,
    pub best_val_f1: f64,
    pub model: Box<dyn NodeClassifier>,
    pub seconds: f64,
}

fn predictions(model: &dyn NodeClassifier, g: &Graph) -> Result<Vec<usize>, ModelError> {
    Ok(model.logits(g)?.argmax_rows())
}

fn score(pred: &[usize], g: &Graph, nodes: &[usize], average: F1Average) -> Result<f64, ModelError> {
    if nodes.is_empty() {
        return Ok(0.0);
    }
    let p: Vec<usize> = nodes.iter().map(|&i| pred[i]).collect();
    let y: Vec<usize> = nodes.iter().map(|&i| g.labels()[i]).collect();
    Ok(f1_score(&p, &y, g.num_classes(), average)?)
}

fn with_loops(g: &Graph) -> Graph {
    if g.has_self_loops() {
        g.clone()
    } else {
        g.add_self_loops()
    }
}

/// Trains one fold. Only the labels of `fold.train` enter the loss; validation
/// labels drive early stopping; `test_graph` (default `g`) labels are read once
/// after the best parameters are restored.
pub fn train_fold(
    g: &Graph,
    test_graph: Option<&Graph>,
    fold: &Fold,
    fold_index: usize,
    cfg: &TrainConfig,
) -> Result<FoldResult, TrainError> {
    cfg.validate()?;
    let start = Instant::now();
    let g = with_loops(g);
    let n = g.num_nodes();
    if let Some(&bad) = fold.train.iter().chain(&fold.val).chain(&fold.test).find(|&&i| i >= n) {
        return Err(TrainError::Invalid(format!("fold index {bad} out of range for {n} nodes")));
    }
    let mut known = vec![None; n];
    for &i in &fold.train {
        known[i] = Some(g.labels()[i]);
    }
    let mut model = cfg.build_model(&g, fold_index)?;
    model.prepare(&g, &known)?;
    let mut adam = Adam::new(cfg.adam, model.params());

    let mut records = Vec::with_capacity(cfg.epochs);
    let mut telemetry = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    let mut stale = 0;
    for epoch in 0..cfg.epochs {
        let ctx = StepContext { epoch, epochs: cfg.epochs, known: &known, train_nodes: &fold.train };
        let step_err = |source| TrainError::Step { fold: fold_index, epoch: epoch + 1, source };
        let stats = model.train_step(&g, &ctx).map_err(step_err)?;
        adam.step(model.params_mut()).map_err(|e| step_err(e.into()))?;
        let pred = predictions(model.as_ref(), &g).map_err(step_err)?;
        let train_f1 = score(&pred, &g, &fold.train, cfg.average)?;
        let val_f1 = score(&pred, &g, &fold.val, cfg.average)?;
        records.push(EpochRecord::new(fold_index, epoch + 1, &stats.losses, train_f1, val_f1));
        telemetry.push(TelemetryRecord {
            fold: fold_index,
            epoch: epoch + 1,
            gate_mean: stats.gate_mean,
            alpha_mean: stats.alpha_mean,
            alpha_int: stats.alpha_int,
            ramp: stats.ramp,
            adaptive: stats.losses.adaptive,
        });
        // Ties move the checkpoint forward but do not reset patience.
        let best_f1 = best.as_ref().map_or(f64::NEG_INFINITY, |b| b.0);
        if val_f1 >= best_f1 {
            best = Some((val_f1, epoch + 1, model.params().flatten()));
        }
        if val_f1 > best_f1 {
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (best_val_f1, best_epoch, params) = best.expect("at least one epoch ran");
    model.params_mut().load_flat(&params);

    let test_g = test_graph.map(with_loops);
    let eval_g = test_g.as_ref().unwrap_or(&g);
    if eval_g.num_nodes() != n {
        return Err(TrainError::Invalid(format!("test graph has {} nodes, training graph {n}", eval_g.num_nodes())));
    }
    let pred = predictions(model.as_ref(), eval_g)?;
    let test_f1 = score(&pred, eval_g, &fold.test, cfg.average)?;
    Ok(FoldResult {
        fold: fold_index,
        records,
        telemetry,
        test_f1,
        best_epoch,
        best_val_f1,
        model,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub struct CvResult {
    pub folds: Vec<FoldResult>,
    pub mean: f64,
    pub std: f64,
}

impl CvResult {
    pub fn test_scores(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.test_f1).collect()
    }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool, TrainError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| TrainError::Invalid(format!("thread pool: {e}")))
}

/// Stratified k-fold cross-validation. Folds run in parallel up to `cfg.jobs`.
pub fn cross_validate(g: &Graph, test_graph: Option<&Graph>, cfg: &TrainConfig) -> Result<CvResult, TrainError> {
    cfg.validate()?;
    let plan = make_folds_with(
        g,
        &FoldOptions {
            k: cfg.folds,
            val_fraction: cfg.val_fraction,
            seed: cfg.seed,
            allow_unstratified: cfg.allow_unstratified,
        },
    )?;
    let folds: Vec<FoldResult> = pool(cfg.jobs)?.install(|| {
        plan.folds
            .par_iter()
            .enumerate()
            .map(|(k, fold)| train_fold(g, test_graph, fold, k, cfg))
            .collect::<Result<_, _>>()
    })?;
    let (mean, std) = mean_std(&folds.iter().map(|f| f.test_f1).collect::<Vec<_>>());
    Ok(CvResult { folds, mean, std })
}

/// Cross-validates each variant in turn.
pub fn run_ablation(
    g: &Graph,
    test_graph: Option<&Graph>,
    variants: &[AblationVariant],
    cfg: &TrainConfig,
) -> Result<Vec<(AblationVariant, CvResult)>, TrainError> {
    variants
        .iter()
        .map(|&v| {
            let run = TrainConfig { variant: v, kind: ModelKind::Ccagnn, ..cfg.clone() };
            Ok((v, cross_validate(g, test_graph, &run)?))
        })
        .collect()
}

fn create(path: &Path) -> Result<BufWriter<File>, TrainError> {
    File::create(path).map(BufWriter::new).map_err(|source| TrainError::Io { path: path.to_path_buf(), source })
}

/// Writes `metrics.csv`, `telemetry.csv`, `summary.csv` and one checkpoint
/// directory per fold into `out`.
pub fn write_run(out: &Path, cv: &CvResult) -> Result<(), TrainError> {
    std::fs::create_dir_all(out).map_err(|source| TrainError::Io { path: out.to_path_buf(), source })?;
    let csv_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| TrainError::Csv { path, source }
    };
    let metrics: Vec<EpochRecord> = cv.folds.iter().flat_map(|f| f.records.iter().cloned()).collect();
    let path = out.join("metrics.csv");
    write_records(create(&path)?, &metrics).map_err(csv_err(&path))?;
    let telemetry: Vec<TelemetryRecord> = cv.folds.iter().flat_map(|f| f.telemetry.iter().cloned()).collect();
    let path = out.join("telemetry.csv");
    write_records(create(&path)?, &telemetry).map_err(csv_err(&path))?;
    let path = out.join("summary.csv");
    let rows: Vec<(usize, f64, usize)> = cv.folds.iter().map(|f| (f.fold, f.test_f1, f.best_epoch)).collect();
    write_summary(create(&path)?, &rows).map_err(csv_err(&path))?;
    for f in &cv.folds {
        save_checkpoint(&out.join(format!("checkpoints/fold_{}", f.fold)), f.model.as_ref())?;
    }
    Ok(())
}
