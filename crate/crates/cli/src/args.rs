use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ccagnn_core::graph::SyntheticSpec;
use ccagnn_core::layers::{AttentionKind, MiConfig};
use ccagnn_core::model::{AugmentationConfig, LossWeights, ModelConfig};
use ccagnn_core::train::{AblationVariant, AdamConfig, F1Average, ModelKind, TrainConfig};
use ccagnn_core::verify::Suite;

pub const SEED_ENV: &str = "CCAGNN_SEED";

/// Confounder-aware graph attention network: training, evaluation and verification.
///
/// Every subcommand accepts `--config FILE` with `key = value` lines naming
/// long flags. Flags given on the command line win over the file, and the
/// CCAGNN_SEED environment variable wins over both for `--seed`.
#[derive(Debug, Parser)]
#[command(name = "ccagnn", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cross-validate a model on a graph bundle.
    Train(TrainCmd),
    /// Score a checkpoint on one fold of a graph bundle.
    Eval(EvalCmd),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckCmd),
    /// Write a synthetic confounded train/test pair of graph bundles.
    Synth(SynthCmd),
    /// Cross-validate each ablation variant.
    Ablate(AblateCmd),
    /// Draw metrics.csv columns as an SVG line chart.
    Plot(PlotCmd),
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Text file of `key = value` lines; command-line flags take precedence.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Ccagnn,
    #[value(name = "plain_gat")]
    PlainGat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Full,
    #[value(name = "basic_mi")]
    BasicMi,
    #[value(name = "no_learned_gate")]
    NoLearnedGate,
    #[value(name = "no_custom_loss")]
    NoCustomLoss,
    Gatv1,
}

impl From<VariantArg> for AblationVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Full => AblationVariant::Full,
            VariantArg::BasicMi => AblationVariant::BasicMi,
            VariantArg::NoLearnedGate => AblationVariant::NoLearnedGate,
            VariantArg::NoCustomLoss => AblationVariant::NoCustomLoss,
            VariantArg::Gatv1 => AblationVariant::Gatv1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AverageArg {
    Macro,
    Micro,
    Weighted,
}

impl From<AverageArg> for F1Average {
    fn from(a: AverageArg) -> Self {
        match a {
            AverageArg::Macro => F1Average::Macro,
            AverageArg::Micro => F1Average::Micro,
            AverageArg::Weighted => F1Average::Weighted,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AttentionArg {
    Gatv2,
    Gat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

/// Fold construction, shared by training and evaluation.
#[derive(Debug, Args)]
pub struct FoldArgs {
    /// Number of cross-validation folds.
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Fraction of each fold's training nodes held out for early stopping.
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    /// Seed for folds and initialization (overridden by CCAGNN_SEED).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fall back to unstratified folds when a class has fewer nodes than folds.
    #[arg(long)]
    pub allow_unstratified: bool,
}

impl FoldArgs {
    /// `--seed`, unless CCAGNN_SEED is set.
    pub fn effective_seed(&self) -> Result<u64, String> {
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| format!("{SEED_ENV}={v:?} is not an unsigned integer")),
            Err(_) => Ok(self.seed),
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Graph bundle directory used for training and validation.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Bundle whose labels score the test nodes (default: --data).
    #[arg(long, value_name = "DIR")]
    pub test_data: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[command(flatten)]
    pub fold: FoldArgs,
    /// Maximum epochs per fold.
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    /// Adam learning rate.
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Epochs without validation improvement before stopping.
    #[arg(long, default_value_t = 5)]
    pub patience: usize,
    /// Worker threads for folds.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// F1 averaging for validation and test scores.
    #[arg(long, value_enum, default_value_t = AverageArg::Macro)]
    pub average: AverageArg,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub weights: WeightArgs,
    #[command(flatten)]
    pub augment: AugmentArgs,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Attention heads per encoder layer.
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    /// Width of each head.
    #[arg(long, default_value_t = 16)]
    pub head_dim: usize,
    /// Encoder depth.
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    /// Attention scoring.
    #[arg(long, value_enum, default_value_t = AttentionArg::Gatv2)]
    pub attention: AttentionArg,
    /// Width of the MI projection heads.
    #[arg(long, default_value_t = 32)]
    pub projection_dim: usize,
    /// InfoNCE temperature.
    #[arg(long, default_value_t = 0.1)]
    pub mi_temperature: f64,
    /// Capacity of the negative queue.
    #[arg(long, default_value_t = 256)]
    pub queue_size: usize,
    /// Capacity of each per-class queue.
    #[arg(long, default_value_t = 64)]
    pub class_queue_size: usize,
    /// Temperature of the contrastive, prototype and invariance terms.
    #[arg(long, default_value_t = 0.5)]
    pub contrastive_temperature: f64,
    /// Momentum of the class centers.
    #[arg(long, default_value_t = 0.9)]
    pub center_decay: f64,
    /// Rows sampled for the quadratic-cost loss terms.
    #[arg(long, default_value_t = 512)]
    pub sample_cap: usize,
}

#[derive(Debug, Args)]
pub struct WeightArgs {
    /// Weight of the causal-branch cross-entropy.
    #[arg(long, default_value_t = 0.5)]
    pub w_ce_causal: f64,
    /// Weight of the fused-branch cross-entropy.
    #[arg(long, default_value_t = 1.0)]
    pub w_ce_fusion: f64,
    /// Weight of the intervened-branch cross-entropy.
    #[arg(long, default_value_t = 0.5)]
    pub w_ce_intervention: f64,
    /// Weight of the non-causal-branch cross-entropy.
    #[arg(long, default_value_t = 0.1)]
    pub w_ce_noncausal: f64,
    /// Weight of the causal/non-causal MI penalty.
    #[arg(long, default_value_t = 0.1)]
    pub w_mi: f64,
    /// Weight of the class-conditional MI penalty.
    #[arg(long, default_value_t = 0.1)]
    pub w_cond_mi: f64,
    /// Weight of the prediction-level MI penalty.
    #[arg(long, default_value_t = 0.1)]
    pub w_pred_mi: f64,
    /// Weight of the invariance term.
    #[arg(long, default_value_t = 0.1)]
    pub w_inv_mi: f64,
    /// Weight of the orthogonality penalty.
    #[arg(long, default_value_t = 0.1)]
    pub w_orth: f64,
    /// Weight of the supervised contrastive term.
    #[arg(long, default_value_t = 0.05)]
    pub w_contrastive: f64,
    /// Weight of the class-center term.
    #[arg(long, default_value_t = 0.05)]
    pub w_center: f64,
    /// Strength of the warm-up ramp on the intervention and MI terms.
    #[arg(long, default_value_t = 1.0)]
    pub w_adaptive: f64,
    /// Weight of the gate-confidence term.
    #[arg(long, default_value_t = 0.1)]
    pub w_gate_conf: f64,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    /// Standard deviation of the attention-scaled embedding noise.
    #[arg(long, default_value_t = 0.1)]
    pub noise_scale: f64,
    /// Fraction of feature entries masked.
    #[arg(long, default_value_t = 0.1)]
    pub mask_rate: f64,
    /// Fraction of edges dropped.
    #[arg(long, default_value_t = 0.05)]
    pub edge_drop: f64,
    /// Random edges added, as a fraction of the edge count.
    #[arg(long, default_value_t = 0.05)]
    pub edge_add: f64,
    /// Disable embedding noise.
    #[arg(long)]
    pub no_noise: bool,
    /// Disable feature masking.
    #[arg(long)]
    pub no_mask: bool,
    /// Disable edge perturbation.
    #[arg(long)]
    pub no_edge_aug: bool,
}

impl TrainArgs {
    /// Training configuration, before the graph fixes input width and classes.
    pub fn train_config(
        &self,
        kind: ModelKind,
        variant: AblationVariant,
    ) -> Result<TrainConfig, String> {
        let m = &self.model;
        let w = &self.weights;
        let a = &self.augment;
        let seed = self.fold.effective_seed()?;
        let model = ModelConfig {
            heads: m.heads,
            head_dim: m.head_dim,
            encoder_layers: m.layers,
            attention: match m.attention {
                AttentionArg::Gatv2 => AttentionKind::GatV2,
                AttentionArg::Gat => AttentionKind::Gat,
            },
            mi: MiConfig {
                projection_dim: m.projection_dim,
                temperature: m.mi_temperature,
                queue_capacity: m.queue_size,
                class_queue_capacity: m.class_queue_size,
            },
            contrastive_temperature: m.contrastive_temperature,
            center_decay: m.center_decay,
            sample_cap: m.sample_cap,
            weights: LossWeights {
                ce_causal: w.w_ce_causal,
                ce_fusion: w.w_ce_fusion,
                ce_intervention: w.w_ce_intervention,
                ce_noncausal: w.w_ce_noncausal,
                mi: w.w_mi,
                cond_mi: w.w_cond_mi,
                pred_mi: w.w_pred_mi,
                inv_mi: w.w_inv_mi,
                orth: w.w_orth,
                contrastive: w.w_contrastive,
                center: w.w_center,
                adaptive: w.w_adaptive,
                gate_conf: w.w_gate_conf,
            },
            augment: AugmentationConfig {
                noise_scale: a.noise_scale,
                mask_rate: a.mask_rate,
                edge_drop_rate: a.edge_drop,
                edge_add_rate: a.edge_add,
                noise: !a.no_noise,
                mask: !a.no_mask,
                edges: !a.no_edge_aug,
                seed: 0,
            },
            ..ModelConfig::new(1, 2)
        };
        let cfg = TrainConfig {
            epochs: self.epochs,
            patience: self.patience,
            adam: AdamConfig {
                lr: self.lr,
                ..AdamConfig::default()
            },
            folds: self.fold.folds,
            val_fraction: self.fold.val_fraction,
            allow_unstratified: self.fold.allow_unstratified,
            seed,
            jobs: self.jobs,
            average: self.average.into(),
            kind,
            variant,
            model,
        };
        cfg.validate().map_err(|e| e.to_string())?;
        let mut probe = cfg.model.clone();
        variant.apply(&mut probe);
        probe.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainCmd {
    #[command(flatten)]
    pub config: ConfigArg,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Model family.
    #[arg(long = "model", value_enum, default_value_t = ModelArg::Ccagnn)]
    pub kind: ModelArg,
    /// Ablation variant applied to the CCAGNN configuration.
    #[arg(long, value_enum, default_value_t = VariantArg::Full)]
    pub variant: VariantArg,
}

#[derive(Debug, Args)]
pub struct EvalCmd {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Checkpoint directory written by `train`.
    #[arg(long, value_name = "DIR")]
    pub checkpoint: PathBuf,
    /// Graph bundle to score.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Bundle the folds are drawn from (default: --data).
    #[arg(long, value_name = "DIR")]
    pub fold_data: Option<PathBuf>,
    #[command(flatten)]
    pub fold: FoldArgs,
    /// Fold whose nodes are scored.
    #[arg(long = "fold-index", default_value_t = 0)]
    pub fold_index: usize,
    /// Node subset of the fold to score.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// F1 averaging for the headline score.
    #[arg(long, value_enum, default_value_t = AverageArg::Macro)]
    pub average: AverageArg,
    /// Predictions CSV.
    #[arg(long, value_name = "FILE", default_value = "predictions.csv")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SuiteArg {
    Primitives,
    Layers,
    Model,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Self {
        match s {
            SuiteArg::Primitives => Suite::Primitives,
            SuiteArg::Layers => Suite::Layers,
            SuiteArg::Model => Suite::Model,
        }
    }
}

#[derive(Debug, Args)]
pub struct GradcheckCmd {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Suites to run; repeat the flag for several (default: all).
    #[arg(long, value_enum)]
    pub suite: Vec<SuiteArg>,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = ccagnn_core::verify::DEFAULT_TOLERANCE)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct SynthCmd {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Output directory; receives train/, test/ and groundtruth.json.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Nodes per view.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Width of the causal feature block.
    #[arg(long, default_value_t = 8)]
    pub d_causal: usize,
    /// Width of the spurious feature block.
    #[arg(long, default_value_t = 8)]
    pub d_spurious: usize,
    /// Number of classes.
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    /// Probability that the confounder equals the label in the train view.
    #[arg(long, default_value_t = 0.95)]
    pub rho_train: f64,
    /// Probability that the confounder equals the label in the test view.
    #[arg(long, default_value_t = 0.05)]
    pub rho_test: f64,
    /// Edge probability within a class.
    #[arg(long, default_value_t = 0.02)]
    pub p_in: f64,
    /// Edge probability across classes.
    #[arg(long, default_value_t = 0.002)]
    pub p_out: f64,
    /// Scale of the per-class causal means.
    #[arg(long, default_value_t = 1.0)]
    pub causal_separation: f64,
    /// Scale of the per-confounder spurious means.
    #[arg(long, default_value_t = 1.0)]
    pub spurious_separation: f64,
    /// Generator seed (overridden by CCAGNN_SEED).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl SynthCmd {
    pub fn spec(&self) -> Result<SyntheticSpec, String> {
        let seed = match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| format!("{SEED_ENV}={v:?} is not an unsigned integer"))?,
            Err(_) => self.seed,
        };
        let spec = SyntheticSpec {
            n: self.n,
            d_causal: self.d_causal,
            d_spurious: self.d_spurious,
            num_classes: self.classes,
            rho_train: self.rho_train,
            rho_test: self.rho_test,
            p_in: self.p_in,
            p_out: self.p_out,
            causal_separation: self.causal_separation,
            spurious_separation: self.spurious_separation,
            seed,
        };
        spec.validate().map_err(|e| e.to_string())?;
        Ok(spec)
    }
}

#[derive(Debug, Args)]
pub struct AblateCmd {
    #[command(flatten)]
    pub config: ConfigArg,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Variants to run, comma separated (default: all five).
    #[arg(
        long,
        value_enum,
        value_delimiter = ',',
        default_value = "full,basic_mi,no_learned_gate,no_custom_loss,gatv1"
    )]
    pub variants: Vec<VariantArg>,
}

#[derive(Debug, Args)]
pub struct PlotCmd {
    #[command(flatten)]
    pub config: ConfigArg,
    /// metrics.csv files, concatenated in order.
    #[arg(required = true, value_name = "METRICS_CSV")]
    pub metrics: Vec<PathBuf>,
    /// Column to draw; repeat for several.
    #[arg(long, default_value = "mi")]
    pub column: Vec<String>,
    /// SVG output file.
    #[arg(long, value_name = "FILE", default_value = "plot.svg")]
    pub out: PathBuf,
}
