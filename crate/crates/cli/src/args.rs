//! Command-line arguments. Every argument struct serializes so reports can
//! echo the resolved configuration.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use threshold_iv::bootstrap::Multiplier;
use threshold_iv::{FirstStageMode, TestKind, VarianceMode};

#[derive(Debug, Parser)]
#[command(name = "threshold-iv", version, about = "Threshold tests for linear models with endogenous regressors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sup tests with bootstrap critical values.
    Test(TestArgs),
    /// First-stage threshold estimates and linearity pre-tests per trim.
    FirstStage(FirstStageArgs),
    /// Per-candidate statistic sequences in long format.
    Sequence(SequenceArgs),
    /// Monte Carlo rejection frequencies.
    Simulate(SimulateArgs),
    /// Write one simulated dataset as CSV.
    Generate(GenerateArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    /// CSV file with a header row.
    #[arg(long)]
    pub input: PathBuf,
    /// Dependent variable.
    #[arg(long)]
    pub y: String,
    /// Endogenous regressors.
    #[arg(long, value_delimiter = ',', required = true)]
    pub x: Vec<String>,
    /// Included exogenous regressors, in addition to the intercept.
    #[arg(long, value_delimiter = ',')]
    pub z1: Vec<String>,
    /// Excluded instruments.
    #[arg(long, value_delimiter = ',', required = true)]
    pub z: Vec<String>,
    /// Threshold variable.
    #[arg(long)]
    pub q: String,
    /// Leave the intercept out of the included regressors.
    #[arg(long)]
    pub no_intercept: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MultiplierArg {
    Normal,
    Rademacher,
    Mammen,
    Iid,
}

impl From<MultiplierArg> for Multiplier {
    fn from(m: MultiplierArg) -> Self {
        match m {
            MultiplierArg::Normal => Multiplier::StdNormal,
            MultiplierArg::Rademacher => Multiplier::Rademacher,
            MultiplierArg::Mammen => Multiplier::Mammen,
            MultiplierArg::Iid => Multiplier::IidGaussian,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceArg {
    Robust,
    Homoskedastic,
}

impl From<VarianceArg> for VarianceMode {
    fn from(v: VarianceArg) -> Self {
        match v {
            VarianceArg::Robust => VarianceMode::Robust,
            VarianceArg::Homoskedastic => VarianceMode::Homoskedastic,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BootArgs {
    /// Bootstrap replicates.
    #[arg(long, default_value_t = 500)]
    pub boot: usize,
    /// Test level.
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, value_enum, default_value_t = MultiplierArg::Normal)]
    pub multiplier: MultiplierArg,
    /// Root seed of the bootstrap streams.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = VarianceArg::Robust)]
    pub variance: VarianceArg,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GridArgs {
    /// Share of the threshold variable trimmed from each tail.
    #[arg(long, default_value_t = 0.15)]
    pub trim: f64,
    /// Trim of the first-stage grid; defaults to `--trim`.
    #[arg(long)]
    pub fs_trim: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FirstStageArg {
    Linear,
    Threshold,
    /// Threshold first stage iff the OLS LR linearity test rejects.
    Pretest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestArg {
    GmmCh,
    GmmMix,
    GmmBr,
    Lr,
    Wald,
}

impl TestArg {
    pub fn kind(self, fs: FirstStageMode) -> TestKind {
        match self {
            TestArg::GmmCh => TestKind::GmmWaldCH,
            TestArg::GmmMix => TestKind::GmmWaldMix,
            TestArg::GmmBr => TestKind::GmmWaldBR,
            TestArg::Lr => TestKind::TslsLR(fs),
            TestArg::Wald => TestKind::TslsWald(fs),
        }
    }

    pub fn is_tsls(self) -> bool {
        matches!(self, TestArg::Lr | TestArg::Wald)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OutputArgs {
    /// Output format; JSON for reports and CSV for tables by default.
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// Write to this file instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TestArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub boot: BootArgs,
    #[arg(long, value_enum, default_value_t = FirstStageArg::Linear)]
    pub first_stage: FirstStageArg,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = vec![TestArg::GmmCh, TestArg::GmmBr, TestArg::Lr, TestArg::Wald])]
    pub tests: Vec<TestArg>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FirstStageArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Trim levels, one report row each.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.15])]
    pub trims: Vec<f64>,
    #[command(flatten)]
    pub boot: BootArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SequenceArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub grid: GridArgs,
    /// Only used by the pre-test.
    #[command(flatten)]
    pub boot: BootArgs,
    #[arg(long, value_enum, default_value_t = FirstStageArg::Linear)]
    pub first_stage: FirstStageArg,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = vec![TestArg::GmmCh, TestArg::GmmBr, TestArg::Lr, TestArg::Wald])]
    pub tests: Vec<TestArg>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DesignArgs {
    /// Sample size.
    #[arg(long, default_value_t = 250)]
    pub t: usize,
    /// Error case: a (homoskedastic, known), b (homoskedastic), c (heteroskedastic).
    #[arg(long, default_value = "b")]
    pub case: String,
    #[arg(long, default_value_t = 0.0)]
    pub delta_x: f64,
    #[arg(long, default_value_t = 0.0)]
    pub delta_pi: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    /// Run every cell of table layout 1 to 4 instead of one design.
    #[arg(long)]
    pub table: Option<usize>,
    #[command(flatten)]
    pub design: DesignArgs,
    /// Tests of the single-design run.
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = vec![TestArg::GmmBr])]
    pub tests: Vec<TestArg>,
    /// Defaults to i.i.d. residuals in case a and normal multipliers otherwise.
    #[arg(long, value_enum)]
    pub multiplier: Option<MultiplierArg>,
    #[arg(long, default_value_t = 1000)]
    pub n_sim: usize,
    #[arg(long, default_value_t = 500)]
    pub boot: usize,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.15)]
    pub trim: f64,
    /// Seed bank of the experiment.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// 300 simulations of 300 replicates.
    #[arg(long)]
    pub quick: bool,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub design: DesignArgs,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}
