use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "difflens", version, about = "Instance difficulty analytics over exported DNN embeddings")]
pub struct Cli {
    /// More log output on stderr (-v info, -vv debug)
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a bundle and list every violation
    Validate {
        /// Bundle directory
        bundle: PathBuf,
        /// Print the report as JSON
        #[arg(long)]
        json: bool,
    },
    /// Synthetic bundle tools
    Synth {
        #[command(subcommand)]
        command: SynthCommand,
    },
    /// Compute difficulty profiles and print a summary
    Compute {
        /// Bundle directory
        bundle: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Write the profiles CSV here
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
        /// Print the summary as JSON
        #[arg(long)]
        json: bool,
    },
    /// Serve the HTTP API
    Serve {
        /// Bundle directory
        bundle: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8642)]
        port: u16,
        /// Compute profiles with the given config before accepting requests
        #[arg(long)]
        precompute: bool,
        /// Subset store to load and save [default: <bundle>/subsets.json]
        #[arg(long, value_name = "FILE")]
        subsets: Option<PathBuf>,
    },
    /// Export profiles, flow, projection or parallel-coordinate data
    Export {
        /// Bundle directory
        bundle: PathBuf,
        #[arg(long, value_enum)]
        what: ExportKind,
        /// Restrict to a subset: an id-list CSV, or STORE.json#ID for a saved subset
        #[arg(long, value_name = "FILE")]
        subset: Option<String>,
        /// Projection source: pixel, pattern, or layer:<name>
        #[arg(long, default_value = "pattern")]
        source: String,
        #[command(flatten)]
        config: ConfigArgs,
        /// Output file [default: stdout]
        #[arg(short, long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum SynthCommand {
    /// Generate a bundle (plus expectations.json) from a JSON spec
    Gen {
        /// Generator spec (JSON)
        spec: PathBuf,
        #[arg(short, long, value_name = "DIR")]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExportKind {
    Profiles,
    Flow,
    Projection,
    Pcp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ThresholdModeArg {
    Fixed,
    Quantile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReferenceArg {
    GroundTruth,
    FinalPrediction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

/// Analysis settings. Flags override values from `--config`.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// JSON analysis config to start from
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Neighbors per probe [default: 10]
    #[arg(long)]
    pub k: Option<usize>,
    /// Use exact k-NN instead of the random-projection forest
    #[arg(long)]
    pub exact: bool,
    /// Trees in the forest [default: 16]
    #[arg(long)]
    pub trees: Option<usize>,
    /// Maximum rows per forest leaf [default: 32]
    #[arg(long)]
    pub leaf_size: Option<usize>,
    /// Forest seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// How low/high difficulty is decided [default: fixed]
    #[arg(long, value_enum)]
    pub threshold_mode: Option<ThresholdModeArg>,
    /// Fixed threshold for data difficulty [default: 0.5]
    #[arg(long)]
    pub data_threshold: Option<f64>,
    /// Fixed threshold for model difficulty [default: 0.5]
    #[arg(long)]
    pub model_threshold: Option<f64>,
    /// Fixed threshold for human difficulty [default: 0.5]
    #[arg(long)]
    pub human_threshold: Option<f64>,
    /// Quantile used in quantile mode [default: 0.7]
    #[arg(long)]
    pub quantile: Option<f64>,
    /// Reference label for data kDN [default: ground-truth]
    #[arg(long, value_enum)]
    pub data_reference: Option<ReferenceArg>,
    /// Reference label for per-layer kDN [default: final-prediction]
    #[arg(long, value_enum)]
    pub layer_reference: Option<ReferenceArg>,
    /// Splits to profile, comma separated [default: test]
    #[arg(long, value_enum, value_delimiter = ',')]
    pub splits: Option<Vec<SplitArg>>,
    /// Z-score embedding columns before indexing
    #[arg(long)]
    pub standardize: bool,
    /// Directory for cached forests
    #[arg(long, env = "DIFFLENS_CACHE_DIR", value_name = "DIR")]
    pub cache_dir: Option<PathBuf>,
}
