//! `archdistill`: search a compressed architecture, then check it by distillation.

mod commands;
mod failure;
mod report;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "archdistill", version, about = "GA-guided compression of encoder classifiers")]
struct Cli {
    /// Directory for every artifact and for report.json.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Worker threads for matrix products.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..=64))]
    threads: u32,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parameter count, stored size and forward FLOPs of one architecture.
    Estimate(EstimateArgs),
    /// Genetic search for the highest-FLOPs architecture near a size budget.
    Search(SearchArgs),
    /// Write the synthetic corpus splits.
    Generate(GenerateArgs),
    /// Train the teacher on the labeled split.
    Teach(TeachArgs),
    /// Record teacher logits over the unlabeled split.
    Capture(CaptureArgs),
    /// Train the searched student on the captured logits.
    Distill(DistillArgs),
    /// Per-example forward latency of teacher and student.
    Bench(BenchArgs),
    /// Summarize report.json.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SpaceArg {
    Table1,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    /// ArchConfig JSON file.
    #[arg(long, conflicts_with = "reference", required_unless_present = "reference")]
    config: Option<PathBuf>,
    /// Use the 12-layer, 768-wide pretrained reference instead of a file.
    #[arg(long)]
    reference: bool,
    /// Tokens per forward pass; defaults to min(400, max_seq_len).
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long, default_value_t = 4)]
    bytes_per_param: u64,
    /// Also require the config to lie on this search grid.
    #[arg(long, value_enum)]
    space: Option<SpaceArg>,
}

#[derive(Debug, Args)]
struct SearchArgs {
    /// Flat JSON of GA parameters; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Size budget in MB.
    #[arg(long, allow_negative_numbers = true, conflicts_with = "teacher_fraction")]
    target_mb: Option<f64>,
    /// Budget as a fraction of the size of <out>/teacher.ckpt.
    #[arg(long, allow_negative_numbers = true)]
    teacher_fraction: Option<f64>,
    #[arg(long)]
    population: Option<usize>,
    #[arg(long)]
    crossover_rate: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    child_size: Option<usize>,
    /// Sequence length for the FLOPs term of the fitness.
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_seq_len: Option<usize>,
    #[arg(long)]
    num_classes: Option<usize>,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// Flat JSON corpus spec; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    labeled: Option<usize>,
    #[arg(long)]
    unlabeled: Option<usize>,
    #[arg(long)]
    validation: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
}

#[derive(Debug, Args)]
struct TeachArgs {
    /// Teacher ArchConfig JSON; defaults to 4 layers, hidden 128, 4 heads, FFN 512 over the corpus vocabulary.
    #[arg(long)]
    arch: Option<PathBuf>,
    /// Flat JSON of training parameters; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct CaptureArgs {
    /// Abort on the first sequence the teacher cannot read instead of skipping it.
    #[arg(long)]
    strict: bool,
}

#[derive(Debug, Args)]
struct DistillArgs {
    /// Student ArchConfig JSON; defaults to <out>/arch.json from `search`.
    #[arg(long)]
    arch: Option<PathBuf>,
    /// Flat JSON of distillation parameters; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long)]
    student: Option<PathBuf>,
    /// JSONL examples to sample from; defaults to <out>/test.jsonl.
    #[arg(long)]
    examples: Option<PathBuf>,
    /// Examples per repeat.
    #[arg(short = 'n', long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    /// Untimed passes over the sample before measuring.
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    /// Truncate every sampled sequence to this many tokens.
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Print the raw JSON instead of a summary.
    #[arg(long)]
    json: bool,
}

fn main() {
    let cli = Cli::parse();
    // matrixmultiply reads this once, on the first product
    std::env::set_var("MATMUL_NUM_THREADS", cli.threads.to_string());
    let result = commands::run(&cli);
    match result {
        Ok(()) => std::process::exit(failure::EXIT_OK),
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(failure::exit_code(&err));
        }
    }
}
