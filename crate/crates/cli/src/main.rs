//! Entry point for the `v2x` binary: a desk-scale workbench for
//! cooperative LiDAR and 4D radar perception experiments.

use clap::Parser;
use v2x_cli::commands;

#[derive(Debug, Parser)]
#[command(
    name = "v2x",
    version,
    about = "Cooperative LiDAR + 4D radar perception workbench",
    long_about = "Generates driving scenarios, renders multi-agent LiDAR and radar frames, \
corrupts them under fog or snow, trains the BEV fusion pipeline with feature denoising, \
and evaluates detection quality and communication cost."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Subcommand)]
enum Command {
    /// Generate procedural scenarios and the train/test split.
    Scenegen(commands::ScenegenArgs),
    /// Render LiDAR and radar frames for every scenario.
    Sense(commands::SenseArgs),
    /// Re-render a dataset's LiDAR under fog or snow.
    Corrupt(commands::CorruptArgs),
    /// Train the fusion pipeline and detection head.
    Train(commands::TrainArgs),
    /// Score a trained model across weather domains.
    Eval(commands::EvalArgs),
    /// Radar occupancy statistics, ego-only vs cooperative.
    Stats(commands::StatsArgs),
    /// Per-frame communication cost tables.
    CommReport(commands::CommReportArgs),
    /// Re-render a report CSV as charts.
    Plot(commands::PlotArgs),
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Scenegen(args) => commands::scenegen(&args),
        Command::Sense(args) => commands::sense(&args),
        Command::Corrupt(args) => commands::corrupt(&args),
        Command::Train(args) => commands::train_cmd(&args),
        Command::Eval(args) => commands::eval_cmd(&args),
        Command::Stats(args) => commands::stats_cmd(&args),
        Command::CommReport(args) => commands::comm_report_cmd(&args),
        Command::Plot(args) => commands::plot_cmd(&args),
    }
}
