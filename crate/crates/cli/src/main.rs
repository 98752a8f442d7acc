mod config;
mod errors;
mod ikcmd;
mod rewardcmd;
mod simcmd;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "orkit",
    version,
    about = "Object-motion rewards, fingertip retargeting, and residual policy training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Trajectory-matching rewards from robot and human track files.
    Reward(rewardcmd::RewardArgs),
    /// Optimal-transport rewards from tracks or feature series.
    OtReward(rewardcmd::OtRewardArgs),
    /// Solve end-effector targets on a kinematic chain.
    Ik(ikcmd::IkArgs),
    /// Train a residual policy in the planar simulator.
    TrainSim(simcmd::TrainArgs),
    /// Evaluate a checkpoint over randomized object start poses.
    Eval(simcmd::EvalArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Reward(args) => rewardcmd::run_reward(args),
        Command::OtReward(args) => rewardcmd::run_ot_reward(args),
        Command::Ik(args) => ikcmd::run_ik(args),
        Command::TrainSim(args) => simcmd::run_train(args),
        Command::Eval(args) => simcmd::run_eval(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
