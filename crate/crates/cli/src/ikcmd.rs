use std::fs;
use std::path::PathBuf;

use nalgebra::Vector3;
use serde::Serialize;

use object_reward_kit::geometry::FingertipSet;
use object_reward_kit::kinematics::{ik_solve, load_chain};

use crate::config::{prepare, CommonArgs, RunConfig};
use crate::errors::{kin_err, CliError};

#[derive(Debug, clap::Args)]
pub struct IkArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Kinematic chain JSON.
    #[arg(long)]
    pub chain: Option<PathBuf>,
    /// Target file: an end-effector position array or a fingertip set.
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Gradient-descent iteration cap.
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Residual norm below which the solve stops.
    #[arg(long)]
    pub tol: Option<f64>,
}

#[derive(Serialize)]
struct IkSolution {
    q: Vec<f64>,
    residual: f64,
    iterations: usize,
}

fn load_targets(path: &std::path::Path) -> Result<Vec<Vector3<f64>>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    if let Ok(raw) = serde_json::from_str::<Vec<[f64; 3]>>(&text) {
        return Ok(raw.iter().map(|p| Vector3::new(p[0], p[1], p[2])).collect());
    }
    let tips: FingertipSet = serde_json::from_str(&text)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    Ok(tips.tips().to_vec())
}

pub fn run_ik(args: &IkArgs) -> Result<(), CliError> {
    let (cfg, out) = prepare(&args.common, |cfg| {
        if let Some(p) = &args.chain {
            cfg.io.chain = Some(p.clone());
        }
        if let Some(p) = &args.target {
            cfg.io.ik_target = Some(p.clone());
        }
        if let Some(n) = args.max_iters {
            cfg.ik.max_iters = n;
        }
        if let Some(t) = args.tol {
            cfg.ik.tol = t;
        }
    })?;
    let chain_path = RunConfig::require(&cfg.io.chain, "chain")?;
    let target_path = RunConfig::require(&cfg.io.ik_target, "ik_target")?;
    let chain = load_chain(&chain_path).map_err(kin_err)?;
    let targets = load_targets(&target_path)?;
    if targets.len() != chain.num_end_effectors() {
        return Err(CliError::config(format!(
            "target has {} positions, chain has {} end effectors",
            targets.len(),
            chain.num_end_effectors()
        )));
    }
    let q0 = chain.neutral_state();
    let solved = ik_solve(&chain, &targets, &q0, &cfg.ik.to_opts()).map_err(kin_err)?;
    let solution = IkSolution {
        q: solved.q.as_slice().to_vec(),
        residual: solved.residual,
        iterations: solved.iterations,
    };
    let text = serde_json::to_string_pretty(&solution).expect("solution serializes");
    fs::write(out.join("ik_solution.json"), text + "\n")
        .map_err(|e| CliError::config(format!("{}: {e}", out.display())))?;
    Ok(())
}
