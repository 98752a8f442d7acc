use object_reward_kit::kinematics::KinError;
use object_reward_kit::objmotion::MotionError;
use object_reward_kit::otreward::OtError;
use object_reward_kit::residual::ResidualError;
use object_reward_kit::trackio::TrackIoError;

/// Failure carrying the process exit code: 2 usage/config, 3 data, 4 numeric.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub msg: String,
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self { code: 2, msg: msg.into() }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Self { code: 3, msg: msg.into() }
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Self { code: 4, msg: msg.into() }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.msg.fmt(f)
    }
}

pub fn track_err(e: TrackIoError) -> CliError {
    CliError::config(e.to_string())
}

pub fn motion_err(e: MotionError) -> CliError {
    CliError::data(e.to_string())
}

pub fn ot_err(e: OtError) -> CliError {
    match e {
        OtError::NonPositiveEps(_) | OtError::Io { .. } | OtError::Parse { .. } => {
            CliError::config(e.to_string())
        }
        OtError::InvalidCost => CliError::numeric(e.to_string()),
        _ => CliError::data(e.to_string()),
    }
}

pub fn kin_err(e: KinError) -> CliError {
    match e {
        KinError::Numeric { .. } | KinError::NonFinite(_) => CliError::numeric(e.to_string()),
        _ => CliError::config(e.to_string()),
    }
}

pub fn residual_err(e: ResidualError) -> CliError {
    match e {
        ResidualError::Env { .. } | ResidualError::NonFinite(_) => {
            CliError::numeric(e.to_string())
        }
        _ => CliError::config(e.to_string()),
    }
}
