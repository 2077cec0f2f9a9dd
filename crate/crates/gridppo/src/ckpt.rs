//! Versioned JSON checkpoint format shared by the imitation and PPO
//! trainers and by evaluation: architecture, parameters, optimizer state,
//! the setpoint normalization constants, and the environment config the
//! parameters were trained under. The case fingerprint ties a checkpoint
//! to the exact grid it belongs to.

use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::case::{case_fingerprint, Case};
use crate::env::EnvConfig;
use crate::nn::{AdamStateData, CriticParams, MlpData, MlpParams, NnError, PolicyParams};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(#[from] serde_json::Error),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("checkpoint belongs to a different case (fingerprint {expected}.. != {got}..)")]
    FingerprintMismatch { expected: String, got: String },
}

/// Normalization constants baked into the state/label encoding.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormConstants {
    pub base_mva: f64,
    /// Per-generator (min, max) boxes for Pg in MW and Vg in p.u.
    pub p_boxes: Vec<(f64, f64)>,
    pub v_boxes: Vec<(f64, f64)>,
}

impl NormConstants {
    pub fn from_case(case: &Case) -> Self {
        let boxes = crate::env::SetpointBoxes::from_case(case);
        Self { base_mva: case.base_mva, p_boxes: boxes.p, v_boxes: boxes.v }
    }
}

#[derive(Serialize, Deserialize)]
pub struct OptimizerData {
    pub actor: AdamStateData,
    pub log_std: crate::nn::AdamVecState,
    pub critic: Option<AdamStateData>,
}

#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub case_fingerprint: String,
    pub actor: MlpData,
    pub log_std: Vec<f64>,
    pub critic: Option<MlpData>,
    pub norm: NormConstants,
    pub env: EnvConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerData>,
}

impl Checkpoint {
    pub fn new(case: &Case, policy: &PolicyParams, critic: Option<&CriticParams>, env: EnvConfig) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            case_fingerprint: case_fingerprint(case),
            actor: MlpData::from(&policy.actor),
            log_std: policy.log_std.as_slice().to_vec(),
            critic: critic.map(|c| MlpData::from(&c.value)),
            norm: NormConstants::from_case(case),
            env,
            optimizer: None,
        }
    }

    pub fn policy(&self) -> Result<PolicyParams, CkptError> {
        if self.version != CHECKPOINT_VERSION {
            return Err(CkptError::Version(self.version));
        }
        Ok(PolicyParams {
            actor: MlpParams::try_from(&self.actor)?,
            log_std: DVector::from_row_slice(&self.log_std),
        })
    }

    pub fn critic_params(&self) -> Result<Option<CriticParams>, CkptError> {
        match &self.critic {
            None => Ok(None),
            Some(data) => Ok(Some(CriticParams { value: MlpParams::try_from(data)? })),
        }
    }

    pub fn verify_case(&self, case: &Case) -> Result<(), CkptError> {
        let expected = case_fingerprint(case);
        if self.case_fingerprint != expected {
            return Err(CkptError::FingerprintMismatch {
                expected: expected[..12].into(),
                got: self
                    .case_fingerprint
                    .get(..12)
                    .unwrap_or(&self.case_fingerprint)
                    .into(),
            });
        }
        Ok(())
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CkptError> {
    std::fs::write(path, serde_json::to_vec(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CkptError> {
    let bytes = std::fs::read(path)?;
    let ckpt: Checkpoint = serde_json::from_slice(&bytes)?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(CkptError::Version(ckpt.version));
    }
    Ok(ckpt)
}
