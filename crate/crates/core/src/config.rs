//! Complete run configuration and the named presets.

use serde::{Deserialize, Serialize};

use crate::data::{DataConfig, Split, SplitCounts};
use crate::error::{Error, Result};
use crate::icp::IcpConfig;
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Full-size network and schedule.
    Paper,
    /// Reduced widths and schedule for a single workstation.
    Desk,
    /// Smallest setting, used by the test suite.
    Test,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Self::Paper),
            "desk" => Ok(Self::Desk),
            "test" => Ok(Self::Test),
            other => Err(Error::invalid(format!("unknown profile '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Learned,
    Icp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub method: Method,
    pub split: Split,
    pub icp: IcpConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            method: Method::Learned,
            split: Split::Test,
            icp: IcpConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn profile(p: Profile) -> Self {
        match p {
            Profile::Paper => Self {
                data: DataConfig::default(),
                model: ModelConfig::paper(),
                loss: LossConfig::default(),
                train: TrainConfig::default(),
                eval: EvalConfig::default(),
            },
            Profile::Desk => Self {
                data: DataConfig {
                    points: 512,
                    ..DataConfig::default()
                },
                model: ModelConfig::desk(),
                loss: LossConfig::default(),
                train: TrainConfig {
                    learning_rate: 3e-4,
                    batch_size: 8,
                    steps: 5_000,
                    checkpoint_every: 1_000,
                    ..TrainConfig::default()
                },
                eval: EvalConfig::default(),
            },
            Profile::Test => Self {
                data: DataConfig {
                    points: 128,
                    shapes: SplitCounts {
                        train: 8,
                        val: 4,
                        test: 8,
                    },
                    pairs: SplitCounts {
                        train: 8,
                        val: 0,
                        test: 8,
                    },
                    ..DataConfig::default()
                },
                model: ModelConfig::test(),
                loss: LossConfig::default(),
                train: TrainConfig {
                    learning_rate: 3e-4,
                    batch_size: 8,
                    steps: 2_000,
                    threads: 1,
                    checkpoint_every: 0,
                    ..TrainConfig::default()
                },
                eval: EvalConfig::default(),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.eval.icp.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_are_valid_and_round_trip() {
        for p in [Profile::Paper, Profile::Desk, Profile::Test] {
            let c = RunConfig::profile(p);
            c.validate().unwrap();
            let json = serde_json::to_string(&c).unwrap();
            assert_eq!(serde_json::from_str::<RunConfig>(&json).unwrap(), c);
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v = serde_json::to_value(RunConfig::profile(Profile::Test)).unwrap();
        v["train"]["momentum"] = serde_json::json!(0.9);
        assert!(serde_json::from_value::<RunConfig>(v).is_err());
    }
}
