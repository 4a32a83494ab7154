use crate::error::{Error, Result};
use crate::gdu::{Subnets, Topology};

/// Most consecutive skipped batches tolerated before training aborts.
pub const MAX_CONSECUTIVE_SKIPS: usize = 10;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Unrolled steps `S` per training sample.
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub tau: f64,
    /// One supervision weight per step.
    pub kappa: Vec<f64>,
    pub iterations: usize,
    pub seed: u64,
    pub topology: Topology,
    pub subnets: Subnets,
    /// Random square training crop; `None` trains on whole images.
    pub crop: Option<usize>,
    /// Checkpoint cadence in iterations; the final state is always written.
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 5,
            batch_size: 4,
            learning_rate: 5e-5,
            tau: 1.0,
            kappa: vec![1.0; 5],
            iterations: 1000,
            seed: 0,
            topology: Topology::default(),
            subnets: Subnets::default(),
            crop: None,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::invalid("steps and batch size must be positive"));
        }
        if self.kappa.len() != self.steps {
            return Err(Error::invalid(format!(
                "kappa has {} entries but training unrolls {} steps",
                self.kappa.len(),
                self.steps
            )));
        }
        if self.kappa.iter().any(|k| !(k.is_finite() && *k >= 0.0)) || self.kappa.iter().all(|&k| k == 0.0) {
            return Err(Error::invalid(
                "kappa must be nonnegative with at least one positive entry",
            ));
        }
        if !(self.tau.is_finite() && self.tau >= 0.0) {
            return Err(Error::invalid("tau must be nonnegative"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.crop == Some(0) || self.checkpoint_every == Some(0) {
            return Err(Error::invalid("crop and checkpoint cadence must be positive"));
        }
        self.topology.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.steps, c.batch_size, c.learning_rate, c.tau), (5, 4, 5e-5, 1.0));
        assert_eq!(c.kappa, vec![1.0; 5]);
        c.validate().unwrap();
    }

    #[test]
    fn rejects_bad_kappa() {
        let mut c = TrainConfig {
            kappa: vec![1.0; 4],
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        c.kappa = vec![0.0; 5];
        assert!(c.validate().is_err());
        c.kappa = vec![1.0, 1.0, -1.0, 1.0, 1.0];
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_roundtrip() {
        let c = TrainConfig {
            crop: Some(32),
            ..TrainConfig::default()
        };
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&s).unwrap(), c);
    }
}
