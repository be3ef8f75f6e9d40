use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::diffnet::{lr_schedule, NetworkSpec};
use crate::error::{Error, Result};
use crate::losses::Lambdas;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    /// Shuffle each domain, consume it in batch-sized pieces, reshuffle when exhausted.
    Cycling,
    /// Independent draws per batch (without replacement inside a batch).
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub lambda_cyc: f64,
    pub lambda_idt: f64,
    pub lambda_ess: f64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub micro_batch: usize,
    pub epochs: usize,
    pub decay_start_epoch: usize,
    /// Optimizer steps per epoch; `None` covers the larger domain once.
    pub iters_per_epoch: Option<usize>,
    pub seed: u64,
    pub learn_beta_x: bool,
    pub learn_beta_y: bool,
    /// Reuse the adversarial errors from the generator pass for the weight update
    /// instead of re-evaluating them after the generators moved.
    pub joint_beta_update: bool,
    pub sampling: Sampling,
    pub checkpoint_every: usize,
    /// Chunk size for scoring whole datasets.
    pub report_chunk: usize,
    /// `channels` inside the specs is replaced by the data's channel count.
    pub generator: NetworkSpec,
    pub discriminator: NetworkSpec,
    pub importance: NetworkSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            lambda_cyc: 10.0,
            lambda_idt: 10.0,
            lambda_ess: 1.0,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 20,
            micro_batch: 20,
            epochs: 100,
            decay_start_epoch: 50,
            iters_per_epoch: None,
            seed: 0,
            learn_beta_x: true,
            learn_beta_y: true,
            joint_beta_update: false,
            sampling: Sampling::Cycling,
            checkpoint_every: 10,
            report_chunk: 20,
            generator: NetworkSpec::paper_generator(3),
            discriminator: NetworkSpec::paper_discriminator(3),
            importance: NetworkSpec::paper_importance(3),
        }
    }
}

impl ExperimentConfig {
    /// Small networks for 16×16 grayscale data.
    pub fn reduced() -> Self {
        Self {
            generator: NetworkSpec::reduced_generator(1),
            discriminator: NetworkSpec::reduced_discriminator(1),
            importance: NetworkSpec::reduced_importance(1),
            ..Self::default()
        }
    }

    /// [`reduced`](Self::reduced) tuned for the 16×16 synthetic pair: a faster
    /// optimizer, a lighter identity term and 30 epochs.
    pub fn synthetic_task() -> Self {
        Self {
            learning_rate: 2e-4,
            adam_beta1: 0.5,
            lambda_idt: 1.0,
            epochs: 30,
            decay_start_epoch: 20,
            ..Self::reduced()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        Self::from_value(value)
    }

    fn from_value(value: Value) -> Result<Self> {
        serde_json::from_value(value).map_err(|e| {
            let msg = e.to_string();
            match unknown_field(&msg) {
                Some(key) => Error::ConfigKey(key),
                None => Error::Config(msg),
            }
        })
    }

    pub fn lambdas(&self) -> Lambdas {
        Lambdas {
            cyc: self.lambda_cyc,
            idt: self.lambda_idt,
            ess: self.lambda_ess,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_schedule(epoch, self.learning_rate, self.epochs, self.decay_start_epoch)
    }

    pub fn iters_for(&self, nx: usize, ny: usize) -> usize {
        self.iters_per_epoch
            .unwrap_or_else(|| nx.max(ny).div_ceil(self.batch_size))
            .max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("lambda_cyc", self.lambda_cyc),
            ("lambda_idt", self.lambda_idt),
            ("lambda_ess", self.lambda_ess),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number"));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive".into());
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2".into());
        }
        if self.micro_batch == 0 || self.batch_size % self.micro_batch != 0 {
            return bad(format!(
                "micro_batch {} must divide batch_size {}",
                self.micro_batch, self.batch_size
            ));
        }
        if self.epochs == 0 || self.decay_start_epoch == 0 || self.decay_start_epoch > self.epochs {
            return bad("need epochs ≥ 1 and 1 ≤ decay_start_epoch ≤ epochs".into());
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be positive".into());
        }
        if self.iters_per_epoch == Some(0) {
            return bad("iters_per_epoch must be positive".into());
        }
        for (want, spec) in [
            ("generator", &self.generator),
            ("discriminator", &self.discriminator),
            ("importance-backbone", &self.importance),
        ] {
            if spec.kind() != want {
                return bad(format!("network spec for {want} has kind {}", spec.kind()));
            }
        }
        Ok(())
    }

    /// Applies `key=value` overrides; dotted keys reach into nested objects.
    /// Values parse as JSON, falling back to a plain string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = serde_json::to_value(self)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut root;
            for part in key.split('.') {
                slot = match slot {
                    Value::Object(map) if map.contains_key(part) => map.get_mut(part).expect("present"),
                    _ => return Err(Error::ConfigKey(key.to_string())),
                };
            }
            *slot = value;
        }
        Self::from_value(root)
    }
}

fn unknown_field(msg: &str) -> Option<String> {
    let rest = msg.strip_prefix("unknown field `")?;
    Some(rest.split('`').next()?.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!((c.lambda_cyc, c.lambda_idt, c.lambda_ess), (10.0, 10.0, 1.0));
        assert_eq!((c.batch_size, c.learning_rate), (20, 1e-4));
        assert_eq!(c.lr_at(25), 1e-4);
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let c = ExperimentConfig::default();
        let o = c.with_overrides(&["lambda_ess=0", "generator.ngf=16"]).unwrap();
        assert_eq!(o.lambda_ess, 0.0);
        assert!(matches!(o.generator, NetworkSpec::Generator { ngf: 16, .. }));
        let e = c.with_overrides(&["lambda_foo=1"]).unwrap_err();
        assert!(matches!(e, Error::ConfigKey(ref k) if k == "lambda_foo"));
        let e = ExperimentConfig::from_json(r#"{"lamda_ess": 1}"#).unwrap_err();
        assert!(matches!(e, Error::ConfigKey(ref k) if k == "lamda_ess"));
    }

    #[test]
    fn micro_batch_must_divide() {
        let c = ExperimentConfig {
            micro_batch: 3,
            ..ExperimentConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn default_epoch_length_covers_larger_domain() {
        let c = ExperimentConfig::default();
        assert_eq!(c.iters_for(300, 250), 15);
        assert_eq!(c.iters_for(301, 10), 16);
    }
}
