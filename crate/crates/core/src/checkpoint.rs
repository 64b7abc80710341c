//! Trained-model snapshots.
//!
//! A checkpoint is a single JSON document with a fixed key order and a
//! fixed float encoding, so identical runs produce byte-identical files.
//! Phase-1 files carry the Hamiltonian and adjoint nets; phase-2 files
//! additionally carry the refinement nets, keeping the frozen phase-1
//! pair so a rollout needs only one file.
//!
//! The reader is strict: unknown or missing keys, a wrong version, an
//! unknown environment name, or network shapes that disagree with the
//! environment's sizing plan all fail loading instead of degrading
//! quietly.

use std::path::Path;

use crate::environments::{network_plan, NetworkPlan};
use crate::error::{Error, Result};
use crate::fmtnum::fmt_f64;
use crate::nets::{Mlp, NetRecord};
use crate::scalar::Scalar;
use crate::training::{FhatMode, Phase1Result, Phase2Result, TrainConfig, VaeConfig};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Network names in canonical file order for each phase.
pub const PHASE1_NET_NAMES: [&str; 2] = ["hamiltonian", "adjoint"];
pub const PHASE2_NET_NAMES: [&str; 7] = [
    "hamiltonian",
    "adjoint",
    "hamiltonian_refined",
    "encoder_share",
    "encoder_mean",
    "encoder_logvar",
    "decoder",
];

/// The hyperparameter block echoed into the file, tagged by phase.
#[derive(Clone, Debug, PartialEq)]
pub enum PhaseConfig {
    One(TrainConfig),
    Two(VaeConfig),
}

impl PhaseConfig {
    pub fn phase(&self) -> u8 {
        match self {
            PhaseConfig::One(_) => 1,
            PhaseConfig::Two(_) => 2,
        }
    }

    /// Rollout horizon and step count recorded with the model.
    pub fn horizon(&self) -> (f64, usize) {
        match self {
            PhaseConfig::One(c) => (c.t_horizon, c.integrator_steps),
            PhaseConfig::Two(c) => (c.t_horizon, c.integrator_steps),
        }
    }

    fn to_json(&self) -> String {
        match self {
            PhaseConfig::One(c) => {
                let fhat = match c.fhat {
                    FhatMode::Blackbox => "blackbox",
                    FhatMode::Dhdp => "dhdp",
                };
                format!(
                    "{{\"alpha1\":{},\"alpha2\":{},\"beta\":{},\"t_horizon\":{},\
                     \"integrator_steps\":{},\"batch\":{},\"iterations\":{},\
                     \"learning_rate\":{},\"seed\":{},\"fhat\":\"{}\"}}",
                    fmt_f64(c.alpha1),
                    fmt_f64(c.alpha2),
                    fmt_f64(c.beta),
                    fmt_f64(c.t_horizon),
                    c.integrator_steps,
                    c.batch,
                    c.iterations,
                    fmt_f64(c.learning_rate),
                    c.seed,
                    fhat
                )
            }
            PhaseConfig::Two(c) => format!(
                "{{\"latent_dim\":{},\"alpha1\":{},\"alpha2\":{},\"t_horizon\":{},\
                 \"integrator_steps\":{},\"batch\":{},\"iterations\":{},\
                 \"learning_rate\":{},\"seed\":{}}}",
                c.latent_dim,
                fmt_f64(c.alpha1),
                fmt_f64(c.alpha2),
                fmt_f64(c.t_horizon),
                c.integrator_steps,
                c.batch,
                c.iterations,
                fmt_f64(c.learning_rate),
                c.seed
            ),
        }
    }
}

pub struct Checkpoint {
    pub env: String,
    pub seed: u64,
    pub config: PhaseConfig,
    /// (name, record) pairs in canonical file order.
    pub networks: Vec<(String, NetRecord)>,
}

impl Checkpoint {
    pub fn phase1<S: Scalar>(env: &str, cfg: &TrainConfig, result: &Phase1Result<S>) -> Checkpoint {
        Checkpoint {
            env: env.to_string(),
            seed: cfg.seed,
            config: PhaseConfig::One(cfg.clone()),
            networks: vec![
                ("hamiltonian".into(), result.hamiltonian.to_record()),
                ("adjoint".into(), result.adjoint.to_record()),
            ],
        }
    }

    /// Phase-2 snapshot; keeps the frozen phase-1 pair alongside the five
    /// refinement nets. `cfg` must already carry the resolved latent size.
    pub fn phase2<S: Scalar>(
        env: &str,
        cfg: &VaeConfig,
        hamiltonian: &Mlp<S>,
        adjoint: &Mlp<S>,
        result: &Phase2Result<S>,
    ) -> Checkpoint {
        Checkpoint {
            env: env.to_string(),
            seed: cfg.seed,
            config: PhaseConfig::Two(cfg.clone()),
            networks: vec![
                ("hamiltonian".into(), hamiltonian.to_record()),
                ("adjoint".into(), adjoint.to_record()),
                ("hamiltonian_refined".into(), result.nets.hamiltonian_refined.to_record()),
                ("encoder_share".into(), result.nets.encoder_share.to_record()),
                ("encoder_mean".into(), result.nets.encoder_mean.to_record()),
                ("encoder_logvar".into(), result.nets.encoder_logvar.to_record()),
                ("decoder".into(), result.nets.decoder.to_record()),
            ],
        }
    }

    pub fn phase(&self) -> u8 {
        self.config.phase()
    }

    pub fn train_config(&self) -> Option<&TrainConfig> {
        match &self.config {
            PhaseConfig::One(c) => Some(c),
            PhaseConfig::Two(_) => None,
        }
    }

    pub fn vae_config(&self) -> Option<&VaeConfig> {
        match &self.config {
            PhaseConfig::One(_) => None,
            PhaseConfig::Two(c) => Some(c),
        }
    }

    /// Rebuilds one network by name.
    pub fn net<S: Scalar>(&self, name: &str) -> Result<Mlp<S>> {
        let rec = self
            .networks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, r)| r)
            .ok_or_else(|| Error::CorruptCheckpoint { reason: format!("no network {name:?}") })?;
        Mlp::from_record(rec).map_err(|e| match e {
            Error::CorruptCheckpoint { .. } => e,
            other => Error::CorruptCheckpoint { reason: format!("network {name:?}: {other}") },
        })
    }

    /// The plan the file's network shapes must satisfy, with the phase-2
    /// latent size substituted in.
    fn expected_plan(&self) -> Result<NetworkPlan> {
        let mut plan = network_plan(&self.env)?;
        if let PhaseConfig::Two(c) = &self.config {
            if c.latent_dim != 0 {
                plan.latent_dim = c.latent_dim;
            }
        }
        Ok(plan)
    }

    /// Checks that every expected network is present with the dims the
    /// environment's sizing plan prescribes.
    pub fn verify(&self) -> Result<()> {
        let plan = self.expected_plan()?;
        let expected_names: &[&str] = match self.config {
            PhaseConfig::One(_) => &PHASE1_NET_NAMES,
            PhaseConfig::Two(_) => &PHASE2_NET_NAMES,
        };
        if self.networks.len() != expected_names.len()
            || self.networks.iter().zip(expected_names).any(|((n, _), e)| n != e)
        {
            let got: Vec<&str> = self.networks.iter().map(|(n, _)| n.as_str()).collect();
            return Err(Error::CorruptCheckpoint {
                reason: format!("expected networks {expected_names:?}, got {got:?}"),
            });
        }
        for (name, rec) in &self.networks {
            let want = match name.as_str() {
                "hamiltonian" => plan.hamiltonian_dims(),
                "adjoint" => plan.adjoint_dims(),
                "hamiltonian_refined" => plan.hamiltonian2_dims(),
                "encoder_share" => plan.encoder_share_dims(),
                "encoder_mean" => plan.encoder_mean_dims(),
                "encoder_logvar" => plan.encoder_logvar_dims(),
                "decoder" => plan.decoder_dims(),
                other => {
                    return Err(Error::CorruptCheckpoint {
                        reason: format!("unexpected network {other:?}"),
                    })
                }
            };
            if rec.dims != want {
                return Err(Error::CorruptCheckpoint {
                    reason: format!("network {name:?} has dims {:?}, plan wants {want:?}", rec.dims),
                });
            }
        }
        Ok(())
    }

    /// Canonical byte encoding; two equal checkpoints serialize identically.
    pub fn to_json_bytes(&self) -> Vec<u8> {
        let nets: Vec<String> = self
            .networks
            .iter()
            .map(|(name, rec)| format!("\"{}\":{}", name, rec.to_json()))
            .collect();
        format!(
            "{{\"version\":{},\"env\":\"{}\",\"phase\":{},\"seed\":{},\"config\":{},\"networks\":{{{}}}}}",
            CHECKPOINT_VERSION,
            self.env,
            self.phase(),
            self.seed,
            self.config.to_json(),
            nets.join(",")
        )
        .into_bytes()
    }

    pub fn from_json_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let v: serde_json::Value = serde_json::from_slice(bytes)
            .map_err(|e| Error::CorruptCheckpoint { reason: e.to_string() })?;
        let obj = v
            .as_object()
            .ok_or_else(|| Error::CorruptCheckpoint { reason: "not a JSON object".into() })?;
        const TOP_KEYS: [&str; 6] = ["version", "env", "phase", "seed", "config", "networks"];
        for key in obj.keys() {
            if !TOP_KEYS.contains(&key.as_str()) {
                return Err(Error::CorruptCheckpoint { reason: format!("unexpected key {key:?}") });
            }
        }
        let field = |name: &str| {
            obj.get(name)
                .ok_or_else(|| Error::CorruptCheckpoint { reason: format!("missing key {name:?}") })
        };
        let version = field("version")?
            .as_u64()
            .ok_or_else(|| Error::CorruptCheckpoint { reason: "version must be an integer".into() })?;
        if version != CHECKPOINT_VERSION as u64 {
            return Err(Error::UnsupportedVersion { found: version.min(u32::MAX as u64) as u32 });
        }
        let env = field("env")?
            .as_str()
            .ok_or_else(|| Error::CorruptCheckpoint { reason: "env must be a string".into() })?
            .to_string();
        let phase = field("phase")?
            .as_u64()
            .ok_or_else(|| Error::CorruptCheckpoint { reason: "phase must be an integer".into() })?;
        let seed = field("seed")?
            .as_u64()
            .ok_or_else(|| Error::CorruptCheckpoint { reason: "seed must be an integer".into() })?;
        let config_value = field("config")?.clone();
        let config = match phase {
            1 => PhaseConfig::One(
                serde_json::from_value::<TrainConfig>(config_value)
                    .map_err(|e| Error::CorruptCheckpoint { reason: format!("config: {e}") })?,
            ),
            2 => PhaseConfig::Two(
                serde_json::from_value::<VaeConfig>(config_value)
                    .map_err(|e| Error::CorruptCheckpoint { reason: format!("config: {e}") })?,
            ),
            other => {
                return Err(Error::CorruptCheckpoint { reason: format!("phase must be 1 or 2, got {other}") })
            }
        };
        match &config {
            PhaseConfig::One(c) => c.validate(),
            PhaseConfig::Two(c) => c.validate(),
        }
        .map_err(|e| Error::CorruptCheckpoint { reason: format!("config: {e}") })?;
        let nets_obj = field("networks")?
            .as_object()
            .ok_or_else(|| Error::CorruptCheckpoint { reason: "networks must be an object".into() })?;
        let expected_names: &[&str] = match config {
            PhaseConfig::One(_) => &PHASE1_NET_NAMES,
            PhaseConfig::Two(_) => &PHASE2_NET_NAMES,
        };
        let mut networks = Vec::with_capacity(expected_names.len());
        for name in expected_names {
            let rec_value = nets_obj.get(*name).ok_or_else(|| Error::CorruptCheckpoint {
                reason: format!("missing network {name:?}"),
            })?;
            networks.push((name.to_string(), NetRecord::from_json_value(rec_value)?));
        }
        if nets_obj.len() != expected_names.len() {
            let extra: Vec<&String> = nets_obj
                .keys()
                .filter(|k| !expected_names.contains(&k.as_str()))
                .collect();
            return Err(Error::CorruptCheckpoint {
                reason: format!("unexpected networks {extra:?}"),
            });
        }
        let ckpt = Checkpoint { env, seed, config, networks };
        ckpt.verify()?;
        Ok(ckpt)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        Checkpoint::from_json_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environments::{by_name, network_plan};
    use crate::training::{train_phase1, train_phase2};

    fn quick_phase1() -> (TrainConfig, Phase1Result<f64>) {
        let env = by_name::<f64>("lq").unwrap();
        let plan = network_plan("lq").unwrap();
        let cfg = TrainConfig { batch: 4, iterations: 3, integrator_steps: 5, ..TrainConfig::default() };
        let result = train_phase1(env.as_ref(), &plan, &cfg).unwrap();
        (cfg, result)
    }

    #[test]
    fn phase1_roundtrip_is_byte_identical() {
        let (cfg, result) = quick_phase1();
        let ckpt = Checkpoint::phase1("lq", &cfg, &result);
        let bytes = ckpt.to_json_bytes();
        let back = Checkpoint::from_json_bytes(&bytes).unwrap();
        assert_eq!(back.to_json_bytes(), bytes);
        assert_eq!(back.env, "lq");
        assert_eq!(back.phase(), 1);
        let h: Mlp<f64> = back.net("hamiltonian").unwrap();
        assert_eq!(h.serialize(), result.hamiltonian.serialize());
        assert_eq!(back.train_config().unwrap(), &cfg);
    }

    #[test]
    fn phase2_roundtrip_keeps_all_seven_networks() {
        let (_, p1) = quick_phase1();
        let env = by_name::<f64>("lq").unwrap();
        let plan = network_plan("lq").unwrap();
        let vcfg = VaeConfig { batch: 4, iterations: 3, integrator_steps: 5, ..VaeConfig::default() }
            .resolved(&plan);
        let p2 = train_phase2(env.as_ref(), &plan, &p1.hamiltonian, &p1.adjoint, &vcfg).unwrap();
        let ckpt = Checkpoint::phase2("lq", &vcfg, &p1.hamiltonian, &p1.adjoint, &p2);
        let back = Checkpoint::from_json_bytes(&ckpt.to_json_bytes()).unwrap();
        assert_eq!(back.phase(), 2);
        assert_eq!(back.networks.len(), 7);
        let dec: Mlp<f64> = back.net("decoder").unwrap();
        assert_eq!(dec.serialize(), p2.nets.decoder.serialize());
        let adj: Mlp<f64> = back.net("adjoint").unwrap();
        assert_eq!(adj.serialize(), p1.adjoint.serialize());
        assert_eq!(back.vae_config().unwrap().latent_dim, plan.latent_dim);
    }

    #[test]
    fn reader_rejects_tampering() {
        let (cfg, result) = quick_phase1();
        let ckpt = Checkpoint::phase1("lq", &cfg, &result);
        let text = String::from_utf8(ckpt.to_json_bytes()).unwrap();

        let newer = text.replace("\"version\":1", "\"version\":2");
        assert!(matches!(
            Checkpoint::from_json_bytes(newer.as_bytes()),
            Err(Error::UnsupportedVersion { found: 2 })
        ));

        let unknown = text.replace("\"env\":\"lq\"", "\"env\":\"pendulum\"");
        assert!(matches!(
            Checkpoint::from_json_bytes(unknown.as_bytes()),
            Err(Error::UnknownEnvironment { .. })
        ));

        let extra = text.replacen("{\"version\"", "{\"note\":\"hi\",\"version\"", 1);
        assert!(matches!(
            Checkpoint::from_json_bytes(extra.as_bytes()),
            Err(Error::CorruptCheckpoint { .. })
        ));

        let missing = text.replace("\"seed\":0,", "");
        assert!(matches!(
            Checkpoint::from_json_bytes(missing.as_bytes()),
            Err(Error::CorruptCheckpoint { .. })
        ));

        // swap the network block for one whose dims disagree with the plan
        let wrong_net = text.replace("\"dims\":[2,16,32,32,2]", "\"dims\":[2,16,32,32,3]");
        assert_ne!(wrong_net, text, "expected the adjoint dims literal in the file");
        assert!(matches!(
            Checkpoint::from_json_bytes(wrong_net.as_bytes()),
            Err(Error::CorruptCheckpoint { .. })
        ));

        assert!(matches!(
            Checkpoint::from_json_bytes(b"not json"),
            Err(Error::CorruptCheckpoint { .. })
        ));
    }

    #[test]
    fn files_survive_a_disk_trip() {
        let (cfg, result) = quick_phase1();
        let ckpt = Checkpoint::phase1("lq", &cfg, &result);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        ckpt.write(&path).unwrap();
        let back = Checkpoint::read(&path).unwrap();
        assert_eq!(back.to_json_bytes(), ckpt.to_json_bytes());
        assert!(matches!(
            Checkpoint::read(&dir.path().join("absent.json")),
            Err(Error::Io(_))
        ));
    }
}
