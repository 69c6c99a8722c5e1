//! Scenario configuration (JSON) and its validation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use iod_core::messages::MsgType;
use iod_core::rffi;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error at line {line}, column {column}: {msg}")]
    Parse {
        line: usize,
        column: usize,
        msg: String,
    },
    #[error("{path}: {msg}")]
    Invalid { path: String, msg: String },
}

fn invalid(path: impl Into<String>, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        path: path.into(),
        msg: msg.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub id: u32,
    pub gss: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DroneConfig {
    pub id: u32,
    pub authorized: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RffiParams {
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_pct")]
    pub threshold_percentile: f64,
    #[serde(default = "default_packets")]
    pub enroll_packets: usize,
}

fn default_dim() -> usize {
    rffi::DEFAULT_DIM
}
fn default_k() -> usize {
    rffi::DEFAULT_K
}
fn default_noise() -> f64 {
    rffi::DEFAULT_NOISE_SIGMA
}
fn default_pct() -> f64 {
    rffi::DEFAULT_PERCENTILE
}
fn default_packets() -> usize {
    rffi::DEFAULT_ENROLL_PACKETS
}
fn default_true() -> bool {
    true
}

impl Default for RffiParams {
    fn default() -> Self {
        RffiParams {
            dim: default_dim(),
            k: default_k(),
            noise: default_noise(),
            threshold_percentile: default_pct(),
            enroll_packets: default_packets(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PufParams {
    /// Measurement noise for the statistics suite; protocol reads are noiseless.
    #[serde(default)]
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum SessionStep {
    Make {
        pair: [u32; 2],
        initiator: u32,
        #[serde(default = "one")]
        count: u32,
    },
    Enroll {
        drone: u32,
        domain: u32,
    },
    Leave {
        drone: u32,
    },
    Provision {
        drone: u32,
        domain: u32,
        #[serde(default)]
        via_relay: bool,
    },
}

fn one() -> u32 {
    1
}

/// Picks a frame by sequence number, or by protocol run and message type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FrameSel {
    Seq { seq: u64 },
    Session { session: u64, msg_type: MsgType },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum AdversaryAction {
    Drop {
        at: FrameSel,
    },
    Modify {
        at: FrameSel,
        bits: Vec<usize>,
    },
    Replay {
        source: FrameSel,
        after_session: u64,
        #[serde(default)]
        to: Option<u32>,
    },
    Inject {
        after_session: u64,
        to: u32,
        from: u32,
        msg_type: MsgType,
        payload_hex: String,
    },
    Capture {
        entity: u32,
        after_session: u64,
        #[serde(default)]
        puf_oracle: bool,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: Option<u64>,
    pub domains: Vec<DomainConfig>,
    pub drones: Vec<DroneConfig>,
    /// Initial enrollment order as `{drone, domain}` steps.
    #[serde(default)]
    pub enrollment: Vec<SessionStep>,
    #[serde(default)]
    pub rffi: RffiParams,
    #[serde(default)]
    pub puf: PufParams,
    #[serde(default)]
    pub sessions: Vec<SessionStep>,
    #[serde(default)]
    pub adversary: Vec<AdversaryAction>,
    #[serde(default = "default_true")]
    pub key_confirmation: bool,
    #[serde(default)]
    pub continuous_rffi: bool,
    /// Protocol runs allowed to fail (e.g. the target of a scripted drop).
    #[serde(default)]
    pub expect_failures: Vec<u64>,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = serde_json::from_str(text).map_err(|e| ConfigError::Parse {
            line: e.line(),
            column: e.column(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut gss_ids = BTreeSet::new();
        let mut domains = BTreeMap::new();
        for (i, d) in self.domains.iter().enumerate() {
            if domains.insert(d.id, d.gss).is_some() {
                return Err(invalid(format!("domains[{i}].id"), "duplicate domain"));
            }
            if !gss_ids.insert(d.gss) {
                return Err(invalid(format!("domains[{i}].gss"), "GSS serves two domains"));
            }
        }
        let mut drones = BTreeMap::new();
        for (i, d) in self.drones.iter().enumerate() {
            if gss_ids.contains(&d.id) || drones.insert(d.id, d).is_some() {
                return Err(invalid(format!("drones[{i}].id"), "duplicate id"));
            }
            if d.id == u32::MAX {
                return Err(invalid(format!("drones[{i}].id"), "id reserved for the adversary"));
            }
            for dom in &d.authorized {
                if !domains.contains_key(dom) {
                    return Err(invalid(
                        format!("drones[{i}].authorized"),
                        format!("unknown domain {dom}"),
                    ));
                }
            }
        }
        let r = &self.rffi;
        if r.dim < rffi::MIN_DIM {
            return Err(invalid("rffi.dim", format!("must be at least {}", rffi::MIN_DIM)));
        }
        if r.k == 0 || r.enroll_packets <= r.k {
            return Err(invalid("rffi", "need k >= 1 and enroll_packets > k"));
        }
        if !(r.noise.is_finite() && r.noise >= 0.0) {
            return Err(invalid("rffi.noise", "must be finite and non-negative"));
        }
        if !(0.0..=100.0).contains(&r.threshold_percentile) {
            return Err(invalid("rffi.threshold_percentile", "must lie in [0, 100]"));
        }
        if !(self.puf.noise.is_finite() && self.puf.noise >= 0.0) {
            return Err(invalid("puf.noise", "must be finite and non-negative"));
        }

        let entity = |id: u32| drones.contains_key(&id) || gss_ids.contains(&id);
        let check_step = |path: String, s: &SessionStep| -> Result<(), ConfigError> {
            match s {
                SessionStep::Make {
                    pair, initiator, ..
                } => {
                    if pair[0] == pair[1] {
                        return Err(invalid(path, "pair members must differ"));
                    }
                    if !pair.contains(initiator) {
                        return Err(invalid(path, "initiator must be a pair member"));
                    }
                    for id in pair {
                        if !entity(*id) {
                            return Err(invalid(path, format!("unknown entity {id}")));
                        }
                    }
                    if gss_ids.contains(&pair[0]) && gss_ids.contains(&pair[1]) {
                        return Err(invalid(path, "GSS-to-GSS sessions are not modeled"));
                    }
                }
                SessionStep::Enroll { drone, domain }
                | SessionStep::Provision { drone, domain, .. } => {
                    let Some(d) = drones.get(drone) else {
                        return Err(invalid(path, format!("unknown drone {drone}")));
                    };
                    if !domains.contains_key(domain) {
                        return Err(invalid(path, format!("unknown domain {domain}")));
                    }
                    if !d.authorized.contains(domain) {
                        return Err(invalid(path, format!("drone {drone} not authorized for {domain}")));
                    }
                }
                SessionStep::Leave { drone } => {
                    if !drones.contains_key(drone) {
                        return Err(invalid(path, format!("unknown drone {drone}")));
                    }
                }
            }
            Ok(())
        };
        let mut enrolled = BTreeSet::new();
        for (i, s) in self.enrollment.iter().enumerate() {
            let path = format!("enrollment[{i}]");
            let SessionStep::Enroll { drone, .. } = s else {
                return Err(invalid(path, "only enroll steps belong here"));
            };
            check_step(path.clone(), s)?;
            if !enrolled.insert(*drone) {
                return Err(invalid(path, "drone enrolled twice in the initial order"));
            }
        }
        for (i, s) in self.sessions.iter().enumerate() {
            check_step(format!("sessions[{i}]"), s)?;
        }
        for (i, a) in self.adversary.iter().enumerate() {
            let path = format!("adversary[{i}]");
            match a {
                AdversaryAction::Modify { bits, .. } if bits.is_empty() => {
                    return Err(invalid(path, "modify needs at least one bit position"));
                }
                AdversaryAction::Replay { to: Some(t), .. } if !entity(*t) => {
                    return Err(invalid(path, format!("unknown entity {t}")));
                }
                AdversaryAction::Inject {
                    to, payload_hex, ..
                } => {
                    if !entity(*to) {
                        return Err(invalid(path, format!("unknown entity {to}")));
                    }
                    if hex::decode(payload_hex).is_err() {
                        return Err(invalid(path, "payload_hex is not hex"));
                    }
                }
                AdversaryAction::Capture { entity: e, .. } => {
                    if !drones.contains_key(e) {
                        return Err(invalid(path, "only drones can be captured"));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }
}
