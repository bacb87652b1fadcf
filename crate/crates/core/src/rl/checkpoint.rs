use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Agent, AgentConfig};
use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::nn::{AdamState, MlpCheckpoint, Trainable};

pub const AGENT_FORMAT_VERSION: u32 = 1;

const NETS: [&str; 5] = ["actor", "q1", "q2", "q1_target", "q2_target"];

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentState {
    format_version: u32,
    config: AgentConfig,
    spec: EnvSpec,
    log_alpha: f64,
    updates: u64,
    actor_adam: AdamState,
    q1_adam: AdamState,
    q2_adam: AdamState,
    alpha_adam: AdamState,
    rng: ChaCha8Rng,
}

/// Writes one network file per role plus `agent.json` with the temperature,
/// optimizer states, and sampling stream.
pub fn save_agent(agent: &Agent, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let nets = [&agent.actor.net, &agent.q1.net, &agent.q2.net, &agent.q1_target, &agent.q2_target];
    for (role, net) in NETS.iter().zip(nets) {
        MlpCheckpoint::from_mlp(net).with_tag("role", role).save(&dir.join(format!("{role}.json")))?;
    }
    let state = AgentState {
        format_version: AGENT_FORMAT_VERSION,
        config: agent.config().clone(),
        spec: agent.spec().clone(),
        log_alpha: agent.log_alpha,
        updates: agent.updates,
        actor_adam: agent.actor.adam.clone(),
        q1_adam: agent.q1.adam.clone(),
        q2_adam: agent.q2.adam.clone(),
        alpha_adam: agent.alpha_adam.clone(),
        rng: agent.rng.clone(),
    };
    let path = dir.join("agent.json");
    std::fs::write(&path, serde_json::to_string_pretty(&state)?).map_err(|e| Error::io(&path, e))
}

pub fn load_agent(dir: &Path) -> Result<Agent> {
    let path = dir.join("agent.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let st: AgentState = serde_json::from_str(&text).map_err(|e| Error::parse(&path, e.to_string()))?;
    if st.format_version != AGENT_FORMAT_VERSION {
        return Err(Error::parse(&path, format!("unsupported format_version {}", st.format_version)));
    }
    let mut agent = Agent::new(&st.spec, &st.config, 0)?;
    let mut nets = Vec::with_capacity(NETS.len());
    for role in NETS {
        let file = dir.join(format!("{role}.json"));
        let ck = MlpCheckpoint::load(&file)?;
        if ck.metadata.get("role").map(String::as_str) != Some(role) {
            return Err(Error::parse(&file, format!("expected role `{role}`")));
        }
        nets.push(ck.to_mlp()?);
    }
    let mut it = nets.into_iter();
    let mut next = || it.next().expect("five networks");
    let expect = |t: &Trainable, n: &crate::nn::Mlp, role: &str| -> Result<()> {
        if t.net.layer_dims() != n.layer_dims() {
            return Err(Error::parse(&path, format!("{role} network shape disagrees with config and spec")));
        }
        Ok(())
    };
    let actor = next();
    expect(&agent.actor, &actor, "actor")?;
    let q1 = next();
    expect(&agent.q1, &q1, "q1")?;
    let q2 = next();
    expect(&agent.q2, &q2, "q2")?;
    agent.actor = Trainable { net: actor, adam: st.actor_adam };
    agent.q1 = Trainable { net: q1, adam: st.q1_adam };
    agent.q2 = Trainable { net: q2, adam: st.q2_adam };
    agent.q1_target = next();
    agent.q2_target = next();
    agent.log_alpha = st.log_alpha;
    agent.alpha_adam = st.alpha_adam;
    agent.rng = st.rng;
    agent.updates = st.updates;
    Ok(agent)
}
