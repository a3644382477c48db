//! Binary containers: `magic | u32 LE header_len | JSON header | f32 LE data`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RunConfig;
use crate::autodiff::{Tape, Tensor};
use crate::env::{ObservationSet, POLICY};
use crate::error::{Error, Result};
use crate::nn::{Activation, GruCell, Mlp, ParamSet};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RLCKPT01";
pub const EXPORT_MAGIC: &[u8; 8] = b"RLPOL001";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Position of the run's counter-addressed random streams.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    /// Environment steps taken per environment; addresses action noise.
    pub rollout_step: u64,
    pub learning_rate: f32,
}

fn entries(params: &ParamSet) -> Vec<ParamEntry> {
    params
        .names()
        .iter()
        .zip(params.tensors())
        .map(|(n, t)| ParamEntry {
            name: n.clone(),
            shape: t.shape().to_vec(),
        })
        .collect()
}

fn encode_container(magic: &[u8; 8], header: &[u8], params: &ParamSet) -> Result<Vec<u8>> {
    let header_len = u32::try_from(header.len())
        .map_err(|_| Error::Format("header longer than 4 GiB".into()))?;
    let mut out = Vec::with_capacity(12 + header.len() + 4 * params.numel());
    out.extend_from_slice(magic);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(header);
    for t in params.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Splits a container into its header bytes and parameter data after
/// checking the magic.
fn split_container<'a>(bytes: &'a [u8], magic: &[u8; 8]) -> Result<(&'a [u8], &'a [u8])> {
    if bytes.len() < 12 || &bytes[..8] != magic {
        return Err(Error::Format(format!(
            "bad magic: expected {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if bytes.len() < 12 + header_len {
        return Err(Error::Format("truncated header".into()));
    }
    Ok((&bytes[12..12 + header_len], &bytes[12 + header_len..]))
}

fn decode_params(list: &[ParamEntry], data: &[u8]) -> Result<ParamSet> {
    let total: usize = list.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if data.len() != 4 * total {
        return Err(Error::Format(format!(
            "parameter data has {} bytes, header describes {}",
            data.len(),
            4 * total
        )));
    }
    let mut floats = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let mut params = ParamSet::new();
    for e in list {
        let n = e.shape.iter().product();
        let values: Vec<f32> = floats.by_ref().take(n).collect();
        params.push(e.name.clone(), Tensor::new(e.shape.clone(), values)?.with_requires_grad(true));
    }
    Ok(params)
}

/// Writes `bytes` through a temporary sibling and renames it into place;
/// the temporary is removed on failure.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let res = std::fs::File::create(&tmp)
        .and_then(|mut f| f.write_all(bytes).and_then(|_| f.sync_all()))
        .and_then(|_| std::fs::rename(&tmp, path));
    res.map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    format_version: u32,
    config: RunConfig,
    iteration: u64,
    total_env_steps: u64,
    rng_state: RngState,
    params: Vec<ParamEntry>,
}

/// Full training state: the config echo, counters and every network
/// parameter in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub iteration: u64,
    pub total_env_steps: u64,
    pub rng_state: RngState,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            iteration: self.iteration,
            total_env_steps: self.total_env_steps,
            rng_state: self.rng_state,
            params: entries(&self.params),
        };
        encode_container(CHECKPOINT_MAGIC, &serde_json::to_vec(&header)?, &self.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, data) = split_container(bytes, CHECKPOINT_MAGIC)?;
        let h: CheckpointHeader = serde_json::from_slice(header)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        if h.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format_version {}", h.format_version)));
        }
        h.config.validate()?;
        Ok(Self {
            params: decode_params(&h.params, data)?,
            config: h.config,
            iteration: h.iteration,
            total_env_steps: h.total_env_steps,
            rng_state: h.rng_state,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Copies every parameter of `dst` from entries named `prefix + name`.
    pub fn restore_into(&self, prefix: &str, dst: &mut ParamSet) -> Result<()> {
        for i in 0..dst.len() {
            let name = format!("{prefix}{}", dst.names()[i]);
            let src = self
                .params
                .by_name(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter `{name}`")))?;
            let t = dst.get_mut(i);
            if t.shape() != src.shape() {
                return Err(Error::Format(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExportHeader {
    format_version: u32,
    schema: Vec<(String, usize)>,
    action_dim: usize,
    activation: Activation,
    params: Vec<ParamEntry>,
}

/// Deployment policy: the actor mean (and recurrent cell) only, run as a
/// deterministic observation-to-action map.
#[derive(Clone, Debug, PartialEq)]
pub struct ExportedPolicy {
    pub schema: Vec<(String, usize)>,
    pub params: ParamSet,
    activation: Activation,
    actor: Mlp,
    gru: Option<GruCell>,
}

impl ExportedPolicy {
    /// Keeps the `actor.*` and `gru.*` entries of `params`.
    pub fn from_params(params: &ParamSet, activation: Activation, schema: Vec<(String, usize)>) -> Result<Self> {
        let params = params.filtered(|n| n.starts_with("actor.") || n.starts_with("gru."));
        let actor = Mlp::locate(&params, "actor.", activation)?;
        let gru = if params.index_of("gru.w_z").is_some() {
            Some(GruCell::locate(&params, "gru.")?)
        } else {
            None
        };
        Ok(Self {
            schema,
            params,
            activation,
            actor,
            gru,
        })
    }

    pub fn action_dim(&self) -> usize {
        self.actor.output_dim()
    }

    pub fn hidden_dim(&self) -> Option<usize> {
        self.gru.as_ref().map(GruCell::hidden_dim)
    }

    pub fn initial_hidden(&self, batch: usize) -> Option<Tensor> {
        self.hidden_dim()
            .map(|h| Tensor::zeros(vec![batch, h]).expect("positive dims"))
    }

    /// Mean actions and, for recurrent policies, the next hidden state.
    pub fn act(&self, obs: &ObservationSet, hidden: Option<&Tensor>) -> Result<(Tensor, Option<Tensor>)> {
        let mut tape = Tape::new();
        let vars = self.params.register_const(&mut tape);
        let mut x = tape.constant(obs.get(POLICY)?.clone());
        let mut next = None;
        if let Some(g) = &self.gru {
            let h = hidden.ok_or_else(|| Error::State("recurrent policy called without hidden state".into()))?;
            let h = tape.constant(h.clone());
            x = g.step(&mut tape, &vars, x, h)?;
            next = Some(x);
        }
        let mean = self.actor.forward(&mut tape, &vars, x)?;
        Ok((tape.to_tensor(mean), next.map(|h| tape.to_tensor(h))))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = ExportHeader {
            format_version: FORMAT_VERSION,
            schema: self.schema.clone(),
            action_dim: self.action_dim(),
            activation: self.activation,
            params: entries(&self.params),
        };
        encode_container(EXPORT_MAGIC, &serde_json::to_vec(&header)?, &self.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, data) = split_container(bytes, EXPORT_MAGIC)?;
        let h: ExportHeader = serde_json::from_slice(header)
            .map_err(|e| Error::Format(format!("export header: {e}")))?;
        if h.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format_version {}", h.format_version)));
        }
        let params = decode_params(&h.params, data)?;
        let p = Self::from_params(&params, h.activation, h.schema)?;
        if p.action_dim() != h.action_dim {
            return Err(Error::Format("action_dim disagrees with the actor".into()));
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}
