use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ppo::EpisodeRecord;

/// One line of `metrics.jsonl`. PPO fields are null in distillation runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: u64,
    pub total_env_steps: u64,
    pub wall_time_s: f64,
    pub mean_episode_return: Option<f32>,
    pub mean_episode_length: Option<f32>,
    pub surrogate_loss: Option<f32>,
    pub value_loss: Option<f32>,
    pub entropy: Option<f32>,
    pub approx_kl: Option<f32>,
    pub learning_rate: f32,
    pub clip_fraction: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub symmetry_loss: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intrinsic_reward_mean: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distill_loss: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub success_rate: Option<f32>,
    pub steps_per_second: f64,
}

/// Completed-episode statistics over a logging window.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpisodeSummary {
    pub count: f32,
    pub return_sum: f32,
    pub length_sum: f32,
    pub success_count: f32,
    /// Episodes whose task defines success.
    pub success_defined: f32,
}

impl EpisodeSummary {
    pub fn add(&mut self, episodes: &[EpisodeRecord]) {
        for e in episodes {
            self.count += 1.0;
            self.return_sum += e.ret;
            self.length_sum += e.length as f32;
            if let Some(s) = e.success {
                self.success_defined += 1.0;
                self.success_count += f32::from(u8::from(s));
            }
        }
    }

    pub fn as_array(&self) -> [f32; 5] {
        [self.count, self.return_sum, self.length_sum, self.success_count, self.success_defined]
    }

    pub fn from_array(a: [f32; 5]) -> Self {
        Self {
            count: a[0],
            return_sum: a[1],
            length_sum: a[2],
            success_count: a[3],
            success_defined: a[4],
        }
    }

    pub fn mean_return(&self) -> Option<f32> {
        (self.count > 0.0).then(|| self.return_sum / self.count)
    }

    pub fn mean_length(&self) -> Option<f32> {
        (self.count > 0.0).then(|| self.length_sum / self.count)
    }

    pub fn success_rate(&self) -> Option<f32> {
        (self.success_defined > 0.0).then(|| self.success_count / self.success_defined)
    }
}

/// Append-only JSON-lines sink.
#[derive(Debug)]
pub struct MetricsWriter {
    path: PathBuf,
    file: File,
}

impl MetricsWriter {
    /// Creates (truncates) the file.
    pub fn create(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// Parses every line of a metrics file.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
