//! Versioned JSON serialization for environments. Grid cells are run-length
//! encoded as alternating run lengths, starting with a (possibly zero-length)
//! run of free cells.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{AgentTrack, Configuration, EnvMeta, Environment, GeneratorDetail, OccupancyMap};

pub const ENV_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct GoalDoc {
    center: Vec<f64>,
    radius: f64,
}

#[derive(Serialize, Deserialize)]
struct EnvDoc {
    version: u32,
    generator: String,
    seed: u64,
    width: usize,
    height: usize,
    resolution: f64,
    cells_rle: Vec<usize>,
    start: Vec<f64>,
    goal: GoalDoc,
    agents: Vec<AgentTrack>,
    detail: GeneratorDetail,
}

/// Alternating run lengths, first run counts zeros.
pub fn rle_encode(cells: &[u8]) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut current = 0u8;
    let mut count = 0usize;
    for &c in cells {
        if c == current {
            count += 1;
        } else {
            runs.push(count);
            current = c;
            count = 1;
        }
    }
    runs.push(count);
    runs
}

pub fn rle_decode(runs: &[usize], expected_len: usize) -> Result<Vec<u8>> {
    let mut cells = Vec::with_capacity(expected_len);
    let mut value = 0u8;
    for &run in runs {
        cells.extend(std::iter::repeat_n(value, run));
        value ^= 1;
    }
    if cells.len() != expected_len {
        return Err(Error::Environment(format!(
            "run-length data decodes to {} cells, expected {expected_len}",
            cells.len()
        )));
    }
    Ok(cells)
}

impl Environment {
    pub fn to_json(&self) -> Result<String> {
        let doc = EnvDoc {
            version: ENV_FORMAT_VERSION,
            generator: self.meta.generator.clone(),
            seed: self.meta.seed,
            width: self.map.width,
            height: self.map.height,
            resolution: self.map.resolution,
            cells_rle: rle_encode(&self.map.cells),
            start: self.start.0.clone(),
            goal: GoalDoc {
                center: self.goal_center.0.clone(),
                radius: self.goal_radius,
            },
            agents: self.agents.clone(),
            detail: self.meta.detail.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let doc: EnvDoc = serde_json::from_str(json)?;
        if doc.version != ENV_FORMAT_VERSION {
            return Err(Error::Environment(format!(
                "unsupported environment format version {}",
                doc.version
            )));
        }
        let cells = rle_decode(&doc.cells_rle, doc.width * doc.height)?;
        let env = Environment {
            map: OccupancyMap {
                width: doc.width,
                height: doc.height,
                cells,
                resolution: doc.resolution,
            },
            start: Configuration(doc.start),
            goal_center: Configuration(doc.goal.center),
            goal_radius: doc.goal.radius,
            agents: doc.agents,
            meta: EnvMeta {
                generator: doc.generator,
                seed: doc.seed,
                detail: doc.detail,
            },
        };
        env.validate()?;
        Ok(env)
    }
}
