//! JSON-lines dataset files.
//!
//! Line 1 is a header `{"format_version":1,"T":..,"dt":..}`; every further
//! line is one scenario record. Features are not stored: they are recomputed
//! from geometry on load.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{generate_scenario, validate_scenario, LaneCorridor, Maneuver, Obstacle, Scenario, ScenarioConfig};
use crate::error::{Error, Result};
use crate::kinematics::{EgoState, Trajectory};
use crate::tensor::Array;

pub const DATASET_FORMAT_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format_version: u64,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub dt: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    version: u64,
    id: String,
    corridor: LaneCorridor,
    obstacles: Vec<Obstacle>,
    ego_init: EgoState,
    expert: Trajectory,
    maneuver: Maneuver,
    seed: u64,
}

/// Seed of the `index`-th scenario of a dataset (splitmix64 finalizer).
pub fn scenario_seed(master_seed: u64, index: u64) -> u64 {
    let mut z = master_seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generates `count` scenarios in parallel; the result does not depend on
/// the number of worker threads.
pub fn generate_dataset(master_seed: u64, count: usize, config: &ScenarioConfig) -> Result<Vec<Scenario>> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| generate_scenario(scenario_seed(master_seed, i), config))
        .collect()
}

pub fn save_dataset(scenarios: &[Scenario], path: &Path, config: &ScenarioConfig) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    let header = DatasetHeader {
        format_version: DATASET_FORMAT_VERSION,
        horizon: config.horizon,
        dt: config.dt,
    };
    let json = |e: serde_json::Error| Error::InvalidArgument(e.to_string());
    writeln!(out, "{}", serde_json::to_string(&header).map_err(json)?).map_err(io)?;
    for s in scenarios {
        let rec = Record {
            version: DATASET_FORMAT_VERSION,
            id: s.id.clone(),
            corridor: s.corridor.clone(),
            obstacles: s.obstacles.clone(),
            ego_init: s.ego_init,
            expert: s.expert.clone(),
            maneuver: s.maneuver,
            seed: s.seed,
        };
        writeln!(out, "{}", serde_json::to_string(&rec).map_err(json)?).map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Loads and re-validates a dataset, recomputing features under `config`.
pub fn load_dataset(path: &Path, config: &ScenarioConfig) -> Result<Vec<Scenario>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let parse = |line: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut scenarios = Vec::new();
    let mut saw_header = false;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if !saw_header {
            let header: DatasetHeader = serde_json::from_str(&line).map_err(|e| parse(lineno, e.to_string()))?;
            if header.format_version != DATASET_FORMAT_VERSION {
                return Err(Error::Version {
                    found: header.format_version,
                    expected: DATASET_FORMAT_VERSION,
                });
            }
            if header.horizon != config.horizon || header.dt != config.dt {
                return Err(parse(
                    lineno,
                    format!(
                        "dataset has T={} dt={}, config expects T={} dt={}",
                        header.horizon, header.dt, config.horizon, config.dt
                    ),
                ));
            }
            saw_header = true;
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse(lineno, e.to_string()))?;
        if rec.version != DATASET_FORMAT_VERSION {
            return Err(parse(
                lineno,
                format!("record version {} (expected {DATASET_FORMAT_VERSION})", rec.version),
            ));
        }
        let mut s = Scenario {
            id: rec.id,
            seed: rec.seed,
            corridor: rec.corridor,
            obstacles: rec.obstacles,
            ego_init: rec.ego_init,
            expert: rec.expert,
            maneuver: rec.maneuver,
            scene_tokens: Array::zeros(0, 0),
            semantic_ctx: Array::zeros(0, 0),
        };
        s.refresh_features(config).map_err(|e| parse(lineno, e.to_string()))?;
        validate_scenario(&s, config).map_err(|e| parse(lineno, e.to_string()))?;
        scenarios.push(s);
    }
    Ok(scenarios)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let cfg = ScenarioConfig::default();
        let data = generate_dataset(3, 25, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        save_dataset(&data, &path, &cfg).unwrap();
        assert_eq!(load_dataset(&path, &cfg).unwrap(), data);
    }

    #[test]
    fn truncated_line_is_named() {
        let cfg = ScenarioConfig::default();
        let data = generate_dataset(5, 3, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        save_dataset(&data, &path, &cfg).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() - 40]).unwrap();
        match load_dataset(&path, &cfg).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 4),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_dataset(&path, &ScenarioConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn wrong_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.jsonl");
        std::fs::write(&path, "{\"format_version\":2,\"T\":8,\"dt\":0.5}\n").unwrap();
        let err = load_dataset(&path, &ScenarioConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Version { found: 2, .. }));
    }
}
