//! CSV emission and parsing for metrics, measurements, localization
//! reports, and trajectory JSON export.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::MeasurementRecord;
use crate::envlearn::LocalizationResult;
use crate::error::{Error, Result};
use crate::federation::IterationMetrics;
use crate::learner::TrajStep;
use crate::world::GridPos;

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[IterationMetrics]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<IterationMetrics>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_err(path, e)))
        .collect()
}

/// Flat measurement row; `ix`/`iy`/`altitude_m` describe the UAV position
/// at measurement time.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
struct MeasurementRow {
    uav_id: usize,
    t: usize,
    ix: usize,
    iy: usize,
    altitude_m: f64,
    device_id: usize,
    gain_db: f64,
}

pub fn write_measurements_csv(
    path: impl AsRef<Path>,
    records: &[MeasurementRecord],
) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in records {
        w.serialize(MeasurementRow {
            uav_id: r.uav_id,
            t: r.t,
            ix: r.uav_pos.ix,
            iy: r.uav_pos.iy,
            altitude_m: r.uav_pos.altitude_m,
            device_id: r.device_id,
            gain_db: r.gain_db,
        })
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_measurements_csv(path: impl AsRef<Path>) -> Result<Vec<MeasurementRecord>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for row in r.deserialize::<MeasurementRow>() {
        let row = row.map_err(|e| csv_err(path, e))?;
        out.push(MeasurementRecord {
            uav_id: row.uav_id,
            t: row.t,
            uav_pos: GridPos::new(row.ix, row.iy, row.altitude_m),
            device_id: row.device_id,
            gain_db: row.gain_db,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
struct LocalizationRow {
    device_id: usize,
    x_hat_m: f64,
    y_hat_m: f64,
    nll: f64,
    n_measurements: usize,
    low_confidence: bool,
    error_m: Option<f64>,
}

/// Write the localization report. `truth` supplies the evaluation-only
/// error column where the true position is known.
pub fn write_localization_csv(
    path: impl AsRef<Path>,
    results: &[LocalizationResult],
    truth: impl Fn(usize) -> Option<(f64, f64)>,
) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in results {
        let error_m = truth(r.device_id)
            .map(|(tx, ty)| ((r.x_m - tx).powi(2) + (r.y_m - ty).powi(2)).sqrt());
        w.serialize(LocalizationRow {
            device_id: r.device_id,
            x_hat_m: r.x_m,
            y_hat_m: r.y_m,
            nll: r.nll,
            n_measurements: r.n_measurements,
            low_confidence: r.low_confidence,
            error_m,
        })
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_localization_csv(path: impl AsRef<Path>) -> Result<Vec<LocalizationResult>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for row in r.deserialize::<LocalizationRow>() {
        let row = row.map_err(|e| csv_err(path, e))?;
        out.push(LocalizationResult {
            device_id: row.device_id,
            x_m: row.x_hat_m,
            y_m: row.y_hat_m,
            nll: row.nll,
            n_measurements: row.n_measurements,
            low_confidence: row.low_confidence,
        });
    }
    Ok(out)
}

pub fn write_trajectory_json(path: impl AsRef<Path>, trajectory: &[TrajStep]) -> Result<()> {
    let path = path.as_ref();
    let mut body = serde_json::to_string_pretty(trajectory)
        .map_err(|e| Error::parse(path, e.to_string()))?;
    body.push('\n');
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn read_trajectory_json(path: impl AsRef<Path>) -> Result<Vec<TrajStep>> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&raw).map_err(|e| Error::parse(path, e.to_string()))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::parse(path, e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("skyharvest_metrics_test");
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn metrics_round_trip() {
        let rows = vec![
            IterationMetrics {
                iteration: 0,
                real_world_episodes: 1,
                collection_ratio: 0.25,
                mean_loss: Some(1.5),
                mean_localization_error_m: Some(12.0),
            },
            IterationMetrics {
                iteration: 1,
                real_world_episodes: 2,
                collection_ratio: 0.5,
                mean_loss: None,
                mean_localization_error_m: None,
            },
        ];
        let path = tmp("metrics.csv");
        write_metrics_csv(&path, &rows).unwrap();
        assert_eq!(read_metrics_csv(&path).unwrap(), rows);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(
            "iteration,real_world_episodes,collection_ratio,mean_loss,mean_localization_error_m"
        ));
    }

    #[test]
    fn measurements_round_trip() {
        let records = vec![MeasurementRecord {
            uav_id: 2,
            t: 7,
            uav_pos: GridPos::new(3, 4, 55.0),
            device_id: 1,
            gain_db: -71.25,
        }];
        let path = tmp("meas.csv");
        write_measurements_csv(&path, &records).unwrap();
        assert_eq!(read_measurements_csv(&path).unwrap(), records);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("uav_id,t,ix,iy,altitude_m,device_id,gain_db"));
    }

    #[test]
    fn trajectory_json_reserializes_byte_identically() {
        use crate::learner::TrajUav;
        let traj = vec![TrajStep {
            t: 0,
            uavs: vec![TrajUav {
                ix: 1,
                iy: 2,
                battery: 59.5,
                assigned: Some(3),
            }],
            reward: 4.25,
        }];
        let path = tmp("traj.json");
        write_trajectory_json(&path, &traj).unwrap();
        let first = fs::read(&path).unwrap();
        let reloaded = read_trajectory_json(&path).unwrap();
        write_trajectory_json(&path, &reloaded).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
    }
}
