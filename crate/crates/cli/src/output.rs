//! Artifact writers. Every file carries the hash of the config that produced it.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use rearrange_core::environment::{AggregateRow, EpisodeMetrics};

use crate::CliError;

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    config_hash: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

pub struct OutDir {
    root: PathBuf,
    hash: String,
}

impl OutDir {
    pub fn create(root: &Path, hash: String) -> Result<OutDir, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(OutDir { root: root.to_path_buf(), hash })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn create_file(&self, name: &str) -> Result<(BufWriter<File>, PathBuf), CliError> {
        let path = self.path(name);
        let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
        Ok((BufWriter::new(file), path))
    }

    pub fn json<T: Serialize>(&self, name: &str, body: &T) -> Result<(), CliError> {
        let (mut w, path) = self.create_file(name)?;
        serde_json::to_writer_pretty(&mut w, &Stamped { config_hash: &self.hash, body })
            .map_err(|e| CliError::io(&path, e.into()))?;
        writeln!(w).and_then(|_| w.flush()).map_err(|e| CliError::io(&path, e))
    }

    pub fn jsonl<T: Serialize>(&self, name: &str, rows: impl IntoIterator<Item = T>) -> Result<(), CliError> {
        let (mut w, path) = self.create_file(name)?;
        for row in rows {
            serde_json::to_writer(&mut w, &Stamped { config_hash: &self.hash, body: &row })
                .map_err(|e| CliError::io(&path, e.into()))?;
            writeln!(w).map_err(|e| CliError::io(&path, e))?;
        }
        w.flush().map_err(|e| CliError::io(&path, e))
    }

    /// Free text with the hash on a leading `#` line.
    pub fn text(&self, name: &str, body: &str) -> Result<(), CliError> {
        let path = self.path(name);
        fs::write(&path, format!("# config_hash {}\n{body}", self.hash)).map_err(|e| CliError::io(&path, e))
    }

    fn csv(&self, name: &str, header: &[&str], rows: Vec<Vec<String>>) -> Result<(), CliError> {
        let path = self.path(name);
        let fail = |e: csv::Error| CliError::io(&path, e.into());
        let mut w = csv::Writer::from_path(&path).map_err(fail)?;
        w.write_record(std::iter::once("config_hash").chain(header.iter().copied())).map_err(fail)?;
        for row in rows {
            w.write_record(std::iter::once(self.hash.clone()).chain(row)).map_err(fail)?;
        }
        w.flush().map_err(|e| CliError::io(&path, e))
    }

    /// Mean and standard error of every reported metric per difficulty.
    pub fn aggregate_csv(&self, rows: &[AggregateRow]) -> Result<(), CliError> {
        let header = [
            "difficulty",
            "episodes",
            "success_rate",
            "success_se",
            "reward_mean",
            "reward_se",
            "steps_mean",
            "steps_se",
            "planning_time_mean",
            "planning_time_se",
            "tokens_mean",
            "tokens_se",
        ];
        let rows = rows
            .iter()
            .map(|r| {
                let mut row = vec![r.difficulty.clone(), r.episodes.to_string()];
                row.extend(
                    [
                        r.success_rate,
                        r.success_se,
                        r.reward_mean,
                        r.reward_se,
                        r.steps_mean,
                        r.steps_se,
                        r.planning_time_mean,
                        r.planning_time_se,
                        r.tokens_mean,
                        r.tokens_se,
                    ]
                    .map(|v| v.to_string()),
                );
                row
            })
            .collect();
        self.csv("aggregate.csv", &header, rows)
    }

    /// One row per difficulty with the three bar-chart panels: cumulative
    /// reward, success rate in percent, and total steps against the limit.
    pub fn plot_csv(&self, method: &str, rows: &[AggregateRow], episodes: &[EpisodeMetrics]) -> Result<(), CliError> {
        let header = [
            "method",
            "difficulty",
            "reward_mean",
            "reward_se",
            "success_pct",
            "success_pct_se",
            "steps_mean",
            "steps_se",
            "step_limit",
        ];
        let rows = rows
            .iter()
            .map(|r| {
                let limit = episodes
                    .iter()
                    .filter(|e| e.difficulty.map_or("unspecified".to_string(), |d| d.to_string()) == r.difficulty)
                    .map(|e| e.step_limit)
                    .max()
                    .unwrap_or(0);
                vec![
                    method.to_string(),
                    r.difficulty.clone(),
                    r.reward_mean.to_string(),
                    r.reward_se.to_string(),
                    (100.0 * r.success_rate).to_string(),
                    (100.0 * r.success_se).to_string(),
                    r.steps_mean.to_string(),
                    r.steps_se.to_string(),
                    limit.to_string(),
                ]
            })
            .collect();
        self.csv("plot_data.csv", &header, rows)
    }
}
