use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::pipeline::{run_all, Stage};
use super::{io_err, ExperimentConfig, ExperimentError, Result};

/// Marker written into a run directory whose pipeline returned an error.
pub const FAILED_MARKER: &str = "FAILED";

pub const COLUMNS: [(&str, &str); 4] = [
    ("dev", "with_nlsyms"),
    ("dev", "no_nlsyms"),
    ("eval", "with_nlsyms"),
    ("eval", "no_nlsyms"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum Cell {
    /// Mean MER in percent over the seeds that produced a score.
    Value { mer: f64, seeds: usize, expected: usize },
    Missing,
    Failed { reason: String },
}

impl Cell {
    pub fn render(&self) -> String {
        match self {
            Cell::Value { mer, seeds, expected } if seeds == expected => format!("{mer:.2}"),
            Cell::Value { mer, seeds, expected } => format!("{mer:.2} ({seeds}/{expected})"),
            Cell::Missing => "MISSING".into(),
            Cell::Failed { .. } => "FAILED".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub system: String,
    pub label: u8,
    pub cells: Vec<Cell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn to_text(&self) -> String {
        let mut out = String::from("system\tlabel");
        for (split, variant) in COLUMNS {
            let _ = write!(out, "\t{split}/{variant}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{}\t{}", r.system, r.label);
            for c in &r.cells {
                let _ = write!(out, "\t{}", c.render());
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data") + "\n"
    }

    pub fn row(&self, system: &str, label: u8) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.system == system && r.label == label)
    }
}

enum RunResult {
    Scored(serde_json::Value),
    Failed(String),
    Missing,
}

fn inspect(dir: &Path) -> Result<RunResult> {
    let failed = dir.join(FAILED_MARKER);
    if failed.is_file() {
        let reason = fs::read_to_string(&failed).map_err(io_err(&failed))?;
        return Ok(RunResult::Failed(reason.trim().to_string()));
    }
    let summary = dir.join(Stage::Score.dir()).join("summary.json");
    if !summary.is_file() {
        return Ok(RunResult::Missing);
    }
    let text = fs::read_to_string(&summary).map_err(io_err(&summary))?;
    serde_json::from_str(&text)
        .map(RunResult::Scored)
        .map_err(|e| ExperimentError::Artifact { path: summary, reason: e.to_string() })
}

/// Collects scored runs into system × label rows, averaging over seeds.
/// Every directory must hold the `config.toml` written by the pipeline.
pub fn report(dirs: &[PathBuf]) -> Result<Report> {
    let mut groups: BTreeMap<(String, u8), Vec<RunResult>> = BTreeMap::new();
    let mut order: Vec<(String, u8)> = Vec::new();
    for dir in dirs {
        let cfg_path = dir.join("config.toml");
        if !cfg_path.is_file() {
            return Err(ExperimentError::MissingStage {
                stage: Stage::GenData.name(),
                artifact: cfg_path,
            });
        }
        let cfg = ExperimentConfig::read(&cfg_path)?;
        let key = (cfg.system.clone(), cfg.label);
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(inspect(dir)?);
    }
    let rows = order
        .into_iter()
        .map(|key| {
            let runs = &groups[&key];
            let cells = COLUMNS
                .iter()
                .map(|(split, variant)| {
                    let values: Vec<f64> = runs
                        .iter()
                        .filter_map(|r| match r {
                            RunResult::Scored(v) => v[split][variant].as_f64(),
                            _ => None,
                        })
                        .collect();
                    if !values.is_empty() {
                        Cell::Value {
                            mer: values.iter().sum::<f64>() / values.len() as f64,
                            seeds: values.len(),
                            expected: runs.len(),
                        }
                    } else if let Some(reason) = runs.iter().find_map(|r| match r {
                        RunResult::Failed(reason) => Some(reason.clone()),
                        _ => None,
                    }) {
                        Cell::Failed { reason }
                    } else {
                        Cell::Missing
                    }
                })
                .collect();
            ReportRow {
                system: key.0,
                label: key.1,
                cells,
            }
        })
        .collect();
    Ok(Report { rows })
}

/// Systems × labels × seeds sharing one base configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub base: ExperimentConfig,
    pub systems: Vec<String>,
    pub labels: Vec<u8>,
    pub seeds: Vec<u64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            base: ExperimentConfig::default(),
            systems: ["E2E", "E2ELD", "E2ESW", "E2E+SL", "E2E+3W", "E2ESW+3W+F3+SF"]
                .map(String::from)
                .to_vec(),
            labels: vec![1, 2],
            seeds: vec![1, 2, 3],
        }
    }
}

impl GridConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text)
    }

    /// Run directory for one cell of the grid.
    pub fn run_dir(root: &Path, system: &str, label: u8, seed: u64) -> PathBuf {
        let name: String = system
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '+' || c == '-' { c } else { '_' })
            .collect();
        root.join(name).join(format!("label{label}")).join(format!("seed{seed}"))
    }

    pub fn runs(&self) -> Vec<ExperimentConfig> {
        let mut out = Vec::new();
        for system in &self.systems {
            for &label in &self.labels {
                for &seed in &self.seeds {
                    out.push(ExperimentConfig {
                        system: system.clone(),
                        label,
                        seed,
                        ..self.base.clone()
                    });
                }
            }
        }
        out
    }
}

/// Runs every cell; a failing run is marked and the grid carries on.
pub fn run_grid(grid: &GridConfig, root: &Path, mut on_run: impl FnMut(&ExperimentConfig, &Result<()>)) -> Result<Report> {
    let mut dirs = Vec::new();
    for cfg in grid.runs() {
        let dir = GridConfig::run_dir(root, &cfg.system, cfg.label, cfg.seed);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        fs::write(dir.join("config.toml"), cfg.to_toml()?).map_err(io_err(&dir))?;
        let marker = dir.join(FAILED_MARKER);
        if marker.exists() {
            fs::remove_file(&marker).map_err(io_err(&marker))?;
        }
        let result = run_all(&dir, &cfg);
        if let Err(e) = &result {
            fs::write(&marker, format!("{e}\n")).map_err(io_err(&marker))?;
        }
        on_run(&cfg, &result);
        dirs.push(dir);
    }
    let rep = report(&dirs)?;
    fs::write(root.join("report.txt"), rep.to_text()).map_err(io_err(root))?;
    fs::write(root.join("report.json"), rep.to_json()).map_err(io_err(root))?;
    Ok(rep)
}
