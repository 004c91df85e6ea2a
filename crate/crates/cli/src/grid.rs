//! The experiment grid: every cell fits all tracks with one configuration
//! and is scored with [`evaluate`](crate::pipeline::evaluate).
//!
//! A grid spec lists explicit `cells`, an `axes` product, or both:
//!
//! ```toml
//! [base]              # FitConfig shared by every cell
//! stage2_iters = 50
//!
//! [axes]
//! window_sizes = [1, 100]
//! lambda_vel = [100.0, 1000.0, 10000.0, 100000.0]
//! acceleration = [false, true]
//! median = [false, true]
//! common_size = [false, true]
//!
//! [[cells]]
//! window_size = 100
//! lambda_vel = 100.0
//! acceleration = true
//! median = true
//! common_size = false
//! ```
//!
//! The results table has the header
//! `window_size,lambda_vel,acceleration,median,common_size,me_p,me_v,status,message`
//! and is sorted by descending `me_p`, failed cells first.

use std::cmp::Ordering;
use std::io::Write;

use birdfit::io::{GroundTruth, ObservationsFile};
use birdfit::{Camera, FitConfig, SkeletonModel};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::pipeline::{evaluate, fit_observations};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridCell {
    pub window_size: usize,
    pub lambda_vel: f64,
    /// Adds the acceleration term with the same weight as the velocity term.
    pub acceleration: bool,
    pub median: bool,
    pub common_size: bool,
}

impl GridCell {
    pub fn apply(&self, base: &FitConfig) -> FitConfig {
        FitConfig {
            window_size: self.window_size,
            lambda_vel: self.lambda_vel,
            lambda_acc: if self.acceleration { self.lambda_vel } else { 0.0 },
            use_median_filter: self.median,
            common_size: self.common_size,
            ..*base
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridAxes {
    pub window_sizes: Vec<usize>,
    pub lambda_vel: Vec<f64>,
    pub acceleration: Vec<bool>,
    pub median: Vec<bool>,
    pub common_size: Vec<bool>,
}

impl Default for GridAxes {
    fn default() -> Self {
        Self {
            window_sizes: vec![1, 100],
            lambda_vel: vec![1e2, 1e3, 1e4, 1e5],
            acceleration: vec![false, true],
            median: vec![false, true],
            common_size: vec![false, true],
        }
    }
}

impl GridAxes {
    /// The full product, except that a window of one frame has no temporal
    /// terms and no shared size, so only the median axis varies there.
    pub fn enumerate(&self) -> Vec<GridCell> {
        let mut out = Vec::new();
        for &window_size in &self.window_sizes {
            if window_size == 1 {
                for &median in &self.median {
                    out.push(GridCell { window_size, lambda_vel: 0.0, acceleration: false, median, common_size: false });
                }
                continue;
            }
            for &lambda_vel in &self.lambda_vel {
                for &acceleration in &self.acceleration {
                    for &median in &self.median {
                        for &common_size in &self.common_size {
                            out.push(GridCell { window_size, lambda_vel, acceleration, median, common_size });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub base: FitConfig,
    pub axes: Option<GridAxes>,
    pub cells: Vec<GridCell>,
}

impl GridSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string().trim().replace('\n', " ")))
    }

    /// Explicit cells first, then the axes product.
    pub fn all_cells(&self) -> Vec<GridCell> {
        let mut cells = self.cells.clone();
        if let Some(axes) = &self.axes {
            cells.extend(axes.enumerate());
        }
        cells
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub cell: GridCell,
    pub me_p: Option<f64>,
    pub me_v: Option<f64>,
    /// `ok`, or the error kind.
    pub status: String,
    pub message: String,
}

fn run_cell(cell: &GridCell, base: &FitConfig, model: &SkeletonModel, camera: &Camera, observations: &[ObservationsFile], gt: &GroundTruth) -> GridRow {
    let outcome = (|| {
        let config = cell.apply(base);
        let fits = observations.iter().map(|o| fit_observations(model, camera, o, &config)).collect::<Result<Vec<_>>>()?;
        evaluate(&fits, gt)
    })();
    match outcome {
        Ok(r) => GridRow { cell: *cell, me_p: Some(r.me_p), me_v: r.me_v, status: "ok".into(), message: String::new() },
        Err(e) => GridRow { cell: *cell, me_p: None, me_v: None, status: e.kind().into(), message: e.to_string() },
    }
}

/// Runs every cell on a pool of `jobs` threads. A failing cell is recorded
/// in its row and the grid continues. Rows come back sorted by descending
/// `me_p` with failures first; ties keep the order of the grid spec.
pub fn run_grid(
    spec: &GridSpec,
    model: &SkeletonModel,
    camera: &Camera,
    observations: &[ObservationsFile],
    gt: &GroundTruth,
    jobs: usize,
) -> Result<Vec<GridRow>> {
    let cells = spec.all_cells();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build().map_err(|e| CliError::Usage(format!("cannot start worker pool: {e}")))?;
    let mut rows: Vec<GridRow> = pool.install(|| cells.par_iter().map(|c| run_cell(c, &spec.base, model, camera, observations, gt)).collect());
    rows.sort_by(row_order);
    Ok(rows)
}

fn row_order(a: &GridRow, b: &GridRow) -> Ordering {
    match (a.me_p, b.me_p) {
        (None, None) => Ordering::Equal,
        (None, Some(_)) => Ordering::Less,
        (Some(_), None) => Ordering::Greater,
        (Some(x), Some(y)) => y.total_cmp(&x),
    }
}

fn number(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_table<W: Write>(rows: &[GridRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["window_size", "lambda_vel", "acceleration", "median", "common_size", "me_p", "me_v", "status", "message"])?;
    for r in rows {
        let flag = |b: bool| if b { "1" } else { "0" }.to_string();
        w.write_record([
            r.cell.window_size.to_string(),
            r.cell.lambda_vel.to_string(),
            flag(r.cell.acceleration),
            flag(r.cell.median),
            flag(r.cell.common_size),
            number(r.me_p),
            number(r.me_v),
            r.status.clone(),
            r.message.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_axes_give_thirty_four_cells() {
        let cells = GridAxes::default().enumerate();
        assert_eq!(cells.len(), 2 + 4 * 2 * 2 * 2);
        assert_eq!(cells.iter().filter(|c| c.window_size == 1).count(), 2);
    }

    #[test]
    fn cell_sets_acceleration_weight() {
        let c = GridCell { window_size: 100, lambda_vel: 1e3, acceleration: true, median: true, common_size: false };
        let cfg = c.apply(&FitConfig::default());
        assert_eq!((cfg.lambda_vel, cfg.lambda_acc), (1e3, 1e3));
        assert!(cfg.use_median_filter && !cfg.common_size);
        let cfg = GridCell { acceleration: false, ..c }.apply(&FitConfig::default());
        assert_eq!(cfg.lambda_acc, 0.0);
    }

    #[test]
    fn spec_parses_cells_and_axes() {
        let spec = GridSpec::from_toml(
            "[base]\nstage1_iters = 5\n[axes]\nwindow_sizes = [1]\nmedian = [true]\n\n[[cells]]\nwindow_size = 3\nlambda_vel = 10.0\nacceleration = false\nmedian = false\ncommon_size = true\n",
        )
        .unwrap();
        assert_eq!(spec.base.stage1_iters, 5);
        let cells = spec.all_cells();
        assert_eq!(cells.len(), 2);
        assert_eq!(cells[0].window_size, 3);
        assert!(cells[1].median);
    }

    #[test]
    fn empty_grid_gives_header_only() {
        let rows = run_grid(&GridSpec::default(), &SkeletonModel::default_bird(), &Camera::default(), &[], &GroundTruth::new(), 1).unwrap();
        assert!(rows.is_empty());
        let mut buf = Vec::new();
        write_table(&rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "window_size,lambda_vel,acceleration,median,common_size,me_p,me_v,status,message\n");
    }

    #[test]
    fn failures_sort_first_then_descending() {
        let cell = GridCell { window_size: 1, lambda_vel: 0.0, acceleration: false, median: false, common_size: false };
        let row = |m: Option<f64>| GridRow { cell, me_p: m, me_v: None, status: "ok".into(), message: String::new() };
        let mut rows = [row(Some(0.1)), row(None), row(Some(0.3))];
        rows.sort_by(row_order);
        assert_eq!(rows.iter().map(|r| r.me_p).collect::<Vec<_>>(), vec![None, Some(0.3), Some(0.1)]);
    }
}
