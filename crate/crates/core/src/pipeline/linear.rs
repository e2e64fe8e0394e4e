use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::report::write_json;
use super::run::SCHEMA_VERSION;
use super::svg::{line_chart, Series};
use super::write_atomic;
use crate::diffusion::linear_beta_schedule;
use crate::error::ensure;
use crate::linear_dpm::{analytic_loss, mc_loss_map, optimal_composite, tradeoff_curve, DataCovariance, TradeoffTable};
use crate::numeric::RngStream;
use crate::Result;

/// Linear-model study: a random data covariance and a noise schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearStudyConfig {
    pub dim: usize,
    pub rank: usize,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Diffusion steps in `1..=steps`.
    pub t_grid: Vec<usize>,
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for LinearStudyConfig {
    fn default() -> Self {
        Self {
            dim: 8,
            rank: 8,
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            t_grid: vec![1, 10, 50, 100, 200, 300, 400, 500, 600, 700, 800, 900, 1000],
            mc_samples: 20_000,
            seed: 0,
        }
    }
}

/// Loss terms at the optimal map for one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearStudyRow {
    pub t: usize,
    pub alpha_bar: f64,
    pub kappa: f64,
    pub representation: f64,
    pub regularization: f64,
    pub total: f64,
    pub mc_estimate: f64,
    pub mc_std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearStudyReport {
    pub schema_version: u32,
    pub config: LinearStudyConfig,
    pub eigenvalues: Vec<f64>,
    pub tradeoff: TradeoffTable,
    pub rows: Vec<LinearStudyRow>,
}

pub fn run_linear_study(cfg: &LinearStudyConfig) -> Result<LinearStudyReport> {
    ensure!(
        cfg.rank >= 1 && cfg.rank <= cfg.dim,
        Config,
        "rank must lie in [1, dim]"
    );
    let schedule = linear_beta_schedule(cfg.steps, cfg.beta_start, cfg.beta_end)?;
    let mut rng = RngStream::new(cfg.seed, 0);
    let cov = DataCovariance::random(cfg.dim, cfg.rank, &mut rng)?;
    let tradeoff = tradeoff_curve(&cov, &schedule, &cfg.t_grid)?;
    let mut rows = Vec::with_capacity(cfg.t_grid.len());
    for row in &tradeoff.rows {
        let ab = row.alpha_bar;
        let p = optimal_composite(&cov, ab)?;
        let a = analytic_loss(&p, cov.matrix(), ab)?;
        let mc = mc_loss_map(&p, &cov, ab, cfg.mc_samples, &mut rng.child(row.t as u64))?;
        rows.push(LinearStudyRow {
            t: row.t,
            alpha_bar: ab,
            kappa: row.kappa,
            representation: a.representation,
            regularization: a.regularization,
            total: a.total,
            mc_estimate: mc.estimate,
            mc_std_error: mc.std_error,
        });
    }
    Ok(LinearStudyReport {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        eigenvalues: cov.eigenvalues().to_vec(),
        tradeoff,
        rows,
    })
}

impl LinearStudyReport {
    pub fn losses_csv(&self) -> String {
        let mut s = String::from("t,alpha_bar,kappa,representation,regularization,total,mc_estimate,mc_std_error\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
                r.t, r.alpha_bar, r.kappa, r.representation, r.regularization, r.total, r.mc_estimate, r.mc_std_error
            );
        }
        s
    }

    pub fn kappa_svg(&self) -> String {
        let pts = |f: fn(&LinearStudyRow) -> f64| self.rows.iter().map(|r| (r.t as f64, f(r))).collect();
        line_chart(
            "Optimal linear denoiser",
            "t",
            "value",
            &[
                Series::new("condition number", pts(|r| r.kappa)),
                Series::new("representation term", pts(|r| r.representation)),
                Series::new("regularization term", pts(|r| r.regularization)),
            ],
        )
    }

    /// `report.json`, `tradeoff.csv`, `losses.csv`, `tradeoff.svg`.
    pub fn emit(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join("report.json"), self)?;
        write_atomic(&dir.join("tradeoff.csv"), self.tradeoff.to_csv().as_bytes())?;
        write_atomic(&dir.join("losses.csv"), self.losses_csv().as_bytes())?;
        write_atomic(&dir.join("tradeoff.svg"), self.kappa_svg().as_bytes())
    }
}
