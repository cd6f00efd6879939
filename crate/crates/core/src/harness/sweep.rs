use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{evaluate_requests, resumable_json, HarnessError, SplitName, SweepConfig, Workspace};
use crate::querygen::GeneratorMode;

/// The calibration grid: `0.0, 0.2, ..., 1.6`, or the configured one, plus 1.7
/// when requested.
pub fn default_grid(cfg: &SweepConfig) -> Vec<f64> {
    let mut grid = if cfg.grid.is_empty() {
        (0..=8).map(|i| (2 * i) as f64 / 10.0).collect()
    } else {
        cfg.grid.clone()
    };
    if cfg.include_endpoint && !grid.contains(&1.7) {
        grid.push(1.7);
    }
    grid
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub temperature: f64,
    pub recall_at_5: f64,
    pub n_evaluated: usize,
    pub n_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub mode: GeneratorMode,
    pub model_ref: String,
    pub split: SplitName,
    pub subsample_size: usize,
    pub points: Vec<SweepPoint>,
    /// Highest Recall@5; ties go to the lowest temperature.
    pub best_temperature: f64,
    pub best_recall_at_5: f64,
    pub provenance: super::Provenance,
}

/// Evaluates `mode` at each temperature of `grid` on a seeded subsample of the
/// configured split.
pub fn temperature_sweep(ws: &Workspace, mode: GeneratorMode, grid: &[f64]) -> Result<SweepReport, HarnessError> {
    if grid.is_empty() {
        return Err(HarnessError::Config("empty temperature grid".into()));
    }
    if let Some(t) = grid.iter().find(|t| !(**t >= 0.0 && t.is_finite())) {
        return Err(HarnessError::Config(format!("invalid temperature {t}")));
    }
    let cfg = &ws.config.sweep;
    let model_ref = ws.model_for(mode)?;
    let all = ws.requests_for(cfg.split);
    let requests: Vec<_> = match cfg.subsample {
        Some(n) if n < all.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(ws.config.seed);
            let mut picked = sample(&mut rng, all.len(), n).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| all[i].clone()).collect()
        }
        _ => all.to_vec(),
    };
    let grid_key: Vec<String> = grid.iter().map(|t| t.to_string()).collect();
    let key = ws.stage_key(&["sweep", mode_name(mode), &model_ref, &grid_key.join(",")]);
    let path = ws.run_dir().join("sweep").join(format!("{}.json", mode_name(mode)));
    resumable_json(&path, &key, || {
        let mut points = Vec::with_capacity(grid.len());
        for &t in grid {
            let (g, _, _) = ws.mode_generator(mode, Some(t))?;
            let out = evaluate_requests(
                &requests,
                Some(g.as_ref()),
                ws.index_for(cfg.split),
                &*ws.provider,
                &ws.config.retrieval,
                &[5],
                ws.config.mmrr_numerator,
            )?;
            points.push(SweepPoint {
                temperature: t,
                recall_at_5: out.report.recall(5).unwrap_or(0.0),
                n_evaluated: out.report.n_samples,
                n_failed: out.failures.len(),
            });
        }
        let mut best = &points[0];
        for p in &points[1..] {
            if p.recall_at_5 > best.recall_at_5 || (p.recall_at_5 == best.recall_at_5 && p.temperature < best.temperature) {
                best = p;
            }
        }
        Ok(SweepReport {
            mode,
            model_ref: model_ref.clone(),
            split: cfg.split,
            subsample_size: requests.len(),
            best_temperature: best.temperature,
            best_recall_at_5: best.recall_at_5,
            points,
            provenance: ws.provenance(),
        })
    })
}

fn mode_name(mode: GeneratorMode) -> &'static str {
    match mode {
        GeneratorMode::ZeroShot => "zero_shot",
        GeneratorMode::Sft => "sft",
        GeneratorMode::Aligned => "aligned",
    }
}
