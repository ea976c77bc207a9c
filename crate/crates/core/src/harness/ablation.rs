use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::train::{divergence_from_checkpoint, evaluate_checkpoint, train_run};
use super::{Scheme, TrainConfig};
use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use crate::evalkit::EvalReport;

/// Samples per domain used for the divergence analysis.
pub const DIVERGENCE_SAMPLES: usize = 500;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationMatrix {
    pub schemes: Vec<Scheme>,
    pub seeds: Vec<u64>,
    /// Shared settings; `scheme`, `seed` and `target_domain` are overridden.
    pub base: TrainConfig,
    pub target_domains: Vec<usize>,
    /// Source domains compared stage by stage, if any.
    #[serde(default)]
    pub divergence_domains: Option<[usize; 2]>,
}

impl AblationMatrix {
    pub fn validate(&self) -> Result<()> {
        if self.schemes.is_empty() || self.seeds.is_empty() || self.target_domains.is_empty() {
            return Err(Error::Config(
                "ablation needs at least one scheme, seed and target domain".into(),
            ));
        }
        self.base.validate()
    }

    pub fn cell_config(&self, scheme: Scheme, seed: u64) -> TrainConfig {
        TrainConfig {
            scheme,
            seed,
            target_domain: None,
            ..self.base.clone()
        }
    }
}

/// Outcome of one (scheme, seed) training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub scheme: Scheme,
    pub seed: u64,
    /// Reports keyed by target domain, in `target_domains` order.
    pub evals: Vec<(usize, EvalReport)>,
    pub divergence: Option<Vec<f64>>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub scheme: String,
    pub target_domain: usize,
    pub map_mean: f64,
    pub map_std: f64,
    pub rank1_mean: f64,
    pub rank1_std: f64,
    /// Per-stage divergence averaged over seeds.
    pub divergence_mean: Option<Vec<f64>>,
    pub runs: usize,
    pub failed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub cells: Vec<AblationCell>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl AblationTable {
    fn summarize(matrix: &AblationMatrix, cells: Vec<AblationCell>) -> Self {
        let mut rows = Vec::new();
        for &scheme in &matrix.schemes {
            let mine: Vec<&AblationCell> = cells.iter().filter(|c| c.scheme == scheme).collect();
            let ok: Vec<&&AblationCell> = mine.iter().filter(|c| c.error.is_none()).collect();
            let divergence = {
                let all: Vec<&Vec<f64>> = ok.iter().filter_map(|c| c.divergence.as_ref()).collect();
                (!all.is_empty()).then(|| {
                    (0..all[0].len())
                        .map(|s| all.iter().map(|d| d[s]).sum::<f64>() / all.len() as f64)
                        .collect()
                })
            };
            for &domain in &matrix.target_domains {
                let reports: Vec<&EvalReport> = ok
                    .iter()
                    .filter_map(|c| c.evals.iter().find(|(d, _)| *d == domain).map(|(_, r)| r))
                    .collect();
                let (map_mean, map_std) =
                    mean_std(&reports.iter().map(|r| r.map).collect::<Vec<_>>());
                let (rank1_mean, rank1_std) =
                    mean_std(&reports.iter().map(|r| r.rank1()).collect::<Vec<_>>());
                rows.push(AblationRow {
                    scheme: scheme.label(),
                    target_domain: domain,
                    map_mean,
                    map_std,
                    rank1_mean,
                    rank1_std,
                    divergence_mean: divergence.clone(),
                    runs: reports.len(),
                    failed: mine.len() - ok.len(),
                });
            }
        }
        Self { rows, cells }
    }

    pub fn row(&self, scheme: Scheme, domain: usize) -> Option<&AblationRow> {
        let label = scheme.label();
        self.rows
            .iter()
            .find(|r| r.scheme == label && r.target_domain == domain)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "scheme,target_domain,map_mean,map_std,rank1_mean,rank1_std,runs,failed\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.scheme,
                r.target_domain,
                r.map_mean,
                r.map_std,
                r.rank1_mean,
                r.rank1_std,
                r.runs,
                r.failed
            ));
        }
        out
    }
}

fn run_cell(
    matrix: &AblationMatrix,
    manifest: &DatasetManifest,
    scheme: Scheme,
    seed: u64,
    dir: &Path,
) -> Result<AblationCell> {
    let cfg = matrix.cell_config(scheme, seed);
    let record = train_run(&cfg, dir)?;
    let ckpt = dir.join(&record.checkpoint);
    let evals = matrix
        .target_domains
        .iter()
        .map(|&d| Ok((d, evaluate_checkpoint(&ckpt, manifest, d)?)))
        .collect::<Result<_>>()?;
    let divergence = match matrix.divergence_domains {
        Some(pair) => {
            Some(divergence_from_checkpoint(&ckpt, manifest, pair, DIVERGENCE_SAMPLES)?.per_stage())
        }
        None => None,
    };
    Ok(AblationCell {
        scheme,
        seed,
        evals,
        divergence,
        error: None,
    })
}

/// Trains every (scheme, seed) cell under `out/<scheme>/seed_<s>` and writes
/// `ablation.json`, `ablation.csv` and `timing.json`. A failing cell is
/// recorded and the sweep continues.
pub fn run_ablation(matrix: &AblationMatrix, out: &Path) -> Result<AblationTable> {
    matrix.validate()?;
    let manifest = DatasetManifest::read(&matrix.base.dataset)?;
    let mut cells = Vec::new();
    let mut timing = Vec::new();
    for &scheme in &matrix.schemes {
        for &seed in &matrix.seeds {
            let dir = out.join(scheme.to_string()).join(format!("seed_{seed}"));
            let t = Instant::now();
            let cell = run_cell(matrix, &manifest, scheme, seed, &dir).unwrap_or_else(|e| {
                log::warn!("{scheme} seed {seed} failed: {e}");
                AblationCell {
                    scheme,
                    seed,
                    evals: Vec::new(),
                    divergence: None,
                    error: Some(e.to_string()),
                }
            });
            timing.push(serde_json::json!({
                "scheme": scheme, "seed": seed, "seconds": t.elapsed().as_secs_f64()
            }));
            cells.push(cell);
        }
    }
    let table = AblationTable::summarize(matrix, cells);
    let write = |name: &str, text: String| {
        let p = out.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write("ablation.json", serde_json::to_string_pretty(&table)?)?;
    write("ablation.csv", table.to_csv())?;
    write("timing.json", serde_json::to_string_pretty(&timing)?)?;
    Ok(table)
}
