//! Retrieval metrics and the per-stage feature divergence analysis.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffcore::{cosine_distance, Tensor};
use crate::error::{Error, Result};

/// Variance floor of the per-channel Gaussian fits.
pub const DIVERGENCE_EPS: f64 = 1e-8;

/// CMC ranks reported by default.
pub const CMC_RANKS: [usize; 4] = [1, 5, 10, 20];

/// `[q, g]` matrix of cosine distances between query and gallery rows.
pub fn pairwise_distances(queries: &Tensor, gallery: &Tensor) -> Result<Tensor> {
    let [nq, dq] = queries.dims2()?;
    let [ng, dg] = gallery.dims2()?;
    if dq != dg {
        return Err(Error::shape(format!("query dim {dq} vs gallery dim {dg}")));
    }
    let mut out = Vec::with_capacity(nq * ng);
    for i in 0..nq {
        for j in 0..ng {
            out.push(cosine_distance(queries.row(i), gallery.row(j))?);
        }
    }
    Tensor::new(&[nq, ng], out)
}

/// Gallery ranked for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct Ranking {
    /// Gallery indices by increasing distance, ties by index.
    pub order: Vec<usize>,
    pub distances: Vec<f64>,
    pub relevant: Vec<bool>,
}

impl Ranking {
    pub fn num_relevant(&self) -> usize {
        self.relevant.iter().filter(|&&r| r).count()
    }

    /// 1-based rank of the first relevant item.
    pub fn first_hit(&self) -> Option<usize> {
        self.relevant.iter().position(|&r| r).map(|p| p + 1)
    }

    pub fn average_precision(&self) -> Option<f64> {
        let total = self.num_relevant();
        if total == 0 {
            return None;
        }
        let mut hits = 0;
        let mut sum = 0.0;
        for (i, &r) in self.relevant.iter().enumerate() {
            if r {
                hits += 1;
                sum += hits as f64 / (i + 1) as f64;
            }
        }
        Some(sum / total as f64)
    }
}

/// Ranks the gallery for every query. `exclude[q]`, when given, names a
/// gallery index that is the same sample as query `q` and is left out.
pub fn rank_gallery(
    dist: &Tensor,
    query_labels: &[usize],
    gallery_labels: &[usize],
    exclude: Option<&[Option<usize>]>,
) -> Result<Vec<Ranking>> {
    let [nq, ng] = dist.dims2()?;
    if query_labels.len() != nq || gallery_labels.len() != ng {
        return Err(Error::shape("labels do not match the distance matrix"));
    }
    if exclude.is_some_and(|e| e.len() != nq) {
        return Err(Error::shape("exclusion list does not match the queries"));
    }
    (0..nq)
        .map(|q| {
            let row = dist.row(q);
            let skip = exclude.and_then(|e| e[q]);
            let mut order: Vec<usize> = (0..ng).filter(|&g| Some(g) != skip).collect();
            order.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
            Ok(Ranking {
                distances: order.iter().map(|&g| row[g]).collect(),
                relevant: order
                    .iter()
                    .map(|&g| gallery_labels[g] == query_labels[q])
                    .collect(),
                order,
            })
        })
        .collect()
}

fn scored(rankings: &[Ranking]) -> Result<Vec<&Ranking>> {
    let kept: Vec<&Ranking> = rankings.iter().filter(|r| r.num_relevant() > 0).collect();
    if kept.is_empty() {
        return Err(Error::Empty("no query with a relevant gallery item"));
    }
    Ok(kept)
}

/// Mean average precision over queries that have a relevant item.
pub fn mean_average_precision(rankings: &[Ranking]) -> Result<f64> {
    let kept = scored(rankings)?;
    let sum: f64 = kept.iter().filter_map(|r| r.average_precision()).sum();
    Ok(sum / kept.len() as f64)
}

/// Fraction of queries whose first relevant item is within the top `k`.
pub fn cmc_rank_k(rankings: &[Ranking], k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::InvalidArgument("CMC rank must be at least 1".into()));
    }
    let kept = scored(rankings)?;
    let hits = kept
        .iter()
        .filter(|r| r.first_hit().is_some_and(|h| h <= k))
        .count();
    Ok(hits as f64 / kept.len() as f64)
}

/// Closed-form symmetric KL between two univariate Gaussians.
pub fn gaussian_skl(mean_a: f64, var_a: f64, mean_b: f64, var_b: f64) -> f64 {
    let kl = |m1: f64, v1: f64, m2: f64, v2: f64| {
        0.5 * (v2 / v1).ln() + (v1 + (m1 - m2).powi(2)) / (2.0 * v2) - 0.5
    };
    0.5 * (kl(mean_a, var_a, mean_b, var_b) + kl(mean_b, var_b, mean_a, var_a))
}

fn channel_fit(x: &Tensor) -> Result<Vec<(f64, f64)>> {
    let [n, c] = x.dims2()?;
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "divergence needs at least 2 samples per domain, got {n}"
        )));
    }
    Ok((0..c)
        .map(|k| {
            let mean = (0..n).map(|i| x.row(i)[k]).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (x.row(i)[k] - mean).powi(2)).sum::<f64>() / n as f64;
            (mean, var + DIVERGENCE_EPS)
        })
        .collect())
}

/// Divergence of one stage: per-channel symmetric KL and its mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageDivergence {
    pub mean: f64,
    pub per_channel: Vec<f64>,
}

/// Fits a Gaussian per channel to `[n, c]` pooled activations from each
/// domain and compares them.
pub fn symmetric_feature_divergence(a: &Tensor, b: &Tensor) -> Result<StageDivergence> {
    let (fa, fb) = (channel_fit(a)?, channel_fit(b)?);
    if fa.len() != fb.len() {
        return Err(Error::shape(format!(
            "{} channels vs {} channels",
            fa.len(),
            fb.len()
        )));
    }
    let per_channel: Vec<f64> = fa
        .iter()
        .zip(&fb)
        .map(|(&(ma, va), &(mb, vb))| gaussian_skl(ma, va, mb, vb).max(0.0))
        .collect();
    let mean = per_channel.iter().sum::<f64>() / per_channel.len().max(1) as f64;
    Ok(StageDivergence { mean, per_channel })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub domains: [usize; 2],
    pub stages: Vec<StageDivergence>,
    pub config_hash: String,
}

impl DivergenceReport {
    /// Per-stage features of two domains, stage by stage.
    pub fn compute(
        domains: [usize; 2],
        a: &[Tensor],
        b: &[Tensor],
        config_hash: String,
    ) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::shape("stage counts differ"));
        }
        let stages = a
            .iter()
            .zip(b)
            .map(|(x, y)| symmetric_feature_divergence(x, y))
            .collect::<Result<_>>()?;
        Ok(Self {
            domains,
            stages,
            config_hash,
        })
    }

    pub fn per_stage(&self) -> Vec<f64> {
        self.stages.iter().map(|s| s.mean).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,divergence\n");
        for (i, s) in self.stages.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i + 1, s.mean));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    /// CMC keyed by rank.
    pub cmc: BTreeMap<usize, f64>,
    #[serde(default)]
    pub divergence_per_stage: Option<Vec<f64>>,
    pub config_hash: String,
    pub num_queries: usize,
    pub num_gallery: usize,
}

impl EvalReport {
    pub fn rank1(&self) -> f64 {
        self.cmc.get(&1).copied().unwrap_or(0.0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\nmAP,");
        out.push_str(&format!("{}\n", self.map));
        for (k, v) in &self.cmc {
            out.push_str(&format!("rank{k},{v}\n"));
        }
        if let Some(d) = &self.divergence_per_stage {
            for (i, v) in d.iter().enumerate() {
                out.push_str(&format!("divergence_stage{},{v}\n", i + 1));
            }
        }
        out
    }
}

/// mAP and CMC at [`CMC_RANKS`] for query and gallery features.
pub fn evaluate_retrieval(
    query: &Tensor,
    query_labels: &[usize],
    gallery: &Tensor,
    gallery_labels: &[usize],
    exclude: Option<&[Option<usize>]>,
    config_hash: String,
) -> Result<EvalReport> {
    let dist = pairwise_distances(query, gallery)?;
    let rankings = rank_gallery(&dist, query_labels, gallery_labels, exclude)?;
    let mut cmc = BTreeMap::new();
    for k in CMC_RANKS {
        cmc.insert(k, cmc_rank_k(&rankings, k)?);
    }
    Ok(EvalReport {
        map: mean_average_precision(&rankings)?,
        cmc,
        divergence_per_stage: None,
        config_hash,
        num_queries: query_labels.len(),
        num_gallery: gallery_labels.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ranking(relevant: &[bool]) -> Ranking {
        Ranking {
            order: (0..relevant.len()).collect(),
            distances: (0..relevant.len()).map(|i| i as f64).collect(),
            relevant: relevant.to_vec(),
        }
    }

    #[test]
    fn ap_hand_examples() {
        let r = ranking(&[true, false, false]);
        assert_eq!(mean_average_precision(&[r]).unwrap(), 1.0);
        let r = ranking(&[true, false, true, false]);
        let ap = mean_average_precision(&[r]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn cmc_hand_examples() {
        let r = vec![ranking(&[false, false, true, false, false])];
        assert_eq!(cmc_rank_k(&r, 1).unwrap(), 0.0);
        assert_eq!(cmc_rank_k(&r, 5).unwrap(), 1.0);
        assert!(cmc_rank_k(&r, 0).is_err());
    }

    #[test]
    fn queries_without_matches_are_skipped() {
        let r = vec![ranking(&[false, false]), ranking(&[true, false])];
        assert_eq!(mean_average_precision(&r).unwrap(), 1.0);
        assert!(mean_average_precision(&r[..1]).is_err());
        assert!(mean_average_precision(&[]).is_err());
    }

    #[test]
    fn skl_unit_mean_shift() {
        assert!((gaussian_skl(0.0, 1.0, 1.0, 1.0) - 0.5).abs() < 1e-15);
        assert_eq!(gaussian_skl(0.3, 2.0, 0.3, 2.0), 0.0);
    }

    #[test]
    fn distance_cells() {
        let q = Tensor::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.0]]).unwrap();
        let g = Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 0.0]]).unwrap();
        let d = pairwise_distances(&q, &g).unwrap();
        assert!(d.row(0)[0] < 1e-15);
        assert_eq!(d.row(1)[1], 1.0);
        assert!(pairwise_distances(&q, &Tensor::zeros(&[2, 3])).is_err());
    }
}
