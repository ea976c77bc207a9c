//! Dual causality loss, re-identification losses and the joint objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::scalar::{guarded_cosine_distance, softplus};
use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Default stage weights of the dual causality terms.
pub const DEFAULT_LAMBDA: [f64; 4] = [0.1, 0.1, 0.5, 0.5];

/// Default label smoothing of the identity classifier.
pub const DEFAULT_LABEL_SMOOTHING: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TripletIndex {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

impl TripletIndex {
    pub fn new(anchor: usize, positive: usize, negative: usize) -> Self {
        Self {
            anchor,
            positive,
            negative,
        }
    }

    pub fn validate(&self, labels: &[usize]) -> Result<()> {
        let err = |reason| Error::Triplet {
            anchor: self.anchor,
            positive: self.positive,
            negative: self.negative,
            reason,
        };
        let n = labels.len();
        if self.anchor >= n || self.positive >= n || self.negative >= n {
            return Err(err("index out of range"));
        }
        if self.anchor == self.positive {
            return Err(err("anchor and positive are the same sample"));
        }
        if labels[self.anchor] != labels[self.positive] {
            return Err(err("positive has a different identity"));
        }
        if labels[self.anchor] == labels[self.negative] {
            return Err(err("negative shares the anchor identity"));
        }
        Ok(())
    }
}

/// How triplets for the dual causality loss are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletPolicy {
    /// One uniform positive and one uniform negative per anchor.
    #[default]
    Random,
    /// Reuse the hardest positive/negative found for the triplet loss.
    BatchHard,
}

/// One uniformly drawn positive and negative for every anchor that has both.
pub fn sample_triplets(labels: &[usize], rng: &mut impl Rng) -> Result<Vec<TripletIndex>> {
    let mut out = Vec::new();
    for (a, &la) in labels.iter().enumerate() {
        let pos: Vec<usize> = (0..labels.len())
            .filter(|&j| j != a && labels[j] == la)
            .collect();
        let neg: Vec<usize> = (0..labels.len()).filter(|&j| labels[j] != la).collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let p = pos[rng.gen_range(0..pos.len())];
        let n = neg[rng.gen_range(0..neg.len())];
        out.push(TripletIndex::new(a, p, n));
    }
    if out.is_empty() {
        return Err(Error::Empty("no valid triplet in batch"));
    }
    Ok(out)
}

fn check_identities(labels: &[usize]) -> Result<()> {
    let first = labels.first().ok_or(Error::Empty("empty batch"))?;
    if labels.iter().all(|l| l == first) {
        return Err(Error::InvalidArgument(
            "batch contains a single identity".into(),
        ));
    }
    Ok(())
}

/// Hardest positive (farthest same identity) and hardest negative (nearest
/// other identity) for every anchor that has a positive. Ties go to the
/// lowest index.
pub fn batch_hard_triplets(embeddings: &Tensor, labels: &[usize]) -> Result<Vec<TripletIndex>> {
    let [n, _] = embeddings.dims2()?;
    if labels.len() != n {
        return Err(Error::shape(format!(
            "{} labels for {n} embeddings",
            labels.len()
        )));
    }
    check_identities(labels)?;
    let dist = |i: usize, j: usize| {
        crate::diffcore::scalar::euclidean(embeddings.row(i), embeddings.row(j))
    };
    let mut out = Vec::new();
    for a in 0..n {
        let mut hard_pos: Option<(usize, f64)> = None;
        let mut hard_neg: Option<(usize, f64)> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            let d = dist(a, j);
            if labels[j] == labels[a] {
                if hard_pos.map_or(true, |(_, best)| d > best) {
                    hard_pos = Some((j, d));
                }
            } else if hard_neg.map_or(true, |(_, best)| d < best) {
                hard_neg = Some((j, d));
            }
        }
        if let (Some((p, _)), Some((q, _))) = (hard_pos, hard_neg) {
            out.push(TripletIndex::new(a, p, q));
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument(
            "no identity has two samples in the batch".into(),
        ));
    }
    Ok(out)
}

/// Plain and branch (enhanced or contaminated) pooled features of one sample.
#[derive(Clone, Copy, Debug)]
pub struct BranchPair<'a> {
    pub plain: &'a [f64],
    pub branch: &'a [f64],
}

impl<'a> BranchPair<'a> {
    pub fn new(plain: &'a [f64], branch: &'a [f64]) -> Self {
        Self { plain, branch }
    }
}

/// Restitution should pull the positive closer and push the negative away:
/// `softplus(d(a+, p+) - d(a, p)) + softplus(d(a, n) - d(a+, n+))`.
pub fn clarification_loss(a: BranchPair, p: BranchPair, n: BranchPair) -> f64 {
    let d = guarded_cosine_distance;
    softplus(d(a.branch, p.branch) - d(a.plain, p.plain))
        + softplus(d(a.plain, n.plain) - d(a.branch, n.branch))
}

/// Contamination should push the positive away and pull the negative closer:
/// `softplus(d(a, p) - d(a-, p-)) + softplus(d(a-, n-) - d(a, n))`.
pub fn destruction_loss(a: BranchPair, p: BranchPair, n: BranchPair) -> f64 {
    let d = guarded_cosine_distance;
    softplus(d(a.plain, p.plain) - d(a.branch, p.branch))
        + softplus(d(a.branch, n.branch) - d(a.plain, n.plain))
}

/// Which halves of the dual causality loss are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CausalityTerms {
    pub clarification: bool,
    pub destruction: bool,
}

impl Default for CausalityTerms {
    fn default() -> Self {
        Self {
            clarification: true,
            destruction: true,
        }
    }
}

impl CausalityTerms {
    pub fn any(&self) -> bool {
        self.clarification || self.destruction
    }
}

/// Pooled per-sample features of one block: `[n, c]` each.
#[derive(Clone, Copy, Debug)]
pub struct StagePooled<'a> {
    pub tilde: &'a Tensor,
    pub plus: &'a Tensor,
    pub minus: &'a Tensor,
}

/// Per-stage dual causality loss, each half averaged over the triplets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DualCausality {
    pub clarification: f64,
    pub destruction: f64,
}

impl DualCausality {
    pub fn total(&self) -> f64 {
        self.clarification + self.destruction
    }
}

fn validate_all(triplets: &[TripletIndex], labels: &[usize]) -> Result<()> {
    if triplets.is_empty() {
        return Err(Error::Empty("triplet list"));
    }
    triplets.iter().try_for_each(|t| t.validate(labels))
}

/// Value-level dual causality loss of one stage.
pub fn dual_causality_loss(
    stage: StagePooled,
    triplets: &[TripletIndex],
    labels: &[usize],
) -> Result<DualCausality> {
    validate_all(triplets, labels)?;
    let n = stage.tilde.dims2()?[0];
    if labels.len() != n
        || stage.plus.shape() != stage.tilde.shape()
        || stage.minus.shape() != stage.tilde.shape()
    {
        return Err(Error::shape("pooled features and labels disagree"));
    }
    fn pair<'a>(tilde: &'a Tensor, branch: &'a Tensor, i: usize) -> BranchPair<'a> {
        BranchPair::new(tilde.row(i), branch.row(i))
    }
    let (t0, plus, minus) = (stage.tilde, stage.plus, stage.minus);
    let mut acc = DualCausality::default();
    for t in triplets {
        let (a, p, q) = (t.anchor, t.positive, t.negative);
        acc.clarification +=
            clarification_loss(pair(t0, plus, a), pair(t0, plus, p), pair(t0, plus, q));
        acc.destruction +=
            destruction_loss(pair(t0, minus, a), pair(t0, minus, p), pair(t0, minus, q));
    }
    let m = triplets.len() as f64;
    acc.clarification /= m;
    acc.destruction /= m;
    Ok(acc)
}

/// Graph form of the dual causality loss. Returns the mean clarification and
/// destruction terms (whichever are enabled).
pub fn dual_causality_graph(
    g: &mut Graph,
    tilde: Var,
    plus: Var,
    minus: Option<Var>,
    triplets: &[TripletIndex],
    labels: &[usize],
    terms: CausalityTerms,
) -> Result<(Option<Var>, Option<Var>)> {
    validate_all(triplets, labels)?;
    let idx = |f: fn(&TripletIndex) -> usize| triplets.iter().map(f).collect::<Vec<_>>();
    let (ia, ip, inn) = (idx(|t| t.anchor), idx(|t| t.positive), idx(|t| t.negative));
    let base_a = g.gather_rows(tilde, &ia)?;
    let base_p = g.gather_rows(tilde, &ip)?;
    let base_n = g.gather_rows(tilde, &inn)?;
    let d_ap = g.row_cosine_distance(base_a, base_p)?;
    let d_an = g.row_cosine_distance(base_a, base_n)?;

    let branch = |g: &mut Graph, feat: Var, enhance: bool| -> Result<Var> {
        let a = g.gather_rows(feat, &ia)?;
        let p = g.gather_rows(feat, &ip)?;
        let n = g.gather_rows(feat, &inn)?;
        let b_ap = g.row_cosine_distance(a, p)?;
        let b_an = g.row_cosine_distance(a, n)?;
        // enhanced: positives closer, negatives farther than the plain feature;
        // contaminated: the reverse.
        let (pos, neg) = if enhance {
            (g.sub(b_ap, d_ap)?, g.sub(d_an, b_an)?)
        } else {
            (g.sub(d_ap, b_ap)?, g.sub(b_an, d_an)?)
        };
        let sp = g.softplus(pos);
        let sn = g.softplus(neg);
        let both = g.add(sp, sn)?;
        g.mean_all(both)
    };

    let clar = if terms.clarification {
        Some(branch(g, plus, true)?)
    } else {
        None
    };
    let destr = match (terms.destruction, minus) {
        (true, Some(m)) => Some(branch(g, m, false)?),
        (true, None) => {
            return Err(Error::InvalidArgument(
                "destruction loss needs the contaminated branch".into(),
            ))
        }
        (false, _) => None,
    };
    Ok((clar, destr))
}

/// Graph form of the soft-margin batch-hard triplet loss on Euclidean distances.
pub fn batch_hard_triplet_graph(g: &mut Graph, embeddings: Var, labels: &[usize]) -> Result<Var> {
    let triplets = batch_hard_triplets(g.value(embeddings), labels)?;
    let ia: Vec<usize> = triplets.iter().map(|t| t.anchor).collect();
    let ip: Vec<usize> = triplets.iter().map(|t| t.positive).collect();
    let inn: Vec<usize> = triplets.iter().map(|t| t.negative).collect();
    let a = g.gather_rows(embeddings, &ia)?;
    let p = g.gather_rows(embeddings, &ip)?;
    let n = g.gather_rows(embeddings, &inn)?;
    let dp = g.row_euclidean(a, p)?;
    let dn = g.row_euclidean(a, n)?;
    let diff = g.sub(dp, dn)?;
    let sp = g.softplus(diff);
    g.mean_all(sp)
}

/// Mean over anchors of `softplus(d_hardest_pos - d_hardest_neg)`.
pub fn batch_hard_triplet_loss(embeddings: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let e = g.constant(embeddings.clone());
    let l = batch_hard_triplet_graph(&mut g, e, labels)?;
    g.value(l).item()
}

/// Cross-entropy against label-smoothed targets, averaged over the batch.
pub fn id_classification_loss(logits: &Tensor, labels: &[usize], smoothing: f64) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let ce = g.smoothed_cross_entropy(l, labels, smoothing)?;
    g.value(ce).item()
}

/// Per-step loss components.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reid_ce: f64,
    pub reid_triplet: f64,
    /// Clarification term per active stage.
    pub snr_plus: Vec<f64>,
    /// Destruction term per active stage.
    pub snr_minus: Vec<f64>,
    pub lambda: Vec<f64>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn reid(&self) -> f64 {
        self.reid_ce + self.reid_triplet
    }
}

/// `total = ce + triplet + sum_b lambda_b (plus_b + minus_b)`.
pub fn total_loss(
    reid_ce: f64,
    reid_triplet: f64,
    stages: &[DualCausality],
    lambda: &[f64],
) -> Result<LossBreakdown> {
    if stages.len() != lambda.len() {
        return Err(Error::InvalidArgument(format!(
            "{} stage weights for {} active SNR stages",
            lambda.len(),
            stages.len()
        )));
    }
    let snr: f64 = stages
        .iter()
        .zip(lambda)
        .map(|(s, l)| l * (s.clarification + s.destruction))
        .sum();
    Ok(LossBreakdown {
        reid_ce,
        reid_triplet,
        snr_plus: stages.iter().map(|s| s.clarification).collect(),
        snr_minus: stages.iter().map(|s| s.destruction).collect(),
        lambda: lambda.to_vec(),
        total: reid_ce + reid_triplet + snr,
    })
}

/// Objective settings beyond the model architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub label_smoothing: f64,
    pub triplet_policy: TripletPolicy,
    pub terms: CausalityTerms,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            label_smoothing: DEFAULT_LABEL_SMOOTHING,
            triplet_policy: TripletPolicy::Random,
            terms: CausalityTerms::default(),
        }
    }
}

/// Graph handles of one stage's pooled features.
#[derive(Clone, Copy, Debug)]
pub struct StageVars {
    pub stage: usize,
    pub tilde: Var,
    pub plus: Var,
    pub minus: Option<Var>,
}

/// Assembles the joint objective on `g`.
///
/// `lambda` holds one weight per network stage; only stages listed in
/// `stages` contribute. Returns the scalar total and its breakdown.
pub fn joint_objective(
    g: &mut Graph,
    embedding: Var,
    logits: Var,
    stages: &[StageVars],
    labels: &[usize],
    lambda: &[f64],
    cfg: &LossConfig,
    rng: &mut impl Rng,
) -> Result<(Var, LossBreakdown)> {
    let ce = g.smoothed_cross_entropy(logits, labels, cfg.label_smoothing)?;
    let tri = batch_hard_triplet_graph(g, embedding, labels)?;
    let mut total = g.add(ce, tri)?;
    let mut parts = Vec::new();
    let mut weights = Vec::new();
    if cfg.terms.any() && !stages.is_empty() {
        let triplets = match cfg.triplet_policy {
            TripletPolicy::Random => sample_triplets(labels, rng)?,
            TripletPolicy::BatchHard => batch_hard_triplets(g.value(embedding), labels)?,
        };
        for s in stages {
            let weight = *lambda.get(s.stage).ok_or_else(|| {
                Error::InvalidArgument(format!("no lambda for stage {}", s.stage))
            })?;
            let (clar, destr) =
                dual_causality_graph(g, s.tilde, s.plus, s.minus, &triplets, labels, cfg.terms)?;
            let mut part = DualCausality::default();
            for (v, slot) in [
                (clar, &mut part.clarification),
                (destr, &mut part.destruction),
            ] {
                if let Some(v) = v {
                    *slot = g.value(v).item()?;
                    let w = g.affine(v, weight, 0.0);
                    total = g.add(total, w)?;
                }
            }
            parts.push(part);
            weights.push(weight);
        }
    }
    let breakdown = total_loss(g.value(ce).item()?, g.value(tri).item()?, &parts, &weights)?;
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    #[test]
    fn triplet_validation() {
        let labels = [0, 0, 1];
        assert!(TripletIndex::new(0, 1, 2).validate(&labels).is_ok());
        assert!(TripletIndex::new(0, 0, 2).validate(&labels).is_err());
        assert!(TripletIndex::new(0, 2, 1).validate(&labels).is_err());
        assert!(TripletIndex::new(0, 1, 1).validate(&labels).is_err());
        assert!(TripletIndex::new(0, 1, 5).validate(&labels).is_err());
    }

    #[test]
    fn identical_branches_give_two_ln2() {
        let a = [0.3, -1.2, 2.0];
        let p = [1.0, 0.5, -0.1];
        let n = [-0.4, 0.9, 0.2];
        fn same(v: &[f64]) -> BranchPair<'_> {
            BranchPair::new(v, v)
        }
        let want = 2.0 * LN_2;
        assert!((clarification_loss(same(&a), same(&p), same(&n)) - want).abs() < 1e-15);
        assert!((destruction_loss(same(&a), same(&p), same(&n)) - want).abs() < 1e-15);
    }

    #[test]
    fn empty_triplets_rejected() {
        let t = Tensor::zeros(&[2, 2]);
        let stage = StagePooled {
            tilde: &t,
            plus: &t,
            minus: &t,
        };
        assert!(dual_causality_loss(stage, &[], &[0, 1]).is_err());
    }

    #[test]
    fn total_loss_default_weights() {
        let ones = [DualCausality {
            clarification: 0.25,
            destruction: 0.75,
        }; 4];
        let b = total_loss(1.5, 0.5, &ones, &DEFAULT_LAMBDA).unwrap();
        assert!((b.total - 3.2).abs() < 1e-12);
        let b = total_loss(1.5, 0.5, &ones, &[0.0; 4]).unwrap();
        assert_eq!(b.total, 2.0);
        assert!(total_loss(1.0, 1.0, &ones, &[0.1; 3]).is_err());
    }

    #[test]
    fn single_identity_batch_rejected() {
        let e = Tensor::zeros(&[4, 2]);
        assert!(batch_hard_triplet_loss(&e, &[3, 3, 3, 3]).is_err());
        assert!(batch_hard_triplet_loss(&e, &[0, 1, 2, 3]).is_err());
    }

    #[test]
    fn sampled_triplets_are_valid() {
        use rand::SeedableRng;
        let labels = [0, 0, 1, 1, 2, 2, 2];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let t = sample_triplets(&labels, &mut rng).unwrap();
        assert_eq!(t.len(), labels.len());
        t.iter().for_each(|t| t.validate(&labels).unwrap());
        assert!(sample_triplets(&[0, 1, 2], &mut rng).is_err());
    }
}
