use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::optim::{lr_schedule, Adam};
use super::TrainConfig;
use crate::data::{derive_seed, DatasetManifest, PkSampler, SampleRecord, Split, TrainSet};
use crate::diffcore::{snrt, Graph};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate_retrieval, DivergenceReport, EvalReport};
use crate::losses::{joint_objective, LossBreakdown};
use crate::model::Model;
use crate::snr::ForwardOptions;

/// RNG stream tags under the run seed.
const STREAM_INIT: u64 = 0;
const STREAM_SAMPLER: u64 = 1;
const STREAM_TRIPLETS: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub reid_ce: f64,
    pub reid_triplet: f64,
    /// Summed weighted dual causality terms.
    pub snr: f64,
    pub total: f64,
    pub eval: Option<EvalReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub base: u64,
    pub init: u64,
    pub sampler: u64,
    pub triplets: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seeds: Seeds,
    pub num_identities: usize,
    pub parameter_count: usize,
    pub epochs: Vec<EpochRecord>,
    /// Final checkpoint directory, relative to the run directory.
    pub checkpoint: PathBuf,
    pub final_eval: Option<EvalReport>,
    /// Kept out of `run.json` so reports stay reproducible; see `timing.json`.
    #[serde(skip)]
    pub wall_seconds: f64,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn dump_batch(
    dir: &Path,
    batch: &crate::diffcore::Tensor,
    labels: &[usize],
    detail: &str,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    // inputs are finite even when the loss is not
    snrt::write_file(dir.join("batch.snrt"), batch)?;
    write_json(
        &dir.join("batch.json"),
        &serde_json::json!({ "labels": labels, "detail": detail }),
    )
}

/// Trains one configuration and writes the run directory:
/// `steps.jsonl`, `run.json`, `timing.json`, `checkpoint/` and, when
/// `eval_every > 0`, `checkpoints/epoch_NNN/`.
pub fn train_run(cfg: &TrainConfig, out: &Path) -> Result<RunRecord> {
    cfg.validate()?;
    let started = Instant::now();
    let manifest = DatasetManifest::read(&cfg.dataset)?;
    let train = TrainSet::load(&manifest)?;
    if let Some(d) = cfg.target_domain {
        if manifest.select(Split::Query, Some(d)).is_empty() {
            return Err(Error::Config(format!("domain {d} has no query split")));
        }
    }
    let seeds = Seeds {
        base: cfg.seed,
        init: derive_seed(cfg.seed, STREAM_INIT),
        sampler: derive_seed(cfg.seed, STREAM_SAMPLER),
        triplets: derive_seed(cfg.seed, STREAM_TRIPLETS),
    };
    let model_cfg = cfg
        .model
        .build(cfg.scheme, train.identities.len(), seeds.init)?;
    let mut model = Model::build(model_cfg)?;
    let mut adam = Adam::new(model.params(), cfg.optim.clone());
    let sampler = PkSampler::new(&train.labels);
    if sampler.num_identities() < cfg.p {
        return Err(Error::Config(format!(
            "P = {} but the training split has {} identities",
            cfg.p,
            sampler.num_identities()
        )));
    }
    let mut batch_rng = ChaCha8Rng::seed_from_u64(seeds.sampler);
    let mut triplet_rng = ChaCha8Rng::seed_from_u64(seeds.triplets);
    let loss_cfg = cfg.effective_loss();
    let per_epoch = cfg
        .batches_per_epoch
        .unwrap_or_else(|| train.labels.len().div_ceil(cfg.p * cfg.k));

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let steps_path = out.join("steps.jsonl");
    let mut steps_log =
        BufWriter::new(File::create(&steps_path).map_err(|e| Error::io(&steps_path, e))?);
    let mut record = RunRecord {
        config_hash: cfg.hash(),
        seeds,
        num_identities: train.identities.len(),
        parameter_count: model.parameter_count(),
        epochs: Vec::with_capacity(cfg.epochs),
        checkpoint: PathBuf::from("checkpoint"),
        final_eval: None,
        wall_seconds: 0.0,
    };
    let opts = ForwardOptions {
        training: true,
        gate_override: None,
    };
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, &cfg.optim);
        let mut sums = [0.0; 4];
        for _ in 0..per_epoch {
            let idx = sampler.sample(cfg.p, cfg.k, &mut batch_rng)?;
            let (batch, labels) = train.batch(&idx)?;
            let mut g = Graph::new();
            let x = g.constant(batch.clone());
            let fwd = model.forward_graph(&mut g, x, opts)?;
            let (total, loss) = joint_objective(
                &mut g,
                fwd.embedding,
                fwd.logits,
                &fwd.stage_vars(),
                &labels,
                &model.config().lambda,
                &loss_cfg,
                &mut triplet_rng,
            )?;
            let grads = g.backward(total);
            let bad = match &grads {
                _ if !loss.total.is_finite() => Some(format!("loss {}", loss.total)),
                Err(e) => Some(e.to_string()),
                Ok(_) => None,
            };
            if let Some(detail) = bad {
                dump_batch(&out.join("divergence"), &batch, &labels, &detail)?;
                return Err(Error::Divergence {
                    epoch,
                    step,
                    detail,
                });
            }
            let store = model.params_mut();
            store.zero_grad();
            grads?.accumulate_into(store)?;
            if let Some(p) = store
                .iter()
                .find(|(_, p)| p.grad.data().iter().any(|v| !v.is_finite()))
            {
                let detail = format!("non-finite gradient in {}", p.1.name);
                dump_batch(&out.join("divergence"), &batch, &labels, &detail)?;
                return Err(Error::Divergence {
                    epoch,
                    step,
                    detail,
                });
            }
            adam.step(store, lr);
            model.apply_bn_updates(&fwd.bn_updates)?;
            let snr: f64 = loss.total - loss.reid();
            for (s, v) in sums
                .iter_mut()
                .zip([loss.reid_ce, loss.reid_triplet, snr, loss.total])
            {
                *s += v;
            }
            serde_json::to_writer(
                &mut steps_log,
                &StepLog {
                    epoch,
                    step,
                    lr,
                    loss,
                },
            )?;
            steps_log
                .write_all(b"\n")
                .map_err(|e| Error::io(&steps_path, e))?;
            step += 1;
        }
        let n = per_epoch as f64;
        let mut rec = EpochRecord {
            epoch,
            lr,
            steps: per_epoch,
            reid_ce: sums[0] / n,
            reid_triplet: sums[1] / n,
            snr: sums[2] / n,
            total: sums[3] / n,
            eval: None,
        };
        let done = epoch + 1;
        if cfg.eval_every > 0 && done % cfg.eval_every == 0 && done < cfg.epochs {
            let dir = out.join("checkpoints").join(format!("epoch_{done:03}"));
            save_checkpoint(&dir, &model, cfg, done, step, None)?;
            if let Some(d) = cfg.target_domain {
                rec.eval = Some(evaluate_checkpoint(&dir, &manifest, d)?);
            }
        }
        log::info!(
            "epoch {done}/{} lr {lr:.3e} loss {:.4}",
            cfg.epochs,
            rec.total
        );
        record.epochs.push(rec);
    }
    steps_log.flush().map_err(|e| Error::io(&steps_path, e))?;

    let dir = out.join(&record.checkpoint);
    save_checkpoint(&dir, &model, cfg, cfg.epochs, step, None)?;
    if let Some(d) = cfg.target_domain {
        let report = evaluate_checkpoint(&dir, &manifest, d)?;
        save_checkpoint(&dir, &model, cfg, cfg.epochs, step, Some(report.clone()))?;
        record.final_eval = Some(report);
    }
    record.wall_seconds = started.elapsed().as_secs_f64();
    write_json(&out.join("run.json"), &record)?;
    write_json(
        &out.join("timing.json"),
        &serde_json::json!({ "wall_seconds": record.wall_seconds, "steps": step }),
    )?;
    Ok(record)
}

fn labels_of(samples: &[&SampleRecord]) -> Vec<usize> {
    samples.iter().map(|s| s.identity).collect()
}

/// Retrieval on `domain`'s query/gallery split using the stored weights.
pub fn evaluate_checkpoint(
    dir: &Path,
    manifest: &DatasetManifest,
    domain: usize,
) -> Result<EvalReport> {
    let (model, ck) = load_checkpoint(dir)?;
    let query = manifest.select(Split::Query, Some(domain));
    let gallery = manifest.select(Split::Gallery, Some(domain));
    if query.is_empty() || gallery.is_empty() {
        return Err(Error::Config(format!(
            "domain {domain} has no query/gallery split"
        )));
    }
    let qf = model.embed(&manifest.load_images(&query)?)?;
    let gf = model.embed(&manifest.load_images(&gallery)?)?;
    evaluate_retrieval(
        &qf,
        &labels_of(&query),
        &gf,
        &labels_of(&gallery),
        None,
        ck.config_hash,
    )
}

/// Retrieval within the training split, each sample querying all others.
pub fn evaluate_train_split(dir: &Path, manifest: &DatasetManifest) -> Result<EvalReport> {
    let (model, ck) = load_checkpoint(dir)?;
    let samples = manifest.select(Split::Train, None);
    if samples.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let f = model.embed(&manifest.load_images(&samples)?)?;
    let labels = labels_of(&samples);
    let exclude: Vec<Option<usize>> = (0..samples.len()).map(Some).collect();
    evaluate_retrieval(&f, &labels, &f, &labels, Some(&exclude), ck.config_hash)
}

/// Per-stage divergence between two domains, using at most `max_per_domain`
/// samples of each in manifest order.
pub fn divergence_from_checkpoint(
    dir: &Path,
    manifest: &DatasetManifest,
    domains: [usize; 2],
    max_per_domain: usize,
) -> Result<DivergenceReport> {
    let (model, ck) = load_checkpoint(dir)?;
    let features = |d: usize| -> Result<Vec<crate::diffcore::Tensor>> {
        let samples: Vec<&SampleRecord> = manifest
            .samples
            .iter()
            .filter(|s| s.domain == d)
            .take(max_per_domain)
            .collect();
        if samples.is_empty() {
            return Err(Error::Config(format!("domain {d} has no samples")));
        }
        model.stage_features(&manifest.load_images(&samples)?)
    };
    DivergenceReport::compute(
        domains,
        &features(domains[0])?,
        &features(domains[1])?,
        ck.config_hash,
    )
}
