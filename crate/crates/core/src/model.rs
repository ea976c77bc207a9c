//! Four-stage convolutional backbone with a pluggable module after each stage.
//!
//! Stage: conv3x3(stride) -> norm -> relu -> conv3x3 -> norm -> relu -> mode.
//! Head: global pool -> fc embedding -> batch-norm neck -> classifier.
//! The triplet loss sees the pre-neck embedding; retrieval uses the neck output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::ops::BatchStats;
use crate::diffcore::{Graph, ParamId, ParamStore, Tensor, Var, NORM_EPS};
use crate::error::{Error, Result};
use crate::losses::{StageVars, DEFAULT_LAMBDA};
use crate::snr::{self, ForwardOptions, SnrParams, SnrTrace, SnrWeights, Variant};

/// Running-statistics momentum of every batch-norm layer.
pub const BN_MOMENTUM: f64 = 0.1;

/// Chunk size of inference passes.
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    #[default]
    None,
    InOnly,
    Snr,
    SnrConv,
    SnrG2,
}

impl NormMode {
    pub fn snr_variant(self) -> Option<Variant> {
        match self {
            NormMode::Snr => Some(Variant::Gate),
            NormMode::SnrConv => Some(Variant::Conv),
            NormMode::SnrG2 => Some(Variant::DualGate),
            NormMode::None | NormMode::InOnly => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockNorm {
    #[default]
    BatchNorm,
    InstanceNorm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    #[serde(default)]
    pub mode: NormMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// `[channels, height, width]` of one input image.
    pub input: [usize; 3],
    pub stages: Vec<StageSpec>,
    pub embedding_dim: usize,
    pub num_identities: usize,
    pub lambda: Vec<f64>,
    pub baseline_norm: BlockNorm,
    pub reduction: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(30)
    }
}

impl ModelConfig {
    /// 3x64x32 input, channels 16-32-64-128, all strides 2, embedding 128.
    pub fn desk(num_identities: usize) -> Self {
        Self::with_channels([3, 64, 32], &[16, 32, 64, 128], 128, num_identities)
    }

    pub fn with_channels(
        input: [usize; 3],
        channels: &[usize],
        embedding_dim: usize,
        num_identities: usize,
    ) -> Self {
        let mut prev = input[0];
        let stages = channels
            .iter()
            .map(|&c| {
                let s = StageSpec {
                    in_channels: prev,
                    out_channels: c,
                    stride: 2,
                    mode: NormMode::None,
                };
                prev = c;
                s
            })
            .collect::<Vec<_>>();
        let lambda = if stages.len() == DEFAULT_LAMBDA.len() {
            DEFAULT_LAMBDA.to_vec()
        } else {
            vec![0.1; stages.len()]
        };
        Self {
            input,
            stages,
            embedding_dim,
            num_identities,
            lambda,
            baseline_norm: BlockNorm::BatchNorm,
            reduction: snr::DEFAULT_REDUCTION,
            seed: 0,
        }
    }

    pub fn set_modes(&mut self, mode: NormMode) {
        self.stages.iter_mut().for_each(|s| s.mode = mode);
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stages.is_empty() {
            return bad("model needs at least one stage".into());
        }
        if self.input.iter().any(|&d| d == 0) {
            return bad(format!("input {:?} has an empty axis", self.input));
        }
        if self.embedding_dim == 0 || self.num_identities == 0 || self.reduction == 0 {
            return bad("embedding_dim, num_identities and reduction must be positive".into());
        }
        let mut prev = self.input[0];
        for (i, s) in self.stages.iter().enumerate() {
            if s.in_channels != prev {
                return bad(format!(
                    "stage {i} expects {} input channels but receives {prev}",
                    s.in_channels
                ));
            }
            if s.out_channels == 0 || s.stride == 0 {
                return bad(format!("stage {i} has zero channels or stride"));
            }
            prev = s.out_channels;
        }
        if self.lambda.len() != self.stages.len() {
            return bad(format!(
                "{} lambda weights for {} stages",
                self.lambda.len(),
                self.stages.len()
            ));
        }
        if self.lambda.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return bad("lambda weights must be finite and non-negative".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum NormIds {
    Batch {
        gamma: ParamId,
        beta: ParamId,
        mean: ParamId,
        var: ParamId,
    },
    Instance {
        gamma: ParamId,
        beta: ParamId,
    },
}

#[derive(Clone, Debug)]
enum ModuleIds {
    None,
    Instance { gamma: ParamId, beta: ParamId },
    Snr(SnrWeights<ParamId>),
}

#[derive(Clone, Debug)]
struct StageIds {
    conv1: ParamId,
    norm1: NormIds,
    conv2: ParamId,
    norm2: NormIds,
    module: ModuleIds,
}

#[derive(Clone, Debug)]
struct HeadIds {
    fc_w: ParamId,
    fc_b: ParamId,
    neck: NormIds,
    classifier: ParamId,
}

/// Running-statistics update recorded by a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    mean: ParamId,
    var: ParamId,
    stats: BatchStats,
}

/// Graph handles of one stage.
#[derive(Clone, Debug)]
pub struct StageForward<T> {
    /// Feature passed on to the next stage.
    pub output: T,
    /// Global average of `output`, `[n, c]`.
    pub pooled: T,
    pub trace: Option<SnrTrace<T>>,
}

#[derive(Clone, Debug)]
pub struct GraphForward {
    pub embedding: Var,
    pub neck: Var,
    pub logits: Var,
    pub stages: Vec<StageForward<Var>>,
    pub bn_updates: Vec<BnUpdate>,
}

impl GraphForward {
    /// Pooled branch features of every stage that carries an SNR trace.
    pub fn stage_vars(&self) -> Vec<StageVars> {
        self.stages
            .iter()
            .enumerate()
            .filter_map(|(i, s)| {
                s.trace.as_ref().map(|t| StageVars {
                    stage: i,
                    tilde: t.pooled_tilde,
                    plus: t.pooled_plus,
                    minus: t.pooled_minus,
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub embedding: Tensor,
    pub neck: Tensor,
    pub logits: Tensor,
    pub stages: Vec<StageForward<Tensor>>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    stages: Vec<StageIds>,
    head: HeadIds,
}

fn kaiming(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

fn add_norm(store: &mut ParamStore, prefix: &str, c: usize, kind: BlockNorm) -> NormIds {
    let gamma = store.add(format!("{prefix}.gamma"), Tensor::full(&[c], 1.0));
    let beta = store.add(format!("{prefix}.beta"), Tensor::zeros(&[c]));
    match kind {
        BlockNorm::BatchNorm => NormIds::Batch {
            gamma,
            beta,
            mean: store.add_buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[c])),
            var: store.add_buffer(format!("{prefix}.running_var"), Tensor::full(&[c], 1.0)),
        },
        BlockNorm::InstanceNorm => NormIds::Instance { gamma, beta },
    }
}

struct Bound<'a>(&'a [Var]);

impl Bound<'_> {
    fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

impl Model {
    /// Builds a model with seeded initialization.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let mut stages = Vec::with_capacity(config.stages.len());
        for (i, s) in config.stages.iter().enumerate() {
            let p = format!("stage{}", i + 1);
            let (cin, c) = (s.in_channels, s.out_channels);
            let conv1 = store.add(
                format!("{p}.conv1"),
                kaiming(&[c, cin, 3, 3], cin * 9, &mut rng),
            );
            let norm1 = add_norm(&mut store, &format!("{p}.norm1"), c, config.baseline_norm);
            let conv2 = store.add(
                format!("{p}.conv2"),
                kaiming(&[c, c, 3, 3], c * 9, &mut rng),
            );
            let norm2 = add_norm(&mut store, &format!("{p}.norm2"), c, config.baseline_norm);
            let module = match s.mode {
                NormMode::None => ModuleIds::None,
                NormMode::InOnly => ModuleIds::Instance {
                    gamma: store.add(format!("{p}.in.gamma"), Tensor::full(&[c], 1.0)),
                    beta: store.add(format!("{p}.in.beta"), Tensor::zeros(&[c])),
                },
                mode => {
                    let variant = mode.snr_variant().expect("snr mode");
                    let w = SnrParams::init(c, config.reduction, variant, &mut rng);
                    ModuleIds::Snr(w.map(|name, t| store.add(format!("{p}.snr.{name}"), t.clone())))
                }
            };
            stages.push(StageIds {
                conv1,
                norm1,
                conv2,
                norm2,
                module,
            });
        }
        let last = config.stages.last().expect("validated").out_channels;
        let e = config.embedding_dim;
        let bound = (1.0 / last as f64).sqrt();
        let head = HeadIds {
            fc_w: store.add(
                "head.fc.weight",
                Tensor::uniform(&[e, last], -bound, bound, &mut rng),
            ),
            fc_b: store.add("head.fc.bias", Tensor::zeros(&[e])),
            neck: add_norm(&mut store, "head.neck", e, BlockNorm::BatchNorm),
            classifier: store.add(
                "head.classifier.weight",
                Tensor::randn(&[config.num_identities, e], 0.001, &mut rng),
            ),
        };
        Ok(Self {
            config,
            store,
            stages,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Exact number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// Overwrites parameter values by name. Every stored parameter must be present.
    pub fn load_values<'a>(
        &mut self,
        mut lookup: impl FnMut(&str) -> Option<&'a Tensor>,
    ) -> Result<()> {
        for p in self.store.iter_mut() {
            let t = lookup(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::shape(format!(
                    "parameter {}: stored {:?}, model {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    fn norm(
        &self,
        g: &mut Graph,
        b: &Bound,
        x: Var,
        ids: &NormIds,
        training: bool,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Var> {
        match *ids {
            NormIds::Instance { gamma, beta } => {
                g.instance_norm(x, b.get(gamma), b.get(beta), NORM_EPS)
            }
            NormIds::Batch {
                gamma,
                beta,
                mean,
                var,
            } if training => {
                let (y, stats) = g.batch_norm(x, b.get(gamma), b.get(beta), NORM_EPS)?;
                updates.push(BnUpdate { mean, var, stats });
                Ok(y)
            }
            NormIds::Batch {
                gamma,
                beta,
                mean,
                var,
            } => g.batch_norm_frozen(
                x,
                b.get(gamma),
                b.get(beta),
                self.store.get(mean).value.data(),
                self.store.get(var).value.data(),
                NORM_EPS,
            ),
        }
    }

    /// Puts every stored parameter on `g`, in store order.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.store
            .iter()
            .map(|(id, _)| g.param(&self.store, id))
            .collect()
    }

    /// Records a forward pass on `g`. `opts.training` selects batch statistics
    /// and the contaminated SNR branch.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        x: Var,
        opts: ForwardOptions,
    ) -> Result<GraphForward> {
        let bound = self.bind(g);
        self.forward_bound(g, x, &bound, opts)
    }

    /// Forward pass reading parameters from `bound` (one var per stored
    /// parameter, in store order) instead of the store.
    pub fn forward_bound(
        &self,
        g: &mut Graph,
        x: Var,
        bound: &[Var],
        opts: ForwardOptions,
    ) -> Result<GraphForward> {
        if bound.len() != self.store.len() {
            return Err(Error::InvalidArgument(format!(
                "{} bound vars for {} parameters",
                bound.len(),
                self.store.len()
            )));
        }
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1..] != self.config.input {
            return Err(Error::shape(format!(
                "model expects [n, {}, {}, {}], got {shape:?}",
                self.config.input[0], self.config.input[1], self.config.input[2]
            )));
        }
        let b = Bound(bound);
        let mut updates = Vec::new();
        let mut h = x;
        let mut stages = Vec::with_capacity(self.stages.len());
        for (spec, ids) in self.config.stages.iter().zip(&self.stages) {
            h = g.conv2d(h, b.get(ids.conv1), spec.stride, 1)?;
            h = self.norm(g, &b, h, &ids.norm1, opts.training, &mut updates)?;
            h = g.relu(h);
            h = g.conv2d(h, b.get(ids.conv2), 1, 1)?;
            h = self.norm(g, &b, h, &ids.norm2, opts.training, &mut updates)?;
            h = g.relu(h);
            let (output, trace) = match &ids.module {
                ModuleIds::None => (h, None),
                ModuleIds::Instance { gamma, beta } => (
                    g.instance_norm(h, b.get(*gamma), b.get(*beta), NORM_EPS)?,
                    None,
                ),
                ModuleIds::Snr(w) => {
                    let wv = w.map(|_, id| b.get(*id));
                    let t = snr::forward_graph(g, h, &wv, opts)?;
                    (t.f_plus, Some(t))
                }
            };
            h = output;
            let pooled = match &trace {
                Some(t) => t.pooled_plus,
                None => g.global_avg_pool(output)?,
            };
            stages.push(StageForward {
                output,
                pooled,
                trace,
            });
        }
        let pooled = stages.last().expect("validated").pooled;
        let embedding = g.linear(pooled, b.get(self.head.fc_w), Some(b.get(self.head.fc_b)))?;
        let neck = self.norm(
            g,
            &b,
            embedding,
            &self.head.neck,
            opts.training,
            &mut updates,
        )?;
        let logits = g.linear(neck, b.get(self.head.classifier), None)?;
        Ok(GraphForward {
            embedding,
            neck,
            logits,
            stages,
            bn_updates: updates,
        })
    }

    /// Folds batch statistics into the running estimates.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) -> Result<()> {
        for u in updates {
            for (id, batch) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var)] {
                let p = self.store.get_mut(id);
                if p.value.len() != batch.len() {
                    return Err(Error::shape("batch statistics do not match running buffer"));
                }
                for (r, b) in p.value.data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
            }
        }
        Ok(())
    }

    /// Value-level forward pass (running statistics are not updated).
    pub fn forward(&self, x: &Tensor, opts: ForwardOptions) -> Result<ForwardOutput> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = self.forward_graph(&mut g, xv, opts)?;
        let val = |v: Var| g.value(v).clone();
        Ok(ForwardOutput {
            embedding: val(out.embedding),
            neck: val(out.neck),
            logits: val(out.logits),
            stages: out
                .stages
                .iter()
                .map(|s| StageForward {
                    output: val(s.output),
                    pooled: val(s.pooled),
                    trace: s.trace.as_ref().map(|t| t.values(&g)),
                })
                .collect(),
        })
    }

    fn eval_chunks<T>(
        &self,
        images: &[Tensor],
        mut per_chunk: impl FnMut(ForwardOutput) -> T,
    ) -> Result<Vec<T>> {
        images
            .chunks(EVAL_CHUNK)
            .map(|chunk| {
                let refs: Vec<&Tensor> = chunk.iter().collect();
                let batch = Tensor::stack(&refs)?;
                Ok(per_chunk(self.forward(&batch, ForwardOptions::default())?))
            })
            .collect()
    }

    /// Inference-mode retrieval features, one row per image.
    pub fn embed(&self, images: &[Tensor]) -> Result<Tensor> {
        if images.is_empty() {
            return Err(Error::Empty("image list"));
        }
        let parts = self.eval_chunks(images, |o| o.neck)?;
        concat_rows(&parts)
    }

    /// Inference-mode pooled stage outputs: one `[n, c_b]` tensor per stage.
    pub fn stage_features(&self, images: &[Tensor]) -> Result<Vec<Tensor>> {
        if images.is_empty() {
            return Err(Error::Empty("image list"));
        }
        let parts = self.eval_chunks(images, |o| {
            o.stages.into_iter().map(|s| s.pooled).collect::<Vec<_>>()
        })?;
        (0..self.stages.len())
            .map(|s| concat_rows(&parts.iter().map(|p| p[s].clone()).collect::<Vec<_>>()))
            .collect()
    }
}

fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
    let cols = parts[0].dims2()?[1];
    let mut data = Vec::new();
    let mut rows = 0;
    for p in parts {
        rows += p.dims2()?[0];
        data.extend_from_slice(p.data());
    }
    Tensor::new(&[rows, cols], data)
}
