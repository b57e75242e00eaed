use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::spec::{pool_window, ExtractorKind, HeadKind, ModelSpec};
use crate::datapipe::{ClassMap, NormalizationStats, WindowSet};
use crate::error::{Error, Result};
use crate::numcore::{BatchNormConfig, Mode, Padding, RunningStats, Tape, Tensor, Var};

/// Named trainable tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    fn add(&mut self, name: String, value: Tensor) -> usize {
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

#[derive(Clone, Debug)]
struct Conv {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Clone, Debug)]
struct Linear {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Debug)]
struct ResidualBlock {
    conv1: Conv,
    bn1: Norm,
    conv2: Conv,
    bn2: Norm,
    projection: Option<Conv>,
}

#[derive(Clone, Debug)]
enum Stage {
    Plain { conv: Conv, bn: Norm },
    Residual(Vec<ResidualBlock>),
}

#[derive(Clone, Debug)]
enum Head {
    Softmax(Linear),
    Ovrn(Vec<(Linear, Linear)>),
}

/// Bookkeeping written alongside trained parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub seed: u64,
    pub epochs: usize,
    pub final_loss: Option<f64>,
}

/// Extractor `F` plus head `G`, with the batch-norm running statistics, the
/// class mapping and the normalisation the model was trained under.
#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    params: ParamStore,
    buffer_names: Vec<String>,
    buffers: Vec<RunningStats>,
    branches: Vec<Vec<Stage>>,
    head: Head,
    pub bn_config: BatchNormConfig,
    pub classes: Option<ClassMap>,
    pub normalization: Option<NormalizationStats>,
    pub metadata: TrainingMetadata,
}

/// Output of a forward pass: the `[batch, K]` probabilities and the tape
/// variables bound to each parameter (same order as [`ParamStore`]).
#[derive(Clone, Debug)]
pub struct Forward {
    pub output: Var,
    pub params: Vec<Var>,
}

struct Builder<'a> {
    rng: ChaCha8Rng,
    params: &'a mut ParamStore,
    buffer_names: &'a mut Vec<String>,
    buffers: &'a mut Vec<RunningStats>,
}

impl Builder<'_> {
    fn uniform(&mut self, shape: Vec<usize>, bound: f64) -> Tensor {
        Tensor::from_fn(shape, |_| self.rng.random_range(-bound..bound))
    }

    /// He-uniform weights (fan-in scaled), zero bias.
    fn conv(&mut self, name: &str, out_ch: usize, in_ch: usize, k: usize) -> Conv {
        let fan_in = (in_ch * k * k) as f64;
        let w = self.uniform(vec![out_ch, in_ch, k, k], (6.0 / fan_in).sqrt());
        Conv {
            weight: self.params.add(format!("{name}.weight"), w),
            bias: self.params.add(format!("{name}.bias"), Tensor::zeros([out_ch])),
        }
    }

    fn norm(&mut self, name: &str, ch: usize) -> Norm {
        self.buffer_names.push(name.to_string());
        self.buffers.push(RunningStats::new(ch));
        Norm {
            gamma: self.params.add(format!("{name}.gamma"), Tensor::full([ch], 1.0)),
            beta: self.params.add(format!("{name}.beta"), Tensor::zeros([ch])),
            stats: self.buffers.len() - 1,
        }
    }

    /// `gain` 6 gives He-uniform for ReLU layers, 1 the plain fan-in bound
    /// used on output layers.
    fn linear(&mut self, name: &str, n: usize, m: usize, gain: f64) -> Linear {
        let w = self.uniform(vec![n, m], (gain / n as f64).sqrt());
        Linear {
            weight: self.params.add(format!("{name}.weight"), w),
            bias: self.params.add(format!("{name}.bias"), Tensor::zeros([m])),
        }
    }
}

impl Model {
    /// Build an untrained model with seeded initial parameters.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::default();
        let mut buffer_names = Vec::new();
        let mut buffers = Vec::new();
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: &mut params,
            buffer_names: &mut buffer_names,
            buffers: &mut buffers,
        };
        let mut branches = Vec::new();
        for (bi, &k) in spec.kernel_sizes.iter().enumerate() {
            let mut stages = Vec::new();
            let mut in_ch = 1;
            for (si, &out_ch) in spec.channels.iter().enumerate() {
                let prefix = format!("extractor.branch{bi}.stage{si}");
                if spec.extractor.is_residual() {
                    let mut blocks = Vec::new();
                    for d in 0..spec.depth {
                        let p = format!("{prefix}.block{d}");
                        let block_in = if d == 0 { in_ch } else { out_ch };
                        blocks.push(ResidualBlock {
                            conv1: b.conv(&format!("{p}.conv1"), out_ch, block_in, k),
                            bn1: b.norm(&format!("{p}.bn1"), out_ch),
                            conv2: b.conv(&format!("{p}.conv2"), out_ch, out_ch, k),
                            bn2: b.norm(&format!("{p}.bn2"), out_ch),
                            projection: (block_in != out_ch).then(|| b.conv(&format!("{p}.proj"), out_ch, block_in, 1)),
                        });
                    }
                    stages.push(Stage::Residual(blocks));
                } else {
                    stages.push(Stage::Plain {
                        conv: b.conv(&format!("{prefix}.conv"), out_ch, in_ch, k),
                        bn: b.norm(&format!("{prefix}.bn"), out_ch),
                    });
                }
                in_ch = out_ch;
            }
            branches.push(stages);
        }
        let features = spec.feature_dim();
        let head = match spec.head {
            HeadKind::Softmax => Head::Softmax(b.linear("head.softmax", features, spec.classes, 1.0)),
            HeadKind::Ovrn => Head::Ovrn(
                (0..spec.classes)
                    .map(|k| {
                        let p = format!("head.g{}", k + 1);
                        (
                            b.linear(&format!("{p}.hidden"), features, spec.ovrn_hidden, 6.0),
                            b.linear(&format!("{p}.out"), spec.ovrn_hidden, 1, 1.0),
                        )
                    })
                    .collect(),
            ),
        };
        Ok(Model {
            spec: spec.clone(),
            params,
            buffer_names,
            buffers,
            branches,
            head,
            bn_config: BatchNormConfig::default(),
            classes: None,
            normalization: None,
            metadata: TrainingMetadata {
                seed,
                ..TrainingMetadata::default()
            },
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Batch-norm running statistics, by layer name.
    pub fn buffers(&self) -> impl Iterator<Item = (&str, &RunningStats)> {
        self.buffer_names.iter().map(String::as_str).zip(&self.buffers)
    }

    /// Parameter indices of one-vs-rest branch `class` (0-based).
    pub fn head_branch_params(&self, class: usize) -> Vec<usize> {
        let prefix = format!("head.g{}.", class + 1);
        (0..self.params.len()).filter(|&i| self.params.names[i].starts_with(&prefix)).collect()
    }

    /// Parameter indices of extractor branch `branch`.
    pub fn extractor_branch_params(&self, branch: usize) -> Vec<usize> {
        let prefix = format!("extractor.branch{branch}.");
        (0..self.params.len()).filter(|&i| self.params.names[i].starts_with(&prefix)).collect()
    }

    /// Content hash of the spec and every parameter and buffer value.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.spec).expect("spec serialises"));
        for (name, t) in self.params.iter() {
            h.update(name.as_bytes());
            t.data().iter().for_each(|v| h.update(v.to_bits().to_le_bytes()));
        }
        for s in &self.buffers {
            s.mean.iter().chain(&s.var).for_each(|v| h.update(v.to_bits().to_le_bytes()));
        }
        hex::encode(&h.finalize()[..16])
    }

    fn check_input(&self, tape: &Tape, input: Var) -> Result<()> {
        let shape = tape.value(input).shape();
        if shape.len() != 4 {
            return Err(Error::Shape {
                op: "forward",
                detail: format!("expected [batch, 1, {}, {}], got {shape:?}", self.spec.window, self.spec.variables),
            });
        }
        let expect = [("channels", 1), ("window", self.spec.window), ("variables", self.spec.variables)];
        for (axis, (name, want)) in expect.into_iter().enumerate() {
            if shape[axis + 1] != want {
                return Err(Error::Dimension {
                    op: "forward",
                    axis: name,
                    expected: want,
                    found: shape[axis + 1],
                });
            }
        }
        Ok(())
    }

    /// Forward pass producing `[batch, K]` probabilities. Train mode tracks
    /// parameter gradients and updates batch-norm running statistics; infer
    /// mode leaves the model untouched.
    pub fn forward(&mut self, tape: &mut Tape, input: Var, mode: Mode) -> Result<Forward> {
        match mode {
            Mode::Train => {
                let mut buffers = std::mem::take(&mut self.buffers);
                let out = self.run(tape, input, Some(&mut buffers), true, true);
                self.buffers = buffers;
                out
            }
            Mode::Infer => self.forward_infer(tape, input),
        }
    }

    pub fn forward_infer(&self, tape: &mut Tape, input: Var) -> Result<Forward> {
        self.run(tape, input, None, false, true)
    }

    /// Flattened, concatenated extractor features in infer mode.
    pub fn features(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        self.run(tape, input, None, false, false).map(|f| f.output)
    }

    fn run(
        &self,
        tape: &mut Tape,
        input: Var,
        mut batch_stats: Option<&mut [RunningStats]>,
        track: bool,
        with_head: bool,
    ) -> Result<Forward> {
        self.check_input(tape, input)?;
        let p: Vec<Var> = self.params.values.iter().map(|t| tape.leaf(t.clone(), track)).collect();
        let cfg = self.bn_config;

        let mut norm = |tape: &mut Tape, x: Var, n: &Norm| -> Result<Var> {
            match batch_stats.as_deref_mut() {
                Some(stats) => tape.batchnorm(x, p[n.gamma], p[n.beta], &mut stats[n.stats], Mode::Train, cfg),
                None => tape.batchnorm_infer(x, p[n.gamma], p[n.beta], &self.buffers[n.stats], cfg),
            }
        };
        let conv = |tape: &mut Tape, x: Var, c: &Conv| tape.conv2d(x, p[c.weight], p[c.bias], Padding::Same);

        let mut flat = Vec::with_capacity(self.branches.len());
        for stages in &self.branches {
            let mut x = input;
            for stage in stages {
                x = match stage {
                    Stage::Plain { conv: c, bn } => {
                        let y = conv(tape, x, c)?;
                        let y = norm(tape, y, bn)?;
                        tape.relu(y)
                    }
                    Stage::Residual(blocks) => {
                        for block in blocks {
                            let y = conv(tape, x, &block.conv1)?;
                            let y = norm(tape, y, &block.bn1)?;
                            let y = tape.relu(y);
                            let y = conv(tape, y, &block.conv2)?;
                            let y = norm(tape, y, &block.bn2)?;
                            let shortcut = match &block.projection {
                                Some(c) => conv(tape, x, c)?,
                                None => x,
                            };
                            let sum = tape.add(y, shortcut)?;
                            x = tape.relu(sum);
                        }
                        x
                    }
                };
                let shape = tape.value(x).shape();
                let win = (pool_window(shape[2]), pool_window(shape[3]));
                x = tape.maxpool2d(x, win, win)?;
            }
            flat.push(tape.flatten(x)?);
        }
        let features = if flat.len() == 1 { flat[0] } else { tape.concat_cols(&flat)? };
        if !with_head {
            return Ok(Forward {
                output: features,
                params: p,
            });
        }
        let output = match &self.head {
            Head::Softmax(fc) => {
                let logits = tape.dense(features, p[fc.weight], p[fc.bias])?;
                tape.softmax(logits)?
            }
            Head::Ovrn(branches) => {
                let mut outs = Vec::with_capacity(branches.len());
                for (hidden, out) in branches {
                    let h = tape.dense(features, p[hidden.weight], p[hidden.bias])?;
                    let h = tape.relu(h);
                    let logit = tape.dense(h, p[out.weight], p[out.bias])?;
                    outs.push(tape.sigmoid(logit));
                }
                tape.concat_cols(&outs)?
            }
        };
        Ok(Forward { output, params: p })
    }

    /// Infer-mode class probabilities `[N, K]` for every window in `windows`,
    /// evaluated in chunks of `batch_size`.
    pub fn predict_proba(&self, windows: &WindowSet, batch_size: usize) -> Result<Tensor> {
        let k = self.spec.classes;
        let mut out = Vec::with_capacity(windows.len() * k);
        let idx: Vec<usize> = (0..windows.len()).collect();
        for chunk in idx.chunks(batch_size.max(1)) {
            let mut tape = Tape::new();
            let x = tape.constant(windows.batch(chunk));
            let f = self.forward_infer(&mut tape, x)?;
            out.extend_from_slice(tape.value(f.output).data());
        }
        Tensor::new(vec![windows.len(), k], out)
    }

    pub(crate) fn from_parts(
        spec: ModelSpec,
        params: Vec<(String, Tensor)>,
        buffers: Vec<(String, RunningStats)>,
    ) -> Result<Self> {
        let mut model = Model::build(&spec, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::SpecMismatch(format!(
                "{} declares {} parameter tensors, file holds {}",
                spec.name(),
                model.params.len(),
                params.len()
            )));
        }
        for (name, value) in params {
            let slot = model
                .params
                .get_mut(&name)
                .ok_or_else(|| Error::SpecMismatch(format!("unexpected parameter `{name}`")))?;
            if slot.shape() != value.shape() {
                return Err(Error::SpecMismatch(format!(
                    "parameter `{name}`: spec shape {:?}, file shape {:?}",
                    slot.shape(),
                    value.shape()
                )));
            }
            *slot = value;
        }
        if buffers.len() != model.buffers.len() {
            return Err(Error::SpecMismatch(format!(
                "{} declares {} batch-norm layers, file holds {}",
                spec.name(),
                model.buffers.len(),
                buffers.len()
            )));
        }
        for (name, stats) in buffers {
            let i = model
                .buffer_names
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| Error::SpecMismatch(format!("unexpected batch-norm layer `{name}`")))?;
            if stats.mean.len() != model.buffers[i].mean.len() || stats.var.len() != model.buffers[i].var.len() {
                return Err(Error::SpecMismatch(format!("batch-norm layer `{name}` has the wrong width")));
            }
            model.buffers[i] = stats;
        }
        Ok(model)
    }
}

impl ExtractorKind {
    /// All extractor families, in report order.
    pub const ALL: [ExtractorKind; 4] = [
        ExtractorKind::Standard,
        ExtractorKind::Residual,
        ExtractorKind::MultiscaleStandard,
        ExtractorKind::MultiscaleResidual,
    ];
}
