//! Trainable embedding function: an affine map or a one-hidden-layer tanh
//! perceptron, followed by L2 normalization, trained with momentum SGD.

use std::fs;
use std::path::Path;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{format_f64, shuffle, Descriptor, PlaceDataset};
use crate::embedding::{
    axpy, dot, l2_normalize, Embedding, LossGrad, LossSpec, TrainingTuple, EPSILON_NORM,
};
use crate::error::{check_dim, Error, Result};
use crate::eval::{embed_all, recall_at_n, RetrievalDb, DEFAULT_THRESHOLD_M};
use crate::losses;
use crate::mining::{mine_tuples, MiningConfig};

/// Recall cutoff used for best-model selection.
pub const SELECTION_RECALL_N: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Linear,
    OneHidden { hidden_width: usize },
}

/// Fully connected layer, `weights` row-major with shape `(outputs, inputs)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn uniform(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Self {
            inputs,
            outputs,
            weights: (0..inputs * outputs)
                .map(|_| rng.random_range(-bound..=bound))
                .collect(),
            bias: vec![0.0; outputs],
        }
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.weights[r * self.inputs..(r + 1) * self.inputs]
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|r| dot(self.row(r), x) + self.bias[r])
            .collect()
    }

    fn same_shape(&self, other: &Dense) -> bool {
        self.inputs == other.inputs && self.outputs == other.outputs
    }
}

/// The embedding function `f_θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderModel {
    pub architecture: Architecture,
    pub input_dim: usize,
    pub output_dim: usize,
    pub seed: u64,
    /// One layer for `Linear`, two for `OneHidden`.
    pub layers: Vec<Dense>,
}

/// Activations kept for backpropagation.
struct Forward {
    hidden: Option<Vec<f64>>,
    pre_norm_len: f64,
    output: Embedding,
}

impl EmbedderModel {
    /// Weights uniform in `±1/√fan_in`, biases zero.
    pub fn new(
        architecture: Architecture,
        input_dim: usize,
        output_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if input_dim < 1 || output_dim < 2 {
            return Err(Error::InvalidArgument(format!(
                "need input_dim ≥ 1 and output_dim ≥ 2, got {input_dim} and {output_dim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = match architecture {
            Architecture::Linear => vec![Dense::uniform(input_dim, output_dim, &mut rng)],
            Architecture::OneHidden { hidden_width } => {
                if hidden_width == 0 {
                    return Err(Error::InvalidArgument(
                        "hidden_width must be positive".into(),
                    ));
                }
                vec![
                    Dense::uniform(input_dim, hidden_width, &mut rng),
                    Dense::uniform(hidden_width, output_dim, &mut rng),
                ]
            }
        };
        Ok(Self {
            architecture,
            input_dim,
            output_dim,
            seed,
            layers,
        })
    }

    /// A linear model with explicit parameters.
    pub fn linear(weights: Vec<f64>, bias: Vec<f64>, input_dim: usize) -> Result<Self> {
        let output_dim = bias.len();
        check_dim(input_dim * output_dim, weights.len())?;
        Ok(Self {
            architecture: Architecture::Linear,
            input_dim,
            output_dim,
            seed: 0,
            layers: vec![Dense {
                inputs: input_dim,
                outputs: output_dim,
                weights,
                bias,
            }],
        })
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Parameters flattened layer by layer: weights row-major, then bias.
    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        check_dim(self.num_params(), flat.len())?;
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|p| {
                *p = it.next().unwrap_or_default();
            });
        }
        Ok(())
    }

    fn forward(&self, x: &[f64]) -> Result<Forward> {
        check_dim(self.input_dim, x.len())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("descriptor".into()));
        }
        let (hidden, pre) = match self.layers.as_slice() {
            [only] => (None, only.apply(x)),
            [first, second] => {
                let h: Vec<f64> = first.apply(x).into_iter().map(f64::tanh).collect();
                let z = second.apply(&h);
                (Some(h), z)
            }
            _ => unreachable!("models hold one or two layers"),
        };
        let len = dot(&pre, &pre).sqrt();
        if len <= EPSILON_NORM {
            return Err(Error::DegenerateInput(format!(
                "pre-normalization activation has norm {len:e}"
            )));
        }
        let output = l2_normalize(&pre)?;
        Ok(Forward {
            hidden,
            pre_norm_len: len,
            output,
        })
    }

    /// `f_θ(x)`, always unit norm.
    pub fn embed(&self, x: &[f64]) -> Result<Embedding> {
        Ok(self.forward(x)?.output)
    }

    /// Accumulates `∂L/∂θ` for one input given `upstream = ∂L/∂f_θ(x)`.
    fn accumulate(&self, x: &[f64], upstream: &[f64], grads: &mut ModelGrads) -> Result<()> {
        check_dim(self.output_dim, upstream.len())?;
        let f = self.forward(x)?;
        // Normalization Jacobian: (I − u uᵀ) / ‖z‖
        let u = f.output.values();
        let along = dot(upstream, u);
        let dz: Vec<f64> = upstream
            .iter()
            .zip(u)
            .map(|(g, u)| (g - along * u) / f.pre_norm_len)
            .collect();
        let last = self.layers.len() - 1;
        let last_in: &[f64] = f.hidden.as_deref().unwrap_or(x);
        outer_accumulate(&mut grads.layers[last], &dz, last_in);

        if let Some(h) = &f.hidden {
            let top = &self.layers[last];
            let mut dh = vec![0.0; top.inputs];
            for (r, g) in dz.iter().enumerate() {
                axpy(&mut dh, top.row(r), *g);
            }
            let da: Vec<f64> = dh
                .iter()
                .zip(h)
                .map(|(g, hv)| g * (1.0 - hv * hv))
                .collect();
            outer_accumulate(&mut grads.layers[0], &da, x);
        }
        Ok(())
    }
}

fn outer_accumulate(layer: &mut Dense, d_out: &[f64], input: &[f64]) {
    for (r, g) in d_out.iter().enumerate() {
        axpy(
            &mut layer.weights[r * layer.inputs..(r + 1) * layer.inputs],
            input,
            *g,
        );
        layer.bias[r] += g;
    }
}

/// Parameter gradients, shaped like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub layers: Vec<Dense>,
}

impl ModelGrads {
    pub fn zeros_like(model: &EmbedderModel) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| Dense::zeros(l.inputs, l.outputs))
                .collect(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    fn add(&mut self, other: &ModelGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            axpy(&mut a.weights, &b.weights, 1.0);
            axpy(&mut a.bias, &b.bias, 1.0);
        }
    }

    fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weights
                .iter_mut()
                .chain(l.bias.iter_mut())
                .for_each(|v| *v *= s);
        }
    }

    fn matches(&self, model: &EmbedderModel) -> bool {
        self.layers.len() == model.layers.len()
            && self
                .layers
                .iter()
                .zip(&model.layers)
                .all(|(a, b)| a.same_shape(b))
    }
}

/// Chain rule from embedding gradients to parameter gradients for every
/// member of the tuple.
pub fn backprop(
    model: &EmbedderModel,
    tuple: &TrainingTuple,
    loss_grads: &LossGrad,
) -> Result<ModelGrads> {
    check_dim(tuple.negatives.len(), loss_grads.d_negatives.len())?;
    let mut grads = ModelGrads::zeros_like(model);
    model.accumulate(&tuple.query.features, &loss_grads.d_query, &mut grads)?;
    model.accumulate(&tuple.positive.features, &loss_grads.d_positive, &mut grads)?;
    for (n, g) in tuple.negatives.iter().zip(&loss_grads.d_negatives) {
        model.accumulate(&n.features, g, &mut grads)?;
    }
    Ok(grads)
}

/// Loss of one tuple under `model`, with parameter gradients.
pub fn tuple_loss_and_grads(
    model: &EmbedderModel,
    tuple: &TrainingTuple,
    spec: &LossSpec,
) -> Result<(f64, ModelGrads)> {
    let q = model.embed(&tuple.query.features)?;
    let p = model.embed(&tuple.positive.features)?;
    let negs = tuple
        .negatives
        .iter()
        .map(|n| model.embed(&n.features))
        .collect::<Result<Vec<_>>>()?;
    let lg = losses::evaluate(spec, q.values(), p.values(), &negs)?;
    let grads = backprop(model, tuple, &lg)?;
    Ok((lg.loss, grads))
}

/// Optimizer and schedule settings. The number of negatives per tuple is
/// `mining.n_neg`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: LossSpec,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_halving_period: usize,
    pub batch_tuples: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub mining: MiningConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossSpec::default(),
            lr0: 0.001,
            momentum: 0.9,
            weight_decay: 0.001,
            lr_halving_period: 5,
            batch_tuples: 4,
            max_epochs: 30,
            seed: 7,
            mining: MiningConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.mining.validate()?;
        let positive = [
            ("lr0", self.lr0),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ];
        for (name, v) in positive {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if self.lr0 == 0.0 {
            return Err(Error::InvalidArgument("lr0 must be positive".into()));
        }
        if self.batch_tuples == 0 || self.lr_halving_period == 0 {
            return Err(Error::InvalidArgument(
                "batch_tuples and lr_halving_period must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// `lr0 / 2^⌊epoch / period⌋`
pub fn learning_rate(config: &TrainConfig, epoch: usize) -> f64 {
    let halvings = (epoch / config.lr_halving_period).min(1074) as i32;
    config.lr0 * 0.5f64.powi(halvings)
}

/// Momentum buffers plus the schedule position.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: ModelGrads,
    pub epoch: usize,
    pub lr: f64,
}

impl OptimizerState {
    pub fn new(model: &EmbedderModel, config: &TrainConfig) -> Self {
        Self {
            velocity: ModelGrads::zeros_like(model),
            epoch: 0,
            lr: learning_rate(config, 0),
        }
    }

    pub fn set_epoch(&mut self, epoch: usize, config: &TrainConfig) {
        self.epoch = epoch;
        self.lr = learning_rate(config, epoch);
    }
}

/// `v ← μ·v − lr·(g + λ·w)`, `w ← w + v`. Weight decay applies to weights,
/// not biases.
pub fn sgd_step(
    model: &mut EmbedderModel,
    grads: &ModelGrads,
    state: &mut OptimizerState,
    config: &TrainConfig,
) -> Result<()> {
    if !grads.matches(model) || !state.velocity.matches(model) {
        return Err(Error::InvalidArgument(
            "gradient shape does not match model".into(),
        ));
    }
    for (li, l) in grads.layers.iter().enumerate() {
        let bad = l.weights.iter().chain(&l.bias).position(|v| !v.is_finite());
        if let Some(i) = bad {
            return Err(Error::NonFinite(format!(
                "gradient of layer {li}, parameter {i} at epoch {}",
                state.epoch
            )));
        }
    }
    let (mu, lr, wd) = (config.momentum, state.lr, config.weight_decay);
    for ((layer, g), v) in model
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.velocity.layers)
    {
        for ((w, gw), vw) in layer.weights.iter_mut().zip(&g.weights).zip(&mut v.weights) {
            *vw = mu * *vw - lr * (gw + wd * *w);
            *w += *vw;
        }
        for ((b, gb), vb) in layer.bias.iter_mut().zip(&g.bias).zip(&mut v.bias) {
            *vb = mu * *vb - lr * gb;
            *b += *vb;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub tuples: usize,
    /// Mean loss over the epoch's tuples.
    pub train_loss: f64,
    pub val_recall_at_5: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Snapshot with the best validation recall@5 (earliest on ties).
    pub model: EmbedderModel,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
}

/// Recall@5 of `model` on the validation queries against the database.
pub fn validation_recall(model: &EmbedderModel, dataset: &PlaceDataset) -> Result<f64> {
    split_recall(
        model,
        &dataset.database,
        &dataset.queries_val,
        SELECTION_RECALL_N,
    )
}

/// Recall@N of `model` for `queries` against `database` under the 25 m rule.
pub fn split_recall(
    model: &EmbedderModel,
    database: &[Descriptor],
    queries: &[Descriptor],
    n: usize,
) -> Result<f64> {
    let db = RetrievalDb::embed(model, database)?;
    let q = embed_all(model, queries)?;
    let pos: Vec<[f64; 2]> = queries.iter().map(Descriptor::position).collect();
    let curve = recall_at_n(&db, &q, &pos, &[n], DEFAULT_THRESHOLD_M)?;
    Ok(curve.recalls[0])
}

/// Trains with re-mined tuples each epoch and keeps the epoch snapshot
/// with the best validation recall@5.
pub fn train(
    model: &EmbedderModel,
    dataset: &PlaceDataset,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.queries_train.is_empty() || dataset.queries_val.is_empty() {
        return Err(Error::InvalidArgument(
            "training needs non-empty train and validation query splits".into(),
        ));
    }
    check_dim(model.input_dim, dataset.meta.d_in)?;

    let mut current = model.clone();
    let mut best = (model.clone(), None::<usize>, f64::NEG_INFINITY);
    let mut history = Vec::with_capacity(config.max_epochs);
    let mut state = OptimizerState::new(&current, config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut tuples: Vec<TrainingTuple> = Vec::new();

    for epoch in 0..config.max_epochs {
        state.set_epoch(epoch, config);
        if epoch % config.mining.remine_every == 0 {
            tuples = mine_tuples(dataset, &current, &config.mining)?;
        }
        let mut order: Vec<usize> = (0..tuples.len()).collect();
        shuffle(&mut order, &mut rng);

        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_tuples) {
            let mut grads = ModelGrads::zeros_like(&current);
            for &t in batch {
                let (loss, g) = tuple_loss_and_grads(&current, &tuples[t], &config.loss)?;
                loss_sum += loss;
                grads.add(&g);
            }
            grads.scale(1.0 / batch.len() as f64);
            sgd_step(&mut current, &grads, &mut state, config)?;
        }

        let val = validation_recall(&current, dataset)?;
        let record = EpochRecord {
            epoch,
            learning_rate: state.lr,
            tuples: tuples.len(),
            train_loss: loss_sum / tuples.len() as f64,
            val_recall_at_5: val,
        };
        info!(
            "epoch {epoch}: lr {:.2e} loss {:.6} val recall@5 {:.4}",
            record.learning_rate, record.train_loss, val
        );
        if val > best.2 {
            best = (current.clone(), Some(epoch), val);
        }
        history.push(record);
    }
    debug!("best epoch {:?}", best.1);
    Ok(TrainOutcome {
        model: best.0,
        best_epoch: best.1,
        history,
    })
}

/// Header line of a checkpoint file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub architecture: Architecture,
    pub input_dim: usize,
    pub output_dim: usize,
    pub seed: u64,
    pub epoch: Option<usize>,
    pub num_params: usize,
}

/// Serializes a model: one JSON header line, then one parameter per line
/// (flattened as in [`EmbedderModel::params`]) with 17 significant digits.
pub fn checkpoint_to_string(model: &EmbedderModel, epoch: Option<usize>) -> Result<String> {
    let header = CheckpointHeader {
        architecture: model.architecture,
        input_dim: model.input_dim,
        output_dim: model.output_dim,
        seed: model.seed,
        epoch,
        num_params: model.num_params(),
    };
    let mut out = serde_json::to_string(&header)?;
    out.push('\n');
    for p in model.params() {
        out.push_str(&format_f64(p));
        out.push('\n');
    }
    Ok(out)
}

pub fn checkpoint_from_str(text: &str, path: &Path) -> Result<(EmbedderModel, CheckpointHeader)> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines();
    let header: CheckpointHeader = serde_json::from_str(lines.next().unwrap_or(""))
        .map_err(|e| parse_err(1, e.to_string()))?;
    let mut model = EmbedderModel::new(
        header.architecture,
        header.input_dim,
        header.output_dim,
        header.seed,
    )?;
    if model.num_params() != header.num_params {
        return Err(parse_err(
            1,
            format!(
                "header declares {} parameters, architecture has {}",
                header.num_params,
                model.num_params()
            ),
        ));
    }
    let params = lines
        .enumerate()
        .map(|(i, l)| {
            let v: f64 = l
                .trim()
                .parse()
                .map_err(|_| parse_err(i + 2, format!("bad parameter {l:?}")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(parse_err(i + 2, "non-finite parameter".into()))
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    if params.len() != header.num_params {
        return Err(parse_err(
            params.len() + 2,
            format!(
                "expected {} parameters, found {}",
                header.num_params,
                params.len()
            ),
        ));
    }
    model.set_params(&params)?;
    Ok((model, header))
}

pub fn save_checkpoint(path: &Path, model: &EmbedderModel, epoch: Option<usize>) -> Result<()> {
    fs::write(path, checkpoint_to_string(model, epoch)?)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_checkpoint(path: &Path) -> Result<(EmbedderModel, CheckpointHeader)> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    checkpoint_from_str(&text, path)
}
