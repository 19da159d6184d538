//! The outfit scoring network and its losses.
//!
//! Per item: each active modality is projected to the shared embedding
//! width by a single-layer perceptron, the projections are concatenated,
//! and a 2-layer MLP (ReLU + dropout after layer 1) produces the item
//! embedding. An outfit is pooled to one vector by mean/max reduction or
//! a recurrent state update, and a linear + sigmoid head scores it.
//! Backward passes are written by hand and accumulate into parameter
//! gradient buffers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::PreparedItem;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{
    adam_step, bce_with_logit, bce_with_logit_backward, concat_backward, concat_features, dropout,
    dropout_backward, embedding_backward, embedding_lookup, linear_backward, linear_forward, relu,
    relu_backward, reduce_set, reduce_set_backward, sigmoid_scalar, tanh, tanh_backward, AdamHyper,
    AdamState, DropoutMask, Reduce, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Title,
    Category,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Image, Modality::Title, Modality::Category];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Title => "title",
            Modality::Category => "category",
        }
    }

    pub fn parse(s: &str) -> Result<Modality> {
        match s.trim() {
            "image" => Ok(Modality::Image),
            "title" => Ok(Modality::Title),
            "category" => Ok(Modality::Category),
            other => Err(Error::Config(format!("unknown modality '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    Max,
    Rnn,
}

impl Pooling {
    pub fn parse(s: &str) -> Result<Pooling> {
        match s.trim() {
            "mean" => Ok(Pooling::Mean),
            "max" => Ok(Pooling::Max),
            "rnn" => Ok(Pooling::Rnn),
            other => Err(Error::Config(format!("unknown pooling '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub modalities: Vec<Modality>,
    pub pooling: Pooling,
    pub dropout_rate: f64,
    pub fusion_hidden: usize,
    pub category_count: usize,
    pub category_embed_dim: usize,
    pub image_dim: usize,
    pub title_dim: usize,
    pub outfit_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 8,
            modalities: Modality::ALL.to_vec(),
            pooling: Pooling::Mean,
            dropout_rate: 0.5,
            fusion_hidden: 8,
            category_count: 1,
            category_embed_dim: 256,
            image_dim: 4096,
            title_dim: 300,
            outfit_len: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::Config("at least one modality is required".into()));
        }
        let mut sorted = self.modalities.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.modalities.len() {
            return Err(Error::Config("duplicate modality".into()));
        }
        if self.embed_dim == 0 || self.fusion_hidden == 0 || self.outfit_len == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if self.uses(Modality::Category) && self.category_count == 0 {
            return Err(Error::Config("category_count must be >= 1".into()));
        }
        Ok(())
    }

    pub fn uses(&self, m: Modality) -> bool {
        self.modalities.contains(&m)
    }

    /// Active modalities in canonical order (image, title, category).
    pub fn active(&self) -> Vec<Modality> {
        Modality::ALL
            .iter()
            .copied()
            .filter(|m| self.uses(*m))
            .collect()
    }

    fn modality_dim(&self, m: Modality) -> usize {
        match m {
            Modality::Image => self.image_dim,
            Modality::Title => self.title_dim,
            Modality::Category => self.category_embed_dim,
        }
    }
}

/// Margin for the contrastive (Siamese) objective.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SiameseConfig {
    pub margin: f64,
}

impl Default for SiameseConfig {
    fn default() -> Self {
        SiameseConfig { margin: 10.0 }
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub tensor: Tensor,
    pub adam: AdamState,
}

/// Named trainable tensors with their optimizer state.
#[derive(Debug, Clone)]
pub struct ModelParams {
    entries: BTreeMap<String, ParamEntry>,
}

impl ModelParams {
    pub fn empty() -> ModelParams {
        ModelParams {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        let adam = AdamState::new(tensor.numel());
        self.entries
            .insert(name.to_string(), ParamEntry { tensor, adam });
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tensor(&self, name: &str) -> &Tensor {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
            .tensor
    }

    pub fn tensor_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
            .tensor
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.tensor.grad_mut();
            e.tensor.zero_grad();
        }
    }

    /// Scale every gradient buffer (used to turn summed grads into means).
    pub fn scale_grads(&mut self, s: f64) {
        for e in self.entries.values_mut() {
            for g in e.tensor.grad_mut() {
                *g *= s;
            }
        }
    }

    pub fn adam_step_all(&mut self, hyper: &AdamHyper) -> Result<()> {
        for e in self.entries.values_mut() {
            adam_step(&mut e.tensor, &mut e.adam, hyper)?;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|e| e.tensor.all_finite())
    }
}

fn glorot(rng: &mut Rng, fan_in: usize, fan_out: usize, shape: Vec<usize>) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.uniform(-a, a)).collect();
    Tensor::new(shape, data).expect("glorot shape")
}

/// Fresh parameters: Glorot-uniform weights, zero biases, a small-uniform
/// category table, zeroed Adam state. Construction order is fixed so a
/// seed fully determines every value.
pub fn init_params(config: &ModelConfig, rng: &mut Rng) -> Result<ModelParams> {
    config.validate()?;
    let d = config.embed_dim;
    let mut params = ModelParams::empty();
    for m in config.active() {
        let dk = config.modality_dim(m);
        params.insert(
            &format!("proj_{}_w", m.name()),
            glorot(rng, dk, d, vec![dk, d]),
        );
        params.insert(&format!("proj_{}_b", m.name()), Tensor::zeros(vec![d]));
    }
    if config.uses(Modality::Category) {
        let numel = config.category_count * config.category_embed_dim;
        let data = (0..numel).map(|_| rng.uniform(-0.05, 0.05)).collect();
        params.insert(
            "category_table",
            Tensor::new(vec![config.category_count, config.category_embed_dim], data)?,
        );
    }
    let k = config.active().len();
    params.insert(
        "fusion_w1",
        glorot(rng, k * d, config.fusion_hidden, vec![k * d, config.fusion_hidden]),
    );
    params.insert("fusion_b1", Tensor::zeros(vec![config.fusion_hidden]));
    params.insert(
        "fusion_w2",
        glorot(rng, config.fusion_hidden, d, vec![config.fusion_hidden, d]),
    );
    params.insert("fusion_b2", Tensor::zeros(vec![d]));
    if config.pooling == Pooling::Rnn {
        params.insert("rnn_wh", glorot(rng, d, d, vec![d, d]));
        params.insert("rnn_wx", glorot(rng, d, d, vec![d, d]));
        params.insert("rnn_b", Tensor::zeros(vec![d]));
    }
    params.insert("classifier_w", glorot(rng, d, 1, vec![d]));
    params.insert("classifier_b", Tensor::zeros(vec![1]));
    Ok(params)
}

// ---------------------------------------------------------------------------
// Inputs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// One item's modality bundle as the network consumes it.
#[derive(Debug, Clone)]
pub struct ItemInput<'a> {
    pub image: Option<&'a [f32]>,
    pub title: Option<&'a [f32]>,
    pub category: Option<usize>,
}

impl<'a> ItemInput<'a> {
    pub fn from_prepared(item: &'a PreparedItem) -> ItemInput<'a> {
        ItemInput {
            image: Some(&item.image_feature),
            title: Some(&item.title_vector),
            category: Some(item.category_id),
        }
    }
}

/// A labelled outfit in model-input form.
#[derive(Debug, Clone)]
pub struct OutfitExample<'a> {
    pub items: Vec<ItemInput<'a>>,
    pub label: u8,
}

fn to_row(v: &[f32]) -> Tensor {
    Tensor::new(vec![1, v.len()], v.iter().map(|x| f64::from(*x)).collect()).expect("row")
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

/// Everything the encoder backward needs from one forward pass.
pub struct EncodeTrace {
    modal_inputs: Vec<(Modality, Tensor)>, // projection inputs, [1, d_k]
    category_id: Option<usize>,
    concat: Tensor,
    h_pre: Tensor,
    h_drop: Tensor,
    mask: DropoutMask,
}

/// Encode one item to its fused embedding F (shape [1, d]).
pub fn encode_item_traced(
    item: &ItemInput,
    config: &ModelConfig,
    params: &ModelParams,
    mode: Mode,
    rng: &mut Rng,
) -> Result<(Tensor, EncodeTrace)> {
    let mut modal_inputs = Vec::new();
    let mut category_id = None;
    let mut projections = Vec::new();
    for m in config.active() {
        let x = match m {
            Modality::Image => {
                let v = item.image.ok_or_else(|| {
                    Error::Contract("item is missing image data required by the config".into())
                })?;
                if v.len() != config.image_dim {
                    return Err(Error::ShapeMismatch {
                        op: "encode_item image",
                        left: vec![config.image_dim],
                        right: vec![v.len()],
                    });
                }
                to_row(v)
            }
            Modality::Title => {
                let v = item.title.ok_or_else(|| {
                    Error::Contract("item is missing title data required by the config".into())
                })?;
                if v.len() != config.title_dim {
                    return Err(Error::ShapeMismatch {
                        op: "encode_item title",
                        left: vec![config.title_dim],
                        right: vec![v.len()],
                    });
                }
                to_row(v)
            }
            Modality::Category => {
                let id = item.category.ok_or_else(|| {
                    Error::Contract("item is missing category id required by the config".into())
                })?;
                category_id = Some(id);
                embedding_lookup(params.tensor("category_table"), &[id])?
            }
        };
        let w = params.tensor(&format!("proj_{}_w", m.name()));
        let b = params.tensor(&format!("proj_{}_b", m.name()));
        projections.push(linear_forward(&x, w, b)?);
        modal_inputs.push((m, x));
    }
    let refs: Vec<&Tensor> = projections.iter().collect();
    let concat = concat_features(&refs)?;
    let h_pre = linear_forward(&concat, params.tensor("fusion_w1"), params.tensor("fusion_b1"))?;
    let h_relu = relu(&h_pre);
    let (h_drop, mask) = dropout(&h_relu, config.dropout_rate, mode == Mode::Train, rng)?;
    let f = linear_forward(&h_drop, params.tensor("fusion_w2"), params.tensor("fusion_b2"))?;
    Ok((
        f,
        EncodeTrace {
            modal_inputs,
            category_id,
            concat,
            h_pre,
            h_drop,
            mask,
        },
    ))
}

pub fn encode_item(
    item: &ItemInput,
    config: &ModelConfig,
    params: &ModelParams,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Tensor> {
    encode_item_traced(item, config, params, mode, rng).map(|(f, _)| f)
}

/// Accumulate encoder gradients for one item given dL/dF.
pub fn encode_item_backward(
    trace: &EncodeTrace,
    df: &Tensor,
    config: &ModelConfig,
    params: &mut ModelParams,
) -> Result<()> {
    let (dh_drop, dw2, db2) =
        linear_backward(&trace.h_drop, params.tensor("fusion_w2"), df)?;
    params.tensor_mut("fusion_w2").accumulate_grad(&dw2)?;
    params.tensor_mut("fusion_b2").accumulate_grad(&db2)?;
    let dh_relu = dropout_backward(&trace.mask, &dh_drop);
    let dh_pre = relu_backward(&trace.h_pre, &dh_relu);
    let (dconcat, dw1, db1) =
        linear_backward(&trace.concat, params.tensor("fusion_w1"), &dh_pre)?;
    params.tensor_mut("fusion_w1").accumulate_grad(&dw1)?;
    params.tensor_mut("fusion_b1").accumulate_grad(&db1)?;

    let d = config.embed_dim;
    let widths = vec![d; trace.modal_inputs.len()];
    let dprojs = concat_backward(&dconcat, &widths)?;
    for ((m, x), dproj) in trace.modal_inputs.iter().zip(dprojs.iter()) {
        let wname = format!("proj_{}_w", m.name());
        let (dx, dw, db) = linear_backward(x, params.tensor(&wname), dproj)?;
        params.tensor_mut(&wname).accumulate_grad(&dw)?;
        params
            .tensor_mut(&format!("proj_{}_b", m.name()))
            .accumulate_grad(&db)?;
        if *m == Modality::Category {
            let id = trace.category_id.expect("category trace");
            embedding_backward(params.tensor_mut("category_table"), &[id], &dx)?;
        }
    }
    Ok(())
}

pub enum PoolTrace {
    Reduce {
        stacked: Tensor,
        kind: Reduce,
    },
    Rnn {
        /// h_0 .. h_m (h_0 is the zero state, h_m is the output).
        states: Vec<Tensor>,
    },
}

fn stack_rows(fs: &[Tensor]) -> Result<Tensor> {
    let m = fs.len();
    let d = fs[0].cols();
    let mut data = Vec::with_capacity(m * d);
    for f in fs {
        if f.cols() != d {
            return Err(Error::ShapeMismatch {
                op: "pool_outfit",
                left: vec![d],
                right: f.shape().to_vec(),
            });
        }
        data.extend_from_slice(f.data());
    }
    Tensor::new(vec![m, d], data)
}

/// Pool item embeddings into the outfit embedding (shape [1, d]).
pub fn pool_outfit_traced(
    fs: &[Tensor],
    config: &ModelConfig,
    params: &ModelParams,
) -> Result<(Tensor, PoolTrace)> {
    if fs.is_empty() {
        return Err(Error::Contract("pool_outfit over an empty outfit".into()));
    }
    let d = config.embed_dim;
    match config.pooling {
        Pooling::Mean | Pooling::Max => {
            let kind = if config.pooling == Pooling::Mean {
                Reduce::Mean
            } else {
                Reduce::Max
            };
            let stacked = stack_rows(fs)?;
            let pooled = reduce_set(&stacked, kind)?;
            let pooled = Tensor::new(vec![1, d], pooled.data().to_vec())?;
            Ok((pooled, PoolTrace::Reduce { stacked, kind }))
        }
        Pooling::Rnn => {
            let wh = params.tensor("rnn_wh");
            let wx = params.tensor("rnn_wx");
            let b = params.tensor("rnn_b");
            let zero_b = Tensor::zeros(vec![d]);
            let mut states = vec![Tensor::zeros(vec![1, d])];
            for f in fs {
                let prev = states.last().expect("state");
                let from_h = linear_forward(prev, wh, b)?;
                let from_x = linear_forward(f, wx, &zero_b)?;
                let pre = add(&from_h, &from_x)?;
                states.push(tanh(&pre));
            }
            let out = states.last().expect("state").clone();
            Ok((out, PoolTrace::Rnn { states }))
        }
    }
}

pub fn pool_outfit(fs: &[Tensor], config: &ModelConfig, params: &ModelParams) -> Result<Tensor> {
    pool_outfit_traced(fs, config, params).map(|(p, _)| p)
}

fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "add",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| x + y)
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Backward through pooling; returns dL/dF per item and accumulates any
/// RNN parameter gradients.
pub fn pool_outfit_backward(
    trace: &PoolTrace,
    fs: &[Tensor],
    dp: &Tensor,
    params: &mut ModelParams,
) -> Result<Vec<Tensor>> {
    match trace {
        PoolTrace::Reduce { stacked, kind } => {
            let dy = Tensor::new(vec![dp.cols()], dp.data().to_vec())?;
            let dx = reduce_set_backward(stacked, *kind, &dy)?;
            let m = fs.len();
            let d = stacked.cols();
            let mut out = Vec::with_capacity(m);
            for i in 0..m {
                out.push(Tensor::new(
                    vec![1, d],
                    dx.data()[i * d..(i + 1) * d].to_vec(),
                )?);
            }
            Ok(out)
        }
        PoolTrace::Rnn { states } => {
            let m = fs.len();
            let mut dfs = vec![Tensor::zeros(vec![1, dp.cols()]); m];
            let mut dh = dp.clone();
            // walk the recurrence backwards
            for j in (0..m).rev() {
                let h_j = &states[j + 1];
                let h_prev = &states[j];
                let dpre = tanh_backward(h_j, &dh);
                let (dh_prev, dwh, db) =
                    linear_backward(h_prev, params.tensor("rnn_wh"), &dpre)?;
                params.tensor_mut("rnn_wh").accumulate_grad(&dwh)?;
                params.tensor_mut("rnn_b").accumulate_grad(&db)?;
                let (dx, dwx, _) = linear_backward(&fs[j], params.tensor("rnn_wx"), &dpre)?;
                params.tensor_mut("rnn_wx").accumulate_grad(&dwx)?;
                dfs[j] = dx;
                dh = dh_prev;
            }
            Ok(dfs)
        }
    }
}

pub struct ScoreTrace {
    pub encode: Vec<EncodeTrace>,
    pub fs: Vec<Tensor>,
    pub pool: PoolTrace,
    pub pooled: Tensor,
    pub logit: f64,
    pub prob: f64,
}

/// Score an outfit: probability = sigmoid(w . pooled + b).
pub fn score_outfit_traced(
    items: &[ItemInput],
    config: &ModelConfig,
    params: &ModelParams,
    mode: Mode,
    rng: &mut Rng,
) -> Result<ScoreTrace> {
    if items.is_empty() {
        return Err(Error::Contract("score_outfit on an empty outfit".into()));
    }
    let mut fs = Vec::with_capacity(items.len());
    let mut traces = Vec::with_capacity(items.len());
    for it in items {
        let (f, tr) = encode_item_traced(it, config, params, mode, rng)?;
        fs.push(f);
        traces.push(tr);
    }
    let (pooled, pool) = pool_outfit_traced(&fs, config, params)?;
    let w = params.tensor("classifier_w");
    let b = params.tensor("classifier_b");
    let mut logit = b.data()[0];
    for (wj, pj) in w.data().iter().zip(pooled.data().iter()) {
        logit += wj * pj;
    }
    let prob = sigmoid_scalar(logit);
    Ok(ScoreTrace {
        encode: traces,
        fs,
        pool,
        pooled,
        logit,
        prob,
    })
}

/// Returns (probability, logit). Deterministic in infer mode.
pub fn score_outfit(
    items: &[ItemInput],
    config: &ModelConfig,
    params: &ModelParams,
    mode: Mode,
    rng: &mut Rng,
) -> Result<(f64, f64)> {
    let tr = score_outfit_traced(items, config, params, mode, rng)?;
    Ok((tr.prob, tr.logit))
}

/// Backpropagate dL/dlogit through the whole scorer.
pub fn score_outfit_backward(
    trace: &ScoreTrace,
    dlogit: f64,
    config: &ModelConfig,
    params: &mut ModelParams,
) -> Result<()> {
    let d = config.embed_dim;
    // classifier head
    let w = params.tensor("classifier_w").data().to_vec();
    let mut dw = Tensor::zeros(vec![d]);
    for j in 0..d {
        dw.data_mut()[j] = dlogit * trace.pooled.data()[j];
    }
    params.tensor_mut("classifier_w").accumulate_grad(&dw)?;
    params
        .tensor_mut("classifier_b")
        .accumulate_grad(&Tensor::scalar(dlogit))?;
    let dpooled = Tensor::new(vec![1, d], w.iter().map(|wj| wj * dlogit).collect())?;
    // pooling, then each encoder
    let dfs = pool_outfit_backward(&trace.pool, &trace.fs, &dpooled, params)?;
    for (tr, df) in trace.encode.iter().zip(dfs.iter()) {
        encode_item_backward(tr, df, config, params)?;
    }
    Ok(())
}

/// Mean binary cross entropy over a batch, with gradients accumulated
/// into `params` (already scaled by 1/batch).
pub fn outfit_loss(
    batch: &[OutfitExample],
    config: &ModelConfig,
    params: &mut ModelParams,
    rng: &mut Rng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("outfit_loss on an empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for ex in batch {
        let trace = score_outfit_traced(&ex.items, config, params, Mode::Train, rng)?;
        total += bce_with_logit(trace.logit, ex.label);
        let dlogit = bce_with_logit_backward(trace.logit, ex.label) * scale;
        score_outfit_backward(&trace, dlogit, config, params)?;
    }
    Ok(total * scale)
}

/// Contrastive loss for one outfit (Siamese baseline).
///
/// A random pivot item is embedded on one tower; the remaining items are
/// pooled on the other. d is the Euclidean distance between the two.
/// loss = y d^2 + (1-y) max(margin - d, 0)^2.
pub fn siamese_loss(
    ex: &OutfitExample,
    margin: f64,
    config: &ModelConfig,
    params: &mut ModelParams,
    rng: &mut Rng,
) -> Result<f64> {
    siamese_loss_scaled(ex, margin, config, params, rng, 1.0)
}

pub(crate) fn siamese_loss_scaled(
    ex: &OutfitExample,
    margin: f64,
    config: &ModelConfig,
    params: &mut ModelParams,
    rng: &mut Rng,
    grad_scale: f64,
) -> Result<f64> {
    if ex.items.len() < 2 {
        return Err(Error::Contract(
            "siamese_loss needs at least two items (pivot + query set)".into(),
        ));
    }
    let pivot_idx = rng.below(ex.items.len());
    let (pivot_f, pivot_trace) =
        encode_item_traced(&ex.items[pivot_idx], config, params, Mode::Train, rng)?;
    let mut query_fs = Vec::new();
    let mut query_traces = Vec::new();
    for (i, it) in ex.items.iter().enumerate() {
        if i == pivot_idx {
            continue;
        }
        let (f, tr) = encode_item_traced(it, config, params, Mode::Train, rng)?;
        query_fs.push(f);
        query_traces.push(tr);
    }
    let (pooled, pool_trace) = pool_outfit_traced(&query_fs, config, params)?;

    let d = config.embed_dim;
    let mut dist_sq = 0.0;
    let mut diff = vec![0.0; d];
    for j in 0..d {
        let delta = pooled.data()[j] - pivot_f.data()[j];
        diff[j] = delta;
        dist_sq += delta * delta;
    }
    let dist = dist_sq.sqrt();

    let y = f64::from(ex.label);
    let hinge = (margin - dist).max(0.0);
    let loss = y * dist_sq + (1.0 - y) * hinge * hinge;

    // d loss / d diff_j
    //   y = 1: 2 diff_j
    //   y = 0: -2 hinge * diff_j / dist  (0 in the flat hinge region)
    let coeff = if ex.label == 1 {
        2.0
    } else if hinge > 0.0 && dist > 1e-12 {
        -2.0 * hinge / dist
    } else {
        0.0
    };
    let dq = Tensor::new(
        vec![1, d],
        diff.iter().map(|v| coeff * v * grad_scale).collect(),
    )?;
    let dpivot = Tensor::new(
        vec![1, d],
        diff.iter().map(|v| -coeff * v * grad_scale).collect(),
    )?;
    let dfs = pool_outfit_backward(&pool_trace, &query_fs, &dq, params)?;
    for (tr, df) in query_traces.iter().zip(dfs.iter()) {
        encode_item_backward(tr, df, config, params)?;
    }
    encode_item_backward(&pivot_trace, &dpivot, config, params)?;
    Ok(loss)
}

/// Siamese inference score: negative distance between the pivot (first
/// item, for determinism) and the pooled rest.
pub fn siamese_score(
    items: &[ItemInput],
    config: &ModelConfig,
    params: &ModelParams,
    rng: &mut Rng,
) -> Result<f64> {
    if items.len() < 2 {
        return Err(Error::Contract(
            "siamese_score needs at least two items".into(),
        ));
    }
    let pivot = encode_item(&items[0], config, params, Mode::Infer, rng)?;
    let mut fs = Vec::new();
    for it in &items[1..] {
        fs.push(encode_item(it, config, params, Mode::Infer, rng)?);
    }
    let pooled = pool_outfit(&fs, config, params)?;
    let mut dist_sq = 0.0;
    for (p, q) in pooled.data().iter().zip(pivot.data().iter()) {
        dist_sq += (p - q) * (p - q);
    }
    Ok(-dist_sq.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            embed_dim: 3,
            modalities: vec![Modality::Image, Modality::Category],
            pooling: Pooling::Mean,
            dropout_rate: 0.0,
            fusion_hidden: 3,
            category_count: 4,
            category_embed_dim: 3,
            image_dim: 3,
            title_dim: 3,
            outfit_len: 4,
        }
    }

    fn item_data(seed: u64, dim: usize) -> Vec<f32> {
        let mut rng = Rng::new(seed);
        (0..dim).map(|_| rng.normal() as f32).collect()
    }

    #[test]
    fn zero_inputs_and_zero_biases_give_zero_embedding() {
        let config = ModelConfig {
            modalities: vec![Modality::Image],
            dropout_rate: 0.0,
            ..tiny_config()
        };
        let mut rng = Rng::new(1);
        let params = init_params(&config, &mut rng).unwrap();
        let zeros = vec![0.0f32; 3];
        let item = ItemInput {
            image: Some(&zeros),
            title: None,
            category: None,
        };
        let f = encode_item(&item, &config, &params, Mode::Infer, &mut rng).unwrap();
        assert!(f.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_weights_pass_a_single_modality_through() {
        let config = ModelConfig {
            modalities: vec![Modality::Image],
            dropout_rate: 0.0,
            ..tiny_config()
        };
        let mut rng = Rng::new(1);
        let mut params = init_params(&config, &mut rng).unwrap();
        let eye = Tensor::matrix(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        *params.tensor_mut("proj_image_w") = eye.clone();
        *params.tensor_mut("proj_image_b") = Tensor::zeros(vec![3]);
        // identity through the 2-layer MLP: relu after w1 needs positives,
        // so route through w1 = I, w2 = I with non-negative input
        *params.tensor_mut("fusion_w1") = eye.clone();
        *params.tensor_mut("fusion_b1") = Tensor::zeros(vec![3]);
        *params.tensor_mut("fusion_w2") = eye;
        *params.tensor_mut("fusion_b2") = Tensor::zeros(vec![3]);
        let raw = [0.5f32, 1.25, 2.0];
        let item = ItemInput {
            image: Some(&raw),
            title: None,
            category: None,
        };
        let f = encode_item(&item, &config, &params, Mode::Infer, &mut rng).unwrap();
        for (o, r) in f.data().iter().zip(raw.iter()) {
            assert!((o - f64::from(*r)).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_modality_is_a_contract_violation() {
        let config = tiny_config();
        let mut rng = Rng::new(2);
        let params = init_params(&config, &mut rng).unwrap();
        let item = ItemInput {
            image: None,
            title: None,
            category: Some(1),
        };
        let err = encode_item(&item, &config, &params, Mode::Infer, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn pool_mean_matches_reduce() {
        let config = tiny_config();
        let mut rng = Rng::new(3);
        let params = init_params(&config, &mut rng).unwrap();
        let fs = vec![
            Tensor::new(vec![1, 3], vec![1.0, 2.0, 0.0]).unwrap(),
            Tensor::new(vec![1, 3], vec![3.0, 4.0, 0.0]).unwrap(),
        ];
        let p = pool_outfit(&fs, &config, &params).unwrap();
        assert_eq!(p.data(), &[2.0, 3.0, 0.0]);
    }

    #[test]
    fn rnn_with_identity_wx_collapses_to_tanh() {
        let config = ModelConfig {
            pooling: Pooling::Rnn,
            ..tiny_config()
        };
        let mut rng = Rng::new(4);
        let mut params = init_params(&config, &mut rng).unwrap();
        *params.tensor_mut("rnn_wh") = Tensor::zeros(vec![3, 3]);
        *params.tensor_mut("rnn_wx") = Tensor::matrix(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        *params.tensor_mut("rnn_b") = Tensor::zeros(vec![3]);
        let x = Tensor::new(vec![1, 3], vec![0.3, -0.7, 1.1]).unwrap();
        let p = pool_outfit(&[x.clone()], &config, &params).unwrap();
        for (o, xv) in p.data().iter().zip(x.data().iter()) {
            assert!((o - xv.tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn rnn_is_order_sensitive_for_generic_weights() {
        let config = ModelConfig {
            pooling: Pooling::Rnn,
            ..tiny_config()
        };
        let mut rng = Rng::new(5);
        let params = init_params(&config, &mut rng).unwrap();
        let a = Tensor::new(vec![1, 3], vec![1.0, 0.2, -0.4]).unwrap();
        let b = Tensor::new(vec![1, 3], vec![-0.9, 0.8, 0.1]).unwrap();
        let p1 = pool_outfit(&[a.clone(), b.clone()], &config, &params).unwrap();
        let p2 = pool_outfit(&[b, a], &config, &params).unwrap();
        let diff: f64 = p1
            .data()
            .iter()
            .zip(p2.data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(diff > 1e-9, "rnn pooling should depend on order");
    }

    #[test]
    fn zero_classifier_scores_half() {
        let config = tiny_config();
        let mut rng = Rng::new(6);
        let mut params = init_params(&config, &mut rng).unwrap();
        *params.tensor_mut("classifier_w") = Tensor::zeros(vec![3]);
        *params.tensor_mut("classifier_b") = Tensor::zeros(vec![1]);
        let img = item_data(10, 3);
        let item = ItemInput {
            image: Some(&img),
            title: None,
            category: Some(2),
        };
        let (p, logit) =
            score_outfit(&[item], &config, &params, Mode::Infer, &mut rng).unwrap();
        assert_eq!(logit, 0.0);
        assert_eq!(p, 0.5);
    }

    #[test]
    fn mean_pooling_score_is_permutation_invariant() {
        let config = tiny_config();
        let mut rng = Rng::new(7);
        let params = init_params(&config, &mut rng).unwrap();
        let data: Vec<Vec<f32>> = (0..4).map(|i| item_data(20 + i, 3)).collect();
        let items: Vec<ItemInput> = data
            .iter()
            .enumerate()
            .map(|(i, d)| ItemInput {
                image: Some(d),
                title: None,
                category: Some(i % 4),
            })
            .collect();
        let (p1, _) = score_outfit(&items, &config, &params, Mode::Infer, &mut rng).unwrap();
        let mut rev: Vec<ItemInput> = items.clone();
        rev.reverse();
        let (p2, _) = score_outfit(&rev, &config, &params, Mode::Infer, &mut rng).unwrap();
        assert!((p1 - p2).abs() <= 1e-12);
    }

    #[test]
    fn increasing_bias_strictly_increases_probability() {
        let config = tiny_config();
        let mut rng = Rng::new(8);
        let mut params = init_params(&config, &mut rng).unwrap();
        let img = item_data(30, 3);
        let item = ItemInput {
            image: Some(&img),
            title: None,
            category: Some(0),
        };
        let mut last = -1.0;
        for b in [-1.0, 0.0, 1.0, 2.0] {
            *params.tensor_mut("classifier_b") = Tensor::vector(vec![b]);
            let (p, _) =
                score_outfit(&[item.clone()], &config, &params, Mode::Infer, &mut rng).unwrap();
            assert!(p > last);
            last = p;
        }
    }

    #[test]
    fn all_zero_logits_give_ln2_loss() {
        let config = tiny_config();
        let mut rng = Rng::new(9);
        let mut params = init_params(&config, &mut rng).unwrap();
        *params.tensor_mut("classifier_w") = Tensor::zeros(vec![3]);
        *params.tensor_mut("classifier_b") = Tensor::zeros(vec![1]);
        params.zero_grads();
        let img = item_data(31, 3);
        let mk = |label| OutfitExample {
            items: vec![ItemInput {
                image: Some(&img),
                title: None,
                category: Some(1),
            }],
            label,
        };
        let batch = vec![mk(0), mk(1), mk(1)];
        let loss = outfit_loss(&batch, &config, &mut params, &mut rng).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn separated_logits_give_vanishing_loss() {
        let config = ModelConfig {
            modalities: vec![Modality::Image],
            ..tiny_config()
        };
        let mut rng = Rng::new(10);
        let mut params = init_params(&config, &mut rng).unwrap();
        // force |logit| = 20 with the right sign by wiring the classifier
        // to a pass-through of a constant input
        let eye = Tensor::matrix(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        *params.tensor_mut("proj_image_w") = eye.clone();
        *params.tensor_mut("proj_image_b") = Tensor::zeros(vec![3]);
        *params.tensor_mut("fusion_w1") = eye.clone();
        *params.tensor_mut("fusion_b1") = Tensor::zeros(vec![3]);
        *params.tensor_mut("fusion_w2") = eye;
        *params.tensor_mut("fusion_b2") = Tensor::zeros(vec![3]);
        *params.tensor_mut("classifier_w") = Tensor::vector(vec![20.0, 0.0, 0.0]);
        *params.tensor_mut("classifier_b") = Tensor::zeros(vec![1]);
        params.zero_grads();
        let pos = [1.0f32, 0.0, 0.0];
        let neg = [-1.0f32, 0.0, 0.0];
        let batch = vec![
            OutfitExample {
                items: vec![ItemInput {
                    image: Some(&pos),
                    title: None,
                    category: None,
                }],
                label: 1,
            },
            OutfitExample {
                items: vec![ItemInput {
                    image: Some(&neg),
                    title: None,
                    category: None,
                }],
                label: 0,
            },
        ];
        let loss = outfit_loss(&batch, &config, &mut params, &mut rng).unwrap();
        assert!(loss < 1e-8, "loss {loss}");
    }

    #[test]
    fn siamese_loss_plugs_into_the_formula() {
        // rig encode/pool so that distance is exactly 2: pivot at origin,
        // single query item embedding at (2, 0, 0)
        let config = ModelConfig {
            modalities: vec![Modality::Image],
            ..tiny_config()
        };
        let mut rng = Rng::new(11);
        let mut params = init_params(&config, &mut rng).unwrap();
        let eye = Tensor::matrix(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        *params.tensor_mut("proj_image_w") = eye.clone();
        *params.tensor_mut("proj_image_b") = Tensor::zeros(vec![3]);
        *params.tensor_mut("fusion_w1") = eye.clone();
        *params.tensor_mut("fusion_b1") = Tensor::zeros(vec![3]);
        *params.tensor_mut("fusion_w2") = eye;
        *params.tensor_mut("fusion_b2") = Tensor::zeros(vec![3]);
        params.zero_grads();
        let a = [0.0f32, 0.0, 0.0];
        let b = [2.0f32, 0.0, 0.0];
        let mk = |label| OutfitExample {
            items: vec![
                ItemInput {
                    image: Some(&a),
                    title: None,
                    category: None,
                },
                ItemInput {
                    image: Some(&b),
                    title: None,
                    category: None,
                },
            ],
            label,
        };
        // d = 2 regardless of which item is the pivot
        let loss = siamese_loss(&mk(1), 10.0, &config, &mut params, &mut rng).unwrap();
        assert!((loss - 4.0).abs() < 1e-12);
        let loss = siamese_loss(&mk(0), 10.0, &config, &mut params, &mut rng).unwrap();
        assert!((loss - 64.0).abs() < 1e-12);
        // hinge region: distance beyond the margin costs nothing
        let far = [11.0f32, 0.0, 0.0];
        let ex = OutfitExample {
            items: vec![
                ItemInput {
                    image: Some(&a),
                    title: None,
                    category: None,
                },
                ItemInput {
                    image: Some(&far),
                    title: None,
                    category: None,
                },
            ],
            label: 0,
        };
        let loss = siamese_loss(&ex, 10.0, &config, &mut params, &mut rng).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn siamese_needs_two_items() {
        let config = tiny_config();
        let mut rng = Rng::new(12);
        let mut params = init_params(&config, &mut rng).unwrap();
        params.zero_grads();
        let img = item_data(40, 3);
        let ex = OutfitExample {
            items: vec![ItemInput {
                image: Some(&img),
                title: None,
                category: Some(0),
            }],
            label: 1,
        };
        assert!(siamese_loss(&ex, 10.0, &config, &mut params, &mut rng).is_err());
    }

    #[test]
    fn init_is_seed_deterministic_with_expected_shapes() {
        let config = ModelConfig {
            embed_dim: 8,
            modalities: Modality::ALL.to_vec(),
            pooling: Pooling::Rnn,
            dropout_rate: 0.5,
            fusion_hidden: 8,
            category_count: 16,
            category_embed_dim: 12,
            image_dim: 20,
            title_dim: 10,
            outfit_len: 4,
        };
        let a = init_params(&config, &mut Rng::new(99)).unwrap();
        let b = init_params(&config, &mut Rng::new(99)).unwrap();
        assert_eq!(a.names(), b.names());
        for name in a.names() {
            assert_eq!(a.tensor(&name).data(), b.tensor(&name).data(), "{name}");
        }
        assert_eq!(a.tensor("proj_image_w").shape(), &[20, 8]);
        assert_eq!(a.tensor("proj_title_w").shape(), &[10, 8]);
        assert_eq!(a.tensor("proj_category_w").shape(), &[12, 8]);
        assert_eq!(a.tensor("category_table").shape(), &[16, 12]);
        assert_eq!(a.tensor("fusion_w1").shape(), &[24, 8]);
        assert_eq!(a.tensor("fusion_w2").shape(), &[8, 8]);
        assert_eq!(a.tensor("rnn_wh").shape(), &[8, 8]);
        assert_eq!(a.tensor("classifier_w").shape(), &[8]);
        assert_eq!(a.tensor("classifier_b").shape(), &[1]);
    }

    #[test]
    fn init_stddev_matches_the_uniform_law() {
        // a 1000x1000 glorot matrix has stddev a/sqrt(3)
        let mut rng = Rng::new(123);
        let t = glorot(&mut rng, 1000, 1000, vec![1000, 1000]);
        let a = (6.0 / 2000.0f64).sqrt();
        let n = t.numel() as f64;
        let mean: f64 = t.data().iter().sum::<f64>() / n;
        let var: f64 = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let sd = var.sqrt();
        let expected = a / 3.0f64.sqrt();
        assert!((sd - expected).abs() / expected < 0.05, "sd {sd} vs {expected}");
    }

    #[test]
    fn shared_category_table_accumulates_both_items() {
        // an outfit with two items of the same category produces a table
        // gradient equal to the sum of the two single-item passes
        let config = ModelConfig {
            modalities: vec![Modality::Category],
            ..tiny_config()
        };
        let mut rng = Rng::new(13);
        let mut params = init_params(&config, &mut rng).unwrap();
        let mk_item = || ItemInput {
            image: None,
            title: None,
            category: Some(2),
        };
        let both = OutfitExample {
            items: vec![mk_item(), mk_item()],
            label: 1,
        };

        let mut p1 = params.clone();
        p1.zero_grads();
        // batch of one two-item outfit: grads of the mean loss
        outfit_loss(
            &[both.clone()],
            &config,
            &mut p1,
            &mut Rng::new(50),
        )
        .unwrap();
        let combined = p1.tensor("category_table").grad().unwrap().to_vec();

        // sum of the two per-item contributions, computed via two
        // single-item outfits pooled the same way (mean over one item)
        params.zero_grads();
        let trace = score_outfit_traced(&both.items, &config, &params, Mode::Infer, &mut rng)
            .unwrap();
        let dlogit = bce_with_logit_backward(trace.logit, 1);
        // route the same dlogit through each item separately
        let mut pa = params.clone();
        pa.zero_grads();
        let dpooled = {
            let w = pa.tensor("classifier_w").data().to_vec();
            Tensor::new(vec![1, 3], w.iter().map(|wj| wj * dlogit).collect()).unwrap()
        };
        let dfs = pool_outfit_backward(&trace.pool, &trace.fs, &dpooled, &mut pa).unwrap();
        let mut sum = vec![0.0; combined.len()];
        for (tr, df) in trace.encode.iter().zip(dfs.iter()) {
            let mut px = params.clone();
            px.zero_grads();
            encode_item_backward(tr, df, &config, &mut px).unwrap();
            for (s, g) in sum.iter_mut().zip(px.tensor("category_table").grad().unwrap()) {
                *s += g;
            }
        }
        for (c, s) in combined.iter().zip(sum.iter()) {
            assert!((c - s).abs() < 1e-12);
        }
    }
}
