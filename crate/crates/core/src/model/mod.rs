//! Mask-predicting residual U-Net with a per-frame activation classifier.

mod checkpoint;
pub(crate) mod layers;
mod net;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{reflect_index, MagSpectrogram};
use crate::labels::ActivationCurve;
use crate::{Error, Result};
use layers::Tensor;
use net::{BnStat, Layout, NetOutput};

pub use checkpoint::{Checkpoint, OptimizerState, RngState, CHECKPOINT_VERSION};
pub use net::Mode;

/// Momentum of the batch-norm running averages.
pub const BN_MOMENTUM: f64 = 0.1;
/// Fewest spectrogram frames the network accepts.
pub const MIN_FRAMES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskNonlinearity {
    #[default]
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub convs_per_block: usize,
    pub channel_widths: Vec<usize>,
    pub inner_kernel: (usize, usize),
    pub resample_kernel: (usize, usize),
    /// `(freq, time)` stride of the down/upsampling layers.
    pub resample_stride: (usize, usize),
    pub leaky_slope: f64,
    pub classifier_layers: usize,
    pub alpha: f64,
    pub mask_nonlinearity: MaskNonlinearity,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_blocks: 3,
            convs_per_block: 3,
            channel_widths: vec![32, 64, 128],
            inner_kernel: (3, 3),
            resample_kernel: (3, 1),
            resample_stride: (2, 2),
            leaky_slope: 0.2,
            classifier_layers: 4,
            alpha: 0.1,
            mask_nonlinearity: MaskNonlinearity::Sigmoid,
        }
    }
}

impl ModelConfig {
    /// One block of width 2, for gradient checks and fast tests.
    pub fn tiny() -> Self {
        Self {
            num_blocks: 1,
            channel_widths: vec![2],
            ..Self::default()
        }
    }

    /// Small network used by the fixture experiments.
    pub fn small() -> Self {
        Self {
            num_blocks: 3,
            channel_widths: vec![4, 8, 8],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(1..=4).contains(&self.num_blocks) {
            return bad(format!("num_blocks must be in 1..=4, got {}", self.num_blocks));
        }
        if self.channel_widths.len() != self.num_blocks {
            return bad(format!(
                "{} channel widths for {} blocks",
                self.channel_widths.len(),
                self.num_blocks
            ));
        }
        if self.channel_widths.contains(&0) {
            return bad("channel widths must be positive".into());
        }
        if self.convs_per_block != 3 {
            return bad(format!("convs_per_block must be 3, got {}", self.convs_per_block));
        }
        for (name, (kh, kw)) in [("inner_kernel", self.inner_kernel), ("resample_kernel", self.resample_kernel)] {
            if kh % 2 == 0 || kw % 2 == 0 {
                return bad(format!("{name} must have odd sides, got ({kh},{kw})"));
            }
        }
        let (sh, sw) = self.resample_stride;
        if sh == 0 || sw == 0 {
            return bad("resample_stride must be positive".into());
        }
        if self.resample_kernel.0 < sh || self.resample_kernel.1 + 1 < sw {
            return bad("resample kernel too small for its stride".into());
        }
        if self.classifier_layers < self.num_blocks.max(1) {
            return bad(format!(
                "classifier_layers ({}) must be at least num_blocks ({})",
                self.classifier_layers, self.num_blocks
            ));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return bad(format!("leaky_slope must be in [0,1), got {}", self.leaky_slope));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be finite and >= 0, got {}", self.alpha));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    BnScale,
    BnShift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn is_learnable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            ParamKind::Weight => 0,
            ParamKind::Bias => 1,
            ParamKind::BnScale => 2,
            ParamKind::BnShift => 3,
            ParamKind::RunningMean => 4,
            ParamKind::RunningVar => 5,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => ParamKind::Weight,
            1 => ParamKind::Bias,
            2 => ParamKind::BnScale,
            3 => ParamKind::BnShift,
            4 => ParamKind::RunningMean,
            5 => ParamKind::RunningVar,
            _ => return None,
        })
    }
}

/// How a tensor was initialized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "scheme")]
pub enum InitRecord {
    Uniform { bound: f64 },
    Constant { value: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub init: InitRecord,
    pub data: Vec<f64>,
}

/// Summary facts about a parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsMetadata {
    pub num_tensors: usize,
    pub num_learnable: usize,
    pub leaky_slope: f64,
    pub checksum: String,
}

#[derive(Debug, Clone)]
pub struct SeparatorParams {
    config: ModelConfig,
    tensors: Vec<ParamTensor>,
    layout: Layout,
}

impl PartialEq for SeparatorParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.tensors == other.tensors
    }
}

impl SeparatorParams {
    /// Reassembles parameters from stored tensors, checking names and shapes.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<ParamTensor>) -> Result<Self> {
        config.validate()?;
        let (layout, decls) = net::build(&config);
        if decls.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "config declares {} tensors, found {}",
                decls.len(),
                tensors.len()
            )));
        }
        for (d, t) in decls.iter().zip(&tensors) {
            if d.name != t.name || d.shape != t.shape || d.kind != t.kind {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    t.name, t.shape, d.name, d.shape
                )));
            }
            if t.data.len() != t.shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!("tensor {} has wrong length", t.name)));
            }
            if let Some(v) = t.data.iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("tensor {} holds {v}", t.name)));
            }
        }
        Ok(Self {
            config,
            tensors,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub(crate) fn data(&self, idx: usize) -> &[f64] {
        &self.tensors[idx].data
    }

    pub(crate) fn data_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.tensors[idx].data
    }

    /// Number of learnable scalars.
    pub fn num_learnable(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.kind.is_learnable())
            .map(|t| t.data.len())
            .sum()
    }

    /// FNV-1a over names and the bit patterns of every value.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for t in &self.tensors {
            eat(t.name.as_bytes());
            for v in &t.data {
                eat(&v.to_le_bytes());
            }
        }
        h
    }

    pub fn metadata(&self) -> ParamsMetadata {
        ParamsMetadata {
            num_tensors: self.tensors.len(),
            num_learnable: self.num_learnable(),
            leaky_slope: self.config.leaky_slope,
            checksum: format!("{:016x}", self.checksum()),
        }
    }

    /// Folds training-mode batch statistics into the running averages.
    pub(crate) fn update_running_stats(&mut self, stats: &[BnStat], momentum: f64) {
        for s in stats {
            let unbias = if s.count > 1 {
                s.count as f64 / (s.count - 1) as f64
            } else {
                1.0
            };
            for (r, m) in self.data_mut(s.running_mean).iter_mut().zip(&s.mean) {
                *r = (1.0 - momentum) * *r + momentum * m;
            }
            for (r, v) in self.data_mut(s.running_var).iter_mut().zip(&s.var) {
                *r = (1.0 - momentum) * *r + momentum * v * unbias;
            }
        }
    }
}

/// Fan-in scaled uniform weights, unit batch-norm scale, zero shift.
pub fn init_model(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<SeparatorParams> {
    cfg.validate()?;
    let (layout, decls) = net::build(cfg);
    let tensors = decls
        .into_iter()
        .map(|d| {
            let len = d.shape.iter().product();
            let init = match d.kind {
                ParamKind::Weight | ParamKind::Bias => InitRecord::Uniform {
                    bound: 1.0 / (d.fan_in as f64).sqrt(),
                },
                ParamKind::BnScale | ParamKind::RunningVar => InitRecord::Constant { value: 1.0 },
                ParamKind::BnShift | ParamKind::RunningMean => InitRecord::Constant { value: 0.0 },
            };
            let data = match init {
                InitRecord::Uniform { bound } => (0..len).map(|_| rng.random_range(-bound..bound)).collect(),
                InitRecord::Constant { value } => vec![value; len],
            };
            ParamTensor {
                name: d.name,
                shape: d.shape,
                kind: d.kind,
                init,
                data,
            }
        })
        .collect();
    Ok(SeparatorParams {
        config: cfg.clone(),
        tensors,
        layout,
    })
}

/// Per-bin multiplier in `(0, 1)`, `[bins × frames]` bins-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    values: Vec<f64>,
    bins: usize,
    frames: usize,
}

impl Mask {
    pub fn new(values: Vec<f64>, bins: usize, frames: usize) -> Result<Self> {
        if values.len() != bins * frames {
            return Err(Error::Shape(format!("{} values for a {bins}x{frames} mask", values.len())));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Config(format!("mask value {v} outside [0, 1]")));
        }
        Ok(Self { values, bins, frames })
    }

    pub fn filled(value: f64, bins: usize, frames: usize) -> Result<Self> {
        Self::new(vec![value; bins * frames], bins, frames)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.bins, self.frames)
    }

    pub fn get(&self, bin: usize, frame: usize) -> f64 {
        self.values[bin * self.frames + frame]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub mask: Mask,
    pub activation_logits: Vec<f64>,
}

/// Reflect-pads a batch of equally shaped spectrograms into one input tensor.
fn pack_inputs(layout: &Layout, mags: &[&MagSpectrogram]) -> Result<Tensor> {
    let first = mags.first().ok_or(Error::Empty("spectrogram batch"))?;
    let (bins, frames) = first.shape();
    if frames < MIN_FRAMES {
        return Err(Error::Shape(format!("need at least {MIN_FRAMES} frames, got {frames}")));
    }
    let h = bins.div_ceil(layout.multiple_h) * layout.multiple_h;
    let w = frames.div_ceil(layout.multiple_w) * layout.multiple_w;
    if h >= 2 * bins || w >= 2 * frames {
        return Err(Error::Shape(format!("spectrogram {bins}x{frames} too small to pad")));
    }
    let mut t = Tensor::zeros(mags.len(), 1, h, w);
    for (n, m) in mags.iter().enumerate() {
        if m.shape() != (bins, frames) {
            return Err(Error::Shape(format!(
                "batch mixes shapes {:?} and {:?}",
                (bins, frames),
                m.shape()
            )));
        }
        if let Some(v) = m.values().iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("input spectrogram holds {v}")));
        }
        for i in 0..h {
            let si = reflect_index(i as isize, bins);
            for j in 0..w {
                let sj = reflect_index(j as isize, frames);
                let idx = t.idx(n, 0, i, j);
                t.data[idx] = m.get(si, sj);
            }
        }
    }
    Ok(t)
}

/// Sign of every leaky-ReLU input for a train-mode pass over `batch`.
///
/// Two parameter sets with equal patterns sit on the same linear piece of the
/// network, so finite differences between them are meaningful.
pub fn relu_pattern(params: &SeparatorParams, batch: &[Example]) -> Result<Vec<bool>> {
    let mags: Vec<&MagSpectrogram> = batch.iter().map(|e| &e.mix).collect();
    let (_, trace, _) = run(params, &mags, Mode::Train)?;
    Ok(trace.map(|t| t.kink_signature()).unwrap_or_default())
}

fn run(params: &SeparatorParams, mags: &[&MagSpectrogram], mode: Mode) -> Result<(NetOutput, Option<net::Trace>, Vec<BnStat>)> {
    let input = pack_inputs(&params.layout, mags)?;
    Ok(params.layout.forward(params, &input, mode))
}

fn crop_outputs(out: &NetOutput, n: usize, bins: usize, frames: usize) -> (Vec<f64>, Vec<f64>) {
    let ml = &out.mask_logits;
    let mut mask = Vec::with_capacity(bins * frames);
    for i in 0..bins {
        let row = ml.idx(n, 0, i, 0);
        mask.extend(ml.data[row..row + frames].iter().map(|&v| layers::sigmoid(v)));
    }
    let al = &out.act_logits;
    let row = al.idx(n, 0, 0, 0);
    (mask, al.data[row..row + frames].to_vec())
}

/// Runs the network on each spectrogram of a batch (all of the same shape).
pub fn forward_batch(params: &SeparatorParams, mags: &[&MagSpectrogram], mode: Mode) -> Result<Vec<ForwardOutput>> {
    let (out, _, _) = run(params, mags, mode)?;
    let (bins, frames) = mags[0].shape();
    (0..mags.len())
        .map(|n| {
            let (mask, logits) = crop_outputs(&out, n, bins, frames);
            if let Some(v) = mask.iter().chain(&logits).find(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("network output holds {v}")));
            }
            // clamp away from the saturated ends so the mask stays strictly inside (0,1)
            let mask = mask
                .into_iter()
                .map(|v| v.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0))
                .collect();
            Ok(ForwardOutput {
                mask: Mask::new(mask, bins, frames)?,
                activation_logits: logits,
            })
        })
        .collect()
}

pub fn forward(params: &SeparatorParams, mix: &MagSpectrogram, mode: Mode) -> Result<ForwardOutput> {
    Ok(forward_batch(params, &[mix], mode)?.remove(0))
}

pub fn predicted_spectrogram(mask: &Mask, mix: &MagSpectrogram) -> Result<MagSpectrogram> {
    if mask.shape() != mix.shape() {
        return Err(Error::Shape(format!(
            "mask {:?} vs spectrogram {:?}",
            mask.shape(),
            mix.shape()
        )));
    }
    mix.map(|b, t, v| v * mask.get(b, t))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub mse: f64,
    pub bce: f64,
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn bce_with_logit(l: f64, y: f64) -> f64 {
    softplus(l) - y * l
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha >= 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("alpha must be finite and >= 0, got {alpha}")))
    }
}

pub fn loss(
    pred: &MagSpectrogram,
    target: &MagSpectrogram,
    logits: &[f64],
    labels: &ActivationCurve,
    alpha: f64,
) -> Result<LossValue> {
    check_alpha(alpha)?;
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!("pred {:?} vs target {:?}", pred.shape(), target.shape())));
    }
    if logits.len() != labels.len() {
        return Err(Error::Shape(format!("{} logits for {} labels", logits.len(), labels.len())));
    }
    if logits.is_empty() || pred.values().is_empty() {
        return Err(Error::Empty("loss input"));
    }
    if !labels.is_binary() {
        return Err(Error::Config("loss labels must be a binary curve".into()));
    }
    let mse = pred
        .values()
        .iter()
        .zip(target.values())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.values().len() as f64;
    let bce = logits
        .iter()
        .zip(labels.values())
        .map(|(&l, &y)| bce_with_logit(l, y))
        .sum::<f64>()
        / logits.len() as f64;
    Ok(LossValue {
        total: mse + alpha * bce,
        mse,
        bce,
    })
}

/// One supervised example: mixture magnitude, target magnitude, binary labels.
#[derive(Debug, Clone)]
pub struct Example {
    pub mix: MagSpectrogram,
    pub target: MagSpectrogram,
    pub labels: ActivationCurve,
}

impl Example {
    fn check(&self) -> Result<()> {
        if self.mix.shape() != self.target.shape() {
            return Err(Error::Shape(format!(
                "mixture {:?} vs target {:?}",
                self.mix.shape(),
                self.target.shape()
            )));
        }
        if self.labels.len() != self.mix.frames() {
            return Err(Error::Shape(format!(
                "{} labels for {} frames",
                self.labels.len(),
                self.mix.frames()
            )));
        }
        if !self.labels.is_binary() {
            return Err(Error::Config("training labels must be a binary curve".into()));
        }
        Ok(())
    }
}

/// Gradient of the mean batch loss, aligned with [`SeparatorParams::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &SeparatorParams) -> Self {
        Self {
            tensors: params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }
}

pub struct GradientOutput {
    pub grads: Gradients,
    pub loss: LossValue,
    pub(crate) bn_stats: Vec<BnStat>,
}

impl GradientOutput {
    /// Applies this batch's statistics to the running averages of `params`.
    pub fn update_running_stats(&self, params: &mut SeparatorParams) {
        params.update_running_stats(&self.bn_stats, BN_MOMENTUM);
    }
}

fn batch_shape(batch: &[Example]) -> Result<(usize, usize)> {
    let first = batch.first().ok_or(Error::Empty("training batch"))?;
    for ex in batch {
        ex.check()?;
    }
    Ok(first.mix.shape())
}

/// Mean loss of a batch. In train mode batch-norm uses the batch statistics.
pub fn batch_loss(params: &SeparatorParams, batch: &[Example], alpha: f64, mode: Mode) -> Result<LossValue> {
    check_alpha(alpha)?;
    batch_shape(batch)?;
    let mags: Vec<&MagSpectrogram> = batch.iter().map(|e| &e.mix).collect();
    let outs = forward_batch(params, &mags, mode)?;
    let mut acc = LossValue {
        total: 0.0,
        mse: 0.0,
        bce: 0.0,
    };
    for (ex, out) in batch.iter().zip(&outs) {
        let pred = predicted_spectrogram(&out.mask, &ex.mix)?;
        let l = loss(&pred, &ex.target, &out.activation_logits, &ex.labels, alpha)?;
        acc.mse += l.mse;
        acc.bce += l.bce;
    }
    let n = batch.len() as f64;
    acc.mse /= n;
    acc.bce /= n;
    acc.total = acc.mse + alpha * acc.bce;
    Ok(acc)
}

/// Training-mode loss and its gradient w.r.t. every parameter tensor.
pub fn gradients(params: &SeparatorParams, batch: &[Example], alpha: f64) -> Result<GradientOutput> {
    check_alpha(alpha)?;
    let (bins, frames) = batch_shape(batch)?;
    let mags: Vec<&MagSpectrogram> = batch.iter().map(|e| &e.mix).collect();
    let (out, trace, bn_stats) = run(params, &mags, Mode::Train)?;
    let trace = trace.expect("train mode records a trace");

    let n = batch.len();
    let count_mse = (n * bins * frames) as f64;
    let count_bce = (n * frames) as f64;
    let mut d_mask = out.mask_logits.zeros_like();
    let mut d_act = out.act_logits.zeros_like();
    let (mut mse, mut bce) = (0.0, 0.0);
    for (k, ex) in batch.iter().enumerate() {
        for b in 0..bins {
            for t in 0..frames {
                let idx = out.mask_logits.idx(k, 0, b, t);
                let s = layers::sigmoid(out.mask_logits.data[idx]);
                let m = ex.mix.get(b, t);
                let diff = s * m - ex.target.get(b, t);
                mse += diff * diff;
                d_mask.data[idx] = 2.0 * diff / count_mse * m * s * (1.0 - s);
            }
        }
        for (t, &y) in ex.labels.values().iter().enumerate() {
            let idx = out.act_logits.idx(k, 0, 0, t);
            let l = out.act_logits.data[idx];
            bce += bce_with_logit(l, y);
            d_act.data[idx] = alpha * (layers::sigmoid(l) - y) / count_bce;
        }
    }
    let loss = LossValue {
        total: mse / count_mse + alpha * (bce / count_bce),
        mse: mse / count_mse,
        bce: bce / count_bce,
    };
    if !loss.total.is_finite() {
        return Err(Error::NonFinite(format!("loss is {}", loss.total)));
    }
    let grads = params.layout.backward(params, &trace, &d_mask, &d_act);
    for (t, g) in params.tensors.iter().zip(&grads) {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", t.name)));
        }
    }
    Ok(GradientOutput {
        grads: Gradients { tensors: grads },
        loss,
        bn_stats,
    })
}
