//! Adam optimization with validation-based early stopping and checkpointing.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datapipe::{sample_training_example, AugmentConfig, EvalSong, LoadedPools, TrainingExample};
use crate::dsp::{downmix_mono, stft, AudioClip, FrameConfig};
use crate::labels::{binarize, energy_activation, DEFAULT_THRESHOLD};
use crate::model::{
    batch_loss, gradients, init_model, Checkpoint, Example, Gradients, LossValue, Mode, ModelConfig,
    OptimizerState, RngState, SeparatorParams,
};
use crate::{Error, Result};

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;
/// Smallest drop in validation loss that counts as an improvement.
pub const MIN_IMPROVEMENT: f64 = 1e-6;

pub const HISTORY_FILE: &str = "history.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

pub type AdamState = OptimizerState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience_epochs: usize,
    pub steps_per_epoch: usize,
    pub seed: u64,
    pub alpha: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 8,
            max_epochs: 1000,
            patience_epochs: 100,
            steps_per_epoch: 500,
            seed: 0,
            alpha: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.patience_epochs < 1 {
            return Err(Error::Config("patience_epochs must be at least 1".into()));
        }
        if self.batch_size < 1 || self.steps_per_epoch < 1 {
            return Err(Error::Config("batch_size and steps_per_epoch must be at least 1".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// One bias-corrected Adam update of every learnable tensor.
pub fn adam_step(params: &mut SeparatorParams, grads: &Gradients, state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.tensors.len() != params.tensors().len() || state.m.len() != grads.tensors.len() {
        return Err(Error::Shape("gradient/optimizer state does not match parameters".into()));
    }
    let (b1, b2) = ADAM_BETAS;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, g) in grads.tensors.iter().enumerate() {
        let tensor = &params.tensors()[i];
        if !tensor.kind.is_learnable() {
            continue;
        }
        if g.len() != tensor.data.len() {
            return Err(Error::Shape(format!("gradient of {} has wrong length", tensor.name)));
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let data = params.data_mut(i);
        for k in 0..g.len() {
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
            let mhat = m[k] / c1;
            let vhat = v[k] / c2;
            data[k] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Magnitudes and labels of one remixed example.
pub fn to_example(ex: &TrainingExample, frame: &FrameConfig) -> Result<Example> {
    let (mix, _) = stft(&ex.mixture, frame)?;
    let (target, _) = stft(&ex.target, frame)?;
    Ok(Example {
        mix,
        target,
        labels: ex.activation.clone(),
    })
}

/// Fixed validation chunks: every song cut into consecutive non-overlapping
/// chunks of `chunk_seconds` (a song shorter than one chunk is used whole).
pub fn validation_examples(
    songs: &[EvalSong],
    target_instrument: &str,
    frame: &FrameConfig,
    chunk_seconds: f64,
) -> Result<Vec<Example>> {
    let len = (chunk_seconds * frame.sample_rate as f64).round() as usize;
    let mut pieces = Vec::new();
    for song in songs {
        let Some(target) = song.source(target_instrument) else {
            continue;
        };
        let mix = downmix_mono(&song.mixture);
        let target = downmix_mono(&target);
        let n = mix.len();
        let starts: Vec<usize> = if n < len { vec![0] } else { (0..=n - len).step_by(len).collect() };
        for s in starts {
            let e = (s + len).min(n);
            pieces.push((
                AudioClip::mono(mix.samples()[s..e].to_vec(), frame.sample_rate)?,
                AudioClip::mono(target.samples()[s..e].to_vec(), frame.sample_rate)?,
            ));
        }
    }
    if pieces.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    pieces
        .par_iter()
        .map(|(mix, target)| {
            let labels = binarize(&energy_activation(target, frame, target_instrument)?, DEFAULT_THRESHOLD)?;
            Ok(Example {
                mix: stft(mix, frame)?.0,
                target: stft(target, frame)?.0,
                labels,
            })
        })
        .collect()
}

/// Mean eval-mode loss over a validation set. Parameters are not touched.
pub fn validate(params: &SeparatorParams, val_set: &[Example], alpha: f64) -> Result<LossValue> {
    if val_set.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let losses = val_set
        .par_iter()
        .map(|ex| batch_loss(params, std::slice::from_ref(ex), alpha, Mode::Eval))
        .collect::<Result<Vec<_>>>()?;
    let n = losses.len() as f64;
    let mse = losses.iter().map(|l| l.mse).sum::<f64>() / n;
    let bce = losses.iter().map(|l| l.bce).sum::<f64>() / n;
    Ok(LossValue {
        total: mse + alpha * bce,
        mse,
        bce,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_mse: f64,
    pub val_bce: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,val_mse,val_bce\n");
    for r in history {
        let _ = writeln!(s, "{},{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.val_mse, r.val_bce);
    }
    s
}

pub fn read_history_csv(text: &str) -> Result<Vec<EpochRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some("epoch,train_loss,val_loss,val_mse,val_bce") {
        return Err(Error::parse("history", "missing header"));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(Error::parse("history", format!("bad row {l:?}")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| Error::parse("history", e.to_string()));
            Ok(EpochRecord {
                epoch: f[0].parse().map_err(|_| Error::parse("history", format!("bad epoch {:?}", f[0])))?,
                train_loss: num(f[1])?,
                val_loss: num(f[2])?,
                val_mse: num(f[3])?,
                val_bce: num(f[4])?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Tracks the best validation loss and the epochs since it was set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    pub epoch: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            epoch: 0,
        }
    }

    pub fn observe(&mut self, val_loss: f64) -> StopDecision {
        self.epoch += 1;
        if val_loss < self.best - MIN_IMPROVEMENT {
            self.best = val_loss;
            self.best_epoch = self.epoch;
            StopDecision::Improved
        } else if self.epoch - self.best_epoch >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

/// Everything needed to continue a run, stored in the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainState {
    config: TrainConfig,
    stopper: EarlyStopper,
    history: Vec<EpochRecord>,
    finished: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub history_path: PathBuf,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub optimizer_steps: u64,
    pub stopped_early: bool,
}

/// Inputs that stay fixed for one training run.
pub struct TrainData<'a> {
    pub pools: &'a LoadedPools,
    pub augment: &'a AugmentConfig,
    pub frame: &'a FrameConfig,
    pub val_set: &'a [Example],
}

fn rng_state(rng: &ChaCha8Rng, seed: u64) -> RngState {
    RngState {
        seed,
        stream: rng.get_stream(),
        word_pos: rng.get_word_pos(),
    }
}

fn restore_rng(s: &RngState) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    rng.set_stream(s.stream);
    rng.set_word_pos(s.word_pos);
    rng
}

fn draw_batch(data: &TrainData, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Example>> {
    let raw = (0..n)
        .map(|_| sample_training_example(data.pools, data.augment, data.frame, rng))
        .collect::<Result<Vec<_>>>()?;
    raw.par_iter().map(|ex| to_example(ex, data.frame)).collect()
}

/// Runs training into `out_dir`, optionally resuming from a checkpoint written
/// by an earlier run (its `last.ckpt`).
///
/// Each epoch writes `last.ckpt` and `history.csv`; `best.ckpt` holds the
/// parameters of the best validation epoch. A non-finite loss aborts the run
/// and leaves the last good checkpoints in place.
pub fn train(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    data: &TrainData,
    out_dir: &Path,
    resume: Option<Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    data.augment.validate()?;
    if data.pools.target.is_empty() || data.pools.accompaniment.is_empty() {
        return Err(Error::Empty("training pools"));
    }
    if data.val_set.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let best_path = out_dir.join(BEST_CHECKPOINT);
    let last_path = out_dir.join(LAST_CHECKPOINT);
    let history_path = out_dir.join(HISTORY_FILE);

    let (mut params, mut adam, mut rng, mut state) = match resume {
        Some(ck) => {
            let state: TrainState = serde_json::from_value(ck.train_state.clone())
                .map_err(|e| Error::Checkpoint(format!("no resumable train state: {e}")))?;
            if ck.params.config() != model_cfg {
                return Err(Error::Checkpoint("checkpoint model config differs from the requested one".into()));
            }
            let adam = ck.optimizer.clone().unwrap_or_else(|| OptimizerState::new(&ck.params));
            let rng = ck
                .rng
                .as_ref()
                .map(restore_rng)
                .unwrap_or_else(|| crate::datapipe::substream(cfg.seed, 0));
            let mut state = state;
            state.config = cfg.clone();
            state.stopper.patience = cfg.patience_epochs;
            state.finished = false;
            (ck.params, adam, rng, state)
        }
        None => {
            let mut init_rng = crate::datapipe::substream(cfg.seed, 1);
            let params = init_model(model_cfg, &mut init_rng)?;
            let adam = OptimizerState::new(&params);
            let state = TrainState {
                config: cfg.clone(),
                stopper: EarlyStopper::new(cfg.patience_epochs),
                history: Vec::new(),
                finished: false,
            };
            (params, adam, crate::datapipe::substream(cfg.seed, 0), state)
        }
    };

    let save = |path: &Path, params: &SeparatorParams, adam: &OptimizerState, rng: &ChaCha8Rng, state: &TrainState| {
        let ck = Checkpoint {
            params: params.clone(),
            optimizer: Some(adam.clone()),
            rng: Some(rng_state(rng, cfg.seed)),
            train_state: serde_json::to_value(state)?,
        };
        ck.save(path)
    };

    let mut stopped_early = false;
    while state.stopper.epoch < cfg.max_epochs {
        let epoch = state.stopper.epoch + 1;
        let mut loss_sum = 0.0;
        for step in 0..cfg.steps_per_epoch {
            let batch = draw_batch(data, cfg.batch_size, &mut rng)?;
            let out = match gradients(&params, &batch, cfg.alpha) {
                Ok(out) => out,
                Err(Error::NonFinite(what)) => {
                    return Err(Error::NonFinite(format!(
                        "epoch {epoch} step {step}: {what}; last good checkpoint is {}",
                        last_path.display()
                    )))
                }
                Err(e) => return Err(e),
            };
            adam_step(&mut params, &out.grads, &mut adam, cfg.learning_rate)?;
            out.update_running_stats(&mut params);
            loss_sum += out.loss.total;
        }
        let train_loss = loss_sum / cfg.steps_per_epoch as f64;
        let val = validate(&params, data.val_set, cfg.alpha)?;
        if !train_loss.is_finite() || !val.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "epoch {epoch} loss is not finite; last good checkpoint is {}",
                last_path.display()
            )));
        }
        let decision = state.stopper.observe(val.total);
        state.history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss: val.total,
            val_mse: val.mse,
            val_bce: val.bce,
        });
        log::info!(
            "epoch {epoch}: train {train_loss:.6} val {:.6} (mse {:.6}, bce {:.6})",
            val.total,
            val.mse,
            val.bce
        );
        if decision == StopDecision::Improved {
            save(&best_path, &params, &adam, &rng, &state)?;
        }
        if decision == StopDecision::Stop {
            stopped_early = true;
            state.finished = true;
        }
        save(&last_path, &params, &adam, &rng, &state)?;
        std::fs::write(&history_path, history_csv(&state.history)).map_err(|e| Error::io(&history_path, e))?;
        if stopped_early {
            log::info!("early stop after epoch {epoch}; best epoch {}", state.stopper.best_epoch);
            break;
        }
    }
    if state.history.is_empty() {
        return Err(Error::Config("max_epochs leaves nothing to train".into()));
    }
    Ok(TrainOutcome {
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        history_path,
        history: state.history,
        best_epoch: state.stopper.best_epoch,
        optimizer_steps: adam.step,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParamKind;
    use rand::Rng;
    use std::f64::consts::PI;

    fn tiny_params(seed: u64) -> SeparatorParams {
        init_model(&ModelConfig::tiny(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = tiny_params(0);
        let mut state = OptimizerState::new(&p);
        let mut g = Gradients::zeros_like(&p);
        let idx = p.tensors().iter().position(|t| t.name == "head.bias").unwrap();
        p.tensor_mut("head.bias").unwrap().data[0] = 0.0;
        g.tensors[idx][0] = 1.0;
        adam_step(&mut p, &g, &mut state, 0.001).unwrap();
        let moved = p.tensor("head.bias").unwrap().data[0];
        assert!((moved + 0.001).abs() < 1e-10, "{moved}");
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_zero_gradient_keeps_params_and_counts_step() {
        let mut p = tiny_params(1);
        let before = p.checksum();
        let mut state = OptimizerState::new(&p);
        let zero = Gradients::zeros_like(&p);
        adam_step(&mut p, &zero, &mut state, 0.01).unwrap();
        assert_eq!(p.checksum(), before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_is_deterministic_and_skips_running_stats() {
        let p0 = tiny_params(2);
        let mut g = Gradients::zeros_like(&p0);
        for (t, gt) in p0.tensors().iter().zip(&mut g.tensors) {
            gt.fill(if t.kind == ParamKind::RunningVar { 5.0 } else { 0.3 });
        }
        let run = || {
            let mut p = p0.clone();
            let mut s = OptimizerState::new(&p);
            adam_step(&mut p, &g, &mut s, 0.01).unwrap();
            (p, s)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert_eq!(a.tensor("enc0.bn1.running_var").unwrap().data, p0.tensor("enc0.bn1.running_var").unwrap().data);
    }

    #[test]
    fn early_stopper_follows_definition() {
        let mut s = EarlyStopper::new(2);
        let d: Vec<_> = [1.0, 0.9, 0.95, 0.96].iter().map(|&v| s.observe(v)).collect();
        assert_eq!(
            d,
            [StopDecision::Improved, StopDecision::Improved, StopDecision::Continue, StopDecision::Stop]
        );
        assert_eq!(s.best_epoch, 2);

        let mut s = EarlyStopper::new(1);
        s.observe(1.0);
        assert_eq!(s.observe(1.0 - 1e-7), StopDecision::Stop);
    }

    #[test]
    fn history_csv_round_trips() {
        let h = vec![
            EpochRecord {
                epoch: 1,
                train_loss: 0.5,
                val_loss: 0.25,
                val_mse: 0.2,
                val_bce: 0.5,
            },
            EpochRecord {
                epoch: 2,
                train_loss: 0.1 + 0.2,
                val_loss: 1e-7,
                val_mse: 0.0,
                val_bce: 1.0 / 3.0,
            },
        ];
        let text = history_csv(&h);
        assert!(text.starts_with("epoch,train_loss,val_loss,val_mse,val_bce\n"));
        assert_eq!(read_history_csv(&text).unwrap(), h);
    }

    fn frame() -> FrameConfig {
        FrameConfig {
            sample_rate: 8000,
            window_size: 64,
            hop_size: 16,
            ..FrameConfig::default()
        }
    }

    #[test]
    fn validate_is_a_side_effect_free_mean() {
        let p = tiny_params(6);
        let val = crate::fixtures::overfit_batch(3, 16, 5);
        let before = p.checksum();
        let once = validate(&p, &val, 0.1).unwrap();
        assert_eq!(p.checksum(), before);
        let twice: Vec<Example> = val.iter().chain(&val).cloned().collect();
        let doubled = validate(&p, &twice, 0.1).unwrap();
        assert!((once.total - doubled.total).abs() <= 1e-14 * once.total.abs());
        let plain = validate(&p, &val, 0.0).unwrap();
        assert_eq!(plain.total, plain.mse);
        assert!(matches!(validate(&p, &[], 0.1), Err(Error::Empty(_))));
    }

    #[test]
    fn overfits_a_fixed_batch() {
        let batch = crate::fixtures::overfit_batch(4, 16, 7);
        let mut p = tiny_params(8);
        let mut state = OptimizerState::new(&p);
        let initial = batch_loss(&p, &batch, 0.1, Mode::Train).unwrap().mse;
        for _ in 0..500 {
            let out = gradients(&p, &batch, 0.1).unwrap();
            adam_step(&mut p, &out.grads, &mut state, 0.001).unwrap();
            out.update_running_stats(&mut p);
        }
        let last = batch_loss(&p, &batch, 0.1, Mode::Train).unwrap().mse;
        assert!(last <= 0.05 * initial, "initial {initial} final {last}");
    }

    fn tone(freq: f64, secs: f64, sr: u32, amp: f64) -> AudioClip {
        let n = (secs * sr as f64) as usize;
        AudioClip::mono(
            (0..n).map(|i| amp * (2.0 * PI * freq * i as f64 / sr as f64).sin()).collect(),
            sr,
        )
        .unwrap()
    }

    fn noise(secs: f64, sr: u32, seed: u64) -> AudioClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = (secs * sr as f64) as usize;
        AudioClip::mono((0..n).map(|_| rng.random_range(-0.3..0.3)).collect(), sr).unwrap()
    }

    struct Setup {
        pools: LoadedPools,
        augment: AugmentConfig,
        frame: FrameConfig,
        val: Vec<Example>,
    }

    fn setup() -> Setup {
        let frame = frame();
        let augment = AugmentConfig {
            chunk_seconds: 0.25,
            ..AugmentConfig::default()
        };
        let pools = LoadedPools::from_clips(
            "tone",
            vec![tone(440.0, 1.0, 8000, 0.3), tone(880.0, 1.0, 8000, 0.3)],
            vec![noise(1.0, 8000, 1), noise(1.0, 8000, 2)],
            &augment,
        )
        .unwrap();
        let songs = vec![crate::datapipe::assemble_song(
            "v".into(),
            vec![("tone".into(), tone(660.0, 0.5, 8000, 0.1)), ("noise".into(), noise(0.5, 8000, 3))],
        )];
        let val = validation_examples(&songs, "tone", &frame, 0.25).unwrap();
        Setup {
            pools,
            augment,
            frame,
            val,
        }
    }

    fn small_cfg(max_epochs: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            max_epochs,
            steps_per_epoch: 3,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn one_epoch_runs_exactly_steps_per_epoch() {
        let s = setup();
        let data = TrainData {
            pools: &s.pools,
            augment: &s.augment,
            frame: &s.frame,
            val_set: &s.val,
        };
        assert_eq!(s.val.len(), 2);
        let dir = tempfile::tempdir().unwrap();
        let out = train(&small_cfg(1), &ModelConfig::tiny(), &data, dir.path(), None).unwrap();
        assert_eq!(out.optimizer_steps, 3);
        assert_eq!(out.history.len(), 1);
        assert!(out.best_checkpoint.exists() && out.last_checkpoint.exists());
        let text = std::fs::read_to_string(&out.history_path).unwrap();
        assert_eq!(read_history_csv(&text).unwrap(), out.history);
    }

    #[test]
    fn fixed_seed_reproduces_history_and_resume_continues() {
        let s = setup();
        let data = TrainData {
            pools: &s.pools,
            augment: &s.augment,
            frame: &s.frame,
            val_set: &s.val,
        };
        let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let full = train(&small_cfg(2), &ModelConfig::tiny(), &data, a.path(), None).unwrap();
        let again = train(&small_cfg(2), &ModelConfig::tiny(), &data, b.path(), None).unwrap();
        assert_eq!(full.history, again.history);

        let first = train(&small_cfg(1), &ModelConfig::tiny(), &data, c.path(), None).unwrap();
        let ck = Checkpoint::load(&first.last_checkpoint).unwrap();
        let resumed = train(&small_cfg(2), &ModelConfig::tiny(), &data, c.path(), Some(ck)).unwrap();
        assert_eq!(resumed.history.len(), 2);
        assert_eq!(resumed.history[1].epoch, 2);
        assert_eq!(resumed.history, full.history);
        assert_eq!(resumed.optimizer_steps, 6);
    }

    #[test]
    fn rejects_bad_configs() {
        let s = setup();
        let data = TrainData {
            pools: &s.pools,
            augment: &s.augment,
            frame: &s.frame,
            val_set: &s.val,
        };
        let dir = tempfile::tempdir().unwrap();
        for cfg in [
            TrainConfig {
                learning_rate: 0.0,
                ..small_cfg(1)
            },
            TrainConfig {
                patience_epochs: 0,
                ..small_cfg(1)
            },
        ] {
            assert!(matches!(
                train(&cfg, &ModelConfig::tiny(), &data, dir.path(), None),
                Err(Error::Config(_))
            ));
        }
        let empty = TrainData { val_set: &[], ..data };
        assert!(train(&small_cfg(1), &ModelConfig::tiny(), &empty, dir.path(), None).is_err());
    }
}
