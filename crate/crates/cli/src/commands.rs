use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use instsep_core::bsseval::{self, EvalReport, Metric, TrackReport};
use instsep_core::datapipe::{
    build_pools, make_eval_set, ChannelPolicy, DatasetIndex, EvalSong, LoadedPools, Split, StemManifest,
    MANIFEST_FILE, SPLIT_FILE,
};
use instsep_core::dsp::{downmix_mono, read_wav, AudioClip};
use instsep_core::fixtures::{write_fixtures, FixtureConfig};
use instsep_core::labels::{binarize, energy_activation, ActivationCurve};
use instsep_core::model::{Checkpoint, SeparatorParams};
use instsep_core::separator::{self, batch_separate, write_separation, ActivationSource, InferenceConfig};
use instsep_core::trainer::{self, validation_examples, TrainData, BEST_CHECKPOINT};

use crate::config::{load_or_default, ExperimentConfig, EXPERIMENT_FILE};
use crate::lock::OutputLock;
use crate::{AblateArgs, DataError, EvaluateArgs, LabelsArgs, MakeFixturesArgs, ReportArgs, SeparateArgs, TrainArgs, UsageError};

pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_JSON: &str = "ablation.json";
pub const TABLE_CSV: &str = "table.csv";
pub const IBM_REPORT: &str = "ibm";
pub const INPUT_REPORT: &str = "input";
pub const MODEL_REPORT: &str = "report";

fn load_index(root: &Path) -> anyhow::Result<DatasetIndex> {
    let manifest = root.join(MANIFEST_FILE);
    let index = if manifest.exists() {
        DatasetIndex::load_json(&manifest)?
    } else {
        DatasetIndex::scan(root, &root.join(SPLIT_FILE))?
    };
    Ok(index)
}

fn require_instrument(index: &DatasetIndex, instrument: &str) -> anyhow::Result<()> {
    let known = index.instruments();
    if !known.contains(instrument) {
        return Err(DataError(format!(
            "instrument {instrument:?} is not in the manifest (available: {})",
            known.into_iter().collect::<Vec<_>>().join(", ")
        ))
        .into());
    }
    Ok(())
}

fn parse_split(s: &str) -> anyhow::Result<Split> {
    s.parse().map_err(|e| UsageError(format!("{e}")).into())
}

fn songs_of(
    index: &DatasetIndex,
    root: &Path,
    splits: &[Split],
    instrument: &str,
    cfg: &ExperimentConfig,
) -> anyhow::Result<Vec<EvalSong>> {
    let mut entries = Vec::new();
    for &s in splits {
        entries.extend(index.manifest(root, s)?.entries);
    }
    let manifest = StemManifest {
        entries,
        split: splits[0],
        target_instrument: Some(instrument.to_string()),
    };
    Ok(make_eval_set(
        &manifest,
        instrument,
        cfg.frame.sample_rate,
        cfg.augment.balance_rms,
        cfg.augment.channel_policy,
    )?)
}

fn prepare(clip: AudioClip, policy: ChannelPolicy) -> AudioClip {
    match policy {
        ChannelPolicy::Downmix => downmix_mono(&clip),
        ChannelPolicy::PerChannel => clip,
    }
}

pub fn make_fixtures(a: MakeFixturesArgs) -> anyhow::Result<()> {
    let base = FixtureConfig::default();
    let fc = FixtureConfig {
        train_songs: a.train_songs.unwrap_or(base.train_songs),
        validation_songs: a.validation_songs.unwrap_or(base.validation_songs),
        test_songs: a.test_songs.unwrap_or(base.test_songs),
        seconds: a.seconds.unwrap_or(base.seconds),
        sample_rate: a.sample_rate.unwrap_or(base.sample_rate),
        seed: a.seed,
    };
    let _lock = OutputLock::acquire(&a.out)?;
    let summary = write_fixtures(&a.out.join("data"), &fc)?;
    let mut exp = ExperimentConfig::fixture(fc.sample_rate);
    exp.set_seed(a.seed);
    exp.dataset_root = PathBuf::from("data");
    exp.output_dir = PathBuf::from("runs");
    let cfg_path = a.out.join(EXPERIMENT_FILE);
    exp.save(&cfg_path)?;
    println!(
        "wrote {} songs ({} files) under {}; config {}",
        summary.splits.len(),
        summary.files.len(),
        summary.root.display(),
        cfg_path.display()
    );
    Ok(())
}

pub fn labels(a: LabelsArgs) -> anyhow::Result<()> {
    let cfg = load_or_default(a.config.as_deref(), None)?;
    let root = a.dataset.clone().unwrap_or_else(|| cfg.dataset_root.clone());
    let threshold = a.threshold.unwrap_or(cfg.inference.activation_threshold);
    cfg.frame.validate()?;
    let index = load_index(&root)?;
    let _lock = OutputLock::acquire(&a.out)?;
    let jobs: Vec<(String, String, PathBuf)> = index
        .songs
        .iter()
        .flat_map(|s| {
            s.stems.iter().map(|t| {
                let p = if t.path.is_absolute() { t.path.clone() } else { root.join(&t.path) };
                (s.id.clone(), t.instrument.clone(), p)
            })
        })
        .collect();
    let frame = cfg.frame;
    let failures: Vec<String> = jobs
        .par_iter()
        .filter_map(|(song, inst, path)| {
            let run = || -> anyhow::Result<()> {
                let clip = downmix_mono(&read_wav(path, frame.sample_rate)?);
                let conf = energy_activation(&clip, &frame, inst.as_str())?;
                let bin = binarize(&conf, threshold)?;
                let dir = a.out.join(song);
                std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                conf.write_csv(dir.join(format!("{inst}_confidence.csv")))?;
                bin.write_csv(dir.join(format!("{inst}_binary.csv")))?;
                Ok(())
            };
            run().err().map(|e| {
                log::error!("{}: {e:#}", path.display());
                format!("{}: {e:#}", path.display())
            })
        })
        .collect();
    println!("labelled {} of {} stems into {}", jobs.len() - failures.len(), jobs.len(), a.out.display());
    if !failures.is_empty() {
        return Err(DataError(format!("{} stem(s) failed: {}", failures.len(), failures.join("; "))).into());
    }
    Ok(())
}

pub fn train(a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = load_or_default(a.config.as_deref(), None)?;
    if let Some(d) = a.dataset {
        cfg.dataset_root = d;
    }
    if let Some(i) = a.instrument {
        cfg.instrument = i;
    }
    if let Some(s) = a.seed {
        cfg.set_seed(s);
    }
    if let Some(v) = a.max_epochs {
        cfg.train.max_epochs = v;
    }
    if let Some(v) = a.steps_per_epoch {
        cfg.train.steps_per_epoch = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.patience {
        cfg.train.patience_epochs = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.train.learning_rate = v;
    }
    let alpha = a.alpha.unwrap_or(cfg.train.alpha);
    cfg.set_alpha(alpha);
    cfg.validate()?;

    let root = cfg.dataset_root.clone();
    let index = load_index(&root)?;
    require_instrument(&index, &cfg.instrument)?;
    let out = a.out.clone().unwrap_or_else(|| cfg.output_dir.join("train"));
    let _lock = OutputLock::acquire(&out)?;

    let train_manifest = index.manifest(&root, Split::Train)?;
    let pools = build_pools(&train_manifest, &cfg.instrument)?;
    let loaded = LoadedPools::load(&pools, cfg.frame.sample_rate, &cfg.augment)?;
    let val_songs = songs_of(&index, &root, &[Split::Validation], &cfg.instrument, &cfg)?;
    let val_set = validation_examples(&val_songs, &cfg.instrument, &cfg.frame, cfg.validation_chunk())?;
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let data = TrainData {
        pools: &loaded,
        augment: &cfg.augment,
        frame: &cfg.frame,
        val_set: &val_set,
    };
    log::info!(
        "training {} on {} target / {} accompaniment stems, {} validation chunks",
        cfg.instrument,
        loaded.target.len(),
        loaded.accompaniment.len(),
        val_set.len()
    );
    let outcome = trainer::train(&cfg.train, &cfg.model, &data, &out, resume)?;
    cfg.save(&out.join(EXPERIMENT_FILE))?;
    println!(
        "trained {} epochs ({} steps); best epoch {} -> {}",
        outcome.history.len(),
        outcome.optimizer_steps,
        outcome.best_epoch,
        outcome.best_checkpoint.display()
    );
    Ok(())
}

fn apply_inference_flags(inf: &mut InferenceConfig, a: &SeparateArgs) -> anyhow::Result<()> {
    if a.no_activation_weight {
        inf.use_activation_weight = false;
    }
    if let Some(s) = &a.activation_source {
        inf.activation_source = s.parse().map_err(|e| UsageError(format!("{e}")))?;
    }
    if a.oracle_labels.is_some() {
        inf.activation_source = ActivationSource::GroundTruth;
    }
    if let Some(k) = a.smooth_kernel {
        inf.smooth_kernel_frames = k;
    }
    if let Some(t) = a.threshold {
        inf.activation_threshold = t;
    }
    if let Some(s) = a.segment_seconds {
        inf.segment_seconds = s;
    }
    Ok(inf.validate()?)
}

pub fn separate(a: SeparateArgs) -> anyhow::Result<()> {
    let mut cfg = load_or_default(a.config.as_deref(), a.checkpoint.parent())?;
    if let Some(d) = &a.dataset {
        cfg.dataset_root = d.clone();
    }
    if let Some(i) = &a.instrument {
        cfg.instrument = i.clone();
    }
    apply_inference_flags(&mut cfg.inference, &a)?;
    let params = Checkpoint::load(&a.checkpoint)?.params;
    let out = a.out.clone().unwrap_or_else(|| cfg.output_dir.join("estimates"));
    let _lock = OutputLock::acquire(&out)?;
    let inst = cfg.instrument.clone();

    if let Some(input) = &a.input {
        let clip = prepare(read_wav(input, cfg.frame.sample_rate)?, cfg.augment.channel_policy);
        let oracle = a.oracle_labels.as_deref().map(ActivationCurve::read_csv).transpose()?;
        if cfg.inference.activation_source == ActivationSource::GroundTruth && oracle.is_none() {
            return Err(UsageError("ground-truth weighting of a single file needs --oracle-labels".into()).into());
        }
        let song = input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "input".into());
        let sep = separator::separate(&params, &clip, &cfg.frame, &cfg.inference, &inst, oracle.as_ref())?;
        for p in write_separation(&out, &song, &inst, &sep)? {
            println!("{}", p.display());
        }
        return Ok(());
    }
    if a.oracle_labels.is_some() {
        return Err(UsageError("--oracle-labels applies to --input only; use --activation-source ground-truth for a split".into()).into());
    }
    let split = parse_split(&a.split)?;
    let index = load_index(&cfg.dataset_root)?;
    require_instrument(&index, &inst)?;
    let songs = songs_of(&index, &cfg.dataset_root, &[split], &inst, &cfg)?;
    if songs.is_empty() {
        return Err(DataError(format!("no {split} songs contain {inst}")).into());
    }
    let report = batch_separate(&params, &songs, &cfg.frame, &cfg.inference, &inst, &out);
    println!(
        "separated {} of {} songs into {}",
        songs.len() - report.failures.len(),
        songs.len(),
        out.display()
    );
    if !report.failures.is_empty() {
        let msg: Vec<String> = report.failures.iter().map(|(s, e)| format!("{s}: {e}")).collect();
        return Err(DataError(format!("{} song(s) failed: {}", msg.len(), msg.join("; "))).into());
    }
    Ok(())
}

/// `(song, instrument, path)` of every `<song>/<instrument>_estimate.wav`.
fn find_estimates(dir: &Path) -> anyhow::Result<Vec<(String, String, PathBuf)>> {
    let mut out = Vec::new();
    let entries = std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?;
    for song_dir in entries.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_dir()) {
        let song = song_dir.file_name().unwrap().to_string_lossy().into_owned();
        for f in std::fs::read_dir(&song_dir)?.filter_map(|e| e.ok()).map(|e| e.path()) {
            let name = f.file_name().unwrap().to_string_lossy().into_owned();
            if let Some(inst) = name.strip_suffix("_estimate.wav") {
                out.push((song.clone(), inst.to_string(), f));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn fit_length(clip: AudioClip, len: usize, channels: usize) -> anyhow::Result<AudioClip> {
    let sr = clip.sample_rate();
    let mut ch = clip.into_channels();
    if ch.len() == 2 && channels == 1 {
        ch = vec![ch[0].iter().zip(&ch[1]).map(|(a, b)| 0.5 * (a + b)).collect()];
    }
    while ch.len() < channels {
        ch.push(ch[0].clone());
    }
    for c in &mut ch {
        c.resize(len, 0.0);
    }
    Ok(AudioClip::new(ch, sr)?)
}

fn refs_for(song: &EvalSong, instrument: &str) -> Option<Vec<AudioClip>> {
    let mut refs = vec![song.source(instrument)?];
    refs.extend(song.rest(instrument));
    Some(refs)
}

struct ScoredSong {
    model: TrackReport,
    ibm: Option<TrackReport>,
    input: Option<TrackReport>,
}

pub fn evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    let mut cfg = load_or_default(a.config.as_deref(), None)?;
    if let Some(t) = a.taps {
        cfg.eval.distortion_filter_taps = t;
    }
    cfg.eval.validate()?;
    let root = a.references.clone().unwrap_or_else(|| cfg.dataset_root.clone());
    let estimates = find_estimates(&a.estimates)?;
    if estimates.is_empty() {
        return Err(DataError(format!("no *_estimate.wav files under {}", a.estimates.display())).into());
    }
    let out = a.out.clone().unwrap_or_else(|| {
        a.estimates
            .parent()
            .map(|p| p.join("eval"))
            .unwrap_or_else(|| PathBuf::from("eval"))
    });
    let _lock = OutputLock::acquire(&out)?;
    let index = load_index(&root)?;
    let all = [Split::Train, Split::Validation, Split::Test];
    let mut songs: BTreeMap<(String, String), EvalSong> = BTreeMap::new();
    let instruments: std::collections::BTreeSet<&str> = estimates.iter().map(|(_, i, _)| i.as_str()).collect();
    for inst in instruments {
        if !index.instruments().contains(inst) {
            log::warn!("instrument {inst} has no reference stems; skipped");
            continue;
        }
        for s in songs_of(&index, &root, &all, inst, &cfg)? {
            songs.insert((s.song_id.clone(), inst.to_string()), s);
        }
    }
    let scored: Vec<ScoredSong> = estimates
        .par_iter()
        .filter_map(|(song, inst, path)| {
            let Some(eval_song) = songs.get(&(song.clone(), inst.clone())) else {
                log::warn!("no references for {song}/{inst}; skipped");
                return None;
            };
            let run = || -> anyhow::Result<ScoredSong> {
                let refs = refs_for(eval_song, inst).expect("song holds the instrument");
                let mix = &eval_song.mixture;
                let est = fit_length(read_wav(path, cfg.frame.sample_rate)?, mix.len(), mix.num_channels())?;
                let model = TrackReport::new(song, inst, &bsseval::metrics_frame(&est, &refs, &cfg.eval)?);
                let (ibm, input) = if a.no_baselines {
                    (None, None)
                } else {
                    let ibm_est = bsseval::ideal_binary_mask(mix, &refs, &cfg.frame)?.remove(0);
                    let ibm = TrackReport::new(song, inst, &bsseval::metrics_frame(&ibm_est, &refs, &cfg.eval)?);
                    let input = TrackReport::new(song, inst, &bsseval::metrics_frame(mix, &refs, &cfg.eval)?);
                    (Some(ibm), Some(input))
                };
                Ok(ScoredSong { model, ibm, input })
            };
            match run() {
                Ok(s) => Some(s),
                Err(e) => {
                    log::warn!("{song}/{inst}: {e:#}; skipped");
                    None
                }
            }
        })
        .collect();
    if scored.is_empty() {
        return Err(DataError("no estimate could be scored".into()).into());
    }
    let mut model = Vec::new();
    let mut ibm = Vec::new();
    let mut input = Vec::new();
    for s in scored {
        model.push(s.model);
        ibm.extend(s.ibm);
        input.extend(s.input);
    }
    let report = EvalReport::new(cfg.eval, model);
    report.save(&out, MODEL_REPORT)?;
    if !ibm.is_empty() {
        EvalReport::new(cfg.eval, ibm).save(&out, IBM_REPORT)?;
        EvalReport::new(cfg.eval, input).save(&out, INPUT_REPORT)?;
    }
    print!("{}", report.to_csv());
    println!("reports written to {}", out.display());
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub instrument: String,
    pub train_labels: bool,
    pub test_labels: bool,
    pub checkpoint: PathBuf,
    pub present: bool,
    pub sdr: Option<f64>,
    pub sir: Option<f64>,
    pub sar: Option<f64>,
    /// Arithmetic mean of SDR, SIR and SAR.
    pub avg: Option<f64>,
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_default()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("instrument,train_labels,test_labels,status,SDR,SIR,SAR,Avg\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.instrument,
            yes_no(r.train_labels),
            yes_no(r.test_labels),
            if r.present { "present" } else { "absent" },
            opt(r.sdr),
            opt(r.sir),
            opt(r.sar),
            opt(r.avg)
        ));
    }
    s
}

fn score_variant(
    params: &SeparatorParams,
    songs: &[EvalSong],
    cfg: &ExperimentConfig,
    inference: &InferenceConfig,
) -> anyhow::Result<EvalReport> {
    let inst = &cfg.instrument;
    let tracks = songs
        .par_iter()
        .map(|song| {
            let sep = separator::separate(params, &song.mixture, &cfg.frame, inference, inst, None)?;
            let refs = refs_for(song, inst).expect("eval songs hold the instrument");
            let frames = bsseval::metrics_frame(&sep.estimate, &refs, &cfg.eval)?;
            Ok(TrackReport::new(song.song_id.clone(), inst.clone(), &frames))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(EvalReport::new(cfg.eval, tracks))
}

pub fn ablate(a: AblateArgs) -> anyhow::Result<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    cfg.validate()?;
    let with = a.with_labels.clone().unwrap_or_else(|| cfg.output_dir.join("train").join(BEST_CHECKPOINT));
    let without = a
        .without_labels
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("train_alpha0").join(BEST_CHECKPOINT));
    let out = a.out.clone().unwrap_or_else(|| cfg.output_dir.join("ablation"));
    let _lock = OutputLock::acquire(&out)?;
    let split = parse_split(&a.split)?;
    let index = load_index(&cfg.dataset_root)?;
    require_instrument(&index, &cfg.instrument)?;
    let songs = songs_of(&index, &cfg.dataset_root, &[split], &cfg.instrument, &cfg)?;
    if songs.is_empty() {
        return Err(DataError(format!("no {split} songs contain {}", cfg.instrument)).into());
    }

    let unweighted = InferenceConfig {
        activation_source: ActivationSource::AllOnes,
        ..cfg.inference.clone()
    };
    let weighted = InferenceConfig {
        use_activation_weight: true,
        activation_source: ActivationSource::Predicted,
        ..cfg.inference.clone()
    };
    let variants = [(false, false, &without, &unweighted), (true, false, &with, &unweighted), (true, true, &with, &weighted)];
    let mut rows = Vec::new();
    let mut reports = BTreeMap::new();
    for (train_labels, test_labels, ckpt, inference) in variants {
        let mut row = AblationRow {
            instrument: cfg.instrument.clone(),
            train_labels,
            test_labels,
            checkpoint: ckpt.clone(),
            present: false,
            sdr: None,
            sir: None,
            sar: None,
            avg: None,
        };
        if ckpt.exists() {
            let params = Checkpoint::load(ckpt)?.params;
            let report = score_variant(&params, &songs, &cfg, inference)?;
            row.present = true;
            row.sdr = report.get(&cfg.instrument, Metric::Sdr);
            row.sir = report.get(&cfg.instrument, Metric::Sir);
            row.sar = report.get(&cfg.instrument, Metric::Sar);
            if let (Some(x), Some(y), Some(z)) = (row.sdr, row.sir, row.sar) {
                row.avg = Some((x + y + z) / 3.0);
            }
            reports.insert(format!("train_{}_test_{}", yes_no(train_labels), yes_no(test_labels)), report);
        } else {
            log::warn!("checkpoint {} not found; row marked absent", ckpt.display());
        }
        rows.push(row);
    }
    let csv = ablation_csv(&rows);
    let csv_path = out.join(ABLATION_CSV);
    std::fs::write(&csv_path, &csv).with_context(|| format!("writing {}", csv_path.display()))?;
    let json_path = out.join(ABLATION_JSON);
    let json = serde_json::json!({ "avg": "arithmetic mean of SDR, SIR and SAR", "rows": rows, "reports": reports });
    std::fs::write(&json_path, serde_json::to_string_pretty(&json)?).with_context(|| format!("writing {}", json_path.display()))?;
    print!("{csv}");
    Ok(())
}

pub fn report(a: ReportArgs) -> anyhow::Result<()> {
    if a.eval.is_none() && a.ablation.is_none() {
        return Err(UsageError("report needs --eval and/or --ablation".into()).into());
    }
    if let Some(dir) = &a.eval {
        let model = EvalReport::load(&dir.join(format!("{MODEL_REPORT}.json")))?;
        let load_opt = |stem: &str| -> anyhow::Result<Option<EvalReport>> {
            let p = dir.join(format!("{stem}.json"));
            Ok(if p.exists() { Some(EvalReport::load(&p)?) } else { None })
        };
        let ibm = load_opt(IBM_REPORT)?;
        let input = load_opt(INPUT_REPORT)?;
        let mut csv = String::from("instrument,model_sdr,model_sir,model_sar,model_isr,ibm_sdr,input_sdr\n");
        for inst in model.summary.keys() {
            let m = |metric| opt(model.get(inst, metric));
            csv.push_str(&format!(
                "{inst},{},{},{},{},{},{}\n",
                m(Metric::Sdr),
                m(Metric::Sir),
                m(Metric::Sar),
                m(Metric::Isr),
                opt(ibm.as_ref().and_then(|r| r.get(inst, Metric::Sdr))),
                opt(input.as_ref().and_then(|r| r.get(inst, Metric::Sdr)))
            ));
        }
        let path = a.out.clone().unwrap_or_else(|| dir.join(TABLE_CSV));
        std::fs::write(&path, &csv).with_context(|| format!("writing {}", path.display()))?;
        println!("median over frames, then over tracks (dB)");
        print!("{csv}");
    }
    if let Some(dir) = &a.ablation {
        let p = dir.join(ABLATION_CSV);
        let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
        println!("Avg = mean of SDR, SIR, SAR (dB)");
        print!("{text}");
    }
    Ok(())
}
