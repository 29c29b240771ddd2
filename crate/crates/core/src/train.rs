//! Batch construction, the training loop, checkpoints and ablations.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, info, warn};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{normalize_in_place, random_crop, Corpus, Crop, TrialLabel, TrialList, SAMPLE_RATE};
use crate::encoder::{export_weights, import_weights, read_weight_manifest};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate_trials, Evaluation};
use crate::heads::{self, AamSpec, Variant};
use crate::model::{LatentCache, LatentInput, SpeakerModel};
use crate::nn::{Mode, ParameterStore, Tape, Tensor};
use crate::pooling::{self, PoolingMethod};
use crate::schedule::{
    adam_step, AdamConfig, AdamState, RangeObjective, ScheduleKind, ScheduleSpec, REFERENCE_LR_AAM,
    REFERENCE_LR_BCE, REFERENCE_LR_CE,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairBatchConfig {
    pub speakers: usize,
    pub utts_per_speaker: usize,
    pub same_pairs: usize,
    pub diff_pairs: usize,
}

impl Default for PairBatchConfig {
    fn default() -> Self {
        Self {
            speakers: 8,
            utts_per_speaker: 4,
            same_pairs: 16,
            diff_pairs: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Ignored by the bce variant.
    pub pooling: PoolingMethod,
    pub encoder: EncoderConfig,
    /// Runs over `iterations` steps.
    pub schedule: ScheduleKind,
    pub adam: AdamConfig,
    pub aam: AamSpec,
    pub iterations: usize,
    pub files_per_batch: usize,
    pub crop_seconds: f64,
    pub pair_batch: PairBatchConfig,
    /// `None` validates every tenth of the run.
    pub validation_interval: Option<usize>,
    /// Weight manifest for the encoder; random initialisation when `None`.
    pub init_weights: Option<PathBuf>,
    pub seed: u64,
}

pub fn reference_lr(variant: Variant) -> f64 {
    match variant {
        Variant::Ce => REFERENCE_LR_CE,
        Variant::Aam => REFERENCE_LR_AAM,
        Variant::Bce => REFERENCE_LR_BCE,
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::new(Variant::Aam)
    }
}

impl TrainConfig {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            pooling: PoolingMethod::MeanStd,
            encoder: EncoderConfig::default(),
            schedule: ScheduleKind::one_cycle(reference_lr(variant)),
            adam: AdamConfig::default(),
            aam: AamSpec::default(),
            iterations: 100_000,
            files_per_batch: 66,
            crop_seconds: 3.0,
            pair_batch: PairBatchConfig::default(),
            validation_interval: None,
            init_weights: None,
            seed: 0,
        }
    }

    pub fn crop_samples(&self) -> usize {
        (self.crop_seconds * f64::from(SAMPLE_RATE)).round() as usize
    }

    /// Audio samples per classification batch.
    pub fn sample_budget(&self) -> usize {
        self.files_per_batch * self.crop_samples()
    }

    pub fn effective_validation_interval(&self) -> usize {
        self.validation_interval
            .unwrap_or(self.iterations / 10)
            .max(1)
    }

    pub fn schedule_spec(&self) -> Result<ScheduleSpec> {
        ScheduleSpec::new(self.schedule, self.iterations)
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = self.encoder.problems();
        out.extend(self.adam.problems());
        out.extend(self.aam.problems());
        if self.iterations > 0 {
            out.extend(ScheduleSpec { kind: self.schedule, total_steps: self.iterations }.problems());
        }
        if self.files_per_batch == 0 {
            out.push("files_per_batch must be at least 1".into());
        }
        if !(self.crop_seconds > 0.0) || self.crop_samples() == 0 {
            out.push(format!("crop_seconds = {} must be positive", self.crop_seconds));
        }
        let pb = &self.pair_batch;
        if pb.speakers < 2 || pb.utts_per_speaker < 2 {
            out.push("pair_batch needs at least 2 speakers with 2 utterances each".into());
        }
        if pb.same_pairs + pb.diff_pairs == 0 {
            out.push("pair_batch must contain at least one pair".into());
        }
        if self.validation_interval == Some(0) {
            out.push("validation_interval must be positive".into());
        }
        if self.pooling == PoolingMethod::FirstCls && !self.encoder.cls_token && self.variant != Variant::Bce {
            out.push("pooling first+cls requires encoder.cls_token = true".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

/// Normalised crops and speaker class targets.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationBatch {
    /// Each crop is normalised over its valid part; the tail stays zero.
    pub crops: Vec<Crop>,
    /// Whether each crop is its whole source utterance.
    pub whole: Vec<bool>,
    pub targets: Vec<usize>,
}

impl ClassificationBatch {
    pub fn to_wave_batch(&self) -> Result<crate::audio::WaveBatch> {
        crate::audio::WaveBatch::from_crops(&self.crops)
    }
}

/// Sorted speaker ids; a speaker's class index is its position here.
pub fn speaker_classes(corpus: &Corpus) -> Vec<String> {
    corpus.speakers()
}

fn normalized_crop<R: Rng + ?Sized>(corpus: &Corpus, index: usize, samples: usize, rng: &mut R) -> Result<(Crop, bool)> {
    let w = &corpus.utterances()[index];
    let mut crop = random_crop(w, samples, rng)?;
    normalize_in_place(&mut crop.waveform.samples[..crop.valid_len]);
    let whole = crop.offset == 0 && crop.valid_len == w.len();
    Ok((crop, whole))
}

/// `files_per_batch` distinct utterances drawn uniformly, each randomly
/// cropped and normalised.
pub fn make_classification_batch<R: Rng + ?Sized>(
    corpus: &Corpus,
    classes: &[String],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<ClassificationBatch> {
    let n = cfg.files_per_batch;
    if corpus.len() < n {
        return Err(Error::invalid(format!(
            "batch needs {n} utterances but the training corpus has {}",
            corpus.len()
        )));
    }
    let picks = rand::seq::index::sample(rng, corpus.len(), n).into_vec();
    let mut batch = ClassificationBatch {
        crops: Vec::with_capacity(n),
        whole: Vec::with_capacity(n),
        targets: Vec::with_capacity(n),
    };
    for i in picks {
        let (crop, whole) = normalized_crop(corpus, i, cfg.crop_samples(), rng)?;
        let speaker = crop.waveform.speaker_id.as_deref().unwrap_or_default();
        let target = classes
            .binary_search_by(|c| c.as_str().cmp(speaker))
            .map_err(|_| Error::invalid(format!("utterance {} has no known speaker", crop.waveform.utterance_id)))?;
        batch.crops.push(crop);
        batch.whole.push(whole);
        batch.targets.push(target);
    }
    Ok(batch)
}

/// Crops of `speakers × utts_per_speaker` utterances and labelled index
/// pairs into them.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub crops: Vec<Crop>,
    pub whole: Vec<bool>,
    pub pairs: Vec<(usize, usize, TrialLabel)>,
}

impl PairBatch {
    /// `(utterance_a, utterance_b, label)` for every pair.
    pub fn labelled_pairs(&self) -> Vec<(String, String, TrialLabel)> {
        let id = |i: usize| self.crops[i].waveform.utterance_id.clone();
        self.pairs.iter().map(|&(a, b, l)| (id(a), id(b), l)).collect()
    }
}

/// Samples speakers and utterances, then draws same pairs from
/// within-speaker combinations and different pairs from cross-speaker
/// combinations, without replacement. Each pair's order is random.
pub fn make_pair_batch<R: Rng + ?Sized>(corpus: &Corpus, cfg: &TrainConfig, rng: &mut R) -> Result<PairBatch> {
    let pb = cfg.pair_batch;
    let eligible: Vec<Vec<usize>> = corpus
        .by_speaker()
        .into_values()
        .filter(|u| u.len() >= pb.utts_per_speaker)
        .collect();
    if eligible.len() < pb.speakers {
        return Err(Error::invalid(format!(
            "pair batch needs {} speakers with at least {} utterances, corpus has {}",
            pb.speakers,
            pb.utts_per_speaker,
            eligible.len()
        )));
    }
    let mut chosen = Vec::with_capacity(pb.speakers * pb.utts_per_speaker);
    let mut owner = Vec::with_capacity(chosen.capacity());
    for (k, spk) in eligible.choose_multiple(rng, pb.speakers).enumerate() {
        for &u in spk.choose_multiple(rng, pb.utts_per_speaker) {
            chosen.push(u);
            owner.push(k);
        }
    }
    let mut same = Vec::new();
    let mut diff = Vec::new();
    for i in 0..chosen.len() {
        for j in i + 1..chosen.len() {
            if owner[i] == owner[j] {
                same.push((i, j));
            } else {
                diff.push((i, j));
            }
        }
    }
    if same.len() < pb.same_pairs || diff.len() < pb.diff_pairs {
        return Err(Error::invalid(format!(
            "pair batch of {} speakers x {} utterances cannot supply {} same and {} different pairs",
            pb.speakers, pb.utts_per_speaker, pb.same_pairs, pb.diff_pairs
        )));
    }
    let mut pairs = Vec::with_capacity(pb.same_pairs + pb.diff_pairs);
    for (pool, n, label) in [(&same, pb.same_pairs, TrialLabel::Same), (&diff, pb.diff_pairs, TrialLabel::Different)] {
        for &(i, j) in pool.choose_multiple(rng, n) {
            let (a, b) = if rng.random_bool(0.5) { (i, j) } else { (j, i) };
            pairs.push((a, b, label));
        }
    }
    pairs.shuffle(rng);
    let mut crops = Vec::with_capacity(chosen.len());
    let mut whole = Vec::with_capacity(chosen.len());
    for &u in &chosen {
        let (c, w) = normalized_crop(corpus, u, cfg.crop_samples(), rng)?;
        crops.push(c);
        whole.push(w);
    }
    Ok(PairBatch { crops, whole, pairs })
}

/// Architecture-relevant config subset hashed into checkpoints.
pub fn fingerprint(cfg: &TrainConfig) -> String {
    use sha2::{Digest, Sha256};
    let e = &cfg.encoder;
    let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
    let text = format!(
        "variant={}\nconv_channels={}\nconv_kernels={}\nconv_strides={}\ngroup_norm_groups={}\nmodel_dim={}\nffn_dim={}\nlayers={}\nheads={}\npos_conv_kernel={}\npos_conv_groups={}\ncls_token={}\nlayer_norm_eps={:e}\n",
        cfg.variant.name(),
        e.conv_channels,
        join(&e.conv_kernels),
        join(&e.conv_strides),
        e.group_norm_groups,
        e.model_dim,
        e.ffn_dim,
        e.layers,
        e.heads,
        e.pos_conv_kernel,
        e.pos_conv_groups,
        e.cls_token,
        e.layer_norm_eps,
    );
    Sha256::digest(text.as_bytes())
        .iter()
        .fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub parameters: ParameterStore,
    pub optimizer: AdamState,
    /// Optimizer updates applied so far.
    pub step: usize,
    pub validation_eer: Option<f64>,
    pub fingerprint: String,
    pub classes: usize,
}

pub const CHECKPOINT_HEADER: &str = "checkpoint.txt";
const WEIGHTS_DIR: &str = "weights";
const OPTIMIZER_DIR: &str = "optimizer";

impl Checkpoint {
    /// Writes `checkpoint.txt`, the parameters and the optimizer moments
    /// as weight manifests under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        export_weights(&self.parameters, &dir.join(WEIGHTS_DIR))?;
        let mut moments = ParameterStore::new();
        for (kind, map) in [("first", &self.optimizer.first), ("second", &self.optimizer.second)] {
            for (name, v) in map {
                moments.insert(format!("{kind}.{name}"), Tensor::from_vec(v.clone()))?;
            }
        }
        export_weights(&moments, &dir.join(OPTIMIZER_DIR))?;
        let eer = self.validation_eer.map_or("none".to_string(), |e| format!("{e}"));
        let header = format!(
            "step {}\nvalidation_eer {eer}\nfingerprint {}\nclasses {}\noptimizer_step {}\n",
            self.step, self.fingerprint, self.classes, self.optimizer.step
        );
        let path = dir.join(CHECKPOINT_HEADER);
        fs::write(&path, header).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CHECKPOINT_HEADER);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut fields = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let Some((k, v)) = line.split_once(' ') else {
                return Err(Error::Parse {
                    path: path.clone(),
                    line: i + 1,
                    message: "expected '<key> <value>'".into(),
                });
            };
            fields.insert(k.to_string(), (i + 1, v.trim().to_string()));
        }
        let get = |k: &str| {
            fields.get(k).cloned().ok_or_else(|| Error::Parse {
                path: path.clone(),
                line: 0,
                message: format!("missing '{k}'"),
            })
        };
        let num = |k: &str| -> Result<usize> {
            let (line, v) = get(k)?;
            v.parse().map_err(|_| Error::Parse {
                path: path.clone(),
                line,
                message: format!("'{k}' is not a count"),
            })
        };
        let (eer_line, eer) = get("validation_eer")?;
        let validation_eer = match eer.as_str() {
            "none" => None,
            v => Some(v.parse::<f64>().map_err(|_| Error::Parse {
                path: path.clone(),
                line: eer_line,
                message: "validation_eer is not a number".into(),
            })?),
        };
        let mut parameters = ParameterStore::new();
        for (name, t) in read_weight_manifest(&dir.join(WEIGHTS_DIR))? {
            parameters.insert(name, t)?;
        }
        let mut optimizer = AdamState {
            step: num("optimizer_step")? as u64,
            ..AdamState::default()
        };
        let opt_dir = dir.join(OPTIMIZER_DIR);
        if opt_dir.exists() {
            for (name, t) in read_weight_manifest(&opt_dir)? {
                let data = t.into_data();
                if let Some(n) = name.strip_prefix("first.") {
                    optimizer.first.insert(n.to_string(), data);
                } else if let Some(n) = name.strip_prefix("second.") {
                    optimizer.second.insert(n.to_string(), data);
                }
            }
        }
        Ok(Self {
            parameters,
            optimizer,
            step: num("step")?,
            validation_eer,
            fingerprint: get("fingerprint")?.1,
            classes: num("classes")?,
        })
    }

    /// Rebuilds the model described by `cfg` with these parameters. The
    /// config must have the fingerprint the checkpoint was trained with.
    pub fn model(&self, cfg: &TrainConfig) -> Result<SpeakerModel> {
        let expected = fingerprint(cfg);
        if expected != self.fingerprint {
            return Err(Error::Config(vec![format!(
                "checkpoint fingerprint {} does not match the configured architecture ({expected})",
                self.fingerprint
            )]));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = SpeakerModel::init(cfg.encoder.clone(), cfg.variant, cfg.pooling, cfg.aam, self.classes.max(2), &mut rng)?;
        copy_parameters(&mut model.params, &self.parameters)?;
        Ok(model)
    }
}

/// Overwrites every parameter of `dst` with the same-named array of `src`,
/// reporting all missing names and shape mismatches together.
pub fn copy_parameters(dst: &mut ParameterStore, src: &ParameterStore) -> Result<()> {
    let mut problems = Vec::new();
    for (name, current) in dst.iter() {
        match src.get(name) {
            None => problems.push(format!("missing required parameter '{name}'")),
            Some(t) if t.shape() != current.shape() => problems.push(format!(
                "'{name}' has shape {:?}, expected {:?}",
                t.shape(),
                current.shape()
            )),
            Some(_) => {}
        }
    }
    if !problems.is_empty() {
        return Err(Error::Weights(problems));
    }
    for (name, slot) in dst.iter_mut() {
        *slot = src.get(name).expect("checked above").clone();
    }
    Ok(())
}

/// Fresh model for `cfg`, loading the encoder from `cfg.init_weights` when
/// set.
pub fn init_model(cfg: &TrainConfig, classes: usize) -> Result<SpeakerModel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = SpeakerModel::init(cfg.encoder.clone(), cfg.variant, cfg.pooling, cfg.aam, classes, &mut rng)?;
    if let Some(dir) = &cfg.init_weights {
        let encoder = Encoder::new(cfg.encoder.clone())?;
        let mut store = encoder.init_parameters(&mut rng)?;
        let report = import_weights(&mut store, dir)?;
        if !report.unmatched.is_empty() {
            warn!("ignored {} unmatched arrays in {}", report.unmatched.len(), dir.display());
        }
        for (name, t) in store.iter() {
            *model.params.get_mut(name).expect("encoder parameter") = t.clone();
        }
    }
    Ok(model)
}

/// Model, optimizer and data stream of one training run.
pub struct TrainingSession<'a> {
    pub cfg: TrainConfig,
    pub model: SpeakerModel,
    pub adam: AdamState,
    pub cache: LatentCache,
    corpus: &'a Corpus,
    classes: Vec<String>,
    rng: ChaCha8Rng,
}

impl<'a> TrainingSession<'a> {
    pub fn new(cfg: &TrainConfig, corpus: &'a Corpus) -> Result<Self> {
        let classes = speaker_classes(corpus);
        if cfg.variant != Variant::Bce && classes.len() < 2 {
            return Err(Error::invalid("training needs utterances of at least 2 speakers"));
        }
        let model = init_model(cfg, classes.len().max(2))?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Self {
            cfg: cfg.clone(),
            model,
            adam: AdamState::default(),
            cache: LatentCache::default(),
            corpus,
            classes,
            rng,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes.len()
    }

    /// Loss of a freshly drawn batch and the gradient of every trainable
    /// parameter.
    pub fn loss_and_gradients(&mut self) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
        let model = &self.model;
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, true);
        let loss = match model.variant {
            Variant::Bce => {
                let batch = make_pair_batch(self.corpus, &self.cfg, &mut self.rng)?;
                let inputs = latent_inputs(&batch.crops, &batch.whole);
                let (latent, lengths) = model.latents(&mut tape, &p, &inputs, Some(&mut self.cache))?;
                let seq = model
                    .encoder
                    .latent_to_positional(&mut tape, &p, latent, lengths, Mode::Train, &mut self.rng)?;
                let pairs: Vec<(usize, usize)> = batch.pairs.iter().map(|&(a, b, _)| (a, b)).collect();
                let labels: Vec<TrialLabel> = batch.pairs.iter().map(|p| p.2).collect();
                let logits = heads::pair_logits(&mut tape, &model.encoder, &p, &seq, &pairs, Mode::Train, &mut self.rng)?;
                heads::bce_loss(&mut tape, logits, &labels)?
            }
            _ => {
                let batch = make_classification_batch(self.corpus, &self.classes, &self.cfg, &mut self.rng)?;
                let inputs = latent_inputs(&batch.crops, &batch.whole);
                let (latent, lengths) = model.latents(&mut tape, &p, &inputs, Some(&mut self.cache))?;
                let seq = model
                    .encoder
                    .encode_latent(&mut tape, &p, latent, lengths, Mode::Train, &mut self.rng)?;
                let pooled = pooling::pool(&mut tape, &seq, model.pooling, &mut self.rng)?;
                let head = model.classifier()?.expect("classification variant");
                head.forward(&mut tape, &p, pooled, &batch.targets)?.1
            }
        };
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Ok((value, BTreeMap::new()));
        }
        let mut grads = tape.backward(loss)?;
        Ok((value, p.gradients(&mut grads)))
    }

    /// One update at `lr`; returns the loss measured before it. A
    /// non-finite loss leaves the parameters untouched.
    pub fn step(&mut self, lr: f64) -> Result<f64> {
        let (loss, grads) = self.loss_and_gradients()?;
        if loss.is_finite() {
            adam_step(&mut self.model.params, &grads, &self.cfg.adam, lr, &mut self.adam)?;
        }
        Ok(loss)
    }

    fn checkpoint(&self, step: usize, validation_eer: Option<f64>) -> Checkpoint {
        Checkpoint {
            parameters: self.model.params.clone(),
            optimizer: self.adam.clone(),
            step,
            validation_eer,
            fingerprint: fingerprint(&self.cfg),
            classes: self.classes.len(),
        }
    }
}

impl RangeObjective for TrainingSession<'_> {
    fn step(&mut self, _step: usize, lr: f64) -> Result<f64> {
        match TrainingSession::step(self, lr) {
            Err(Error::NonFinite { .. }) => Ok(f64::NAN),
            other => other,
        }
    }
}

fn latent_inputs<'c>(crops: &'c [Crop], whole: &[bool]) -> Vec<LatentInput<'c>> {
    crops
        .iter()
        .zip(whole)
        .map(|(c, &w)| LatentInput {
            id: &c.waveform.utterance_id,
            samples: &c.waveform.samples[..c.valid_len],
            whole_utterance: w,
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    /// Updates completed, counting this one.
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub validation_eer: Option<f64>,
}

pub fn metrics_csv(log: &[MetricsRow]) -> String {
    let mut s = String::from("step,loss,lr,validation_eer\n");
    for r in log {
        let eer = r.validation_eer.map_or(String::new(), |e| e.to_string());
        let _ = writeln!(s, "{},{},{:e},{eer}", r.step, r.loss, r.lr);
    }
    s
}

/// Utterances and trials used to pick the best checkpoint.
#[derive(Clone, Copy, Debug)]
pub struct Validation<'a> {
    pub corpus: &'a Corpus,
    pub trials: &'a TrialList,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub log: Vec<MetricsRow>,
    /// Step whose loss or gradient was non-finite; the run stopped there.
    pub diverged_at: Option<usize>,
    pub classes: Vec<String>,
}

/// Validation EER of `model` with a fixed pooling generator.
pub fn validation_eer(model: &SpeakerModel, v: Validation<'_>, seed: u64, cache: Option<&mut LatentCache>) -> Result<Evaluation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    evaluate_trials(model, v.trials, v.corpus, &mut rng, cache)
}

/// Trains for `cfg.iterations` steps, validating every
/// `effective_validation_interval()` steps and after the last one.
pub fn train_run(cfg: &TrainConfig, corpus: &Corpus, validation: Option<Validation<'_>>) -> Result<TrainOutcome> {
    let mut session = TrainingSession::new(cfg, corpus)?;
    let mut log = Vec::new();
    let initial = session.checkpoint(0, None);
    if cfg.iterations == 0 {
        return Ok(TrainOutcome {
            best: initial.clone(),
            last: initial,
            log,
            diverged_at: None,
            classes: session.classes.clone(),
        });
    }
    let schedule = cfg.schedule_spec()?;
    let interval = cfg.effective_validation_interval();
    let mut best: Option<Checkpoint> = None;
    let mut diverged_at = None;
    let mut completed = 0;
    for k in 0..cfg.iterations {
        let lr = schedule.lr_at(k)?;
        let loss = match session.step(lr) {
            Ok(l) => l,
            Err(Error::NonFinite { context, index }) => {
                warn!("step {}: non-finite value in {context} at {index}", k + 1);
                f64::NAN
            }
            Err(e) => return Err(e),
        };
        let step = k + 1;
        let mut row = MetricsRow {
            step,
            loss,
            lr,
            validation_eer: None,
        };
        if !loss.is_finite() {
            log.push(row);
            diverged_at = Some(step);
            warn!("training diverged at step {step}");
            break;
        }
        completed = step;
        if let Some(v) = validation {
            if step % interval == 0 || step == cfg.iterations {
                let eer = match validation_eer(&session.model, v, cfg.seed, Some(&mut session.cache)) {
                    Ok(e) => e.eer.eer,
                    Err(Error::NonFinite { context, index }) => {
                        warn!("training diverged at step {step}: non-finite value in {context} at {index}");
                        log.push(row);
                        diverged_at = Some(step);
                        break;
                    }
                    Err(e) => return Err(e),
                };
                row.validation_eer = Some(eer);
                info!("step {step}: loss {loss:.4} validation EER {:.2}%", eer * 100.0);
                if best.as_ref().and_then(|b| b.validation_eer).is_none_or(|b| eer < b) {
                    best = Some(session.checkpoint(step, Some(eer)));
                }
            }
        }
        debug!("step {step}: loss {loss} lr {lr:e}");
        log.push(row);
    }
    let last_eer = log.last().and_then(|r| r.validation_eer);
    let last = session.checkpoint(completed, last_eer);
    Ok(TrainOutcome {
        best: best.unwrap_or_else(|| last.clone()),
        last,
        log,
        diverged_at,
        classes: session.classes.clone(),
    })
}

/// Table of ablation names and the config keys each one changes.
pub const ABLATIONS: [(&str, &[&str]); 11] = [
    ("unfrozen_extractor", &["encoder.freeze_feature_extractor"]),
    ("random_init", &["init_weights"]),
    ("no_layerdrop", &["encoder.layerdrop_p"]),
    ("no_layerdrop_dropout", &["encoder.layerdrop_p", "encoder.dropout_p"]),
    (
        "no_layerdrop_dropout_timemask",
        &["encoder.layerdrop_p", "encoder.dropout_p", "encoder.time_mask.prob"],
    ),
    ("batch_half_200k", &["files_per_batch", "iterations"]),
    ("batch_double_50k", &["files_per_batch", "iterations"]),
    ("lr_constant_1e-5", &["schedule.*"]),
    ("lr_constant_3e-6", &["schedule.*"]),
    ("lr_exp_decay", &["schedule.*"]),
    ("lr_tri_stage", &["schedule.*"]),
];

pub fn ablation_names() -> Vec<&'static str> {
    ABLATIONS.iter().map(|a| a.0).collect()
}

/// `base` with the fields of ablation `name` changed. Step counts of the
/// batch-size and tri-stage ablations scale with `base.iterations`.
pub fn run_ablation(base: &TrainConfig, name: &str) -> Result<TrainConfig> {
    let mut c = base.clone();
    let n = base.iterations;
    match name {
        "unfrozen_extractor" => c.encoder.freeze_feature_extractor = false,
        "random_init" => c.init_weights = None,
        "no_layerdrop" => c.encoder.layerdrop_p = 0.0,
        "no_layerdrop_dropout" => {
            c.encoder.layerdrop_p = 0.0;
            c.encoder.dropout_p = 0.0;
        }
        "no_layerdrop_dropout_timemask" => {
            c.encoder.layerdrop_p = 0.0;
            c.encoder.dropout_p = 0.0;
            c.encoder.time_mask.prob = 0.0;
        }
        "batch_half_200k" => {
            c.files_per_batch = (base.files_per_batch / 2).max(1);
            c.iterations = n * 2;
        }
        "batch_double_50k" => {
            c.files_per_batch = base.files_per_batch * 2;
            c.iterations = n / 2;
        }
        "lr_constant_1e-5" => c.schedule = ScheduleKind::Constant { lr: 1e-5 },
        "lr_constant_3e-6" => c.schedule = ScheduleKind::Constant { lr: 3e-6 },
        "lr_exp_decay" => {
            c.schedule = ScheduleKind::ExponentialDecay {
                lr_start: 1e-5,
                lr_end: 3e-6,
            }
        }
        "lr_tri_stage" => {
            c.schedule = ScheduleKind::TriStage {
                lr_floor_init: 1e-7,
                lr_peak: 1e-5,
                lr_floor_final: 1e-7,
                warmup_steps: n / 10,
                hold_steps: n * 2 / 5,
            }
        }
        _ => {
            return Err(Error::invalid(format!(
                "unknown ablation '{name}'; valid names: {}",
                ablation_names().join(", ")
            )))
        }
    }
    Ok(c)
}

/// Utterances not referenced by any of `lists`.
pub fn training_split(corpus: &Corpus, lists: &[&TrialList]) -> Corpus {
    let held: BTreeSet<String> = lists.iter().flat_map(|l| l.utterance_ids()).collect();
    corpus.filter(|w| !held.contains(&w.utterance_id))
}

#[cfg(test)]
mod tests;
