//! Audio ingestion, cropping, the synthetic speaker corpus and trial lists.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

/// Manifest file name inside a corpus directory.
pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const VALIDATION_TRIALS_FILE: &str = "trials_val.txt";
pub const TEST_TRIALS_FILE: &str = "trials_test.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub speaker_id: Option<String>,
    pub utterance_id: String,
}

impl Waveform {
    pub fn new(utterance_id: impl Into<String>, samples: Vec<f64>) -> Self {
        Self {
            samples,
            sample_rate: SAMPLE_RATE,
            speaker_id: None,
            utterance_id: utterance_id.into(),
        }
    }

    pub fn with_speaker(mut self, speaker: impl Into<String>) -> Self {
        self.speaker_id = Some(speaker.into());
        self
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Equal-length crops stacked for one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveBatch {
    /// `[batch, samples]`
    pub data: crate::nn::Tensor,
    pub valid_lengths: Vec<usize>,
    pub speaker_ids: Vec<Option<String>>,
    pub utterance_ids: Vec<String>,
}

impl WaveBatch {
    /// Stacks waveforms, zero-padding each to the longest one.
    pub fn from_waveforms(waves: &[Waveform]) -> Result<Self> {
        Self::from_parts(waves.iter().map(|w| (w, w.len())))
    }

    /// Stacks crops; the valid length of each item is the part taken from
    /// the source utterance.
    pub fn from_crops(crops: &[Crop]) -> Result<Self> {
        Self::from_parts(crops.iter().map(|c| (&c.waveform, c.valid_len)))
    }

    fn from_parts<'a>(parts: impl Iterator<Item = (&'a Waveform, usize)>) -> Result<Self> {
        let parts: Vec<_> = parts.collect();
        if parts.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let width = parts.iter().map(|(w, _)| w.len()).max().unwrap_or(0);
        let mut data = Vec::with_capacity(parts.len() * width);
        for (w, _) in &parts {
            if w.sample_rate != SAMPLE_RATE {
                return Err(Error::invalid(format!(
                    "utterance {} has sample rate {}",
                    w.utterance_id, w.sample_rate
                )));
            }
            data.extend_from_slice(&w.samples);
            data.resize(data.len() + width - w.len(), 0.0);
        }
        Ok(Self {
            data: crate::nn::Tensor::new(vec![parts.len(), width], data)?,
            valid_lengths: parts.iter().map(|(_, v)| *v).collect(),
            speaker_ids: parts.iter().map(|(w, _)| w.speaker_id.clone()).collect(),
            utterance_ids: parts.iter().map(|(w, _)| w.utterance_id.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.valid_lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid_lengths.is_empty()
    }

    pub fn samples(&self) -> usize {
        self.data.dim(1)
    }
}

/// Utterance and speaker ids from a file name.
///
/// The utterance id is the file stem; the speaker id is the part of the stem
/// before the first `-`, when there is one (`spk003-utt007.wav`).
pub fn ids_from_path(path: &Path) -> (String, Option<String>) {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let speaker = stem
        .split_once('-')
        .map(|(s, _)| s.to_string())
        .filter(|s| !s.is_empty());
    (stem, speaker)
}

/// Reads a mono 16 kHz WAV file holding 16-bit PCM or 32-bit float samples.
pub fn load_wav(path: &Path) -> Result<Waveform> {
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    let reject = |property: String| Error::UnsupportedWav {
        path: path.to_path_buf(),
        property,
    };
    if spec.sample_rate != SAMPLE_RATE {
        return Err(reject(format!(
            "sample rate {} Hz (expected {SAMPLE_RATE})",
            spec.sample_rate
        )));
    }
    if spec.channels != 1 {
        return Err(reject(format!("{} channels (expected mono)", spec.channels)));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| f64::from(v) / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (format, bits) => {
            return Err(reject(format!(
                "encoding {format:?} with {bits} bits (expected 16-bit PCM or 32-bit float)"
            )))
        }
    };
    let (utterance_id, speaker_id) = ids_from_path(path);
    Ok(Waveform {
        samples,
        sample_rate: SAMPLE_RATE,
        speaker_id,
        utterance_id,
    })
}

/// Writes 32-bit float samples. Values are rounded to `f32`.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in &w.samples {
        writer.write_sample(s as f32).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}

/// Zero mean, unit population variance. Constant input maps to all zeros.
pub fn normalize(w: &Waveform) -> Waveform {
    let mut out = w.clone();
    normalize_in_place(&mut out.samples);
    out
}

pub fn normalize_in_place(samples: &mut [f64]) {
    if samples.is_empty() {
        return;
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 || !std.is_finite() {
        samples.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    samples.iter_mut().for_each(|v| *v = (*v - mean) / std);
}

#[derive(Clone, Debug, PartialEq)]
pub struct Crop {
    /// Exactly `crop_samples` long; shorter inputs are zero-padded at the tail.
    pub waveform: Waveform,
    pub offset: usize,
    /// Number of samples taken from the input.
    pub valid_len: usize,
}

/// Takes `crop_samples` consecutive samples at a uniformly drawn offset.
///
/// Always draws exactly one value from `rng`, so the stream stays aligned
/// regardless of input length.
pub fn random_crop<R: Rng + ?Sized>(w: &Waveform, crop_samples: usize, rng: &mut R) -> Result<Crop> {
    if crop_samples == 0 {
        return Err(Error::invalid("crop length must be at least one sample"));
    }
    let max_offset = w.len().saturating_sub(crop_samples);
    let offset = rng.random_range(0..=max_offset);
    let valid_len = crop_samples.min(w.len());
    let mut samples = w.samples[offset..offset + valid_len].to_vec();
    samples.resize(crop_samples, 0.0);
    Ok(Crop {
        waveform: Waveform {
            samples,
            ..w.clone()
        },
        offset,
        valid_len,
    })
}

fn sub_seed(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 over the combined key
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The fixed harmonic signature of one synthetic speaker.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerVoice {
    pub f0: f64,
    pub harmonics: [u32; 4],
    pub amplitudes: [f64; 4],
}

impl SpeakerVoice {
    pub fn sample(seed: u64, speaker: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, speaker as u64 + 1, 0));
        let f0 = rng.random_range(90.0..260.0);
        let formant = rng.random_range(300.0..1600.0);
        let bandwidth = rng.random_range(150.0..500.0);
        let mut pool: Vec<u32> = (1..=8).collect();
        pool.shuffle(&mut rng);
        let mut harmonics = [pool[0], pool[1], pool[2], pool[3]];
        harmonics.sort_unstable();
        let mut amplitudes = [0.0; 4];
        for (a, &h) in amplitudes.iter_mut().zip(&harmonics) {
            let d = (f64::from(h) * f0 - formant) / bandwidth;
            *a = 0.15 + (-0.5 * d * d).exp() * rng.random_range(0.6..1.0);
        }
        Self {
            f0,
            harmonics,
            amplitudes,
        }
    }

    /// One utterance: random per-harmonic phase, amplitude jitter and white
    /// noise at roughly 20 dB SNR. Samples are rounded to `f32` precision so
    /// they survive a float WAV round trip unchanged.
    pub fn utterance(&self, seed: u64, speaker: usize, utt: usize, samples: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, speaker as u64 + 1, utt as u64 + 1));
        let jitter = Normal::new(1.0f64, 0.1).expect("valid normal");
        let mut phases = [0.0; 4];
        let mut amps = [0.0; 4];
        for k in 0..4 {
            phases[k] = rng.random_range(0.0..std::f64::consts::TAU);
            amps[k] = self.amplitudes[k] * jitter.sample(&mut rng).max(0.2);
        }
        let power: f64 = amps.iter().map(|a| a * a / 2.0).sum();
        let noise = Normal::new(0.0, (power / 100.0).sqrt()).expect("valid normal");
        let omega = std::f64::consts::TAU * self.f0 / f64::from(SAMPLE_RATE);
        (0..samples)
            .map(|n| {
                let mut v = noise.sample(&mut rng);
                for k in 0..4 {
                    let arg = omega * f64::from(self.harmonics[k]) * n as f64 + phases[k];
                    v += amps[k] * libm::sin(arg);
                }
                f64::from((0.25 * v) as f32)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utterance_id: String,
    pub speaker_id: String,
    /// Relative to the corpus directory.
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticCorpus {
    pub speakers: usize,
    pub utterances_per_speaker: usize,
    pub seed: u64,
    pub manifest: Vec<ManifestEntry>,
}

pub fn speaker_name(speaker: usize) -> String {
    format!("spk{speaker:03}")
}

pub fn utterance_name(speaker: usize, utt: usize) -> String {
    format!("spk{speaker:03}-utt{utt:03}")
}

fn check_corpus_size(speakers: usize, utts: usize, duration_s: f64) -> Result<()> {
    if speakers < 2 {
        return Err(Error::invalid(format!("need at least 2 speakers, got {speakers}")));
    }
    if utts < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 utterances per speaker, got {utts}"
        )));
    }
    if !(duration_s > 0.0) {
        return Err(Error::invalid("utterance duration must be positive"));
    }
    Ok(())
}

/// Synthesises the corpus in memory, ordered speaker-major.
pub fn synthesize_corpus(
    speakers: usize,
    utts_per_speaker: usize,
    duration_s: f64,
    seed: u64,
) -> Result<Vec<Waveform>> {
    check_corpus_size(speakers, utts_per_speaker, duration_s)?;
    let samples = (duration_s * f64::from(SAMPLE_RATE)).round() as usize;
    let mut out = Vec::with_capacity(speakers * utts_per_speaker);
    for s in 0..speakers {
        let voice = SpeakerVoice::sample(seed, s);
        for u in 0..utts_per_speaker {
            out.push(
                Waveform::new(utterance_name(s, u), voice.utterance(seed, s, u, samples))
                    .with_speaker(speaker_name(s)),
            );
        }
    }
    Ok(out)
}

/// Writes one float WAV per utterance under `dir/wav/` plus `dir/manifest.tsv`.
pub fn generate_synthetic_corpus(
    dir: &Path,
    speakers: usize,
    utts_per_speaker: usize,
    duration_s: f64,
    seed: u64,
) -> Result<SyntheticCorpus> {
    let waves = synthesize_corpus(speakers, utts_per_speaker, duration_s, seed)?;
    let wav_dir = dir.join("wav");
    fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let mut manifest = Vec::with_capacity(waves.len());
    for w in &waves {
        let rel = PathBuf::from("wav").join(format!("{}.wav", w.utterance_id));
        write_wav(&dir.join(&rel), w)?;
        manifest.push(ManifestEntry {
            utterance_id: w.utterance_id.clone(),
            speaker_id: w.speaker_id.clone().unwrap_or_default(),
            path: rel,
        });
    }
    write_manifest(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(SyntheticCorpus {
        speakers,
        utterances_per_speaker: utts_per_speaker,
        seed,
        manifest,
    })
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&format!(
            "{}\t{}\t{}\n",
            e.utterance_id,
            e.speaker_id,
            e.path.display()
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let fields: Vec<&str> = line.split('\t').collect();
            match fields.as_slice() {
                [utt, spk, rel] if !utt.is_empty() && !spk.is_empty() => Ok(ManifestEntry {
                    utterance_id: utt.to_string(),
                    speaker_id: spk.to_string(),
                    path: PathBuf::from(rel),
                }),
                _ => Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: "expected <utterance_id>\\t<speaker_id>\\t<path>".into(),
                }),
            }
        })
        .collect()
}

/// Utterances held in memory, addressable by id.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    utterances: Vec<Waveform>,
    index: HashMap<String, usize>,
}

impl Corpus {
    pub fn from_waveforms(utterances: Vec<Waveform>) -> Result<Self> {
        let mut index = HashMap::with_capacity(utterances.len());
        for (i, w) in utterances.iter().enumerate() {
            if index.insert(w.utterance_id.clone(), i).is_some() {
                return Err(Error::invalid(format!(
                    "duplicate utterance id '{}'",
                    w.utterance_id
                )));
            }
        }
        Ok(Self { utterances, index })
    }

    /// Loads every WAV listed in `dir/manifest.tsv`; manifest ids win over
    /// file-name ids.
    pub fn load(dir: &Path) -> Result<Self> {
        let entries = read_manifest(&dir.join(MANIFEST_FILE))?;
        let waves = entries
            .iter()
            .map(|e| {
                let mut w = load_wav(&dir.join(&e.path))?;
                w.utterance_id = e.utterance_id.clone();
                w.speaker_id = Some(e.speaker_id.clone());
                Ok(w)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_waveforms(waves)
    }

    pub fn get(&self, id: &str) -> Result<&Waveform> {
        self.index
            .get(id)
            .map(|&i| &self.utterances[i])
            .ok_or_else(|| Error::MissingUtterance(id.to_string()))
    }

    pub fn utterances(&self) -> &[Waveform] {
        &self.utterances
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Keeps utterances for which `keep` returns true.
    pub fn filter(&self, keep: impl Fn(&Waveform) -> bool) -> Self {
        let kept = self.utterances.iter().filter(|w| keep(w)).cloned().collect();
        Self::from_waveforms(kept).expect("ids stay unique")
    }

    /// Sorted distinct speaker ids.
    pub fn speakers(&self) -> Vec<String> {
        self.utterances
            .iter()
            .filter_map(|w| w.speaker_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Utterance indices grouped by speaker, in speaker order.
    pub fn by_speaker(&self) -> BTreeMap<String, Vec<usize>> {
        let mut map: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, w) in self.utterances.iter().enumerate() {
            if let Some(s) = &w.speaker_id {
                map.entry(s.clone()).or_default().push(i);
            }
        }
        map
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TrialLabel {
    Same,
    Different,
}

impl TrialLabel {
    pub fn as_digit(self) -> u8 {
        match self {
            TrialLabel::Same => 1,
            TrialLabel::Different => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trial {
    pub label: TrialLabel,
    pub a: String,
    pub b: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

impl TrialList {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn count(&self, label: TrialLabel) -> usize {
        self.trials.iter().filter(|t| t.label == label).count()
    }

    /// Every utterance id referenced by a trial.
    pub fn utterance_ids(&self) -> BTreeSet<String> {
        self.trials
            .iter()
            .flat_map(|t| [t.a.clone(), t.b.clone()])
            .collect()
    }

    pub fn to_text(&self) -> String {
        self.trials
            .iter()
            .map(|t| format!("{} {} {}\n", t.label.as_digit(), t.a, t.b))
            .collect()
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut trials = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: &str| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: message.to_string(),
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [label, a, b] = fields.as_slice() else {
                return Err(err("expected '<0|1> <id_a> <id_b>'"));
            };
            let label = match *label {
                "1" => TrialLabel::Same,
                "0" => TrialLabel::Different,
                _ => return Err(err("label must be 0 or 1")),
            };
            if a == b {
                return Err(err("trial pairs an utterance with itself"));
            }
            trials.push(Trial {
                label,
                a: a.to_string(),
                b: b.to_string(),
            });
        }
        Ok(Self { trials })
    }
}

pub fn parse_trials(path: &Path) -> Result<TrialList> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    TrialList::parse(&text, path)
}

pub fn write_trials(path: &Path, trials: &TrialList) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(trials.to_text().as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Balanced trials: up to `per_class` same and as many different pairs,
/// drawn uniformly without replacement over all unordered utterance pairs.
pub fn balanced_trials<R: Rng + ?Sized>(
    utterances: &[(String, String)],
    per_class: usize,
    rng: &mut R,
) -> TrialList {
    let mut same = Vec::new();
    let mut diff = Vec::new();
    for i in 0..utterances.len() {
        for j in i + 1..utterances.len() {
            if utterances[i].1 == utterances[j].1 {
                same.push((i, j));
            } else {
                diff.push((i, j));
            }
        }
    }
    let n = per_class.min(same.len()).min(diff.len());
    same.shuffle(rng);
    diff.shuffle(rng);
    let mut trials: Vec<Trial> = same[..n]
        .iter()
        .map(|&p| (TrialLabel::Same, p))
        .chain(diff[..n].iter().map(|&p| (TrialLabel::Different, p)))
        .map(|(label, (i, j))| Trial {
            label,
            a: utterances[i].0.clone(),
            b: utterances[j].0.clone(),
        })
        .collect();
    trials.shuffle(rng);
    TrialList { trials }
}

/// Which utterances of each speaker feed the validation and test trial lists.
///
/// With at least six utterances per speaker, the last `max(2, n/5)` go to the
/// test list and the `max(2, n/5)` before them to validation; everything
/// else is training data. Smaller corpora draw both lists from all
/// utterances.
pub fn held_out_split(utts_per_speaker: usize) -> Option<(std::ops::Range<usize>, std::ops::Range<usize>)> {
    if utts_per_speaker < 6 {
        return None;
    }
    let k = (utts_per_speaker / 5).max(2);
    let n = utts_per_speaker;
    Some((n - 2 * k..n - k, n - k..n))
}
