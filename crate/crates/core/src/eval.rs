//! Trial scoring and equal error rate.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{Corpus, Trial, TrialLabel, TrialList, Waveform};
use crate::error::{Error, Result};
use crate::heads::{self, Variant};
use crate::model::{sequence_from, LatentCache, SpeakerModel};
use crate::nn::{Mode, Tape, Tensor};
use crate::pooling::{pool, SpeakerEmbedding};

/// Utterances encoded per forward pass during evaluation.
const EVAL_BATCH: usize = 16;

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "cannot compare embeddings of size {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(na > 0.0) || !(nb > 0.0) {
        return Err(Error::invalid("cosine score of a zero-norm embedding"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub fn cosine_score(a: &SpeakerEmbedding, b: &SpeakerEmbedding) -> Result<f64> {
    cosine(&a.values, &b.values)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialScore {
    pub trial: Trial,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EerResult {
    pub eer: f64,
    pub threshold: f64,
    /// Sorted unique scores followed by `+inf`.
    pub thresholds: Vec<f64>,
    /// Fraction of different-speaker trials scoring `>= threshold`.
    pub far_curve: Vec<f64>,
    /// Fraction of same-speaker trials scoring `< threshold`.
    pub frr_curve: Vec<f64>,
    pub same_trials: usize,
    pub different_trials: usize,
}

/// EER over `(score, label)` pairs.
///
/// FAR and FRR are evaluated at every unique score and at `+inf`. At the
/// first threshold where FAR no longer exceeds FRR the two curves are
/// interpolated linearly against the previous threshold.
pub fn compute_eer_from(scored: &[(f64, TrialLabel)]) -> Result<EerResult> {
    if let Some(i) = scored.iter().position(|(s, _)| !s.is_finite()) {
        return Err(Error::NonFinite {
            context: "trial scores".into(),
            index: i,
        });
    }
    let mut same: Vec<f64> = scored.iter().filter(|s| s.1 == TrialLabel::Same).map(|s| s.0).collect();
    let mut diff: Vec<f64> = scored.iter().filter(|s| s.1 == TrialLabel::Different).map(|s| s.0).collect();
    if same.is_empty() || diff.is_empty() {
        return Err(Error::invalid(
            "EER needs at least one same-speaker and one different-speaker trial",
        ));
    }
    same.sort_by(f64::total_cmp);
    diff.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = same.iter().chain(&diff).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);
    let (ns, nd) = (same.len() as f64, diff.len() as f64);
    let far_curve: Vec<f64> = thresholds
        .iter()
        .map(|&t| (diff.len() - diff.partition_point(|&s| s < t)) as f64 / nd)
        .collect();
    let frr_curve: Vec<f64> = thresholds
        .iter()
        .map(|&t| same.partition_point(|&s| s < t) as f64 / ns)
        .collect();
    let i = (0..thresholds.len())
        .find(|&i| far_curve[i] <= frr_curve[i])
        .expect("FAR is 0 and FRR is 1 at +inf");
    // FAR = 1 > FRR = 0 at the lowest threshold, so i >= 1.
    let d0 = far_curve[i - 1] - frr_curve[i - 1];
    let d1 = far_curve[i] - frr_curve[i];
    let alpha = d0 / (d0 - d1);
    let eer = far_curve[i - 1] + alpha * (far_curve[i] - far_curve[i - 1]);
    let threshold = if thresholds[i].is_finite() {
        thresholds[i - 1] + alpha * (thresholds[i] - thresholds[i - 1])
    } else {
        thresholds[i - 1]
    };
    Ok(EerResult {
        eer,
        threshold,
        thresholds,
        far_curve,
        frr_curve,
        same_trials: same.len(),
        different_trials: diff.len(),
    })
}

pub fn compute_eer(scores: &[TrialScore]) -> Result<EerResult> {
    let pairs: Vec<(f64, TrialLabel)> = scores.iter().map(|s| (s.score, s.trial.label)).collect();
    compute_eer_from(&pairs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub eer: EerResult,
    pub scores: Vec<TrialScore>,
    /// Utterances run through the encoder during this evaluation.
    pub encoded_utterances: usize,
}

/// Encoder outputs of every utterance in `trials`, each encoded once.
fn encode_all(
    model: &SpeakerModel,
    trials: &TrialList,
    corpus: &Corpus,
    mut latents: Option<&mut LatentCache>,
) -> Result<HashMap<String, Tensor>> {
    let ids: Vec<String> = trials.utterance_ids().into_iter().collect();
    let waves: Vec<&Waveform> = ids.iter().map(|id| corpus.get(id)).collect::<Result<_>>()?;
    let mut out = HashMap::with_capacity(ids.len());
    // Batch equal lengths together; results do not depend on batch mates.
    let mut order: Vec<usize> = (0..waves.len()).collect();
    order.sort_by_key(|&i| waves[i].len());
    for chunk in order.chunks(EVAL_BATCH) {
        let batch: Vec<&Waveform> = chunk.iter().map(|&i| waves[i]).collect();
        let seqs = model.eval_sequences(&batch, latents.as_deref_mut())?;
        for (&i, s) in chunk.iter().zip(seqs) {
            out.insert(ids[i].clone(), s);
        }
    }
    Ok(out)
}

/// Pooled embedding of every encoded utterance, drawing random pooling
/// positions from `rng` in sorted id order.
fn embed_all<R: Rng + ?Sized>(
    model: &SpeakerModel,
    sequences: &HashMap<String, Tensor>,
    rng: &mut R,
) -> Result<HashMap<String, Vec<f64>>> {
    let mut ids: Vec<&String> = sequences.keys().collect();
    ids.sort();
    let has_cls = model.config().cls_token;
    let mut out = HashMap::with_capacity(ids.len());
    for id in ids {
        let mut tape = Tape::new();
        let seq = sequence_from(&mut tape, &[&sequences[id]], has_cls)?;
        let pooled = pool(&mut tape, &seq, model.pooling, rng)?;
        let values = tape.value(pooled).data().to_vec();
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("embedding of '{id}'"),
                index: i,
            });
        }
        out.insert(id.clone(), values);
    }
    Ok(out)
}

fn pair_scores(
    model: &SpeakerModel,
    trials: &TrialList,
    sequences: &HashMap<String, Tensor>,
) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(trials.len());
    for chunk in trials.trials.chunks(EVAL_BATCH) {
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, false);
        let items: Vec<&Tensor> = chunk
            .iter()
            .flat_map(|t| [&sequences[&t.a], &sequences[&t.b]])
            .collect();
        let seq = sequence_from(&mut tape, &items, false)?;
        let pairs: Vec<(usize, usize)> = (0..chunk.len()).map(|i| (2 * i, 2 * i + 1)).collect();
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let logits = heads::pair_logits(&mut tape, &model.encoder, &p, &seq, &pairs, Mode::Eval, &mut unused)?;
        scores.extend_from_slice(tape.value(logits).data());
    }
    Ok(scores)
}

fn scored(trials: &TrialList, scores: Vec<f64>) -> Result<Vec<TrialScore>> {
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("score of trial {}", i + 1),
            index: i,
        });
    }
    Ok(trials
        .trials
        .iter()
        .cloned()
        .zip(scores)
        .map(|(trial, score)| TrialScore { trial, score })
        .collect())
}

/// Scores every trial in list order and computes the EER. Each utterance
/// is encoded once; `latents` may carry frozen extractor outputs across
/// evaluations.
pub fn evaluate_trials<R: Rng + ?Sized>(
    model: &SpeakerModel,
    trials: &TrialList,
    corpus: &Corpus,
    rng: &mut R,
    latents: Option<&mut LatentCache>,
) -> Result<Evaluation> {
    Ok(evaluate_repeated(model, trials, corpus, std::slice::from_mut(&mut &mut *rng), latents)?.remove(0))
}

/// One evaluation per generator. Utterances are encoded once and shared;
/// only the pooling draws differ between repeats.
pub fn evaluate_repeated<R: Rng>(
    model: &SpeakerModel,
    trials: &TrialList,
    corpus: &Corpus,
    rngs: &mut [R],
    latents: Option<&mut LatentCache>,
) -> Result<Vec<Evaluation>> {
    let sequences = encode_all(model, trials, corpus, latents)?;
    let encoded = sequences.len();
    let mut out = Vec::with_capacity(rngs.len());
    let bce_scores = if model.variant == Variant::Bce {
        Some(pair_scores(model, trials, &sequences)?)
    } else {
        None
    };
    for rng in rngs.iter_mut() {
        let scores = match &bce_scores {
            Some(s) => s.clone(),
            None => {
                let emb = embed_all(model, &sequences, rng)?;
                trials
                    .trials
                    .iter()
                    .map(|t| cosine(&emb[&t.a], &emb[&t.b]))
                    .collect::<Result<Vec<_>>>()?
            }
        };
        let scores = scored(trials, scores)?;
        out.push(Evaluation {
            eer: compute_eer(&scores)?,
            scores,
            encoded_utterances: encoded,
        });
    }
    Ok(out)
}

/// `<score> <id_a> <id_b>` per line.
pub fn scores_text(scores: &[TrialScore]) -> String {
    scores.iter().fold(String::new(), |mut s, t| {
        let _ = writeln!(s, "{} {} {}", t.score, t.trial.a, t.trial.b);
        s
    })
}

pub fn write_scores(path: &Path, scores: &[TrialScore]) -> Result<()> {
    std::fs::write(path, scores_text(scores)).map_err(|e| Error::io(path, e))
}

pub fn report_text(eer: &EerResult) -> String {
    format!(
        "eer {:.6}\nthreshold {}\nsame_trials {}\ndifferent_trials {}\n",
        eer.eer, eer.threshold, eer.same_trials, eer.different_trials
    )
}

#[cfg(test)]
mod tests;
