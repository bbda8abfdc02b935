//! Iterative non-autoregressive decoding and the greedy causal baseline.
//!
//! The diffusion decoder starts from an all-`[M]` generated segment and runs
//! `N` refinement steps. Each step predicts every position in one
//! bidirectional pass, keeps the predictions at the eligible (still masked)
//! positions whose confidence is highest, and re-masks the rest so that
//! exactly `m_{k-1}` masks remain. Committed positions are never reopened.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::{forward, AttentionMode, NetError, Params, Real};
use crate::vocab::{TokenId, Vocabulary, MASK_ID};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("schedule error: {0}")]
    Schedule(String),
    #[error("remask error: {0}")]
    State(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("decoding failed at step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: NetError,
        partial: Box<DecodeTrace>,
    },
}

/// Mask counts per step: `mask_counts[k]` positions are masked at step `k`,
/// from `mask_counts[N] = L_gen` down to `mask_counts[0] = 0`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub n: usize,
    pub l_gen: usize,
    pub mask_counts: Vec<usize>,
}

/// `m_k = ceil(L * sin(pi k / 2N))`, clamped so every step commits at least
/// one token.
pub fn build_schedule(n: usize, l_gen: usize) -> Result<Schedule, DecodeError> {
    if n == 0 || l_gen == 0 {
        return Err(DecodeError::Schedule(format!("N ({n}) and L_gen ({l_gen}) must be at least 1")));
    }
    if n > l_gen {
        return Err(DecodeError::Schedule(format!(
            "N ({n}) > L_gen ({l_gen}): cannot commit at least one token per step"
        )));
    }
    let mut m: Vec<usize> = (0..=n)
        .map(|k| {
            let gamma = (std::f64::consts::FRAC_PI_2 * k as f64 / n as f64).sin();
            // The small offset keeps exact products such as 8 * 1.0 from rounding up.
            ((l_gen as f64 * gamma - 1e-9).ceil().max(0.0) as usize).min(l_gen)
        })
        .collect();
    m[n] = l_gen;
    for k in (0..n).rev() {
        m[k] = m[k].min(m[k + 1] - 1);
    }
    m[0] = 0;
    Ok(Schedule { n, l_gen, mask_counts: m })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RemaskStrategy {
    LowConfidence,
    Random { seed: u64 },
}

impl RemaskStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            RemaskStrategy::LowConfidence => "low-confidence",
            RemaskStrategy::Random { .. } => "random",
        }
    }
}

impl std::fmt::Display for RemaskStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RemaskStrategy::LowConfidence => f.write_str("low-confidence"),
            RemaskStrategy::Random { seed } => write!(f, "random(seed={seed})"),
        }
    }
}

/// Decoder settings shared by evaluation and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderSettings {
    pub timesteps: usize,
    pub strategy: RemaskStrategy,
}

impl Default for DecoderSettings {
    fn default() -> Self {
        Self { timesteps: 8, strategy: RemaskStrategy::LowConfidence }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    /// Step index, counting down from `N` to 1.
    pub k: usize,
    /// Positions committed at this step.
    pub committed: Vec<usize>,
    /// Confidence per generated position (1 at previously committed ones).
    pub confidence: Vec<f64>,
    /// Full prediction of the clean segment at this step.
    pub prediction: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub strategy: RemaskStrategy,
    pub schedule: Schedule,
    pub prompt_ids: Vec<TokenId>,
    pub steps: Vec<TraceStep>,
    /// The `k` at which each position left the mask set; 0 if it never did.
    pub finalization_step: Vec<usize>,
    pub output_ids: Vec<TokenId>,
    /// Token surfaces of the output, filled by [`DecodeTrace::with_surfaces`].
    #[serde(default)]
    pub tokens: Vec<String>,
}

impl DecodeTrace {
    pub fn with_surfaces(mut self, vocab: &Vocabulary) -> Self {
        self.tokens = self.output_ids.iter().map(|&id| vocab.surface(id).unwrap_or("?").to_string()).collect();
        self
    }

    pub fn to_json(&self) -> Result<String, serde_json::Error> {
        serde_json::to_string_pretty(self)
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Index of the largest value, ignoring `[M]`; the first index wins ties.
fn argmax_excluding_mask(probs: &[f64]) -> usize {
    let mut best = usize::MAX;
    for (i, &p) in probs.iter().enumerate() {
        if i as TokenId == MASK_ID {
            continue;
        }
        if best == usize::MAX || p > probs[best] {
            best = i;
        }
    }
    best
}

fn softmax_f64<T: Real>(row: &[T]) -> Vec<f64> {
    let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = row.iter().map(|v| (v.to_f64() - max).exp()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    p
}

/// One bidirectional pass over `[C_v ; prompt ; current]`. Masked positions
/// get the most likely non-`[M]` token and its probability; committed
/// positions echo their token with confidence 1.
pub fn predict_full<T: Real>(
    params: &Params<T>,
    cv: Option<&[T]>,
    prompt: &[TokenId],
    current: &[TokenId],
) -> Result<(Vec<TokenId>, Vec<f64>), NetError> {
    let mut text = prompt.to_vec();
    text.extend_from_slice(current);
    if current.iter().all(|&id| id != MASK_ID) {
        // Still validate the input, but there is nothing to predict.
        params.config.check_text(&text)?;
        return Ok((current.to_vec(), vec![1.0; current.len()]));
    }
    let out = forward(params, cv, &text, AttentionMode::Bidirectional)?;
    let mut pred = Vec::with_capacity(current.len());
    let mut conf = Vec::with_capacity(current.len());
    for (j, &id) in current.iter().enumerate() {
        if id == MASK_ID {
            let p = softmax_f64(out.row(prompt.len() + j));
            let best = argmax_excluding_mask(&p);
            pred.push(best as TokenId);
            conf.push(p[best]);
        } else {
            pred.push(id);
            conf.push(1.0);
        }
    }
    Ok((pred, conf))
}

/// Commits all but `m_next` of the currently masked positions of `current`.
/// Returns the next segment and the committed positions in ascending order.
pub fn remask(
    prediction: &[TokenId],
    conf: &[f64],
    current: &[TokenId],
    m_next: usize,
    strategy: RemaskStrategy,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<TokenId>, Vec<usize>), DecodeError> {
    if prediction.len() != current.len() || conf.len() != current.len() {
        return Err(DecodeError::State("prediction, confidence and segment lengths differ".into()));
    }
    let eligible: Vec<usize> = (0..current.len()).filter(|&i| current[i] == MASK_ID).collect();
    if m_next > eligible.len() || (m_next == eligible.len() && m_next > 0) {
        return Err(DecodeError::State(format!(
            "cannot keep {m_next} masks among {} eligible positions and still commit one",
            eligible.len()
        )));
    }
    let keep_masked: Vec<usize> = match strategy {
        RemaskStrategy::LowConfidence => {
            let mut order = eligible.clone();
            order.sort_by(|&a, &b| conf[a].total_cmp(&conf[b]).then(a.cmp(&b)));
            order.truncate(m_next);
            order
        }
        RemaskStrategy::Random { .. } => {
            rand::seq::index::sample(rng, eligible.len(), m_next).into_iter().map(|i| eligible[i]).collect()
        }
    };
    let mut next = current.to_vec();
    let mut committed = Vec::with_capacity(eligible.len() - m_next);
    for &i in &eligible {
        if !keep_masked.contains(&i) {
            next[i] = prediction[i];
            committed.push(i);
        }
    }
    Ok((next, committed))
}

/// Runs the full refinement loop for one instance.
pub fn decode_diffusion<T: Real>(
    params: &Params<T>,
    cv: Option<&[T]>,
    prompt: &[TokenId],
    l_gen: usize,
    n: usize,
    strategy: RemaskStrategy,
) -> Result<(Vec<TokenId>, DecodeTrace), DecodeError> {
    let schedule = build_schedule(n, l_gen)?;
    let seed = match strategy {
        RemaskStrategy::Random { seed } => seed,
        RemaskStrategy::LowConfidence => 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut current = vec![MASK_ID; l_gen];
    let mut trace = DecodeTrace {
        strategy,
        schedule: schedule.clone(),
        prompt_ids: prompt.to_vec(),
        steps: Vec::with_capacity(n),
        finalization_step: vec![0; l_gen],
        output_ids: Vec::new(),
        tokens: Vec::new(),
    };
    for k in (1..=n).rev() {
        let (pred, conf) = match predict_full(params, cv, prompt, &current) {
            Ok(r) => r,
            Err(source) => {
                trace.output_ids = current;
                return Err(DecodeError::Step { step: k, source, partial: Box::new(trace) });
            }
        };
        let (next, committed) = remask(&pred, &conf, &current, schedule.mask_counts[k - 1], strategy, &mut rng)?;
        for &i in &committed {
            trace.finalization_step[i] = k;
        }
        trace.steps.push(TraceStep { k, committed, confidence: conf, prediction: pred });
        current = next;
    }
    trace.output_ids = current.clone();
    Ok((current, trace))
}

/// Greedy left-to-right decoding with causal attention, `max_len` tokens.
pub fn decode_ar<T: Real>(
    params: &Params<T>,
    cv: Option<&[T]>,
    prompt: &[TokenId],
    max_len: usize,
) -> Result<Vec<TokenId>, NetError> {
    let mut text = prompt.to_vec();
    for _ in 0..max_len {
        let out = forward(params, cv, &text, AttentionMode::Causal)?;
        let p = softmax_f64(out.row(text.len() - 1));
        text.push(argmax_excluding_mask(&p) as TokenId);
    }
    Ok(text.split_off(prompt.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        assert_eq!(build_schedule(1, 8).unwrap().mask_counts, vec![0, 8]);
        assert_eq!(build_schedule(4, 8).unwrap().mask_counts, vec![0, 4, 6, 7, 8]);
        assert_eq!(build_schedule(8, 8).unwrap().mask_counts, (0..=8).collect::<Vec<_>>());
        let s = build_schedule(8, 16).unwrap();
        assert_eq!((s.mask_counts[0], s.mask_counts[8]), (0, 16));
        assert!(s.mask_counts.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn schedule_errors() {
        assert!(matches!(build_schedule(16, 8), Err(DecodeError::Schedule(_))));
        assert!(build_schedule(0, 8).is_err());
        assert!(build_schedule(1, 0).is_err());
    }

    #[test]
    fn remask_low_confidence_hand_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cur = vec![MASK_ID; 3];
        let (next, committed) =
            remask(&[10, 11, 12], &[0.9, 0.2, 0.5], &cur, 2, RemaskStrategy::LowConfidence, &mut rng).unwrap();
        assert_eq!(next, vec![10, MASK_ID, MASK_ID]);
        assert_eq!(committed, vec![0]);
    }

    #[test]
    fn remask_ties_and_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cur = vec![MASK_ID, 7, MASK_ID, MASK_ID];
        let (next, committed) =
            remask(&[4, 7, 5, 6], &[0.5, 1.0, 0.5, 0.5], &cur, 1, RemaskStrategy::LowConfidence, &mut rng).unwrap();
        assert_eq!(next, vec![MASK_ID, 7, 5, 6]);
        assert_eq!(committed, vec![2, 3]);
        let (all, _) = remask(&[4, 7, 5, 6], &[0.5; 4], &cur, 0, RemaskStrategy::LowConfidence, &mut rng).unwrap();
        assert_eq!(all, vec![4, 7, 5, 6]);
        assert!(matches!(
            remask(&[4, 7, 5, 6], &[0.5; 4], &cur, 3, RemaskStrategy::LowConfidence, &mut rng),
            Err(DecodeError::State(_))
        ));
        assert!(remask(&[4, 7, 5, 6], &[0.5; 4], &cur, 4, RemaskStrategy::Random { seed: 1 }, &mut rng).is_err());
    }

    #[test]
    fn random_remask_is_seeded() {
        let cur = vec![MASK_ID; 10];
        let pred: Vec<TokenId> = (20..30).collect();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            remask(&pred, &[0.5; 10], &cur, 6, RemaskStrategy::Random { seed }, &mut rng).unwrap()
        };
        assert_eq!(run(3), run(3));
        assert_eq!(run(3).1.len(), 4);
    }

    #[test]
    fn argmax_skips_mask() {
        let mut p = vec![0.1; 5];
        p[MASK_ID as usize] = 0.9;
        p[3] = 0.2;
        assert_eq!(argmax_excluding_mask(&p), 3);
        assert_eq!(argmax_excluding_mask(&[0.3, 0.0, 0.3]), 0);
    }
}
