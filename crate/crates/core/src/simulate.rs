//! Synthetic targets and generatively sampled queries.
//!
//! Targets are random walks over pitch intervals and rhythm-bin deltas
//! drawn from corpus statistics; queries are sampled from the error model
//! itself, walking the hidden lattice and emitting errors. Sampled queries
//! come back in raw form (note numbers and milliseconds) and re-enter the
//! pipeline through the quantization front end, so every experiment
//! exercises it. All sampling is a pure function of the inputs and seed.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{
    dequantize_ioi, quantize_sequence, QuantizationConfig, QuantizedEvent, RawNote,
};
use crate::lattice::ScoringContext;
use crate::model::{
    build_target_model, tempo_value, transposition_value, EditState, ErrorModelParams,
    HiddenState, RhythmExpectation, NUM_TRANSPOSITIONS, TRANS_MIN,
};

/// Pitch-interval support of corpus statistics, in semitones.
pub const INTERVAL_MIN: i32 = -24;
pub const INTERVAL_MAX: i32 = 24;
/// Rhythm-delta support, in quantization bins.
pub const RHYTHM_DELTA_MIN: i32 = -8;
pub const RHYTHM_DELTA_MAX: i32 = 8;
/// Starting-pitch support, MIDI note numbers.
pub const START_PITCH_MIN: i32 = 36;
pub const START_PITCH_MAX: i32 = 95;

/// Empirical unigram statistics of a note corpus: successive pitch
/// intervals, rhythm-bin deltas, and starting values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusStats {
    /// Distribution over pitch intervals `-24..=24`.
    pub pitch_interval: Vec<f64>,
    /// Distribution over rhythm-bin deltas `-8..=8`.
    pub rhythm_delta: Vec<f64>,
    /// Distribution over starting pitches `36..=95`.
    pub start_pitch: Vec<f64>,
    /// Distribution over starting rhythm bins `0..=q-1`.
    pub start_rhythm: Vec<f64>,
}

fn normalize(v: &mut [f64]) {
    let sum: f64 = v.iter().sum();
    for p in v.iter_mut() {
        *p /= sum;
    }
}

impl CorpusStats {
    /// Hand-specified plausible distributions for use when no corpus is
    /// available. Not empirical; small intervals and moderate note lengths
    /// dominate.
    pub fn builtin_default(q: usize) -> Self {
        let mut s = Self {
            pitch_interval: crate::model::discrete_normal(INTERVAL_MIN, INTERVAL_MAX, 0.0, 3.0),
            rhythm_delta: crate::model::discrete_normal(
                RHYTHM_DELTA_MIN,
                RHYTHM_DELTA_MAX,
                0.0,
                1.6,
            ),
            start_pitch: crate::model::discrete_normal(
                START_PITCH_MIN,
                START_PITCH_MAX,
                65.0,
                8.0,
            ),
            start_rhythm: crate::model::discrete_normal(0, q as i32 - 1, 13.0, 2.5),
        };
        normalize(&mut s.pitch_interval);
        normalize(&mut s.rhythm_delta);
        normalize(&mut s.start_pitch);
        normalize(&mut s.start_rhythm);
        s
    }

    pub fn validate(&self, q: usize) -> Result<()> {
        for (name, dist, len) in [
            ("pitch_interval", &self.pitch_interval, (INTERVAL_MAX - INTERVAL_MIN + 1) as usize),
            (
                "rhythm_delta",
                &self.rhythm_delta,
                (RHYTHM_DELTA_MAX - RHYTHM_DELTA_MIN + 1) as usize,
            ),
            ("start_pitch", &self.start_pitch, (START_PITCH_MAX - START_PITCH_MIN + 1) as usize),
            ("start_rhythm", &self.start_rhythm, q),
        ] {
            if dist.len() != len {
                return Err(Error::InvalidParameter(format!(
                    "{name}: {} bins, expected {len}",
                    dist.len()
                )));
            }
            let sum: f64 = dist.iter().sum();
            if (sum - 1.0).abs() > 1e-6 || dist.iter().any(|&p| p < 0.0) {
                return Err(Error::InvalidDistribution { name: name.into(), sum });
            }
        }
        Ok(())
    }
}

/// Build Laplace-smoothed (add one) unigram statistics from a corpus of
/// note sequences. Every file must contain at least two notes.
pub fn build_corpus_stats(corpus: &[Vec<RawNote>], cfg: &QuantizationConfig) -> Result<CorpusStats> {
    if corpus.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut interval = vec![1.0; (INTERVAL_MAX - INTERVAL_MIN + 1) as usize];
    let mut rdelta = vec![1.0; (RHYTHM_DELTA_MAX - RHYTHM_DELTA_MIN + 1) as usize];
    let mut spitch = vec![1.0; (START_PITCH_MAX - START_PITCH_MIN + 1) as usize];
    let mut srhythm = vec![1.0; cfg.q];
    for file in corpus {
        if file.len() < 2 {
            return Err(Error::InvalidInput("corpus file with fewer than 2 notes".into()));
        }
        let pitches: Vec<i32> = file.iter().map(|n| n.note_number.round() as i32).collect();
        let bins: Vec<i32> = file
            .iter()
            .map(|n| crate::events::quantize_ioi(n.ioi_ms, cfg).map(|b| b as i32))
            .collect::<Result<_>>()?;
        spitch[(pitches[0].clamp(START_PITCH_MIN, START_PITCH_MAX) - START_PITCH_MIN) as usize] +=
            1.0;
        srhythm[bins[0] as usize] += 1.0;
        for w in pitches.windows(2) {
            let d = (w[1] - w[0]).clamp(INTERVAL_MIN, INTERVAL_MAX);
            interval[(d - INTERVAL_MIN) as usize] += 1.0;
        }
        for w in bins.windows(2) {
            let d = (w[1] - w[0]).clamp(RHYTHM_DELTA_MIN, RHYTHM_DELTA_MAX);
            rdelta[(d - RHYTHM_DELTA_MIN) as usize] += 1.0;
        }
    }
    normalize(&mut interval);
    normalize(&mut rdelta);
    normalize(&mut spitch);
    normalize(&mut srhythm);
    Ok(CorpusStats {
        pitch_interval: interval,
        rhythm_delta: rdelta,
        start_pitch: spitch,
        start_rhythm: srhythm,
    })
}

/// Configuration of a synthetic experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub seed: u64,
    pub database_size: usize,
    /// Inclusive range of target lengths, in notes.
    pub target_len: (usize, usize),
    /// Inclusive range of query lengths, in notes.
    pub query_len: (usize, usize),
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self { seed: 0, database_size: 100, target_len: (20, 24), query_len: (8, 12) }
    }
}

fn sample_index(rng: &mut impl Rng, dist: &[f64]) -> usize {
    let mut u: f64 = rng.gen_range(0.0..1.0);
    for (i, &p) in dist.iter().enumerate() {
        if u < p {
            return i;
        }
        u -= p;
    }
    dist.len() - 1
}

/// Generate a database of random-walk targets. Each target derives its own
/// seed from the base seed and its index, so generation parallelizes and
/// stays deterministic.
pub fn generate_database(
    stats: &CorpusStats,
    cfg: &QuantizationConfig,
    config: &SimulationConfig,
) -> Result<Vec<Vec<RawNote>>> {
    stats.validate(cfg.q)?;
    (0..config.database_size)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(i as u64));
            let len = rng.gen_range(config.target_len.0..=config.target_len.1);
            generate_target(stats, cfg, len, &mut rng)
        })
        .collect()
}

fn generate_target(
    stats: &CorpusStats,
    cfg: &QuantizationConfig,
    len: usize,
    rng: &mut impl Rng,
) -> Result<Vec<RawNote>> {
    let mut pitch = START_PITCH_MIN + sample_index(rng, &stats.start_pitch) as i32;
    let mut bin = sample_index(rng, &stats.start_rhythm) as i32;
    let mut notes = Vec::with_capacity(len);
    for i in 0..len {
        if i > 0 {
            pitch += INTERVAL_MIN + sample_index(rng, &stats.pitch_interval) as i32;
            // Octave-fold back into range, preserving pitch class.
            while pitch > START_PITCH_MAX {
                pitch -= 12;
            }
            while pitch < START_PITCH_MIN {
                pitch += 12;
            }
            bin = (bin + RHYTHM_DELTA_MIN + sample_index(rng, &stats.rhythm_delta) as i32)
                .clamp(0, cfg.q as i32 - 1);
        }
        notes.push(RawNote::new(pitch as f64, dequantize_ioi(bin as usize, cfg)?));
    }
    Ok(notes)
}

/// A query sampled from the generative model.
#[derive(Debug, Clone)]
pub struct SampledQuery {
    /// Raw note events (note numbers in a single octave starting at middle
    /// C, IOIs in milliseconds).
    pub raw: Vec<RawNote>,
    /// The raw events round-tripped through the quantization front end.
    pub events: Vec<QuantizedEvent>,
    /// The hidden path that generated each note.
    pub path: Vec<HiddenState>,
    /// True when the walk hit the end of the target early.
    pub truncated: bool,
}

/// Sample one query from a target by walking the hidden state space:
/// initial state from the initial distribution, transitions from the tied
/// tables, and pitch/rhythm errors applied relative to the walk's
/// transposition and tempo.
///
/// The walk emits `length` notes when the topology allows it; a walk inside
/// an elaboration chain at the length limit finishes the chain (at most
/// `M - 1` extra notes), and a walk reaching the target end stops early
/// with the `truncated` flag set.
pub fn sample_query(
    target: &[QuantizedEvent],
    params: &ErrorModelParams,
    cfg: &QuantizationConfig,
    start_pos: usize,
    length: usize,
    seed: u64,
) -> Result<SampledQuery> {
    if length == 0 {
        return Err(Error::EmptySequence);
    }
    let model = build_target_model(target, params.l_max, params.m_max, *cfg, start_pos)?;
    let ctx = ScoringContext::new(&model, params)?;
    let mut rng = StdRng::seed_from_u64(seed);

    // Initial state.
    let ctx_e = params.contexts.context_of(start_pos);
    let mass = model.entry_mass_at(start_pos, params, ctx_e);
    if mass <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "no edit classification has mass at start position {start_pos}"
        )));
    }
    let entries = model.entry_states_at(start_pos);
    let entry_dist: Vec<f64> =
        entries.iter().map(|&(_, class)| params.edit[ctx_e][class] / mass).collect();
    let mut edit_idx = entries[sample_index(&mut rng, &entry_dist)].0;
    let mut k_idx = rng.gen_range(0..NUM_TRANSPOSITIONS);
    let mut s_idx = sample_index(&mut rng, &params.initial_tempo_dist());

    let mut state_seq: Vec<(usize, usize, usize)> = vec![(edit_idx, k_idx, s_idx)];
    let mut truncated = false;
    loop {
        let interior = matches!(
            model.expected(edit_idx).rhythm,
            RhythmExpectation::ChainInterior
        );
        if state_seq.len() >= length && !interior {
            break;
        }
        let succs = &ctx.succ[edit_idx];
        if succs.is_empty() {
            truncated = true;
            break;
        }
        let edist: Vec<f64> = succs.iter().map(|s| s.a_e).collect();
        edit_idx = succs[sample_index(&mut rng, &edist)].to as usize;
        k_idx = sample_index(&mut rng, &ctx.pk_pair[k_idx]);
        s_idx = sample_index(&mut rng, &ctx.a_s[s_idx]);
        state_seq.push((edit_idx, k_idx, s_idx));
    }

    // Emissions. Chains emit one aggregate duration at the final state,
    // split evenly over the chain's notes; every note's pitch error is
    // drawn at its own state.
    let q = params.q;
    let lim = (q - 1) as i32;
    let mut ioi_ms = vec![0.0f64; state_seq.len()];
    let mut note_numbers = vec![0.0f64; state_seq.len()];
    let mut i = 0;
    while i < state_seq.len() {
        let (e, _, _) = state_seq[i];
        match model.expected(e).rhythm {
            RhythmExpectation::Bin(b) => {
                let (_, _, s) = state_seq[i];
                let dr = sample_index(&mut rng, &params.rhythm_error[0]) as i32 - lim;
                let bin = (b as i32 + tempo_value(s) + dr).clamp(0, lim);
                ioi_ms[i] = dequantize_ioi(bin as usize, cfg)?;
                i += 1;
            }
            RhythmExpectation::ChainInterior | RhythmExpectation::ChainFinal { .. } => {
                // Locate the end of this chain run.
                let span = match model.edit_state(e).kind {
                    crate::model::EditKind::Elab { span, .. } => span,
                    _ => unreachable!("interior expectation on a non-chain state"),
                };
                let last = i + span - 1;
                debug_assert!(last < state_seq.len());
                let (fe, _, fs) = state_seq[last];
                let target_bin = match model.expected(fe).rhythm {
                    RhythmExpectation::ChainFinal { target_bin, .. } => target_bin,
                    _ => unreachable!("chain does not end in a final state"),
                };
                let dr = sample_index(&mut rng, &params.rhythm_error[0]) as i32 - lim;
                let bin = (target_bin as i32 + tempo_value(fs) + dr).clamp(0, lim);
                let total = dequantize_ioi(bin as usize, cfg)?;
                for slot in ioi_ms.iter_mut().take(last + 1).skip(i) {
                    *slot = total / span as f64;
                }
                i = last + 1;
            }
        }
    }
    for (i, &(e, k, _)) in state_seq.iter().enumerate() {
        let dp = sample_index(&mut rng, &params.pitch_error[0]) as i32 + TRANS_MIN;
        let pc = (model.expected(e).pitch_class as i32 + transposition_value(k) + dp)
            .rem_euclid(12);
        note_numbers[i] = (60 + pc) as f64;
    }

    let raw: Vec<RawNote> = note_numbers
        .iter()
        .zip(&ioi_ms)
        .map(|(&n, &d)| RawNote::new(n, d))
        .collect();
    let events = quantize_sequence(&raw, cfg)?;
    let path = state_seq
        .iter()
        .map(|&(e, k, s)| HiddenState {
            edit: EditState { kind: model.edit_state(e).kind, pos: model.edit_state(e).pos },
            transposition: transposition_value(k) as i8,
            tempo: tempo_value(s) as i8,
        })
        .collect();
    Ok(SampledQuery { raw, events, path, truncated })
}
