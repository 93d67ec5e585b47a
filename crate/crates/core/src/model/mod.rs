//! Per-target hidden state space and tied probability functions.
//!
//! A hidden state combines an edit type (which target notes a query note
//! accounts for), a transposition, and a tempo. The edit topology is
//! left-right: `Same` states advance one target position, `Join` states of
//! span `l` advance `l` positions, and `Elab` states of span `m` form a
//! deterministic chain of `m` states on one position before advancing.
//! Transition, initial, and emission probabilities are assembled from the
//! tied tables in [`ErrorModelParams`].

mod params;

pub use params::{
    discrete_normal, impulse, pitch_delta_index, rhythm_delta_index, tempo_delta_index,
    tempo_value, transposition_value, wrap_pitch_delta, Component, ContextScheme,
    ErrorModelParams, ModelVariant, ParamsFile, ALL_COMPONENTS, NUM_TEMPI,
    NUM_TRANSPOSITIONS, RESTRICTED_MODULATION_LIMIT, RESTRICTED_TEMPO_LIMIT, TEMPO_MAX,
    TEMPO_MIN, TRANS_MAX, TRANS_MIN,
};

use crate::error::{Error, Result};
use crate::events::{quantize_ioi, QuantizationConfig, QuantizedEvent};

/// Edit type of a hidden state, canonicalized: a join of span 1 and an
/// elaboration of span 1 are the same thing as `Same`, and are normalized
/// to it on construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EditKind {
    /// One query note accounts for one target note.
    Same,
    /// One query note accounts for `span` consecutive target notes.
    Join { span: usize },
    /// Query note `step` (1-based) of `span` notes elaborating one target
    /// note.
    Elab { span: usize, step: usize },
}

impl EditKind {
    pub fn join(span: usize) -> Self {
        if span <= 1 {
            EditKind::Same
        } else {
            EditKind::Join { span }
        }
    }

    pub fn elab(span: usize, step: usize) -> Self {
        if span <= 1 {
            EditKind::Same
        } else {
            debug_assert!((1..=span).contains(&step));
            EditKind::Elab { span, step }
        }
    }
}

/// An edit state: an edit kind anchored at a 0-based target position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EditState {
    pub kind: EditKind,
    pub pos: usize,
}

/// A full hidden state: edit type, transposition, and tempo.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct HiddenState {
    pub edit: EditState,
    /// Transposition in semitones, in `{-5, ..., +6}`.
    pub transposition: i8,
    /// Tempo scaling in quantization units, in `{-4, ..., +4}`.
    pub tempo: i8,
}

/// Successor of an edit state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EditSucc {
    pub to: usize,
    /// Edit classification index of the destination, or `None` for the
    /// deterministic interior step of an elaboration chain.
    pub class: Option<usize>,
}

/// What a state expects to observe for rhythm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RhythmExpectation {
    /// Compare the query note's bin against this target-side bin.
    Bin(u8),
    /// Interior of an elaboration chain: rhythm is deferred to the final
    /// chain state, the rhythm emission factor is 1.
    ChainInterior,
    /// Final state of an elaboration chain: compare the re-quantized sum of
    /// the chain's raw query IOIs against this target bin.
    ChainFinal { target_bin: u8, span: usize },
}

/// Expected observation of an edit state, per the join/elaboration
/// aggregation rules (joins sum raw target IOIs and re-quantize; all
/// elaboration states reference the elaborated note's pitch).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExpectedEmission {
    pub pitch_class: u8,
    pub rhythm: RhythmExpectation,
}

/// The hidden-state space for one target.
///
/// One enumeration serves every starting alignment: per-start initial
/// distributions are generated from it by [`initial_probs`].
#[derive(Debug, Clone)]
pub struct TargetModel {
    pub events: Vec<QuantizedEvent>,
    pub cfg: QuantizationConfig,
    pub l_max: usize,
    pub m_max: usize,
    /// Default starting alignment (0-based target position).
    pub start_index: usize,
    edit_states: Vec<EditState>,
    successors: Vec<Vec<EditSucc>>,
    expected: Vec<ExpectedEmission>,
    /// Per target position: the entry states anchored there with their
    /// edit classification indices.
    entry_at: Vec<Vec<(usize, usize)>>,
    has_chain_interior: bool,
}

/// Build the hidden-state space for a target.
///
/// For each target position there is one `Same` state, `Join` states for
/// every span that fits before the target end, and elaboration chains for
/// every span up to `m_max`. `start_index` is the 0-based default
/// alignment start.
pub fn build_target_model(
    events: &[QuantizedEvent],
    l_max: usize,
    m_max: usize,
    cfg: QuantizationConfig,
    start_index: usize,
) -> Result<TargetModel> {
    if events.is_empty() {
        return Err(Error::EmptySequence);
    }
    if l_max < 1 || m_max < 1 {
        return Err(Error::InvalidParameter("L and M must be >= 1".into()));
    }
    if start_index >= events.len() {
        return Err(Error::StartIndexOutOfRange { start: start_index, len: events.len() });
    }
    cfg.validate()?;

    let n = events.len();
    let mut edit_states = Vec::new();
    let mut expected = Vec::new();
    let mut entry_at: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    // Chain interiors point at their chain successor; resolved in a second
    // pass once all indices are known.
    let mut chain_next: Vec<Option<usize>> = Vec::new();

    let num_classes = l_max + m_max - 1;
    let join_class = |l: usize| l - 1;
    let elab_class = |m: usize| (l_max - 1) + (m - 1);
    debug_assert!(m_max < 2 || elab_class(m_max) == num_classes - 1);

    for pos in 0..n {
        let same_idx = edit_states.len();
        edit_states.push(EditState { kind: EditKind::Same, pos });
        expected.push(ExpectedEmission {
            pitch_class: events[pos].pitch_class,
            rhythm: RhythmExpectation::Bin(events[pos].rhythm_bin),
        });
        chain_next.push(None);
        entry_at[pos].push((same_idx, 0));

        for l in 2..=l_max {
            if pos + l > n {
                break;
            }
            let idx = edit_states.len();
            edit_states.push(EditState { kind: EditKind::Join { span: l }, pos });
            let total_ms: f64 = events[pos..pos + l].iter().map(|e| e.raw_ioi_ms).sum();
            expected.push(ExpectedEmission {
                pitch_class: events[pos].pitch_class,
                rhythm: RhythmExpectation::Bin(quantize_ioi(total_ms, &cfg)?),
            });
            chain_next.push(None);
            entry_at[pos].push((idx, join_class(l)));
        }

        for m in 2..=m_max {
            let first = edit_states.len();
            for step in 1..=m {
                let idx = edit_states.len();
                edit_states.push(EditState { kind: EditKind::Elab { span: m, step }, pos });
                expected.push(ExpectedEmission {
                    pitch_class: events[pos].pitch_class,
                    rhythm: if step < m {
                        RhythmExpectation::ChainInterior
                    } else {
                        RhythmExpectation::ChainFinal {
                            target_bin: events[pos].rhythm_bin,
                            span: m,
                        }
                    },
                });
                chain_next.push(if step < m { Some(idx + 1) } else { None });
            }
            entry_at[pos].push((first, elab_class(m)));
        }
    }

    let mut successors = Vec::with_capacity(edit_states.len());
    for (idx, state) in edit_states.iter().enumerate() {
        if let Some(next) = chain_next[idx] {
            successors.push(vec![EditSucc { to: next, class: None }]);
            continue;
        }
        // A choice state: advance to the entry states of the next position.
        let next_pos = match state.kind {
            EditKind::Same | EditKind::Elab { .. } => state.pos + 1,
            EditKind::Join { span } => state.pos + span,
        };
        if next_pos >= n {
            successors.push(Vec::new());
        } else {
            successors.push(
                entry_at[next_pos]
                    .iter()
                    .map(|&(to, class)| EditSucc { to, class: Some(class) })
                    .collect(),
            );
        }
    }

    let has_chain_interior = expected
        .iter()
        .any(|e| matches!(e.rhythm, RhythmExpectation::ChainInterior));

    Ok(TargetModel {
        events: events.to_vec(),
        cfg,
        l_max,
        m_max,
        start_index,
        edit_states,
        successors,
        expected,
        entry_at,
        has_chain_interior,
    })
}

impl TargetModel {
    pub fn num_edit_states(&self) -> usize {
        self.edit_states.len()
    }

    /// Total hidden-state count: edit states times 12 transpositions times
    /// 9 tempi.
    pub fn num_states(&self) -> usize {
        self.edit_states.len() * NUM_TRANSPOSITIONS * NUM_TEMPI
    }

    pub fn target_len(&self) -> usize {
        self.events.len()
    }

    pub fn edit_state(&self, idx: usize) -> EditState {
        self.edit_states[idx]
    }

    pub fn edit_states(&self) -> &[EditState] {
        &self.edit_states
    }

    pub fn successors(&self, idx: usize) -> &[EditSucc] {
        &self.successors[idx]
    }

    pub fn expected(&self, idx: usize) -> ExpectedEmission {
        self.expected[idx]
    }

    /// Entry states anchored at a target position, with their edit
    /// classification indices.
    pub fn entry_states_at(&self, pos: usize) -> &[(usize, usize)] {
        &self.entry_at[pos]
    }

    pub fn has_chain_interior(&self) -> bool {
        self.has_chain_interior
    }

    /// Flat hidden-state index of (edit state, transposition index, tempo
    /// index).
    pub fn state_index(&self, edit_idx: usize, k_idx: usize, s_idx: usize) -> usize {
        (edit_idx * NUM_TRANSPOSITIONS + k_idx) * NUM_TEMPI + s_idx
    }

    pub fn hidden_state(&self, state_idx: usize) -> HiddenState {
        let s_idx = state_idx % NUM_TEMPI;
        let k_idx = (state_idx / NUM_TEMPI) % NUM_TRANSPOSITIONS;
        let edit_idx = state_idx / (NUM_TEMPI * NUM_TRANSPOSITIONS);
        HiddenState {
            edit: self.edit_states[edit_idx],
            transposition: transposition_value(k_idx) as i8,
            tempo: tempo_value(s_idx) as i8,
        }
    }

    /// Locate the flat index of an edit state, if it exists in the model.
    pub fn find_edit_state(&self, kind: EditKind, pos: usize) -> Option<usize> {
        self.edit_states.iter().position(|s| s.kind == kind && s.pos == pos)
    }

    /// Renormalization mass of the edit distribution over the entry classes
    /// available at a position (near the target end some joins do not fit,
    /// and the remaining mass is renormalized so rows stay stochastic).
    pub fn entry_mass_at(&self, pos: usize, params: &ErrorModelParams, ctx: usize) -> f64 {
        self.entry_at[pos].iter().map(|&(_, class)| params.edit[ctx][class]).sum()
    }
}

/// Edit-type factor of a transition between two edit states: zero where the
/// topology forbids the move, one along elaboration-chain interiors, and
/// otherwise the (boundary-renormalized) tied probability of the
/// destination's classification.
pub fn edit_transition_prob(
    params: &ErrorModelParams,
    model: &TargetModel,
    from: usize,
    to: usize,
) -> f64 {
    let ctx = params.contexts.context_of(model.edit_states[from].pos);
    for succ in &model.successors[from] {
        if succ.to == to {
            return match succ.class {
                None => 1.0,
                Some(class) => {
                    let dest_pos = model.edit_states[to].pos;
                    let mass = model.entry_mass_at(dest_pos, params, ctx);
                    if mass > 0.0 {
                        params.edit[ctx][class] / mass
                    } else {
                        // Every classification available here carries zero
                        // mass; the position is unreachable.
                        0.0
                    }
                }
            };
        }
    }
    0.0
}

/// Modulation factor: tied probability of the transposition delta (all 12
/// destinations always exist, so no renormalization is needed).
pub fn modulation_prob(params: &ErrorModelParams, ctx: usize, k_from: i8, k_to: i8) -> f64 {
    params.modulation[ctx][pitch_delta_index(k_to as i32 - k_from as i32)]
}

/// Tempo-change factor. Deltas that would leave `S` are zeroed and the
/// remaining mass renormalized per source tempo, keeping rows stochastic.
pub fn tempo_transition_prob(params: &ErrorModelParams, ctx: usize, s_from: i8, s_to: i8) -> f64 {
    let delta = s_to as i32 - s_from as i32;
    let Some(idx) = tempo_delta_index(delta) else { return 0.0 };
    if !(TEMPO_MIN..=TEMPO_MAX).contains(&(s_to as i32)) {
        return 0.0;
    }
    let mass = tempo_window_mass(params, ctx, s_from);
    if mass > 0.0 {
        params.tempo_change[ctx][idx] / mass
    } else {
        0.0
    }
}

/// Mass of the tempo-change table reachable from a source tempo.
pub fn tempo_window_mass(params: &ErrorModelParams, ctx: usize, s_from: i8) -> f64 {
    let lo = (TEMPO_MIN - s_from as i32).max(TEMPO_MIN);
    let hi = (TEMPO_MAX - s_from as i32).min(TEMPO_MAX);
    (lo..=hi)
        .map(|d| params.tempo_change[ctx][tempo_delta_index(d).unwrap()])
        .sum()
}

/// Full transition probability: product of the edit, modulation, and
/// tempo-change factors.
pub fn transition_prob(
    params: &ErrorModelParams,
    model: &TargetModel,
    from: &HiddenState,
    to: &HiddenState,
) -> f64 {
    let Some(from_idx) = model.find_edit_state(from.edit.kind, from.edit.pos) else {
        return 0.0;
    };
    let Some(to_idx) = model.find_edit_state(to.edit.kind, to.edit.pos) else {
        return 0.0;
    };
    let ctx_e = params.contexts.context_of(from.edit.pos);
    edit_transition_prob(params, model, from_idx, to_idx)
        * modulation_prob(params, ctx_e, from.transposition, to.transposition)
        * tempo_transition_prob(params, ctx_e, from.tempo, to.tempo)
}

/// Emission probability of an observation in a hidden state.
///
/// The pitch error is the observed pitch class against the state's expected
/// pitch shifted by the transposition, wrapped into `{-5, ..., +6}`. The
/// rhythm error is the observed bin against the expected bin shifted by the
/// tempo, clamped to the table support. For the final state of an
/// elaboration chain, `obs_rhythm_bin` must be the re-quantized sum of the
/// chain's raw query IOIs; chain interiors ignore it (factor 1).
pub fn emission_prob(
    params: &ErrorModelParams,
    model: &TargetModel,
    edit_idx: usize,
    transposition: i8,
    tempo: i8,
    obs_pitch_class: u8,
    obs_rhythm_bin: u8,
) -> f64 {
    let exp = model.expected[edit_idx];
    let ctx = params.contexts.context_of(model.edit_states[edit_idx].pos);
    let dp = obs_pitch_class as i32 - (exp.pitch_class as i32 + transposition as i32);
    let pitch = params.pitch_error[ctx][pitch_delta_index(dp)];
    let rhythm = match exp.rhythm {
        RhythmExpectation::ChainInterior => 1.0,
        RhythmExpectation::Bin(b) | RhythmExpectation::ChainFinal { target_bin: b, .. } => {
            let dr = obs_rhythm_bin as i32 - (b as i32 + tempo as i32);
            params.rhythm_error[ctx][rhythm_delta_index(dr, params.q)]
        }
    };
    pitch * rhythm
}

/// Sparse initial distribution for an alignment starting at `start_pos`:
/// `(edit state, transposition index, tempo index, probability)` for every
/// state with nonzero initial mass.
///
/// The edit part is tied to the edit transition probabilities (a start at a
/// position looks like an arrival there), the transposition part is uniform,
/// and the tempo part is a discrete normal with deviation
/// `init_tempo_sigma`.
pub fn initial_probs(
    params: &ErrorModelParams,
    model: &TargetModel,
    start_pos: usize,
) -> Result<Vec<(usize, usize, usize, f64)>> {
    if start_pos >= model.target_len() {
        return Err(Error::StartIndexOutOfRange {
            start: start_pos,
            len: model.target_len(),
        });
    }
    let ctx = params.contexts.context_of(start_pos);
    let mass = model.entry_mass_at(start_pos, params, ctx);
    if mass <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "no edit classification has mass at start position {start_pos}"
        )));
    }
    let tempo_dist = params.initial_tempo_dist();
    let k_prob = 1.0 / NUM_TRANSPOSITIONS as f64;
    let mut out = Vec::new();
    for &(edit_idx, class) in model.entry_states_at(start_pos) {
        let edit_prob = params.edit[ctx][class] / mass;
        for k_idx in 0..NUM_TRANSPOSITIONS {
            for (s_idx, &s_prob) in tempo_dist.iter().enumerate() {
                out.push((edit_idx, k_idx, s_idx, edit_prob * k_prob * s_prob));
            }
        }
    }
    Ok(out)
}

/// Initial probability of a single hidden state (zero off the start
/// family).
pub fn initial_prob(
    params: &ErrorModelParams,
    model: &TargetModel,
    state: &HiddenState,
    start_pos: usize,
) -> Result<f64> {
    let table = initial_probs(params, model, start_pos)?;
    let Some(edit_idx) = model.find_edit_state(state.edit.kind, state.edit.pos) else {
        return Ok(0.0);
    };
    let k_idx = (state.transposition as i32 - TRANS_MIN) as usize;
    let s_idx = (state.tempo as i32 - TEMPO_MIN) as usize;
    Ok(table
        .iter()
        .find(|&&(e, k, s, _)| e == edit_idx && k == k_idx && s == s_idx)
        .map(|&(_, _, _, p)| p)
        .unwrap_or(0.0))
}

/// Maximum per-step factor of any path: the product of the maximum
/// transition probability and the maximum emission probability, used as the
/// admissible completion bound for branch-and-bound pruning. Never exceeds
/// 1.
pub fn max_step_factor(params: &ErrorModelParams, model: &TargetModel) -> f64 {
    let ctx = 0;
    let mut max_edit: f64 = 0.0;
    for (idx, succs) in model.successors.iter().enumerate() {
        for succ in succs {
            max_edit = max_edit.max(edit_transition_prob(params, model, idx, succ.to));
        }
    }
    if model.num_edit_states() > 0 && max_edit == 0.0 {
        // Single-event targets have no transitions at all; only the
        // emission factor bounds a (length-1) path.
        max_edit = 1.0;
    }
    let max_k = params.modulation[ctx].iter().cloned().fold(0.0, f64::max);
    let mut max_s: f64 = 0.0;
    for s_from in TEMPO_MIN..=TEMPO_MAX {
        let mass = tempo_window_mass(params, ctx, s_from as i8);
        if mass <= 0.0 {
            continue;
        }
        let lo = (TEMPO_MIN - s_from).max(TEMPO_MIN);
        let hi = (TEMPO_MAX - s_from).min(TEMPO_MAX);
        for d in lo..=hi {
            max_s = max_s.max(params.tempo_change[ctx][tempo_delta_index(d).unwrap()] / mass);
        }
    }
    let max_p = params.pitch_error[ctx].iter().cloned().fold(0.0, f64::max);
    let max_r = if model.has_chain_interior {
        // Chain interiors emit no rhythm factor, so 1 is the only
        // admissible bound for the rhythm component.
        1.0
    } else {
        params.rhythm_error[ctx].iter().cloned().fold(0.0, f64::max)
    };
    (max_edit * max_k * max_s * max_p * max_r).min(1.0)
}
