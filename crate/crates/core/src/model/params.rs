//! Tied probability tables of the error model.
//!
//! Five distributions drive the model, each defined per *context* (an
//! equivalence class of states sharing one table): edit type, modulation,
//! tempo change, pitch error, and rhythm error. The default configuration
//! uses a single global context per component; the context scheme is a
//! pluggable hook for finer tying.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::files;

/// Number of transposition values; `K = {-5, ..., +6}`.
pub const NUM_TRANSPOSITIONS: usize = 12;
/// Number of tempo values; `S = {-4, ..., +4}`.
pub const NUM_TEMPI: usize = 9;
/// Smallest transposition / modulation / pitch-error delta.
pub const TRANS_MIN: i32 = -5;
/// Largest transposition / modulation / pitch-error delta.
pub const TRANS_MAX: i32 = 6;
/// Smallest tempo value / tempo-change delta.
pub const TEMPO_MIN: i32 = -4;
/// Largest tempo value / tempo-change delta.
pub const TEMPO_MAX: i32 = 4;

/// Wrap a signed pitch-class difference into `{-5, ..., +6}`.
pub fn wrap_pitch_delta(d: i32) -> i32 {
    let r = d.rem_euclid(12);
    if r > 6 {
        r - 12
    } else {
        r
    }
}

/// Table index of a modulation / pitch-error delta (wraps mod 12).
pub fn pitch_delta_index(d: i32) -> usize {
    (wrap_pitch_delta(d) - TRANS_MIN) as usize
}

/// Table index of a tempo-change delta, or `None` outside `{-4, ..., +4}`.
pub fn tempo_delta_index(d: i32) -> Option<usize> {
    if (TEMPO_MIN..=TEMPO_MAX).contains(&d) {
        Some((d - TEMPO_MIN) as usize)
    } else {
        None
    }
}

/// Table index of a rhythm-error delta; values beyond `+-(q-1)` clamp to the
/// extreme bins.
pub fn rhythm_delta_index(d: i32, q: usize) -> usize {
    let lim = (q - 1) as i32;
    (d.clamp(-lim, lim) + lim) as usize
}

/// Transposition value for a table index (`0 -> -5`, ..., `11 -> +6`).
pub fn transposition_value(idx: usize) -> i32 {
    idx as i32 + TRANS_MIN
}

/// Tempo value for a table index (`0 -> -4`, ..., `8 -> +4`).
pub fn tempo_value(idx: usize) -> i32 {
    idx as i32 + TEMPO_MIN
}

/// Normal density evaluated at the integers of `[min, max]`, normalized to
/// sum 1 over that range.
pub fn discrete_normal(min: i32, max: i32, mean: f64, sigma: f64) -> Vec<f64> {
    assert!(sigma > 0.0 && min <= max);
    let mut v: Vec<f64> = (min..=max)
        .map(|x| {
            let z = (x as f64 - mean) / sigma;
            (-0.5 * z * z).exp()
        })
        .collect();
    let total: f64 = v.iter().sum();
    for p in &mut v {
        *p /= total;
    }
    v
}

/// Distribution with all mass on the value `at` of `[min, max]`.
pub fn impulse(min: i32, max: i32, at: i32) -> Vec<f64> {
    assert!((min..=max).contains(&at));
    let mut v = vec![0.0; (max - min + 1) as usize];
    v[(at - min) as usize] = 1.0;
    v
}

fn check_distribution(name: &str, dist: &[f64], tol: f64) -> Result<()> {
    if dist.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "{name} distribution contains a negative or non-finite entry"
        )));
    }
    let sum: f64 = dist.iter().sum();
    if (sum - 1.0).abs() > tol {
        return Err(Error::InvalidDistribution { name: name.to_string(), sum });
    }
    Ok(())
}

fn renormalize(dist: &mut [f64]) {
    let sum: f64 = dist.iter().sum();
    for p in dist.iter_mut() {
        *p /= sum;
    }
}

/// Assignment of states and transitions to tied-table contexts.
///
/// Only the global scheme (one context per component) is implemented; the
/// enum is the extension point for duration- or interval-aware contexts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ContextScheme {
    #[default]
    Global,
}

impl ContextScheme {
    /// Context id for any state under this scheme.
    pub fn context_of(&self, _target_position: usize) -> usize {
        match self {
            ContextScheme::Global => 0,
        }
    }

    pub fn num_contexts(&self) -> usize {
        match self {
            ContextScheme::Global => 1,
        }
    }
}

/// Model configuration selecting which error classes are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelVariant {
    /// Local and cumulative error both modelled.
    Full,
    /// Full model with modulation limited to one semitone and tempo change
    /// to two quantization units (roughly +-40%).
    Restricted,
    /// Only local error: modulation and tempo change pinned to "no change".
    Local,
    /// Only cumulative error: pitch and rhythm error pinned to "no error".
    Cumulative,
}

impl std::str::FromStr for ModelVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(ModelVariant::Full),
            "restricted" => Ok(ModelVariant::Restricted),
            "local" => Ok(ModelVariant::Local),
            "cumulative" => Ok(ModelVariant::Cumulative),
            other => Err(Error::InvalidParameter(format!("unknown variant '{other}'"))),
        }
    }
}

impl std::fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ModelVariant::Full => "full",
            ModelVariant::Restricted => "restricted",
            ModelVariant::Local => "local",
            ModelVariant::Cumulative => "cumulative",
        };
        f.write_str(s)
    }
}

/// The trainable components of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Edit,
    Modulation,
    TempoChange,
    PitchError,
    RhythmError,
}

pub const ALL_COMPONENTS: [Component; 5] = [
    Component::Edit,
    Component::Modulation,
    Component::TempoChange,
    Component::PitchError,
    Component::RhythmError,
];

/// The tied parameter tables.
///
/// Edit tables are laid out `[P_Same, P_Join_2, ..., P_Join_L, P_Elab_2,
/// ..., P_Elab_M]`; modulation and pitch-error tables are indexed by delta
/// `-5..=+6`, tempo-change by `-4..=+4`, rhythm-error by `-(q-1)..=+(q-1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorModelParams {
    pub edit: Vec<Vec<f64>>,
    pub modulation: Vec<Vec<f64>>,
    pub tempo_change: Vec<Vec<f64>>,
    pub pitch_error: Vec<Vec<f64>>,
    pub rhythm_error: Vec<Vec<f64>>,
    /// Deviation of the discrete normal over initial tempo.
    pub init_tempo_sigma: f64,
    /// Maximum join length L.
    pub l_max: usize,
    /// Maximum elaboration length M.
    pub m_max: usize,
    /// Number of IOI quantization bins.
    pub q: usize,
    pub contexts: ContextScheme,
}

impl Default for ErrorModelParams {
    fn default() -> Self {
        Self::default_with(2, 2, 29)
    }
}

impl ErrorModelParams {
    /// Starting parameters: normal distributions over the error and change
    /// deltas centered at zero, and the stock edit distribution.
    pub fn default_with(l_max: usize, m_max: usize, q: usize) -> Self {
        assert!(l_max >= 1 && m_max >= 1 && q >= 2);
        let mut edit = vec![0.0; l_max + m_max - 1];
        if l_max == 1 && m_max == 1 {
            edit[0] = 1.0;
        } else {
            edit[0] = 0.95;
            for l in 2..=l_max {
                edit[l - 1] = 0.03 / (l_max - 1) as f64;
            }
            for m in 2..=m_max {
                edit[(l_max - 1) + (m - 1)] = 0.02 / (m_max - 1) as f64;
            }
            renormalize(&mut edit);
        }
        let lim = (q - 1) as i32;
        Self {
            edit: vec![edit],
            modulation: vec![discrete_normal(TRANS_MIN, TRANS_MAX, 0.0, 1.0)],
            tempo_change: vec![discrete_normal(TEMPO_MIN, TEMPO_MAX, 0.0, 1.0)],
            pitch_error: vec![discrete_normal(TRANS_MIN, TRANS_MAX, 0.0, 1.0)],
            rhythm_error: vec![discrete_normal(-lim, lim, 0.0, 1.0)],
            init_tempo_sigma: 1.5,
            l_max,
            m_max,
            q,
            contexts: ContextScheme::Global,
        }
    }

    /// Number of edit classifications: Same, Join^2..L, Elab^2..M.
    pub fn num_edit_classes(&self) -> usize {
        self.l_max + self.m_max - 1
    }

    /// Table index of the Same classification.
    pub fn same_class(&self) -> usize {
        0
    }

    /// Table index of an order-`l` join classification.
    pub fn join_class(&self, l: usize) -> usize {
        debug_assert!((2..=self.l_max).contains(&l));
        l - 1
    }

    /// Table index of an order-`m` elaboration classification.
    pub fn elab_class(&self, m: usize) -> usize {
        debug_assert!((2..=self.m_max).contains(&m));
        (self.l_max - 1) + (m - 1)
    }

    /// Length of the rhythm-error table.
    pub fn rhythm_table_len(&self) -> usize {
        2 * self.q - 1
    }

    /// Normalized initial tempo distribution over `S`.
    pub fn initial_tempo_dist(&self) -> Vec<f64> {
        discrete_normal(TEMPO_MIN, TEMPO_MAX, 0.0, self.init_tempo_sigma)
    }

    pub fn validate(&self, tol: f64) -> Result<()> {
        if self.l_max < 1 || self.m_max < 1 {
            return Err(Error::InvalidParameter("L and M must be >= 1".into()));
        }
        if self.q < 2 {
            return Err(Error::InvalidParameter("q must be >= 2".into()));
        }
        if !(self.init_tempo_sigma > 0.0) {
            return Err(Error::InvalidParameter("init_tempo_sigma must be > 0".into()));
        }
        let n = self.contexts.num_contexts();
        let expect = [
            ("edit", &self.edit, self.num_edit_classes()),
            ("modulation", &self.modulation, NUM_TRANSPOSITIONS),
            ("tempo_change", &self.tempo_change, NUM_TEMPI),
            ("pitch_error", &self.pitch_error, NUM_TRANSPOSITIONS),
            ("rhythm_error", &self.rhythm_error, self.rhythm_table_len()),
        ];
        for (name, tables, len) in expect {
            if tables.len() != n {
                return Err(Error::InvalidParameter(format!(
                    "{name}: {} context tables, scheme expects {n}",
                    tables.len()
                )));
            }
            for dist in tables.iter() {
                if dist.len() != len {
                    return Err(Error::InvalidParameter(format!(
                        "{name} table has {} entries, expected {len}",
                        dist.len()
                    )));
                }
                check_distribution(name, dist, tol)?;
            }
        }
        Ok(())
    }

    pub fn component_tables(&self, c: Component) -> &Vec<Vec<f64>> {
        match c {
            Component::Edit => &self.edit,
            Component::Modulation => &self.modulation,
            Component::TempoChange => &self.tempo_change,
            Component::PitchError => &self.pitch_error,
            Component::RhythmError => &self.rhythm_error,
        }
    }

    pub fn component_tables_mut(&mut self, c: Component) -> &mut Vec<Vec<f64>> {
        match c {
            Component::Edit => &mut self.edit,
            Component::Modulation => &mut self.modulation,
            Component::TempoChange => &mut self.tempo_change,
            Component::PitchError => &mut self.pitch_error,
            Component::RhythmError => &mut self.rhythm_error,
        }
    }

    /// Transform these parameters into the given model variant.
    ///
    /// `Local` pins modulation and tempo change to impulses at zero,
    /// `Cumulative` pins pitch and rhythm error, and `Restricted` zeroes
    /// modulation beyond one semitone and tempo change beyond two bins,
    /// renormalizing the remainder.
    pub fn apply_variant(&self, variant: ModelVariant) -> Self {
        let mut out = self.clone();
        match variant {
            ModelVariant::Full => {}
            ModelVariant::Local => {
                for t in &mut out.modulation {
                    *t = impulse(TRANS_MIN, TRANS_MAX, 0);
                }
                for t in &mut out.tempo_change {
                    *t = impulse(TEMPO_MIN, TEMPO_MAX, 0);
                }
            }
            ModelVariant::Cumulative => {
                let lim = (self.q - 1) as i32;
                for t in &mut out.pitch_error {
                    *t = impulse(TRANS_MIN, TRANS_MAX, 0);
                }
                for t in &mut out.rhythm_error {
                    *t = impulse(-lim, lim, 0);
                }
            }
            ModelVariant::Restricted => {
                for t in &mut out.modulation {
                    mask_outside(t, TRANS_MIN, RESTRICTED_MODULATION_LIMIT);
                }
                for t in &mut out.tempo_change {
                    mask_outside(t, TEMPO_MIN, RESTRICTED_TEMPO_LIMIT);
                }
            }
        }
        out
    }

    /// Whether training may re-estimate a component under a variant.
    pub fn component_trainable(variant: ModelVariant, c: Component) -> bool {
        match variant {
            ModelVariant::Full | ModelVariant::Restricted => true,
            ModelVariant::Local => {
                !matches!(c, Component::Modulation | Component::TempoChange)
            }
            ModelVariant::Cumulative => {
                !matches!(c, Component::PitchError | Component::RhythmError)
            }
        }
    }

    /// Bins a variant keeps frozen at zero during training, as a boolean
    /// mask over the component's table (`true` = bin participates).
    pub fn support_mask(&self, variant: ModelVariant, c: Component) -> Vec<bool> {
        let len = match c {
            Component::Edit => self.num_edit_classes(),
            Component::Modulation | Component::PitchError => NUM_TRANSPOSITIONS,
            Component::TempoChange => NUM_TEMPI,
            Component::RhythmError => self.rhythm_table_len(),
        };
        let mut mask = vec![true; len];
        if variant == ModelVariant::Restricted {
            match c {
                Component::Modulation => {
                    for (i, m) in mask.iter_mut().enumerate() {
                        *m = transposition_value(i).abs() <= RESTRICTED_MODULATION_LIMIT;
                    }
                }
                Component::TempoChange => {
                    for (i, m) in mask.iter_mut().enumerate() {
                        *m = tempo_value(i).abs() <= RESTRICTED_TEMPO_LIMIT;
                    }
                }
                _ => {}
            }
        }
        mask
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let file: ParamsFile = files::read_json(path)?;
        file.into_params()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = ParamsFile::from_params(self)?;
        files::write_json_atomic(path, &file)
    }
}

/// Modulation support of the restricted variant, in semitones.
pub const RESTRICTED_MODULATION_LIMIT: i32 = 1;
/// Tempo-change support of the restricted variant, in quantization units
/// (two units is a factor of 2^(1/2), roughly +-40%).
pub const RESTRICTED_TEMPO_LIMIT: i32 = 2;

fn mask_outside(dist: &mut [f64], min: i32, limit: i32) {
    for (i, p) in dist.iter_mut().enumerate() {
        if (i as i32 + min).abs() > limit {
            *p = 0.0;
        }
    }
    renormalize(dist);
}

/// On-disk parameter schema: one table per component (the global-context
/// layout), all distributions validated to sum to 1 within 1e-6 on load.
#[derive(Debug, Serialize, Deserialize)]
pub struct ParamsFile {
    pub edit: Vec<f64>,
    pub modulation: Vec<f64>,
    pub tempo_change: Vec<f64>,
    pub pitch_error: Vec<f64>,
    pub rhythm_error: Vec<f64>,
    pub init_tempo_sigma: f64,
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub q: usize,
}

impl ParamsFile {
    pub fn from_params(p: &ErrorModelParams) -> Result<Self> {
        if p.contexts != ContextScheme::Global {
            return Err(Error::InvalidParameter(
                "only global-context parameters have a file representation".into(),
            ));
        }
        Ok(Self {
            edit: p.edit[0].clone(),
            modulation: p.modulation[0].clone(),
            tempo_change: p.tempo_change[0].clone(),
            pitch_error: p.pitch_error[0].clone(),
            rhythm_error: p.rhythm_error[0].clone(),
            init_tempo_sigma: p.init_tempo_sigma,
            l: p.l_max,
            m: p.m_max,
            q: p.q,
        })
    }

    pub fn into_params(self) -> Result<ErrorModelParams> {
        let mut params = ErrorModelParams {
            edit: vec![self.edit],
            modulation: vec![self.modulation],
            tempo_change: vec![self.tempo_change],
            pitch_error: vec![self.pitch_error],
            rhythm_error: vec![self.rhythm_error],
            init_tempo_sigma: self.init_tempo_sigma,
            l_max: self.l,
            m_max: self.m,
            q: self.q,
            contexts: ContextScheme::Global,
        };
        params.validate(1e-6)?;
        // Tables may carry up to 1e-6 of rounding from serialization; snap
        // them back to exact unit mass.
        for c in ALL_COMPONENTS {
            for dist in params.component_tables_mut(c) {
                renormalize(dist);
            }
        }
        Ok(params)
    }
}
