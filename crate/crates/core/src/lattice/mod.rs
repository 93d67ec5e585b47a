//! Dynamic-programming inference over a (target model, query) pair.
//!
//! The forward pass uses per-timestep normalization scaling (the
//! log-likelihood is the sum of log scale factors), Viterbi runs in log
//! space, and branch-and-bound pruning rejects a partial path once even a
//! best-case completion cannot reach the current floor.
//!
//! Three forward implementations coexist:
//!
//! * [`forward`] — the production kernel, which folds the transposition and
//!   tempo updates into two small matrix stages per source edit state;
//! * [`forward_cached`] — the per-transition form that caches the shared
//!   (edit x modulation x pitch emission) product across the inner tempo
//!   loop;
//! * [`forward_uncached`] — the same loops with no shared-factor caching.
//!
//! All three compute the same sums and are cross-checked in tests; the
//! cached and uncached forms also carry the operation counters used by the
//! complexity tests.

pub mod generic;

use crate::error::{Error, Result};
use crate::events::{quantize_ioi, QuantizationConfig, QuantizedEvent};
use crate::model::{
    edit_transition_prob, pitch_delta_index, rhythm_delta_index, tempo_transition_prob,
    tempo_value, transposition_value, ErrorModelParams, HiddenState, RhythmExpectation,
    TargetModel, NUM_TEMPI, NUM_TRANSPOSITIONS,
};

/// States per edit state: 12 transpositions times 9 tempi.
pub const CLUSTER: usize = NUM_TRANSPOSITIONS * NUM_TEMPI;

/// A query prepared for scoring: quantized events plus, for every
/// elaboration span, the re-quantized running sums of raw IOIs that the
/// final chain states compare against.
#[derive(Debug, Clone)]
pub struct QueryLattice {
    pub events: Vec<QuantizedEvent>,
    /// `agg[m - 2][t]`: quantized sum of raw IOIs of query notes
    /// `t-m+1 ..= t`; only defined for `t >= m - 1`.
    agg: Vec<Vec<u8>>,
}

impl QueryLattice {
    pub fn new(
        events: &[QuantizedEvent],
        cfg: &QuantizationConfig,
        m_max: usize,
    ) -> Result<Self> {
        if events.is_empty() {
            return Err(Error::EmptySequence);
        }
        let mut agg = Vec::new();
        for m in 2..=m_max {
            let mut row = vec![0u8; events.len()];
            for t in (m - 1)..events.len() {
                let total: f64 = events[t + 1 - m..=t].iter().map(|e| e.raw_ioi_ms).sum();
                row[t] = quantize_ioi(total, cfg)?;
            }
            agg.push(row);
        }
        Ok(Self { events: events.to_vec(), agg })
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Aggregated rhythm bin for a chain of `span` notes ending at `t`, or
    /// `None` when the chain cannot fit before `t`.
    pub fn agg_bin(&self, span: usize, t: usize) -> Option<u8> {
        if t + 1 >= span {
            Some(self.agg[span - 2][t])
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Succ {
    pub(crate) to: u32,
    /// Edit factor (boundary-renormalized; 1 on chain interiors).
    pub(crate) a_e: f64,
    pub(crate) log_a_e: f64,
    /// Classification index for entry transitions, `u32::MAX` on chains.
    pub(crate) class: u32,
}

pub(crate) const CHAIN: u32 = u32::MAX;

/// Precomputed probability tables binding one target model to one parameter
/// set. Immutable once built; any number of scoring passes may share it.
#[derive(Debug, Clone)]
pub struct ScoringContext<'a> {
    pub model: &'a TargetModel,
    pub params: &'a ErrorModelParams,
    pub(crate) succ: Vec<Vec<Succ>>,
    /// Modulation factor by (source transposition index, destination index).
    pub(crate) pk_pair: [[f64; NUM_TRANSPOSITIONS]; NUM_TRANSPOSITIONS],
    lpk_pair: [[f64; NUM_TRANSPOSITIONS]; NUM_TRANSPOSITIONS],
    /// Tempo factor by (source tempo index, destination index), boundary
    /// renormalized.
    pub(crate) a_s: [[f64; NUM_TEMPI]; NUM_TEMPI],
    la_s: [[f64; NUM_TEMPI]; NUM_TEMPI],
    pub(crate) pitch_tab: [f64; NUM_TRANSPOSITIONS],
    l_pitch_tab: [f64; NUM_TRANSPOSITIONS],
    pub(crate) rhythm_tab: Vec<f64>,
    l_rhythm_tab: Vec<f64>,
    init_tempo: [f64; NUM_TEMPI],
    l_init_tempo: [f64; NUM_TEMPI],
    max_step_factor: f64,
}

impl<'a> ScoringContext<'a> {
    pub fn new(model: &'a TargetModel, params: &'a ErrorModelParams) -> Result<Self> {
        params.validate(1e-6)?;
        if params.l_max != model.l_max || params.m_max != model.m_max {
            return Err(Error::InvalidParameter(format!(
                "parameter orders L={}, M={} do not match model L={}, M={}",
                params.l_max, params.m_max, model.l_max, model.m_max
            )));
        }
        if params.q != model.cfg.q {
            return Err(Error::InvalidParameter(format!(
                "parameter q={} does not match model q={}",
                params.q, model.cfg.q
            )));
        }
        let succ: Vec<Vec<Succ>> = (0..model.num_edit_states())
            .map(|x| {
                model
                    .successors(x)
                    .iter()
                    .map(|s| {
                        let a_e = edit_transition_prob(params, model, x, s.to);
                        Succ {
                            to: s.to as u32,
                            a_e,
                            log_a_e: a_e.ln(),
                            class: s.class.map_or(CHAIN, |c| c as u32),
                        }
                    })
                    .collect()
            })
            .collect();
        let mut pk_pair = [[0.0; NUM_TRANSPOSITIONS]; NUM_TRANSPOSITIONS];
        let mut lpk_pair = [[0.0; NUM_TRANSPOSITIONS]; NUM_TRANSPOSITIONS];
        for kx in 0..NUM_TRANSPOSITIONS {
            for ky in 0..NUM_TRANSPOSITIONS {
                let p = params.modulation[0][pitch_delta_index(ky as i32 - kx as i32)];
                pk_pair[kx][ky] = p;
                lpk_pair[kx][ky] = p.ln();
            }
        }
        let mut a_s = [[0.0; NUM_TEMPI]; NUM_TEMPI];
        let mut la_s = [[0.0; NUM_TEMPI]; NUM_TEMPI];
        for sx in 0..NUM_TEMPI {
            for sy in 0..NUM_TEMPI {
                let p = tempo_transition_prob(
                    params,
                    0,
                    tempo_value(sx) as i8,
                    tempo_value(sy) as i8,
                );
                a_s[sx][sy] = p;
                la_s[sx][sy] = p.ln();
            }
        }
        let mut pitch_tab = [0.0; NUM_TRANSPOSITIONS];
        let mut l_pitch_tab = [0.0; NUM_TRANSPOSITIONS];
        for (i, &p) in params.pitch_error[0].iter().enumerate() {
            pitch_tab[i] = p;
            l_pitch_tab[i] = p.ln();
        }
        let rhythm_tab = params.rhythm_error[0].clone();
        let l_rhythm_tab: Vec<f64> = rhythm_tab.iter().map(|p| p.ln()).collect();
        let mut init_tempo = [0.0; NUM_TEMPI];
        let mut l_init_tempo = [0.0; NUM_TEMPI];
        for (i, &p) in params.initial_tempo_dist().iter().enumerate() {
            init_tempo[i] = p;
            l_init_tempo[i] = p.ln();
        }
        let max_step_factor = crate::model::max_step_factor(params, model);
        Ok(Self {
            model,
            params,
            succ,
            pk_pair,
            lpk_pair,
            a_s,
            la_s,
            pitch_tab,
            l_pitch_tab,
            rhythm_tab,
            l_rhythm_tab,
            init_tempo,
            l_init_tempo,
            max_step_factor,
        })
    }

    pub fn num_states(&self) -> usize {
        self.model.num_edit_states() * CLUSTER
    }

    pub fn max_step_factor(&self) -> f64 {
        self.max_step_factor
    }

    pub fn prepare_query(&self, events: &[QuantizedEvent]) -> Result<QueryLattice> {
        QueryLattice::new(events, &self.model.cfg, self.model.m_max)
    }

    /// Transition probability between two flat hidden-state indices.
    pub fn transition_flat(&self, x: usize, y: usize) -> f64 {
        let (xe, xr) = (x / CLUSTER, x % CLUSTER);
        let (ye, yr) = (y / CLUSTER, y % CLUSTER);
        let a_e = self.succ[xe]
            .iter()
            .find(|s| s.to as usize == ye)
            .map_or(0.0, |s| s.a_e);
        a_e * self.pk_pair[xr / NUM_TEMPI][yr / NUM_TEMPI]
            * self.a_s[xr % NUM_TEMPI][yr % NUM_TEMPI]
    }

    /// Emission probability of observation `t` in a flat hidden-state index.
    pub fn emission_flat(&self, y: usize, qlat: &QueryLattice, t: usize) -> f64 {
        let (ye, yr) = (y / CLUSTER, y % CLUSTER);
        let (ky, sy) = (yr / NUM_TEMPI, yr % NUM_TEMPI);
        let exp = self.model.expected(ye);
        let dp = qlat.events[t].pitch_class as i32
            - (exp.pitch_class as i32 + transposition_value(ky));
        let bp = self.pitch_tab[pitch_delta_index(dp)];
        let br = match exp.rhythm {
            RhythmExpectation::ChainInterior => 1.0,
            RhythmExpectation::Bin(b) => {
                let dr = qlat.events[t].rhythm_bin as i32 - (b as i32 + tempo_value(sy));
                self.rhythm_tab[rhythm_delta_index(dr, self.params.q)]
            }
            RhythmExpectation::ChainFinal { target_bin, span } => match qlat.agg_bin(span, t)
            {
                Some(obs) => {
                    let dr = obs as i32 - (target_bin as i32 + tempo_value(sy));
                    self.rhythm_tab[rhythm_delta_index(dr, self.params.q)]
                }
                None => 0.0,
            },
        };
        bp * br
    }

    /// Fill the pitch-emission row of an edit state at one observation:
    /// `out[k_idx]` is the pitch factor under that transposition.
    pub(crate) fn pitch_row(
        &self,
        tab: &[f64; 12],
        edit_idx: usize,
        obs_pc: u8,
        out: &mut [f64; 12],
    ) {
        let exp_pc = self.model.expected(edit_idx).pitch_class as i32;
        // The pitch delta as a function of the transposition index walks the
        // table cyclically; resolve per index for clarity.
        for (k_idx, slot) in out.iter_mut().enumerate() {
            let dp = obs_pc as i32 - (exp_pc + transposition_value(k_idx));
            *slot = tab[pitch_delta_index(dp)];
        }
    }

    /// Fill the rhythm-emission row of an edit state at observation `t`:
    /// `out[s_idx]` is the rhythm factor under that tempo. Chain interiors
    /// contribute the neutral factor; final chain states compare the
    /// aggregated query duration.
    pub(crate) fn rhythm_row(
        &self,
        tab: &[f64],
        neutral: f64,
        zero: f64,
        qlat: &QueryLattice,
        edit_idx: usize,
        t: usize,
        out: &mut [f64; 9],
    ) {
        let q = self.params.q;
        match self.model.expected(edit_idx).rhythm {
            RhythmExpectation::ChainInterior => out.fill(neutral),
            RhythmExpectation::Bin(b) => {
                let obs = qlat.events[t].rhythm_bin as i32;
                for (s_idx, slot) in out.iter_mut().enumerate() {
                    let dr = obs - (b as i32 + tempo_value(s_idx));
                    *slot = tab[rhythm_delta_index(dr, q)];
                }
            }
            RhythmExpectation::ChainFinal { target_bin, span } => match qlat.agg_bin(span, t) {
                Some(obs) => {
                    for (s_idx, slot) in out.iter_mut().enumerate() {
                        let dr = obs as i32 - (target_bin as i32 + tempo_value(s_idx));
                        *slot = tab[rhythm_delta_index(dr, q)];
                    }
                }
                // A chain of this span cannot have started yet.
                None => out.fill(zero),
            },
        }
    }
}

/// Emission rows of every edit state at every observation, precomputed
/// once per (target, query) pair and shared across start alignments.
#[derive(Debug, Clone)]
pub struct EmissionTables {
    /// `[t][edit][k]` pitch factors, flattened.
    p: Vec<f64>,
    /// `[t][edit][s]` rhythm factors, flattened.
    r: Vec<f64>,
    n_edit: usize,
}

impl EmissionTables {
    pub fn linear(ctx: &ScoringContext, qlat: &QueryLattice) -> Self {
        Self::build(ctx, qlat, false)
    }

    pub fn log(ctx: &ScoringContext, qlat: &QueryLattice) -> Self {
        Self::build(ctx, qlat, true)
    }

    fn build(ctx: &ScoringContext, qlat: &QueryLattice, log: bool) -> Self {
        let n_edit = ctx.model.num_edit_states();
        let t_len = qlat.len();
        let mut p = vec![0.0; t_len * n_edit * NUM_TRANSPOSITIONS];
        let mut r = vec![0.0; t_len * n_edit * NUM_TEMPI];
        let (neutral, zero) = if log { (0.0, f64::NEG_INFINITY) } else { (1.0, 0.0) };
        for t in 0..t_len {
            let obs_pc = qlat.events[t].pitch_class;
            for e in 0..n_edit {
                let off_p = (t * n_edit + e) * NUM_TRANSPOSITIONS;
                let bp: &mut [f64; 12] =
                    (&mut p[off_p..off_p + NUM_TRANSPOSITIONS]).try_into().unwrap();
                if log {
                    ctx.pitch_row(&ctx.l_pitch_tab, e, obs_pc, bp);
                } else {
                    ctx.pitch_row(&ctx.pitch_tab, e, obs_pc, bp);
                }
                let off_r = (t * n_edit + e) * NUM_TEMPI;
                let br: &mut [f64; 9] =
                    (&mut r[off_r..off_r + NUM_TEMPI]).try_into().unwrap();
                let tab = if log { &ctx.l_rhythm_tab } else { &ctx.rhythm_tab };
                ctx.rhythm_row(tab, neutral, zero, qlat, e, t, br);
            }
        }
        Self { p, r, n_edit }
    }

    fn copy_step(&self, t: usize, ws: &mut Workspace) {
        let np = self.n_edit * NUM_TRANSPOSITIONS;
        let nr = self.n_edit * NUM_TEMPI;
        ws.be_p.copy_from_slice(&self.p[t * np..(t + 1) * np]);
        ws.be_r.copy_from_slice(&self.r[t * nr..(t + 1) * nr]);
    }
}

/// Reusable scratch buffers for the scoring kernels.
#[derive(Debug, Default)]
pub struct Workspace {
    cur: Vec<f64>,
    next: Vec<f64>,
    active: Vec<bool>,
    tmp: Vec<f64>,
    corr: Vec<f64>,
    /// Per edit state, the emission rows at the current observation.
    be_p: Vec<f64>,
    be_r: Vec<f64>,
    /// Argmax buffers for the Viterbi stages.
    arg_tmp: Vec<u8>,
    arg_corr: Vec<u8>,
}

impl Workspace {
    pub fn new() -> Self {
        Self::default()
    }

    fn resize(&mut self, n_edit: usize) {
        let n = n_edit * CLUSTER;
        self.cur.resize(n, 0.0);
        self.next.resize(n, 0.0);
        self.active.resize(n_edit, false);
        self.tmp.resize(CLUSTER, 0.0);
        self.corr.resize(CLUSTER, 0.0);
        self.be_p.resize(n_edit * NUM_TRANSPOSITIONS, 0.0);
        self.be_r.resize(n_edit * NUM_TEMPI, 0.0);
        self.arg_tmp.resize(CLUSTER, 0);
        self.arg_corr.resize(CLUSTER, 0);
    }
}

/// Scaled forward table. `alpha` rows are normalized to sum 1; the
/// [`ForwardTable::log_likelihood`] is the sum of log scale factors.
#[derive(Debug, Clone)]
pub struct ForwardTable {
    pub alpha: Vec<f64>,
    pub scale: Vec<f64>,
    pub num_states: usize,
    pub len: usize,
    pub log_likelihood: f64,
    /// Multiply-accumulate count of the induction, for complexity tests.
    pub inner_ops: u64,
}

impl ForwardTable {
    pub fn row(&self, t: usize) -> &[f64] {
        &self.alpha[t * self.num_states..(t + 1) * self.num_states]
    }
}

/// Backward table under the forward pass's scaling convention: the last row
/// is all ones, and earlier rows divide by the forward scale factor of the
/// following step, so `gamma_t(x) = alpha_t(x) * beta_t(x)` directly.
#[derive(Debug, Clone)]
pub struct BackwardTable {
    pub beta: Vec<f64>,
    pub num_states: usize,
    pub len: usize,
}

impl BackwardTable {
    pub fn row(&self, t: usize) -> &[f64] {
        &self.beta[t * self.num_states..(t + 1) * self.num_states]
    }
}

/// Most likely path and its log probability.
#[derive(Debug, Clone)]
pub struct ViterbiResult {
    pub log_prob: f64,
    pub path: Vec<HiddenState>,
}

/// Outcome of a bounded Viterbi run.
#[derive(Debug, Clone)]
pub enum BoundedViterbi {
    Result(ViterbiResult),
    /// No completion of any surviving path could reach the floor.
    Pruned,
}

fn initial_row(ctx: &ScoringContext, qlat: &QueryLattice, start_pos: usize, row: &mut [f64]) {
    row.fill(0.0);
    let model = ctx.model;
    let ctx_e = ctx.params.contexts.context_of(start_pos);
    let mass = model.entry_mass_at(start_pos, ctx.params, ctx_e);
    if mass <= 0.0 {
        return;
    }
    let k_prob = 1.0 / NUM_TRANSPOSITIONS as f64;
    let mut bp = [0.0; NUM_TRANSPOSITIONS];
    let mut br = [0.0; NUM_TEMPI];
    for &(edit_idx, class) in model.entry_states_at(start_pos) {
        let pi_e = ctx.params.edit[ctx_e][class] / mass;
        ctx.pitch_row(&ctx.pitch_tab, edit_idx, qlat.events[0].pitch_class, &mut bp);
        ctx.rhythm_row(&ctx.rhythm_tab, 1.0, 0.0, qlat, edit_idx, 0, &mut br);
        let base = edit_idx * CLUSTER;
        for (k_idx, &bpv) in bp.iter().enumerate() {
            let w = pi_e * k_prob * bpv;
            if w == 0.0 {
                continue;
            }
            for (s_idx, &brv) in br.iter().enumerate() {
                row[base + k_idx * NUM_TEMPI + s_idx] = w * ctx.init_tempo[s_idx] * brv;
            }
        }
    }
}

fn initial_row_pre(
    ctx: &ScoringContext,
    emis: &EmissionTables,
    start_pos: usize,
    row: &mut [f64],
) {
    row.fill(0.0);
    let model = ctx.model;
    let ctx_e = ctx.params.contexts.context_of(start_pos);
    let mass = model.entry_mass_at(start_pos, ctx.params, ctx_e);
    if mass <= 0.0 {
        return;
    }
    let k_prob = 1.0 / NUM_TRANSPOSITIONS as f64;
    for &(edit_idx, class) in model.entry_states_at(start_pos) {
        let pi_e = ctx.params.edit[ctx_e][class] / mass;
        let bp = &emis.p[edit_idx * NUM_TRANSPOSITIONS..(edit_idx + 1) * NUM_TRANSPOSITIONS];
        let br = &emis.r[edit_idx * NUM_TEMPI..(edit_idx + 1) * NUM_TEMPI];
        let base = edit_idx * CLUSTER;
        for (k_idx, &bpv) in bp.iter().enumerate() {
            let w = pi_e * k_prob * bpv;
            if w == 0.0 {
                continue;
            }
            for (s_idx, &brv) in br.iter().enumerate() {
                row[base + k_idx * NUM_TEMPI + s_idx] = w * ctx.init_tempo[s_idx] * brv;
            }
        }
    }
}

fn fill_emission_rows(ctx: &ScoringContext, qlat: &QueryLattice, t: usize, ws: &mut Workspace) {
    let obs_pc = qlat.events[t].pitch_class;
    for e in 0..ctx.model.num_edit_states() {
        let bp: &mut [f64; 12] =
            (&mut ws.be_p[e * NUM_TRANSPOSITIONS..(e + 1) * NUM_TRANSPOSITIONS])
                .try_into()
                .unwrap();
        ctx.pitch_row(&ctx.pitch_tab, e, obs_pc, bp);
        let br: &mut [f64; 9] =
            (&mut ws.be_r[e * NUM_TEMPI..(e + 1) * NUM_TEMPI]).try_into().unwrap();
        ctx.rhythm_row(&ctx.rhythm_tab, 1.0, 0.0, qlat, e, t, br);
    }
}

fn mark_active(ws: &mut Workspace, n_edit: usize) {
    for e in 0..n_edit {
        ws.active[e] = ws.cur[e * CLUSTER..(e + 1) * CLUSTER].iter().any(|&v| v != 0.0);
    }
}

/// One induction step of the production forward kernel. For each active
/// source edit state the tempo update is applied as a 9x9 stage and the
/// modulation update as a cyclic 12-point correlation; successors then only
/// scale by their edit factor and emission rows.
fn forward_step(ctx: &ScoringContext, ws: &mut Workspace, ops: &mut u64) {
    let n_edit = ctx.model.num_edit_states();
    ws.next.fill(0.0);
    for x_e in 0..n_edit {
        if !ws.active[x_e] || ctx.succ[x_e].is_empty() {
            continue;
        }
        let slice = &ws.cur[x_e * CLUSTER..(x_e + 1) * CLUSTER];
        // Stage 1: tempo update. tmp[kx][sy] = sum_sx slice[kx][sx] * a_s[sx][sy]
        for kx in 0..NUM_TRANSPOSITIONS {
            let src = &slice[kx * NUM_TEMPI..(kx + 1) * NUM_TEMPI];
            let dst = &mut ws.tmp[kx * NUM_TEMPI..(kx + 1) * NUM_TEMPI];
            dst.fill(0.0);
            for (sx, &a) in src.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let row = &ctx.a_s[sx];
                for (sy, d) in dst.iter_mut().enumerate() {
                    *d += a * row[sy];
                }
            }
        }
        // Stage 2: modulation update. corr[ky][sy] = sum_kx pk[kx][ky] * tmp[kx][sy]
        ws.corr.fill(0.0);
        for kx in 0..NUM_TRANSPOSITIONS {
            let src = &ws.tmp[kx * NUM_TEMPI..(kx + 1) * NUM_TEMPI];
            if src.iter().all(|&v| v == 0.0) {
                continue;
            }
            let prow = &ctx.pk_pair[kx];
            for ky in 0..NUM_TRANSPOSITIONS {
                let w = prow[ky];
                if w == 0.0 {
                    continue;
                }
                let dst = &mut ws.corr[ky * NUM_TEMPI..(ky + 1) * NUM_TEMPI];
                for (sy, d) in dst.iter_mut().enumerate() {
                    *d += w * src[sy];
                }
            }
        }
        *ops += (CLUSTER * (NUM_TEMPI + NUM_TRANSPOSITIONS)) as u64;
        // Apply per successor: edit factor and emission rows.
        for succ in &ctx.succ[x_e] {
            let y_e = succ.to as usize;
            let bp = &ws.be_p[y_e * NUM_TRANSPOSITIONS..(y_e + 1) * NUM_TRANSPOSITIONS];
            let br = &ws.be_r[y_e * NUM_TEMPI..(y_e + 1) * NUM_TEMPI];
            let dst = &mut ws.next[y_e * CLUSTER..(y_e + 1) * CLUSTER];
            for (ky, &bpv) in bp.iter().enumerate() {
                let f = succ.a_e * bpv;
                if f == 0.0 {
                    continue;
                }
                let c = &ws.corr[ky * NUM_TEMPI..(ky + 1) * NUM_TEMPI];
                let d = &mut dst[ky * NUM_TEMPI..(ky + 1) * NUM_TEMPI];
                for sy in 0..NUM_TEMPI {
                    d[sy] += f * br[sy] * c[sy];
                }
            }
            *ops += CLUSTER as u64;
        }
    }
}

fn scale_row(row: &mut [f64]) -> f64 {
    let c: f64 = row.iter().sum();
    if c > 0.0 {
        let inv = 1.0 / c;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    c
}

/// Scaled forward pass over the full table.
pub fn forward(
    ctx: &ScoringContext,
    query: &[QuantizedEvent],
    start_pos: usize,
) -> Result<ForwardTable> {
    let qlat = ctx.prepare_query(query)?;
    forward_lattice(ctx, &qlat, start_pos)
}

/// Scaled forward pass over a prepared query.
pub fn forward_lattice(
    ctx: &ScoringContext,
    qlat: &QueryLattice,
    start_pos: usize,
) -> Result<ForwardTable> {
    let n = ctx.num_states();
    let t_len = qlat.len();
    let mut ws = Workspace::new();
    ws.resize(ctx.model.num_edit_states());
    let mut alpha = vec![0.0; n * t_len];
    let mut scale = vec![0.0; t_len];
    let mut ll = 0.0;
    let mut ops = 0u64;
    initial_row(ctx, qlat, start_pos, &mut ws.cur);
    let mut dead = false;
    for t in 0..t_len {
        if t > 0 && !dead {
            fill_emission_rows(ctx, qlat, t, &mut ws);
            mark_active(&mut ws, ctx.model.num_edit_states());
            forward_step(ctx, &mut ws, &mut ops);
            std::mem::swap(&mut ws.cur, &mut ws.next);
        } else if t > 0 {
            ws.cur.fill(0.0);
        }
        let c = scale_row(&mut ws.cur);
        scale[t] = c;
        if c > 0.0 {
            ll += c.ln();
        } else {
            dead = true;
            ll = f64::NEG_INFINITY;
        }
        alpha[t * n..(t + 1) * n].copy_from_slice(&ws.cur);
    }
    Ok(ForwardTable { alpha, scale, num_states: n, len: t_len, log_likelihood: ll, inner_ops: ops })
}

/// Forward log-likelihood only, reusing caller scratch.
pub fn forward_log_likelihood(
    ctx: &ScoringContext,
    qlat: &QueryLattice,
    start_pos: usize,
    ws: &mut Workspace,
) -> f64 {
    let emis = EmissionTables::linear(ctx, qlat);
    forward_log_likelihood_pre(ctx, qlat, &emis, start_pos, ws)
}

/// Forward log-likelihood with precomputed emission tables. The hot path
/// for multi-start database ranking: the tables are built once per
/// (target, query) pair and shared across starts.
pub fn forward_log_likelihood_pre(
    ctx: &ScoringContext,
    qlat: &QueryLattice,
    emis: &EmissionTables,
    start_pos: usize,
    ws: &mut Workspace,
) -> f64 {
    ws.resize(ctx.model.num_edit_states());
    let t_len = qlat.len();
    let mut ll = 0.0;
    let mut ops = 0u64;
    initial_row_pre(ctx, emis, start_pos, &mut ws.cur);
    for t in 0..t_len {
        if t > 0 {
            emis.copy_step(t, ws);
            mark_active(ws, ctx.model.num_edit_states());
            forward_step(ctx, ws, &mut ops);
            std::mem::swap(&mut ws.cur, &mut ws.next);
        }
        let c = scale_row(&mut ws.cur);
        if c > 0.0 {
            ll += c.ln();
        } else {
            return f64::NEG_INFINITY;
        }
    }
    ll
}

/// Forward pass caching the shared (edit x modulation x pitch emission)
/// product across the inner tempo loop, iterating successor lists per
/// transition. Reference for the production kernel and basis of the
/// complexity accounting.
pub fn forward_cached(
    ctx: &ScoringContext,
    query: &[QuantizedEvent],
    start_pos: usize,
) -> Result<ForwardTable> {
    forward_pairwise(ctx, query, start_pos, true)
}

/// Forward pass with no shared-factor caching: the full transition and
/// emission product is recomputed for every state pair.
pub fn forward_uncached(
    ctx: &ScoringContext,
    query: &[QuantizedEvent],
    start_pos: usize,
) -> Result<ForwardTable> {
    forward_pairwise(ctx, query, start_pos, false)
}

fn forward_pairwise(
    ctx: &ScoringContext,
    query: &[QuantizedEvent],
    start_pos: usize,
    cache_shared: bool,
) -> Result<ForwardTable> {
    let qlat = ctx.prepare_query(query)?;
    let n = ctx.num_states();
    let n_edit = ctx.model.num_edit_states();
    let t_len = qlat.len();
    let mut ws = Workspace::new();
    ws.resize(n_edit);
    let mut alpha = vec![0.0; n * t_len];
    let mut scale = vec![0.0; t_len];
    let mut ll = 0.0;
    let mut ops = 0u64;
    initial_row(ctx, &qlat, start_pos, &mut ws.cur);
    let mut dead = false;
    for t in 0..t_len {
        if t > 0 && !dead {
            fill_emission_rows(ctx, &qlat, t, &mut ws);
            mark_active(&mut ws, n_edit);
            ws.next.fill(0.0);
            for x_e in 0..n_edit {
                if !ws.active[x_e] {
                    continue;
                }
                let base_x = x_e * CLUSTER;
                for succ in &ctx.succ[x_e] {
                    let y_e = succ.to as usize;
                    let base_y = y_e * CLUSTER;
                    for kx in 0..NUM_TRANSPOSITIONS {
                        for ky in 0..NUM_TRANSPOSITIONS {
                            if cache_shared {
                                // One shared product per (edit, modulation,
                                // pitch) combination.
                                let shared = succ.a_e
                                    * ctx.pk_pair[kx][ky]
                                    * ws.be_p[y_e * NUM_TRANSPOSITIONS + ky];
                                if shared == 0.0 {
                                    continue;
                                }
                                for sx in 0..NUM_TEMPI {
                                    let a = ws.cur[base_x + kx * NUM_TEMPI + sx];
                                    if a == 0.0 {
                                        continue;
                                    }
                                    let w = a * shared;
                                    for sy in 0..NUM_TEMPI {
                                        ws.next[base_y + ky * NUM_TEMPI + sy] += w
                                            * ctx.a_s[sx][sy]
                                            * ws.be_r[y_e * NUM_TEMPI + sy];
                                        ops += 1;
                                    }
                                }
                            } else {
                                for sx in 0..NUM_TEMPI {
                                    let a = ws.cur[base_x + kx * NUM_TEMPI + sx];
                                    if a == 0.0 {
                                        continue;
                                    }
                                    for sy in 0..NUM_TEMPI {
                                        ws.next[base_y + ky * NUM_TEMPI + sy] += a
                                            * succ.a_e
                                            * ctx.pk_pair[kx][ky]
                                            * ws.be_p[y_e * NUM_TRANSPOSITIONS + ky]
                                            * ctx.a_s[sx][sy]
                                            * ws.be_r[y_e * NUM_TEMPI + sy];
                                        ops += 1;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            std::mem::swap(&mut ws.cur, &mut ws.next);
        } else if t > 0 {
            ws.cur.fill(0.0);
        }
        let c = scale_row(&mut ws.cur);
        scale[t] = c;
        if c > 0.0 {
            ll += c.ln();
        } else {
            dead = true;
            ll = f64::NEG_INFINITY;
        }
        alpha[t * n..(t + 1) * n].copy_from_slice(&ws.cur);
    }
    Ok(ForwardTable { alpha, scale, num_states: n, len: t_len, log_likelihood: ll, inner_ops: ops })
}

/// Backward pass matching a forward table's scaling.
pub fn backward(
    ctx: &ScoringContext,
    query: &[QuantizedEvent],
    start_pos: usize,
    fwd: &ForwardTable,
) -> Result<BackwardTable> {
    let qlat = ctx.prepare_query(query)?;
    backward_lattice(ctx, &qlat, start_pos, fwd)
}

pub fn backward_lattice(
    ctx: &ScoringContext,
    qlat: &QueryLattice,
    _start_pos: usize,
    fwd: &ForwardTable,
) -> Result<BackwardTable> {
    if fwd.log_likelihood == f64::NEG_INFINITY {
        return Err(Error::ZeroProbabilityQuery);
    }
    let n = ctx.num_states();
    let n_edit = ctx.model.num_edit_states();
    let t_len = qlat.len();
    debug_assert_eq!(fwd.len, t_len);
    let mut ws = Workspace::new();
    ws.resize(n_edit);
    let mut beta = vec![0.0; n * t_len];
    beta[(t_len - 1) * n..].fill(1.0);
    for t in (0..t_len.saturating_sub(1)).rev() {
        fill_emission_rows(ctx, qlat, t + 1, &mut ws);
        let inv_c = 1.0 / fwd.scale[t + 1];
        let (head, tail) = beta.split_at_mut((t + 1) * n);
        let cur = &mut head[t * n..];
        let next = &tail[..n];
        cur.fill(0.0);
        for x_e in 0..n_edit {
            let base_x = x_e * CLUSTER;
            for succ in &ctx.succ[x_e] {
                let y_e = succ.to as usize;
                let base_y = y_e * CLUSTER;
                for kx in 0..NUM_TRANSPOSITIONS {
                    for ky in 0..NUM_TRANSPOSITIONS {
                        // Shared factor cached across the inner tempo loop.
                        let shared = succ.a_e
                            * ctx.pk_pair[kx][ky]
                            * ws.be_p[y_e * NUM_TRANSPOSITIONS + ky]
                            * inv_c;
                        if shared == 0.0 {
                            continue;
                        }
                        for sx in 0..NUM_TEMPI {
                            let mut acc = 0.0;
                            for sy in 0..NUM_TEMPI {
                                acc += ctx.a_s[sx][sy]
                                    * ws.be_r[y_e * NUM_TEMPI + sy]
                                    * next[base_y + ky * NUM_TEMPI + sy];
                            }
                            cur[base_x + kx * NUM_TEMPI + sx] += shared * acc;
                        }
                    }
                }
            }
        }
    }
    Ok(BackwardTable { beta, num_states: n, len: t_len })
}

/// Log-space Viterbi over the full lattice, with path recovery.
pub fn viterbi(
    ctx: &ScoringContext,
    query: &[QuantizedEvent],
    start_pos: usize,
) -> Result<ViterbiResult> {
    let qlat = ctx.prepare_query(query)?;
    match viterbi_bounded_lattice(ctx, &qlat, start_pos, f64::NEG_INFINITY)? {
        BoundedViterbi::Result(r) => Ok(r),
        BoundedViterbi::Pruned => unreachable!("unbounded Viterbi cannot prune"),
    }
}

/// Branch-and-bound Viterbi: returns the same result as [`viterbi`]
/// whenever the true score reaches `floor_log_prob`, and may return
/// [`BoundedViterbi::Pruned`] otherwise. The completion bound multiplies
/// the best interim score by the maximum per-step factor.
pub fn viterbi_bounded(
    ctx: &ScoringContext,
    query: &[QuantizedEvent],
    start_pos: usize,
    floor_log_prob: f64,
) -> Result<BoundedViterbi> {
    let qlat = ctx.prepare_query(query)?;
    viterbi_bounded_lattice(ctx, &qlat, start_pos, floor_log_prob)
}

/// Score-only bounded Viterbi over a prepared query (no backpointers),
/// reusing caller scratch; used by ranking.
pub fn viterbi_score_bounded(
    ctx: &ScoringContext,
    qlat: &QueryLattice,
    start_pos: usize,
    floor_log_prob: f64,
    ws: &mut Workspace,
) -> Option<f64> {
    let emis = EmissionTables::log(ctx, qlat);
    viterbi_score_bounded_pre(ctx, qlat, &emis, start_pos, floor_log_prob, ws)
}

/// Score-only bounded Viterbi with precomputed log emission tables.
pub fn viterbi_score_bounded_pre(
    ctx: &ScoringContext,
    qlat: &QueryLattice,
    emis: &EmissionTables,
    start_pos: usize,
    floor_log_prob: f64,
    ws: &mut Workspace,
) -> Option<f64> {
    let t_len = qlat.len();
    let n_edit = ctx.model.num_edit_states();
    ws.resize(n_edit);
    let log_f = ctx.max_step_factor.ln();
    log_initial_row_pre(ctx, emis, start_pos, &mut ws.cur);
    for t in 1..t_len {
        let best = row_max(&ws.cur);
        if best + (t_len - t) as f64 * log_f < floor_log_prob {
            return None;
        }
        emis.copy_step(t, ws);
        mark_log_active(ws, n_edit);
        viterbi_step(ctx, ws, None);
        std::mem::swap(&mut ws.cur, &mut ws.next);
    }
    let best = row_max(&ws.cur);
    if best < floor_log_prob {
        return None;
    }
    Some(best)
}

fn viterbi_bounded_lattice(
    ctx: &ScoringContext,
    qlat: &QueryLattice,
    start_pos: usize,
    floor: f64,
) -> Result<BoundedViterbi> {
    let n = ctx.num_states();
    let n_edit = ctx.model.num_edit_states();
    let t_len = qlat.len();
    let mut ws = Workspace::new();
    ws.resize(n_edit);
    let log_f = ctx.max_step_factor.ln();
    let mut back: Vec<u32> = vec![0; n * t_len];
    log_initial_row(ctx, qlat, start_pos, &mut ws.cur);
    for t in 1..t_len {
        // Bound check: even the best interim path, completed with the
        // maximum per-step factor, must be able to reach the floor.
        let best = row_max(&ws.cur);
        if best + (t_len - t) as f64 * log_f < floor {
            return Ok(BoundedViterbi::Pruned);
        }
        fill_log_emission_rows(ctx, qlat, t, &mut ws);
        mark_log_active(&mut ws, n_edit);
        viterbi_step(ctx, &mut ws, Some(&mut back[t * n..(t + 1) * n]));
        std::mem::swap(&mut ws.cur, &mut ws.next);
    }
    let mut best = f64::NEG_INFINITY;
    let mut best_state = 0usize;
    for (i, &v) in ws.cur.iter().enumerate() {
        if v > best {
            best = v;
            best_state = i;
        }
    }
    if best < floor {
        return Ok(BoundedViterbi::Pruned);
    }
    if best == f64::NEG_INFINITY {
        return Ok(BoundedViterbi::Result(ViterbiResult {
            log_prob: f64::NEG_INFINITY,
            path: Vec::new(),
        }));
    }
    let mut path_idx = vec![0usize; t_len];
    path_idx[t_len - 1] = best_state;
    for t in (0..t_len - 1).rev() {
        path_idx[t] = back[(t + 1) * n + path_idx[t + 1]] as usize;
    }
    let path = path_idx.into_iter().map(|i| ctx.model.hidden_state(i)).collect();
    Ok(BoundedViterbi::Result(ViterbiResult { log_prob: best, path }))
}

fn log_initial_row_pre(
    ctx: &ScoringContext,
    emis: &EmissionTables,
    start_pos: usize,
    row: &mut [f64],
) {
    row.fill(f64::NEG_INFINITY);
    let model = ctx.model;
    let ctx_e = ctx.params.contexts.context_of(start_pos);
    let mass = model.entry_mass_at(start_pos, ctx.params, ctx_e);
    if mass <= 0.0 {
        return;
    }
    let l_k = (1.0 / NUM_TRANSPOSITIONS as f64).ln();
    for &(edit_idx, class) in model.entry_states_at(start_pos) {
        let l_pi_e = (ctx.params.edit[ctx_e][class] / mass).ln();
        let bp = &emis.p[edit_idx * NUM_TRANSPOSITIONS..(edit_idx + 1) * NUM_TRANSPOSITIONS];
        let br = &emis.r[edit_idx * NUM_TEMPI..(edit_idx + 1) * NUM_TEMPI];
        let base = edit_idx * CLUSTER;
        for (k_idx, &bpv) in bp.iter().enumerate() {
            let w = l_pi_e + l_k + bpv;
            for (s_idx, &brv) in br.iter().enumerate() {
                row[base + k_idx * NUM_TEMPI + s_idx] = w + ctx.l_init_tempo[s_idx] + brv;
            }
        }
    }
}

fn log_initial_row(ctx: &ScoringContext, qlat: &QueryLattice, start_pos: usize, row: &mut [f64]) {
    row.fill(f64::NEG_INFINITY);
    let model = ctx.model;
    let ctx_e = ctx.params.contexts.context_of(start_pos);
    let mass = model.entry_mass_at(start_pos, ctx.params, ctx_e);
    if mass <= 0.0 {
        return;
    }
    let l_k = (1.0 / NUM_TRANSPOSITIONS as f64).ln();
    let mut bp = [0.0; NUM_TRANSPOSITIONS];
    let mut br = [0.0; NUM_TEMPI];
    for &(edit_idx, class) in model.entry_states_at(start_pos) {
        let l_pi_e = (ctx.params.edit[ctx_e][class] / mass).ln();
        ctx.pitch_row(&ctx.l_pitch_tab, edit_idx, qlat.events[0].pitch_class, &mut bp);
        ctx.rhythm_row(
            &ctx.l_rhythm_tab,
            0.0,
            f64::NEG_INFINITY,
            qlat,
            edit_idx,
            0,
            &mut br,
        );
        let base = edit_idx * CLUSTER;
        for (k_idx, &bpv) in bp.iter().enumerate() {
            let w = l_pi_e + l_k + bpv;
            for (s_idx, &brv) in br.iter().enumerate() {
                row[base + k_idx * NUM_TEMPI + s_idx] = w + ctx.l_init_tempo[s_idx] + brv;
            }
        }
    }
}

fn fill_log_emission_rows(
    ctx: &ScoringContext,
    qlat: &QueryLattice,
    t: usize,
    ws: &mut Workspace,
) {
    let obs_pc = qlat.events[t].pitch_class;
    for e in 0..ctx.model.num_edit_states() {
        let bp: &mut [f64; 12] =
            (&mut ws.be_p[e * NUM_TRANSPOSITIONS..(e + 1) * NUM_TRANSPOSITIONS])
                .try_into()
                .unwrap();
        ctx.pitch_row(&ctx.l_pitch_tab, e, obs_pc, bp);
        let br: &mut [f64; 9] =
            (&mut ws.be_r[e * NUM_TEMPI..(e + 1) * NUM_TEMPI]).try_into().unwrap();
        ctx.rhythm_row(&ctx.l_rhythm_tab, 0.0, f64::NEG_INFINITY, qlat, e, t, br);
    }
}

fn mark_log_active(ws: &mut Workspace, n_edit: usize) {
    for e in 0..n_edit {
        ws.active[e] =
            ws.cur[e * CLUSTER..(e + 1) * CLUSTER].iter().any(|&v| v != f64::NEG_INFINITY);
    }
}

fn row_max(row: &[f64]) -> f64 {
    row.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// One induction step of log-space Viterbi, mirroring the forward kernel's
/// two max-stages; `back` receives flat source-state indices when present.
fn viterbi_step(ctx: &ScoringContext, ws: &mut Workspace, back: Option<&mut [u32]>) {
    let n_edit = ctx.model.num_edit_states();
    ws.next.fill(f64::NEG_INFINITY);
    let mut back = back;
    for x_e in 0..n_edit {
        if !ws.active[x_e] || ctx.succ[x_e].is_empty() {
            continue;
        }
        let slice = &ws.cur[x_e * CLUSTER..(x_e + 1) * CLUSTER];
        // Stage 1: best tempo source per (kx, sy).
        for kx in 0..NUM_TRANSPOSITIONS {
            let src = &slice[kx * NUM_TEMPI..(kx + 1) * NUM_TEMPI];
            for sy in 0..NUM_TEMPI {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0u8;
                for (sx, &a) in src.iter().enumerate() {
                    let cand = a + ctx.la_s[sx][sy];
                    if cand > best {
                        best = cand;
                        arg = sx as u8;
                    }
                }
                ws.tmp[kx * NUM_TEMPI + sy] = best;
                ws.arg_tmp[kx * NUM_TEMPI + sy] = arg;
            }
        }
        // Stage 2: best transposition source per (ky, sy).
        for ky in 0..NUM_TRANSPOSITIONS {
            for sy in 0..NUM_TEMPI {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0u8;
                for kx in 0..NUM_TRANSPOSITIONS {
                    let cand = ctx.lpk_pair[kx][ky] + ws.tmp[kx * NUM_TEMPI + sy];
                    if cand > best {
                        best = cand;
                        arg = kx as u8;
                    }
                }
                ws.corr[ky * NUM_TEMPI + sy] = best;
                ws.arg_corr[ky * NUM_TEMPI + sy] = arg;
            }
        }
        for succ in &ctx.succ[x_e] {
            let y_e = succ.to as usize;
            let bp = &ws.be_p[y_e * NUM_TRANSPOSITIONS..(y_e + 1) * NUM_TRANSPOSITIONS];
            let br = &ws.be_r[y_e * NUM_TEMPI..(y_e + 1) * NUM_TEMPI];
            let base_y = y_e * CLUSTER;
            for (ky, &bpv) in bp.iter().enumerate() {
                let head = succ.log_a_e + bpv;
                if head == f64::NEG_INFINITY {
                    continue;
                }
                for (sy, &brv) in br.iter().enumerate() {
                    let cand = head + brv + ws.corr[ky * NUM_TEMPI + sy];
                    let slot = base_y + ky * NUM_TEMPI + sy;
                    if cand > ws.next[slot] {
                        ws.next[slot] = cand;
                        if let Some(b) = back.as_deref_mut() {
                            let kx = ws.arg_corr[ky * NUM_TEMPI + sy] as usize;
                            let sx = ws.arg_tmp[kx * NUM_TEMPI + sy] as usize;
                            b[slot] = ((x_e * NUM_TRANSPOSITIONS + kx) * NUM_TEMPI + sx) as u32;
                        }
                    }
                }
            }
        }
    }
}

/// Log probability of one specific state path for the query.
pub fn path_log_prob(
    ctx: &ScoringContext,
    query: &[QuantizedEvent],
    start_pos: usize,
    path: &[HiddenState],
) -> Result<f64> {
    if path.len() != query.len() || path.is_empty() {
        return Err(Error::InvalidInput("path and query must have equal length".into()));
    }
    let qlat = ctx.prepare_query(query)?;
    let model = ctx.model;
    let to_indices = |h: &HiddenState| -> Result<(usize, usize, usize)> {
        let e = model
            .find_edit_state(h.edit.kind, h.edit.pos)
            .ok_or_else(|| Error::InvalidInput(format!("state {h:?} not in model")))?;
        Ok((
            e,
            (h.transposition as i32 - crate::model::TRANS_MIN) as usize,
            (h.tempo as i32 - crate::model::TEMPO_MIN) as usize,
        ))
    };
    let emission = |e: usize, k: usize, s: usize, t: usize| -> f64 {
        let mut bp = [0.0; NUM_TRANSPOSITIONS];
        ctx.pitch_row(&ctx.pitch_tab, e, qlat.events[t].pitch_class, &mut bp);
        let mut br = [0.0; NUM_TEMPI];
        ctx.rhythm_row(&ctx.rhythm_tab, 1.0, 0.0, &qlat, e, t, &mut br);
        bp[k] * br[s]
    };
    let (e0, k0, s0) = to_indices(&path[0])?;
    let pi = crate::model::initial_prob(ctx.params, model, &path[0], start_pos)?;
    let mut lp = (pi * emission(e0, k0, s0, 0)).ln();
    let mut prev = (e0, k0, s0);
    for (t, h) in path.iter().enumerate().skip(1) {
        let (e, k, s) = to_indices(h)?;
        let a_e = ctx.succ[prev.0]
            .iter()
            .find(|succ| succ.to as usize == e)
            .map_or(0.0, |succ| succ.a_e);
        let a = a_e * ctx.pk_pair[prev.1][k] * ctx.a_s[prev.2][s];
        lp += (a * emission(e, k, s, t)).ln();
        prev = (e, k, s);
    }
    Ok(lp)
}

/// Guard on [`brute_force_likelihood`] enumeration size.
pub const ENUMERATION_GUARD: u64 = 10_000_000;

/// Exact likelihood by explicit enumeration of every structurally possible
/// path (nonzero initial probability and transitions). The independent
/// oracle for the forward pass; errors out beyond [`ENUMERATION_GUARD`]
/// paths.
pub fn brute_force_likelihood(
    ctx: &ScoringContext,
    query: &[QuantizedEvent],
    start_pos: usize,
) -> Result<f64> {
    let qlat = ctx.prepare_query(query)?;
    let t_len = qlat.len();
    let n_edit = ctx.model.num_edit_states();
    // Emission tables per (t, edit, k, s).
    let mut ws = Workspace::new();
    ws.resize(n_edit);
    let mut emis = vec![0.0; t_len * n_edit * CLUSTER];
    for t in 0..t_len {
        fill_emission_rows(ctx, &qlat, t, &mut ws);
        for e in 0..n_edit {
            for k in 0..NUM_TRANSPOSITIONS {
                for s in 0..NUM_TEMPI {
                    emis[((t * n_edit) + e) * CLUSTER + k * NUM_TEMPI + s] = ws.be_p
                        [e * NUM_TRANSPOSITIONS + k]
                        * ws.be_r[e * NUM_TEMPI + s];
                }
            }
        }
    }
    let mut total = 0.0;
    let mut visited: u64 = 0;
    struct Dfs<'c, 'm> {
        ctx: &'c ScoringContext<'m>,
        emis: Vec<f64>,
        n_edit: usize,
        t_len: usize,
    }
    impl Dfs<'_, '_> {
        fn go(
            &self,
            t: usize,
            e: usize,
            k: usize,
            s: usize,
            p: f64,
            total: &mut f64,
            visited: &mut u64,
        ) -> Result<()> {
            if t + 1 == self.t_len {
                *visited += 1;
                if *visited > ENUMERATION_GUARD {
                    return Err(Error::EnumerationGuard { guard: ENUMERATION_GUARD });
                }
                *total += p;
                return Ok(());
            }
            for succ in &self.ctx.succ[e] {
                if succ.a_e == 0.0 {
                    continue;
                }
                let y = succ.to as usize;
                for ky in 0..NUM_TRANSPOSITIONS {
                    let a_k = self.ctx.pk_pair[k][ky];
                    if a_k == 0.0 {
                        continue;
                    }
                    for sy in 0..NUM_TEMPI {
                        let a_s = self.ctx.a_s[s][sy];
                        if a_s == 0.0 {
                            continue;
                        }
                        let b = self.emis
                            [(((t + 1) * self.n_edit) + y) * CLUSTER + ky * NUM_TEMPI + sy];
                        self.go(
                            t + 1,
                            y,
                            ky,
                            sy,
                            p * succ.a_e * a_k * a_s * b,
                            total,
                            visited,
                        )?;
                    }
                }
            }
            Ok(())
        }
    }
    let dfs = Dfs { ctx, emis, n_edit, t_len };
    let ctx_e = ctx.params.contexts.context_of(start_pos);
    let mass = ctx.model.entry_mass_at(start_pos, ctx.params, ctx_e);
    if mass <= 0.0 {
        return Ok(0.0);
    }
    let k_prob = 1.0 / NUM_TRANSPOSITIONS as f64;
    for &(edit_idx, class) in ctx.model.entry_states_at(start_pos) {
        let pi_e = ctx.params.edit[ctx_e][class] / mass;
        if pi_e == 0.0 {
            continue;
        }
        for k in 0..NUM_TRANSPOSITIONS {
            for s in 0..NUM_TEMPI {
                let pi = pi_e * k_prob * dfs.ctx.init_tempo[s];
                if pi == 0.0 {
                    continue;
                }
                let b = dfs.emis[(edit_idx) * CLUSTER + k * NUM_TEMPI + s];
                dfs.go(0, edit_idx, k, s, pi * b, &mut total, &mut visited)?;
            }
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::dequantize_ioi;
    use crate::model::{
        build_target_model, emission_prob, impulse, initial_prob, transition_prob,
        ErrorModelParams, ALL_COMPONENTS, TEMPO_MAX, TEMPO_MIN, TRANS_MAX, TRANS_MIN,
    };
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn ev(pc: u8, bin: u8) -> QuantizedEvent {
        let cfg = QuantizationConfig::default();
        QuantizedEvent {
            pitch_class: pc,
            rhythm_bin: bin,
            raw_ioi_ms: dequantize_ioi(bin as usize, &cfg).unwrap(),
        }
    }

    fn random_events(rng: &mut StdRng, len: usize) -> Vec<QuantizedEvent> {
        (0..len).map(|_| ev(rng.gen_range(0..12), rng.gen_range(8..20))).collect()
    }

    fn random_params(rng: &mut StdRng) -> ErrorModelParams {
        let mut p = ErrorModelParams::default_with(2, 2, 29);
        for c in ALL_COMPONENTS {
            for dist in p.component_tables_mut(c) {
                for v in dist.iter_mut() {
                    *v = rng.gen_range(0.05..1.0);
                }
                let sum: f64 = dist.iter().sum();
                for v in dist.iter_mut() {
                    *v /= sum;
                }
            }
        }
        p
    }

    /// Random parameters with narrow cumulative-error support so tiny
    /// instances stay under the enumeration guard.
    fn sparse_params(rng: &mut StdRng, tempo_width: i32) -> ErrorModelParams {
        let mut p = random_params(rng);
        for (i, v) in p.modulation[0].iter_mut().enumerate() {
            if (i as i32 + TRANS_MIN).abs() > 1 {
                *v = 0.0;
            }
        }
        let msum: f64 = p.modulation[0].iter().sum();
        for v in p.modulation[0].iter_mut() {
            *v /= msum;
        }
        for (i, v) in p.tempo_change[0].iter_mut().enumerate() {
            if (i as i32 + TEMPO_MIN).abs() > tempo_width {
                *v = 0.0;
            }
        }
        let ssum: f64 = p.tempo_change[0].iter().sum();
        for v in p.tempo_change[0].iter_mut() {
            *v /= ssum;
        }
        p
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        if a == b {
            return true;
        }
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
    }

    #[test]
    fn forward_matches_brute_force() {
        let mut rng = StdRng::seed_from_u64(42);
        for trial in 0..30 {
            let tempo_width = if trial % 2 == 0 { 0 } else { 1 };
            let t_len = if tempo_width == 0 { 1 + trial % 4 } else { 1 + trial % 3 };
            let params = sparse_params(&mut rng, tempo_width);
            let target = random_events(&mut rng, 2 + trial % 3);
            let model =
                build_target_model(&target, 2, 2, QuantizationConfig::default(), 0).unwrap();
            let ctx = ScoringContext::new(&model, &params).unwrap();
            let query = random_events(&mut rng, t_len);
            let fwd = forward(&ctx, &query, 0).unwrap();
            let brute = brute_force_likelihood(&ctx, &query, 0).unwrap();
            let p = fwd.log_likelihood.exp();
            assert!(
                rel_close(p, brute, 1e-9),
                "trial {trial}: forward {p} vs brute {brute}"
            );
        }
    }

    #[test]
    fn cached_and_uncached_match_production() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..10 {
            let params = random_params(&mut rng);
            let target = random_events(&mut rng, 5);
            let model =
                build_target_model(&target, 2, 2, QuantizationConfig::default(), 0).unwrap();
            let ctx = ScoringContext::new(&model, &params).unwrap();
            let query = random_events(&mut rng, 4);
            let a = forward(&ctx, &query, 0).unwrap();
            let b = forward_cached(&ctx, &query, 0).unwrap();
            let c = forward_uncached(&ctx, &query, 0).unwrap();
            assert!(rel_close(a.log_likelihood, b.log_likelihood, 1e-12));
            assert!(rel_close(b.log_likelihood, c.log_likelihood, 1e-12));
            for i in 0..a.alpha.len() {
                assert!(rel_close(a.alpha[i], b.alpha[i], 1e-9));
                assert!(rel_close(b.alpha[i], c.alpha[i], 1e-9));
            }
        }
    }

    /// Dense unscaled forward built directly on the model-level probability
    /// functions; independent of the lattice kernels.
    fn naive_forward(
        params: &ErrorModelParams,
        model: &TargetModel,
        query: &[QuantizedEvent],
        start: usize,
    ) -> f64 {
        let qlat = QueryLattice::new(query, &model.cfg, model.m_max).unwrap();
        let n_edit = model.num_edit_states();
        let obs = |e: usize, k_idx: usize, s_idx: usize, t: usize| -> f64 {
            let rb = match model.expected(e).rhythm {
                RhythmExpectation::ChainFinal { span, .. } => match qlat.agg_bin(span, t) {
                    Some(b) => b,
                    None => return 0.0,
                },
                _ => qlat.events[t].rhythm_bin,
            };
            emission_prob(
                params,
                model,
                e,
                transposition_value(k_idx) as i8,
                tempo_value(s_idx) as i8,
                qlat.events[t].pitch_class,
                rb,
            )
        };
        let idx = |e: usize, k: usize, s: usize| (e * NUM_TRANSPOSITIONS + k) * NUM_TEMPI + s;
        let n = n_edit * CLUSTER;
        let mut cur = vec![0.0; n];
        for e in 0..n_edit {
            for k in 0..NUM_TRANSPOSITIONS {
                for s in 0..NUM_TEMPI {
                    let h = model.hidden_state(idx(e, k, s));
                    let pi = initial_prob(params, model, &h, start).unwrap();
                    cur[idx(e, k, s)] = pi * obs(e, k, s, 0);
                }
            }
        }
        for t in 1..query.len() {
            let mut next = vec![0.0; n];
            for ef in 0..n_edit {
                for kf in 0..NUM_TRANSPOSITIONS {
                    for sf in 0..NUM_TEMPI {
                        let a = cur[idx(ef, kf, sf)];
                        if a == 0.0 {
                            continue;
                        }
                        let hf = model.hidden_state(idx(ef, kf, sf));
                        for et in 0..n_edit {
                            for kt in 0..NUM_TRANSPOSITIONS {
                                for st in 0..NUM_TEMPI {
                                    let ht = model.hidden_state(idx(et, kt, st));
                                    let tr = transition_prob(params, model, &hf, &ht);
                                    if tr == 0.0 {
                                        continue;
                                    }
                                    next[idx(et, kt, st)] += a * tr * obs(et, kt, st, t);
                                }
                            }
                        }
                    }
                }
            }
            cur = next;
        }
        cur.iter().sum()
    }

    #[test]
    fn scaled_forward_matches_naive_unscaled() {
        let mut rng = StdRng::seed_from_u64(13);
        for _ in 0..3 {
            let params = random_params(&mut rng);
            let target = random_events(&mut rng, 3);
            let model =
                build_target_model(&target, 2, 2, QuantizationConfig::default(), 0).unwrap();
            let ctx = ScoringContext::new(&model, &params).unwrap();
            let query = random_events(&mut rng, 3);
            let scaled = forward(&ctx, &query, 0).unwrap().log_likelihood.exp();
            let naive = naive_forward(&params, &model, &query, 0);
            assert!(rel_close(scaled, naive, 1e-12), "{scaled} vs {naive}");
        }
    }

    #[test]
    fn viterbi_not_above_forward() {
        let mut rng = StdRng::seed_from_u64(99);
        for _ in 0..10 {
            let params = random_params(&mut rng);
            let target = random_events(&mut rng, 5);
            let model =
                build_target_model(&target, 2, 2, QuantizationConfig::default(), 0).unwrap();
            let ctx = ScoringContext::new(&model, &params).unwrap();
            let query = random_events(&mut rng, 5);
            let fwd = forward(&ctx, &query, 0).unwrap();
            let vit = viterbi(&ctx, &query, 0).unwrap();
            assert!(vit.log_prob <= fwd.log_likelihood + 1e-9);
        }
    }

    #[test]
    fn single_surviving_path_makes_viterbi_equal_forward() {
        // Impulse error tables collapse the lattice to one surviving path
        // when the query equals the target.
        let mut params = ErrorModelParams::default_with(1, 1, 29);
        params.modulation[0] = impulse(TRANS_MIN, TRANS_MAX, 0);
        params.tempo_change[0] = impulse(TEMPO_MIN, TEMPO_MAX, 0);
        params.pitch_error[0] = impulse(TRANS_MIN, TRANS_MAX, 0);
        params.rhythm_error[0] = impulse(-28, 28, 0);
        let target = vec![ev(0, 12), ev(4, 13), ev(7, 14)];
        let model =
            build_target_model(&target, 1, 1, QuantizationConfig::default(), 0).unwrap();
        let ctx = ScoringContext::new(&model, &params).unwrap();
        let fwd = forward(&ctx, &target, 0).unwrap();
        let vit = viterbi(&ctx, &target, 0).unwrap();
        assert!(rel_close(fwd.log_likelihood, vit.log_prob, 1e-12));
        // All path mass sits on the no-transposition, base-tempo diagonal.
        for (t, h) in vit.path.iter().enumerate() {
            assert_eq!(h.edit.pos, t);
            assert_eq!(h.transposition, 0);
            assert_eq!(h.tempo, 0);
        }
    }

    #[test]
    fn alpha_beta_product_is_constant() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..5 {
            let params = random_params(&mut rng);
            let target = random_events(&mut rng, 4);
            let model =
                build_target_model(&target, 2, 2, QuantizationConfig::default(), 0).unwrap();
            let ctx = ScoringContext::new(&model, &params).unwrap();
            let query = random_events(&mut rng, 4);
            let fwd = forward(&ctx, &query, 0).unwrap();
            let bwd = backward(&ctx, &query, 0, &fwd).unwrap();
            for t in 0..query.len() {
                let s: f64 = fwd
                    .row(t)
                    .iter()
                    .zip(bwd.row(t))
                    .map(|(&a, &b)| a * b)
                    .sum();
                assert!((s - 1.0).abs() < 1e-9, "t={t}: sum {s}");
            }
        }
    }

    #[test]
    fn backward_base_case_is_ones() {
        let mut rng = StdRng::seed_from_u64(5);
        let params = random_params(&mut rng);
        let target = random_events(&mut rng, 3);
        let model =
            build_target_model(&target, 2, 2, QuantizationConfig::default(), 0).unwrap();
        let ctx = ScoringContext::new(&model, &params).unwrap();
        let query = random_events(&mut rng, 1);
        let fwd = forward(&ctx, &query, 0).unwrap();
        let bwd = backward(&ctx, &query, 0, &fwd).unwrap();
        assert!(bwd.row(0).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn bounded_viterbi_with_no_floor_equals_viterbi() {
        let mut rng = StdRng::seed_from_u64(17);
        for _ in 0..5 {
            let params = random_params(&mut rng);
            let target = random_events(&mut rng, 4);
            let model =
                build_target_model(&target, 2, 2, QuantizationConfig::default(), 0).unwrap();
            let ctx = ScoringContext::new(&model, &params).unwrap();
            let query = random_events(&mut rng, 4);
            let unbounded = viterbi(&ctx, &query, 0).unwrap();
            match viterbi_bounded(&ctx, &query, 0, f64::NEG_INFINITY).unwrap() {
                BoundedViterbi::Result(r) => {
                    assert_eq!(r.log_prob, unbounded.log_prob);
                    assert_eq!(r.path, unbounded.path);
                }
                BoundedViterbi::Pruned => panic!("pruned without a floor"),
            }
        }
    }

    #[test]
    fn pruning_is_admissible() {
        let mut rng = StdRng::seed_from_u64(23);
        for trial in 0..60 {
            let params = random_params(&mut rng);
            let target = random_events(&mut rng, 3 + trial % 3);
            let model =
                build_target_model(&target, 2, 2, QuantizationConfig::default(), 0).unwrap();
            let ctx = ScoringContext::new(&model, &params).unwrap();
            let query = random_events(&mut rng, 3 + trial % 3);
            let truth = viterbi(&ctx, &query, 0).unwrap();
            let floor = truth.log_prob + rng.gen_range(-8.0..8.0);
            match viterbi_bounded(&ctx, &query, 0, floor).unwrap() {
                BoundedViterbi::Result(r) => {
                    assert_eq!(r.log_prob, truth.log_prob);
                }
                BoundedViterbi::Pruned => {
                    assert!(
                        truth.log_prob < floor,
                        "pruned a path scoring {} above floor {floor}",
                        truth.log_prob
                    );
                }
            }
            // A floor exactly at the true score must never prune.
            match viterbi_bounded(&ctx, &query, 0, truth.log_prob).unwrap() {
                BoundedViterbi::Result(r) => assert_eq!(r.log_prob, truth.log_prob),
                BoundedViterbi::Pruned => panic!("pruned at its own score"),
            }
        }
    }

    #[test]
    fn viterbi_path_score_is_consistent() {
        let mut rng = StdRng::seed_from_u64(31);
        for _ in 0..5 {
            let params = random_params(&mut rng);
            let target = random_events(&mut rng, 5);
            let model =
                build_target_model(&target, 2, 2, QuantizationConfig::default(), 0).unwrap();
            let ctx = ScoringContext::new(&model, &params).unwrap();
            let query = random_events(&mut rng, 5);
            let vit = viterbi(&ctx, &query, 0).unwrap();
            let recomputed = path_log_prob(&ctx, &query, 0, &vit.path).unwrap();
            assert!(
                (vit.log_prob - recomputed).abs() < 1e-9,
                "{} vs {}",
                vit.log_prob,
                recomputed
            );
        }
    }

    #[test]
    fn transposition_shift_leaves_likelihood_unchanged() {
        let mut rng = StdRng::seed_from_u64(37);
        for shift in [1u8, 5, 11] {
            let params = random_params(&mut rng);
            let target = random_events(&mut rng, 5);
            let model =
                build_target_model(&target, 2, 2, QuantizationConfig::default(), 0).unwrap();
            let ctx = ScoringContext::new(&model, &params).unwrap();
            let query = random_events(&mut rng, 5);
            let shifted: Vec<QuantizedEvent> = query
                .iter()
                .map(|e| QuantizedEvent {
                    pitch_class: (e.pitch_class + shift) % 12,
                    ..*e
                })
                .collect();
            let a = forward(&ctx, &query, 0).unwrap().log_likelihood;
            let b = forward(&ctx, &shifted, 0).unwrap().log_likelihood;
            assert!(rel_close(a, b, 1e-9), "shift {shift}: {a} vs {b}");
        }
    }

    #[test]
    fn complexity_ceiling_holds() {
        // Operation count of the cached pass stays within a constant factor
        // of k * |D| * b^2 * T, with k the cluster-pair update cost and
        // b = L + M - 1 the branching factor.
        let mut rng = StdRng::seed_from_u64(41);
        let params = random_params(&mut rng);
        for (d_len, t_len) in [(4usize, 3usize), (8, 5), (12, 8)] {
            let target = random_events(&mut rng, d_len);
            let model =
                build_target_model(&target, 2, 2, QuantizationConfig::default(), 0).unwrap();
            let ctx = ScoringContext::new(&model, &params).unwrap();
            let query = random_events(&mut rng, t_len);
            let fwd = forward_cached(&ctx, &query, 0).unwrap();
            let k = (CLUSTER * CLUSTER) as u64;
            let b = (2 + 2 - 1) as u64;
            let ceiling = 2 * k * d_len as u64 * b * b * t_len as u64;
            assert!(
                fwd.inner_ops <= ceiling,
                "{} ops exceeds ceiling {} at |D|={d_len}, T={t_len}",
                fwd.inner_ops,
                ceiling
            );
        }
    }

    #[test]
    fn enumeration_guard_triggers() {
        let mut rng = StdRng::seed_from_u64(43);
        // Dense cumulative supports blow up the path count immediately.
        let params = random_params(&mut rng);
        let target = random_events(&mut rng, 4);
        let model =
            build_target_model(&target, 2, 2, QuantizationConfig::default(), 0).unwrap();
        let ctx = ScoringContext::new(&model, &params).unwrap();
        let query = random_events(&mut rng, 6);
        assert!(matches!(
            brute_force_likelihood(&ctx, &query, 0),
            Err(Error::EnumerationGuard { .. })
        ));
    }

    #[test]
    fn all_mass_on_joins_starves_the_final_position() {
        // With L=2, M=1 and every edit draw a two-note join, the last
        // target position only hosts a Same state and is unreachable; the
        // renormalization window there has zero mass. Scores must stay
        // finite or negative infinity, never NaN.
        let mut rng = StdRng::seed_from_u64(59);
        let mut params = random_params(&mut rng);
        params.m_max = 1;
        params.edit = vec![vec![0.0, 1.0]];
        let target = random_events(&mut rng, 5);
        let model =
            build_target_model(&target, 2, 1, QuantizationConfig::default(), 0).unwrap();
        let ctx = ScoringContext::new(&model, &params).unwrap();
        let query = random_events(&mut rng, 2);
        let fwd = forward(&ctx, &query, 0).unwrap();
        assert!(!fwd.log_likelihood.is_nan());
        let vit = viterbi(&ctx, &query, 0).unwrap();
        assert!(!vit.log_prob.is_nan());
        // A start at the unreachable position itself has no scorable paths.
        let dead = forward(&ctx, &query, 4).unwrap();
        assert_eq!(dead.log_likelihood, f64::NEG_INFINITY);
    }

    #[test]
    fn empty_query_rejected() {
        let mut rng = StdRng::seed_from_u64(47);
        let params = random_params(&mut rng);
        let target = random_events(&mut rng, 3);
        let model =
            build_target_model(&target, 2, 2, QuantizationConfig::default(), 0).unwrap();
        let ctx = ScoringContext::new(&model, &params).unwrap();
        assert!(matches!(forward(&ctx, &[], 0), Err(Error::EmptySequence)));
    }

    #[test]
    fn zero_probability_query_reports_neg_infinity() {
        // Impulse rhythm error plus a huge rhythm jump beyond any tempo
        // change leaves no scorable path.
        let mut params = ErrorModelParams::default_with(1, 1, 29);
        params.rhythm_error[0] = impulse(-28, 28, 0);
        params.tempo_change[0] = impulse(TEMPO_MIN, TEMPO_MAX, 0);
        let target = vec![ev(0, 5), ev(2, 5), ev(4, 5)];
        let model =
            build_target_model(&target, 1, 1, QuantizationConfig::default(), 0).unwrap();
        let ctx = ScoringContext::new(&model, &params).unwrap();
        let query = vec![ev(0, 5), ev(2, 28), ev(4, 5)];
        let fwd = forward(&ctx, &query, 0).unwrap();
        assert_eq!(fwd.log_likelihood, f64::NEG_INFINITY);
        assert!(backward(&ctx, &query, 0, &fwd).is_err());
        let vit = viterbi(&ctx, &query, 0).unwrap();
        assert_eq!(vit.log_prob, f64::NEG_INFINITY);
        assert!(vit.path.is_empty());
    }

    #[test]
    fn forward_log_likelihood_matches_table() {
        let mut rng = StdRng::seed_from_u64(53);
        let params = random_params(&mut rng);
        let target = random_events(&mut rng, 6);
        let model =
            build_target_model(&target, 2, 2, QuantizationConfig::default(), 0).unwrap();
        let ctx = ScoringContext::new(&model, &params).unwrap();
        let query = random_events(&mut rng, 5);
        let qlat = ctx.prepare_query(&query).unwrap();
        let mut ws = Workspace::new();
        for start in 0..model.target_len() {
            let fast = forward_log_likelihood(&ctx, &qlat, start, &mut ws);
            let full = forward(&ctx, &query, start).unwrap().log_likelihood;
            assert!(rel_close(fast, full, 1e-12) || (fast.is_infinite() && full.is_infinite()));
        }
    }
}
