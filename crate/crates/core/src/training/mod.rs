//! Tied-parameter Baum-Welch training.
//!
//! The E-step accumulates expected transition and emission counts at the
//! context level: every transition is evidence for one modulation delta,
//! one tempo-change delta, and (on entry transitions) one edit
//! classification, while every state occupancy is evidence for one pitch
//! error and at most one rhythm error. The M-step re-normalizes counts
//! under a mass floor, correcting for the boundary renormalization of the
//! edit and tempo components so the data log-likelihood never decreases.
//!
//! Initial transposition and tempo distributions are fixed, and initial
//! edit probabilities stay tied to the edit transition table.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{QuantizationConfig, QuantizedEvent};
use crate::lattice::{
    backward_lattice, forward_lattice, BackwardTable, ForwardTable, QueryLattice,
    ScoringContext, CLUSTER,
};
use crate::model::{
    build_target_model, pitch_delta_index, rhythm_delta_index, tempo_value,
    transposition_value, Component, ErrorModelParams, ModelVariant, RhythmExpectation,
    TargetModel, ALL_COMPONENTS, NUM_TEMPI, NUM_TRANSPOSITIONS, TEMPO_MAX, TEMPO_MIN,
};

/// Expected context-level counts from one or more queries. Counts from
/// disjoint query sets merge component-wise.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExpectedCounts {
    pub edit: Vec<Vec<f64>>,
    pub modulation: Vec<Vec<f64>>,
    pub tempo_change: Vec<Vec<f64>>,
    pub pitch: Vec<Vec<f64>>,
    pub rhythm: Vec<Vec<f64>>,
    /// Expected transitions out of each source tempo value, per context;
    /// the boundary-window masses for the tempo M-step.
    pub tempo_source_mass: Vec<[f64; NUM_TEMPI]>,
    /// Expected edit-choice events per distinct available-class bitmask,
    /// per context; the boundary-window masses for the edit M-step.
    pub edit_window_mass: Vec<BTreeMap<u32, f64>>,
    /// Posterior mass on deterministic chain-interior transitions (not edit
    /// evidence; tracked so count conservation stays checkable).
    pub chain_mass: f64,
    pub queries: u64,
    pub skipped: u64,
}

impl ExpectedCounts {
    pub fn zeros(params: &ErrorModelParams) -> Self {
        let n = params.contexts.num_contexts();
        Self {
            edit: vec![vec![0.0; params.num_edit_classes()]; n],
            modulation: vec![vec![0.0; NUM_TRANSPOSITIONS]; n],
            tempo_change: vec![vec![0.0; NUM_TEMPI]; n],
            pitch: vec![vec![0.0; NUM_TRANSPOSITIONS]; n],
            rhythm: vec![vec![0.0; params.rhythm_table_len()]; n],
            tempo_source_mass: vec![[0.0; NUM_TEMPI]; n],
            edit_window_mass: vec![BTreeMap::new(); n],
            chain_mass: 0.0,
            queries: 0,
            skipped: 0,
        }
    }

    pub fn merge(&mut self, other: &ExpectedCounts) {
        let add_tables = |a: &mut Vec<Vec<f64>>, b: &Vec<Vec<f64>>| {
            for (ta, tb) in a.iter_mut().zip(b) {
                for (x, y) in ta.iter_mut().zip(tb) {
                    *x += y;
                }
            }
        };
        add_tables(&mut self.edit, &other.edit);
        add_tables(&mut self.modulation, &other.modulation);
        add_tables(&mut self.tempo_change, &other.tempo_change);
        add_tables(&mut self.pitch, &other.pitch);
        add_tables(&mut self.rhythm, &other.rhythm);
        for (a, b) in self.tempo_source_mass.iter_mut().zip(&other.tempo_source_mass) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.edit_window_mass.iter_mut().zip(&other.edit_window_mass) {
            for (&mask, &m) in b {
                *a.entry(mask).or_insert(0.0) += m;
            }
        }
        self.chain_mass += other.chain_mass;
        self.queries += other.queries;
        self.skipped += other.skipped;
    }

    fn table(&self, c: Component) -> &Vec<Vec<f64>> {
        match c {
            Component::Edit => &self.edit,
            Component::Modulation => &self.modulation,
            Component::TempoChange => &self.tempo_change,
            Component::PitchError => &self.pitch,
            Component::RhythmError => &self.rhythm,
        }
    }
}

/// Pairwise posterior of being in state `x` at `t` and state `y` at `t+1`,
/// from scaled forward/backward tables.
pub fn posterior_xi(
    fwd: &ForwardTable,
    bwd: &BackwardTable,
    ctx: &ScoringContext,
    qlat: &QueryLattice,
    t: usize,
    x: usize,
    y: usize,
) -> Result<f64> {
    if fwd.log_likelihood == f64::NEG_INFINITY {
        return Err(Error::ZeroProbabilityQuery);
    }
    if t + 1 >= qlat.len() {
        return Err(Error::InvalidInput("t must be below the last step".into()));
    }
    Ok(fwd.row(t)[x]
        * ctx.transition_flat(x, y)
        * ctx.emission_flat(y, qlat, t + 1)
        * bwd.row(t + 1)[y]
        / fwd.scale[t + 1])
}

/// Available-class bitmask of the entry states at a target position.
fn entry_mask(model: &TargetModel, pos: usize) -> u32 {
    model
        .entry_states_at(pos)
        .iter()
        .fold(0u32, |mask, &(_, class)| mask | (1 << class))
}

/// Accumulate expected counts for one (target, query, start) triple.
///
/// Edit evidence covers the initial edit choice and every entry transition;
/// deterministic chain-interior steps carry no edit evidence and are
/// tallied in `chain_mass`. Modulation and tempo-change evidence covers
/// every transition. Pitch evidence covers every occupancy; rhythm
/// evidence covers occupancies that emit a rhythm factor.
pub fn accumulate_counts(
    ctx: &ScoringContext,
    qlat: &QueryLattice,
    start_pos: usize,
) -> Result<(ExpectedCounts, f64)> {
    let params = ctx.params;
    let model = ctx.model;
    let fwd = forward_lattice(ctx, qlat, start_pos)?;
    if fwd.log_likelihood == f64::NEG_INFINITY {
        return Err(Error::ZeroProbabilityQuery);
    }
    let bwd = backward_lattice(ctx, qlat, start_pos, &fwd)?;
    let mut counts = ExpectedCounts::zeros(params);
    counts.queries = 1;
    let t_len = qlat.len();
    let n_edit = model.num_edit_states();

    // Occupancy-level (gamma) statistics: emissions, and the initial edit
    // choice which is tied to the edit table.
    let q = params.q;
    for t in 0..t_len {
        let arow = fwd.row(t);
        let brow = bwd.row(t);
        let obs_pc = qlat.events[t].pitch_class as i32;
        for e in 0..n_edit {
            let cx = params.contexts.context_of(model.edit_state(e).pos);
            let exp = model.expected(e);
            let rhythm_obs: Option<i32> = match exp.rhythm {
                RhythmExpectation::ChainInterior => None,
                RhythmExpectation::Bin(b) => {
                    Some(qlat.events[t].rhythm_bin as i32 - b as i32)
                }
                RhythmExpectation::ChainFinal { target_bin, span } => {
                    if t + 1 >= span {
                        let total: f64 = qlat.events[t + 1 - span..=t]
                            .iter()
                            .map(|ev| ev.raw_ioi_ms)
                            .sum();
                        Some(
                            crate::events::quantize_ioi(total, &model.cfg)? as i32
                                - target_bin as i32,
                        )
                    } else {
                        None
                    }
                }
            };
            for k_idx in 0..NUM_TRANSPOSITIONS {
                for s_idx in 0..NUM_TEMPI {
                    let i = (e * NUM_TRANSPOSITIONS + k_idx) * NUM_TEMPI + s_idx;
                    let g = arow[i] * brow[i];
                    if g == 0.0 {
                        continue;
                    }
                    let dp = obs_pc
                        - (exp.pitch_class as i32 + transposition_value(k_idx));
                    counts.pitch[cx][pitch_delta_index(dp)] += g;
                    if let Some(base) = rhythm_obs {
                        let dr = base - tempo_value(s_idx);
                        counts.rhythm[cx][rhythm_delta_index(dr, q)] += g;
                    }
                }
            }
        }
    }
    // Initial edit choice.
    {
        let arow = fwd.row(0);
        let brow = bwd.row(0);
        let cx = params.contexts.context_of(start_pos);
        let mask = entry_mask(model, start_pos);
        let mut total_mass = 0.0;
        for &(e, class) in model.entry_states_at(start_pos) {
            let mut g = 0.0;
            for i in e * CLUSTER..(e + 1) * CLUSTER {
                g += arow[i] * brow[i];
            }
            counts.edit[cx][class] += g;
            total_mass += g;
        }
        *counts.edit_window_mass[cx].entry(mask).or_insert(0.0) += total_mass;
    }

    // Transition-level (xi) statistics.
    let mut scratch_bp = vec![0.0; n_edit * NUM_TRANSPOSITIONS];
    let mut scratch_br = vec![0.0; n_edit * NUM_TEMPI];
    for t in 0..t_len.saturating_sub(1) {
        let arow = fwd.row(t);
        let brow = bwd.row(t + 1);
        let inv_c = 1.0 / fwd.scale[t + 1];
        let obs_pc = qlat.events[t + 1].pitch_class;
        for e in 0..n_edit {
            let bp: &mut [f64; 12] = (&mut scratch_bp
                [e * NUM_TRANSPOSITIONS..(e + 1) * NUM_TRANSPOSITIONS])
                .try_into()
                .unwrap();
            ctx.pitch_row(&ctx.pitch_tab, e, obs_pc, bp);
            let br: &mut [f64; 9] =
                (&mut scratch_br[e * NUM_TEMPI..(e + 1) * NUM_TEMPI]).try_into().unwrap();
            ctx.rhythm_row(&ctx.rhythm_tab, 1.0, 0.0, qlat, e, t + 1, br);
        }
        for x_e in 0..n_edit {
            let base_x = x_e * CLUSTER;
            if arow[base_x..base_x + CLUSTER].iter().all(|&v| v == 0.0) {
                continue;
            }
            let cx = params.contexts.context_of(model.edit_state(x_e).pos);
            let succs = &ctx.succ[x_e];
            if succs.is_empty() {
                continue;
            }
            let mut choice_mass = 0.0;
            let mut is_choice = false;
            for succ in succs {
                if succ.a_e == 0.0 {
                    continue;
                }
                let y_e = succ.to as usize;
                let base_y = y_e * CLUSTER;
                let mut trans_total = 0.0;
                for kx in 0..NUM_TRANSPOSITIONS {
                    for ky in 0..NUM_TRANSPOSITIONS {
                        let shared = succ.a_e
                            * ctx.pk_pair[kx][ky]
                            * scratch_bp[y_e * NUM_TRANSPOSITIONS + ky]
                            * inv_c;
                        if shared == 0.0 {
                            continue;
                        }
                        let mut pair_total = 0.0;
                        for sx in 0..NUM_TEMPI {
                            let a = arow[base_x + kx * NUM_TEMPI + sx];
                            if a == 0.0 {
                                continue;
                            }
                            let w = a * shared;
                            for sy in 0..NUM_TEMPI {
                                let term = w
                                    * ctx.a_s[sx][sy]
                                    * scratch_br[y_e * NUM_TEMPI + sy]
                                    * brow[base_y + ky * NUM_TEMPI + sy];
                                if term != 0.0 {
                                    pair_total += term;
                                    counts.tempo_change[cx]
                                        [(sy as i32 - sx as i32 + TEMPO_MAX) as usize] +=
                                        term;
                                    counts.tempo_source_mass[cx][sx] += term;
                                }
                            }
                        }
                        counts.modulation[cx]
                            [pitch_delta_index(ky as i32 - kx as i32)] += pair_total;
                        trans_total += pair_total;
                    }
                }
                if succ.class == crate::lattice::CHAIN {
                    counts.chain_mass += trans_total;
                } else {
                    counts.edit[cx][succ.class as usize] += trans_total;
                    choice_mass += trans_total;
                    is_choice = true;
                }
            }
            if is_choice {
                let next_pos = model.edit_state(succs[0].to as usize).pos;
                let mask = entry_mask(model, next_pos);
                *counts.edit_window_mass[cx].entry(mask).or_insert(0.0) += choice_mass;
            }
        }
    }
    Ok((counts, fwd.log_likelihood))
}

/// Maximize `sum_i n_i log p_i - sum_i rho_i p_i` over the simplex with a
/// per-bin floor, restricted to `support`. This is the exact M-step for
/// count vector `n` when `rho` carries the linearized boundary-normalizer
/// masses; with `rho = 0` and no floor hits it reduces to plain count
/// normalization.
fn solve_floored_simplex(n: &[f64], rho: &[f64], floor: f64, support: &[bool]) -> Vec<f64> {
    let bins = n.len();
    let active = support.iter().filter(|&&s| s).count();
    assert!(active > 0 && (active as f64) * floor < 1.0);
    let value = |kappa: f64, i: usize| -> f64 {
        if !support[i] {
            return 0.0;
        }
        if n[i] <= 0.0 {
            return floor;
        }
        (n[i] / (kappa + rho[i])).max(floor)
    };
    let total = |kappa: f64| -> f64 { (0..bins).map(|i| value(kappa, i)).sum() };
    // kappa must keep kappa + rho_i positive on counted bins.
    let kappa_min = (0..bins)
        .filter(|&i| support[i] && n[i] > 0.0)
        .map(|i| -rho[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let n_total: f64 = (0..bins).filter(|&i| support[i]).map(|i| n[i]).sum();
    let mut lo = kappa_min;
    let mut hi = kappa_min.max(0.0) + n_total.max(1.0);
    while total(hi) >= 1.0 {
        hi = kappa_min + (hi - kappa_min) * 2.0 + 1.0;
    }
    // total(lo+) diverges, total(hi) < 1: bisect.
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if total(mid) >= 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let kappa = 0.5 * (lo + hi);
    let mut out: Vec<f64> = (0..bins).map(|i| value(kappa, i)).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Options controlling a training run.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainingOptions {
    pub variant: ModelVariant,
    /// Convergence threshold on the maximum absolute parameter change.
    pub tol: f64,
    pub max_iter: usize,
    /// Mass floor applied to every re-estimated bin, so no error type hard
    /// zeros out during training.
    pub floor: f64,
}

impl Default for TrainingOptions {
    fn default() -> Self {
        Self { variant: ModelVariant::Full, tol: 1e-4, max_iter: 100, floor: 1e-6 }
    }
}

/// Re-estimate parameters from expected counts.
///
/// Components a variant pins are left untouched; a context with no counts
/// keeps its previous distribution and is reported back. The update
/// maximizes the expected-complete-data objective subject to the floor,
/// with the edit and tempo normalizer terms minorized at the previous
/// parameters, so the training likelihood is non-decreasing.
pub fn reestimate(
    counts: &ExpectedCounts,
    prev: &ErrorModelParams,
    options: &TrainingOptions,
) -> (ErrorModelParams, Vec<String>) {
    let mut out = prev.clone();
    let mut kept = Vec::new();
    for component in ALL_COMPONENTS {
        if !ErrorModelParams::component_trainable(options.variant, component) {
            continue;
        }
        let support = prev.support_mask(options.variant, component);
        let n_ctx = prev.contexts.num_contexts();
        for cx in 0..n_ctx {
            let n = &counts.table(component)[cx];
            let total: f64 = n.iter().sum();
            if total <= 0.0 {
                kept.push(format!("{component:?}/context{cx}"));
                continue;
            }
            let rho = match component {
                Component::Edit => {
                    let mut rho = vec![0.0; n.len()];
                    for (&mask, &mass) in &counts.edit_window_mass[cx] {
                        let z: f64 = (0..n.len())
                            .filter(|&i| mask & (1 << i) != 0)
                            .map(|i| prev.edit[cx][i])
                            .sum();
                        for (i, r) in rho.iter_mut().enumerate() {
                            if mask & (1 << i) != 0 {
                                *r += mass / z;
                            }
                        }
                    }
                    rho
                }
                Component::TempoChange => {
                    let mut rho = vec![0.0; n.len()];
                    for (sx, &mass) in counts.tempo_source_mass[cx].iter().enumerate() {
                        if mass == 0.0 {
                            continue;
                        }
                        let s_from = tempo_value(sx);
                        let lo = (TEMPO_MIN - s_from).max(TEMPO_MIN);
                        let hi = (TEMPO_MAX - s_from).min(TEMPO_MAX);
                        let z: f64 = (lo..=hi)
                            .map(|d| prev.tempo_change[cx][(d - TEMPO_MIN) as usize])
                            .sum();
                        for d in lo..=hi {
                            rho[(d - TEMPO_MIN) as usize] += mass / z;
                        }
                    }
                    rho
                }
                _ => vec![0.0; n.len()],
            };
            out.component_tables_mut(component)[cx] =
                solve_floored_simplex(n, &rho, options.floor, &support);
        }
    }
    (out, kept)
}

/// One training example: quantized target and query plus the known 0-based
/// start alignment.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub target: Vec<QuantizedEvent>,
    pub query: Vec<QuantizedEvent>,
    pub start: usize,
}

/// Result of a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingReport {
    pub iterations: usize,
    /// Total training-set log-likelihood under the parameters at the start
    /// of each iteration; non-decreasing.
    pub log_likelihood_trace: Vec<f64>,
    pub converged: bool,
    pub final_params: ErrorModelParams,
    /// Queries skipped per iteration for having zero probability.
    pub skipped_queries: u64,
    /// Contexts that kept their previous table for lack of evidence.
    pub kept_contexts: Vec<String>,
}

fn max_abs_change(a: &ErrorModelParams, b: &ErrorModelParams) -> f64 {
    let mut delta: f64 = 0.0;
    for c in ALL_COMPONENTS {
        for (ta, tb) in a.component_tables(c).iter().zip(b.component_tables(c)) {
            for (x, y) in ta.iter().zip(tb) {
                delta = delta.max((x - y).abs());
            }
        }
    }
    delta
}

/// Iterative re-estimation until the maximum parameter change drops below
/// `options.tol` or `options.max_iter` is reached. The training set is
/// fixed; each pair scores against its declared start alignment.
pub fn train(
    pairs: &[TrainingPair],
    init: &ErrorModelParams,
    options: &TrainingOptions,
) -> Result<TrainingReport> {
    if pairs.is_empty() {
        return Err(Error::NoScorableQueries);
    }
    let mut params = init.apply_variant(options.variant);
    params.validate(1e-9)?;
    let cfg = QuantizationConfig { q: params.q, ..QuantizationConfig::default() };
    let models: Vec<TargetModel> = pairs
        .iter()
        .map(|p| build_target_model(&p.target, params.l_max, params.m_max, cfg, p.start))
        .collect::<Result<_>>()?;
    let qlats: Vec<QueryLattice> = pairs
        .iter()
        .map(|p| QueryLattice::new(&p.query, &cfg, params.m_max))
        .collect::<Result<_>>()?;

    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut skipped = 0;
    let mut kept = Vec::new();
    for _ in 0..options.max_iter {
        iterations += 1;
        let per_query: Vec<Option<(ExpectedCounts, f64)>> = models
            .par_iter()
            .zip(&qlats)
            .zip(pairs)
            .map(|((model, qlat), pair)| {
                let ctx = ScoringContext::new(model, &params).expect("validated params");
                accumulate_counts(&ctx, qlat, pair.start).ok()
            })
            .collect();
        let mut counts = ExpectedCounts::zeros(&params);
        let mut total_ll = 0.0;
        for item in &per_query {
            match item {
                Some((c, ll)) => {
                    counts.merge(c);
                    total_ll += ll;
                }
                None => counts.skipped += 1,
            }
        }
        if counts.queries == 0 {
            return Err(Error::NoScorableQueries);
        }
        skipped = counts.skipped;
        trace.push(total_ll);
        let (new_params, kept_now) = reestimate(&counts, &params, options);
        kept = kept_now;
        let delta = max_abs_change(&params, &new_params);
        params = new_params;
        if delta < options.tol {
            converged = true;
            break;
        }
    }
    Ok(TrainingReport {
        iterations,
        log_likelihood_trace: trace,
        converged,
        final_params: params,
        skipped_queries: skipped,
        kept_contexts: kept,
    })
}
