//! Acceptance suite: one test per criterion, each printing a PASS line
//! verdict. Run with `cargo test --test acceptance -- --nocapture` to see
//! the lines as they complete.

use std::sync::OnceLock;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use melmatch::evalrank::{
    self, discrete_entropy, gaussian_differential_entropy, mrr, rank_database, worst_case_rank,
    AlignmentPolicy, Database, RankOptions, ScoreMethod,
};
use melmatch::events::{
    dequantize_ioi, quantize_ioi, quantize_target_sequence, select_offset, QuantizationConfig,
    QuantizedEvent,
};
use melmatch::lattice::{
    brute_force_likelihood, forward, generic, viterbi, viterbi_bounded, BoundedViterbi,
    ScoringContext,
};
use melmatch::model::{
    build_target_model, discrete_normal, ErrorModelParams, ModelVariant, ALL_COMPONENTS,
    TEMPO_MAX, TEMPO_MIN, TRANS_MAX, TRANS_MIN,
};
use melmatch::simulate::{generate_database, sample_query, CorpusStats, SimulationConfig};
use melmatch::training::{train, TrainingOptions, TrainingPair};

const CFG: QuantizationConfig = QuantizationConfig { q: 29, ioi_min_ms: 30.0, ioi_max_ms: 3840.0 };

fn ev(pc: u8, bin: u8) -> QuantizedEvent {
    QuantizedEvent {
        pitch_class: pc,
        rhythm_bin: bin,
        raw_ioi_ms: dequantize_ioi(bin as usize, &CFG).unwrap(),
    }
}

fn random_events(rng: &mut StdRng, len: usize) -> Vec<QuantizedEvent> {
    (0..len).map(|_| ev(rng.gen_range(0..12), rng.gen_range(10..18))).collect()
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

/// Random parameters with narrowed cumulative supports, keeping tiny
/// instances inside the path-enumeration guard.
fn sparse_params(rng: &mut StdRng, tempo_width: i32) -> ErrorModelParams {
    let mut p = random_params(rng);
    for (i, v) in p.modulation[0].iter_mut().enumerate() {
        if (i as i32 + TRANS_MIN).abs() > 1 {
            *v = 0.0;
        }
    }
    let sum: f64 = p.modulation[0].iter().sum();
    p.modulation[0].iter_mut().for_each(|v| *v /= sum);
    for (i, v) in p.tempo_change[0].iter_mut().enumerate() {
        if (i as i32 + TEMPO_MIN).abs() > tempo_width {
            *v = 0.0;
        }
    }
    let sum: f64 = p.tempo_change[0].iter().sum();
    p.tempo_change[0].iter_mut().for_each(|v| *v /= sum);
    p
}

/// Generation model with predominantly local error: rare modulation and
/// tempo change, noticeable per-note pitch/rhythm error.
fn theta_star() -> ErrorModelParams {
    let mut p = ErrorModelParams::default_with(2, 2, 29);
    p.edit[0] = vec![0.96, 0.02, 0.02];
    let narrow = |min: i32, max: i32, spread: &[(i32, f64)]| -> Vec<f64> {
        let mut t = vec![0.0; (max - min + 1) as usize];
        for &(d, v) in spread {
            t[(d - min) as usize] = v;
        }
        t
    };
    p.modulation[0] = narrow(TRANS_MIN, TRANS_MAX, &[(-1, 0.015), (0, 0.97), (1, 0.015)]);
    p.tempo_change[0] = narrow(TEMPO_MIN, TEMPO_MAX, &[(-1, 0.015), (0, 0.97), (1, 0.015)]);
    let local = &[(-2, 0.03), (-1, 0.11), (0, 0.72), (1, 0.11), (2, 0.03)];
    p.pitch_error[0] = narrow(TRANS_MIN, TRANS_MAX, local);
    p.rhythm_error[0] = narrow(-28, 28, local);
    p
}

/// Multiplicative random perturbation of every table, renormalized.
fn perturb_params(base: &ErrorModelParams, seed: u64, strength: f64) -> ErrorModelParams {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut p = base.clone();
    for c in ALL_COMPONENTS {
        for dist in p.component_tables_mut(c) {
            for v in dist.iter_mut() {
                *v = (*v).max(1e-4) * rng.gen_range(-strength..strength).exp();
            }
            let sum: f64 = dist.iter().sum();
            for v in dist.iter_mut() {
                *v /= sum;
            }
        }
    }
    p
}

struct DeskScale {
    db: Database,
    train_pairs: Vec<TrainingPair>,
    /// Test queries with their true target ids.
    test: Vec<(Vec<QuantizedEvent>, usize)>,
    full: ErrorModelParams,
    local: ErrorModelParams,
    cumulative: ErrorModelParams,
}

static DESK: OnceLock<DeskScale> = OnceLock::new();

fn sample_set(
    targets: &[Vec<QuantizedEvent>],
    params: &ErrorModelParams,
    count: usize,
    seed_base: u64,
) -> Vec<(Vec<QuantizedEvent>, usize, usize)> {
    let mut picker = StdRng::seed_from_u64(seed_base);
    let mut out = Vec::new();
    for i in 0..count {
        let target_id = picker.gen_range(0..targets.len());
        let len = picker.gen_range(8..=10);
        let max_start = targets[target_id].len().saturating_sub(len);
        let start = picker.gen_range(0..=max_start);
        let sampled = sample_query(
            &targets[target_id],
            params,
            &CFG,
            start,
            len,
            seed_base.wrapping_add(7919 * (i as u64 + 1)),
        )
        .unwrap();
        out.push((sampled.events, target_id, start));
    }
    out
}

fn desk() -> &'static DeskScale {
    DESK.get_or_init(|| {
        let stats = CorpusStats::builtin_default(CFG.q);
        let sim = SimulationConfig {
            seed: 0xA11CE,
            database_size: 500,
            target_len: (20, 22),
            query_len: (8, 10),
        };
        let raw = generate_database(&stats, &CFG, &sim).unwrap();
        let targets: Vec<Vec<QuantizedEvent>> = raw
            .iter()
            .map(|t| quantize_target_sequence(t, &CFG).unwrap())
            .collect();
        let gen = theta_star();
        let train_pairs: Vec<TrainingPair> = sample_set(&targets, &gen, 80, 1000)
            .into_iter()
            .map(|(query, target_id, start)| TrainingPair {
                target: targets[target_id].clone(),
                query,
                start,
            })
            .collect();
        let test: Vec<(Vec<QuantizedEvent>, usize)> = sample_set(&targets, &gen, 50, 2000)
            .into_iter()
            .map(|(query, target_id, _)| (query, target_id))
            .collect();
        let init = ErrorModelParams::default_with(2, 2, 29);
        let opts = |variant| TrainingOptions { variant, max_iter: 30, ..Default::default() };
        let full = train(&train_pairs, &init, &opts(ModelVariant::Full)).unwrap().final_params;
        let local = train(&train_pairs, &init, &opts(ModelVariant::Local)).unwrap().final_params;
        let cumulative =
            train(&train_pairs, &init, &opts(ModelVariant::Cumulative)).unwrap().final_params;
        let db = Database::build(targets, 2, 2, CFG).unwrap();
        DeskScale { db, train_pairs, test, full, local, cumulative }
    })
}

fn ranks_under(params: &ErrorModelParams, desk: &DeskScale) -> Vec<usize> {
    let options = RankOptions {
        k: desk.db.len(),
        method: ScoreMethod::Forward,
        alignment: AlignmentPolicy::Max,
    };
    desk.test
        .iter()
        .map(|(query, target_id)| {
            let result = rank_database(params, &desk.db, query, &options).unwrap();
            worst_case_rank(&result.all_scores.unwrap(), *target_id)
        })
        .collect()
}

#[test]
fn criterion_1_gambler_oracle() {
    let dishonest = generic::dishonest_gambler();
    let rolls = generic::ROLLS_1_5_4;
    let p = generic::forward_generic(&dishonest, &rolls).unwrap();
    assert!((p - 5.78e-3).abs() < 1e-5, "dishonest forward {p}");
    let honest = generic::forward_generic(&generic::honest_gambler(), &rolls).unwrap();
    assert!((honest - 4.63e-3).abs() < 1e-5, "honest forward {honest}");
    let path_p = dishonest.path_probability(&[0, 0, 1], &rolls).unwrap();
    assert!((path_p - 1.25e-3).abs() < 1e-5, "path probability {path_p}");
    let (logp, path) = dishonest.viterbi(&rolls).unwrap();
    assert_eq!(path, vec![0, 0, 0]);
    assert!((logp.exp() - 3.75e-3).abs() < 1e-5, "viterbi {}", logp.exp());
    println!("criterion 1 (gambler oracle): PASS");
}

#[test]
fn criterion_2_offset_selection() {
    let (offset, rounded) = select_offset(&[48.4, 46.6, 44.4, 43.6]).unwrap();
    assert_eq!(offset, 0.5);
    assert_eq!(rounded, vec![49, 47, 45, 44]);
    println!("criterion 2 (offset selection): PASS");
}

#[test]
fn criterion_3_quantization_doubling_law() {
    for b in 0..=24usize {
        let ms = dequantize_ioi(b, &CFG).unwrap();
        assert_eq!(
            quantize_ioi(2.0 * ms, &CFG).unwrap() as usize,
            b + 4,
            "doubling from bin {b}"
        );
    }
    println!("criterion 3 (quantization doubling law): PASS");
}

#[test]
fn criterion_4_entropy_anchors() {
    let h1 = gaussian_differential_entropy(1.0).unwrap();
    let h2 = gaussian_differential_entropy(2.0).unwrap();
    assert!((h1 - 1.42).abs() < 0.01, "entropy(1) = {h1}");
    assert!((h2 - 1.77).abs() < 0.01, "entropy(2) = {h2}");
    let g = discrete_normal(-10, 10, 0.0, 1.0);
    let z = evalrank::convolve(&g, &g);
    let (_, var) = evalrank::distribution_moments(&z, -20);
    assert!((var - 2.0).abs() / 2.0 < 0.02, "convolved variance {var}");
    println!("criterion 4 (entropy anchors): PASS");
}

#[test]
fn criterion_5_oracle_equivalence() {
    let mut rng = StdRng::seed_from_u64(0x05);
    let mut checked = 0;
    while checked < 100 {
        let tempo_width = if checked % 2 == 0 { 0 } else { 1 };
        let t_len = if tempo_width == 0 { 1 + checked % 4 } else { 1 + checked % 3 };
        let params = sparse_params(&mut rng, tempo_width);
        let target = random_events(&mut rng, 2 + checked % 3);
        let model = build_target_model(&target, 2, 2, CFG, 0).unwrap();
        let ctx = ScoringContext::new(&model, &params).unwrap();
        let query = random_events(&mut rng, t_len);
        let fwd = forward(&ctx, &query, 0).unwrap().log_likelihood.exp();
        let brute = brute_force_likelihood(&ctx, &query, 0).unwrap();
        let denom = fwd.abs().max(brute.abs()).max(1e-300);
        assert!(
            (fwd - brute).abs() / denom < 1e-9,
            "instance {checked}: forward {fwd} vs brute force {brute}"
        );
        checked += 1;
    }
    println!("criterion 5 (oracle equivalence, {checked} instances): PASS");
}

#[test]
fn criterion_6_em_monotonicity() {
    let desk = desk();
    let base = ErrorModelParams::default_with(2, 2, 29);
    for init_seed in 0..3u64 {
        let init = perturb_params(&base, 0x600 + init_seed, 1.2);
        let report = train(
            &desk.train_pairs,
            &init,
            &TrainingOptions { max_iter: 25, ..Default::default() },
        )
        .unwrap();
        assert!(report.log_likelihood_trace.len() >= 2);
        for (i, w) in report.log_likelihood_trace.windows(2).enumerate() {
            assert!(
                w[1] >= w[0] - 1e-9,
                "init {init_seed}: trace decreased at iteration {i}: {} -> {}",
                w[0],
                w[1]
            );
        }
    }
    println!("criterion 6 (EM monotonicity over 3 random initializations): PASS");
}

#[test]
fn criterion_7_parameter_recovery() {
    let gen = theta_star();
    let stats = CorpusStats::builtin_default(CFG.q);
    let sim = SimulationConfig {
        seed: 0x07,
        database_size: 20,
        target_len: (18, 22),
        query_len: (12, 12),
    };
    let raw = generate_database(&stats, &CFG, &sim).unwrap();
    let targets: Vec<Vec<QuantizedEvent>> =
        raw.iter().map(|t| quantize_target_sequence(t, &CFG).unwrap()).collect();
    let mut pairs = Vec::new();
    let mut picker = StdRng::seed_from_u64(0x0700);
    for i in 0..200u64 {
        let target_id = picker.gen_range(0..targets.len());
        let len = 12.min(targets[target_id].len());
        let max_start = targets[target_id].len() - len;
        let start = picker.gen_range(0..=max_start);
        let sampled =
            sample_query(&targets[target_id], &gen, &CFG, start, len, 0x0700 + 31 * i).unwrap();
        pairs.push(TrainingPair { target: targets[target_id].clone(), query: sampled.events, start });
    }
    let init = perturb_params(&gen, 0x0701, 0.8);
    let report = train(
        &pairs,
        &init,
        &TrainingOptions { max_iter: 60, ..Default::default() },
    )
    .unwrap();
    let got = &report.final_params;
    for c in ALL_COMPONENTS {
        let l1: f64 = got.component_tables(c)[0]
            .iter()
            .zip(&gen.component_tables(c)[0])
            .map(|(a, b)| (a - b).abs())
            .sum();
        println!("criterion 7: {c:?} L1 distance {l1:.4}");
        assert!(l1 <= 0.1, "{c:?} recovered L1 {l1} exceeds 0.1");
    }
    println!("criterion 7 (parameter recovery within L1 0.1): PASS");
}

#[test]
fn criterion_8_desk_scale_retrieval() {
    let desk = desk();
    let full_ranks = ranks_under(&desk.full, desk);
    let full_mrr = mrr(&full_ranks).unwrap();
    let median = evalrank::median_rank(&full_ranks).unwrap();
    let cum_ranks = ranks_under(&desk.cumulative, desk);
    let cum_mrr = mrr(&cum_ranks).unwrap();
    let local_ranks = ranks_under(&desk.local, desk);
    let local_mrr = mrr(&local_ranks).unwrap();
    println!(
        "criterion 8: MRR full {full_mrr:.4}, local {local_mrr:.4}, cumulative {cum_mrr:.4}; \
         median worst-case rank {median}"
    );
    assert!(full_mrr >= 0.8, "full-variant MRR {full_mrr} below 0.8");
    assert_eq!(median, 1.0, "median worst-case rank {median}");
    assert!(
        cum_mrr < full_mrr,
        "cumulative MRR {cum_mrr} not strictly below full {full_mrr}"
    );
    println!("criterion 8 (desk-scale retrieval): PASS");
}

#[test]
fn criterion_9_prune_safety() {
    // Randomized admissibility: a pruned case always scores below its
    // floor, and an unpruned case returns the exact Viterbi result.
    let mut rng = StdRng::seed_from_u64(0x09);
    let mut cases = 0;
    while cases < 1000 {
        let params = random_params(&mut rng);
        let target = random_events(&mut rng, 3 + cases % 3);
        let model = build_target_model(&target, 2, 2, CFG, 0).unwrap();
        let ctx = ScoringContext::new(&model, &params).unwrap();
        let query = random_events(&mut rng, 3 + cases % 4);
        let truth = viterbi(&ctx, &query, 0).unwrap();
        for _ in 0..8 {
            let floor = truth.log_prob + rng.gen_range(-6.0..6.0);
            match viterbi_bounded(&ctx, &query, 0, floor).unwrap() {
                BoundedViterbi::Result(r) => assert_eq!(r.log_prob, truth.log_prob),
                BoundedViterbi::Pruned => assert!(
                    truth.log_prob < floor,
                    "pruned a case scoring {} with floor {floor}",
                    truth.log_prob
                ),
            }
            cases += 1;
        }
    }
    println!("criterion 9: {cases} randomized prune-safety cases clean");

    // Desk scale: bounded and unbounded Viterbi top-10 agree.
    let desk = desk();
    for (query, _) in desk.test.iter().take(10) {
        let opts = |prune| RankOptions {
            k: 10,
            method: ScoreMethod::Viterbi { prune },
            alignment: AlignmentPolicy::Max,
        };
        let unpruned = rank_database(&desk.full, &desk.db, query, &opts(false)).unwrap();
        let pruned = rank_database(&desk.full, &desk.db, query, &opts(true)).unwrap();
        assert_eq!(unpruned.entries.len(), pruned.entries.len());
        for (a, b) in unpruned.entries.iter().zip(&pruned.entries) {
            assert_eq!(a.target_id, b.target_id);
            assert!((a.log_likelihood - b.log_likelihood).abs() < 1e-12);
            assert_eq!(a.rank, b.rank);
        }
    }
    println!("criterion 9 (prune safety and bounded top-10 equivalence): PASS");
}

#[test]
fn criterion_10_structural_invariants() {
    let mut rng = StdRng::seed_from_u64(0x10);

    // Row-stochasticity of sampled transition rows on randomized models.
    for _ in 0..6 {
        let params = random_params(&mut rng);
        let model =
            build_target_model(&random_events(&mut rng, 5), 2, 2, CFG, 0).unwrap();
        let ctx = ScoringContext::new(&model, &params).unwrap();
        for _ in 0..25 {
            let e = rng.gen_range(0..model.num_edit_states());
            if model.successors(e).is_empty() {
                continue;
            }
            let x = model.state_index(e, rng.gen_range(0..12), rng.gen_range(0..9));
            let total: f64 =
                (0..ctx.num_states()).map(|y| ctx.transition_flat(x, y)).sum();
            assert!((total - 1.0).abs() < 1e-9, "row sum {total}");
        }
        // The edit constraint: Same, join, and elaboration probabilities
        // sum to one in every context.
        for dist in &params.edit {
            let s: f64 = dist.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    for trial in 0..10 {
        let params = random_params(&mut rng);
        let target = random_events(&mut rng, 5);
        let model = build_target_model(&target, 2, 2, CFG, 0).unwrap();
        let ctx = ScoringContext::new(&model, &params).unwrap();
        let query = random_events(&mut rng, 4 + trial % 3);

        // Transposition-shift invariance of the forward likelihood.
        let shift = 1 + (trial as u8) % 11;
        let shifted: Vec<QuantizedEvent> = query
            .iter()
            .map(|e| QuantizedEvent { pitch_class: (e.pitch_class + shift) % 12, ..*e })
            .collect();
        let a = forward(&ctx, &query, 0).unwrap();
        let b = forward(&ctx, &shifted, 0).unwrap();
        let denom = a.log_likelihood.abs().max(1.0);
        assert!(
            (a.log_likelihood - b.log_likelihood).abs() / denom < 1e-9,
            "shift {shift}: {} vs {}",
            a.log_likelihood,
            b.log_likelihood
        );

        // Viterbi never exceeds the forward likelihood.
        let vit = viterbi(&ctx, &query, 0).unwrap();
        assert!(vit.log_prob <= a.log_likelihood + 1e-9);

        // Alpha-beta consistency at every step.
        let bwd = melmatch::lattice::backward(&ctx, &query, 0, &a).unwrap();
        for t in 0..query.len() {
            let s: f64 = a.row(t).iter().zip(bwd.row(t)).map(|(&x, &y)| x * y).sum();
            assert!((s - 1.0).abs() < 1e-9, "alpha-beta product {s} at t={t}");
        }
    }
    println!("criterion 10 (structural invariants): PASS");
}

/// Companion to the retrieval criteria: the full model explains queries
/// with fewer local errors than the local-only model, so its trained
/// pitch-error table is sharper (lower entropy).
#[test]
fn trained_full_pitch_error_is_sharper() {
    let desk = desk();
    let h_full = discrete_entropy(&desk.full.pitch_error[0]).unwrap();
    let h_local = discrete_entropy(&desk.local.pitch_error[0]).unwrap();
    println!("pitch-error entropy: full {h_full:.4} vs local {h_local:.4}");
    assert!(h_full < h_local, "full {h_full} not sharper than local {h_local}");
}
