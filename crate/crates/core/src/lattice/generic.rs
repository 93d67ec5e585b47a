//! A dense generic HMM engine for small models.
//!
//! Used as a numeric oracle: worked small examples and the untied
//! single-table Baum-Welch step live here, so tests of the tied machinery
//! can check against an independent implementation.

use crate::error::{Error, Result};

/// A plain discrete HMM with dense transition and emission matrices.
#[derive(Debug, Clone)]
pub struct GenericHmm {
    pub n_states: usize,
    pub n_symbols: usize,
    /// Initial probabilities, length `n_states`.
    pub initial: Vec<f64>,
    /// Row-major transition matrix `a[from * n_states + to]`.
    pub transition: Vec<f64>,
    /// Row-major emission matrix `b[state * n_symbols + symbol]`.
    pub emission: Vec<f64>,
}

impl GenericHmm {
    pub fn new(
        n_states: usize,
        n_symbols: usize,
        initial: Vec<f64>,
        transition: Vec<f64>,
        emission: Vec<f64>,
    ) -> Result<Self> {
        if n_states == 0 || n_symbols == 0 {
            return Err(Error::InvalidParameter("empty state or symbol set".into()));
        }
        if initial.len() != n_states
            || transition.len() != n_states * n_states
            || emission.len() != n_states * n_symbols
        {
            return Err(Error::InvalidParameter("matrix dimensions do not match".into()));
        }
        let check = |name: &str, row: &[f64]| -> Result<()> {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidDistribution { name: name.into(), sum });
            }
            Ok(())
        };
        check("initial", &initial)?;
        for r in 0..n_states {
            check("transition", &transition[r * n_states..(r + 1) * n_states])?;
            check("emission", &emission[r * n_symbols..(r + 1) * n_symbols])?;
        }
        Ok(Self { n_states, n_symbols, initial, transition, emission })
    }

    fn a(&self, x: usize, y: usize) -> f64 {
        self.transition[x * self.n_states + y]
    }

    fn b(&self, x: usize, o: usize) -> f64 {
        self.emission[x * self.n_symbols + o]
    }

    /// Forward algorithm; returns the probability of the observations.
    pub fn forward(&self, obs: &[usize]) -> Result<f64> {
        if obs.is_empty() {
            return Err(Error::EmptySequence);
        }
        let n = self.n_states;
        let mut cur: Vec<f64> = (0..n).map(|x| self.initial[x] * self.b(x, obs[0])).collect();
        for &o in &obs[1..] {
            let mut next = vec![0.0; n];
            for (y, slot) in next.iter_mut().enumerate() {
                let mut acc = 0.0;
                for x in 0..n {
                    acc += cur[x] * self.a(x, y);
                }
                *slot = acc * self.b(y, o);
            }
            cur = next;
        }
        Ok(cur.iter().sum())
    }

    /// Backward variable table, `beta[t][x]`, with `beta[T-1][x] = 1`.
    pub fn backward(&self, obs: &[usize]) -> Result<Vec<Vec<f64>>> {
        if obs.is_empty() {
            return Err(Error::EmptySequence);
        }
        let n = self.n_states;
        let t_len = obs.len();
        let mut beta = vec![vec![1.0; n]; t_len];
        for t in (0..t_len - 1).rev() {
            for x in 0..n {
                let mut acc = 0.0;
                for y in 0..n {
                    acc += self.a(x, y) * self.b(y, obs[t + 1]) * beta[t + 1][y];
                }
                beta[t][x] = acc;
            }
        }
        Ok(beta)
    }

    /// Forward variable table, `alpha[t][x]` (unscaled).
    pub fn forward_table(&self, obs: &[usize]) -> Result<Vec<Vec<f64>>> {
        if obs.is_empty() {
            return Err(Error::EmptySequence);
        }
        let n = self.n_states;
        let mut alpha =
            vec![(0..n).map(|x| self.initial[x] * self.b(x, obs[0])).collect::<Vec<f64>>()];
        for &o in &obs[1..] {
            let prev = alpha.last().unwrap();
            let mut row = vec![0.0; n];
            for (y, slot) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for x in 0..n {
                    acc += prev[x] * self.a(x, y);
                }
                *slot = acc * self.b(y, o);
            }
            alpha.push(row);
        }
        Ok(alpha)
    }

    /// Probability of one specific state path generating the observations.
    pub fn path_probability(&self, path: &[usize], obs: &[usize]) -> Result<f64> {
        if path.len() != obs.len() || path.is_empty() {
            return Err(Error::InvalidInput("path and observations must align".into()));
        }
        let mut p = self.initial[path[0]] * self.b(path[0], obs[0]);
        for t in 1..path.len() {
            p *= self.a(path[t - 1], path[t]) * self.b(path[t], obs[t]);
        }
        Ok(p)
    }

    /// Exhaustive sum over all paths with structurally nonzero probability.
    pub fn brute_force(&self, obs: &[usize]) -> Result<f64> {
        if obs.is_empty() {
            return Err(Error::EmptySequence);
        }
        let mut total = 0.0;
        let mut stack: Vec<(usize, usize, f64)> = (0..self.n_states)
            .filter(|&x| self.initial[x] > 0.0)
            .map(|x| (0, x, self.initial[x] * self.b(x, obs[0])))
            .collect();
        while let Some((t, x, p)) = stack.pop() {
            if t + 1 == obs.len() {
                total += p;
                continue;
            }
            for y in 0..self.n_states {
                let a = self.a(x, y);
                if a > 0.0 {
                    stack.push((t + 1, y, p * a * self.b(y, obs[t + 1])));
                }
            }
        }
        Ok(total)
    }

    /// Log-space Viterbi; returns the best path and its log probability.
    pub fn viterbi(&self, obs: &[usize]) -> Result<(f64, Vec<usize>)> {
        if obs.is_empty() {
            return Err(Error::EmptySequence);
        }
        let n = self.n_states;
        let t_len = obs.len();
        let mut delta: Vec<f64> =
            (0..n).map(|x| (self.initial[x] * self.b(x, obs[0])).ln()).collect();
        let mut back = vec![vec![0usize; n]; t_len];
        for (t, &o) in obs.iter().enumerate().skip(1) {
            let mut next = vec![f64::NEG_INFINITY; n];
            for y in 0..n {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for x in 0..n {
                    let cand = delta[x] + self.a(x, y).ln();
                    if cand > best {
                        best = cand;
                        arg = x;
                    }
                }
                next[y] = best + self.b(y, o).ln();
                back[t][y] = arg;
            }
            delta = next;
        }
        let (mut best_state, mut best) = (0, f64::NEG_INFINITY);
        for (x, &v) in delta.iter().enumerate() {
            if v > best {
                best = v;
                best_state = x;
            }
        }
        if best == f64::NEG_INFINITY {
            return Ok((f64::NEG_INFINITY, Vec::new()));
        }
        let mut path = vec![0usize; t_len];
        path[t_len - 1] = best_state;
        for t in (0..t_len - 1).rev() {
            path[t] = back[t + 1][path[t + 1]];
        }
        Ok((best, path))
    }

    /// One full untied Baum-Welch update over a set of observation
    /// sequences: new initial, transition, and emission estimates from the
    /// expected counts.
    pub fn baum_welch_step(&self, sequences: &[Vec<usize>]) -> Result<GenericHmm> {
        let n = self.n_states;
        let m = self.n_symbols;
        let mut pi_acc = vec![0.0; n];
        let mut trans_num = vec![0.0; n * n];
        let mut trans_den = vec![0.0; n];
        let mut emit_num = vec![0.0; n * m];
        let mut emit_den = vec![0.0; n];
        for obs in sequences {
            let alpha = self.forward_table(obs)?;
            let beta = self.backward(obs)?;
            let total: f64 = alpha[obs.len() - 1].iter().sum();
            if total <= 0.0 {
                return Err(Error::ZeroProbabilityQuery);
            }
            for t in 0..obs.len() {
                for x in 0..n {
                    let gamma = alpha[t][x] * beta[t][x] / total;
                    if t == 0 {
                        pi_acc[x] += gamma;
                    }
                    emit_num[x * m + obs[t]] += gamma;
                    emit_den[x] += gamma;
                    if t + 1 < obs.len() {
                        trans_den[x] += gamma;
                        for y in 0..n {
                            let xi = alpha[t][x]
                                * self.a(x, y)
                                * self.b(y, obs[t + 1])
                                * beta[t + 1][y]
                                / total;
                            trans_num[x * n + y] += xi;
                        }
                    }
                }
            }
        }
        let total_pi: f64 = pi_acc.iter().sum();
        let initial: Vec<f64> = pi_acc.iter().map(|&v| v / total_pi).collect();
        let mut transition = self.transition.clone();
        for x in 0..n {
            if trans_den[x] > 0.0 {
                for y in 0..n {
                    transition[x * n + y] = trans_num[x * n + y] / trans_den[x];
                }
            }
        }
        let mut emission = self.emission.clone();
        for x in 0..n {
            if emit_den[x] > 0.0 {
                for o in 0..m {
                    emission[x * m + o] = emit_num[x * m + o] / emit_den[x];
                }
            }
        }
        GenericHmm::new(n, m, initial, transition, emission)
    }
}

/// Forward probability of an observation sequence under a generic HMM.
pub fn forward_generic(hmm: &GenericHmm, observations: &[usize]) -> Result<f64> {
    hmm.forward(observations)
}

/// The two-state fair/loaded dice model: state 0 keeps a fair die, state 1 a
/// die loaded toward symbol 3 (a roll of four); play always starts fair.
pub fn dishonest_gambler() -> GenericHmm {
    let fair = 1.0 / 6.0;
    GenericHmm::new(
        2,
        6,
        vec![1.0, 0.0],
        vec![0.9, 0.1, 0.1, 0.9],
        vec![fair, fair, fair, fair, fair, fair, 0.1, 0.1, 0.1, 0.5, 0.1, 0.1],
    )
    .unwrap()
}

/// A single-state model rolling only the fair die.
pub fn honest_gambler() -> GenericHmm {
    let fair = 1.0 / 6.0;
    GenericHmm::new(1, 6, vec![1.0], vec![1.0], vec![fair; 6]).unwrap()
}

/// Symbol indices of the roll sequence 1, 5, 4.
pub const ROLLS_1_5_4: [usize; 3] = [0, 4, 3];
