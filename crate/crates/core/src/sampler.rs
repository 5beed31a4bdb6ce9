//! No-U-Turn Hamiltonian Monte Carlo with dual-averaging step-size
//! adaptation and diagonal mass-matrix estimation over expanding warmup
//! windows; multi-chain orchestration with per-chain RNG substreams.
//!
//! Trajectories double multiplicatively until the generalized U-turn
//! criterion fails or the depth cap is reached; the next state is drawn by
//! multinomial sampling over the trajectory with a bias toward the newer
//! half. A leapfrog step whose energy error exceeds the divergence threshold
//! flags the transition divergent; divergence is data, not failure.
//!
//! Chains are keyed to `base seed + chain index` ChaCha substreams, so
//! results are identical whether chains run serially or in parallel.

use crate::posterior::Posterior;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A differentiable log-density the sampler can draw from.
pub trait Target: Sync {
    fn dim(&self) -> usize;
    /// Log density (up to a constant) and its gradient at `position`.
    fn logp_grad(&self, position: &[f64], grad: &mut [f64]) -> f64;
    /// Human-readable coordinate name for error reporting.
    fn coordinate_name(&self, k: usize) -> String {
        format!("coordinate {k}")
    }
}

impl Target for Posterior {
    fn dim(&self) -> usize {
        self.dim()
    }

    fn logp_grad(&self, position: &[f64], grad: &mut [f64]) -> f64 {
        Posterior::logp_grad(self, position, grad)
    }

    fn coordinate_name(&self, k: usize) -> String {
        self.unconstrained_names()
            .get(k)
            .cloned()
            .unwrap_or_else(|| format!("coordinate {k}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub chains: usize,
    pub iterations: usize,
    pub warmup: usize,
    pub adapt_delta: f64,
    pub max_treedepth: usize,
    pub divergence_threshold: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            chains: 4,
            iterations: 2000,
            warmup: 1000,
            adapt_delta: 0.8,
            max_treedepth: 10,
            divergence_threshold: 1000.0,
            seed: 1,
        }
    }
}

/// Warmup schedule constants: step-size-only head, doubling covariance
/// windows, step-size-only tail.
const INIT_BUFFER: usize = 75;
const TERM_BUFFER: usize = 50;
const BASE_WINDOW: usize = 25;

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.chains == 0 {
            return Err(SamplerError::BadConfig("chains must be >= 1".into()));
        }
        if self.warmup >= self.iterations {
            return Err(SamplerError::BadConfig(format!(
                "warmup ({}) must be smaller than iterations ({})",
                self.warmup, self.iterations
            )));
        }
        if self.warmup < INIT_BUFFER + BASE_WINDOW + TERM_BUFFER {
            return Err(SamplerError::WarmupTooShort {
                warmup: self.warmup,
                minimum: INIT_BUFFER + BASE_WINDOW + TERM_BUFFER,
            });
        }
        if !(self.adapt_delta > 0.0 && self.adapt_delta < 1.0) {
            return Err(SamplerError::BadConfig(format!(
                "adapt_delta must lie in (0, 1), got {}",
                self.adapt_delta
            )));
        }
        if self.max_treedepth == 0 || self.max_treedepth > 16 {
            return Err(SamplerError::BadConfig(
                "max_treedepth must lie in 1..=16".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("sampler: {0}")]
    BadConfig(String),
    #[error("sampler: warmup of {warmup} is too short for the window schedule (minimum {minimum})")]
    WarmupTooShort { warmup: usize, minimum: usize },
    #[error(
        "sampler: chain {chain} failed to initialize after {attempts} attempts; \
         worst coordinate: {coordinate}"
    )]
    InitializationFailed {
        chain: usize,
        attempts: usize,
        coordinate: String,
    },
    #[error("sampler: could not find a workable initial step size (eps = {0})")]
    StepSizeSearchFailed(f64),
}

/// Per-draw sampler statistics.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DrawStats {
    pub divergent: bool,
    pub treedepth: usize,
    pub accept: f64,
    pub energy: f64,
}

/// Post-warmup draws and statistics of a single chain.
#[derive(Debug, Clone)]
pub struct ChainDraws {
    pub draws: Vec<Vec<f64>>,
    pub stats: Vec<DrawStats>,
    pub step_size: f64,
    pub inv_mass: Vec<f64>,
}

/// All chains of one run; draws are on the unconstrained scale.
#[derive(Debug, Clone)]
pub struct PosteriorDraws {
    pub chains: Vec<ChainDraws>,
    pub dim: usize,
    pub config: SamplerConfig,
}

impl PosteriorDraws {
    pub fn draws_per_chain(&self) -> usize {
        self.chains.first().map_or(0, |c| c.draws.len())
    }

    pub fn divergent_count(&self) -> usize {
        self.chains
            .iter()
            .flat_map(|c| c.stats.iter())
            .filter(|s| s.divergent)
            .count()
    }

    pub fn treedepth_saturation_count(&self) -> usize {
        self.chains
            .iter()
            .flat_map(|c| c.stats.iter())
            .filter(|s| s.treedepth >= self.config.max_treedepth)
            .count()
    }

    /// Post-warmup mean acceptance statistic across all chains.
    pub fn mean_accept(&self) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for c in &self.chains {
            for s in &c.stats {
                sum += s.accept;
                n += 1;
            }
        }
        sum / n.max(1) as f64
    }

    /// Per-chain series of one coordinate, for diagnostics.
    pub fn coordinate_series(&self, k: usize) -> Vec<Vec<f64>> {
        self.chains
            .iter()
            .map(|c| c.draws.iter().map(|d| d[k]).collect())
            .collect()
    }
}

fn logaddexp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

#[derive(Clone)]
struct State {
    q: Vec<f64>,
    p: Vec<f64>,
    grad: Vec<f64>,
    logp: f64,
}

struct Machine<'a, T: Target> {
    target: &'a T,
    inv_mass: Vec<f64>,
    divergence_threshold: f64,
}

impl<'a, T: Target> Machine<'a, T> {
    fn kinetic(&self, p: &[f64]) -> f64 {
        0.5 * p
            .iter()
            .zip(&self.inv_mass)
            .map(|(pi, im)| pi * pi * im)
            .sum::<f64>()
    }

    fn energy(&self, st: &State) -> f64 {
        -st.logp + self.kinetic(&st.p)
    }

    fn p_sharp(&self, st: &State) -> Vec<f64> {
        st.p
            .iter()
            .zip(&self.inv_mass)
            .map(|(pi, im)| pi * im)
            .collect()
    }

    fn leapfrog(&self, st: &mut State, eps: f64) {
        for (pi, gi) in st.p.iter_mut().zip(&st.grad) {
            *pi += 0.5 * eps * gi;
        }
        for ((qi, pi), im) in st.q.iter_mut().zip(&st.p).zip(&self.inv_mass) {
            *qi += eps * pi * im;
        }
        st.logp = self.target.logp_grad(&st.q, &mut st.grad);
        for (pi, gi) in st.p.iter_mut().zip(&st.grad) {
            *pi += 0.5 * eps * gi;
        }
    }

    fn sample_momentum<R: Rng>(&self, rng: &mut R, p: &mut [f64]) {
        for (pi, im) in p.iter_mut().zip(&self.inv_mass) {
            let z: f64 = StandardNormal.sample(rng);
            *pi = z / im.sqrt();
        }
    }
}

fn criterion(p_sharp_a: &[f64], p_sharp_b: &[f64], rho: &[f64]) -> bool {
    let da: f64 = p_sharp_a.iter().zip(rho).map(|(a, r)| a * r).sum();
    let db: f64 = p_sharp_b.iter().zip(rho).map(|(b, r)| b * r).sum();
    da > 0.0 && db > 0.0
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

struct Tree {
    /// Earliest state of the subtree in integration order.
    begin: State,
    /// Latest state in integration order.
    end: State,
    proposal: State,
    proposal_energy: f64,
    rho: Vec<f64>,
    log_sum_weight: f64,
    ok: bool,
}

struct TransitionScratch {
    n_leapfrog: usize,
    sum_metro: f64,
    divergent: bool,
}

#[allow(clippy::too_many_arguments)]
fn build_tree<T: Target, R: Rng>(
    machine: &Machine<T>,
    depth: usize,
    start: &State,
    dir: f64,
    eps: f64,
    h0: f64,
    rng: &mut R,
    scratch: &mut TransitionScratch,
) -> Tree {
    if depth == 0 {
        let mut st = start.clone();
        machine.leapfrog(&mut st, dir * eps);
        let h = machine.energy(&st);
        let delta = h0 - h; // log weight relative to the initial point
        let divergent = !h.is_finite() || (h - h0) > machine.divergence_threshold;
        scratch.n_leapfrog += 1;
        scratch.sum_metro += delta.min(0.0).exp();
        if divergent {
            scratch.divergent = true;
        }
        let rho = st.p.clone();
        return Tree {
            begin: st.clone(),
            end: st.clone(),
            proposal_energy: h,
            proposal: st,
            rho,
            log_sum_weight: if divergent { f64::NEG_INFINITY } else { delta },
            ok: !divergent,
        };
    }

    let first = build_tree(machine, depth - 1, start, dir, eps, h0, rng, scratch);
    if !first.ok {
        return first;
    }
    let second = build_tree(machine, depth - 1, &first.end, dir, eps, h0, rng, scratch);
    if !second.ok {
        return second;
    }

    let total = logaddexp(first.log_sum_weight, second.log_sum_weight);
    let take_second =
        (rng.random::<f64>()).ln() < second.log_sum_weight - total;
    let (proposal, proposal_energy) = if take_second {
        (second.proposal, second.proposal_energy)
    } else {
        (first.proposal, first.proposal_energy)
    };

    let rho = add(&first.rho, &second.rho);
    let ps_begin = machine.p_sharp(&first.begin);
    let ps_end = machine.p_sharp(&second.end);
    let ps_first_end = machine.p_sharp(&first.end);
    let ps_second_begin = machine.p_sharp(&second.begin);
    let mut ok = criterion(&ps_begin, &ps_end, &rho);
    ok &= criterion(
        &ps_begin,
        &ps_second_begin,
        &add(&first.rho, &second.begin.p),
    );
    ok &= criterion(&ps_first_end, &ps_end, &add(&second.rho, &first.end.p));

    Tree {
        begin: first.begin,
        end: second.end,
        proposal,
        proposal_energy,
        rho,
        log_sum_weight: total,
        ok,
    }
}

/// One NUTS transition from `position`. Returns the new position and draw
/// statistics; exposed for targeted tests and diagnostics.
pub fn nuts_transition<T: Target, R: Rng>(
    target: &T,
    position: &mut Vec<f64>,
    step_size: f64,
    inv_mass: &[f64],
    max_treedepth: usize,
    divergence_threshold: f64,
    rng: &mut R,
) -> DrawStats {
    let machine = Machine {
        target,
        inv_mass: inv_mass.to_vec(),
        divergence_threshold,
    };
    let dim = position.len();
    let mut grad = vec![0.0; dim];
    let logp = target.logp_grad(position, &mut grad);
    let mut current = State {
        q: position.clone(),
        p: vec![0.0; dim],
        grad,
        logp,
    };
    machine.sample_momentum(rng, &mut current.p);
    let h0 = machine.energy(&current);

    let mut left = current.clone();
    let mut right = current.clone();
    let mut rho = current.p.clone();
    let mut sample = current.clone();
    let mut sample_energy = h0;
    let mut log_sum_weight = 0.0;
    let mut scratch = TransitionScratch {
        n_leapfrog: 0,
        sum_metro: 0.0,
        divergent: false,
    };
    let mut depth = 0usize;

    while depth < max_treedepth {
        let forward = rng.random::<f64>() < 0.5;
        let dir = if forward { 1.0 } else { -1.0 };
        let start = if forward { &right } else { &left };
        let tree = build_tree(&machine, depth, start, dir, step_size, h0, rng, &mut scratch);
        if !tree.ok {
            break;
        }
        // biased progressive sampling toward the new subtree
        if tree.log_sum_weight > log_sum_weight
            || (rng.random::<f64>()).ln() < tree.log_sum_weight - log_sum_weight
        {
            sample = tree.proposal.clone();
            sample_energy = tree.proposal_energy;
        }
        log_sum_weight = logaddexp(log_sum_weight, tree.log_sum_weight);
        depth += 1;

        // U-turn over the merged trajectory plus the boundary cross-checks
        let (old_rho, old_boundary) = if forward {
            (rho.clone(), right.clone())
        } else {
            (rho.clone(), left.clone())
        };
        rho = add(&rho, &tree.rho);
        if forward {
            right = tree.end.clone();
        } else {
            left = tree.end.clone();
        }
        let ps_left = machine.p_sharp(&left);
        let ps_right = machine.p_sharp(&right);
        let mut persist = criterion(&ps_left, &ps_right, &rho);
        let ps_new_begin = machine.p_sharp(&tree.begin);
        let ps_old_boundary = machine.p_sharp(&old_boundary);
        if forward {
            persist &= criterion(&ps_left, &ps_new_begin, &add(&old_rho, &tree.begin.p));
            persist &= criterion(
                &ps_old_boundary,
                &ps_right,
                &add(&tree.rho, &old_boundary.p),
            );
        } else {
            persist &= criterion(&ps_new_begin, &ps_right, &add(&old_rho, &tree.begin.p));
            persist &= criterion(
                &ps_left,
                &ps_old_boundary,
                &add(&tree.rho, &old_boundary.p),
            );
        }
        if !persist {
            break;
        }
    }

    *position = sample.q;
    DrawStats {
        divergent: scratch.divergent,
        treedepth: depth,
        accept: if scratch.n_leapfrog > 0 {
            scratch.sum_metro / scratch.n_leapfrog as f64
        } else {
            0.0
        },
        energy: sample_energy,
    }
}

/// Dual-averaging state (Nesterov-style) driving the mean acceptance
/// statistic toward the target.
struct DualAveraging {
    mu: f64,
    log_eps: f64,
    log_eps_bar: f64,
    h_bar: f64,
    count: f64,
    delta: f64,
}

const DA_GAMMA: f64 = 0.05;
const DA_T0: f64 = 10.0;
const DA_KAPPA: f64 = 0.75;

impl DualAveraging {
    fn new(eps: f64, delta: f64) -> Self {
        DualAveraging {
            mu: (10.0 * eps).ln(),
            log_eps: eps.ln(),
            log_eps_bar: 0.0,
            h_bar: 0.0,
            count: 0.0,
            delta,
        }
    }

    fn update(&mut self, accept: f64) {
        self.count += 1.0;
        let frac = 1.0 / (self.count + DA_T0);
        self.h_bar = (1.0 - frac) * self.h_bar + frac * (self.delta - accept);
        self.log_eps = self.mu - self.h_bar * self.count.sqrt() / DA_GAMMA;
        let w = self.count.powf(-DA_KAPPA);
        self.log_eps_bar = w * self.log_eps + (1.0 - w) * self.log_eps_bar;
    }
}

/// Running mean/variance accumulator for mass-matrix windows.
struct Welford {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Welford {
            n: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn add(&mut self, x: &[f64]) {
        self.n += 1.0;
        for k in 0..x.len() {
            let d = x[k] - self.mean[k];
            self.mean[k] += d / self.n;
            self.m2[k] += d * (x[k] - self.mean[k]);
        }
    }

    /// Regularized variance estimate, shrunk toward 1e-3 for short windows.
    fn regularized_variance(&self) -> Vec<f64> {
        let n = self.n;
        self.m2
            .iter()
            .map(|m2| {
                let var = if n > 1.0 { m2 / (n - 1.0) } else { 1.0 };
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }
}

fn find_reasonable_epsilon<T: Target, R: Rng>(
    machine: &Machine<T>,
    state: &State,
    rng: &mut R,
) -> Result<f64, SamplerError> {
    let mut eps = 1.0;
    let half_log = 0.5f64.ln();
    let probe = |eps: f64, rng: &mut R| -> f64 {
        let mut st = state.clone();
        machine.sample_momentum(rng, &mut st.p);
        let h0 = machine.energy(&st);
        machine.leapfrog(&mut st, eps);
        let h = machine.energy(&st);
        if h.is_finite() {
            h0 - h
        } else {
            f64::NEG_INFINITY
        }
    };
    let mut dh = probe(eps, rng);
    let go_up = dh > half_log;
    for _ in 0..100 {
        if go_up && dh <= half_log {
            return Ok(eps);
        }
        if !go_up && dh >= half_log {
            return Ok(eps);
        }
        eps *= if go_up { 2.0 } else { 0.5 };
        if !(1e-12..=1e7).contains(&eps) {
            return Err(SamplerError::StepSizeSearchFailed(eps));
        }
        dh = probe(eps, rng);
    }
    Ok(eps)
}

/// End indices (exclusive) of the covariance windows inside warmup.
fn window_ends(warmup: usize) -> Vec<usize> {
    let adapt_end = warmup - TERM_BUFFER;
    let mut ends = Vec::new();
    let mut start = INIT_BUFFER;
    let mut size = BASE_WINDOW;
    while start < adapt_end {
        let mut end = start + size;
        // extend the last window to the end of the adaptation phase
        if end + 2 * size > adapt_end {
            end = adapt_end;
        }
        ends.push(end);
        start = end;
        size *= 2;
    }
    ends
}

/// Warmup one chain: returns the adapted step size and inverse mass.
/// The chain state is advanced in place.
pub fn adapt_warmup<T: Target, R: Rng>(
    target: &T,
    position: &mut Vec<f64>,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<(f64, Vec<f64>), SamplerError> {
    config.validate()?;
    let dim = target.dim();
    let mut inv_mass = vec![1.0; dim];
    let mut grad = vec![0.0; dim];
    let logp = target.logp_grad(position, &mut grad);
    let mut machine = Machine {
        target,
        inv_mass: inv_mass.clone(),
        divergence_threshold: config.divergence_threshold,
    };
    let state = State {
        q: position.clone(),
        p: vec![0.0; dim],
        grad,
        logp,
    };
    let mut eps = find_reasonable_epsilon(&machine, &state, rng)?;
    let mut da = DualAveraging::new(eps, config.adapt_delta);
    let mut welford = Welford::new(dim);
    let ends = window_ends(config.warmup);
    let mut window_idx = 0usize;
    let adapt_end = config.warmup - TERM_BUFFER;

    for m in 0..config.warmup {
        let stats = nuts_transition(
            target,
            position,
            eps,
            &inv_mass,
            config.max_treedepth,
            config.divergence_threshold,
            rng,
        );
        da.update(stats.accept);
        eps = da.log_eps.exp();

        if m >= INIT_BUFFER && m < adapt_end {
            welford.add(position);
            if window_idx < ends.len() && m + 1 == ends[window_idx] {
                inv_mass = welford.regularized_variance();
                machine.inv_mass = inv_mass.clone();
                welford = Welford::new(dim);
                window_idx += 1;
                // re-seed the step size for the new metric
                let mut grad = vec![0.0; dim];
                let logp = target.logp_grad(position, &mut grad);
                let st = State {
                    q: position.clone(),
                    p: vec![0.0; dim],
                    grad,
                    logp,
                };
                eps = find_reasonable_epsilon(&machine, &st, rng)?;
                da = DualAveraging::new(eps, config.adapt_delta);
            }
        }
    }
    Ok((da.log_eps_bar.exp(), inv_mass))
}

fn initialize_chain<T: Target, R: Rng>(
    target: &T,
    chain: usize,
    rng: &mut R,
) -> Result<Vec<f64>, SamplerError> {
    let dim = target.dim();
    let mut grad = vec![0.0; dim];
    let mut worst = 0usize;
    for _ in 0..100 {
        let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let logp = target.logp_grad(&q, &mut grad);
        if logp.is_finite() && grad.iter().all(|g| g.is_finite()) {
            return Ok(q);
        }
        worst = grad
            .iter()
            .enumerate()
            .find(|(_, g)| !g.is_finite())
            .map(|(k, _)| k)
            .unwrap_or_else(|| {
                grad.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
                    .map(|(k, _)| k)
                    .unwrap_or(0)
            });
    }
    Err(SamplerError::InitializationFailed {
        chain,
        attempts: 100,
        coordinate: target.coordinate_name(worst),
    })
}

fn run_one_chain<T: Target>(
    target: &T,
    config: &SamplerConfig,
    chain: usize,
) -> Result<ChainDraws, SamplerError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1 + chain as u64);
    let mut position = initialize_chain(target, chain, &mut rng)?;
    let (step_size, inv_mass) = adapt_warmup(target, &mut position, config, &mut rng)?;

    let n_draws = config.iterations - config.warmup;
    let mut draws = Vec::with_capacity(n_draws);
    let mut stats = Vec::with_capacity(n_draws);
    for _ in 0..n_draws {
        let s = nuts_transition(
            target,
            &mut position,
            step_size,
            &inv_mass,
            config.max_treedepth,
            config.divergence_threshold,
            &mut rng,
        );
        draws.push(position.clone());
        stats.push(s);
    }
    Ok(ChainDraws {
        draws,
        stats,
        step_size,
        inv_mass,
    })
}

/// Run all chains. Chains use independent RNG substreams and may execute
/// in parallel; output is identical either way.
pub fn run_chains<T: Target>(
    target: &T,
    config: &SamplerConfig,
) -> Result<PosteriorDraws, SamplerError> {
    config.validate()?;
    let chains: Result<Vec<ChainDraws>, SamplerError> = (0..config.chains)
        .into_par_iter()
        .map(|chain| run_one_chain(target, config, chain))
        .collect();
    Ok(PosteriorDraws {
        chains: chains?,
        dim: target.dim(),
        config: config.clone(),
    })
}
