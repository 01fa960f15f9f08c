//! No-U-Turn sampler with multinomial trajectory sampling, the generalized
//! U-turn criterion (including the checks across merged subtrees), dual
//! averaging step-size adaptation and a windowed diagonal mass matrix.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::density::{DensityError, LogDensity};
use super::draws::{ChainStats, PosteriorDraws};
use crate::math::log_sum_exp;
use crate::scalar::Real;

/// Jittered re-initializations tried before giving up on a chain.
pub const MAX_INIT_ATTEMPTS: usize = 100;
/// Energy error beyond which a trajectory is declared divergent.
const MAX_DELTA_H: f64 = 1000.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub chains: usize,
    pub warmup: usize,
    pub draws: usize,
    pub seed: u64,
    pub target_accept: f64,
    pub max_tree_depth: usize,
    /// Standard deviation of the N(0, jitter²) initial point.
    pub init_jitter: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            chains: 2,
            warmup: 1000,
            draws: 1000,
            seed: 0,
            target_accept: 0.8,
            max_tree_depth: 10,
            init_jitter: 0.1,
        }
    }
}

impl SamplerConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_budget(mut self, warmup: usize, draws: usize) -> Self {
        self.warmup = warmup;
        self.draws = draws;
        self
    }

    pub fn with_chains(mut self, chains: usize) -> Self {
        self.chains = chains;
        self
    }

    fn validate(&self) -> Result<(), SamplerError> {
        let bad = |m: &str| Err(SamplerError::Config(m.to_string()));
        if self.chains < 2 {
            return bad("at least 2 chains are required");
        }
        if self.warmup < 1 || self.draws < 1 {
            return bad("warmup and draws must both be at least 1");
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return bad("target acceptance must lie in (0, 1)");
        }
        if self.max_tree_depth == 0 {
            return bad("max tree depth must be positive");
        }
        if !(self.init_jitter >= 0.0) {
            return bad("init jitter must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("invalid sampler configuration: {0}")]
    Config(String),
    #[error("no finite initial density after {attempts} jittered initializations ({last})")]
    Init { attempts: usize, last: DensityError },
    #[error("every warmup transition diverged in chain {chain}")]
    AllDivergent { chain: usize },
}

#[derive(Clone, Debug)]
struct Point<T> {
    q: Vec<T>,
    p: Vec<T>,
    grad: Vec<T>,
    logp: T,
}

fn kinetic<T: Real>(p: &[T], inv_mass: &[T]) -> T {
    p.iter().zip(inv_mass).map(|(&p, &m)| p * p * m).sum::<T>() * T::lit(0.5)
}

fn energy<T: Real>(z: &Point<T>, inv_mass: &[T]) -> T {
    let h = -z.logp + kinetic(&z.p, inv_mass);
    if h.is_nan() {
        T::infinity()
    } else {
        h
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn criterion<T: Real>(p_sharp_minus: &[T], p_sharp_plus: &[T], rho: &[T]) -> bool {
    dot(p_sharp_plus, rho) > T::zero() && dot(p_sharp_minus, rho) > T::zero()
}

fn add<T: Real>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

fn sample_momentum<T: Real>(p: &mut [T], inv_mass: &[T], rng: &mut ChaCha8Rng) {
    for (pi, &m) in p.iter_mut().zip(inv_mass) {
        let z: f64 = StandardNormal.sample(rng);
        *pi = T::lit(z) / m.sqrt();
    }
}

/// One velocity-Verlet step. A failed density evaluation leaves the point at
/// `logp = −∞`, which the caller treats as a divergence.
pub(crate) fn leapfrog<T: Real, D: LogDensity<T> + ?Sized>(
    density: &D,
    q: &mut [T],
    p: &mut [T],
    grad: &mut [T],
    inv_mass: &[T],
    eps: T,
) -> T {
    let half = eps * T::lit(0.5);
    for (pi, &g) in p.iter_mut().zip(grad.iter()) {
        *pi += half * g;
    }
    for ((qi, &pi), &m) in q.iter_mut().zip(p.iter()).zip(inv_mass) {
        *qi += eps * m * pi;
    }
    match density.logp_and_grad(q, grad) {
        Ok(lp) => {
            for (pi, &g) in p.iter_mut().zip(grad.iter()) {
                *pi += half * g;
            }
            lp
        }
        Err(_) => T::neg_infinity(),
    }
}

struct TreeBuilder<'a, T: Real, D: ?Sized> {
    density: &'a D,
    inv_mass: &'a [T],
    eps: T,
    h0: T,
    n_leapfrog: usize,
    sum_metro_prob: f64,
    divergent: bool,
}

impl<T: Real, D: LogDensity<T> + ?Sized> TreeBuilder<'_, T, D> {
    fn step(&self, z: &mut Point<T>, eps: T) {
        z.logp = leapfrog(
            self.density,
            &mut z.q,
            &mut z.p,
            &mut z.grad,
            self.inv_mass,
            eps,
        );
    }

    fn p_sharp(&self, p: &[T]) -> Vec<T> {
        p.iter().zip(self.inv_mass).map(|(&p, &m)| p * m).collect()
    }

    /// Extend the trajectory by `2^depth` leapfrog steps from `z` in direction
    /// `sign`. Returns false when the subtree diverged or made a U-turn.
    #[allow(clippy::too_many_arguments)]
    fn build(
        &mut self,
        depth: usize,
        z: &mut Point<T>,
        z_propose: &mut Point<T>,
        p_sharp_beg: &mut Vec<T>,
        p_sharp_end: &mut Vec<T>,
        rho: &mut Vec<T>,
        p_beg: &mut Vec<T>,
        p_end: &mut Vec<T>,
        sign: T,
        log_sum_weight: &mut T,
        rng: &mut ChaCha8Rng,
    ) -> bool {
        if depth == 0 {
            self.step(z, sign * self.eps);
            self.n_leapfrog += 1;
            let h = energy(z, self.inv_mass);
            if (h - self.h0).as_f64() > MAX_DELTA_H || !h.is_finite() {
                self.divergent = true;
            }
            let w = self.h0 - h;
            *log_sum_weight = log_sum_exp(*log_sum_weight, w);
            self.sum_metro_prob += if w > T::zero() { 1.0 } else { w.as_f64().exp() };
            z_propose.clone_from(z);
            *p_sharp_beg = self.p_sharp(&z.p);
            p_sharp_end.clone_from(p_sharp_beg);
            for (r, &p) in rho.iter_mut().zip(&z.p) {
                *r += p;
            }
            p_beg.clone_from(&z.p);
            p_end.clone_from(&z.p);
            return !self.divergent;
        }

        let dim = z.q.len();
        let mut p_sharp_left_end = vec![T::zero(); dim];
        let mut p_left_end = vec![T::zero(); dim];
        let mut rho_left = vec![T::zero(); dim];
        let mut lsw_left = T::neg_infinity();
        let valid_left = self.build(
            depth - 1,
            z,
            z_propose,
            p_sharp_beg,
            &mut p_sharp_left_end,
            &mut rho_left,
            p_beg,
            &mut p_left_end,
            sign,
            &mut lsw_left,
            rng,
        );
        if !valid_left {
            return false;
        }

        let mut z_propose_right = z.clone();
        let mut p_sharp_right_beg = vec![T::zero(); dim];
        let mut p_right_beg = vec![T::zero(); dim];
        let mut rho_right = vec![T::zero(); dim];
        let mut lsw_right = T::neg_infinity();
        let valid_right = self.build(
            depth - 1,
            z,
            &mut z_propose_right,
            &mut p_sharp_right_beg,
            p_sharp_end,
            &mut rho_right,
            &mut p_right_beg,
            p_end,
            sign,
            &mut lsw_right,
            rng,
        );
        if !valid_right {
            return false;
        }

        let lsw_subtree = log_sum_exp(lsw_left, lsw_right);
        *log_sum_weight = log_sum_exp(*log_sum_weight, lsw_subtree);
        let accept = (lsw_right - lsw_subtree).as_f64().exp();
        if rng.random::<f64>() < accept {
            *z_propose = z_propose_right;
        }

        let rho_subtree = add(&rho_left, &rho_right);
        for (r, &s) in rho.iter_mut().zip(&rho_subtree) {
            *r += s;
        }
        let mut persist = criterion(p_sharp_beg, p_sharp_end, &rho_subtree);
        let rho_ext = add(&rho_left, &p_right_beg);
        persist &= criterion(p_sharp_beg, &p_sharp_right_beg, &rho_ext);
        let rho_ext = add(&rho_right, &p_left_end);
        persist &= criterion(&p_sharp_left_end, p_sharp_end, &rho_ext);
        persist
    }
}

struct Transition {
    accept_stat: f64,
    divergent: bool,
    depth: usize,
    n_leapfrog: usize,
}

fn transition<T: Real, D: LogDensity<T> + ?Sized>(
    density: &D,
    current: &mut Point<T>,
    inv_mass: &[T],
    eps: T,
    max_depth: usize,
    rng: &mut ChaCha8Rng,
) -> Transition {
    sample_momentum(&mut current.p, inv_mass, rng);
    let mut tb = TreeBuilder {
        density,
        inv_mass,
        eps,
        h0: energy(current, inv_mass),
        n_leapfrog: 0,
        sum_metro_prob: 0.0,
        divergent: false,
    };

    let mut z_fwd = current.clone();
    let mut z_bck = current.clone();
    let mut z_sample = current.clone();
    let mut z_propose = current.clone();

    let p0 = current.p.clone();
    let ps0 = tb.p_sharp(&p0);
    let (mut p_fwd_fwd, mut p_fwd_bck, mut p_bck_fwd, mut p_bck_bck) =
        (p0.clone(), p0.clone(), p0.clone(), p0.clone());
    let (mut ps_fwd_fwd, mut ps_fwd_bck, mut ps_bck_fwd, mut ps_bck_bck) =
        (ps0.clone(), ps0.clone(), ps0.clone(), ps0.clone());
    let mut rho = p0.clone();
    let mut log_sum_weight = T::zero();
    let mut depth = 0;
    let dim = p0.len();

    while depth < max_depth {
        let mut rho_fwd = vec![T::zero(); dim];
        let mut rho_bck = vec![T::zero(); dim];
        let mut lsw_subtree = T::neg_infinity();
        let valid = if rng.random::<f64>() > 0.5 {
            rho_bck.clone_from(&rho);
            p_bck_fwd.clone_from(&p_fwd_bck);
            ps_bck_fwd.clone_from(&ps_fwd_bck);
            tb.build(
                depth,
                &mut z_fwd,
                &mut z_propose,
                &mut ps_fwd_bck,
                &mut ps_fwd_fwd,
                &mut rho_fwd,
                &mut p_fwd_bck,
                &mut p_fwd_fwd,
                T::one(),
                &mut lsw_subtree,
                rng,
            )
        } else {
            rho_fwd.clone_from(&rho);
            p_fwd_bck.clone_from(&p_bck_fwd);
            ps_fwd_bck.clone_from(&ps_bck_fwd);
            tb.build(
                depth,
                &mut z_bck,
                &mut z_propose,
                &mut ps_bck_fwd,
                &mut ps_bck_bck,
                &mut rho_bck,
                &mut p_bck_fwd,
                &mut p_bck_bck,
                -T::one(),
                &mut lsw_subtree,
                rng,
            )
        };
        if !valid {
            break;
        }
        depth += 1;

        if lsw_subtree > log_sum_weight {
            z_sample.clone_from(&z_propose);
        } else {
            let accept = (lsw_subtree - log_sum_weight).as_f64().exp();
            if rng.random::<f64>() < accept {
                z_sample.clone_from(&z_propose);
            }
        }
        log_sum_weight = log_sum_exp(log_sum_weight, lsw_subtree);

        rho = add(&rho_bck, &rho_fwd);
        let mut persist = criterion(&ps_bck_bck, &ps_fwd_fwd, &rho);
        let rho_ext = add(&rho_bck, &p_fwd_bck);
        persist &= criterion(&ps_bck_bck, &ps_fwd_bck, &rho_ext);
        let rho_ext = add(&rho_fwd, &p_bck_fwd);
        persist &= criterion(&ps_bck_fwd, &ps_fwd_fwd, &rho_ext);
        if !persist {
            break;
        }
    }

    let n_leapfrog = tb.n_leapfrog;
    let accept_stat = if n_leapfrog > 0 {
        tb.sum_metro_prob / n_leapfrog as f64
    } else {
        0.0
    };
    let divergent = tb.divergent;
    *current = z_sample;
    Transition {
        accept_stat,
        divergent,
        depth,
        n_leapfrog,
    }
}

/// Dual-averaging step-size adaptation.
#[derive(Clone, Debug)]
struct DualAveraging {
    mu: f64,
    s_bar: f64,
    x_bar: f64,
    counter: f64,
    delta: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const KAPPA: f64 = 0.75;
    const T0: f64 = 10.0;

    fn new(eps: f64, delta: f64) -> Self {
        let mut da = DualAveraging {
            mu: 0.0,
            s_bar: 0.0,
            x_bar: 0.0,
            counter: 0.0,
            delta,
        };
        da.restart(eps);
        da
    }

    fn restart(&mut self, eps: f64) {
        self.mu = (10.0 * eps).ln();
        self.s_bar = 0.0;
        self.x_bar = 0.0;
        self.counter = 0.0;
    }

    fn update(&mut self, accept_stat: f64) -> f64 {
        self.counter += 1.0;
        let a = accept_stat.min(1.0);
        let eta = 1.0 / (self.counter + Self::T0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - a);
        let x = self.mu - self.s_bar * self.counter.sqrt() / Self::GAMMA;
        let x_eta = self.counter.powf(-Self::KAPPA);
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x;
        x.exp()
    }

    fn final_step_size(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Warmup iterations at whose end the metric is re-estimated, plus the
/// half-open range of iterations whose draws feed the estimate.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct WarmupSchedule {
    pub collect: std::ops::Range<usize>,
    pub window_ends: Vec<usize>,
}

impl WarmupSchedule {
    pub(crate) fn new(warmup: usize) -> Self {
        if warmup < 20 {
            return WarmupSchedule {
                collect: 0..0,
                window_ends: Vec::new(),
            };
        }
        let (mut init, mut term, mut base) = (75usize, 50usize, 25usize);
        if init + base + term > warmup {
            init = (0.15 * warmup as f64) as usize;
            term = (0.1 * warmup as f64) as usize;
            base = warmup - init - term;
        }
        let last = warmup - term - 1;
        let mut ends = Vec::new();
        let mut size = base;
        let mut next = init + base - 1;
        loop {
            ends.push(next.min(last));
            if next >= last {
                break;
            }
            size *= 2;
            next += size;
            if next != last && next + 2 * size >= warmup - term {
                next = last;
            }
        }
        WarmupSchedule {
            collect: init..warmup - term,
            window_ends: ends,
        }
    }
}

#[derive(Clone, Debug)]
struct Welford {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Welford {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn add<T: Real>(&mut self, x: &[T]) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let v = v.as_f64();
            let d = v - *m;
            *m += d / n;
            *s += d * (v - *m);
        }
    }

    /// Sample variance shrunk toward 1e-3 for small windows.
    fn regularized_variance(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.m2
            .iter()
            .map(|s| (n / (n + 5.0)) * (s / (n - 1.0)) + 1e-3 * (5.0 / (n + 5.0)))
            .collect()
    }
}

fn initial_point<T: Real, D: LogDensity<T> + ?Sized>(
    density: &D,
    jitter: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Point<T>, SamplerError> {
    let dim = density.dim();
    let normal = Normal::new(0.0, jitter.max(f64::MIN_POSITIVE)).expect("valid jitter");
    let mut last = DensityError::NonFinite {
        block: String::new(),
    };
    for _ in 0..MAX_INIT_ATTEMPTS {
        let q: Vec<T> = (0..dim)
            .map(|_| {
                T::lit(if jitter > 0.0 {
                    normal.sample(rng)
                } else {
                    0.0
                })
            })
            .collect();
        let mut grad = vec![T::zero(); dim];
        match density.logp_and_grad(&q, &mut grad) {
            Ok(logp) => {
                return Ok(Point {
                    q,
                    p: vec![T::zero(); dim],
                    grad,
                    logp,
                })
            }
            Err(e) => last = e,
        }
    }
    Err(SamplerError::Init {
        attempts: MAX_INIT_ATTEMPTS,
        last,
    })
}

/// Heuristic initial step size: double or halve until the one-step
/// acceptance probability crosses 0.8.
fn init_step_size<T: Real, D: LogDensity<T> + ?Sized>(
    density: &D,
    z: &Point<T>,
    inv_mass: &[T],
    mut eps: f64,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let threshold = 0.8f64.ln();
    let probe = |eps: f64, rng: &mut ChaCha8Rng| -> f64 {
        let mut w = z.clone();
        sample_momentum(&mut w.p, inv_mass, rng);
        let h0 = energy(&w, inv_mass);
        w.logp = leapfrog(
            density,
            &mut w.q,
            &mut w.p,
            &mut w.grad,
            inv_mass,
            T::lit(eps),
        );
        (h0 - energy(&w, inv_mass)).as_f64()
    };
    let delta = probe(eps, rng);
    let up = delta > threshold;
    for _ in 0..100 {
        let delta = probe(eps, rng);
        if (up && !(delta > threshold)) || (!up && !(delta < threshold)) {
            break;
        }
        let next = if up { 2.0 * eps } else { 0.5 * eps };
        if !(next > 1e-10 && next < 1e7) {
            break;
        }
        eps = next;
    }
    eps
}

struct ChainOutput<T> {
    draws: Vec<T>,
    stats: ChainStats,
}

fn run_chain<T: Real, D: LogDensity<T> + ?Sized>(
    density: &D,
    cfg: &SamplerConfig,
    chain: usize,
) -> Result<ChainOutput<T>, SamplerError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(chain as u64);
    let dim = density.dim();

    let mut current = initial_point(density, cfg.init_jitter, &mut rng)?;
    let mut inv_mass = vec![T::one(); dim];
    let mut eps = init_step_size(density, &current, &inv_mass, 1.0, &mut rng);
    let mut da = DualAveraging::new(eps, cfg.target_accept);
    let schedule = WarmupSchedule::new(cfg.warmup);
    let mut window = Welford::new(dim);

    let mut draws = Vec::with_capacity(cfg.draws * dim);
    let mut warmup_divergences = 0;
    let mut divergences = 0;
    let mut accept_sum = 0.0;
    let mut depth_sum = 0usize;
    let mut max_depth_hits = 0;
    let mut leapfrog_steps = 0;

    for iter in 0..cfg.warmup + cfg.draws {
        let tr = transition(
            density,
            &mut current,
            &inv_mass,
            T::lit(eps),
            cfg.max_tree_depth,
            &mut rng,
        );
        leapfrog_steps += tr.n_leapfrog;
        if iter < cfg.warmup {
            warmup_divergences += tr.divergent as usize;
            eps = da.update(tr.accept_stat);
            if schedule.collect.contains(&iter) {
                window.add(&current.q);
            }
            if schedule.window_ends.contains(&iter) && window.n > 1 {
                inv_mass = window
                    .regularized_variance()
                    .into_iter()
                    .map(T::lit)
                    .collect();
                window = Welford::new(dim);
                eps = init_step_size(density, &current, &inv_mass, eps, &mut rng);
                da.restart(eps);
            }
            if iter + 1 == cfg.warmup {
                eps = da.final_step_size();
            }
        } else {
            divergences += tr.divergent as usize;
            accept_sum += tr.accept_stat;
            depth_sum += tr.depth;
            max_depth_hits += (tr.depth >= cfg.max_tree_depth) as usize;
            draws.extend_from_slice(&current.q);
        }
    }
    if warmup_divergences == cfg.warmup {
        return Err(SamplerError::AllDivergent { chain });
    }
    let n = cfg.draws as f64;
    Ok(ChainOutput {
        draws,
        stats: ChainStats {
            step_size: eps,
            inv_mass: inv_mass.iter().map(|m| m.as_f64()).collect(),
            divergences,
            warmup_divergences,
            mean_accept: accept_sum / n,
            mean_tree_depth: depth_sum as f64 / n,
            max_depth_hits,
            leapfrog_steps,
        },
    })
}

/// Run `config.chains` independent chains (in parallel) and collect the
/// post-warmup draws with diagnostics. Chain `c` draws from the ChaCha8
/// stream `c` of `config.seed`, so output is reproducible bit-for-bit
/// regardless of thread scheduling.
pub fn sample_nuts<T: Real, D: LogDensity<T> + ?Sized>(
    density: &D,
    config: &SamplerConfig,
) -> Result<PosteriorDraws<T>, SamplerError> {
    config.validate()?;
    let outputs: Vec<ChainOutput<T>> = (0..config.chains)
        .into_par_iter()
        .map(|c| run_chain(density, config, c))
        .collect::<Result<_, _>>()?;
    let mut values = Vec::with_capacity(config.chains * config.draws * density.dim());
    let mut stats = Vec::with_capacity(config.chains);
    for o in outputs {
        values.extend(o.draws);
        stats.push(o.stats);
    }
    Ok(PosteriorDraws::new(
        density.layout().clone(),
        config.chains,
        config.draws,
        values,
        stats,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::density::{Gaussian, NormalMean, StandardNormal};
    use crate::inference::layout::{Layout, Transform};

    #[test]
    fn schedule_matches_reference_windows() {
        let s = WarmupSchedule::new(1000);
        assert_eq!(s.collect, 75..950);
        assert_eq!(s.window_ends, vec![99, 149, 249, 449, 949]);
        let short = WarmupSchedule::new(100);
        assert_eq!(short.collect, 15..90);
        assert_eq!(short.window_ends, vec![89]);
        assert!(WarmupSchedule::new(10).window_ends.is_empty());
    }

    #[test]
    fn leapfrog_is_reversible() {
        let target = Gaussian::correlated_2d(0.6);
        let inv_mass = [1.0, 1.0];
        let mut q = vec![0.4f64, -1.1];
        let mut p = vec![0.7f64, 0.2];
        let mut g = vec![0.0; 2];
        target.logp_and_grad(&q, &mut g).unwrap();
        let (q0, p0) = (q.clone(), p.clone());
        for _ in 0..25 {
            leapfrog(&target, &mut q, &mut p, &mut g, &inv_mass, 0.1);
        }
        for v in &mut p {
            *v = -*v;
        }
        for _ in 0..25 {
            leapfrog(&target, &mut q, &mut p, &mut g, &inv_mass, 0.1);
        }
        for i in 0..2 {
            assert!((q[i] - q0[i]).abs() < 1e-8);
            assert!((-p[i] - p0[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn leapfrog_preserves_volume() {
        // Jacobian determinant of the L-step map via finite differences.
        let target = Gaussian::correlated_2d(0.6);
        let inv_mass = [1.0, 1.0];
        let flow = |s: [f64; 4]| -> [f64; 4] {
            let mut q = vec![s[0], s[1]];
            let mut p = vec![s[2], s[3]];
            let mut g = vec![0.0; 2];
            target.logp_and_grad(&q, &mut g).unwrap();
            for _ in 0..10 {
                leapfrog(&target, &mut q, &mut p, &mut g, &inv_mass, 0.2);
            }
            [q[0], q[1], p[0], p[1]]
        };
        let s0 = [0.3, -0.2, 0.5, 1.0];
        let h = 1e-6;
        let mut jac = [[0.0; 4]; 4];
        for j in 0..4 {
            let (mut a, mut b) = (s0, s0);
            a[j] += h;
            b[j] -= h;
            let (fa, fb) = (flow(a), flow(b));
            for i in 0..4 {
                jac[i][j] = (fa[i] - fb[i]) / (2.0 * h);
            }
        }
        let m = nalgebra::Matrix4::from_fn(|i, j| jac[i][j]);
        assert!((m.determinant() - 1.0).abs() < 1e-6, "{}", m.determinant());
    }

    #[test]
    fn standard_normal_moments() {
        let cfg = SamplerConfig::default().with_chains(4).with_seed(3);
        let draws = sample_nuts(&StandardNormal::new(1), &cfg).unwrap();
        let xs: Vec<f64> = draws.iter().map(|d| d[0]).collect();
        let mean = crate::math::mean(&xs);
        let sd = crate::math::variance(&xs, 1).sqrt();
        let ess = draws.diagnostics.ess_bulk[0];
        assert!(mean.abs() < 3.0 / ess.sqrt(), "mean {mean}, ess {ess}");
        assert!((0.9..=1.1).contains(&sd), "sd {sd}");
    }

    #[test]
    fn runs_in_single_precision() {
        let cfg = SamplerConfig::default().with_budget(300, 500).with_seed(9);
        let draws: PosteriorDraws<f32> = sample_nuts(&StandardNormal::new(2), &cfg).unwrap();
        let xs: Vec<f64> = draws.iter().map(|d| d[0] as f64).collect();
        assert!(crate::math::mean(&xs).abs() < 0.2);
        assert!((crate::math::variance(&xs, 1).sqrt() - 1.0).abs() < 0.15);
    }

    #[test]
    fn correlated_gaussian_converges() {
        let cfg = SamplerConfig::default().with_chains(4).with_seed(1);
        let draws: PosteriorDraws = sample_nuts(&Gaussian::correlated_2d(0.9), &cfg).unwrap();
        for r in &draws.diagnostics.r_hat {
            assert!(*r < 1.01, "rhat {r}");
        }
    }

    #[test]
    fn conjugate_posterior_recovered() {
        let data = vec![1.2, 0.4, 2.2, 1.9, 0.8, 1.5, 1.1, 2.6];
        let model = NormalMean::new(data, 1.0, 0.0, 2.0);
        let (pm, pv) = model.posterior();
        let draws = sample_nuts(
            &model,
            &SamplerConfig::default().with_chains(4).with_seed(17),
        )
        .unwrap();
        let xs: Vec<f64> = draws.iter().map(|d| d[0]).collect();
        let ess = draws.diagnostics.ess_bulk[0];
        let mean = crate::math::mean(&xs);
        let var = crate::math::variance(&xs, 1);
        assert!((mean - pm).abs() < 3.0 * (pv / ess).sqrt());
        assert!((var - pv).abs() < 3.0 * pv * (2.0 / ess).sqrt());
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let cfg = SamplerConfig::default().with_budget(200, 200).with_seed(42);
        let a: PosteriorDraws = sample_nuts(&Gaussian::correlated_2d(0.5), &cfg).unwrap();
        let b: PosteriorDraws = sample_nuts(&Gaussian::correlated_2d(0.5), &cfg).unwrap();
        assert!(a
            .values
            .iter()
            .zip(&b.values)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        let c: PosteriorDraws =
            sample_nuts(&Gaussian::correlated_2d(0.5), &cfg.clone().with_seed(43)).unwrap();
        assert_ne!(a.values, c.values);
    }

    struct Nowhere {
        layout: Layout,
    }

    impl LogDensity<f64> for Nowhere {
        fn layout(&self) -> &Layout {
            &self.layout
        }
        fn logp_and_grad(&self, _x: &[f64], _g: &mut [f64]) -> Result<f64, DensityError> {
            Err(DensityError::NonFinite {
                block: "theta".into(),
            })
        }
    }

    #[test]
    fn init_failure_is_reported() {
        let mut layout = Layout::new();
        layout.push("theta", 1, Transform::Identity);
        let err = sample_nuts(&Nowhere { layout }, &SamplerConfig::default()).unwrap_err();
        assert_eq!(
            err,
            SamplerError::Init {
                attempts: MAX_INIT_ATTEMPTS,
                last: DensityError::NonFinite {
                    block: "theta".into()
                }
            }
        );
    }

    #[test]
    fn config_validation() {
        let cfg = SamplerConfig::default().with_chains(1);
        assert!(matches!(
            sample_nuts::<f64, _>(&StandardNormal::new(1), &cfg),
            Err(SamplerError::Config(_))
        ));
    }
}
