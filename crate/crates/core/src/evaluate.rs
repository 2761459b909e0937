//! Policy evaluation: sampled rollouts, exact second-moment recursions, and
//! the equilibrium certification checks built on top of them.
//!
//! A policy is a pair of gain sequences in the estimate/error coordinates:
//! the stacked pair U_k = KLt_k xhat feeds both players, the local correction
//! utilde_k = KRt_k xtilde only the local one. Since xhat and xtilde stay
//! uncorrelated under any such policy, both expected costs are exact
//! functions of the two second moments, which is what `propagate_moments`
//! iterates; Monte Carlo is kept only as an independent cross-check.

use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::linalg;
use crate::model::GameSpec;
use crate::riccati::RiccatiSolution;
use crate::{Error, Player, Result};

/// Gain sequences for stages 0..=N. KLt_k is (m1+m2) x n, KRt_k is m1 x n.
#[derive(Debug, Clone)]
pub struct PolicySequence {
    pub KLt: Vec<DMatrix<f64>>,
    pub KRt: Vec<DMatrix<f64>>,
}

impl PolicySequence {
    pub fn equilibrium(sol: &RiccatiSolution) -> PolicySequence {
        PolicySequence { KLt: sol.KL.clone(), KRt: sol.KR.clone() }
    }

    pub fn validate(&self, spec: &GameSpec) -> Result<()> {
        let want = spec.N + 1;
        if self.KLt.len() != want || self.KRt.len() != want {
            return Err(Error::PolicyShape(format!(
                "need {want} stages, got KLt {} / KRt {}",
                self.KLt.len(),
                self.KRt.len()
            )));
        }
        for (k, m) in self.KLt.iter().enumerate() {
            if m.shape() != (spec.m1 + spec.m2, spec.n) {
                return Err(Error::PolicyShape(format!("KLt[{k}] is {:?}", m.shape())));
            }
        }
        for (k, m) in self.KRt.iter().enumerate() {
            if m.shape() != (spec.m1, spec.n) {
                return Err(Error::PolicyShape(format!("KRt[{k}] is {:?}", m.shape())));
            }
        }
        if self
            .KLt
            .iter()
            .chain(self.KRt.iter())
            .any(|m| m.iter().any(|x| !x.is_finite()))
        {
            return Err(Error::PolicyShape("non-finite gain entry".into()));
        }
        Ok(())
    }
}

/// Second moments of the estimate (Mhat) and the error (Mtilde) at one stage.
#[derive(Debug, Clone)]
pub struct MomentState {
    pub Mhat: DMatrix<f64>,
    pub Mtilde: DMatrix<f64>,
}

/// One sampled rollout. States run 0..=N+1, everything else 0..=N.
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub xhat: Vec<DVector<f64>>,
    pub xtilde: Vec<DVector<f64>>,
    pub uL: Vec<DVector<f64>>,
    pub uR: Vec<DVector<f64>>,
    pub gamma: Vec<bool>,
    pub jl: f64,
    pub jr: f64,
}

/// Sample means and standard errors of the two realized costs.
#[derive(Debug, Clone)]
pub struct CostReport {
    pub jl: f64,
    pub jr: f64,
    pub jl_se: f64,
    pub jr_se: f64,
    pub trajectories: usize,
    pub seed: u64,
}

/// RNG for one trajectory: ChaCha8 keyed by the run seed, stream = trajectory
/// index. Draw order inside a trajectory: n normals for x0, one Bernoulli for
/// gamma_0, then per stage k = 0..=N n normals for w_k followed (for k < N)
/// by one Bernoulli for gamma_{k+1}. This derivation is part of the output
/// contract; changing it changes every sampled artifact.
pub fn trajectory_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn sample_vec(rng: &mut ChaCha8Rng, factor: &DMatrix<f64>) -> DVector<f64> {
    let z = DVector::from_fn(factor.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
    factor * z
}

fn simulate_with(
    spec: &GameSpec,
    policy: &PolicySequence,
    fx0: &DMatrix<f64>,
    fw: &DMatrix<f64>,
    rng: &mut ChaCha8Rng,
) -> Trajectory {
    let (m1, N) = (spec.m1, spec.N);
    let mut states = Vec::with_capacity(N + 2);
    let mut xhats = Vec::with_capacity(N + 1);
    let mut xtildes = Vec::with_capacity(N + 1);
    let mut uLs = Vec::with_capacity(N + 1);
    let mut uRs = Vec::with_capacity(N + 1);
    let mut gammas = Vec::with_capacity(N + 1);
    let (mut jl, mut jr) = (0.0, 0.0);

    let mut x = &spec.mu + sample_vec(rng, fx0);
    let mut gamma = rng.random_bool(spec.p);
    let mut est = crate::estimator::init(spec, &x, gamma);
    states.push(x.clone());

    for k in 0..=N {
        debug_assert!(
            (&est.xhat + &est.xtilde - &x).amax() <= 1e-10,
            "estimate split must reproduce the state"
        );
        let U = &policy.KLt[k] * &est.xhat;
        let utilde = &policy.KRt[k] * &est.xtilde;
        let uL = U.rows(0, m1) + &utilde;
        let uR = U.rows(m1, spec.m2).clone_owned();

        jl += (x.transpose() * &spec.QL * &x)[(0, 0)]
            + (uL.transpose() * &spec.SL * &uL)[(0, 0)]
            + (uR.transpose() * &spec.ML * &uR)[(0, 0)];
        jr += (x.transpose() * &spec.QR * &x)[(0, 0)]
            + (uL.transpose() * &spec.SR * &uL)[(0, 0)]
            + (uR.transpose() * &spec.MR * &uR)[(0, 0)];

        let w = sample_vec(rng, fw);
        let x_next = &spec.A * &x + &spec.BL * &uL + &spec.BR * &uR + &w;

        xhats.push(est.xhat.clone());
        xtildes.push(est.xtilde.clone());
        gammas.push(gamma);
        uLs.push(uL);
        uRs.push(uR);

        if k < N {
            gamma = rng.random_bool(spec.p);
            est = crate::estimator::step(spec, &est, &U, &utilde, &w, &x_next, gamma);
        }
        x = x_next;
        states.push(x.clone());
    }
    jl += (x.transpose() * &spec.PL_term * &x)[(0, 0)];
    jr += (x.transpose() * &spec.PR_term * &x)[(0, 0)];

    Trajectory { states, xhat: xhats, xtilde: xtildes, uL: uLs, uR: uRs, gamma: gammas, jl, jr }
}

/// One rollout under the given policy, driven by `rng` (see `trajectory_rng`).
pub fn simulate_trajectory(
    spec: &GameSpec,
    policy: &PolicySequence,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    policy.validate(spec)?;
    let fx0 = linalg::psd_sqrt(&spec.Sigma_x0);
    let fw = linalg::psd_sqrt(&spec.Sigma_w);
    Ok(simulate_with(spec, policy, &fx0, &fw, rng))
}

/// Sample-mean costs over independent trajectories. Trajectory i draws from
/// stream i regardless of how the work is scheduled, and the reduction is a
/// fixed-order sum, so the report depends only on (seed, trajectories).
pub fn monte_carlo(
    spec: &GameSpec,
    policy: &PolicySequence,
    trajectories: usize,
    seed: u64,
) -> Result<CostReport> {
    if trajectories < 2 {
        return Err(Error::InvalidArgument("need at least 2 trajectories".into()));
    }
    policy.validate(spec)?;
    let fx0 = linalg::psd_sqrt(&spec.Sigma_x0);
    let fw = linalg::psd_sqrt(&spec.Sigma_w);

    let costs: Vec<(f64, f64)> = (0..trajectories as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = trajectory_rng(seed, i);
            let t = simulate_with(spec, policy, &fx0, &fw, &mut rng);
            (t.jl, t.jr)
        })
        .collect();

    let tf = trajectories as f64;
    let (mut jl, mut jr) = (0.0, 0.0);
    for &(a, b) in &costs {
        jl += a;
        jr += b;
    }
    jl /= tf;
    jr /= tf;
    let (mut vl, mut vr) = (0.0, 0.0);
    for &(a, b) in &costs {
        vl += (a - jl) * (a - jl);
        vr += (b - jr) * (b - jr);
    }
    let jl_se = (vl / (tf - 1.0)).sqrt() / tf.sqrt();
    let jr_se = (vr / (tf - 1.0)).sqrt() / tf.sqrt();
    Ok(CostReport { jl, jr, jl_se, jr_se, trajectories, seed })
}

/// Exact expected costs plus the moment trace (stages 0..=N+1).
pub fn propagate_moments(
    spec: &GameSpec,
    policy: &PolicySequence,
) -> Result<(f64, f64, Vec<MomentState>)> {
    policy.validate(spec)?;
    let comp = spec.composites()?;
    let mut Mhat = &spec.Sigma_x0 * spec.p + &spec.mu * spec.mu.transpose();
    let mut Mtilde = &spec.Sigma_x0 * (1.0 - spec.p);
    let p = spec.p;
    let (mut jl, mut jr) = (0.0, 0.0);
    let mut trace = Vec::with_capacity(spec.N + 2);

    for k in 0..=spec.N {
        trace.push(MomentState { Mhat: Mhat.clone(), Mtilde: Mtilde.clone() });
        let KLt = &policy.KLt[k];
        let KRt = &policy.KRt[k];
        jl += ((&spec.QL + KLt.transpose() * &comp.LambdaL * KLt) * &Mhat).trace()
            + ((&spec.QL + KRt.transpose() * &spec.SL * KRt) * &Mtilde).trace();
        jr += ((&spec.QR + KLt.transpose() * &comp.LambdaR * KLt) * &Mhat).trace()
            + ((&spec.QR + KRt.transpose() * &spec.SR * KRt) * &Mtilde).trace();

        let FL = &spec.A + &comp.Bcal * KLt;
        let FR = &spec.A + &spec.BL * KRt;
        let refresh = &FR * &Mtilde * FR.transpose() + &spec.Sigma_w;
        Mhat = linalg::symmetrize(&(&FL * &Mhat * FL.transpose() + &refresh * p));
        Mtilde = linalg::symmetrize(&(&refresh * (1.0 - p)));
    }
    jl += (&spec.PL_term * (&Mhat + &Mtilde)).trace();
    jr += (&spec.PR_term * (&Mhat + &Mtilde)).trace();
    trace.push(MomentState { Mhat, Mtilde });
    Ok((jl, jr, trace))
}

fn exact_costs(spec: &GameSpec, policy: &PolicySequence) -> (f64, f64) {
    let (jl, jr, _) = propagate_moments(spec, policy).expect("validated policy");
    (jl, jr)
}

#[derive(Debug, Clone)]
pub struct NashOptions {
    pub fd_step: f64,
    pub fd_tol: f64,
    pub deviations: usize,
    pub magnitude: f64,
    /// A deviation must not beat the equilibrium cost by more than this.
    pub improvement_tol: f64,
    pub seed: u64,
}

impl Default for NashOptions {
    fn default() -> Self {
        NashOptions {
            fd_step: 1e-4,
            fd_tol: 1e-5,
            deviations: 100,
            magnitude: 1e-1,
            improvement_tol: 1e-9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradientCheck {
    pub player: Player,
    pub max_abs_grad: f64,
    /// (stage, row, col) of the worst entry.
    pub at: (usize, usize, usize),
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct DeviationCheck {
    pub player: Player,
    pub tested: usize,
    pub magnitude: f64,
    /// Largest observed cost improvement over the equilibrium (signed).
    pub best_improvement: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct NashReport {
    pub gradients: Vec<GradientCheck>,
    pub deviations: Vec<DeviationCheck>,
    pub fd_step: f64,
    pub fd_tol: f64,
    pub seed: u64,
}

impl NashReport {
    pub fn pass(&self) -> bool {
        self.gradients.iter().all(|g| g.pass) && self.deviations.iter().all(|d| d.pass)
    }
}

/// Certifies the solved gains as an equilibrium of the exact cost functions:
/// central finite differences of each player's own cost in its own gain
/// entries (the other held fixed) must vanish, and random whole-sequence gain
/// deviations must not beat the equilibrium cost. Reports, never panics; a
/// failed check carries the offending location.
pub fn nash_check(spec: &GameSpec, sol: &RiccatiSolution, opts: &NashOptions) -> Result<NashReport> {
    let eq = PolicySequence::equilibrium(sol);
    eq.validate(spec)?;
    let (jl_eq, jr_eq) = exact_costs(spec, &eq);

    let mut gradients = Vec::new();
    for player in [Player::Local, Player::Remote] {
        let mut worst = 0.0f64;
        let mut at = (0, 0, 0);
        for k in 0..=spec.N {
            let shape = match player {
                Player::Local => eq.KLt[k].shape(),
                Player::Remote => eq.KRt[k].shape(),
            };
            for i in 0..shape.0 {
                for j in 0..shape.1 {
                    let mut plus = eq.clone();
                    let mut minus = eq.clone();
                    match player {
                        Player::Local => {
                            plus.KLt[k][(i, j)] += opts.fd_step;
                            minus.KLt[k][(i, j)] -= opts.fd_step;
                        }
                        Player::Remote => {
                            plus.KRt[k][(i, j)] += opts.fd_step;
                            minus.KRt[k][(i, j)] -= opts.fd_step;
                        }
                    }
                    let (jp, jm) = match player {
                        Player::Local => (exact_costs(spec, &plus).0, exact_costs(spec, &minus).0),
                        Player::Remote => (exact_costs(spec, &plus).1, exact_costs(spec, &minus).1),
                    };
                    let g = (jp - jm) / (2.0 * opts.fd_step);
                    if g.abs() > worst {
                        worst = g.abs();
                        at = (k, i, j);
                    }
                }
            }
        }
        gradients.push(GradientCheck { player, max_abs_grad: worst, at, pass: worst <= opts.fd_tol });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut deviations = Vec::new();
    for player in [Player::Local, Player::Remote] {
        let mut best = f64::NEG_INFINITY;
        for _ in 0..opts.deviations {
            let mut dev = eq.clone();
            for k in 0..=spec.N {
                let target = match player {
                    Player::Local => &mut dev.KLt[k],
                    Player::Remote => &mut dev.KRt[k],
                };
                for entry in target.iter_mut() {
                    *entry += rng.random_range(-opts.magnitude..=opts.magnitude);
                }
            }
            let improvement = match player {
                Player::Local => jl_eq - exact_costs(spec, &dev).0,
                Player::Remote => jr_eq - exact_costs(spec, &dev).1,
            };
            best = best.max(improvement);
        }
        deviations.push(DeviationCheck {
            player,
            tested: opts.deviations,
            magnitude: opts.magnitude,
            best_improvement: best,
            pass: best <= opts.improvement_tol,
        });
    }

    Ok(NashReport {
        gradients,
        deviations,
        fd_step: opts.fd_step,
        fd_tol: opts.fd_tol,
        seed: opts.seed,
    })
}

/// Exact cost gap of a unilateral local-gain change, both measured and
/// predicted.
///
/// Measured: JL(KLt, KRt) - JL(KL*, KRt). Predicted:
/// sum_k tr((KLt_k - KL*_k)^T GL_k (KLt_k - KL*_k) Mhat_k), with Mhat
/// propagated under the deviated policy. The error-side gain KRt may be
/// arbitrary; its contribution cancels in the difference.
pub fn completing_square_local(
    spec: &GameSpec,
    sol: &RiccatiSolution,
    policy: &PolicySequence,
) -> Result<(f64, f64)> {
    policy.validate(spec)?;
    let (jl_dev, _, moments) = propagate_moments(spec, policy)?;
    let reference = PolicySequence { KLt: sol.KL.clone(), KRt: policy.KRt.clone() };
    let (jl_ref, _, _) = propagate_moments(spec, &reference)?;
    let mut predicted = 0.0;
    for k in 0..=spec.N {
        let d = &policy.KLt[k] - &sol.KL[k];
        predicted += (d.transpose() * &sol.GL[k] * &d * &moments[k].Mhat).trace();
    }
    Ok((jl_dev - jl_ref, predicted))
}

/// Exact cost gap of a unilateral error-gain change with the stacked gain at
/// its equilibrium value, measured and predicted via GR and Mtilde (which
/// depends only on the error-side gain).
pub fn completing_square_remote(
    spec: &GameSpec,
    sol: &RiccatiSolution,
    KRt: &[DMatrix<f64>],
) -> Result<(f64, f64)> {
    let policy = PolicySequence { KLt: sol.KL.clone(), KRt: KRt.to_vec() };
    policy.validate(spec)?;
    let (_, jr_dev, moments) = propagate_moments(spec, &policy)?;
    let eq = PolicySequence::equilibrium(sol);
    let (_, jr_eq, _) = propagate_moments(spec, &eq)?;
    let mut predicted = 0.0;
    for k in 0..=spec.N {
        let d = &policy.KRt[k] - &sol.KR[k];
        predicted += (d.transpose() * &sol.GR[k] * &d * &moments[k].Mtilde).trace();
    }
    Ok((jr_dev - jr_eq, predicted))
}

/// Monte-Carlo check that the estimate and the error are uncorrelated:
/// per stage and entry, |mean of xhat_i xtilde_j| over the sample must stay
/// within `se_factor` standard errors of zero. Returns the worst ratio
/// (0 when both mean and spread vanish, e.g. under a perfect channel).
pub fn orthogonality_mc(
    spec: &GameSpec,
    policy: &PolicySequence,
    trajectories: usize,
    seed: u64,
) -> Result<f64> {
    if trajectories < 2 {
        return Err(Error::InvalidArgument("need at least 2 trajectories".into()));
    }
    policy.validate(spec)?;
    let fx0 = linalg::psd_sqrt(&spec.Sigma_x0);
    let fw = linalg::psd_sqrt(&spec.Sigma_w);
    let n = spec.n;
    let stages = spec.N + 1;
    let mut sum = vec![DMatrix::<f64>::zeros(n, n); stages];
    let mut sumsq = vec![DMatrix::<f64>::zeros(n, n); stages];
    for t in 0..trajectories as u64 {
        let mut rng = trajectory_rng(seed, t);
        let traj = simulate_with(spec, policy, &fx0, &fw, &mut rng);
        for k in 0..stages {
            let outer = &traj.xhat[k] * traj.xtilde[k].transpose();
            sum[k] += &outer;
            sumsq[k] += outer.map(|v| v * v);
        }
    }
    let tf = trajectories as f64;
    let mut worst = 0.0f64;
    for k in 0..stages {
        for i in 0..n {
            for j in 0..n {
                let mean = sum[k][(i, j)] / tf;
                let var = (sumsq[k][(i, j)] / tf - mean * mean).max(0.0) / (tf - 1.0) * tf;
                let se = (var / tf).sqrt();
                if se == 0.0 {
                    // zero spread forces zero mean (identical products)
                    continue;
                }
                worst = worst.max(mean.abs() / se);
            }
        }
    }
    Ok(worst)
}
