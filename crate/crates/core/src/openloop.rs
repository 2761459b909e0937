//! Scenario-tree machinery for the open-loop verification path.
//!
//! The continuous disturbances are replaced by per-coordinate two-point
//! lattices (matching mean and covariance exactly, so quadratic expectations
//! transfer verbatim), the channel by explicit branch pairs. On the finite
//! tree the equilibrium conditions become a square linear system in the
//! adapted controls: one unknown block per local node and one per remote
//! information class, one stationarity equation per block. The remote
//! filtration is defined by received-token histories built from autonomous
//! (zero-control) states; control-dependent signaling is deliberately
//! excluded, and every remote class is a union of local nodes.

use std::collections::HashMap;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use crate::model::GameSpec;
use crate::{Error, Player, Result};

#[derive(Debug, Clone)]
pub struct TreeOptions {
    /// Stages 0..=horizon carry controls; defaults to the spec horizon.
    pub horizon: Option<usize>,
    pub node_cap: usize,
}

impl Default for TreeOptions {
    fn default() -> Self {
        TreeOptions { horizon: None, node_cap: 100_000 }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    /// usize::MAX at depth 0.
    pub parent: usize,
    pub depth: usize,
    /// Probability of this node given its parent.
    pub prob: f64,
    pub path_prob: f64,
    /// Arrival indicator at this depth; always false on leaves, which carry
    /// no channel use.
    pub gamma: bool,
    /// Noise on the edge from the parent; zeros at depth 0, where the
    /// realization lives in x_auto.
    pub w_edge: DVector<f64>,
    /// Zero-control state at this node.
    pub x_auto: DVector<f64>,
    pub children: Range<usize>,
    /// Remote information class at this depth; usize::MAX on leaves.
    pub class: usize,
}

#[derive(Debug, Clone)]
pub struct ScenarioTree {
    /// Controlled stages are 0..=N; depth N+1 holds the leaves.
    pub N: usize,
    pub nodes: Vec<Node>,
    /// Node index ranges per depth, length N+2.
    pub stages: Vec<Range<usize>>,
    /// Remote class counts per controlled stage, length N+1.
    pub class_counts: Vec<usize>,
}

impl ScenarioTree {
    pub fn stage_nodes(&self, k: usize) -> Range<usize> {
        self.stages[k].clone()
    }

    /// Index of a node within its own stage.
    pub fn local_index(&self, node: usize) -> usize {
        node - self.stages[self.nodes[node].depth].start
    }

    pub fn leaf_count(&self) -> usize {
        self.stages[self.N + 1].len()
    }
}

/// Support of a zero-mean two-point lattice with the given diagonal
/// covariance: one signed sqrt per nonzero coordinate, equal weights.
fn two_point_support(diag: &DVector<f64>, center: &DVector<f64>) -> Vec<(DVector<f64>, f64)> {
    let active: Vec<usize> = (0..diag.len()).filter(|&j| diag[j] > 0.0).collect();
    let combos = 1usize << active.len();
    let prob = 1.0 / combos as f64;
    (0..combos)
        .map(|mask| {
            let mut point = center.clone();
            for (bit, &j) in active.iter().enumerate() {
                let sigma = diag[j].sqrt();
                point[j] += if mask >> bit & 1 == 1 { sigma } else { -sigma };
            }
            (point, prob)
        })
        .collect()
}

fn diagonal_of(name: &'static str, m: &DMatrix<f64>) -> Result<DVector<f64>> {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if i != j && m[(i, j)] != 0.0 {
                return Err(Error::NonDiagonalCovariance(name));
            }
        }
    }
    Ok(m.diagonal().map(|d| d.max(0.0)))
}

fn gamma_branches(p: f64) -> Vec<(bool, f64)> {
    if p == 0.0 {
        vec![(false, 1.0)]
    } else if p == 1.0 {
        vec![(true, 1.0)]
    } else {
        vec![(false, 1.0 - p), (true, p)]
    }
}

fn token(node: &Node) -> Option<Vec<u64>> {
    node.gamma.then(|| node.x_auto.iter().map(|v| v.to_bits()).collect())
}

/// Builds the scenario tree. Requires diagonal Sigma_x0 and Sigma_w; refuses
/// to grow past `node_cap` nodes.
pub fn build_tree(spec: &GameSpec, opts: &TreeOptions) -> Result<ScenarioTree> {
    let N = opts.horizon.unwrap_or(spec.N);
    let x0_diag = diagonal_of("Sigma_x0", &spec.Sigma_x0)?;
    let w_diag = diagonal_of("Sigma_w", &spec.Sigma_w)?;
    let gammas = gamma_branches(spec.p);
    let w_support = two_point_support(&w_diag, &DVector::zeros(spec.n));

    let mut nodes: Vec<Node> = Vec::new();
    let mut stages: Vec<Range<usize>> = Vec::new();

    for (x0, px) in two_point_support(&x0_diag, &spec.mu) {
        for &(g, pg) in &gammas {
            nodes.push(Node {
                parent: usize::MAX,
                depth: 0,
                prob: px * pg,
                path_prob: px * pg,
                gamma: g,
                w_edge: DVector::zeros(spec.n),
                x_auto: x0.clone(),
                children: 0..0,
                class: usize::MAX,
            });
        }
    }
    stages.push(0..nodes.len());

    for k in 0..=N {
        let parents = stages[k].clone();
        let stage_start = nodes.len();
        for v in parents {
            let child_start = nodes.len();
            let x = nodes[v].x_auto.clone();
            let pp = nodes[v].path_prob;
            for (w, pw) in &w_support {
                let x_next = &spec.A * &x + w;
                if k < N {
                    for &(g, pg) in &gammas {
                        nodes.push(Node {
                            parent: v,
                            depth: k + 1,
                            prob: pw * pg,
                            path_prob: pp * pw * pg,
                            gamma: g,
                            w_edge: w.clone(),
                            x_auto: x_next.clone(),
                            children: 0..0,
                            class: usize::MAX,
                        });
                    }
                } else {
                    nodes.push(Node {
                        parent: v,
                        depth: k + 1,
                        prob: *pw,
                        path_prob: pp * pw,
                        gamma: false,
                        w_edge: w.clone(),
                        x_auto: x_next.clone(),
                        children: 0..0,
                        class: usize::MAX,
                    });
                }
            }
            nodes[v].children = child_start..nodes.len();
        }
        stages.push(stage_start..nodes.len());
        if nodes.len() > opts.node_cap {
            return Err(Error::NodeCapExceeded { nodes: nodes.len(), cap: opts.node_cap });
        }
    }

    let mut class_counts = Vec::with_capacity(N + 1);
    for k in 0..=N {
        let mut ids: HashMap<(usize, Option<Vec<u64>>), usize> = HashMap::new();
        for v in stages[k].clone() {
            let parent_class =
                if k == 0 { 0 } else { nodes[nodes[v].parent].class };
            let key = (parent_class, token(&nodes[v]));
            let next = ids.len();
            nodes[v].class = *ids.entry(key).or_insert(next);
        }
        class_counts.push(ids.len());
    }

    Ok(ScenarioTree { N, nodes, stages, class_counts })
}

/// Adapted controls: local per node, remote per information class.
#[derive(Debug, Clone)]
pub struct AdaptedControlProfile {
    /// uL[k][stage-local node index], each m1-dimensional.
    pub uL: Vec<Vec<DVector<f64>>>,
    /// uR[k][class id], each m2-dimensional.
    pub uR: Vec<Vec<DVector<f64>>>,
}

impl AdaptedControlProfile {
    pub fn zeros(spec: &GameSpec, tree: &ScenarioTree) -> AdaptedControlProfile {
        let uL = (0..=tree.N)
            .map(|k| vec![DVector::zeros(spec.m1); tree.stages[k].len()])
            .collect();
        let uR = (0..=tree.N)
            .map(|k| vec![DVector::zeros(spec.m2); tree.class_counts[k]])
            .collect();
        AdaptedControlProfile { uL, uR }
    }
}

/// Controls materialized on every node of every controlled stage.
#[derive(Debug, Clone)]
pub struct NodeControls {
    pub uL: Vec<Vec<DVector<f64>>>,
    pub uR: Vec<Vec<DVector<f64>>>,
}

pub fn expand_profile(tree: &ScenarioTree, profile: &AdaptedControlProfile) -> NodeControls {
    let mut uR = Vec::with_capacity(tree.N + 1);
    for k in 0..=tree.N {
        uR.push(
            tree.stages[k]
                .clone()
                .map(|v| profile.uR[k][tree.nodes[v].class].clone())
                .collect(),
        );
    }
    NodeControls { uL: profile.uL.clone(), uR }
}

/// States at every node under the given controls (depth 0..=N+1).
pub fn forward_states(
    spec: &GameSpec,
    tree: &ScenarioTree,
    controls: &NodeControls,
) -> Vec<DVector<f64>> {
    let mut states = vec![DVector::zeros(spec.n); tree.nodes.len()];
    for v in tree.stages[0].clone() {
        states[v] = tree.nodes[v].x_auto.clone();
    }
    for k in 0..=tree.N {
        for v in tree.stages[k].clone() {
            let i = tree.local_index(v);
            let drift = &spec.A * &states[v]
                + &spec.BL * &controls.uL[k][i]
                + &spec.BR * &controls.uR[k][i];
            for c in tree.nodes[v].children.clone() {
                states[c] = &drift + &tree.nodes[c].w_edge;
            }
        }
    }
    states
}

/// Expected costs on the tree: stage terms weighted by path probability plus
/// the terminal term on the leaves.
pub fn tree_cost(
    spec: &GameSpec,
    tree: &ScenarioTree,
    controls: &NodeControls,
) -> (f64, f64) {
    let states = forward_states(spec, tree, controls);
    let (mut jl, mut jr) = (0.0, 0.0);
    for k in 0..=tree.N {
        for v in tree.stages[k].clone() {
            let i = tree.local_index(v);
            let (x, ul, ur) = (&states[v], &controls.uL[k][i], &controls.uR[k][i]);
            let pp = tree.nodes[v].path_prob;
            jl += pp
                * ((x.transpose() * &spec.QL * x)[(0, 0)]
                    + (ul.transpose() * &spec.SL * ul)[(0, 0)]
                    + (ur.transpose() * &spec.ML * ur)[(0, 0)]);
            jr += pp
                * ((x.transpose() * &spec.QR * x)[(0, 0)]
                    + (ul.transpose() * &spec.SR * ul)[(0, 0)]
                    + (ur.transpose() * &spec.MR * ur)[(0, 0)]);
        }
    }
    for v in tree.stages[tree.N + 1].clone() {
        let (x, pp) = (&states[v], tree.nodes[v].path_prob);
        jl += pp * (x.transpose() * &spec.PL_term * x)[(0, 0)];
        jr += pp * (x.transpose() * &spec.PR_term * x)[(0, 0)];
    }
    (jl, jr)
}

fn player_weights<'a>(
    spec: &'a GameSpec,
    player: Player,
) -> (&'a DMatrix<f64>, &'a DMatrix<f64>) {
    match player {
        Player::Local => (&spec.QL, &spec.PL_term),
        Player::Remote => (&spec.QR, &spec.PR_term),
    }
}

/// Adjoint field of one player's cost. The entry at a depth-k node is the
/// costate flowing into stage k-1: terminal weight times the state on
/// leaves, Q x plus the discounted child average elsewhere. Both fields live
/// on the full tree; coarser remote information enters only through the
/// class averaging in the stationarity map.
pub fn costates(
    spec: &GameSpec,
    tree: &ScenarioTree,
    states: &[DVector<f64>],
    player: Player,
) -> Vec<DVector<f64>> {
    let (Q, P_term) = player_weights(spec, player);
    let mut theta = vec![DVector::zeros(spec.n); tree.nodes.len()];
    for v in tree.stages[tree.N + 1].clone() {
        theta[v] = P_term * &states[v];
    }
    for k in (0..=tree.N).rev() {
        for v in tree.stages[k].clone() {
            let mut avg = DVector::zeros(spec.n);
            for c in tree.nodes[v].children.clone() {
                avg += &theta[c] * tree.nodes[c].prob;
            }
            theta[v] = Q * &states[v] + spec.A.transpose() * avg;
        }
    }
    theta
}

/// Stationarity residuals of both players at the given profile: per local
/// node S_L uL + BL' E[theta_L | node], per remote class
/// M_R uR + BR' E[theta_R | class] with class weights renormalized by the
/// class probability.
fn residual_parts(
    spec: &GameSpec,
    tree: &ScenarioTree,
    profile: &AdaptedControlProfile,
) -> (Vec<Vec<DVector<f64>>>, Vec<Vec<DVector<f64>>>) {
    let controls = expand_profile(tree, profile);
    let states = forward_states(spec, tree, &controls);
    let thetaL = costates(spec, tree, &states, Player::Local);
    let thetaR = costates(spec, tree, &states, Player::Remote);

    let mut local = Vec::with_capacity(tree.N + 1);
    let mut remote = Vec::with_capacity(tree.N + 1);
    for k in 0..=tree.N {
        let mut stage_local = Vec::with_capacity(tree.stages[k].len());
        let mut wsum = vec![DVector::<f64>::zeros(spec.n); tree.class_counts[k]];
        let mut psum = vec![0.0f64; tree.class_counts[k]];
        for v in tree.stages[k].clone() {
            let node = &tree.nodes[v];
            let mut avg_l = DVector::zeros(spec.n);
            let mut avg_r = DVector::zeros(spec.n);
            for c in node.children.clone() {
                avg_l += &thetaL[c] * tree.nodes[c].prob;
                avg_r += &thetaR[c] * tree.nodes[c].prob;
            }
            let i = tree.local_index(v);
            stage_local.push(&spec.SL * &profile.uL[k][i] + spec.BL.transpose() * avg_l);
            wsum[node.class] += avg_r * node.path_prob;
            psum[node.class] += node.path_prob;
        }
        let stage_remote = (0..tree.class_counts[k])
            .map(|cls| {
                &spec.MR * &profile.uR[k][cls]
                    + spec.BR.transpose() * (&wsum[cls] / psum[cls])
            })
            .collect();
        local.push(stage_local);
        remote.push(stage_remote);
    }
    (local, remote)
}

#[derive(Debug, Clone)]
pub struct StationarityReport {
    pub max_local: f64,
    pub max_remote: f64,
}

pub fn stationarity_residuals(
    spec: &GameSpec,
    tree: &ScenarioTree,
    profile: &AdaptedControlProfile,
) -> StationarityReport {
    let (local, remote) = residual_parts(spec, tree, profile);
    let max_of = |blocks: &Vec<Vec<DVector<f64>>>| {
        blocks
            .iter()
            .flatten()
            .map(|r| r.amax())
            .fold(0.0f64, f64::max)
    };
    StationarityReport { max_local: max_of(&local), max_remote: max_of(&remote) }
}

/// Unknown layout: stage-major, local node blocks before remote class blocks.
struct Layout {
    local_offsets: Vec<usize>,
    remote_offsets: Vec<usize>,
    dim: usize,
}

impl Layout {
    fn new(spec: &GameSpec, tree: &ScenarioTree) -> Layout {
        let mut local_offsets = Vec::with_capacity(tree.N + 1);
        let mut remote_offsets = Vec::with_capacity(tree.N + 1);
        let mut dim = 0;
        for k in 0..=tree.N {
            local_offsets.push(dim);
            dim += tree.stages[k].len() * spec.m1;
            remote_offsets.push(dim);
            dim += tree.class_counts[k] * spec.m2;
        }
        Layout { local_offsets, remote_offsets, dim }
    }

    fn pack(&self, spec: &GameSpec, parts: &(Vec<Vec<DVector<f64>>>, Vec<Vec<DVector<f64>>>)) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim);
        for (k, stage) in parts.0.iter().enumerate() {
            for (i, r) in stage.iter().enumerate() {
                out.rows_mut(self.local_offsets[k] + i * spec.m1, spec.m1).copy_from(r);
            }
        }
        for (k, stage) in parts.1.iter().enumerate() {
            for (i, r) in stage.iter().enumerate() {
                out.rows_mut(self.remote_offsets[k] + i * spec.m2, spec.m2).copy_from(r);
            }
        }
        out
    }

    fn unpack(&self, spec: &GameSpec, tree: &ScenarioTree, flat: &DVector<f64>) -> AdaptedControlProfile {
        let mut profile = AdaptedControlProfile::zeros(spec, tree);
        for k in 0..=tree.N {
            for i in 0..tree.stages[k].len() {
                profile.uL[k][i]
                    .copy_from(&flat.rows(self.local_offsets[k] + i * spec.m1, spec.m1));
            }
            for cls in 0..tree.class_counts[k] {
                profile.uR[k][cls]
                    .copy_from(&flat.rows(self.remote_offsets[k] + cls * spec.m2, spec.m2));
            }
        }
        profile
    }
}

#[derive(Debug, Clone)]
pub struct OpenLoopSolution {
    pub profile: AdaptedControlProfile,
    pub jl: f64,
    pub jr: f64,
    pub residuals: StationarityReport,
}

/// Solves the stationarity system exactly. The residual map is affine in the
/// stacked controls, so the matrix is assembled one column per unknown from
/// unit-control sweeps (each sweep keeps only per-node state and costate
/// vectors) and factored once; a singular system is reported with its rank.
pub fn solve_open_loop(spec: &GameSpec, tree: &ScenarioTree) -> Result<OpenLoopSolution> {
    let layout = Layout::new(spec, tree);
    let zero = AdaptedControlProfile::zeros(spec, tree);
    let constant = layout.pack(spec, &residual_parts(spec, tree, &zero));

    let mut H = DMatrix::<f64>::zeros(layout.dim, layout.dim);
    let mut basis = DVector::<f64>::zeros(layout.dim);
    for j in 0..layout.dim {
        basis[j] = 1.0;
        let profile = layout.unpack(spec, tree, &basis);
        let column = layout.pack(spec, &residual_parts(spec, tree, &profile)) - &constant;
        H.column_mut(j).copy_from(&column);
        basis[j] = 0.0;
    }

    let lu = H.full_piv_lu();
    let flat = lu.solve(&(-&constant)).ok_or_else(|| {
        let u = lu.u();
        let scale = u.diagonal().amax();
        let rank = u
            .diagonal()
            .iter()
            .filter(|d| d.abs() > 1e-12 * scale)
            .count();
        Error::SingularSystem { rank, size: layout.dim }
    })?;

    let profile = layout.unpack(spec, tree, &flat);
    let residuals = stationarity_residuals(spec, tree, &profile);
    let controls = expand_profile(tree, &profile);
    let (jl, jr) = tree_cost(spec, tree, &controls);
    Ok(OpenLoopSolution { profile, jl, jr, residuals })
}

/// One player's adapted control perturbation: per node for the local player,
/// per class for the remote one.
#[derive(Debug, Clone)]
pub struct AdaptedPerturbation {
    pub player: Player,
    pub du: Vec<Vec<DVector<f64>>>,
}

pub fn sample_perturbation(
    spec: &GameSpec,
    tree: &ScenarioTree,
    player: Player,
    magnitude: f64,
    rng: &mut ChaCha8Rng,
) -> AdaptedPerturbation {
    let (blocks, m): (Vec<usize>, usize) = match player {
        Player::Local => ((0..=tree.N).map(|k| tree.stages[k].len()).collect(), spec.m1),
        Player::Remote => (tree.class_counts.clone(), spec.m2),
    };
    let du = blocks
        .iter()
        .map(|&count| {
            (0..count)
                .map(|_| DVector::from_fn(m, |_, _| rng.random_range(-magnitude..=magnitude)))
                .collect()
        })
        .collect();
    AdaptedPerturbation { player, du }
}

pub fn apply_perturbation(
    profile: &AdaptedControlProfile,
    pert: &AdaptedPerturbation,
    eps: f64,
) -> AdaptedControlProfile {
    let mut out = profile.clone();
    let target = match pert.player {
        Player::Local => &mut out.uL,
        Player::Remote => &mut out.uR,
    };
    for (stage, dstage) in target.iter_mut().zip(&pert.du) {
        for (u, du) in stage.iter_mut().zip(dstage) {
            *u += du * eps;
        }
    }
    out
}

/// Pure second-order cost response of the perturbing player: the state
/// response z follows the noise-free dynamics driven by du alone, and only
/// that player's own control weight appears.
pub fn second_variation(
    spec: &GameSpec,
    tree: &ScenarioTree,
    pert: &AdaptedPerturbation,
) -> f64 {
    let (Q, P_term) = player_weights(spec, pert.player);
    let (B, W) = match pert.player {
        Player::Local => (&spec.BL, &spec.SL),
        Player::Remote => (&spec.BR, &spec.MR),
    };
    let du_at = |k: usize, v: usize, tree: &ScenarioTree| -> &DVector<f64> {
        match pert.player {
            Player::Local => &pert.du[k][tree.local_index(v)],
            Player::Remote => &pert.du[k][tree.nodes[v].class],
        }
    };
    let mut z = vec![DVector::<f64>::zeros(spec.n); tree.nodes.len()];
    let mut val = 0.0;
    for k in 0..=tree.N {
        for v in tree.stages[k].clone() {
            let du = du_at(k, v, tree);
            let pp = tree.nodes[v].path_prob;
            val += pp
                * ((z[v].transpose() * Q * &z[v])[(0, 0)]
                    + (du.transpose() * W * du)[(0, 0)]);
            let next = &spec.A * &z[v] + B * du;
            for c in tree.nodes[v].children.clone() {
                z[c] = next.clone();
            }
        }
    }
    for v in tree.stages[tree.N + 1].clone() {
        val += tree.nodes[v].path_prob * (z[v].transpose() * P_term * &z[v])[(0, 0)];
    }
    val
}

/// Exact expansion of one player's cost along an adapted direction:
/// J(u + eps du) - J(u) = 2 eps <residual, du> + eps^2 d2J, with the inner
/// product weighted by node (or class) probabilities. Returns (lhs, rhs).
pub fn variational_identity(
    spec: &GameSpec,
    tree: &ScenarioTree,
    profile: &AdaptedControlProfile,
    pert: &AdaptedPerturbation,
    eps: f64,
) -> (f64, f64) {
    let pick = |pair: (f64, f64)| match pert.player {
        Player::Local => pair.0,
        Player::Remote => pair.1,
    };
    let base = pick(tree_cost(spec, tree, &expand_profile(tree, profile)));
    let moved = apply_perturbation(profile, pert, eps);
    let lhs = pick(tree_cost(spec, tree, &expand_profile(tree, &moved))) - base;

    let (local, remote) = residual_parts(spec, tree, profile);
    let mut first = 0.0;
    match pert.player {
        Player::Local => {
            for k in 0..=tree.N {
                for v in tree.stages[k].clone() {
                    let i = tree.local_index(v);
                    first += tree.nodes[v].path_prob * local[k][i].dot(&pert.du[k][i]);
                }
            }
        }
        Player::Remote => {
            for k in 0..=tree.N {
                let mut psum = vec![0.0f64; tree.class_counts[k]];
                for v in tree.stages[k].clone() {
                    psum[tree.nodes[v].class] += tree.nodes[v].path_prob;
                }
                for cls in 0..tree.class_counts[k] {
                    first += psum[cls] * remote[k][cls].dot(&pert.du[k][cls]);
                }
            }
        }
    }
    let rhs = 2.0 * eps * first + eps * eps * second_variation(spec, tree, pert);
    (lhs, rhs)
}

/// Estimator pass along every tree path under a gain policy.
pub struct TreeClosedLoop {
    pub controls: NodeControls,
    pub states: Vec<DVector<f64>>,
    /// Estimates per node, controlled stages only (zeros on leaves).
    pub xhat: Vec<DVector<f64>>,
    pub xtilde: Vec<DVector<f64>>,
}

/// Rolls the split estimator and a gain policy along every path. Needs at
/// least tree.N + 1 gain stages.
pub fn closed_loop_on_tree(
    spec: &GameSpec,
    tree: &ScenarioTree,
    policy: &crate::evaluate::PolicySequence,
) -> Result<TreeClosedLoop> {
    if policy.KLt.len() <= tree.N || policy.KRt.len() <= tree.N {
        return Err(Error::PolicyShape(format!(
            "policy covers {} stages, tree needs {}",
            policy.KLt.len(),
            tree.N + 1
        )));
    }
    let total = tree.nodes.len();
    let mut states = vec![DVector::<f64>::zeros(spec.n); total];
    let mut xhat = vec![DVector::<f64>::zeros(spec.n); total];
    let mut xtilde = vec![DVector::<f64>::zeros(spec.n); total];
    let mut uL = Vec::with_capacity(tree.N + 1);
    let mut uR = Vec::with_capacity(tree.N + 1);

    for v in tree.stages[0].clone() {
        states[v] = tree.nodes[v].x_auto.clone();
        let est = crate::estimator::init(spec, &states[v], tree.nodes[v].gamma);
        xhat[v] = est.xhat;
        xtilde[v] = est.xtilde;
    }
    for k in 0..=tree.N {
        let mut stage_ul = Vec::with_capacity(tree.stages[k].len());
        let mut stage_ur = Vec::with_capacity(tree.stages[k].len());
        for v in tree.stages[k].clone() {
            let U = &policy.KLt[k] * &xhat[v];
            let utilde = &policy.KRt[k] * &xtilde[v];
            let ul = U.rows(0, spec.m1) + &utilde;
            let ur = U.rows(spec.m1, spec.m2).clone_owned();
            let drift = &spec.A * &states[v] + &spec.BL * &ul + &spec.BR * &ur;
            for c in tree.nodes[v].children.clone() {
                states[c] = &drift + &tree.nodes[c].w_edge;
                if k < tree.N {
                    let parent_est = crate::estimator::EstimatorState {
                        xhat: xhat[v].clone(),
                        xtilde: xtilde[v].clone(),
                        k,
                    };
                    let est = crate::estimator::step(
                        spec,
                        &parent_est,
                        &U,
                        &utilde,
                        &tree.nodes[c].w_edge,
                        &states[c],
                        tree.nodes[c].gamma,
                    );
                    xhat[c] = est.xhat;
                    xtilde[c] = est.xtilde;
                }
            }
            stage_ul.push(ul);
            stage_ur.push(ur);
        }
        uL.push(stage_ul);
        uR.push(stage_ur);
    }
    Ok(TreeClosedLoop { controls: NodeControls { uL, uR }, states, xhat, xtilde })
}

/// Largest entry of E[xhat xtilde'] over the controlled stages; zero in
/// exact arithmetic for any gain policy.
pub fn orthogonality_on_tree(
    spec: &GameSpec,
    tree: &ScenarioTree,
    policy: &crate::evaluate::PolicySequence,
) -> Result<f64> {
    let cl = closed_loop_on_tree(spec, tree, policy)?;
    let mut worst = 0.0f64;
    for k in 0..=tree.N {
        let mut cross = DMatrix::<f64>::zeros(spec.n, spec.n);
        for v in tree.stages[k].clone() {
            cross += &cl.xhat[v] * cl.xtilde[v].transpose() * tree.nodes[v].path_prob;
        }
        worst = worst.max(cross.amax());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluate::{propagate_moments, PolicySequence};
    use crate::model;
    use crate::riccati;
    use rand::SeedableRng;

    fn small_spec(n_override: usize) -> GameSpec {
        let mut s = model::sec5();
        s.N = 2;
        if n_override == 1 {
            s.n = 1;
            s.m1 = 1;
            s.m2 = 1;
            s.mu = DVector::zeros(1);
            s.A = DMatrix::from_element(1, 1, 1.2);
            s.BL = DMatrix::from_element(1, 1, 0.5);
            s.BR = DMatrix::from_element(1, 1, 0.3);
            for m in [
                &mut s.QL, &mut s.QR, &mut s.SL, &mut s.SR, &mut s.ML, &mut s.MR,
                &mut s.PL_term, &mut s.PR_term, &mut s.Sigma_x0, &mut s.Sigma_w,
            ] {
                *m = DMatrix::from_element(1, 1, 1.0);
            }
        }
        s
    }

    #[test]
    fn scalar_tree_has_full_branching_counts() {
        let s = small_spec(1);
        let tree = build_tree(&s, &TreeOptions::default()).unwrap();
        // stage sizes 4, 16, 64 and 128 leaves: noise doubles, channel doubles,
        // the last noise step still branches
        assert_eq!(tree.stages[0].len(), 4);
        assert_eq!(tree.stages[1].len(), 16);
        assert_eq!(tree.stages[2].len(), 64);
        assert_eq!(tree.leaf_count(), 128);
    }

    #[test]
    fn stage_probabilities_sum_to_one() {
        let s = small_spec(2);
        let tree = build_tree(&s, &TreeOptions::default()).unwrap();
        for k in 0..tree.stages.len() {
            let total: f64 = tree.stages[k].clone().map(|v| tree.nodes[v].path_prob).sum();
            assert!((total - 1.0).abs() <= 1e-12, "stage {k}: {total}");
        }
    }

    #[test]
    fn dropped_packets_pool_into_one_root_class() {
        let s = small_spec(2);
        let tree = build_tree(&s, &TreeOptions::default()).unwrap();
        let root_classes: Vec<usize> = tree.stages[0]
            .clone()
            .filter(|&v| !tree.nodes[v].gamma)
            .map(|v| tree.nodes[v].class)
            .collect();
        assert!(root_classes.len() > 1);
        assert!(root_classes.iter().all(|&c| c == root_classes[0]));
        // arrivals with distinct values stay distinct
        let seen: std::collections::HashSet<usize> = tree.stages[0]
            .clone()
            .filter(|&v| tree.nodes[v].gamma)
            .map(|v| tree.nodes[v].class)
            .collect();
        assert_eq!(seen.len(), 4);
    }

    #[test]
    fn classes_refine_over_time() {
        let s = small_spec(2);
        let tree = build_tree(&s, &TreeOptions::default()).unwrap();
        for k in 1..=tree.N {
            let mut parent_of_class: HashMap<usize, usize> = HashMap::new();
            for v in tree.stages[k].clone() {
                let pc = tree.nodes[tree.nodes[v].parent].class;
                let prev = parent_of_class.insert(tree.nodes[v].class, pc);
                if let Some(prev) = prev {
                    assert_eq!(prev, pc, "class at depth {k} spans two parent classes");
                }
            }
        }
    }

    #[test]
    fn node_cap_is_enforced() {
        let s = small_spec(2);
        let err = build_tree(&s, &TreeOptions { horizon: None, node_cap: 100 }).unwrap_err();
        assert!(matches!(err, Error::NodeCapExceeded { cap: 100, .. }));
    }

    #[test]
    fn correlated_noise_is_rejected() {
        let mut s = small_spec(2);
        s.Sigma_w[(0, 1)] = 0.1;
        s.Sigma_w[(1, 0)] = 0.1;
        assert!(matches!(
            build_tree(&s, &TreeOptions::default()),
            Err(Error::NonDiagonalCovariance("Sigma_w"))
        ));
    }

    #[test]
    fn single_stage_blind_channel_solution_matches_hand_calculation() {
        // p = 0: the remote side never sees anything, one class per stage.
        // Symmetric two-point x0 makes uR vanish and uL antisymmetric.
        let mut s = small_spec(1);
        s.N = 0;
        s.p = 0.0;
        s.A = DMatrix::from_element(1, 1, 1.2);
        s.BL = DMatrix::from_element(1, 1, 0.5);
        s.BR = DMatrix::from_element(1, 1, 0.3);
        s.PL_term = DMatrix::from_element(1, 1, 2.0);
        s.PR_term = DMatrix::from_element(1, 1, 2.0);
        s.Sigma_w = DMatrix::from_element(1, 1, 0.49);
        let tree = build_tree(&s, &TreeOptions::default()).unwrap();
        assert_eq!(tree.stages[0].len(), 2);
        assert_eq!(tree.class_counts[0], 1);
        let sol = solve_open_loop(&s, &tree).unwrap();
        // S uL + bl P (a x0 + bl uL) = 0 with the noise averaged out:
        // uL = -(0.5 * 2 * 1.2) / (1 + 0.25 * 2) = -0.8 at x0 = +1
        for v in tree.stages[0].clone() {
            let i = tree.local_index(v);
            let expect = -0.8 * tree.nodes[v].x_auto[0];
            assert!((sol.profile.uL[0][i][0] - expect).abs() <= 1e-12);
        }
        assert!(sol.profile.uR[0][0].amax() <= 1e-12);
        assert!(sol.residuals.max_local <= 1e-12);
        assert!(sol.residuals.max_remote <= 1e-12);
    }

    #[test]
    fn solved_profiles_are_stationary_on_both_geometries() {
        for n in [1usize, 2] {
            let s = small_spec(n);
            let tree = build_tree(&s, &TreeOptions::default()).unwrap();
            let sol = solve_open_loop(&s, &tree).unwrap();
            assert!(sol.residuals.max_local <= 1e-10, "n={n}: {}", sol.residuals.max_local);
            assert!(sol.residuals.max_remote <= 1e-10, "n={n}: {}", sol.residuals.max_remote);
            assert!(sol.jl > 0.0 && sol.jr > 0.0);
        }
    }

    #[test]
    fn perturbations_never_beat_the_stationary_point() {
        let s = small_spec(1);
        let tree = build_tree(&s, &TreeOptions::default()).unwrap();
        let sol = solve_open_loop(&s, &tree).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for player in [Player::Local, Player::Remote] {
            for _ in 0..20 {
                let pert = sample_perturbation(&s, &tree, player, 0.25, &mut rng);
                let moved = apply_perturbation(&sol.profile, &pert, 1.0);
                let (jl, jr) = tree_cost(&s, &tree, &expand_profile(&tree, &moved));
                let (base, new) = match player {
                    Player::Local => (sol.jl, jl),
                    Player::Remote => (sol.jr, jr),
                };
                assert!(new >= base - 1e-9, "{player} improved by {}", base - new);
            }
        }
    }

    #[test]
    fn cost_expansion_is_exact_along_adapted_directions() {
        let s = small_spec(1);
        let tree = build_tree(&s, &TreeOptions::default()).unwrap();
        let sol = solve_open_loop(&s, &tree).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for player in [Player::Local, Player::Remote] {
            for _ in 0..10 {
                let pert = sample_perturbation(&s, &tree, player, 0.5, &mut rng);
                let eps = rng.random_range(0.1..=1.0);
                let (lhs, rhs) = variational_identity(&s, &tree, &sol.profile, &pert, eps);
                assert!((lhs - rhs).abs() <= 1e-10, "{player}: lhs {lhs} rhs {rhs}");
            }
        }
    }

    #[test]
    fn expansion_holds_away_from_stationarity_too() {
        let s = small_spec(1);
        let tree = build_tree(&s, &TreeOptions::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut profile = AdaptedControlProfile::zeros(&s, &tree);
        for stage in profile.uL.iter_mut().chain(profile.uR.iter_mut()) {
            for u in stage {
                for e in u.iter_mut() {
                    *e = rng.random_range(-1.0..=1.0);
                }
            }
        }
        for player in [Player::Local, Player::Remote] {
            let pert = sample_perturbation(&s, &tree, player, 0.5, &mut rng);
            let (lhs, rhs) = variational_identity(&s, &tree, &profile, &pert, 0.7);
            assert!((lhs - rhs).abs() <= 1e-10, "{player}: lhs {lhs} rhs {rhs}");
        }
    }

    #[test]
    fn tree_and_moment_costs_agree_for_gain_policies() {
        // the lattice matches mean and covariance, so quadratic expectations
        // coincide exactly
        let s = small_spec(2);
        let sol = riccati::solve(&s).unwrap();
        let policy = PolicySequence::equilibrium(&sol);
        let tree = build_tree(&s, &TreeOptions::default()).unwrap();
        let cl = closed_loop_on_tree(&s, &tree, &policy).unwrap();
        let (jl_tree, jr_tree) = tree_cost(&s, &tree, &cl.controls);
        let (jl_m, jr_m, _) = propagate_moments(&s, &policy).unwrap();
        assert!((jl_tree - jl_m).abs() <= 1e-9 * jl_m.max(1.0));
        assert!((jr_tree - jr_m).abs() <= 1e-9 * jr_m.max(1.0));
    }

    #[test]
    fn estimate_and_error_are_uncorrelated_on_the_tree() {
        let s = small_spec(2);
        let sol = riccati::solve(&s).unwrap();
        let policy = PolicySequence::equilibrium(&sol);
        let tree = build_tree(&s, &TreeOptions::default()).unwrap();
        let worst = orthogonality_on_tree(&s, &tree, &policy).unwrap();
        assert!(worst <= 1e-12, "cross moment {worst}");
    }

    #[test]
    fn perfect_channel_collapses_gamma_branching() {
        let mut s = small_spec(1);
        s.p = 1.0;
        let tree = build_tree(&s, &TreeOptions::default()).unwrap();
        assert_eq!(tree.stages[0].len(), 2);
        assert_eq!(tree.stages[1].len(), 4);
        // every arrival is informative: classes separate per node
        assert_eq!(tree.class_counts[0], 2);
    }

    #[test]
    fn remote_classes_coarsen_local_nodes() {
        let s = small_spec(2);
        let tree = build_tree(&s, &TreeOptions::default()).unwrap();
        for k in 0..=tree.N {
            assert!(tree.class_counts[k] <= tree.stages[k].len());
            let mut members = vec![0usize; tree.class_counts[k]];
            for v in tree.stages[k].clone() {
                members[tree.nodes[v].class] += 1;
            }
            assert!(members.iter().all(|&m| m > 0));
        }
    }
}
