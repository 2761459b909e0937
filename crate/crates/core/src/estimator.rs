//! Remote-side state estimate and its error, evolved jointly.
//!
//! On a packet arrival the estimate snaps to the true state and the error
//! resets to zero; on a drop the estimate coasts on the model driven by the
//! stacked control pair (which the remote side knows), and the error evolves
//! under the local player's private correction plus the unseen noise. The
//! split is exact: xhat + xtilde always reproduces the true state.

use nalgebra::DVector;

use crate::model::GameSpec;

#[derive(Debug, Clone)]
pub struct EstimatorState {
    pub xhat: DVector<f64>,
    pub xtilde: DVector<f64>,
    pub k: usize,
}

/// Stage-0 split of the initial state. gamma0 = arrival of the first packet.
pub fn init(spec: &GameSpec, x0: &DVector<f64>, gamma0: bool) -> EstimatorState {
    let g = if gamma0 { 1.0 } else { 0.0 };
    EstimatorState {
        xhat: x0 * g + &spec.mu * (1.0 - g),
        xtilde: (x0 - &spec.mu) * (1.0 - g),
        k: 0,
    }
}

/// Advances the split from stage k to k+1.
///
/// `U_prev` is the stacked pair [uL_hat; uR] applied at stage k (both sides
/// know it), `utilde_prev` the local player's private correction, `w_prev`
/// the realized noise, `x_next` the realized next state, `gamma_next` the
/// arrival of the stage-(k+1) packet. With consistent inputs
/// (uL = uL_hat + utilde), xhat + xtilde == x_next exactly.
pub fn step(
    spec: &GameSpec,
    st: &EstimatorState,
    U_prev: &DVector<f64>,
    utilde_prev: &DVector<f64>,
    w_prev: &DVector<f64>,
    x_next: &DVector<f64>,
    gamma_next: bool,
) -> EstimatorState {
    let g = if gamma_next { 1.0 } else { 0.0 };
    let coast = &spec.A * &st.xhat
        + &spec.BL * U_prev.rows(0, spec.m1)
        + &spec.BR * U_prev.rows(spec.m1, spec.m2);
    let err = &spec.A * &st.xtilde + &spec.BL * utilde_prev + w_prev;
    EstimatorState {
        xhat: x_next * g + coast * (1.0 - g),
        xtilde: err * (1.0 - g),
        k: st.k + 1,
    }
}
