//! Agent motion models, their control-affine forms and explicit-Euler stepping.
//!
//! Three models are supported: a kinematic bicycle in Frenet coordinates
//! `(p, d, psi, v)`, a planar double integrator `(px, py, vx, vy)` and a
//! Cartesian bicycle `(px, py, cos t, sin t, v)`. Every control is a pair.
//! For both bicycles the steering input is the virtual input `omega = tan(delta)`,
//! which makes the models affine in the control.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Guard on the `1 - d * kappa` denominator of the Frenet model.
pub const EPS_SING: f64 = 1e-3;

pub type Control = [f64; 2];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("Frenet singularity: 1 - d*kappa = {0}")]
    Singularity(f64),
    #[error("non-finite {0}")]
    Domain(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    BicycleFrenet,
    DoubleIntegrator,
    BicycleCartesian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BicycleFrenetState {
    pub p: f64,
    pub d: f64,
    pub psi: f64,
    pub v: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoubleIntegratorState {
    pub px: f64,
    pub py: f64,
    pub vx: f64,
    pub vy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BicycleCartesianState {
    pub px: f64,
    pub py: f64,
    pub cos_t: f64,
    pub sin_t: f64,
    pub v: f64,
}

impl BicycleCartesianState {
    pub fn new(px: f64, py: f64, theta: f64, v: f64) -> Self {
        Self { px, py, cos_t: theta.cos(), sin_t: theta.sin(), v }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum AgentState {
    BicycleFrenet(BicycleFrenetState),
    DoubleIntegrator(DoubleIntegratorState),
    BicycleCartesian(BicycleCartesianState),
}

impl AgentState {
    pub fn model(&self) -> Model {
        match self {
            AgentState::BicycleFrenet(_) => Model::BicycleFrenet,
            AgentState::DoubleIntegrator(_) => Model::DoubleIntegrator,
            AgentState::BicycleCartesian(_) => Model::BicycleCartesian,
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        match *self {
            AgentState::BicycleFrenet(s) => vec![s.p, s.d, s.psi, s.v],
            AgentState::DoubleIntegrator(s) => vec![s.px, s.py, s.vx, s.vy],
            AgentState::BicycleCartesian(s) => vec![s.px, s.py, s.cos_t, s.sin_t, s.v],
        }
    }

    pub fn from_vec(model: Model, x: &[f64]) -> Self {
        match model {
            Model::BicycleFrenet => {
                AgentState::BicycleFrenet(BicycleFrenetState { p: x[0], d: x[1], psi: x[2], v: x[3] })
            }
            Model::DoubleIntegrator => AgentState::DoubleIntegrator(DoubleIntegratorState {
                px: x[0],
                py: x[1],
                vx: x[2],
                vy: x[3],
            }),
            Model::BicycleCartesian => AgentState::BicycleCartesian(BicycleCartesianState {
                px: x[0],
                py: x[1],
                cos_t: x[2],
                sin_t: x[3],
                v: x[4],
            }),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|x| x.is_finite())
    }

    /// Scalar speed used by speed-dependent safety radii and velocity CLFs.
    pub fn speed(&self) -> f64 {
        match *self {
            AgentState::BicycleFrenet(s) => s.v,
            AgentState::DoubleIntegrator(s) => s.vx.hypot(s.vy),
            AgentState::BicycleCartesian(s) => s.v,
        }
    }
}

/// Piecewise-constant path curvature: `values[i]` holds on `[breaks[i-1], breaks[i])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curvature {
    pub breaks: Vec<f64>,
    pub values: Vec<f64>,
}

impl Curvature {
    pub fn zero() -> Self {
        Self { breaks: vec![], values: vec![0.0] }
    }

    pub fn constant(k: f64) -> Self {
        Self { breaks: vec![], values: vec![k] }
    }

    pub fn at(&self, p: f64) -> f64 {
        let i = self.breaks.iter().take_while(|&&b| p >= b).count();
        self.values[i.min(self.values.len() - 1)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsParams {
    pub wheelbase: f64,
    pub curvature: Curvature,
    pub dt: f64,
    pub accel_min: f64,
    pub accel_max: f64,
    /// Steering angle bounds (rad); the virtual input is bounded by their tangents.
    pub steer_min: f64,
    pub steer_max: f64,
    pub v_min: f64,
    pub v_max: f64,
}

impl DynamicsParams {
    pub fn road() -> Self {
        Self {
            wheelbase: 2.5,
            curvature: Curvature::zero(),
            dt: 0.1,
            accel_min: -5.0,
            accel_max: 3.0,
            steer_min: -0.5,
            steer_max: 0.5,
            v_min: 0.0,
            v_max: 10.0,
        }
    }

    pub fn planar() -> Self {
        Self {
            wheelbase: 1.0,
            curvature: Curvature::zero(),
            dt: 0.1,
            accel_min: -1.0,
            accel_max: 1.0,
            steer_min: -1.47,
            steer_max: 1.47,
            v_min: -10.0,
            v_max: 10.0,
        }
    }
}

/// Drift and input matrix: `x_dot = f + g * u`, `g` stored row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub f: Vec<f64>,
    pub g: Vec<[f64; 2]>,
}

fn check_finite(xs: &[f64], what: &'static str) -> Result<(), DynamicsError> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(DynamicsError::Domain(what))
    }
}

fn frenet_denominator(s: &BicycleFrenetState, params: &DynamicsParams) -> Result<f64, DynamicsError> {
    let den = 1.0 - s.d * params.curvature.at(s.p);
    if den <= EPS_SING {
        Err(DynamicsError::Singularity(den))
    } else {
        Ok(den)
    }
}

pub fn affine_decomposition(state: &AgentState, params: &DynamicsParams) -> Result<Affine, DynamicsError> {
    check_finite(&state.to_vec(), "state")?;
    Ok(match *state {
        AgentState::BicycleFrenet(s) => {
            let den = frenet_denominator(&s, params)?;
            let k = params.curvature.at(s.p);
            let p_dot = s.v * s.psi.cos() / den;
            Affine {
                f: vec![p_dot, s.v * s.psi.sin(), -k * p_dot, 0.0],
                g: vec![[0.0, 0.0], [0.0, 0.0], [0.0, s.v / params.wheelbase], [1.0, 0.0]],
            }
        }
        AgentState::DoubleIntegrator(s) => Affine {
            f: vec![s.vx, s.vy, 0.0, 0.0],
            g: vec![[0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
        },
        AgentState::BicycleCartesian(s) => Affine {
            f: vec![s.v * s.cos_t, s.v * s.sin_t, 0.0, 0.0, 0.0],
            g: vec![
                [0.0, 0.0],
                [0.0, 0.0],
                [0.0, -s.v * s.sin_t],
                [0.0, s.v * s.cos_t],
                [1.0, 0.0],
            ],
        },
    })
}

/// Per-input box `(lower, upper)`; bicycles report the virtual steering bounds.
pub fn control_bounds(model: Model, params: &DynamicsParams) -> (Control, Control) {
    match model {
        Model::DoubleIntegrator => (
            [params.accel_min, params.accel_min],
            [params.accel_max, params.accel_max],
        ),
        Model::BicycleFrenet | Model::BicycleCartesian => (
            [params.accel_min, params.steer_min.tan()],
            [params.accel_max, params.steer_max.tan()],
        ),
    }
}

/// Steering-angle bounds for the bicycle models.
pub fn steer_angle_bounds(params: &DynamicsParams) -> (f64, f64) {
    (params.steer_min, params.steer_max)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stepped {
    pub state: AgentState,
    /// True when a velocity component hit its cap and was clamped.
    pub clamped: bool,
}

fn wrap_angle(a: f64) -> f64 {
    let mut x = (a + PI).rem_euclid(2.0 * PI) - PI;
    if x <= -PI {
        x += 2.0 * PI;
    }
    x
}

fn clamp_flag(x: f64, lo: f64, hi: f64, flag: &mut bool) -> f64 {
    if x < lo {
        *flag = true;
        lo
    } else if x > hi {
        *flag = true;
        hi
    } else {
        x
    }
}

/// One explicit-Euler step of length `params.dt`.
pub fn step(state: &AgentState, u: Control, params: &DynamicsParams) -> Result<Stepped, DynamicsError> {
    check_finite(&u, "control")?;
    let aff = affine_decomposition(state, params)?;
    let x = state.to_vec();
    let dt = params.dt;
    let mut next: Vec<f64> = x
        .iter()
        .zip(aff.f.iter().zip(aff.g.iter()))
        .map(|(xi, (fi, gi))| xi + dt * (fi + gi[0] * u[0] + gi[1] * u[1]))
        .collect();
    let mut clamped = false;
    let (lo, hi) = (params.v_min, params.v_max);
    match state.model() {
        Model::BicycleFrenet => {
            next[2] = wrap_angle(next[2]);
            next[3] = clamp_flag(next[3], lo, hi, &mut clamped);
        }
        Model::DoubleIntegrator => {
            next[2] = clamp_flag(next[2], lo, hi, &mut clamped);
            next[3] = clamp_flag(next[3], lo, hi, &mut clamped);
        }
        Model::BicycleCartesian => {
            let n = next[2].hypot(next[3]);
            next[2] /= n;
            next[3] /= n;
            next[4] = clamp_flag(next[4], lo, hi, &mut clamped);
        }
    }
    check_finite(&next, "next state")?;
    Ok(Stepped { state: AgentState::from_vec(state.model(), &next), clamped })
}

/// Position, velocity and control-affine acceleration of an agent in its planar
/// coordinates. For the Frenet model the coordinates are `(p, d)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kinematics {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    pub acc_f: [f64; 2],
    /// `acc_g[r][c]`: row r of the acceleration, column c of the control.
    pub acc_g: [[f64; 2]; 2],
    pub speed: f64,
    pub speed_f: f64,
    pub speed_g: [f64; 2],
    /// Heading (Frenet: relative to the path) and its affine rate.
    pub heading: f64,
    pub heading_rate_f: f64,
    pub heading_rate_g: [f64; 2],
}

pub fn kinematics(state: &AgentState, params: &DynamicsParams) -> Result<Kinematics, DynamicsError> {
    check_finite(&state.to_vec(), "state")?;
    Ok(match *state {
        AgentState::BicycleFrenet(s) => {
            let den = frenet_denominator(&s, params)?;
            let k = params.curvature.at(s.p);
            let (sp, cp) = s.psi.sin_cos();
            let p_dot = s.v * cp / den;
            let d_dot = s.v * sp;
            let psi_f = -k * p_dot;
            let psi_g = s.v / params.wheelbase;
            Kinematics {
                pos: [s.p, s.d],
                vel: [p_dot, d_dot],
                acc_f: [
                    -s.v * sp * psi_f / den + s.v * cp * k * d_dot / (den * den),
                    s.v * cp * psi_f,
                ],
                acc_g: [[cp / den, -s.v * sp * psi_g / den], [sp, s.v * cp * psi_g]],
                speed: s.v,
                speed_f: 0.0,
                speed_g: [1.0, 0.0],
                heading: s.psi,
                heading_rate_f: psi_f,
                heading_rate_g: [0.0, psi_g],
            }
        }
        AgentState::DoubleIntegrator(s) => {
            let sp = s.vx.hypot(s.vy);
            let speed_g = if sp > 1e-12 { [s.vx / sp, s.vy / sp] } else { [0.0, 0.0] };
            Kinematics {
                pos: [s.px, s.py],
                vel: [s.vx, s.vy],
                acc_f: [0.0, 0.0],
                acc_g: [[1.0, 0.0], [0.0, 1.0]],
                speed: sp,
                speed_f: 0.0,
                speed_g,
                heading: s.vy.atan2(s.vx),
                heading_rate_f: 0.0,
                heading_rate_g: [0.0, 0.0],
            }
        }
        AgentState::BicycleCartesian(s) => Kinematics {
            pos: [s.px, s.py],
            vel: [s.v * s.cos_t, s.v * s.sin_t],
            acc_f: [0.0, 0.0],
            acc_g: [[s.cos_t, -s.v * s.v * s.sin_t], [s.sin_t, s.v * s.v * s.cos_t]],
            speed: s.v,
            speed_f: 0.0,
            speed_g: [1.0, 0.0],
            heading: s.sin_t.atan2(s.cos_t),
            heading_rate_f: 0.0,
            heading_rate_g: [0.0, s.v],
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn di(px: f64, py: f64, vx: f64, vy: f64) -> AgentState {
        AgentState::DoubleIntegrator(DoubleIntegratorState { px, py, vx, vy })
    }

    #[test]
    fn double_integrator_drift() {
        let s = step(&di(0.0, 0.0, 1.0, 0.0), [0.0, 0.0], &DynamicsParams::planar()).unwrap();
        assert_eq!(s.state.to_vec(), vec![0.1, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn double_integrator_pure_accel() {
        let s = step(&di(0.0, 0.0, 0.0, 0.0), [1.0, 0.0], &DynamicsParams::planar()).unwrap();
        assert_eq!(s.state.to_vec(), vec![0.0, 0.0, 0.1, 0.0]);
    }

    #[test]
    fn frenet_straight_cruise() {
        let st = AgentState::BicycleFrenet(BicycleFrenetState { p: 0.0, d: 0.0, psi: 0.0, v: 2.0 });
        let s = step(&st, [0.0, 0.0], &DynamicsParams::road()).unwrap();
        let x = s.state.to_vec();
        assert!((x[0] - 0.2).abs() < 1e-15);
        assert_eq!(&x[1..], &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn affine_forms() {
        let a = affine_decomposition(&di(1.0, 2.0, 3.0, 4.0), &DynamicsParams::planar()).unwrap();
        assert_eq!(a.f, vec![3.0, 4.0, 0.0, 0.0]);
        assert_eq!(a.g, vec![[0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);

        let p = DynamicsParams::road();
        let v = 3.0;
        let st = AgentState::BicycleFrenet(BicycleFrenetState { p: 0.0, d: 0.0, psi: 0.0, v });
        let a = affine_decomposition(&st, &p).unwrap();
        assert_eq!(a.f, vec![v, 0.0, 0.0, 0.0]);
        let col_a: Vec<f64> = a.g.iter().map(|r| r[0]).collect();
        let col_w: Vec<f64> = a.g.iter().map(|r| r[1]).collect();
        assert_eq!(col_a, vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(col_w, vec![0.0, 0.0, v / p.wheelbase, 0.0]);

        let st = AgentState::BicycleCartesian(BicycleCartesianState::new(0.0, 0.0, 0.0, v));
        let a = affine_decomposition(&st, &DynamicsParams::planar()).unwrap();
        assert_eq!(a.f, vec![v, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(a.g[2][1], -v * 0.0);
        assert_eq!(a.g[3][1], v);
    }

    #[test]
    fn bounds() {
        let (lo, hi) = control_bounds(Model::DoubleIntegrator, &DynamicsParams::planar());
        assert_eq!((lo, hi), ([-1.0, -1.0], [1.0, 1.0]));
        let p = DynamicsParams::planar();
        assert_eq!(steer_angle_bounds(&p), (-1.47, 1.47));
        let (lo, hi) = control_bounds(Model::BicycleCartesian, &p);
        assert_eq!((lo[1], hi[1]), ((-1.47f64).tan(), 1.47f64.tan()));
        let (lo, hi) = control_bounds(Model::BicycleFrenet, &DynamicsParams::road());
        assert_eq!((lo[0], hi[0]), (-5.0, 3.0));
        assert_eq!((lo[1], hi[1]), ((-0.5f64).tan(), 0.5f64.tan()));
    }

    #[test]
    fn singularity_and_domain() {
        let mut p = DynamicsParams::road();
        p.curvature = Curvature::constant(0.5);
        let st = AgentState::BicycleFrenet(BicycleFrenetState { p: 0.0, d: 2.0, psi: 0.0, v: 1.0 });
        assert!(matches!(step(&st, [0.0, 0.0], &p), Err(DynamicsError::Singularity(_))));
        let st = di(f64::NAN, 0.0, 0.0, 0.0);
        assert!(matches!(step(&st, [0.0, 0.0], &p), Err(DynamicsError::Domain(_))));
    }

    #[test]
    fn clamp_is_flagged() {
        let s = step(&di(0.0, 0.0, 10.0, 0.0), [1.0, 0.0], &DynamicsParams::planar()).unwrap();
        assert!(s.clamped);
        assert_eq!(s.state.to_vec()[2], 10.0);
    }

    #[test]
    fn curvature_pieces() {
        let k = Curvature { breaks: vec![10.0, 20.0], values: vec![0.0, 0.1, 0.0] };
        assert_eq!(k.at(5.0), 0.0);
        assert_eq!(k.at(10.0), 0.1);
        assert_eq!(k.at(25.0), 0.0);
    }
}
