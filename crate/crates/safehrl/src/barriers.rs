//! Barrier values, zeta sequences and the CBF/CLF rows of the skill QP.
//!
//! Rows are returned in `g . x <= h` form over the QP decision vector
//! `x = [controls; slacks]`. Class-K functions are linear, `alpha(x) = gain * x`.
//! Positions and velocities come from [`Kinematics`]; for the Frenet model they
//! are `(p, d)` and `(p_dot, d_dot)`.

use crate::dynamics::Kinematics;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BarrierError {
    #[error("barrier of kind {0:?} needs a neighbor or obstacle")]
    MissingNeighbor(BarrierKind),
    #[error("control never appears at relative degree {0}")]
    Degree(usize),
    #[error("non-finite barrier derivative")]
    Domain,
    #[error("need {need} class-K gains, got {got}")]
    Gains { need: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassK {
    pub gain: f64,
}

impl ClassK {
    pub fn eval(&self, x: f64) -> f64 {
        self.gain * x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BarrierKind {
    InterAgent,
    RoadBoundary,
    StaticObstacle,
}

/// A straight lane: direction angle, a point on its center line and half-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub dir: f64,
    pub anchor: [f64; 2],
    pub half_width: f64,
}

impl Lane {
    pub fn straight(center: f64, half_width: f64) -> Self {
        Self { dir: 0.0, anchor: [0.0, center], half_width }
    }

    pub fn normal(&self) -> [f64; 2] {
        [-self.dir.sin(), self.dir.cos()]
    }

    /// Signed offset of `pos` from the center line, positive to the left.
    pub fn offset(&self, pos: [f64; 2]) -> f64 {
        let n = self.normal();
        n[0] * (pos[0] - self.anchor[0]) + n[1] * (pos[1] - self.anchor[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarrierSpec {
    pub kind: BarrierKind,
    pub rel_degree: usize,
    /// Footprint radius of the speed-dependent safety radius `r(v) = r0 + r1 * max(v, 0)`.
    pub r0: f64,
    pub r1: f64,
    /// Squared clearance for static obstacles.
    pub e: f64,
    /// Side of a boundary barrier: `+1` left edge (`c - offset`), `-1` right edge.
    pub side: f64,
    /// Tightening applied to `b` inside the rows; the barrier itself is unchanged.
    pub buffer: f64,
    /// Constant subtracted from `h` of degree-one rows to absorb the Euler step.
    pub disc_margin: f64,
}

impl BarrierSpec {
    pub fn inter_agent(r0: f64, r1: f64) -> Self {
        Self {
            kind: BarrierKind::InterAgent,
            rel_degree: if r1 > 0.0 { 1 } else { 2 },
            r0,
            r1,
            e: 0.0,
            side: 1.0,
            buffer: 0.0,
            disc_margin: 0.0,
        }
    }

    pub fn boundary(side: f64) -> Self {
        Self {
            kind: BarrierKind::RoadBoundary,
            rel_degree: 2,
            r0: 0.0,
            r1: 0.0,
            e: 0.0,
            side,
            buffer: 0.0,
            disc_margin: 0.0,
        }
    }

    pub fn obstacle(e: f64) -> Self {
        Self {
            kind: BarrierKind::StaticObstacle,
            rel_degree: 2,
            r0: 0.0,
            r1: 0.0,
            e,
            side: 1.0,
            buffer: 0.0,
            disc_margin: 0.0,
        }
    }

    pub fn radius(&self, speed: f64) -> f64 {
        speed_radius(self.r0, self.r1, speed)
    }
}

pub fn speed_radius(r0: f64, r1: f64, speed: f64) -> f64 {
    r0 + r1 * speed.max(0.0)
}

/// What a barrier is measured against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    /// Another agent or obstacle, position and velocity relative to the ego.
    Entity { rel_pos: [f64; 2], rel_vel: [f64; 2] },
    Lane(Lane),
    None,
}

/// Barrier value and its derivatives along the dynamics.
/// `b_dot = db_f + db_g . u`; `b_ddot = ddb_f + ddb_g . u` (only meaningful when `db_g = 0`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Derivs {
    pub b: f64,
    pub db_f: f64,
    pub db_g: [f64; 2],
    pub ddb_f: f64,
    pub ddb_g: [f64; 2],
}

fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

/// `w' A` for a row-major 2x2 `A`.
fn vec_mat(w: [f64; 2], a: [[f64; 2]; 2]) -> [f64; 2] {
    [w[0] * a[0][0] + w[1] * a[1][0], w[0] * a[0][1] + w[1] * a[1][1]]
}

pub fn derivatives(spec: &BarrierSpec, ego: &Kinematics, target: &Target) -> Result<Derivs, BarrierError> {
    let out = match (spec.kind, target) {
        (BarrierKind::InterAgent | BarrierKind::StaticObstacle, Target::Entity { rel_pos, rel_vel }) => {
            let del = [-rel_pos[0], -rel_pos[1]];
            let ddel = [-rel_vel[0], -rel_vel[1]];
            let d2 = dot(del, del);
            let (b, db_f, db_g) = if spec.kind == BarrierKind::InterAgent {
                let r = spec.radius(ego.speed);
                let drdv = if ego.speed >= 0.0 { spec.r1 } else { 0.0 };
                let k = -2.0 * r * drdv;
                (
                    d2 - r * r,
                    2.0 * dot(del, ddel) + k * ego.speed_f,
                    [k * ego.speed_g[0], k * ego.speed_g[1]],
                )
            } else {
                (d2 - spec.e, 2.0 * dot(del, ddel), [0.0, 0.0])
            };
            let ddb_f = 2.0 * dot(ddel, ddel) + 2.0 * dot(del, ego.acc_f);
            let g = vec_mat(del, ego.acc_g);
            Derivs { b, db_f, db_g, ddb_f, ddb_g: [2.0 * g[0], 2.0 * g[1]] }
        }
        (BarrierKind::RoadBoundary, Target::Lane(lane)) => {
            let n = lane.normal();
            let s = spec.side;
            let g = vec_mat(n, ego.acc_g);
            Derivs {
                b: lane.half_width - s * lane.offset(ego.pos),
                db_f: -s * dot(n, ego.vel),
                db_g: [0.0, 0.0],
                ddb_f: -s * dot(n, ego.acc_f),
                ddb_g: [-s * g[0], -s * g[1]],
            }
        }
        (kind, _) => return Err(BarrierError::MissingNeighbor(kind)),
    };
    let all = [out.b, out.db_f, out.db_g[0], out.db_g[1], out.ddb_f, out.ddb_g[0], out.ddb_g[1]];
    if all.iter().all(|x| x.is_finite()) {
        Ok(out)
    } else {
        Err(BarrierError::Domain)
    }
}

pub fn eval_barrier(spec: &BarrierSpec, ego: &Kinematics, target: &Target) -> Result<f64, BarrierError> {
    Ok(derivatives(spec, ego, target)?.b)
}

/// `[zeta_0, ..., zeta_{m-1}]` with `zeta_0 = b`, `zeta_1 = b_dot + alpha_1(b)`.
/// Derivatives use the control-free part only.
pub fn zeta_sequence(spec: &BarrierSpec, ego: &Kinematics, target: &Target, alphas: &[ClassK]) -> Result<Vec<f64>, BarrierError> {
    let m = spec.rel_degree;
    if alphas.len() + 1 < m {
        return Err(BarrierError::Gains { need: m - 1, got: alphas.len() });
    }
    let d = derivatives(spec, ego, target)?;
    let mut z = vec![d.b];
    if m >= 2 {
        z.push(d.db_f + alphas[0].eval(d.b));
    }
    Ok(z)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    CbfHard,
    ClfSoft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintRow {
    pub g_coeffs: Vec<f64>,
    pub h_rhs: f64,
    pub kind: RowKind,
    pub slack_index: Option<usize>,
}

impl ConstraintRow {
    /// `h - g . x`; nonnegative when the row holds.
    pub fn residual(&self, x: &[f64]) -> f64 {
        self.h_rhs - self.g_coeffs.iter().zip(x).map(|(g, v)| g * v).sum::<f64>()
    }
}

/// CBF row of relative degree one or two over `n_vars` decision variables
/// (the first two are the controls).
pub fn hocbf_row(
    spec: &BarrierSpec,
    ego: &Kinematics,
    target: &Target,
    gains: &[f64],
    n_vars: usize,
) -> Result<ConstraintRow, BarrierError> {
    let m = spec.rel_degree;
    if gains.len() < m {
        return Err(BarrierError::Gains { need: m, got: gains.len() });
    }
    let d = derivatives(spec, ego, target)?;
    let speed_enters = spec.kind == BarrierKind::InterAgent && spec.r1 > 0.0;
    let mut g = vec![0.0; n_vars.max(2)];
    let h = match m {
        1 => {
            if !speed_enters {
                return Err(BarrierError::Degree(1));
            }
            g[0] = -d.db_g[0];
            g[1] = -d.db_g[1];
            d.db_f + gains[0] * (d.b - spec.buffer) - spec.disc_margin
        }
        2 => {
            if speed_enters {
                return Err(BarrierError::Degree(2));
            }
            let (p1, p2) = (gains[0], gains[1]);
            g[0] = -d.ddb_g[0];
            g[1] = -d.ddb_g[1];
            d.ddb_f + (p1 + p2) * d.db_f + p1 * p2 * (d.b - spec.buffer)
        }
        other => return Err(BarrierError::Degree(other)),
    };
    Ok(ConstraintRow { g_coeffs: g, h_rhs: h, kind: RowKind::CbfHard, slack_index: None })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClfKind {
    Velocity,
    Heading,
    VelocityVector,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClfTarget {
    Scalar(f64),
    Vector([f64; 2]),
}

fn wrap(a: f64) -> f64 {
    use std::f64::consts::PI;
    (a + PI).rem_euclid(2.0 * PI) - PI
}

/// Soft CLF row `L_f V + L_g V u + phi_v * eta - e <= 0`, slack coefficient `-1`.
pub fn clf_row(
    kind: ClfKind,
    ego: &Kinematics,
    target: ClfTarget,
    phi_v: f64,
    slack_index: usize,
    n_vars: usize,
) -> ConstraintRow {
    let mut g = vec![0.0; n_vars];
    let h = match (kind, target) {
        (ClfKind::Velocity, ClfTarget::Scalar(vd)) => {
            let ev = ego.speed - vd;
            g[0] = 2.0 * ev * ego.speed_g[0];
            g[1] = 2.0 * ev * ego.speed_g[1];
            -phi_v * ev * ev - 2.0 * ev * ego.speed_f
        }
        (ClfKind::Heading, ClfTarget::Scalar(hd)) => {
            let eh = wrap(ego.heading - hd);
            g[0] = 2.0 * eh * ego.heading_rate_g[0];
            g[1] = 2.0 * eh * ego.heading_rate_g[1];
            -phi_v * eh * eh - 2.0 * eh * ego.heading_rate_f
        }
        (ClfKind::VelocityVector, ClfTarget::Vector(vd)) => {
            let ev = [ego.vel[0] - vd[0], ego.vel[1] - vd[1]];
            let w = vec_mat(ev, ego.acc_g);
            g[0] = w[0];
            g[1] = w[1];
            -phi_v * dot(ev, ev) - dot(ev, ego.acc_f)
        }
        (k, t) => panic!("CLF kind {k:?} does not take target {t:?}"),
    };
    g[slack_index] = -1.0;
    ConstraintRow { g_coeffs: g, h_rhs: h, kind: RowKind::ClfSoft, slack_index: Some(slack_index) }
}

/// Desired heading offset from a lateral error: `clamp(k_h * e_lat, -clamp, clamp)`.
pub fn desired_heading_from_lateral_error(e_lat: f64, k_h: f64, clamp: f64) -> f64 {
    (k_h * e_lat).clamp(-clamp, clamp)
}
