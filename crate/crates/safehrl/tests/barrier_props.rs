use proptest::prelude::*;
use safehrl::barriers::*;
use safehrl::dynamics::*;

/// Classical RK4 on the control-affine vector field with constant input.
fn rk4(s: &AgentState, u: Control, p: &DynamicsParams, h: f64) -> AgentState {
    let model = s.model();
    let x0 = s.to_vec();
    let field = |x: &[f64]| {
        let a = affine_decomposition(&AgentState::from_vec(model, x), p).unwrap();
        (0..x.len()).map(|i| a.f[i] + a.g[i][0] * u[0] + a.g[i][1] * u[1]).collect::<Vec<f64>>()
    };
    let add = |x: &[f64], k: &[f64], c: f64| x.iter().zip(k).map(|(a, b)| a + c * b).collect::<Vec<f64>>();
    let k1 = field(&x0);
    let k2 = field(&add(&x0, &k1, h / 2.0));
    let k3 = field(&add(&x0, &k2, h / 2.0));
    let k4 = field(&add(&x0, &k3, h));
    let x: Vec<f64> = (0..x0.len()).map(|i| x0[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect();
    AgentState::from_vec(model, &x)
}

#[derive(Debug)]
struct Case {
    state: AgentState,
    params: DynamicsParams,
    spec: BarrierSpec,
    other_pos: [f64; 2],
    other_vel: [f64; 2],
    lane: Lane,
    u: Control,
}

impl Case {
    fn target_at(&self, s: &AgentState, t: f64) -> (Kinematics, Target) {
        let k = kinematics(s, &self.params).unwrap();
        let target = match self.spec.kind {
            BarrierKind::RoadBoundary => Target::Lane(self.lane),
            _ => {
                let op = [self.other_pos[0] + t * self.other_vel[0], self.other_pos[1] + t * self.other_vel[1]];
                Target::Entity {
                    rel_pos: [op[0] - k.pos[0], op[1] - k.pos[1]],
                    rel_vel: [self.other_vel[0] - k.vel[0], self.other_vel[1] - k.vel[1]],
                }
            }
        };
        (k, target)
    }

    fn zetas(&self, s: &AgentState, t: f64, gain: f64) -> Vec<f64> {
        let (k, target) = self.target_at(s, t);
        zeta_sequence(&self.spec, &k, &target, &[ClassK { gain }]).unwrap()
    }
}

fn case_strategy() -> impl Strategy<Value = Case> {
    (
        0usize..3,
        0usize..3,
        prop::array::uniform5(-1.0f64..1.0),
        prop::array::uniform4(-1.0f64..1.0),
        prop::array::uniform2(-1.0f64..1.0),
    )
        .prop_map(|(mi, ki, x, o, w)| {
            let (state, params) = match mi {
                0 => (
                    AgentState::BicycleFrenet(BicycleFrenetState { p: 0.0, d: x[0], psi: 0.4 * x[1], v: 6.0 + 3.0 * x[2] }),
                    DynamicsParams::road(),
                ),
                1 => (
                    AgentState::DoubleIntegrator(DoubleIntegratorState { px: x[0], py: x[1], vx: x[2], vy: x[3] }),
                    DynamicsParams::planar(),
                ),
                _ => (
                    AgentState::BicycleCartesian(BicycleCartesianState::new(x[0], x[1], 3.0 * x[2], 1.0 + x[3])),
                    DynamicsParams::planar(),
                ),
            };
            let spec = match ki {
                0 => BarrierSpec::inter_agent(1.0, if x[4] > 0.0 { 0.5 } else { 0.0 }),
                1 => BarrierSpec::boundary(if x[4] > 0.0 { 1.0 } else { -1.0 }),
                _ => BarrierSpec::obstacle(0.5),
            };
            let other_vel = if ki == 2 { [0.0, 0.0] } else { [o[2], o[3]] };
            Case {
                state,
                params,
                spec,
                other_pos: [6.0 + 2.0 * o[0], 3.0 * o[1]],
                other_vel,
                lane: Lane { dir: 0.3 * o[0], anchor: [0.0, 0.5 * o[1]], half_width: 1.75 },
                u: [0.5 * w[0], 0.3 * w[1]],
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    /// Finite-difference derivatives of the zeta functions along the flow match
    /// the analytic Lie derivatives used by the rows.
    #[test]
    fn zeta_derivatives_match_finite_differences(c in case_strategy(), gain in 0.2f64..3.0) {
        let h = 1e-4;
        let fwd = rk4(&c.state, c.u, &c.params, h);
        let bwd = rk4(&c.state, c.u, &c.params, -h);
        let zf = c.zetas(&fwd, h, gain);
        let zb = c.zetas(&bwd, -h, gain);
        let (k, target) = c.target_at(&c.state, 0.0);
        let d = derivatives(&c.spec, &k, &target).unwrap();
        let bdot = d.db_f + d.db_g[0] * c.u[0] + d.db_g[1] * c.u[1];
        let fd0 = (zf[0] - zb[0]) / (2.0 * h);
        prop_assert!((fd0 - bdot).abs() <= 1e-5 * bdot.abs().max(1.0), "zeta0: fd {fd0} vs {bdot}");
        if c.spec.rel_degree == 2 {
            let zdot = d.ddb_f + d.ddb_g[0] * c.u[0] + d.ddb_g[1] * c.u[1] + gain * bdot;
            let fd1 = (zf[1] - zb[1]) / (2.0 * h);
            prop_assert!((fd1 - zdot).abs() <= 1e-5 * zdot.abs().max(1.0), "zeta1: fd {fd1} vs {zdot}");
        }
    }

    /// Raising the last gain never shrinks the feasible set while the zeta
    /// functions are nonnegative; the first gain of a degree-two row needs
    /// `b_dot + phi_2 b >= 0` as well.
    #[test]
    fn gains_monotone(c in case_strategy(), p1 in 0.1f64..5.0, p2 in 0.1f64..5.0, bump in 0.0f64..2.0) {
        let (k, target) = c.target_at(&c.state, 0.0);
        let d = derivatives(&c.spec, &k, &target).unwrap();
        prop_assume!(d.b >= 0.0);
        let row = |g: &[f64]| hocbf_row(&c.spec, &k, &target, g, 2).unwrap().h_rhs;
        if c.spec.rel_degree == 1 {
            prop_assert!(row(&[p1 + bump]) >= row(&[p1]));
        } else {
            prop_assume!(d.db_f + p1 * d.b >= 0.0);
            prop_assert!(row(&[p1, p2 + bump]) >= row(&[p1, p2]) - 1e-12);
            if d.db_f + p2 * d.b >= 0.0 {
                prop_assert!(row(&[p1 + bump, p2]) >= row(&[p1, p2]) - 1e-12);
            }
        }
    }

    /// Reflecting the lateral state swaps the two boundary rows.
    #[test]
    fn boundary_reflection(d in -1.5f64..1.5, psi in -0.5f64..0.5, v in 0.0f64..10.0, g1 in 0.1f64..5.0, g2 in 0.1f64..5.0) {
        let p = DynamicsParams::road();
        let lane = Target::Lane(Lane::straight(0.0, 1.75));
        let k = kinematics(&AgentState::BicycleFrenet(BicycleFrenetState { p: 3.0, d, psi, v }), &p).unwrap();
        let km = kinematics(&AgentState::BicycleFrenet(BicycleFrenetState { p: 3.0, d: -d, psi: -psi, v }), &p).unwrap();
        let up = BarrierSpec::boundary(1.0);
        let lo = BarrierSpec::boundary(-1.0);
        prop_assert_eq!(eval_barrier(&up, &k, &lane).unwrap(), eval_barrier(&lo, &km, &lane).unwrap());
        let a = hocbf_row(&up, &k, &lane, &[g1, g2], 2).unwrap();
        let b = hocbf_row(&lo, &km, &lane, &[g1, g2], 2).unwrap();
        prop_assert!((a.h_rhs - b.h_rhs).abs() <= 1e-12 * a.h_rhs.abs().max(1.0));
        prop_assert!((a.g_coeffs[0] - b.g_coeffs[0]).abs() <= 1e-15);
        prop_assert!((a.g_coeffs[1] + b.g_coeffs[1]).abs() <= 1e-15);
    }

    #[test]
    fn attained_clf_is_satisfied_at_rest(v in 0.0f64..10.0, psi in -1.0f64..1.0, rate in 0.01f64..10.0) {
        let p = DynamicsParams::road();
        let k = kinematics(&AgentState::BicycleFrenet(BicycleFrenetState { p: 0.0, d: 0.0, psi, v }), &p).unwrap();
        let r = clf_row(ClfKind::Velocity, &k, ClfTarget::Scalar(v), rate, 2, 4);
        prop_assert!(r.residual(&[0.0; 4]) >= 0.0);
        let r = clf_row(ClfKind::Heading, &k, ClfTarget::Scalar(psi), rate, 3, 4);
        prop_assert!(r.residual(&[0.0; 4]) >= 0.0);
        let r = clf_row(ClfKind::VelocityVector, &k, ClfTarget::Vector(k.vel), rate, 2, 3);
        prop_assert!(r.residual(&[0.0; 3]) >= 0.0);
    }
}
