//! Independent QP oracle shared by the solver tests.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use safehrl::qpcore::QPSpec;

/// Random strictly convex instance with a mix of active and inactive rows.
pub fn instance(rng: &mut ChaCha8Rng) -> QPSpec {
    let n = rng.gen_range(1..=6);
    let m = rng.gen_range(0..=10);
    let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let hess = a.transpose() * &a + DMatrix::identity(n, n) * rng.gen_range(0.1..1.0);
    let lin = DVector::from_fn(n, |_, _| rng.gen_range(-3.0..3.0));
    let g = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
    let u0 = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    let h = &g * &u0 + DVector::from_fn(m, |_, _| rng.gen_range(0.0..0.5));
    let (lb, ub) = if rng.gen_bool(0.5) {
        (DVector::from_element(n, -2.0), DVector::from_element(n, 2.0))
    } else {
        (DVector::from_element(n, f64::NEG_INFINITY), DVector::from_element(n, f64::INFINITY))
    };
    QPSpec { hess, lin, g, h, lb, ub }
}

/// All constraints stacked as `A u <= b`.
pub fn stacked(spec: &QPSpec) -> (DMatrix<f64>, DVector<f64>) {
    let n = spec.n();
    let mut rows: Vec<(Vec<f64>, f64)> = (0..spec.m())
        .map(|i| (spec.g.row(i).iter().copied().collect(), spec.h[i]))
        .collect();
    for j in 0..n {
        if spec.ub[j].is_finite() {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            rows.push((e, spec.ub[j]));
        }
        if spec.lb[j].is_finite() {
            let mut e = vec![0.0; n];
            e[j] = -1.0;
            rows.push((e, -spec.lb[j]));
        }
    }
    let a = DMatrix::from_fn(rows.len(), n, |i, j| rows[i].0[j]);
    let b = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
    (a, b)
}

/// Independent oracle: accelerated projected gradient ascent on the dual
/// (projection onto lambda >= 0), followed by an exact KKT solve on the
/// identified active set. Returns the optimal objective value.
pub fn oracle(spec: &QPSpec) -> f64 {
    let q = &spec.hess * 2.0;
    let qi = q.clone().try_inverse().unwrap();
    let (a, b) = stacked(spec);
    let k = a.nrows();
    if k == 0 {
        let u = -&qi * &spec.lin;
        return spec.objective(&u);
    }
    let aqa = &a * &qi * a.transpose();
    let lip = aqa.clone().symmetric_eigen().eigenvalues.amax().max(1e-12);
    let u_of = |lam: &DVector<f64>| -&qi * (&spec.lin + a.transpose() * lam);
    let dual = |lam: &DVector<f64>| {
        let u = u_of(lam);
        spec.objective(&u) + lam.dot(&(&a * &u - &b))
    };
    let mut lam = DVector::zeros(k);
    let mut y = lam.clone();
    let mut t = 1.0f64;
    let mut best = dual(&lam);
    for it in 0..200_000 {
        let grad = &a * u_of(&y) - &b;
        let next = (&y + grad / lip).map(|x| x.max(0.0));
        let val = dual(&next);
        if val < best {
            // Adaptive restart.
            t = 1.0;
            y = lam.clone();
            continue;
        }
        best = val;
        let tn = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        y = &next + (&next - &lam) * ((t - 1.0) / tn);
        lam = next;
        t = tn;
        if it % 500 == 499 {
            if let Some(v) = refine(spec, &q, &a, &b, &lam) {
                return v;
            }
        }
    }
    refine(spec, &q, &a, &b, &lam).expect("oracle failed to identify the active set")
}

fn refine(spec: &QPSpec, q: &DMatrix<f64>, a: &DMatrix<f64>, b: &DVector<f64>, lam: &DVector<f64>) -> Option<f64> {
    let n = spec.n();
    let scale = lam.amax().max(1.0);
    let act: Vec<usize> = (0..lam.len()).filter(|&i| lam[i] > 1e-7 * scale).collect();
    let k = act.len();
    let mut m = DMatrix::zeros(n + k, n + k);
    m.view_mut((0, 0), (n, n)).copy_from(q);
    for (c, &i) in act.iter().enumerate() {
        for j in 0..n {
            m[(j, n + c)] = a[(i, j)];
            m[(n + c, j)] = a[(i, j)];
        }
    }
    let mut rhs = DVector::zeros(n + k);
    rhs.rows_mut(0, n).copy_from(&(-&spec.lin));
    for (c, &i) in act.iter().enumerate() {
        rhs[n + c] = b[i];
    }
    let x = m.lu().solve(&rhs)?;
    let u = x.rows(0, n).into_owned();
    let feasible = (a * &u - b).iter().all(|&r| r <= 1e-9);
    let dual_ok = x.rows(n, k).iter().all(|&l| l >= -1e-9);
    (feasible && dual_ok).then(|| spec.objective(&u))
}
