//! Dense convex quadratic programming:
//!
//! ```text
//! min 1/2 x'Px + q'x   s.t.  Ax = b,  Gx <= h
//! ```
//!
//! Primal-dual interior point (Mehrotra predictor-corrector) with an
//! active-set polish pass that tightens solutions to near machine precision.
//! Sized for the dense subproblems of this crate (a few hundred variables).

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    /// Residuals stopped improving while primal infeasibility stayed large.
    Infeasible,
    MaxIters,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Multipliers of the equality constraints.
    pub y: DVector<f64>,
    /// Multipliers of the inequality constraints (nonnegative).
    pub z: DVector<f64>,
    pub status: QpStatus,
    pub obj: f64,
    pub iters: usize,
}

pub struct QpProblem {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
}

const TOL: f64 = 1e-11;
const MAX_ITERS: usize = 150;

struct Direction {
    dx: DVector<f64>,
    dy: DVector<f64>,
    dz: DVector<f64>,
    ds: DVector<f64>,
}

impl QpProblem {
    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * (x.transpose() * &self.p * x)[(0, 0)] + self.q.dot(x)
    }

    pub fn solve(&self) -> QpSolution {
        let n = self.q.len();
        let me = self.b.len();
        let mi = self.h.len();
        debug_assert_eq!(self.p.nrows(), n);
        debug_assert_eq!(self.a.nrows(), me);
        debug_assert_eq!(self.g.nrows(), mi);

        if mi == 0 {
            return self.solve_equality_only();
        }

        let scale = 1.0
            + self.q.amax().max(self.h.amax()).max(if me > 0 { self.b.amax() } else { 0.0 });
        let reg = 1e-10 * (1.0 + self.p.amax());

        let mut x: DVector<f64> = DVector::zeros(n);
        let mut y: DVector<f64> = DVector::zeros(me);
        let mut s = DVector::from_fn(mi, |i, _| self.h[i].max(1.0));
        let mut z = DVector::from_element(mi, 1.0);

        let mut status = QpStatus::MaxIters;
        let mut iters = 0;
        let mut best_prim_inf = f64::INFINITY;
        let mut stall = 0usize;

        for it in 0..MAX_ITERS {
            iters = it + 1;
            let rx = &self.p * &x + &self.q + self.a.transpose() * &y + self.g.transpose() * &z;
            let ry = &self.a * &x - &self.b;
            let rz = &self.g * &x + &s - &self.h;
            let gap = s.dot(&z) / mi as f64;

            let prim_inf = rz.amax().max(if me > 0 { ry.amax() } else { 0.0 });
            let dual_inf = rx.amax();
            if prim_inf <= TOL * scale && dual_inf <= TOL * scale && gap <= TOL * scale {
                status = QpStatus::Optimal;
                break;
            }
            if prim_inf < best_prim_inf * 0.999 {
                best_prim_inf = prim_inf;
                stall = 0;
            } else {
                stall += 1;
                if stall > 30 && prim_inf > 1e-6 * scale {
                    status = QpStatus::Infeasible;
                    break;
                }
            }

            // Reduced KKT with W = diag(z_i / s_i):
            //   [P + G'WG + reg   A'  ] [dx]   [-rx - G'W(rz - rc/z)]
            //   [A               -reg ] [dy] = [-ry                 ]
            let mut kkt = DMatrix::zeros(n + me, n + me);
            {
                let mut top = kkt.view_mut((0, 0), (n, n));
                top.copy_from(&self.p);
                for i in 0..n {
                    top[(i, i)] += reg;
                }
                for r in 0..mi {
                    let w = z[r] / s[r];
                    for c1 in 0..n {
                        let g1 = self.g[(r, c1)];
                        if g1 == 0.0 {
                            continue;
                        }
                        for c2 in 0..n {
                            let g2 = self.g[(r, c2)];
                            if g2 != 0.0 {
                                top[(c1, c2)] += w * g1 * g2;
                            }
                        }
                    }
                }
            }
            for r in 0..me {
                for c in 0..n {
                    kkt[(n + r, c)] = self.a[(r, c)];
                    kkt[(c, n + r)] = self.a[(r, c)];
                }
                kkt[(n + r, n + r)] = -reg;
            }
            let lu = kkt.lu();

            // rc is the complementarity residual target: Z ds + S dz = -rc.
            let newton = |rc: &DVector<f64>| -> Option<Direction> {
                let mut rhs = DVector::zeros(n + me);
                for r in 0..mi {
                    let w = z[r] / s[r];
                    let coef = w * (rz[r] - rc[r] / z[r]);
                    if coef == 0.0 {
                        continue;
                    }
                    for c in 0..n {
                        rhs[c] -= self.g[(r, c)] * coef;
                    }
                }
                for c in 0..n {
                    rhs[c] -= rx[c];
                }
                for r in 0..me {
                    rhs[n + r] = -ry[r];
                }
                let sol = lu.solve(&rhs)?;
                if sol.iter().any(|v| !v.is_finite()) {
                    return None;
                }
                let dx = sol.rows(0, n).into_owned();
                let dy = sol.rows(n, me).into_owned();
                let gdx = &self.g * &dx;
                let mut dz = DVector::zeros(mi);
                let mut ds = DVector::zeros(mi);
                for r in 0..mi {
                    dz[r] = z[r] / s[r] * (gdx[r] + rz[r] - rc[r] / z[r]);
                    ds[r] = (-rc[r] - s[r] * dz[r]) / z[r];
                }
                Some(Direction { dx, dy, dz, ds })
            };

            // Predictor aims at zero products.
            let rc_aff = DVector::from_fn(mi, |i, _| s[i] * z[i]);
            let Some(aff) = newton(&rc_aff) else {
                status = QpStatus::Infeasible;
                break;
            };
            let alpha_aff = step_length(&s, &aff.ds, &z, &aff.dz, 1.0);
            let gap_aff: f64 = (0..mi)
                .map(|i| (s[i] + alpha_aff * aff.ds[i]) * (z[i] + alpha_aff * aff.dz[i]))
                .sum::<f64>()
                / mi as f64;
            let sigma = (gap_aff / gap).clamp(0.0, 1.0).powi(3);

            let rc_cor =
                DVector::from_fn(mi, |i, _| s[i] * z[i] - sigma * gap + aff.ds[i] * aff.dz[i]);
            let Some(dir) = newton(&rc_cor) else {
                status = QpStatus::Infeasible;
                break;
            };
            let alpha = step_length(&s, &dir.ds, &z, &dir.dz, 0.99);
            x += alpha * &dir.dx;
            y += alpha * &dir.dy;
            for i in 0..mi {
                s[i] = (s[i] + alpha * dir.ds[i]).max(1e-300);
                z[i] = (z[i] + alpha * dir.dz[i]).max(1e-300);
            }
        }

        let mut sol = QpSolution {
            obj: self.objective(&x),
            x,
            y,
            z,
            status,
            iters,
        };
        if sol.status != QpStatus::Infeasible {
            self.polish(&mut sol, scale);
        }
        sol
    }

    fn solve_equality_only(&self) -> QpSolution {
        let n = self.q.len();
        let me = self.b.len();
        let reg = 1e-12 * (1.0 + self.p.amax());
        let mut kkt = DMatrix::zeros(n + me, n + me);
        kkt.view_mut((0, 0), (n, n)).copy_from(&self.p);
        for i in 0..n {
            kkt[(i, i)] += reg;
        }
        for r in 0..me {
            for c in 0..n {
                kkt[(n + r, c)] = self.a[(r, c)];
                kkt[(c, n + r)] = self.a[(r, c)];
            }
        }
        let mut rhs = DVector::zeros(n + me);
        for i in 0..n {
            rhs[i] = -self.q[i];
        }
        for r in 0..me {
            rhs[n + r] = self.b[r];
        }
        let sol = solve_least_squares(&kkt, &rhs);
        let x = sol.rows(0, n).into_owned();
        let y = sol.rows(n, me).into_owned();
        let feas_ok = if me > 0 {
            (&self.a * &x - &self.b).amax() <= 1e-7 * (1.0 + self.b.amax())
        } else {
            true
        };
        QpSolution {
            obj: self.objective(&x),
            x,
            y,
            z: DVector::zeros(0),
            status: if feas_ok { QpStatus::Optimal } else { QpStatus::Infeasible },
            iters: 1,
        }
    }

    /// Re-solves on the detected active set, treated as equalities. Accepted
    /// only when it stays feasible and does not worsen the objective.
    fn polish(&self, sol: &mut QpSolution, scale: f64) {
        let n = self.q.len();
        let me = self.b.len();
        let mi = self.h.len();
        let slack = &self.h - &self.g * &sol.x;
        let active: Vec<usize> = (0..mi)
            .filter(|&i| sol.z[i] > slack[i].max(0.0) || slack[i] < 1e-8 * scale)
            .collect();
        let ma = active.len();
        let mut kkt = DMatrix::zeros(n + me + ma, n + me + ma);
        kkt.view_mut((0, 0), (n, n)).copy_from(&self.p);
        for r in 0..me {
            for c in 0..n {
                kkt[(n + r, c)] = self.a[(r, c)];
                kkt[(c, n + r)] = self.a[(r, c)];
            }
        }
        for (k, &r) in active.iter().enumerate() {
            for c in 0..n {
                kkt[(n + me + k, c)] = self.g[(r, c)];
                kkt[(c, n + me + k)] = self.g[(r, c)];
            }
        }
        let mut rhs = DVector::zeros(n + me + ma);
        for i in 0..n {
            rhs[i] = -self.q[i];
        }
        for r in 0..me {
            rhs[n + r] = self.b[r];
        }
        for (k, &r) in active.iter().enumerate() {
            rhs[n + me + k] = self.h[r];
        }
        let out = solve_least_squares(&kkt, &rhs);
        let x = out.rows(0, n).into_owned();
        // KKT stationarity here reads Px + q + A'l + G'm = 0 with l, m the
        // reported block; our convention stores multipliers with + sign.
        let y = out.rows(n, me).into_owned();
        let mut z = DVector::zeros(mi);
        let mut dual_ok = true;
        for (k, &r) in active.iter().enumerate() {
            let lam = out[n + me + k];
            if lam < -1e-7 * scale {
                dual_ok = false;
            }
            z[r] = lam.max(0.0);
        }
        let gx = &self.g * &x;
        let prim_ineq_ok = (0..mi).all(|i| gx[i] <= self.h[i] + 1e-8 * scale);
        let prim_eq_ok = if me > 0 {
            (&self.a * &x - &self.b).amax() <= 1e-8 * scale
        } else {
            true
        };
        let obj = self.objective(&x);
        if prim_ineq_ok && prim_eq_ok && dual_ok && obj <= sol.obj + 1e-8 * scale.powi(2) {
            sol.x = x;
            sol.y = y;
            sol.z = z;
            sol.obj = obj;
            sol.status = QpStatus::Optimal;
        }
    }
}

fn step_length(
    s: &DVector<f64>,
    ds: &DVector<f64>,
    z: &DVector<f64>,
    dz: &DVector<f64>,
    eta: f64,
) -> f64 {
    let mut alpha: f64 = 1.0;
    for i in 0..s.len() {
        if ds[i] < 0.0 {
            alpha = alpha.min(eta * s[i] / -ds[i]);
        }
        if dz[i] < 0.0 {
            alpha = alpha.min(eta * z[i] / -dz[i]);
        }
    }
    alpha
}

fn solve_least_squares(m: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    match m.clone().lu().solve(rhs) {
        Some(x)
            if x.iter().all(|v| v.is_finite())
                && (m * &x - rhs).amax() <= 1e-6 * (1.0 + rhs.amax()) =>
        {
            x
        }
        _ => {
            let svd = m.clone().svd(true, true);
            svd.solve(rhs, 1e-12 * (1.0 + m.amax()))
                .unwrap_or_else(|_| DVector::zeros(m.ncols()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small(
        p: Vec<f64>,
        q: Vec<f64>,
        a: (usize, Vec<f64>, Vec<f64>),
        g: (usize, Vec<f64>, Vec<f64>),
    ) -> QpProblem {
        let n = q.len();
        QpProblem {
            p: DMatrix::from_row_slice(n, n, &p),
            q: DVector::from_vec(q),
            a: DMatrix::from_row_slice(a.0, n, &a.1),
            b: DVector::from_vec(a.2),
            g: DMatrix::from_row_slice(g.0, n, &g.1),
            h: DVector::from_vec(g.2),
        }
    }

    #[test]
    fn unconstrained_minimum_inside_box() {
        // min (x-1)^2 + (y+2)^2 with -5 <= x,y <= 5
        let qp = small(
            vec![2.0, 0.0, 0.0, 2.0],
            vec![-2.0, 4.0],
            (0, vec![], vec![]),
            (
                4,
                vec![1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0],
                vec![5.0, 5.0, 5.0, 5.0],
            ),
        );
        let sol = qp.solve();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_abs_diff_eq!(sol.x[0], 1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(sol.x[1], -2.0, epsilon = 1e-8);
    }

    #[test]
    fn active_bound_with_dual() {
        // min x^2 s.t. x >= 1  ->  x = 1, multiplier 2
        let qp = small(vec![2.0], vec![0.0], (0, vec![], vec![]), (1, vec![-1.0], vec![-1.0]));
        let sol = qp.solve();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_abs_diff_eq!(sol.x[0], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.z[0], 2.0, epsilon = 1e-7);
    }

    #[test]
    fn equality_coupling() {
        // min x^2 + y^2 s.t. x + y = 2 -> (1, 1)
        let qp = small(
            vec![2.0, 0.0, 0.0, 2.0],
            vec![0.0, 0.0],
            (1, vec![1.0, 1.0], vec![2.0]),
            (0, vec![], vec![]),
        );
        let sol = qp.solve();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_abs_diff_eq!(sol.x[0], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.x[1], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn mixed_equality_inequality() {
        // min (x-3)^2 + y^2 s.t. x + y = 2, x <= 1 -> x = 1, y = 1
        let qp = small(
            vec![2.0, 0.0, 0.0, 2.0],
            vec![-6.0, 0.0],
            (1, vec![1.0, 1.0], vec![2.0]),
            (1, vec![1.0, 0.0], vec![1.0]),
        );
        let sol = qp.solve();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_abs_diff_eq!(sol.x[0], 1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(sol.x[1], 1.0, epsilon = 1e-8);
    }

    #[test]
    fn singular_objective_direction() {
        // Objective ignores y; constraints pin y = 4.
        let qp = small(
            vec![2.0, 0.0, 0.0, 0.0],
            vec![-6.0, 0.0],
            (0, vec![], vec![]),
            (2, vec![0.0, 1.0, 0.0, -1.0], vec![4.0, -4.0]),
        );
        let sol = qp.solve();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_abs_diff_eq!(sol.x[0], 3.0, epsilon = 1e-8);
        assert_abs_diff_eq!(sol.x[1], 4.0, epsilon = 1e-8);
    }

    #[test]
    fn detects_infeasible() {
        // x <= -1 and x >= 1
        let qp = small(
            vec![2.0],
            vec![0.0],
            (0, vec![], vec![]),
            (2, vec![1.0, -1.0], vec![-1.0, -1.0]),
        );
        let sol = qp.solve();
        assert_ne!(sol.status, QpStatus::Optimal);
    }

    #[test]
    fn randomized_box_projection() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..25 {
            // min ||x - c||^2 over box [0,1]^4: solution is the clipped c.
            let n = 4;
            let c: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..3.0)).collect();
            let mut p = vec![0.0; n * n];
            for i in 0..n {
                p[i * n + i] = 2.0;
            }
            let mut grows = vec![0.0; 2 * n * n];
            let mut hvals = vec![0.0; 2 * n];
            for i in 0..n {
                grows[i * n + i] = 1.0;
                hvals[i] = 1.0;
                grows[(n + i) * n + i] = -1.0;
                hvals[n + i] = 0.0;
            }
            let qp = small(
                p,
                c.iter().map(|v| -2.0 * v).collect(),
                (0, vec![], vec![]),
                (2 * n, grows, hvals),
            );
            let sol = qp.solve();
            assert_eq!(sol.status, QpStatus::Optimal);
            for i in 0..n {
                assert_abs_diff_eq!(sol.x[i], c[i].clamp(0.0, 1.0), epsilon = 1e-7);
            }
        }
    }
}
