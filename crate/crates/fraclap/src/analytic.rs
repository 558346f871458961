//! Closed-form ground truth: the ball solution of the constant-source
//! problem, its exact energy, and the Gamma evaluations behind both.

use crate::mesh::{sub, Mesh};
use crate::quadrature::TriangleRule;

/// Gamma function by the Lanczos approximation (g = 7, 9 terms), accurate to
/// about 1e-13 relative over the range used here.
pub fn gamma(z: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if z < 0.5 {
        // Reflection formula.
        return std::f64::consts::PI / ((std::f64::consts::PI * z).sin() * gamma(1.0 - z));
    }
    let z = z - 1.0;
    let mut acc = COEF[0];
    for (k, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (z + k as f64);
    }
    let t = z + 7.5;
    (2.0 * std::f64::consts::PI).sqrt() * t.powf(z + 0.5) * (-t).exp() * acc
}

/// Coefficient of the ball solution:
/// `kappa(n, s) = 2^(-2s) Gamma(n/2) / (Gamma((n+2s)/2) Gamma(1+s))`.
pub fn ball_coefficient(n: usize, s: f64) -> f64 {
    assert!(n == 1 || n == 2, "dimension must be 1 or 2");
    assert!(s > 0.0 && s < 1.0, "s must lie in (0, 1)");
    2.0_f64.powf(-2.0 * s) * gamma(n as f64 / 2.0)
        / (gamma((n as f64 + 2.0 * s) / 2.0) * gamma(1.0 + s))
}

/// Exact solution `u(x) = kappa (r^2 - |x - x0|^2)^s` of the constant-source
/// problem on a ball, zero outside.
#[derive(Debug, Clone, Copy)]
pub struct BallSolution {
    pub n: usize,
    pub s: f64,
    pub center: [f64; 2],
    pub radius: f64,
    pub coefficient: f64,
}

impl BallSolution {
    pub fn new(n: usize, s: f64, center: [f64; 2], radius: f64) -> BallSolution {
        assert!(radius > 0.0);
        BallSolution {
            n,
            s,
            center,
            radius,
            coefficient: ball_coefficient(n, s),
        }
    }

    /// Unit ball centered at the origin.
    pub fn unit(n: usize, s: f64) -> BallSolution {
        BallSolution::new(n, s, [0.0, 0.0], 1.0)
    }
}

pub fn getoor_eval(sol: &BallSolution, x: [f64; 2]) -> f64 {
    let d2 = if sol.n == 1 {
        (x[0] - sol.center[0]).powi(2)
    } else {
        let d = sub(x, sol.center);
        d[0] * d[0] + d[1] * d[1]
    };
    let arg = sol.radius * sol.radius - d2;
    if arg <= 0.0 {
        0.0
    } else {
        sol.coefficient * arg.powf(sol.s)
    }
}

/// Exact squared energy of the constant-source ball problem:
/// `|u|_V^2 = int_B u = kappa pi^(n/2) Gamma(s+1) / Gamma(s+n/2+1) r^(n+2s)`.
pub fn exact_energy_squared(sol: &BallSolution) -> f64 {
    let n = sol.n as f64;
    sol.coefficient
        * std::f64::consts::PI.powf(n / 2.0)
        * gamma(sol.s + 1.0)
        / gamma(sol.s + n / 2.0 + 1.0)
        * sol.radius.powf(n + 2.0 * sol.s)
}

/// `L2(Omega)` distance between the exact ball solution and the P1 function
/// with interior nodal values `u` (zero on boundary vertices), by elementwise
/// Gauss quadrature of order 6.
pub fn nodal_interpolant_error_l2(mesh: &Mesh, sol: &BallSolution, u: &[f64]) -> f64 {
    let dofs = mesh.interior_dof_map();
    assert_eq!(u.len(), dofs.n_dofs());
    let nodal = |v: usize| dofs.dof(v).map_or(0.0, |d| u[d]);
    let mut total = 0.0;
    if mesh.dim() == 1 {
        let g = crate::quadrature::gauss_rule_1d(6).expect("rule");
        for t in 0..mesh.n_elements() {
            let e = mesh.element(t);
            let (x0, x1) = (mesh.vertex(e[0])[0], mesh.vertex(e[1])[0]);
            let (u0, u1) = (nodal(e[0]), nodal(e[1]));
            let len = x1 - x0;
            for (p, w) in g.points.iter().zip(&g.weights) {
                let x = x0 + p * len;
                let uh = u0 * (1.0 - p) + u1 * p;
                let diff = getoor_eval(sol, [x, 0.0]) - uh;
                total += w * len.abs() * diff * diff;
            }
        }
    } else {
        let tri = TriangleRule::collapsed(6).expect("rule");
        for t in 0..mesh.n_elements() {
            let e = mesh.element(t);
            let [p0, p1, p2] = [mesh.vertex(e[0]), mesh.vertex(e[1]), mesh.vertex(e[2])];
            let jac = 2.0 * mesh.element_measure(t);
            let vals = [nodal(e[0]), nodal(e[1]), nodal(e[2])];
            for (z, w) in tri.points.iter().zip(&tri.weights) {
                let b = [1.0 - z[0] - z[1], z[0], z[1]];
                let x = [
                    b[0] * p0[0] + b[1] * p1[0] + b[2] * p2[0],
                    b[0] * p0[1] + b[1] * p1[1] + b[2] * p2[1],
                ];
                let uh = b[0] * vals[0] + b[1] * vals[1] + b[2] * vals[2];
                let diff = getoor_eval(sol, x) - uh;
                total += w * jac * diff * diff;
            }
        }
    }
    total.sqrt()
}
