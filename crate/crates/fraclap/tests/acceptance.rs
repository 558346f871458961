//! Acceptance suite: one test per criterion, each printing a pass/fail line.
//!
//! Criteria 1-3 reproduce the benchmark convergence tables on fixed mesh
//! ladders; 4-8 pin exact anchors, quadrature oracles, structural matrix
//! invariants, nested-energy monotonicity and the graded-vs-uniform
//! comparison at matched size.

use fraclap::analytic::{ball_coefficient, exact_energy_squared, BallSolution};
use fraclap::assembly::{assemble_load, assemble_stiffness, QuadConfig, RightHandSide};
use fraclap::linalg::{dot, solve_spd};
use fraclap::mesh::{build_graded_disk_mesh, build_interval_mesh, GradingSpec, PairClass};
use fraclap::quadrature::{adaptive_gauss, pair_entries_2d, reference_pair_2d, TriangleRule};
use fraclap::study::{
    build_level_mesh, exact_load_energy, fit_rate, solve_cell, MeshFamily, Problem,
};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn ladder_fit(problem: Problem, family: MeshFamily, s: f64, levels: &[usize]) -> (f64, f64, Vec<f64>) {
    let quad = QuadConfig::default();
    let exact = exact_load_energy(problem, s, quad.flap_tol).expect("exact energy");
    let mut hs = Vec::new();
    let mut errs = Vec::new();
    for &m in levels {
        let mesh = build_level_mesh(problem, family, m).expect("mesh");
        let cell = solve_cell(problem, s, mesh, &quad, exact).expect("cell");
        hs.push(cell.mesh.mesh_parameter);
        errs.push(cell.energy_error);
    }
    let (rate, residual) = fit_rate(&hs, &errs).expect("fit");
    (rate, residual, errs)
}

#[test]
fn criterion_1_table1_uniform_disk_rates() {
    let levels = [4, 6, 8, 12, 16];
    let cases = [(0.1, 0.497), (0.3, 0.498), (0.5, 0.501), (0.7, 0.504), (0.9, 0.532)];
    let mut rows = Vec::new();
    for (s, paper) in cases {
        let (rate, residual, _) = ladder_fit(Problem::DiskConstant, MeshFamily::Uniform, s, &levels);
        let ok = (rate - 0.5).abs() <= 0.07;
        println!(
            "criterion 1 {}: uniform disk s={s}: fitted rate {rate:.4} (band 0.5 +- 0.07, paper {paper}, fit residual {residual:.4})",
            if ok { "PASS" } else { "FAIL" }
        );
        rows.push((s, rate, ok));
    }
    let failed: Vec<String> = rows
        .iter()
        .filter(|(_, _, ok)| !ok)
        .map(|(s, rate, _)| format!("s={s}: {rate:.4}"))
        .collect();
    assert!(
        failed.is_empty(),
        "uniform-disk rates outside 0.5 +- 0.07 on the pinned ladder M={levels:?}: {}. \
         The M <= 16 ladder is preasymptotic for large s: the boundary-layer h^(1/2) \
         component of the Getoor solution has a small constant there and the interior \
         h^(2-s) component still dominates; see the supplementary finer-ladder test.",
        failed.join(", ")
    );
}

/// Not an acceptance criterion: demonstrates that the s = 0.7 uniform-disk
/// rate enters the 0.5 band once the ladder leaves the preasymptotic regime.
#[test]
fn supplementary_uniform_disk_s07_enters_band_on_finer_ladder() {
    let (rate, residual, _) = ladder_fit(Problem::DiskConstant, MeshFamily::Uniform, 0.7, &[12, 16, 24, 32]);
    println!("supplementary: uniform disk s=0.7 on M=12..32: fitted rate {rate:.4} (residual {residual:.4})");
    assert!((rate - 0.5).abs() <= 0.07, "rate {rate:.4} still outside the band on the finer ladder");
}

#[test]
fn criterion_2_table2_interval_sine_rates() {
    let levels = [8, 16, 32, 64, 128];
    for (s, paper) in [(0.6, 1.4028), (0.8, 1.2002)] {
        let (rate, residual, _) = ladder_fit(Problem::IntervalSine, MeshFamily::Uniform, s, &levels);
        let ok = (rate - (2.0 - s)).abs() <= 0.1;
        println!(
            "criterion 2 {}: interval sine s={s}: fitted rate {rate:.4} (band {:.1} +- 0.1, paper {paper}, residual {residual:.4})",
            if ok { "PASS" } else { "FAIL" },
            2.0 - s
        );
        assert!(ok, "s={s}: rate {rate:.4} outside (2-s) +- 0.1");
    }
}

#[test]
fn criterion_3_table3_graded_disk_rates() {
    let levels = [6, 8, 12, 16, 24];
    for (s, paper) in [(0.5, 1.066), (0.7, 0.990), (0.9, 0.977)] {
        let (rate, residual, errs) = ladder_fit(
            Problem::DiskConstant,
            MeshFamily::Graded { mu: 1.95 },
            s,
            &levels,
        );
        // Remeshed 2D sequences: errors nonincreasing within 2% slack.
        for w in errs.windows(2) {
            assert!(w[1] <= 1.02 * w[0], "s={s}: errors not decreasing: {errs:?}");
        }
        let ok = (rate - 1.0).abs() <= 0.1;
        println!(
            "criterion 3 {}: graded disk (mu=1.95) s={s}: fitted rate {rate:.4} in h=1/M (band 1.0 +- 0.1, paper {paper}, residual {residual:.4})",
            if ok { "PASS" } else { "FAIL" }
        );
        assert!(ok, "s={s}: rate {rate:.4} outside 1.0 +- 0.1");
    }
}

#[test]
fn criterion_4_exact_value_anchors() {
    let k1 = ball_coefficient(1, 0.5);
    let k2 = ball_coefficient(2, 0.5);
    assert!((k1 - 1.0).abs() <= 1e-12, "kappa(1, 1/2) = {k1}");
    assert!((k2 - 2.0 / std::f64::consts::PI).abs() <= 1e-12, "kappa(2, 1/2) = {k2}");

    let e2d = exact_energy_squared(&BallSolution::unit(2, 0.5));
    let e1d = exact_energy_squared(&BallSolution::unit(1, 0.5));
    assert!((e2d - 4.0 / 3.0).abs() <= 1e-12);
    assert!((e1d - std::f64::consts::PI / 2.0).abs() <= 1e-12);

    // Independent confirmation by adaptive quadrature of the solution mass.
    let direct_1d = adaptive_gauss(
        |x: f64| fraclap::analytic::getoor_eval(&BallSolution::unit(1, 0.5), [x, 0.0]),
        -1.0,
        1.0,
        1e-12,
    )
    .unwrap();
    assert!((direct_1d - e1d).abs() <= 1e-8 * e1d);
    let direct_2d = adaptive_gauss(
        |r: f64| {
            2.0 * std::f64::consts::PI
                * r
                * fraclap::analytic::getoor_eval(&BallSolution::unit(2, 0.5), [r, 0.0])
        },
        0.0,
        1.0,
        1e-12,
    )
    .unwrap();
    assert!((direct_2d - e2d).abs() <= 1e-8 * e2d);
    println!("criterion 4 PASS: kappa and exact-energy anchors hold to 1e-12 (quadrature cross-check 1e-8)");
}

fn random_triangle(rng: &mut StdRng, offset: [f64; 2]) -> [[f64; 2]; 3] {
    loop {
        let t: [[f64; 2]; 3] = [
            [offset[0] + rng.gen_range(-0.5..0.5), offset[1] + rng.gen_range(-0.5..0.5)],
            [offset[0] + rng.gen_range(-0.5..0.5), offset[1] + rng.gen_range(-0.5..0.5)],
            [offset[0] + rng.gen_range(-0.5..0.5), offset[1] + rng.gen_range(-0.5..0.5)],
        ];
        let area = 0.5
            * ((t[1][0] - t[0][0]) * (t[2][1] - t[0][1]) - (t[2][0] - t[0][0]) * (t[1][1] - t[0][1]));
        if area.abs() > 0.05 {
            return t;
        }
    }
}

/// Plain tensor quadrature over a disjoint pair, hats written from scratch.
fn brute_disjoint(p1: [[f64; 2]; 3], p2: [[f64; 2]; 3], s: f64, order: usize) -> Vec<f64> {
    let tri = TriangleRule::collapsed(order).unwrap();
    let jac = |p: &[[f64; 2]; 3]| {
        ((p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1])).abs()
    };
    let (j1, j2) = (jac(&p1), jac(&p2));
    let mut out = vec![0.0; 36];
    for (zx, wx) in tri.points.iter().zip(&tri.weights) {
        let bx = [1.0 - zx[0] - zx[1], zx[0], zx[1]];
        let x = [
            p1[0][0] + zx[0] * (p1[1][0] - p1[0][0]) + zx[1] * (p1[2][0] - p1[0][0]),
            p1[0][1] + zx[0] * (p1[1][1] - p1[0][1]) + zx[1] * (p1[2][1] - p1[0][1]),
        ];
        for (zy, wy) in tri.points.iter().zip(&tri.weights) {
            let by = [1.0 - zy[0] - zy[1], zy[0], zy[1]];
            let y = [
                p2[0][0] + zy[0] * (p2[1][0] - p2[0][0]) + zy[1] * (p2[2][0] - p2[0][0]),
                p2[0][1] + zy[0] * (p2[1][1] - p2[0][1]) + zy[1] * (p2[2][1] - p2[0][1]),
            ];
            let d2 = (x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2);
            let kern = wx * wy * j1 * j2 * d2.powf(-(1.0 + s));
            let f = [bx[0], bx[1], bx[2], -by[0], -by[1], -by[2]];
            for a in 0..6 {
                for b in 0..6 {
                    out[a * 6 + b] += kern * f[a] * f[b];
                }
            }
        }
    }
    out
}

#[test]
fn criterion_5_quadrature_oracle_suite() {
    // Disjoint agreement over 100 randomized well-separated pairs.
    let mut rng = StdRng::seed_from_u64(20240811);
    for trial in 0..100 {
        let s = rng.gen_range(0.15..0.95);
        let p1 = random_triangle(&mut rng, [0.0, 0.0]);
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let dist = rng.gen_range(3.0..10.0);
        let p2 = random_triangle(&mut rng, [dist * angle.cos(), dist * angle.sin()]);
        let got = pair_entries_2d(p1, [0, 1, 2], p2, [3, 4, 5], PairClass::Disjoint, s, 6);
        let want = brute_disjoint(p1, p2, s, 6);
        let scale = want.iter().cloned().fold(0.0_f64, |m, v| m.max(v.abs()));
        for (g, w) in got.matrix.iter().zip(&want) {
            assert!(
                (g - w).abs() <= 1e-8 * scale,
                "trial {trial}: disjoint mismatch {g} vs {w}"
            );
        }
    }
    // Touching-class self-consistency between orders 8 and 12.
    for s in [0.25, 0.5, 0.75] {
        for class in [PairClass::Identical, PairClass::SharedEdge, PairClass::SharedVertex] {
            let (p1, i1, p2, i2) = reference_pair_2d(class);
            let coarse = pair_entries_2d(p1, i1, p2, i2, class, s, 8);
            let fine = pair_entries_2d(p1, i1, p2, i2, class, s, 12);
            let scale = fine.matrix.iter().cloned().fold(0.0_f64, |m, v| m.max(v.abs()));
            for (a, b) in coarse.matrix.iter().zip(&fine.matrix) {
                assert!(
                    (a - b).abs() <= 1e-6 * scale,
                    "{class:?} s={s}: order 8 vs 12 differ beyond 1e-6"
                );
            }
        }
    }
    // Mesh-level homogeneity K(c mesh) = c^(n-2s) K(mesh).
    let quad = QuadConfig::default();
    for (mesh, n) in [
        (build_interval_mesh(-1.0, 1.0, GradingSpec::uniform(4)).unwrap(), 1usize),
        (build_graded_disk_mesh(GradingSpec::uniform(3)).unwrap(), 2usize),
    ] {
        for s in [0.3, 0.7] {
            let base = assemble_stiffness(&mesh, s, &quad).unwrap();
            for c in [0.5, 2.0, 10.0] {
                let scaled = assemble_stiffness(&mesh.scaled(c), s, &quad).unwrap();
                let factor = c.powf(n as f64 - 2.0 * s);
                let max = base.matrix.max_abs();
                for (a, b) in base.matrix.values().iter().zip(scaled.matrix.values()) {
                    assert!(
                        (b - a * factor).abs() <= 1e-10 * max * factor,
                        "homogeneity violated: n={n} s={s} c={c}"
                    );
                }
            }
        }
    }
    println!("criterion 5 PASS: disjoint oracle 1e-8 (100 pairs), touching self-consistency 1e-6, homogeneity 1e-10");
}

#[test]
fn criterion_6_structural_invariants_on_ci_meshes() {
    let meshes = vec![
        ("1D uniform M=16", build_interval_mesh(-1.0, 1.0, GradingSpec::uniform(16)).unwrap(), Problem::IntervalSine),
        ("2D uniform M=6", build_graded_disk_mesh(GradingSpec::uniform(6)).unwrap(), Problem::DiskConstant),
        ("2D graded M=6", build_graded_disk_mesh(GradingSpec { rings: 6, mu: 1.95 }).unwrap(), Problem::DiskConstant),
    ];
    let quad = QuadConfig::default();
    for (tag, mesh, problem) in meshes {
        let s = 0.5;
        let k = assemble_stiffness(&mesh, s, &quad).unwrap();
        // Symmetry holds structurally in packed storage; the solver pathway
        // validates positive definiteness.
        let chol = k.matrix.cholesky();
        assert!(chol.is_ok(), "{tag}: Cholesky failed: {:?}", chol.err());
        let rhs = fraclap::study::rhs_for(problem, s, quad.flap_tol);
        let f = assemble_load(&mesh, &rhs, quad.load_order).unwrap();
        let rep = solve_spd(&k.matrix, &f.data).unwrap();
        let fu = dot(&f.data, &rep.solution);
        let uku = k.matrix.quadratic_form(&rep.solution);
        assert!(
            (fu - uku).abs() <= 1e-10 * fu.abs().max(1e-30),
            "{tag}: Galerkin identity violated: {fu} vs {uku}"
        );
        let exact = exact_load_energy(problem, s, quad.flap_tol).unwrap();
        let radicand = exact - fu;
        assert!(radicand >= -1e-10, "{tag}: energy radicand {radicand}");
        println!("criterion 6 PASS: {tag}: SPD, Galerkin identity 1e-10, radicand {radicand:.3e} >= -1e-10");
    }
}

#[test]
fn criterion_7_monotone_energy_on_nested_1d_meshes() {
    // V_h is nested under uniform halving, so the discrete energy F^T U is
    // nondecreasing (best-approximation in the energy norm).
    for s in [0.3, 0.5, 0.8] {
        let mut last = f64::NEG_INFINITY;
        for m in [4, 8, 16, 32] {
            let mesh = build_interval_mesh(-1.0, 1.0, GradingSpec::uniform(m)).unwrap();
            let k = assemble_stiffness(&mesh, s, &QuadConfig::default()).unwrap();
            let f = assemble_load(&mesh, &RightHandSide::ConstantOne, 4).unwrap();
            let rep = solve_spd(&k.matrix, &f.data).unwrap();
            let energy = dot(&f.data, &rep.solution);
            assert!(
                energy >= last - 1e-12,
                "s={s}: energy dropped {last} -> {energy} at M={m}"
            );
            last = energy;
        }
    }
    println!("criterion 7 PASS: discrete energy nondecreasing over 4 nested 1D refinements");
}

#[test]
fn criterion_8_graded_beats_uniform_at_matched_size() {
    let quad = QuadConfig::default();
    let graded_m = 12;
    let graded_mesh = build_graded_disk_mesh(GradingSpec { rings: graded_m, mu: 1.95 }).unwrap();
    let graded_dofs = graded_mesh.interior_dof_map().n_dofs();
    // Closest uniform resolution by dof count.
    let mut best: Option<(usize, usize)> = None;
    for m in 4..40 {
        let mesh = build_graded_disk_mesh(GradingSpec::uniform(m)).unwrap();
        let dofs = mesh.interior_dof_map().n_dofs();
        if best.is_none_or(|(_, d)| (dofs as i64 - graded_dofs as i64).abs() < (d as i64 - graded_dofs as i64).abs()) {
            best = Some((m, dofs));
        }
    }
    let (uniform_m, uniform_dofs) = best.unwrap();
    let ratio = uniform_dofs as f64 / graded_dofs as f64;
    assert!(
        (ratio - 1.0).abs() <= 0.1,
        "no uniform mesh within 10% of {graded_dofs} dofs (closest M={uniform_m} with {uniform_dofs})"
    );
    for s in [0.6, 0.8] {
        let exact = exact_load_energy(Problem::DiskConstant, s, quad.flap_tol).unwrap();
        let graded = solve_cell(Problem::DiskConstant, s, graded_mesh.clone(), &quad, exact).unwrap();
        let uniform_mesh = build_graded_disk_mesh(GradingSpec::uniform(uniform_m)).unwrap();
        let uniform = solve_cell(Problem::DiskConstant, s, uniform_mesh, &quad, exact).unwrap();
        println!(
            "criterion 8 {}: s={s}: graded err {:.4e} ({} dofs) vs uniform err {:.4e} ({} dofs)",
            if graded.energy_error <= uniform.energy_error { "PASS" } else { "FAIL" },
            graded.energy_error,
            graded_dofs,
            uniform.energy_error,
            uniform_dofs
        );
        assert!(
            graded.energy_error <= uniform.energy_error,
            "s={s}: graded {:.4e} worse than uniform {:.4e} at matched size",
            graded.energy_error,
            uniform.energy_error
        );
    }
}
