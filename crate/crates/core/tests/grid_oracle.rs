use reachnav::grid::{
    interpolate, solve, Axis, FleeingProblem, GridProblem, LineEpigraphProblem, Mode, Permuted, RelativeViProblem,
    SolveOptions,
};
use reachnav::dynamics::LineSystem;

fn vi() -> RelativeViProblem {
    RelativeViProblem { r: 0.1, a_max: 4.0 }
}

#[test]
fn fleeing_value_equals_distance_margin() {
    let p = FleeingProblem { r: 0.1, speed: 1.0 };
    let axes = vec![Axis::new(-1.0, 1.0, 81); 2];
    let sol = solve(&p, &axes, 0.5, &SolveOptions::default()).unwrap();
    let f = sol.initial();
    let h = f.max_spacing();
    let mut worst: f64 = 0.0;
    for k in 0..f.len() {
        let mut x = [0.0; 2];
        f.node(k, &mut x);
        let psi = p.terminal(&x);
        if psi > 0.0 {
            worst = worst.max((f.values[k] - psi).abs());
        }
    }
    eprintln!("fleeing max |V - psi| = {worst:e}, spacing {h}");
    assert!(worst <= 2.0 * h);
}

#[test]
fn vi_slices_respect_clamp_and_time_order() {
    let p = vi();
    let axes = RelativeViProblem::axes(21, 1.0, 8.0);
    let sol = solve(&p, &axes, 0.2, &SolveOptions { stored_slices: 5, ..Default::default() }).unwrap();
    assert_eq!(sol.terminal().time, 0.2);
    assert_eq!(sol.initial().time, 0.0);
    for (j, s) in sol.slices.iter().enumerate() {
        for k in 0..s.len() {
            let mut x = [0.0; 4];
            s.node(k, &mut x);
            assert!(s.values[k] <= p.terminal(&x), "slice {j} node {k}");
        }
    }
    let mut worst: f64 = 0.0;
    for w in sol.slices.windows(2) {
        let (later, earlier) = (&w[0], &w[1]);
        assert!(earlier.time < later.time);
        for k in 0..later.len() {
            let d = earlier.values[k] - later.values[k];
            worst = worst.max(d);
        }
    }
    eprintln!("largest time-order violation {worst:e}");
    assert!(worst <= 1e-12);
}

#[test]
fn solution_is_invariant_under_axis_permutation() {
    let p = vi();
    let axes = RelativeViProblem::axes(11, 1.0, 8.0);
    let perm = vec![2, 0, 3, 1];
    let permuted_axes: Vec<Axis> = perm.iter().map(|&i| axes[i]).collect();
    let a = solve(&p, &axes, 0.2, &SolveOptions::default()).unwrap();
    let wrapped = Permuted { inner: &p, perm: perm.clone() };
    let b = solve(&wrapped, &permuted_axes, 0.2, &SolveOptions::default()).unwrap();
    let a0 = a.initial().permuted(&perm).unwrap();
    let b0 = b.initial();
    let worst = a0.values.iter().zip(&b0.values).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(worst <= 1e-12, "{worst:e}");
}

#[test]
fn epigraph_slices_stay_above_constraint() {
    let p = LineEpigraphProblem { system: LineSystem::default() };
    assert_eq!(p.mode(), Mode::Epigraph);
    let sol = solve(&p, &p.axes(31, 0.5), 0.5, &SolveOptions::default()).unwrap();
    for s in &sol.slices {
        for k in 0..s.len() {
            let mut x = [0.0; 3];
            s.node(k, &mut x);
            assert!(s.values[k] >= p.obstacle(&x));
        }
    }
    for k in 0..sol.terminal().len() {
        let mut x = [0.0; 3];
        sol.terminal().node(k, &mut x);
        assert_eq!(sol.terminal().values[k], p.terminal(&x));
    }
}

#[test]
fn vi_grid_self_converges() {
    let p = vi();
    let solve_at = |n: usize| solve(&p, &RelativeViProblem::axes(n, 1.0, 8.0), 0.2, &SolveOptions::default()).unwrap();
    let (c, m, f) = (solve_at(11), solve_at(21), solve_at(41));
    let probes: Vec<[f64; 4]> = (0..200)
        .map(|i| {
            let a = i as f64 * 0.731;
            [0.8 * a.sin(), 0.8 * (1.3 * a).cos(), 6.0 * (0.7 * a).sin(), 6.0 * (1.9 * a).cos()]
        })
        .collect();
    let diff = |x: &reachnav::grid::GridField, y: &reachnav::grid::GridField| {
        probes.iter().map(|q| (interpolate(x, q) - interpolate(y, q)).abs()).sum::<f64>() / probes.len() as f64
    };
    let d1 = diff(c.initial(), m.initial());
    let d2 = diff(m.initial(), f.initial());
    eprintln!("self-convergence: d(11,21) = {d1:.4e}, d(21,41) = {d2:.4e}, ratio {:.3}", d2 / d1);
    assert!(d2 / d1 < 1.0);
}
