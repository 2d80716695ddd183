//! Nonlinear three-phase power flow by backward/forward sweep.
//!
//! The radial structure lets the exact branch equations be solved without a
//! Jacobian: a backward pass aggregates branch currents from the constant-power
//! injections evaluated at the present voltage iterate, a forward pass
//! propagates voltage drops from the substation through the full 3x3 segment
//! impedance matrices (mutual coupling exact), and the two passes repeat until
//! the voltage iterate stops moving. This solver is the simulation's ground
//! truth; the linearized model in [`crate::lindistflow`] is checked against it.

use num_complex::Complex64;
use thiserror::Error;

use crate::feeder::{BusIdx, Feeder, PerPhase, Phase, SegIdx};
use crate::injections::{Injections, PhaseMismatch};

/// Options for [`solve_nonlinear`].
#[derive(Debug, Clone, Copy)]
pub struct SweepOptions {
    /// Convergence threshold on the max voltage change between sweeps (pu).
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Any |V| below this during iteration is treated as voltage collapse.
    pub collapse_floor: f64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            tolerance: 1e-8,
            max_iterations: 100,
            collapse_floor: 0.5,
        }
    }
}

#[derive(Debug, Error)]
pub enum SweepError {
    #[error(transparent)]
    PhaseMismatch(#[from] PhaseMismatch),
    #[error("voltage collapse: |V| = {vmag:.4} pu at bus `{bus}` phase {phase} (iteration {iteration})")]
    VoltageCollapse {
        bus: String,
        phase: Phase,
        vmag: f64,
        iteration: usize,
    },
}

/// Complex solution of a sweep solve, all per-unit.
#[derive(Debug, Clone)]
pub struct PhasorSolution {
    /// Per-bus per-phase complex voltage (rectangular), indexed by `BusIdx`.
    pub v: Vec<PerPhase<Complex64>>,
    /// Per-segment per-phase branch current, positive from parent to child.
    pub i_branch: Vec<PerPhase<Complex64>>,
    /// Per-segment per-phase complex power at the sending (parent) end.
    pub s_flow: Vec<PerPhase<Complex64>>,
    pub iterations: usize,
    pub converged: bool,
}

impl PhasorSolution {
    pub fn v_mag(&self, bus: BusIdx) -> PerPhase<f64> {
        self.v[bus.0].map(|_, v| v.norm())
    }
}

/// Substation phasors at magnitude `v_substation`: phase A at 0 degrees, B at
/// -120, C at +120.
pub fn flat_profile(feeder: &Feeder, v_substation: f64) -> Vec<PerPhase<Complex64>> {
    feeder
        .buses()
        .iter()
        .map(|b| PerPhase::from_fn(b.phases, |p| phase_reference(p) * v_substation))
        .collect()
}

/// Unit phasor of each phase's reference angle.
pub fn phase_reference(p: Phase) -> Complex64 {
    const HALF_SQRT3: f64 = 0.866_025_403_784_438_6;
    match p {
        Phase::A => Complex64::new(1.0, 0.0),
        Phase::B => Complex64::new(-0.5, -HALF_SQRT3),
        Phase::C => Complex64::new(-0.5, HALF_SQRT3),
    }
}

/// Solves the power flow for constant-power `injections` (net, per-unit) with
/// the substation held at `v_substation` per-unit on every phase.
///
/// `initial` warm-starts the iteration, typically with the previous time
/// step's solution; when `None` a flat profile is used. Non-convergence is
/// reported through the `converged` flag with the last iterate retained, so
/// the caller decides whether to continue.
pub fn solve_nonlinear(
    feeder: &Feeder,
    injections: &Injections,
    v_substation: f64,
    options: &SweepOptions,
    initial: Option<&[PerPhase<Complex64>]>,
) -> Result<PhasorSolution, SweepError> {
    let n_seg = feeder.num_segments();
    let mut v: Vec<PerPhase<Complex64>> = match initial {
        Some(init) => init.to_vec(),
        None => flat_profile(feeder, v_substation),
    };
    // The substation bus is the slack: pin it regardless of the warm start.
    let root = feeder.root();
    v[root.0] = PerPhase::from_fn(feeder.bus(root).phases, |p| {
        phase_reference(p) * v_substation
    });

    let order = feeder.topo_order();
    let mut i_branch: Vec<PerPhase<Complex64>> = vec![PerPhase::empty(); n_seg];

    let mut iterations = 0;
    let mut converged = false;
    while iterations < options.max_iterations {
        iterations += 1;

        // Backward: branch currents from constant-power injection currents at
        // the present voltage iterate, children before parents.
        for &j in order.iter().rev() {
            let Some(seg) = feeder.parent_segment(j) else {
                continue;
            };
            let seg_phases = feeder.segment(seg).phases;
            let mut current = PerPhase::uniform(seg_phases, Complex64::new(0.0, 0.0));
            for &child in feeder.child_segments(j) {
                for (p, ic) in i_branch[child.0].iter() {
                    current.set(p, current.get(p).unwrap() + ic);
                }
            }
            // I = conj(s / V) flows out of the network for demand, so the
            // branch supplies  sum(children) - conj(s_net / V).
            for (p, s) in injections.get(j).iter() {
                let vj = v[j.0].get(p).expect("bus phases cover injection phases");
                current.set(p, current.get(p).unwrap() - (s / vj).conj());
            }
            i_branch[seg.0] = current;
        }

        // Forward: voltage drops through the full impedance matrix.
        let mut max_delta: f64 = 0.0;
        for &j in &order {
            let Some(seg_idx) = feeder.parent_segment(j) else {
                continue;
            };
            let seg = feeder.segment(seg_idx);
            let from = feeder.seg_from(seg_idx);
            let bus_phases = feeder.bus(j).phases;
            let mut v_new = PerPhase::empty();
            for p in bus_phases.iter() {
                let mut drop = Complex64::new(0.0, 0.0);
                for (q, iq) in i_branch[seg_idx.0].iter() {
                    if let Some(zpq) = seg.z(p, q) {
                        drop += zpq * iq;
                    }
                }
                let vi = v[from.0].get(p).expect("parent carries child phases");
                let val = vi - drop;
                let mag = val.norm();
                if mag < options.collapse_floor {
                    return Err(SweepError::VoltageCollapse {
                        bus: feeder.bus(j).id.clone(),
                        phase: p,
                        vmag: mag,
                        iteration: iterations,
                    });
                }
                max_delta = max_delta.max((val - v[j.0].get(p).unwrap()).norm());
                v_new.set(p, val);
            }
            v[j.0] = v_new;
        }

        if max_delta < options.tolerance {
            converged = true;
            break;
        }
    }

    let s_flow = (0..n_seg)
        .map(|s| {
            let from = feeder.seg_from(SegIdx(s));
            i_branch[s].map(|p, i| v[from.0].get(p).expect("parent carries segment phases") * i.conj())
        })
        .collect();

    Ok(PhasorSolution {
        v,
        i_branch,
        s_flow,
        iterations,
        converged,
    })
}

/// Worst violation (pu) of the exact branch-flow equations by a solution.
///
/// Checks, per segment, the full matrix voltage-drop identity
/// `v_j = v_i - (S z^H + z S^H) + z l z^H` with `v = V V^H`, `S = V_i I^H`,
/// `l = I I^H` (loss term included), and per bus the power-balance identity
/// between the receiving-end flow, the child flows and the net injection.
pub fn residual(feeder: &Feeder, solution: &PhasorSolution, injections: &Injections) -> f64 {
    let mut worst: f64 = 0.0;

    for s in 0..feeder.num_segments() {
        let seg = feeder.segment(SegIdx(s));
        let from = feeder.seg_from(SegIdx(s));
        let to = feeder.seg_to(SegIdx(s));
        let phases: Vec<Phase> = seg.phases.iter().collect();
        let n = phases.len();
        let iv: Vec<Complex64> = phases
            .iter()
            .map(|&p| solution.i_branch[s].get(p).unwrap_or_default())
            .collect();
        let vi: Vec<Complex64> = phases
            .iter()
            .map(|&p| solution.v[from.0].get(p).unwrap())
            .collect();

        let z = |r: usize, c: usize| seg.z(phases[r], phases[c]).unwrap_or_default();
        // S = V_i I^H, l = I I^H, both dense over the segment phases.
        let s_mat = |r: usize, c: usize| vi[r] * iv[c].conj();
        let l_mat = |r: usize, c: usize| iv[r] * iv[c].conj();

        for (r, &pr) in phases.iter().enumerate() {
            for (c, &pc) in phases.iter().enumerate() {
                let (Some(vjr), Some(vjc)) = (
                    solution.v[to.0].get(pr),
                    solution.v[to.0].get(pc),
                ) else {
                    continue;
                };
                let vj_entry = vjr * vjc.conj();
                let vi_entry = vi[r] * vi[c].conj();
                let mut drop = Complex64::new(0.0, 0.0);
                let mut loss = Complex64::new(0.0, 0.0);
                for k in 0..n {
                    // (S z^H)[r,c] + (z S^H)[r,c]
                    drop += s_mat(r, k) * z(c, k).conj() + z(r, k) * s_mat(c, k).conj();
                    // (z l z^H)[r,c]
                    for m in 0..n {
                        loss += z(r, k) * l_mat(k, m) * z(c, m).conj();
                    }
                }
                worst = worst.max((vj_entry - vi_entry + drop - loss).norm());
            }
        }
    }

    // Power balance at every non-root bus: V_j conj(I_in - sum I_out) = s_net.
    for (j, bus) in feeder.buses().iter().enumerate() {
        let Some(parent) = feeder.parent_segment(BusIdx(j)) else {
            continue;
        };
        for p in bus.phases.iter() {
            let i_in = solution.i_branch[parent.0].get(p).unwrap_or_default();
            let mut i_out = Complex64::new(0.0, 0.0);
            for &child in feeder.child_segments(BusIdx(j)) {
                i_out += solution.i_branch[child.0].get(p).unwrap_or_default();
            }
            let vj = solution.v[j].get(p).unwrap();
            let s_net = injections.get(BusIdx(j)).get(p).unwrap_or_default();
            worst = worst.max((vj * (i_in - i_out).conj() + (-s_net)).norm());
        }
    }

    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::testutil::two_bus_feeder;

    /// Independent oracle for the single-phase two-bus case: the exact branch
    /// equations reduce to f(v) = v^2 - (v_sub^2 - 2 r p - 2 x q) v + |z|^2 |s|^2
    /// with v = |V_leaf|^2 and (p, q) the load drawn at the leaf; the physical
    /// root is bracketed and bisected.
    pub fn two_bus_bisection(r: f64, x: f64, p_load: f64, q_load: f64, v_sub: f64) -> f64 {
        let b = v_sub * v_sub - 2.0 * r * p_load - 2.0 * x * q_load;
        let c = (r * r + x * x) * (p_load * p_load + q_load * q_load);
        let f = |v: f64| v * v - b * v + c;
        // High root lies between the vertex and v_sub^2 + |drop|.
        let mut lo = b / 2.0;
        let mut hi = v_sub * v_sub + 1.0;
        assert!(f(lo) < 0.0 && f(hi) > 0.0, "oracle bracket failed");
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        (0.5 * (lo + hi)).sqrt()
    }

    #[test]
    fn zero_injections_flat_profile() {
        let f = fixtures::ieee13_like();
        let inj = Injections::zeros(&f);
        let sol = solve_nonlinear(&f, &inj, 1.0, &SweepOptions::default(), None).unwrap();
        assert!(sol.converged);
        assert!(sol.iterations <= 2, "took {} iterations", sol.iterations);
        for (i, _) in f.buses().iter().enumerate() {
            for (_, vmag) in sol.v_mag(BusIdx(i)).iter() {
                assert!((vmag - 1.0).abs() < 1e-12);
            }
        }
        for s in &sol.s_flow {
            for (_, flow) in s.iter() {
                assert!(flow.norm() < 1e-12);
            }
        }
    }

    #[test]
    fn two_bus_matches_bisection_oracle() {
        let f = two_bus_feeder(0.01, 0.02);
        let mut inj = Injections::zeros(&f);
        let leaf = f.bus_idx("b1").unwrap();
        inj.add(leaf, Phase::A, -0.01, 0.0).unwrap();
        let opts = SweepOptions {
            tolerance: 1e-12,
            ..Default::default()
        };
        let sol = solve_nonlinear(&f, &inj, 1.0, &opts, None).unwrap();
        assert!(sol.converged);

        let oracle = two_bus_bisection(0.01, 0.02, 0.01, 0.0, 1.0);
        // Frozen from the bisection oracle; the quadratic's high root gives
        // |V_leaf| just below the lossless value sqrt(0.9998).
        assert!((oracle - 0.999_899_964_99).abs() < 1e-9, "oracle = {oracle:.12}");
        let v_leaf = sol.v_mag(leaf).get(Phase::A).unwrap();
        assert!(
            (v_leaf - oracle).abs() < 1e-8,
            "sweep {v_leaf:.12} vs oracle {oracle:.12}"
        );
    }

    #[test]
    fn balanced_three_phase_symmetry() {
        let f = fixtures::chain5();
        // chain5 is balanced: identical per-phase loads and symmetric
        // impedances, so magnitudes match and angles stay 120 degrees apart.
        let inj = Injections::from_loads(&f, 1.0);
        let sol = solve_nonlinear(&f, &inj, 1.0, &SweepOptions::default(), None).unwrap();
        assert!(sol.converged);
        for (i, bus) in f.buses().iter().enumerate() {
            if bus.phases.len() < 3 {
                continue;
            }
            let va = sol.v[i].get(Phase::A).unwrap();
            let vb = sol.v[i].get(Phase::B).unwrap();
            let vc = sol.v[i].get(Phase::C).unwrap();
            assert!((va.norm() - vb.norm()).abs() < 1e-10);
            assert!((va.norm() - vc.norm()).abs() < 1e-10);
            let rot = Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI / 3.0);
            assert!((vb / va - rot).norm() < 1e-9);
            assert!((vc / vb - rot).norm() < 1e-9);
        }
    }

    #[test]
    fn residual_of_converged_solution_is_small() {
        let f = fixtures::ieee13_like();
        let inj = Injections::from_loads(&f, 1.0);
        let sol = solve_nonlinear(&f, &inj, 1.0, &SweepOptions::default(), None).unwrap();
        assert!(sol.converged);
        let res = residual(&f, &sol, &inj);
        assert!(res < 1e-6, "residual = {res:.3e}");
    }

    #[test]
    fn residual_detects_perturbation() {
        let f = fixtures::ieee13_like();
        let inj = Injections::from_loads(&f, 1.0);
        let mut sol = solve_nonlinear(&f, &inj, 1.0, &SweepOptions::default(), None).unwrap();
        let bus = f.bus_idx("675").unwrap();
        let va = sol.v[bus.0].get(Phase::A).unwrap();
        sol.v[bus.0].set(Phase::A, va + Complex64::new(0.01, 0.0));
        let res = residual(&f, &sol, &inj);
        assert!(res > 1e-4, "residual = {res:.3e}");
    }

    #[test]
    fn exact_two_bus_solution_has_tiny_residual() {
        // Build the solution directly from the bisection oracle and check the
        // exact equations accept it.
        let (r, x, p, q) = (0.01, 0.02, 0.01, 0.0);
        let f = two_bus_feeder(r, x);
        let mut inj = Injections::zeros(&f);
        let leaf = f.bus_idx("b1").unwrap();
        inj.add(leaf, Phase::A, -p, -q).unwrap();

        let vmag = two_bus_bisection(r, x, p, q, 1.0);
        let z = Complex64::new(r, x);
        // Oracle gives |V_leaf|; recover its angle from V_leaf = 1 - z*conj(s/V_leaf).
        // Iterating the fixed point from the oracle magnitude converges in a
        // couple of steps to machine precision.
        let s = Complex64::new(-p, -q);
        let mut v_leaf = Complex64::new(vmag, 0.0);
        for _ in 0..100 {
            v_leaf = Complex64::new(1.0, 0.0) + z * (s / v_leaf).conj();
        }
        let i = -(s / v_leaf).conj();

        let root = f.root();
        let mut v = flat_profile(&f, 1.0);
        v[leaf.0].set(Phase::A, v_leaf);
        v[root.0].set(Phase::A, Complex64::new(1.0, 0.0));
        let mut i_branch = vec![PerPhase::empty()];
        i_branch[0].set(Phase::A, i);
        let s_flow = vec![i_branch[0].map(|_, i| Complex64::new(1.0, 0.0) * i.conj())];
        let sol = PhasorSolution {
            v,
            i_branch,
            s_flow,
            iterations: 0,
            converged: true,
        };
        let res = residual(&f, &sol, &inj);
        assert!(res < 1e-12, "residual = {res:.3e}");
    }

    #[test]
    fn loss_positivity_on_consumption() {
        let f = fixtures::tree25_pv();
        let inj = Injections::from_loads(&f, 1.0);
        let sol = solve_nonlinear(&f, &inj, 1.0, &SweepOptions::default(), None).unwrap();
        assert!(sol.converged);
        let root_p: f64 = f
            .child_segments(f.root())
            .iter()
            .map(|&s| sol.s_flow[s.0].iter().map(|(_, v)| v.re).sum::<f64>())
            .sum();
        let load_p: f64 = f
            .buses()
            .iter()
            .map(|b| b.load_p.iter().map(|(_, v)| v).sum::<f64>())
            .sum();
        assert!(root_p >= load_p, "root {root_p} < loads {load_p}");
    }

    #[test]
    fn voltage_collapse_detected() {
        let f = two_bus_feeder(0.2, 0.4);
        let mut inj = Injections::zeros(&f);
        let leaf = f.bus_idx("b1").unwrap();
        // Far beyond the deliverable power of this line.
        inj.add(leaf, Phase::A, -5.0, -2.0).unwrap();
        let err = solve_nonlinear(&f, &inj, 1.0, &SweepOptions::default(), None);
        assert!(matches!(err, Err(SweepError::VoltageCollapse { .. })));
    }

    #[test]
    fn warm_start_converges_faster() {
        let f = fixtures::ieee13_like();
        let inj = Injections::from_loads(&f, 1.0);
        let opts = SweepOptions::default();
        let cold = solve_nonlinear(&f, &inj, 1.0, &opts, None).unwrap();
        let warm = solve_nonlinear(&f, &inj, 1.0, &opts, Some(&cold.v)).unwrap();
        assert!(warm.converged);
        assert!(warm.iterations <= 2, "took {}", warm.iterations);
    }
}
