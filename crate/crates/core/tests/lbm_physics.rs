//! Lattice Boltzmann solver against analytic flows and symmetries.

use porofno_core::porous_gen::{generate_sample, GenConfig};
use porofno_core::stokes_lbm::{solve_permeability, LbmConfig, LbmState, WallAxis};
use porofno_core::VoxelGrid;

const CHANNEL_K: f64 = 20.0 * 20.0 / 12.0;

fn channel() -> VoxelGrid {
    VoxelGrid::filled(20, true)
}

fn porous() -> VoxelGrid {
    let cfg = GenConfig {
        edge_length: 16,
        ..GenConfig::default()
    };
    (0..)
        .map(|seed| generate_sample(&cfg, seed).unwrap().voxels)
        .find(|v| solve_permeability(v, &LbmConfig::default()).unwrap().k_lattice > 0.0)
        .unwrap()
}

#[test]
fn plane_poiseuille_matches_h_squared_over_twelve() {
    for wall_axis in [WallAxis::Z, WallAxis::Y] {
        let cfg = LbmConfig {
            wall_axis,
            ..LbmConfig::default()
        };
        let r = solve_permeability(&channel(), &cfg).unwrap();
        assert!(r.converged);
        let rel = (r.k_lattice - CHANNEL_K).abs() / CHANNEL_K;
        assert!(rel <= 0.05, "{wall_axis:?}: k = {} ({rel})", r.k_lattice);
    }
}

#[test]
fn permeability_does_not_depend_on_relaxation_time() {
    let ks: Vec<f64> = [0.8, 1.0, 1.2]
        .iter()
        .map(|&tau| {
            let cfg = LbmConfig {
                relaxation_time: tau,
                ..LbmConfig::default()
            };
            solve_permeability(&channel(), &cfg).unwrap().k_lattice
        })
        .collect();
    for k in &ks {
        assert!((k - ks[1]).abs() / ks[1] <= 0.02, "{ks:?}");
    }
}

#[test]
fn doubling_the_force_leaves_permeability_unchanged() {
    let tight = LbmConfig {
        convergence_tol: 1e-10,
        max_steps: 1_000_000,
        ..LbmConfig::default()
    };
    let doubled = LbmConfig {
        body_force: 2.0 * tight.body_force,
        ..tight.clone()
    };
    for grid in [channel(), porous()] {
        let a = solve_permeability(&grid, &tight).unwrap().k_lattice;
        let b = solve_permeability(&grid, &doubled).unwrap().k_lattice;
        assert!((a - b).abs() / a <= 1e-6, "{a} vs {b}");
    }
}

#[test]
fn mirrored_geometry_has_the_same_permeability() {
    let grid = porous();
    let cfg = LbmConfig::default();
    let a = solve_permeability(&grid, &cfg).unwrap().k_lattice;
    let b = solve_permeability(&grid.mirror_y(), &cfg).unwrap().k_lattice;
    assert!((a - b).abs() / a <= 1e-10, "{a} vs {b}");
}

#[test]
fn all_solid_grid_has_zero_permeability() {
    let r = solve_permeability(&VoxelGrid::filled(10, false), &LbmConfig::default()).unwrap();
    assert_eq!(r.k_millidarcy, 0.0);
    assert_eq!(r.k_lattice, 0.0);
    assert!(r.converged);
    assert_eq!(r.steps, 0);
}

#[test]
fn isolated_pores_carry_no_flow() {
    let grid = VoxelGrid::from_fn(12, |x, y, z| x == 6 && y == 6 && (4..8).contains(&z));
    let r = solve_permeability(&grid, &LbmConfig::default()).unwrap();
    assert_eq!(r.k_lattice, 0.0);
}

#[test]
fn mass_is_conserved() {
    let cfg = LbmConfig::default();
    let mut state = LbmState::new(&porous(), WallAxis::Z);
    let initial = state.total_mass();
    for _ in 0..500 {
        state.step(&cfg).unwrap();
    }
    assert!((state.total_mass() - initial).abs() / initial <= 1e-8);
}

#[test]
fn convergence_history_is_monotone_in_step() {
    let r = solve_permeability(&porous(), &LbmConfig::default()).unwrap();
    assert!(r.history.windows(2).all(|w| w[1].step == w[0].step + 100));
    let csv = r.history_csv();
    assert!(csv.starts_with("step,mean_velocity,relative_change\n"));
    assert_eq!(csv.lines().count(), r.history.len() + 1);
}
