#![allow(dead_code)]

use std::sync::OnceLock;

use ratetip::bvp_path::{self, CollocationMesh, Param, PathSolution, SolveOptions};
use ratetip::continuation::{self, ContinuationSetup, SeedingSteps};
use ratetip::model::ModelParams;

pub fn params(epsilon: f64, diffusion: f64) -> ModelParams {
    ModelParams::default().with_epsilon(epsilon).with_diffusion(diffusion)
}

/// Steps 1–3 at (ε, D) = (1.25, 0.05), keeping every accepted solution.
pub fn seeding_at_init() -> &'static SeedingSteps {
    static CELL: OnceLock<SeedingSteps> = OnceLock::new();
    CELL.get_or_init(|| {
        let setup = ContinuationSetup {
            keep_solutions: true,
            ..ContinuationSetup::default()
        };
        continuation::seeding_steps(&params(1.25, 0.05), &setup).expect("seeding steps")
    })
}

/// The optimum at (1.25, 0.05) re-solved with `T_end` free.
pub fn optimum_at_init() -> &'static PathSolution {
    static CELL: OnceLock<PathSolution> = OnceLock::new();
    CELL.get_or_init(|| {
        let s = ContinuationSetup::optimal_time();
        bvp_path::solve_bvp(&seeding_at_init().root.solution, &s.free, &s.constraints, &s.solve).expect("optimum")
    })
}

/// Optimum at (1.25, 0.008), continued from the initialisation values.
pub fn optimum_small_noise() -> &'static PathSolution {
    static CELL: OnceLock<PathSolution> = OnceLock::new();
    CELL.get_or_init(|| continuation::continue_optimum(optimum_at_init(), 1.25, 0.008).expect("continuation to D = 0.008"))
}

/// Re-solve with `T_end` fixed at `t_end`, on the mesh of `sol`.
pub fn at_t_end(sol: &PathSolution, t_end: f64) -> PathSolution {
    let mut g = sol.clone();
    g.set(Param::TEnd, t_end);
    let opts = SolveOptions {
        adapt: 0,
        ..SolveOptions::default()
    };
    bvp_path::solve_bvp(&g, &[], &[], &opts).expect("fixed-T_end solve")
}

/// Optimal-time solve of `sol` on `mesh`.
pub fn optimal_on(sol: &PathSolution, mesh: CollocationMesh) -> PathSolution {
    let s = ContinuationSetup::optimal_time();
    let opts = SolveOptions {
        adapt: 0,
        ..s.solve
    };
    bvp_path::solve_bvp(&sol.remesh(mesh), &s.free, &s.constraints, &opts).expect("optimal solve")
}

/// Mesh with every interval of `mesh` split in two.
pub fn bisected(mesh: &CollocationMesh) -> CollocationMesh {
    let mut nodes = Vec::with_capacity(2 * mesh.nodes.len());
    for w in mesh.nodes.windows(2) {
        nodes.push(w[0]);
        nodes.push(0.5 * (w[0] + w[1]));
    }
    nodes.push(1.0);
    CollocationMesh { nodes }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}
