//! Scratch probe for MPC behavior on analytic fields (not shipped behavior).
use eikonal::env::{EnvironmentModel, GridEnv};
use eikonal::grid::OccupancyGrid;
use eikonal::model::{FieldEvaluation, TravelTimeField};
use eikonal::plan::{mpc_plan, MpcConfig};

struct RadialField;
impl TravelTimeField for RadialField {
    fn dof(&self) -> usize { 2 }
    fn evaluate(&self, qs: &[f64], qg: &[f64]) -> eikonal::Result<FieldEvaluation> {
        let d: Vec<f64> = qs.iter().zip(qg).map(|(a, b)| a - b).collect();
        let n = d.iter().map(|x| x * x).sum::<f64>().sqrt();
        let g: Vec<f64> = if n > 0.0 { d.iter().map(|x| x / n).collect() } else { vec![0.0; 2] };
        Ok(FieldEvaluation { t: n, grad_qs: g.clone(), grad_qg: g.iter().map(|x| -x).collect(), s_pred_qs: 1.0, s_pred_qg: 1.0 })
    }
}

struct BumpField { c: [f64; 2], a: f64, s: f64 }
impl TravelTimeField for BumpField {
    fn dof(&self) -> usize { 2 }
    fn evaluate(&self, qs: &[f64], qg: &[f64]) -> eikonal::Result<FieldEvaluation> {
        let base = RadialField.evaluate(qs, qg)?;
        let dx = qs[0] - self.c[0];
        let dy = qs[1] - self.c[1];
        let r2 = dx * dx + dy * dy;
        let s2 = self.s * self.s;
        let well = -self.a * (-r2 / (2.0 * s2)).exp();
        Ok(FieldEvaluation {
            t: base.t + well,
            grad_qs: vec![base.grad_qs[0] - well * dx / s2, base.grad_qs[1] - well * dy / s2],
            grad_qg: base.grad_qg,
            s_pred_qs: 1.0, s_pred_qg: 1.0,
        })
    }
}

fn main() {
    let n = 32;
    let mut occ = vec![false; n * n];
    occ[0] = true;
    let h = 1.0 / (n - 1) as f64;
    let grid = OccupancyGrid::new(&[n, n], h, &[0.0, 0.0], occ).unwrap();
    let env = EnvironmentModel::Grid(GridEnv::new(grid, None));
    let base = MpcConfig::defaults_for(&env);
    println!("step={:.4}", base.step);
    for beta in [19.0, 35.0, 70.0, 140.0] {
        // Radial stretch over 10 seeds.
        let mut stretches = Vec::new();
        let qs: [f64; 2] = [0.15, 0.2];
        let qg: [f64; 2] = [0.85, 0.75];
        let straight: f64 = ((qg[0]-qs[0]).powi(2) + (qg[1]-qs[1]).powi(2)).sqrt();
        let mut rad_success = 0;
        for seed in 0..10u64 {
            let mut cfg = base.clone();
            cfg.beta = beta;
            cfg.seed = seed;
            let res = mpc_plan(&qs, &qg, &RadialField, &env, &cfg).unwrap();
            if res.success { rad_success += 1; stretches.push(res.path_length / straight); }
        }
        stretches.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let med = if stretches.is_empty() { f64::NAN } else { stretches[stretches.len()/2] };
        // Bump escape over 10 seeds.
        let field = BumpField { c: [0.5, 0.5], a: 0.12, s: 0.04 };
        let bs = [0.15, 0.5];
        let bg = [0.85, 0.5];
        let mut escapes = 0;
        let mut iters_used = Vec::new();
        for seed in 0..10u64 {
            let mut cfg = base.clone();
            cfg.beta = beta;
            cfg.seed = 100 + seed;
            let res = mpc_plan(&bs, &bg, &field, &env, &cfg).unwrap();
            if res.success { escapes += 1; iters_used.push(res.waypoints.len()); }
        }
        println!(
            "beta={beta:>6.1}  radial: success {rad_success}/10 median_stretch {med:.3}   bump: escapes {escapes}/10 (steps: {iters_used:?})"
        );
    }
}
