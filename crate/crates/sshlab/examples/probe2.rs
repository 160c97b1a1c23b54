//! Scratch probe: standalone checks of the fidelity-map and phase-diagram criteria.

use sshlab::evalgen;
use sshlab::topology::{self, centered_grid};

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let ma = ra.iter().sum::<f64>() / ra.len() as f64;
    let mb = rb.iter().sum::<f64>() / rb.len() as f64;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for i in 0..ra.len() {
        num += (ra[i] - ma) * (rb[i] - mb);
        da += (ra[i] - ma).powi(2);
        db += (rb[i] - mb).powi(2);
    }
    num / (da * db).sqrt()
}

fn main() {
    let v_grid = centered_grid(0.0, 2.0, 100);
    let clean = evalgen::fidelity_map(16, &v_grid, 0.0, 0).unwrap();
    let noisy = evalgen::fidelity_map(16, &v_grid, 0.15, 5).unwrap();
    let n_v = v_grid.len();
    let row = |m: &evalgen::FidelityMap, i: usize| m.values[i * n_v..(i + 1) * n_v].to_vec();
    for r in 0..32 {
        let e = row(&clean, r);
        let crossing = (0..n_v).find(|&j| e[j] < 0.5).map(|j| v_grid[j]);
        println!("row {r} crossing: {crossing:?}");
    }
    let edge = row(&clean, 15);
    println!(
        "row 15 profile every 5th: {:?}",
        edge.iter().step_by(5).map(|x| (x * 100.0).round() / 100.0).collect::<Vec<_>>()
    );
    for r in [2, 4, 6, 8, 10, 12] {
        let rho = spearman(&row(&clean, r), &row(&noisy, r));
        let c = row(&clean, r);
        let mono = (1..n_v).all(|j| c[j] <= c[j - 1] + 1e-9);
        println!(
            "bulk row {r} spearman: {rho:.3} clean-monotone: {mono} clean every 10th: {:?}",
            c.iter().step_by(10).map(|x| (x * 100.0).round() / 100.0).collect::<Vec<_>>()
        );
    }
    for s in [5u64, 6, 7, 8, 9, 10, 11, 12] {
        let noisy_s = evalgen::fidelity_map(16, &v_grid, 0.15, s).unwrap();
        let rhos: Vec<f64> = [2, 4, 6, 8, 10, 12]
            .iter()
            .map(|&r| (spearman(&row(&clean, r), &row(&noisy_s, r)) * 1000.0).round() / 1000.0)
            .collect();
        println!("noisy seed {s} spearman rows 2,4,6,8,10,12: {rhos:?}");
    }

    let v = centered_grid(0.0, 2.0, 50);
    let w = [0.0, 0.5, 1.0, 1.5, 2.0];
    for master in 0..8u64 {
        let pd = topology::label_phase_diagram(16, &v, &w, 5, master, 256).unwrap();
        let mids: Vec<String> = (0..w.len())
            .map(|i| pd.transition_midpoint(i).map_or("None".into(), |m| format!("{m:.2}")))
            .collect();
        println!("master {master} midpoints: {mids:?}");
    }
}
