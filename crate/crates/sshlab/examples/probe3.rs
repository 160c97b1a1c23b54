//! Scratch probe: disordered transition midpoint under alternative disorder
//! factor placements (which bond family carries which share of W).

use nalgebra::DMatrix;
use sshlab::rng::{mix3, DetRng};
use sshlab::ssh::DisorderDraw;
use sshlab::topology::{centered_grid, chiral_transform};

fn build_pbc(n: usize, v: f64, w: f64, amp: f64, f_t: f64, f_m: f64, draw: &DisorderDraw) -> DMatrix<f64> {
    let dim = 2 * n;
    let mut h = DMatrix::<f64>::zeros(dim, dim);
    for cell in 0..n {
        let a = 2 * cell;
        let m = v + f_m * amp * draw.omega_prime[cell];
        h[(a, a + 1)] = m;
        h[(a + 1, a)] = m;
        if cell + 1 < n {
            let t = w + f_t * amp * draw.omega[cell];
            h[(a + 1, a + 2)] = t;
            h[(a + 2, a + 1)] = t;
        }
    }
    let tw = w + f_t * amp * draw.omega_wrap;
    h[(0, dim - 1)] = tw;
    h[(dim - 1, 0)] = tw;
    h
}

fn main() {
    let n = 16usize;
    let v_grid = centered_grid(0.0, 2.0, 50);
    let w_grid = [0.0, 0.5, 1.0, 1.5, 2.0];
    let _ = DetRng::new(0);
    let master: u64 = std::env::args()
        .nth(1)
        .map(|s| s.parse().unwrap())
        .unwrap_or(1);
    for (name, f_t, f_m) in [
        ("intracell    t:0  m:W ", 0.0, 1.0),
        ("swapped      t:W  m:2W", 1.0, 2.0),
        ("intra-heavy  t:W/2 m:W", 0.5, 1.0),
    ] {
        let mut mids = Vec::new();
        for (i_w, &amp) in w_grid.iter().enumerate() {
            let draws: Vec<DisorderDraw> = (0..5)
                .map(|r| DisorderDraw::from_seed(mix3(master, i_w as u64, r), n))
                .collect();
            let means: Vec<f64> = v_grid
                .iter()
                .map(|&v| {
                    draws
                        .iter()
                        .map(|d| {
                            let h = build_pbc(n, v, 1.0, amp, f_t, f_m, d);
                            chiral_transform(&h).unwrap().winding(256).unwrap().rounded as f64
                        })
                        .sum::<f64>()
                        / 5.0
                })
                .collect();
            let step = 2.0 / 50.0;
            let area_mid = 0.0 + step * means.iter().sum::<f64>();
            mids.push(Some(area_mid));
        }
        let mids: Vec<String> = mids
            .iter()
            .map(|m| m.map_or("None".into(), |v| format!("{v:.2}")))
            .collect();
        println!("{name} midpoints {mids:?}");
    }
}
