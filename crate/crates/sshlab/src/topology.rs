//! Winding numbers via the chiral-basis Brillouin-zone integral.
//!
//! A periodic SSH chain with chiral symmetry Gamma H Gamma = -H becomes block
//! off-diagonal after reordering the basis: B-sublattice sites first in
//! descending cell index, then A-sublattice sites in descending cell index.
//! The lower-left block h picks up an e^{ik} factor on the single entry that
//! crosses the periodic boundary, and
//!
//!   nu = (1 / 2 pi i) * integral over BZ of Tr(h^{-1} dh/dk).
//!
//! The integrand is periodic and analytic away from gap closings, so the
//! rectangle rule on a uniform k-grid converges spectrally.

use nalgebra::{Complex, DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Result, SshError};
use crate::rng::mix3;
use crate::ssh::{self, Boundary, DisorderDraw, HamiltonianSpec, Spectrum};

type C64 = Complex<f64>;

/// Block off-diagonal form of a periodic chiral Hamiltonian.
///
/// `h_base` holds the k-independent entries; the entry at `corner` carries the
/// amplitude `corner_amp` multiplied by e^{ik}.
#[derive(Debug, Clone)]
pub struct ChiralBlocks {
    /// New-basis index -> original site index (B descending, then A descending).
    pub permutation: Vec<usize>,
    pub h_base: DMatrix<f64>,
    pub corner: (usize, usize),
    pub corner_amp: f64,
}

/// Reorder a periodic ABAB Hamiltonian into the chiral eigenbasis.
///
/// `h` must be the real matrix (the e^{ik} corner factor is attached later by
/// [`ChiralBlocks::h_of_k`]). Fails if any diagonal-block entry exceeds 1e-12.
pub fn chiral_transform(h: &DMatrix<f64>) -> Result<ChiralBlocks> {
    let dim = h.nrows();
    if dim % 2 != 0 || dim < 4 {
        return Err(SshError::Shape(format!("expected even dim >= 4, got {dim}")));
    }
    let n = dim / 2;
    // B_N, B_{N-1}, ..., B_1, A_N, ..., A_1
    let b_desc: Vec<usize> = (0..n).map(|i| 2 * (n - i) - 1).collect();
    let a_desc: Vec<usize> = (0..n).map(|i| 2 * (n - i) - 2).collect();
    let permutation: Vec<usize> = b_desc.iter().chain(a_desc.iter()).copied().collect();

    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            worst = worst.max(h[(b_desc[i], b_desc[j])].abs());
            worst = worst.max(h[(a_desc[i], a_desc[j])].abs());
        }
    }
    if worst > 1e-12 {
        return Err(SshError::NotChiral(worst));
    }

    let h_base = DMatrix::from_fn(n, n, |i, j| h[(a_desc[i], b_desc[j])]);
    // The boundary-crossing bond couples A_1 (site 0) and B_N (site 2N-1):
    // row N-1 of the A-descending order, column 0 of the B-descending order.
    let corner = (n - 1, 0);
    let corner_amp = h[(0, dim - 1)];
    Ok(ChiralBlocks {
        permutation,
        h_base,
        corner,
        corner_amp,
    })
}

impl ChiralBlocks {
    pub fn n(&self) -> usize {
        self.h_base.nrows()
    }

    /// (h(k), dh/dk) at momentum k.
    pub fn h_of_k(&self, k: f64) -> (DMatrix<C64>, DMatrix<C64>) {
        let n = self.n();
        let phase = C64::new(0.0, k).exp();
        let mut h = self.h_base.map(|x| C64::new(x, 0.0));
        h[self.corner] = self.corner_amp * phase;
        let mut dh = DMatrix::<C64>::zeros(n, n);
        dh[self.corner] = C64::new(0.0, 1.0) * self.corner_amp * phase;
        (h, dh)
    }

    /// Tr(h^{-1}(k) dh/dk). Only one entry of the inverse is needed because
    /// dh has a single nonzero.
    pub fn trace_term(&self, k: f64) -> Result<C64> {
        let (h, _) = self.h_of_k(k);
        let n = self.n();
        let lu = h.lu();
        let u = lu.u();
        let (mut dmin, mut dmax) = (f64::INFINITY, 0.0f64);
        for i in 0..n {
            let d = u[(i, i)].norm();
            dmin = dmin.min(d);
            dmax = dmax.max(d);
        }
        if dmin == 0.0 || dmax / dmin > 1e12 {
            return Err(SshError::GapClosed {
                k,
                cond: if dmin == 0.0 {
                    f64::INFINITY
                } else {
                    dmax / dmin
                },
            });
        }
        // Column `corner.0` of h^{-1}, entry `corner.1`.
        let mut e = DVector::<C64>::zeros(n);
        e[self.corner.0] = C64::new(1.0, 0.0);
        let col = lu.solve(&e).ok_or(SshError::GapClosed {
            k,
            cond: f64::INFINITY,
        })?;
        let phase = C64::new(0.0, k).exp();
        Ok(col[self.corner.1] * C64::new(0.0, 1.0) * self.corner_amp * phase)
    }

    /// Rectangle-rule winding number on a uniform k-grid.
    pub fn winding(&self, k_points: usize) -> Result<Winding> {
        let dk = 2.0 * std::f64::consts::PI / k_points as f64;
        let mut acc = C64::new(0.0, 0.0);
        for j in 0..k_points {
            acc += self.trace_term(j as f64 * dk)?;
        }
        let raw = (acc * dk / C64::new(0.0, 2.0 * std::f64::consts::PI)).re;
        Ok(Winding::from_raw(raw))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Winding {
    pub raw: f64,
    pub rounded: i64,
}

impl Winding {
    pub fn from_raw(raw: f64) -> Self {
        Self {
            raw,
            rounded: raw.round() as i64,
        }
    }

    pub fn residual(&self) -> f64 {
        (self.raw - self.rounded as f64).abs()
    }

    /// Quantization residual above 0.1 marks a point that genuinely straddles
    /// a transition.
    pub fn is_confident(&self) -> bool {
        self.residual() <= 0.1
    }
}

/// Winding number of a spec, with the boundary forced to periodic.
pub fn winding_number(spec: &HamiltonianSpec, k_points: usize) -> Result<Winding> {
    let mut spec = *spec;
    spec.boundary = Boundary::Periodic;
    let (h, _) = ssh::build_hamiltonian(&spec)?;
    chiral_transform(&h)?.winding(k_points)
}

/// Winding number for an explicit disorder draw at the given couplings.
pub fn winding_from_draw(
    n_cells: usize,
    v: f64,
    w: f64,
    amplitude: f64,
    draw: &DisorderDraw,
    k_points: usize,
) -> Result<Winding> {
    let spec = HamiltonianSpec {
        n_cells,
        v,
        w,
        disorder_amplitude: amplitude,
        boundary: Boundary::Periodic,
        disorder_seed: None,
    };
    let (h, _) = ssh::build_from_draw(&spec, draw);
    chiral_transform(&h)?.winding(k_points)
}

/// Number of eigenvalues with |E| < threshold (two zero modes per winding
/// unit in an open topological chain).
pub fn count_zero_modes(spectrum: &Spectrum, threshold: f64) -> usize {
    spectrum.count_zero_modes(threshold)
}

/// Disorder-averaged winding ground truth over a (v, W) grid.
///
/// Per-realization windings are kept alongside the average so predicted
/// diagrams can be compared realization by realization. Realization r at
/// disorder row i_w draws from seed mix3(master_seed, i_w, r); the draw is
/// shared across the whole v-axis of that row.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PhaseDiagram {
    pub v_grid: Vec<f64>,
    pub w_grid: Vec<f64>,
    pub n_cells: usize,
    pub n_realizations: usize,
    pub master_seed: u64,
    /// Row-major over (W, v): mean winding, NaN where a gap closing was hit.
    pub nu_mean: Vec<f64>,
    /// Per-realization values, index ((i_w * n_v + i_v) * n_r + r).
    pub per_realization: Vec<f64>,
}

impl PhaseDiagram {
    pub fn cell_mean(&self, i_w: usize, i_v: usize) -> f64 {
        self.nu_mean[i_w * self.v_grid.len() + i_v]
    }

    /// First v-grid point of a disorder row where the mean winding drops
    /// below 0.5; `None` when the row never crosses.
    pub fn transition_midpoint(&self, i_w: usize) -> Option<f64> {
        (0..self.v_grid.len())
            .find(|&i_v| self.cell_mean(i_w, i_v) < 0.5)
            .map(|i_v| self.v_grid[i_v])
    }
}

/// Uniform grid of `count` points spanning (lo, hi), offset from the open
/// lower end by half a step.
pub fn centered_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    let step = (hi - lo) / count as f64;
    (0..count).map(|i| lo + (i as f64 + 0.5) * step).collect()
}

/// Label a phase diagram by the infinite-system winding approximation.
pub fn label_phase_diagram(
    n_cells: usize,
    v_grid: &[f64],
    w_grid: &[f64],
    n_realizations: usize,
    master_seed: u64,
    k_points: usize,
) -> Result<PhaseDiagram> {
    if v_grid.is_empty() || w_grid.is_empty() || n_realizations == 0 {
        return Err(SshError::InvalidSpec("empty phase-diagram grid".into()));
    }
    let n_v = v_grid.len();
    let n_r = n_realizations;

    // One work unit per (disorder row, realization); the draw is shared
    // across the v-axis so transition curves stay smooth.
    let rows: Vec<Vec<f64>> = (0..w_grid.len() * n_r)
        .into_par_iter()
        .map(|flat| {
            let i_w = flat / n_r;
            let r = flat % n_r;
            let amp = w_grid[i_w];
            let draw = if amp == 0.0 {
                DisorderDraw::zero(n_cells)
            } else {
                DisorderDraw::from_seed(mix3(master_seed, i_w as u64, r as u64), n_cells)
            };
            v_grid
                .iter()
                .map(|&v| {
                    match winding_from_draw(n_cells, v, 1.0, amp, &draw, k_points) {
                        Ok(wn) => wn.rounded as f64,
                        Err(SshError::GapClosed { .. }) => f64::NAN,
                        Err(_) => f64::NAN,
                    }
                })
                .collect()
        })
        .collect();

    let mut per_realization = vec![0.0; w_grid.len() * n_v * n_r];
    for i_w in 0..w_grid.len() {
        for r in 0..n_r {
            let row = &rows[i_w * n_r + r];
            for i_v in 0..n_v {
                per_realization[(i_w * n_v + i_v) * n_r + r] = row[i_v];
            }
        }
    }
    let nu_mean: Vec<f64> = (0..w_grid.len() * n_v)
        .map(|cell| {
            let base = cell * n_r;
            per_realization[base..base + n_r].iter().sum::<f64>() / n_r as f64
        })
        .collect();

    Ok(PhaseDiagram {
        v_grid: v_grid.to_vec(),
        w_grid: w_grid.to_vec(),
        n_cells,
        n_realizations: n_r,
        master_seed,
        nu_mean,
        per_realization,
    })
}

/// CSV export: `v_over_w,W_over_w,nu_mean`, row-major over W then v.
pub fn diagram_to_csv(d: &PhaseDiagram) -> String {
    let mut out = String::from("v_over_w,W_over_w,nu_mean\n");
    for (i_w, &w) in d.w_grid.iter().enumerate() {
        for (i_v, &v) in d.v_grid.iter().enumerate() {
            out.push_str(&format!("{:.16e},{:.16e},{:.16e}\n", v, w, d.cell_mean(i_w, i_v)));
        }
    }
    out
}

/// P5 PGM heatmap, pixel = round(255 * (1 - nu_mean)). NaN cells render black.
pub fn diagram_to_pgm(d: &PhaseDiagram) -> Vec<u8> {
    let (n_v, n_w) = (d.v_grid.len(), d.w_grid.len());
    let mut out = format!("P5\n{} {}\n255\n", n_v, n_w).into_bytes();
    for i_w in 0..n_w {
        for i_v in 0..n_v {
            let nu = d.cell_mean(i_w, i_v);
            let px = if nu.is_nan() {
                0u8
            } else {
                (255.0 * (1.0 - nu.clamp(0.0, 1.0))).round() as u8
            };
            out.push(px);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssh::build_hamiltonian;
    use approx::assert_abs_diff_eq;

    #[test]
    fn n3_permutation_and_block() {
        let (v, w) = (0.6, 1.0);
        let spec = HamiltonianSpec::clean(3, v, Boundary::Periodic);
        let (h, _) = build_hamiltonian(&spec).unwrap();
        let blocks = chiral_transform(&h).unwrap();
        // 1-based (6, 4, 2, 5, 3, 1)
        assert_eq!(blocks.permutation, vec![5, 3, 1, 4, 2, 0]);
        let expected = DMatrix::from_row_slice(3, 3, &[v, w, 0.0, 0.0, v, w, w, 0.0, v]);
        assert_eq!(blocks.h_base, expected);
        assert_eq!(blocks.corner, (2, 0));
        assert_eq!(blocks.corner_amp, w);

        let (hk, dh) = blocks.h_of_k(0.0);
        assert_abs_diff_eq!(hk[(2, 0)].re, w, epsilon = 1e-15);
        assert_abs_diff_eq!(hk[(2, 0)].im, 0.0, epsilon = 1e-15);
        let (hk_pi, _) = blocks.h_of_k(std::f64::consts::PI);
        assert_abs_diff_eq!(hk_pi[(2, 0)].re, -w, epsilon = 1e-12);
        assert_eq!(dh[(0, 0)], C64::new(0.0, 0.0));
    }

    #[test]
    fn broken_chiral_symmetry_is_structural_error() {
        let spec = HamiltonianSpec::clean(3, 0.6, Boundary::Periodic);
        let (mut h, _) = build_hamiltonian(&spec).unwrap();
        h[(0, 0)] = 0.3;
        assert!(matches!(chiral_transform(&h), Err(SshError::NotChiral(_))));
    }

    #[test]
    fn disordered_block_entries_match_realization() {
        let spec = HamiltonianSpec {
            n_cells: 4,
            v: 0.5,
            w: 1.0,
            disorder_amplitude: 0.8,
            boundary: Boundary::Periodic,
            disorder_seed: Some(21),
        };
        let (h, real) = build_hamiltonian(&spec).unwrap();
        let blocks = chiral_transform(&h).unwrap();
        let n = 4;
        // Row i is cell N-i in descending order; check a hand-picked sample.
        for i in 0..n {
            let cell = n - 1 - i; // A_{cell+1} row
            assert_eq!(blocks.h_base[(i, n - 1 - cell)], real.m[cell]);
        }
        assert_eq!(blocks.corner_amp, real.t_wrap.unwrap());
    }

    /// Closed form for N=3: Tr(h^{-1} dh) = i w^3 e^{ik} / (v^3 + w^3 e^{ik}),
    /// the log-derivative of det h(k) in k — the only form whose Brillouin
    /// integral is an integer.
    #[test]
    fn n3_closed_form_trace() {
        let mut rng = crate::rng::DetRng::new(4242);
        for _ in 0..10 {
            let v = 0.1 + 1.9 * rng.uniform_01();
            let w = 0.1 + 1.9 * rng.uniform_01();
            let k = 2.0 * std::f64::consts::PI * rng.uniform_01();
            let spec = HamiltonianSpec {
                n_cells: 3,
                v,
                w,
                disorder_amplitude: 0.0,
                boundary: Boundary::Periodic,
                disorder_seed: None,
            };
            let (h, _) = build_hamiltonian(&spec).unwrap();
            let blocks = chiral_transform(&h).unwrap();
            let got = blocks.trace_term(k).unwrap();
            let phase = C64::new(0.0, k).exp();
            let expect = C64::new(0.0, 1.0) * w.powi(3) * phase / (v.powi(3) + w.powi(3) * phase);
            assert!((got - expect).norm() < 1e-10, "got {got}, expect {expect}");
        }
    }

    #[test]
    fn clean_winding_on_both_sides() {
        let below = winding_number(&HamiltonianSpec::clean(8, 0.5, Boundary::Periodic), 256).unwrap();
        assert_eq!(below.rounded, 1);
        assert!(below.residual() < 1e-6);
        let above = winding_number(&HamiltonianSpec::clean(8, 2.0, Boundary::Periodic), 256).unwrap();
        assert_eq!(above.rounded, 0);
        assert!(above.residual() < 1e-6);
    }

    #[test]
    fn dimerized_winding_is_exact() {
        let wn = winding_number(&HamiltonianSpec::clean(6, 0.0, Boundary::Periodic), 128).unwrap();
        assert!((wn.raw - 1.0).abs() < 1e-12);
    }

    #[test]
    fn k_grid_convergence() {
        for v in [0.5, 1.7] {
            let spec = HamiltonianSpec::clean(10, v, Boundary::Periodic);
            let a = winding_number(&spec, 512).unwrap().raw;
            let b = winding_number(&spec, 1024).unwrap().raw;
            assert!((a - b).abs() < 1e-8);
        }
    }

    /// Repermuting within the A block and within the B block leaves the
    /// winding of det h unchanged.
    #[test]
    fn winding_invariant_under_block_permutations() {
        let spec = HamiltonianSpec {
            n_cells: 5,
            v: 0.6,
            w: 1.0,
            disorder_amplitude: 0.7,
            boundary: Boundary::Periodic,
            disorder_seed: Some(5),
        };
        let (h, _) = build_hamiltonian(&spec).unwrap();
        let blocks = chiral_transform(&h).unwrap();
        let reference = blocks.winding(512).unwrap().raw;

        let n = blocks.n();
        let mut rng = crate::rng::DetRng::new(77);
        for _ in 0..5 {
            let mut rows: Vec<usize> = (0..n).collect();
            let mut cols: Vec<usize> = (0..n).collect();
            crate::rng::shuffle(&mut rows, rng.next_u64());
            crate::rng::shuffle(&mut cols, rng.next_u64());
            let permuted = ChiralBlocks {
                permutation: blocks.permutation.clone(),
                h_base: DMatrix::from_fn(n, n, |i, j| blocks.h_base[(rows[i], cols[j])]),
                corner: (
                    rows.iter().position(|&r| r == blocks.corner.0).unwrap(),
                    cols.iter().position(|&c| c == blocks.corner.1).unwrap(),
                ),
                corner_amp: blocks.corner_amp,
            };
            let got = permuted.winding(512).unwrap().raw;
            assert!((got - reference).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_mode_count_matches_phase() {
        let topo = build_hamiltonian(&HamiltonianSpec::clean(8, 0.0, Boundary::Open)).unwrap();
        let sp = ssh::diagonalize(&topo.0).unwrap();
        assert_eq!(count_zero_modes(&sp, 1e-8), 2);

        let triv = build_hamiltonian(&HamiltonianSpec::clean(8, 2.0, Boundary::Open)).unwrap();
        let sp = ssh::diagonalize(&triv.0).unwrap();
        assert_eq!(count_zero_modes(&sp, 1e-8), 0);

        let near = build_hamiltonian(&HamiltonianSpec::clean(16, 0.5, Boundary::Open)).unwrap();
        let sp = ssh::diagonalize(&near.0).unwrap();
        assert_eq!(count_zero_modes(&sp, 1e-3), 2);
    }

    #[test]
    fn clean_diagram_is_a_step_function() {
        let v_grid = centered_grid(0.0, 2.0, 100);
        let d = label_phase_diagram(8, &v_grid, &[0.0], 1, 1, 256).unwrap();
        for (i_v, &v) in v_grid.iter().enumerate() {
            let expect = if v < 1.0 { 1.0 } else { 0.0 };
            assert_eq!(d.cell_mean(0, i_v), expect, "v = {v}");
        }
    }

    #[test]
    fn zero_disorder_rows_are_identical() {
        let v_grid = centered_grid(0.0, 2.0, 20);
        let d = label_phase_diagram(6, &v_grid, &[0.0, 0.0], 1, 9, 128).unwrap();
        let n_v = v_grid.len();
        assert_eq!(d.nu_mean[..n_v], d.nu_mean[n_v..]);
    }

    #[test]
    fn csv_and_pgm_shapes() {
        let d = label_phase_diagram(4, &[0.3, 1.7], &[0.0], 1, 1, 64).unwrap();
        let csv = diagram_to_csv(&d);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("v_over_w,W_over_w,nu_mean\n"));
        let pgm = diagram_to_pgm(&d);
        assert!(pgm.starts_with(b"P5\n2 1\n255\n"));
        assert_eq!(pgm.len(), b"P5\n2 1\n255\n".len() + 2);
        assert_eq!(&pgm[pgm.len() - 2..], &[0u8, 255u8]);
    }
}
