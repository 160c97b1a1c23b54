//! Clean and disordered SSH chains in the occupational basis.
//!
//! Site ordering is A1, B1, A2, B2, ..., AN, BN. Disorder follows the
//! chiral-symmetric convention of Mondragon-Shem et al. (PRL 113, 046802):
//! intracell bonds carry amplitude `m_n = v + W*omega'_n` with `omega'`
//! uniform on [-0.5, 0.5), intercell bonds stay at the clean value `w`.
//! Intracell disorder drives the transition point toward larger v/w
//! (topological Anderson behavior); intercell-dominant disorder would move
//! it the opposite way. Under periodic boundaries the wrap-around bond
//! B_N - A_1 equals the other intercell bonds.
//!
//! Disorder stream order for a given seed: omega[0..N-1], then one wrap
//! draw, then omega'[0..N] (intracell). The omega and wrap draws are always
//! consumed, even though only omega' enters the amplitudes, so that the
//! realization identity of a (seed, boundary) pair is independent of the
//! amplitude convention.

use nalgebra::DMatrix;

use crate::error::{Result, SshError};
use crate::rng::DetRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Boundary {
    Open,
    Periodic,
}

/// Parameters defining one SSH instance. `w` is fixed to 1 by convention but
/// kept explicit so closed-form checks can vary it.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HamiltonianSpec {
    pub n_cells: usize,
    pub v: f64,
    pub w: f64,
    pub disorder_amplitude: f64,
    pub boundary: Boundary,
    pub disorder_seed: Option<u64>,
}

impl HamiltonianSpec {
    pub fn clean(n_cells: usize, v: f64, boundary: Boundary) -> Self {
        Self {
            n_cells,
            v,
            w: 1.0,
            disorder_amplitude: 0.0,
            boundary,
            disorder_seed: None,
        }
    }

    pub fn dim(&self) -> usize {
        2 * self.n_cells
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_cells < 2 {
            return Err(SshError::InvalidSpec(format!(
                "n_cells must be >= 2, got {}",
                self.n_cells
            )));
        }
        if self.disorder_amplitude < 0.0 {
            return Err(SshError::InvalidSpec(format!(
                "disorder amplitude must be non-negative, got {}",
                self.disorder_amplitude
            )));
        }
        if self.disorder_amplitude > 0.0 && self.disorder_seed.is_none() {
            return Err(SshError::InvalidSpec(
                "disorder amplitude > 0 requires a disorder seed".into(),
            ));
        }
        Ok(())
    }
}

/// One draw of the disorder variables, plus the realized bond amplitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct DisorderRealization {
    /// Interior intercell amplitudes t_1..t_{N-1}.
    pub t: Vec<f64>,
    /// Intracell amplitudes m_1..m_N.
    pub m: Vec<f64>,
    pub omega: Vec<f64>,
    pub omega_prime: Vec<f64>,
    /// Wrap-around bond amplitude (periodic boundary only).
    pub t_wrap: Option<f64>,
    pub omega_wrap: Option<f64>,
}

/// Raw disorder variables for one realization, independent of (v, w, W).
#[derive(Debug, Clone, PartialEq)]
pub struct DisorderDraw {
    pub omega: Vec<f64>,
    pub omega_wrap: f64,
    pub omega_prime: Vec<f64>,
}

impl DisorderDraw {
    /// Draw the omega streams for an `n_cells`-cell chain from `seed`.
    pub fn from_seed(seed: u64, n_cells: usize) -> Self {
        let mut rng = DetRng::new(seed);
        let omega: Vec<f64> = (0..n_cells - 1).map(|_| rng.uniform_pm_half()).collect();
        let omega_wrap = rng.uniform_pm_half();
        let omega_prime: Vec<f64> = (0..n_cells).map(|_| rng.uniform_pm_half()).collect();
        Self {
            omega,
            omega_wrap,
            omega_prime,
        }
    }

    /// All-zero draw: the clean Hamiltonian for any W.
    pub fn zero(n_cells: usize) -> Self {
        Self {
            omega: vec![0.0; n_cells - 1],
            omega_wrap: 0.0,
            omega_prime: vec![0.0; n_cells],
        }
    }
}

/// Eigendecomposition of one chain, deterministically ordered and sign-fixed.
#[derive(Debug, Clone)]
pub struct Spectrum {
    /// Ascending energies.
    pub energies: Vec<f64>,
    /// Column i is the unit eigenvector of energies[i].
    pub states: DMatrix<f64>,
}

/// Realize bond amplitudes and assemble the matrix for a given draw.
pub fn build_from_draw(
    spec: &HamiltonianSpec,
    draw: &DisorderDraw,
) -> (DMatrix<f64>, DisorderRealization) {
    let n = spec.n_cells;
    let (v, w, amp) = (spec.v, spec.w, spec.disorder_amplitude);
    let t: Vec<f64> = draw.omega.iter().map(|_| w).collect();
    let m: Vec<f64> = draw.omega_prime.iter().map(|&o| v + amp * o).collect();
    let periodic = spec.boundary == Boundary::Periodic;
    let t_wrap = periodic.then_some(w);

    let dim = 2 * n;
    let mut h = DMatrix::<f64>::zeros(dim, dim);
    for cell in 0..n {
        let a = 2 * cell;
        h[(a, a + 1)] = m[cell];
        h[(a + 1, a)] = m[cell];
        if cell + 1 < n {
            h[(a + 1, a + 2)] = t[cell];
            h[(a + 2, a + 1)] = t[cell];
        }
    }
    if let Some(tw) = t_wrap {
        h[(0, dim - 1)] = tw;
        h[(dim - 1, 0)] = tw;
    }

    let realization = DisorderRealization {
        t,
        m,
        omega: draw.omega.clone(),
        omega_prime: draw.omega_prime.clone(),
        t_wrap,
        omega_wrap: periodic.then_some(draw.omega_wrap),
    };
    (h, realization)
}

/// Build the Hamiltonian for `spec`, drawing disorder from its seed.
pub fn build_hamiltonian(spec: &HamiltonianSpec) -> Result<(DMatrix<f64>, DisorderRealization)> {
    spec.validate()?;
    let draw = match spec.disorder_seed {
        Some(seed) => DisorderDraw::from_seed(seed, spec.n_cells),
        None => DisorderDraw::zero(spec.n_cells),
    };
    Ok(build_from_draw(spec, &draw))
}

fn max_asymmetry(h: &DMatrix<f64>) -> f64 {
    let n = h.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((h[(i, j)] - h[(j, i)]).abs());
        }
    }
    worst
}

/// Flip each column so its largest-magnitude entry (lowest index on ties) is
/// positive.
fn fix_signs(states: &mut DMatrix<f64>) {
    for mut col in states.column_iter_mut() {
        let mut pivot = 0;
        let mut best = 0.0f64;
        for (i, &x) in col.iter().enumerate() {
            if x.abs() > best {
                best = x.abs();
                pivot = i;
            }
        }
        if col[pivot] < 0.0 {
            col.neg_mut();
        }
    }
}

/// Diagonalize a real symmetric matrix with deterministic ordering.
///
/// Eigenvalues ascend; exact ties are broken by comparing the sign-fixed
/// eigenvectors entry by entry, larger leading entry first (so the zero
/// matrix yields the identity).
pub fn diagonalize(h: &DMatrix<f64>) -> Result<Spectrum> {
    let asym = max_asymmetry(h);
    if asym > 1e-12 {
        return Err(SshError::NotSymmetric(asym));
    }
    let dim = h.nrows();
    let eig = h
        .clone()
        .try_symmetric_eigen(f64::EPSILON, 10_000)
        .ok_or(SshError::EigenFailure)?;

    let mut states = eig.eigenvectors;
    fix_signs(&mut states);

    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[a]
            .total_cmp(&eig.eigenvalues[b])
            .then_with(|| {
                for i in 0..dim {
                    let c = states[(i, b)].total_cmp(&states[(i, a)]);
                    if c != std::cmp::Ordering::Equal {
                        return c;
                    }
                }
                std::cmp::Ordering::Equal
            })
    });

    let energies: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let sorted = DMatrix::from_fn(dim, dim, |r, c| states[(r, order[c])]);
    Ok(Spectrum {
        energies,
        states: sorted,
    })
}

impl Spectrum {
    /// Number of eigenvalues with |E| below `threshold`.
    pub fn count_zero_modes(&self, threshold: f64) -> usize {
        self.energies.iter().filter(|e| e.abs() < threshold).count()
    }
}
