//! Generalization audits: network-predicted phase diagrams paired against the
//! winding ground truth, seed sweeps with Well/Poor classification, and the
//! fidelity map that locates the clean transition without any network.

use rayon::prelude::*;

use crate::dataio::Dataset;
use crate::error::{Result, SshError};
use crate::rng::{mix2, mix3};
use crate::ssh::{self, Boundary, DisorderDraw, HamiltonianSpec};
use crate::tinycnn::{self, train::TrainConfig, Architecture, CnnModel};
use crate::topology::PhaseDiagram;

/// RMSE boundary between Well and Poor generalization.
pub const WELL_RMSE_THRESHOLD: f64 = 0.2;

/// Network-predicted phase diagram over the same grid, seeds, and disorder
/// realizations that `label_phase_diagram` uses, so each per-realization
/// entry is a paired binary prediction on the identical Hamiltonian (open
/// boundary for the eigenstate image; the label side used periodic).
pub fn predict_phase_diagram(
    model: &CnnModel,
    n_cells: usize,
    v_grid: &[f64],
    w_grid: &[f64],
    n_realizations: usize,
    master_seed: u64,
) -> Result<PhaseDiagram> {
    if v_grid.is_empty() || w_grid.is_empty() || n_realizations == 0 {
        return Err(SshError::InvalidSpec("empty phase-diagram grid".into()));
    }
    if model.arch.input_len() != 4 * n_cells * n_cells {
        return Err(SshError::Shape(format!(
            "model expects {} pixels, chain of {} cells yields {}",
            model.arch.input_len(),
            n_cells,
            4 * n_cells * n_cells
        )));
    }
    let n_v = v_grid.len();
    let n_r = n_realizations;

    let rows: Vec<Result<Vec<f64>>> = (0..w_grid.len() * n_r)
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
                    let spec = HamiltonianSpec {
                        n_cells,
                        v,
                        w: 1.0,
                        disorder_amplitude: amp,
                        boundary: Boundary::Open,
                        disorder_seed: None,
                    };
                    let (h, _) = ssh::build_from_draw(&spec, &draw);
                    let sp = ssh::diagonalize(&h)?;
                    let dim = 2 * n_cells;
                    let mut pixels = vec![0.0; dim * dim];
                    for row in 0..dim {
                        for col in 0..dim {
                            pixels[row * dim + col] = sp.states[(row, col)].powi(2);
                        }
                    }
                    Ok(tinycnn::predict(model, &pixels)? as f64)
                })
                .collect()
        })
        .collect();

    let mut per_realization = vec![0.0; w_grid.len() * n_v * n_r];
    for i_w in 0..w_grid.len() {
        for r in 0..n_r {
            let row = rows[i_w * n_r + r].as_ref().map_err(|e| {
                SshError::InvalidSpec(format!("prediction failed at row {i_w}: {e}"))
            })?;
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

fn check_paired(target: &PhaseDiagram, predicted: &PhaseDiagram) -> Result<()> {
    let ok = target.v_grid == predicted.v_grid
        && target.w_grid == predicted.w_grid
        && target.n_cells == predicted.n_cells
        && target.n_realizations == predicted.n_realizations
        && target.master_seed == predicted.master_seed;
    if ok {
        Ok(())
    } else {
        Err(SshError::PairingMismatch(
            "phase diagrams were not produced from the same grid, seed, and realization count"
                .into(),
        ))
    }
}

/// Root-mean-square difference over all paired per-realization entries.
/// Entries where the ground truth hit a gap closing (NaN) are excluded.
pub fn diagram_rmse(target: &PhaseDiagram, predicted: &PhaseDiagram) -> Result<f64> {
    check_paired(target, predicted)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (t, p) in target
        .per_realization
        .iter()
        .zip(&predicted.per_realization)
    {
        if t.is_nan() || p.is_nan() {
            continue;
        }
        sum += (t - p) * (t - p);
        n += 1;
    }
    if n == 0 {
        return Err(SshError::Degenerate("no comparable diagram entries".into()));
    }
    Ok((sum / n as f64).sqrt())
}

/// Fraction of paired per-realization entries where the predicted phase
/// matches the winding label exactly.
pub fn diagram_accuracy(target: &PhaseDiagram, predicted: &PhaseDiagram) -> Result<f64> {
    check_paired(target, predicted)?;
    let mut hits = 0usize;
    let mut n = 0usize;
    for (t, p) in target
        .per_realization
        .iter()
        .zip(&predicted.per_realization)
    {
        if t.is_nan() || p.is_nan() {
            continue;
        }
        n += 1;
        if (t - p).abs() < 0.5 {
            hits += 1;
        }
    }
    if n == 0 {
        return Err(SshError::Degenerate("no comparable diagram entries".into()));
    }
    Ok(hits as f64 / n as f64)
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct SweepRow {
    pub init_seed: u64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub ood_acc: f64,
    pub rmse: f64,
    pub well: bool,
}

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

fn mean_std(xs: &[f64]) -> MeanStd {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|&x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    MeanStd {
        mean,
        std: var.sqrt(),
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ClassStats {
    pub count: usize,
    pub train_acc: MeanStd,
    pub test_acc: MeanStd,
    pub ood_acc: MeanStd,
    pub rmse: MeanStd,
}

fn class_stats(rows: &[&SweepRow]) -> Option<ClassStats> {
    if rows.is_empty() {
        return None;
    }
    let pick = |f: fn(&SweepRow) -> f64| mean_std(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
    Some(ClassStats {
        count: rows.len(),
        train_acc: pick(|r| r.train_acc),
        test_acc: pick(|r| r.test_acc),
        ood_acc: pick(|r| r.ood_acc),
        rmse: pick(|r| r.rmse),
    })
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub well: Option<ClassStats>,
    pub poor: Option<ClassStats>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("init_seed,train_acc,test_acc,ood_acc,rmse,class\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{}\n",
                r.init_seed,
                r.train_acc,
                r.test_acc,
                r.ood_acc,
                r.rmse,
                if r.well { "well" } else { "poor" }
            ));
        }
        out
    }

    pub fn summary_table(&self) -> String {
        let mut out = String::from(
            "class  count  train_acc        test_acc         ood_acc          rmse\n",
        );
        for (name, stats) in [("well", &self.well), ("poor", &self.poor)] {
            match stats {
                Some(s) => out.push_str(&format!(
                    "{name:<6} {:<6} {:.3} +/- {:.3}  {:.3} +/- {:.3}  {:.3} +/- {:.3}  {:.3} +/- {:.3}\n",
                    s.count,
                    s.train_acc.mean, s.train_acc.std,
                    s.test_acc.mean, s.test_acc.std,
                    s.ood_acc.mean, s.ood_acc.std,
                    s.rmse.mean, s.rmse.std,
                )),
                None => out.push_str(&format!("{name:<6} 0\n")),
            }
        }
        out
    }
}

pub struct SweepInputs<'a> {
    pub train: &'a Dataset,
    pub validation: &'a Dataset,
    pub test: &'a Dataset,
    pub target: &'a PhaseDiagram,
}

/// Train `n_seeds` independently initialized networks on the same data and
/// classify each by its OOD phase-diagram RMSE. Initialization seed for run s
/// is mix2(sweep_seed, s); the shuffle stream follows the same seed.
pub fn seed_sweep(
    inputs: &SweepInputs,
    config: &TrainConfig,
    n_seeds: usize,
    sweep_seed: u64,
) -> Result<SweepReport> {
    let arch = Architecture::for_cells(inputs.train.manifest.n_cells)?;
    let train_ex = tinycnn::to_examples(inputs.train);
    let val_ex = tinycnn::to_examples(inputs.validation);
    let test_ex = tinycnn::to_examples(inputs.test);
    let t = inputs.target;

    let mut rows = Vec::with_capacity(n_seeds);
    for s in 0..n_seeds {
        let seed = mix2(sweep_seed, s as u64);
        let model = tinycnn::init_model(arch, seed);
        let mut cfg = config.clone();
        cfg.seed = seed;
        let outcome = tinycnn::train::train(model, &train_ex, &val_ex, &cfg)?;
        let model = outcome.model;
        let (_, train_acc) = tinycnn::evaluate(&model, &train_ex)?;
        let (_, test_acc) = tinycnn::evaluate(&model, &test_ex)?;
        let predicted = predict_phase_diagram(
            &model,
            t.n_cells,
            &t.v_grid,
            &t.w_grid,
            t.n_realizations,
            t.master_seed,
        )?;
        let rmse = diagram_rmse(t, &predicted)?;
        let ood_acc = diagram_accuracy(t, &predicted)?;
        rows.push(SweepRow {
            init_seed: seed,
            train_acc,
            test_acc,
            ood_acc,
            rmse,
            well: rmse < WELL_RMSE_THRESHOLD,
        });
    }

    let well: Vec<&SweepRow> = rows.iter().filter(|r| r.well).collect();
    let poor: Vec<&SweepRow> = rows.iter().filter(|r| !r.well).collect();
    let report = SweepReport {
        well: class_stats(&well),
        poor: class_stats(&poor),
        rows,
    };
    Ok(report)
}

/// Eigenstate fidelity map against the v = 0 reference chain.
///
/// Entry (i, j) is the squared overlap of the i-th eigenstate (energy order)
/// at coupling v_grid[j] with the i-th eigenstate of the same chain at v = 0,
/// computed with an identical disorder draw and open boundary. When the
/// reference eigenvalue is degenerate the squared overlap is summed over the
/// rank-matched target group, which makes the entry independent of the basis
/// chosen inside the degenerate subspace.
#[derive(Debug, Clone)]
pub struct FidelityMap {
    pub v_grid: Vec<f64>,
    pub n_cells: usize,
    /// Row-major (2N, n_v).
    pub values: Vec<f64>,
}

pub fn fidelity_map(
    n_cells: usize,
    v_grid: &[f64],
    disorder_amplitude: f64,
    seed: u64,
) -> Result<FidelityMap> {
    if v_grid.is_empty() {
        return Err(SshError::InvalidSpec("empty fidelity grid".into()));
    }
    let draw = if disorder_amplitude == 0.0 {
        DisorderDraw::zero(n_cells)
    } else {
        DisorderDraw::from_seed(seed, n_cells)
    };
    let spectrum_at = |v: f64| -> Result<crate::ssh::Spectrum> {
        let spec = HamiltonianSpec {
            n_cells,
            v,
            w: 1.0,
            disorder_amplitude,
            boundary: Boundary::Open,
            disorder_seed: None,
        };
        let (h, _) = ssh::build_from_draw(&spec, &draw);
        ssh::diagonalize(&h)
    };
    let reference = spectrum_at(0.0)?;
    let dim = 2 * n_cells;

    // Degenerate reference eigenvalues make the per-state overlap depend on
    // an arbitrary basis choice inside the subspace (at v = 0 the two edge
    // modes and each dimer band are exactly degenerate). Group reference
    // states by eigenvalue and score each one against the span of the
    // rank-matched target group: basis-independent, and identical to the
    // plain squared overlap whenever the eigenvalue is simple.
    let scale = reference
        .energies
        .iter()
        .fold(1.0_f64, |m, &e| m.max(e.abs()));
    let tol = 1e-8 * scale;
    let mut group_of = vec![0usize; dim];
    let mut groups: Vec<(usize, usize)> = Vec::new();
    let mut start = 0usize;
    for i in 1..=dim {
        if i == dim || reference.energies[i] - reference.energies[i - 1] > tol {
            for g in start..i {
                group_of[g] = groups.len();
            }
            groups.push((start, i));
            start = i;
        }
    }

    let mut values = vec![0.0; dim * v_grid.len()];
    for (j, &v) in v_grid.iter().enumerate() {
        let sp = spectrum_at(v)?;
        for i in 0..dim {
            let (lo, hi) = groups[group_of[i]];
            let fidelity: f64 = (lo..hi)
                .map(|t| {
                    let overlap: f64 = (0..dim)
                        .map(|s| reference.states[(s, i)] * sp.states[(s, t)])
                        .sum();
                    overlap * overlap
                })
                .sum();
            values[i * v_grid.len() + j] = fidelity;
        }
    }
    Ok(FidelityMap {
        v_grid: v_grid.to_vec(),
        n_cells,
        values,
    })
}

pub fn fidelity_to_csv(map: &FidelityMap) -> String {
    let mut out = String::from("state_index,v,fidelity\n");
    let n_v = map.v_grid.len();
    for i in 0..2 * map.n_cells {
        for (j, &v) in map.v_grid.iter().enumerate() {
            out.push_str(&format!("{},{:.16e},{:.16e}\n", i, v, map.values[i * n_v + j]));
        }
    }
    out
}
