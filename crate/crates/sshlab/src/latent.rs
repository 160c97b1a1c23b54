//! Latent-space analysis: capture per-layer activations across a dataset,
//! fit PCA on them, and score how well the two phases separate in the
//! leading components.

use nalgebra::DMatrix;

use crate::dataio::Dataset;
use crate::error::{Result, SshError};
use crate::tinycnn::{forward, CnnModel, N_CONV};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerTag {
    Conv1,
    Conv2,
    Conv3,
    Gap,
}

impl LayerTag {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "conv1" => Ok(Self::Conv1),
            "conv2" => Ok(Self::Conv2),
            "conv3" => Ok(Self::Conv3),
            "gap" => Ok(Self::Gap),
            other => Err(SshError::NoSuchLayer(other.into())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Conv1 => "conv1",
            Self::Conv2 => "conv2",
            Self::Conv3 => "conv3",
            Self::Gap => "gap",
        }
    }
}

/// Per-sample metadata carried alongside each activation row.
#[derive(Debug, Clone, Copy)]
pub struct RowMeta {
    pub v: f64,
    pub disorder_amplitude: f64,
    pub label: u8,
}

/// Row-per-sample activation matrix at one layer.
#[derive(Debug, Clone)]
pub struct ActivationMatrix {
    pub layer: LayerTag,
    /// (n_samples, n_features).
    pub data: DMatrix<f64>,
    pub meta: Vec<RowMeta>,
}

pub fn capture_activations(
    model: &CnnModel,
    dataset: &Dataset,
    layer: LayerTag,
) -> Result<ActivationMatrix> {
    let n = dataset.samples.len();
    let n_features = match layer {
        LayerTag::Conv1 | LayerTag::Conv2 | LayerTag::Conv3 => {
            let l = match layer {
                LayerTag::Conv1 => 1,
                LayerTag::Conv2 => 2,
                _ => 3,
            };
            let (h, w) = model.arch.spatial(l);
            model.arch.widths[l - 1] * h * w
        }
        LayerTag::Gap => model.arch.widths[N_CONV - 1],
    };
    let mut data = DMatrix::<f64>::zeros(n, n_features);
    let mut meta = Vec::with_capacity(n);
    for (i, s) in dataset.samples.iter().enumerate() {
        let tape = forward(model, &s.pixels)?;
        let row: &[f64] = match layer {
            LayerTag::Conv1 => &tape.conv_out[0],
            LayerTag::Conv2 => &tape.conv_out[1],
            LayerTag::Conv3 => &tape.conv_out[2],
            LayerTag::Gap => &tape.gap,
        };
        for (j, &x) in row.iter().enumerate() {
            data[(i, j)] = x;
        }
        meta.push(RowMeta {
            v: s.v,
            disorder_amplitude: s.disorder_amplitude,
            label: s.label,
        });
    }
    Ok(ActivationMatrix { layer, data, meta })
}

#[derive(Debug, Clone)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// (n_components, n_features), rows orthonormal.
    pub components: DMatrix<f64>,
    /// Descending, clamped at zero.
    pub explained_variance: Vec<f64>,
}

/// Fit PCA by eigendecomposition of the sample covariance (divisor n-1).
///
/// When features outnumber samples, the same spectrum is obtained from the
/// n x n Gram matrix of centered rows and mapped back, which keeps conv-layer
/// fits tractable. Component signs are fixed by making each component's
/// largest-magnitude entry positive (lowest index on ties).
pub fn pca_fit(data: &DMatrix<f64>, n_components: usize) -> Result<Pca> {
    let n = data.nrows();
    let p = data.ncols();
    if n < 2 {
        return Err(SshError::Degenerate(
            "need at least two rows to fit a covariance".into(),
        ));
    }
    let max_components = p.min(n - 1);
    if n_components == 0 || n_components > max_components {
        return Err(SshError::InvalidSpec(format!(
            "n_components {n_components} out of range 1..={max_components}"
        )));
    }

    let mean: Vec<f64> = (0..p).map(|j| data.column(j).sum() / n as f64).collect();
    let mut centered = data.clone();
    for j in 0..p {
        let m = mean[j];
        centered.column_mut(j).iter_mut().for_each(|x| *x -= m);
    }

    let (mut eigvals, mut components) = if p <= n {
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        let eig = cov.symmetric_eigen();
        let vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        // Columns of eigenvectors are the components.
        let vecs: Vec<Vec<f64>> = (0..p)
            .map(|j| eig.eigenvectors.column(j).iter().copied().collect())
            .collect();
        (vals, vecs)
    } else {
        let gram = &centered * centered.transpose() / (n as f64 - 1.0);
        let n_gram = gram.nrows();
        let eig = gram.symmetric_eigen();
        let vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        // Map Gram eigenvectors u to feature space: v = X^T u / |X^T u|.
        let vecs: Vec<Vec<f64>> = (0..n_gram)
            .map(|j| {
                let u = eig.eigenvectors.column(j);
                let v = centered.transpose() * u;
                let norm = v.norm();
                if norm > 0.0 {
                    (v / norm).iter().copied().collect()
                } else {
                    vec![0.0; p]
                }
            })
            .collect();
        (vals, vecs)
    };

    // Sort descending and clamp tiny negative eigenvalues from roundoff.
    let mut order: Vec<usize> = (0..eigvals.len()).collect();
    order.sort_by(|&a, &b| eigvals[b].total_cmp(&eigvals[a]).then(a.cmp(&b)));
    eigvals = order.iter().map(|&i| eigvals[i].max(0.0)).collect();
    components = order.iter().map(|&i| components[i].clone()).collect();

    let mut comp_matrix = DMatrix::<f64>::zeros(n_components, p);
    for (i, comp) in components.iter().take(n_components).enumerate() {
        // Sign fix: largest-magnitude entry positive, lowest index on ties.
        let mut pivot = 0;
        for (j, &x) in comp.iter().enumerate() {
            if x.abs() > comp[pivot].abs() {
                pivot = j;
            }
        }
        let sign = if comp[pivot] < 0.0 { -1.0 } else { 1.0 };
        for (j, &x) in comp.iter().enumerate() {
            comp_matrix[(i, j)] = sign * x;
        }
    }

    Ok(Pca {
        mean,
        components: comp_matrix,
        explained_variance: eigvals.into_iter().take(n_components).collect(),
    })
}

/// Project rows of `data` onto the fitted components: (X - mean) C^T.
pub fn pca_project(pca: &Pca, data: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if data.ncols() != pca.mean.len() {
        return Err(SshError::Shape(format!(
            "projection expects {} features, got {}",
            pca.mean.len(),
            data.ncols()
        )));
    }
    let mut centered = data.clone();
    for j in 0..data.ncols() {
        let m = pca.mean[j];
        centered.column_mut(j).iter_mut().for_each(|x| *x -= m);
    }
    Ok(centered * pca.components.transpose())
}

/// Mean silhouette score of the two label clusters in the projected plane.
/// Positive means separated; identical clouds score zero or below.
pub fn cluster_separation(points: &DMatrix<f64>, labels: &[u8]) -> Result<f64> {
    let n = points.nrows();
    if n != labels.len() {
        return Err(SshError::Shape("labels/points length mismatch".into()));
    }
    let classes: [u8; 2] = [0, 1];
    let counts = [
        labels.iter().filter(|&&l| l == 0).count(),
        labels.iter().filter(|&&l| l == 1).count(),
    ];
    if counts[0] == 0 || counts[1] == 0 {
        return Err(SshError::Degenerate(
            "silhouette needs both labels present".into(),
        ));
    }
    let dist = |i: usize, j: usize| -> f64 {
        (0..points.ncols())
            .map(|c| (points[(i, c)] - points[(j, c)]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut total = 0.0;
    for i in 0..n {
        let own = labels[i];
        let own_count = counts[(own == classes[1]) as usize];
        if own_count == 1 {
            // Singleton cluster: silhouette is defined as 0.
            continue;
        }
        let mut sums = [0.0; 2];
        for j in 0..n {
            if j != i {
                sums[(labels[j] == classes[1]) as usize] += dist(i, j);
            }
        }
        let own_idx = (own == classes[1]) as usize;
        let a = sums[own_idx] / (counts[own_idx] - 1) as f64;
        let b = sums[1 - own_idx] / counts[1 - own_idx] as f64;
        let denom = a.max(b);
        total += if denom > 0.0 { (b - a) / denom } else { 0.0 };
    }
    Ok(total / n as f64)
}

/// Two leading components per row, with provenance columns. Strata are named
/// `clean` or `W=<amplitude>`.
pub fn projection_to_csv(points: &DMatrix<f64>, meta: &[RowMeta]) -> String {
    let mut out = String::from("pc1,pc2,v,W,label,stratum\n");
    for (i, m) in meta.iter().enumerate() {
        let pc2 = if points.ncols() > 1 { points[(i, 1)] } else { 0.0 };
        let stratum = if m.disorder_amplitude == 0.0 {
            "clean".to_string()
        } else {
            format!("W={}", m.disorder_amplitude)
        };
        out.push_str(&format!(
            "{:.16e},{:.16e},{:.16e},{:.16e},{},{}\n",
            points[(i, 0)],
            pc2,
            m.v,
            m.disorder_amplitude,
            m.label,
            stratum
        ));
    }
    out
}
