//! Parity / cluster decomposition of per-state mean representations.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::probe::{collect_from_actions, PositionPolicy};
use crate::error::{Error, Result};
use crate::perm::{enumerate_group, Permutation};
use crate::transformer::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateCoords {
    pub state: Permutation,
    pub odd: bool,
    /// Parity-axis coordinate, then one per component.
    pub coords: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub parity_axis: Vec<f64>,
    pub parity_variance: f64,
    pub components: Vec<Vec<f64>>,
    /// Fraction of the total variance of the state means, per component.
    pub explained_variance: Vec<f64>,
    pub coordinates: Vec<StateCoords>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Decomposes state means (uniform weight per state) into the normalised
/// odd-minus-even direction and the top principal directions of what is
/// left after projecting that direction out.
pub fn decompose_means(means: &[(Permutation, Vec<f64>)], max_components: usize) -> Result<Decomposition> {
    let k = means.len();
    if k < 2 {
        return Err(Error::Data("need at least two state means".into()));
    }
    let d = means[0].1.len();
    let centre: Vec<f64> = (0..d).map(|j| means.iter().map(|m| m.1[j]).sum::<f64>() / k as f64).collect();
    let centred: Vec<Vec<f64>> = means.iter().map(|m| m.1.iter().zip(&centre).map(|(x, c)| x - c).collect()).collect();
    let class_mean = |odd: bool| -> Result<Vec<f64>> {
        let rows: Vec<&Vec<f64>> = centred.iter().zip(means).filter(|(_, m)| m.0.parity().is_odd() == odd).map(|(r, _)| r).collect();
        if rows.is_empty() {
            return Err(Error::Data("both parities must be observed".into()));
        }
        Ok((0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64).collect())
    };
    let diff: Vec<f64> = class_mean(true)?.iter().zip(class_mean(false)?).map(|(a, b)| a - b).collect();
    let norm = dot(&diff, &diff).sqrt();
    if norm == 0.0 {
        return Err(Error::Numeric("parity classes have identical means".into()));
    }
    let axis: Vec<f64> = diff.iter().map(|x| x / norm).collect();
    let total: f64 = centred.iter().map(|r| dot(r, r)).sum::<f64>() / k as f64;
    let parity_variance = centred.iter().map(|r| dot(r, &axis).powi(2)).sum::<f64>() / k as f64 / total;
    let resid: Vec<Vec<f64>> = centred
        .iter()
        .map(|r| {
            let p = dot(r, &axis);
            r.iter().zip(&axis).map(|(x, a)| x - p * a).collect()
        })
        .collect();
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for r in &resid {
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += r[i] * r[j] / k as f64;
            }
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut components = Vec::new();
    let mut explained = Vec::new();
    for &i in order.iter().take(max_components) {
        let val = eig.eigenvalues[i];
        if val <= 1e-12 * total {
            break;
        }
        let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
        // sign convention: largest-magnitude entry positive
        let big = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if big < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
        explained.push(val / total);
    }
    let coordinates = means
        .iter()
        .zip(&centred)
        .map(|((s, _), r)| {
            let mut coords = vec![dot(r, &axis)];
            coords.extend(components.iter().map(|c| dot(r, c)));
            StateCoords { state: s.clone(), odd: s.parity().is_odd(), coords }
        })
        .collect();
    Ok(Decomposition { parity_axis: axis, parity_variance, components, explained_variance: explained, coordinates })
}

/// Per-state means of the residual at `layer` over every position of
/// `seqs`, then [`decompose_means`] with three components.
pub fn pca_decomposition(model: &Model, seqs: &[Vec<Permutation>], layer: usize) -> Result<Decomposition> {
    if layer > model.cfg.n_layers {
        return Err(Error::InvalidArgument(format!("layer {layer} > {}", model.cfg.n_layers)));
    }
    let data = collect_from_actions(model, seqs, PositionPolicy::PerPosition)?.swap_remove(layer);
    let group = enumerate_group(seqs[0][0].degree())?;
    let mut sums = vec![vec![0.0; data.dim]; group.len()];
    let mut counts = vec![0usize; group.len()];
    for i in 0..data.len() {
        counts[data.states[i]] += 1;
        for (s, x) in sums[data.states[i]].iter_mut().zip(data.row(i)) {
            *s += x;
        }
    }
    let seen = counts.iter().filter(|&&c| c > 0).count();
    if seen < group.len() {
        return Err(Error::Data(format!("only {seen} of {} states observed", group.len())));
    }
    let means = group
        .into_iter()
        .zip(sums.into_iter().zip(counts))
        .map(|(g, (s, c))| (g, s.into_iter().map(|x| x / c as f64).collect()))
        .collect::<Vec<_>>();
    decompose_means(&means, 3)
}
