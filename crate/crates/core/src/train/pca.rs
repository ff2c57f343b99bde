use crate::error::{Error, Result};
use crate::tensor::Tensor;

const TOL: f64 = 1e-9;
const MAX_ITERS: usize = 1000;

#[derive(Clone, Debug)]
pub struct Pca2 {
    /// `[M, 2]` projection of the centred rows.
    pub projection: Tensor<f64>,
    /// Unit principal directions, each of length D.
    pub components: [Vec<f64>; 2],
    /// Population variance of each projected column.
    pub variances: [f64; 2],
    /// Set when the input has no spread; the projection is then all zeros.
    pub zero_variance: bool,
}

fn matvec(c: &[f64], d: usize, v: &[f64]) -> Vec<f64> {
    (0..d).map(|i| (0..d).map(|j| c[i * d + j] * v[j]).sum()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Largest-magnitude loading positive (first on ties).
fn fix_sign(v: &mut [f64]) {
    let mut k = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[k].abs() {
            k = i;
        }
    }
    if v[k] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

fn orthogonalize(v: &mut [f64], against: Option<&[f64]>) {
    if let Some(u) = against {
        // Twice, since one pass loses the residual when v is nearly parallel to u.
        for _ in 0..2 {
            let p = dot(v, u);
            v.iter_mut().zip(u).for_each(|(x, &y)| *x -= p * y);
        }
    }
}

/// Dominant eigenvector of the symmetric PSD matrix `c` by power iteration,
/// started from its heaviest column.
fn power_iteration(c: &[f64], d: usize, against: Option<&[f64]>) -> Vec<f64> {
    let heaviest = (0..d)
        .max_by(|&a, &b| c[a * d + a].total_cmp(&c[b * d + b]))
        .unwrap_or(0);
    let mut v: Vec<f64> = (0..d).map(|i| c[i * d + heaviest]).collect();
    orthogonalize(&mut v, against);
    if normalize(&mut v) == 0.0 {
        // No spread left: any unit vector orthogonal to `against` will do.
        for e in 0..d {
            v = (0..d).map(|i| if i == e { 1.0 } else { 0.0 }).collect();
            orthogonalize(&mut v, against);
            if normalize(&mut v) > 1e-6 {
                break;
            }
        }
        return v;
    }
    for _ in 0..MAX_ITERS {
        let mut w = matvec(c, d, &v);
        orthogonalize(&mut w, against);
        if normalize(&mut w) == 0.0 {
            break;
        }
        let delta = w.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        v = w;
        if delta <= TOL {
            break;
        }
    }
    v
}

/// Top-2 principal-component projection of an `[M, D]` matrix, by power
/// iteration with deflation on the population covariance.
pub fn pca2(features: &Tensor<f64>) -> Result<Pca2> {
    let s = features.shape();
    if s.len() != 2 {
        return Err(Error::Dimension(format!("pca2 expects [M, D], got {s:?}")));
    }
    let (m, d) = (s[0], s[1]);
    if m < 2 || d == 0 {
        return Err(Error::Degenerate(format!(
            "pca2 needs at least 2 rows and 1 column, got {s:?}"
        )));
    }
    let x = features.data();
    let mut mean = vec![0.0; d];
    for row in x.chunks(d) {
        mean.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
    }
    mean.iter_mut().for_each(|a| *a /= m as f64);
    let centred: Vec<f64> = x
        .chunks(d)
        .flat_map(|row| row.iter().zip(&mean).map(|(a, b)| a - b))
        .collect();

    let mut cov = vec![0.0; d * d];
    for row in centred.chunks(d) {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += row[i] * row[j];
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= m as f64);

    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    let scale = 1.0 + dot(&mean, &mean);
    if trace <= 1e-24 * scale {
        return Ok(Pca2 {
            projection: Tensor::zeros(vec![m, 2]),
            components: [vec![0.0; d], vec![0.0; d]],
            variances: [0.0, 0.0],
            zero_variance: true,
        });
    }

    let mut v1 = power_iteration(&cov, d, None);
    fix_sign(&mut v1);
    let l1 = dot(&v1, &matvec(&cov, d, &v1));
    let mut deflated = cov.clone();
    for i in 0..d {
        for j in 0..d {
            deflated[i * d + j] -= l1 * v1[i] * v1[j];
        }
    }
    // Residual spread at rounding level is treated as none.
    if deflated.iter().all(|x| x.abs() <= 1e-12 * l1) {
        deflated.iter_mut().for_each(|x| *x = 0.0);
    }
    let mut v2 = if d > 1 {
        power_iteration(&deflated, d, Some(&v1))
    } else {
        vec![0.0; d]
    };
    fix_sign(&mut v2);

    let mut proj = Vec::with_capacity(m * 2);
    for row in centred.chunks(d) {
        proj.push(dot(row, &v1));
        proj.push(dot(row, &v2));
    }
    let var = |k: usize| proj.iter().skip(k).step_by(2).map(|p| p * p).sum::<f64>() / m as f64;
    let variances = [var(0), var(1)];
    Ok(Pca2 {
        projection: Tensor::new(vec![m, 2], proj)?,
        components: [v1, v2],
        variances,
        zero_variance: false,
    })
}
