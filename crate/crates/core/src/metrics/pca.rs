use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::models::Model;
use crate::tensor::Tensor;

/// Two-component projection of per-event activations.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaProjection {
    pub coords: Vec<[f64; 2]>,
    pub labels: Vec<u8>,
    /// Eigenvalues of the two kept components, descending.
    pub variances: [f64; 2],
    /// Principal directions, one per component.
    pub components: [Vec<f64>; 2],
}

impl PcaProjection {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::Data(format!("cannot write projection: {e}"));
        w.write_record(["x", "y", "label"]).map_err(err)?;
        for (c, l) in self.coords.iter().zip(&self.labels) {
            w.write_record([c[0].to_string(), c[1].to_string(), l.to_string()]).map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(format!("cannot write projection: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
    }
}

/// Centers the rows and projects them onto the two leading eigenvectors of
/// the covariance. Each direction is signed so that its largest-magnitude
/// loading is positive.
pub fn pca_project(x: &Tensor, labels: &[u8]) -> Result<PcaProjection> {
    let (n, d) = x.dims();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("PCA needs at least 2 rows, got {n}")));
    }
    if labels.len() != n {
        return Err(Error::InvalidArgument(format!("{} labels for {n} rows", labels.len())));
    }
    let m = DMatrix::from_fn(n, d, |i, j| x.get(i, j) as f64);
    let mean = m.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let direction = |k: usize| -> (Vec<f64>, f64) {
        let Some(&c) = order.get(k) else {
            return (vec![0.0; d], 0.0);
        };
        let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
        let big = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if big < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        (v, eig.eigenvalues[c].max(0.0))
    };
    let (v1, l1) = direction(0);
    let (v2, l2) = direction(1);
    let coords = (0..n)
        .map(|i| {
            let row = centered.row(i);
            let dot = |v: &[f64]| row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
            [dot(&v1), dot(&v2)]
        })
        .collect();
    Ok(PcaProjection {
        coords,
        labels: labels.to_vec(),
        variances: [l1, l2],
        components: [v1, v2],
    })
}

/// PCA of the model's pre-head activations on standardized events.
pub fn pca_features_export(model: &mut Model, events: &Tensor, labels: &[u8]) -> Result<PcaProjection> {
    let feats = model.features(events, None, 0)?;
    pca_project(&feats, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_aligned_data_is_recovered() {
        let rows: Vec<Vec<f32>> = vec![vec![3.0, 0.0], vec![-3.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]];
        let x = Tensor::from_rows(&rows).unwrap();
        let p = pca_project(&x, &[0, 0, 1, 1]).unwrap();
        for (c, r) in p.coords.iter().zip(&rows) {
            assert!((c[0].abs() - r[0].abs() as f64).abs() < 1e-9);
            assert!((c[1].abs() - r[1].abs() as f64).abs() < 1e-9);
        }
        assert!(p.variances[0] >= p.variances[1]);
        assert!(p.to_csv().unwrap().starts_with("x,y,label\n"));
    }

    #[test]
    fn duplicates_coincide_and_variance_is_ordered() {
        let x = Tensor::from_rows(&[
            vec![1.0, 2.0, 0.5],
            vec![-1.0, 0.3, 2.0],
            vec![1.0, 2.0, 0.5],
            vec![4.0, -2.0, 1.0],
        ])
        .unwrap();
        let p = pca_project(&x, &[0, 1, 0, 1]).unwrap();
        assert_eq!(p.coords[0], p.coords[2]);
        let var = |k: usize| p.coords.iter().map(|c| c[k] * c[k]).sum::<f64>();
        assert!(var(0) >= var(1));
        assert!(pca_project(&Tensor::zeros(1, 3), &[0]).is_err());
    }
}
