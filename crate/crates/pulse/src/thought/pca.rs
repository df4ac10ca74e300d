//! Deterministic 2-component PCA for embedding visualizations.

use std::path::Path;

use crate::data::ingest::ensure_parent;
use crate::error::{PulseError, Result};

pub const PROJECTION_HEADER: [&str; 4] = ["id", "label", "x", "y"];

/// Project vectors onto their top two principal components.
///
/// Eigenvectors come from cyclic Jacobi rotations on the covariance matrix,
/// so results are platform-stable; each component's sign is fixed by making
/// its first nonzero loading positive.
pub fn project_embeddings_2d(vectors: &[Vec<f32>]) -> Result<Vec<(f64, f64)>> {
    if vectors.len() < 3 {
        return Err(PulseError::DegenerateInput(format!(
            "need at least 3 vectors to project, got {}",
            vectors.len()
        )));
    }
    let d = vectors[0].len();
    if d < 2 || vectors.iter().any(|v| v.len() != d) {
        return Err(PulseError::InvalidArgument(
            "vectors must share a dimension of at least 2".into(),
        ));
    }
    let distinct: std::collections::BTreeSet<Vec<u32>> = vectors
        .iter()
        .map(|v| v.iter().map(|x| x.to_bits()).collect())
        .collect();
    if distinct.len() < 2 {
        return Err(PulseError::DegenerateInput(
            "fewer than 2 distinct vectors".into(),
        ));
    }

    let n = vectors.len();
    let mut mean = vec![0.0f64; d];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += *x as f64;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| v.iter().zip(&mean).map(|(x, m)| *x as f64 - m).collect())
        .collect();

    let mut cov = vec![vec![0.0f64; d]; d];
    for row in &centered {
        for i in 0..d {
            for j in i..d {
                cov[i][j] += row[i] * row[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            cov[i][j] /= denom;
            cov[j][i] = cov[i][j];
        }
    }

    let (eigenvalues, eigenvectors) = jacobi_eigen(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eigenvalues[b].total_cmp(&eigenvalues[a]).then(a.cmp(&b)));

    let mut components = Vec::with_capacity(2);
    for &col in order.iter().take(2) {
        let mut comp: Vec<f64> = (0..d).map(|r| eigenvectors[r][col]).collect();
        if let Some(first) = comp.iter().find(|v| v.abs() > 1e-12) {
            if *first < 0.0 {
                for v in &mut comp {
                    *v = -*v;
                }
            }
        }
        components.push(comp);
    }

    Ok(centered
        .iter()
        .map(|row| {
            let x = row.iter().zip(&components[0]).map(|(a, b)| a * b).sum();
            let y = row.iter().zip(&components[1]).map(|(a, b)| a * b).sum();
            (x, y)
        })
        .collect())
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// (eigenvalues, eigenvector columns).
fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = a.len();
    let mut v = vec![vec![0.0f64; d]; d];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..d {
            for j in (i + 1)..d {
                off += a[i][j] * a[i][j];
            }
        }
        if off < 1e-22 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                if a[p][q].abs() < 1e-18 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k][p];
                    let vkq = v[k][q];
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eigenvalues: Vec<f64> = (0..d).map(|i| a[i][i]).collect();
    (eigenvalues, v)
}

/// Write a projection as CSV with the fixed `id,label,x,y` header.
pub fn write_projection_csv(
    path: &Path,
    ids: &[String],
    labels: &[String],
    coords: &[(f64, f64)],
) -> Result<()> {
    if ids.len() != coords.len() || labels.len() != coords.len() {
        return Err(PulseError::InvalidArgument(format!(
            "projection rows disagree: {} ids, {} labels, {} coords",
            ids.len(),
            labels.len(),
            coords.len()
        )));
    }
    ensure_parent(path)?;
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| PulseError::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
    writer
        .write_record(PROJECTION_HEADER)
        .map_err(|e| PulseError::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
    for ((id, label), (x, y)) in ids.iter().zip(labels).zip(coords) {
        writer
            .write_record([id.as_str(), label.as_str(), &format!("{x:.6}"), &format!("{y:.6}")])
            .map_err(|e| PulseError::Format {
                path: path.to_path_buf(),
                detail: e.to_string(),
            })?;
    }
    writer.flush().map_err(|e| PulseError::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_aligned_2d_data_reproduces_itself() {
        // Variance along x dwarfs y, so components are the axes themselves.
        let vectors = vec![
            vec![3.0f32, 0.0],
            vec![-3.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, -1.0],
        ];
        let coords = project_embeddings_2d(&vectors).unwrap();
        for (orig, (x, y)) in vectors.iter().zip(&coords) {
            assert!((orig[0] as f64 - x).abs() < 1e-9, "x: {orig:?} vs {x}");
            assert!((orig[1] as f64 - y).abs() < 1e-9, "y: {orig:?} vs {y}");
        }
    }

    #[test]
    fn duplicate_vectors_get_duplicate_coordinates() {
        let vectors = vec![
            vec![1.0f32, 2.0, 3.0],
            vec![1.0, 2.0, 3.0],
            vec![-1.0, 0.5, 0.0],
            vec![0.3, -2.0, 1.0],
        ];
        let coords = project_embeddings_2d(&vectors).unwrap();
        assert_eq!(coords[0], coords[1]);
        assert_ne!(coords[0], coords[2]);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        assert!(matches!(
            project_embeddings_2d(&[vec![1.0, 0.0], vec![0.0, 1.0]]),
            Err(PulseError::DegenerateInput(_))
        ));
        let same = vec![vec![1.0f32, 1.0]; 5];
        assert!(matches!(
            project_embeddings_2d(&same),
            Err(PulseError::DegenerateInput(_))
        ));
    }

    #[test]
    fn sign_convention_is_stable() {
        let vectors = vec![
            vec![5.0f32, 0.1, 0.0],
            vec![-5.0, -0.1, 0.0],
            vec![2.5, 0.0, 0.2],
            vec![-2.5, 0.0, -0.2],
        ];
        let a = project_embeddings_2d(&vectors).unwrap();
        let flipped: Vec<Vec<f32>> = vectors.iter().map(|v| v.clone()).rev().collect();
        let b = project_embeddings_2d(&flipped).unwrap();
        // Same point set in reverse order: coordinates match pointwise.
        for (pa, pb) in a.iter().zip(b.iter().rev()) {
            assert!((pa.0 - pb.0).abs() < 1e-9);
            assert!((pa.1 - pb.1).abs() < 1e-9);
        }
    }

    #[test]
    fn csv_export_has_fixed_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("proj.csv");
        let ids = vec!["a".to_string(), "b".to_string()];
        let labels = vec!["pos".to_string(), "neg".to_string()];
        let coords = vec![(1.0, 2.0), (-0.5, 0.25)];
        write_projection_csv(&path, &ids, &labels, &coords).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "id,label,x,y");
        assert_eq!(lines.next().unwrap(), "a,pos,1.000000,2.000000");
    }
}
