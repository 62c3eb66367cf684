use super::tensor::Tensor;
use crate::error::Result;

/// Singular values of a matrix in descending order, by one-sided Jacobi
/// rotations over its columns.
pub fn singular_values(m: &Tensor) -> Result<Vec<f64>> {
    let (rows, cols) = m.dims2()?;
    let mut a: Vec<Vec<f64>> = (0..cols).map(|c| (0..rows).map(|r| m.at2(r, c)).collect()).collect();
    for _sweep in 0..64 {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha: f64 = a[p].iter().map(|x| x * x).sum();
                let beta: f64 = a[q].iter().map(|x| x * x).sum();
                let gamma: f64 = a[p].iter().zip(&a[q]).map(|(x, y)| x * y).sum();
                if gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = if zeta == 0.0 {
                    1.0
                } else {
                    zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..rows {
                    let (x, y) = (a[p][r], a[q][r]);
                    a[p][r] = c * x - s * y;
                    a[q][r] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = a.iter().map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    Ok(sv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_and_rotated() {
        let d = Tensor::from_rows(&[&[3.0, 0.0], &[0.0, -2.0], &[0.0, 0.0]]);
        let sv = singular_values(&d).unwrap();
        assert!((sv[0] - 3.0).abs() < 1e-14 && (sv[1] - 2.0).abs() < 1e-14);
        // [[1,1],[1,1]] has singular values 2 and 0
        let sv = singular_values(&Tensor::from_rows(&[&[1.0, 1.0], &[1.0, 1.0]])).unwrap();
        assert!((sv[0] - 2.0).abs() < 1e-14 && sv[1] < 1e-15);
    }

    #[test]
    fn frobenius_norm_is_preserved() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
        let m = Tensor::randn(&[7, 5], 1.0, &mut rng);
        let sv = singular_values(&m).unwrap();
        let fro2: f64 = m.data().iter().map(|x| x * x).sum();
        assert!((sv.iter().map(|s| s * s).sum::<f64>() - fro2).abs() < 1e-12 * fro2);
    }

    #[test]
    fn outer_product_has_one_nonzero_value() {
        let u = [0.3, -1.2, 2.0, 0.01];
        let v = [5.0, -0.5, 0.25];
        let rows: Vec<Vec<f64>> = u.iter().map(|a| v.iter().map(|b| a * b).collect()).collect();
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let sv = singular_values(&Tensor::from_rows(&refs)).unwrap();
        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((sv[0] - nu * nv).abs() < 1e-12);
        assert!(sv[1] < 1e-14);
    }
}
