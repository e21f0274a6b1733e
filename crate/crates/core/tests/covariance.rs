use iada::class_stats::{project_psd, symmetric_eigen, ClassStats, CovarianceMode};
use iada::nn::Tensor;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn full_batch(x: &Tensor<f64>, labels: &[usize], class: usize) -> DMatrix<f64> {
    let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
    let m = DMatrix::from_fn(rows.len(), x.cols(), |i, j| x.get(rows[i], j));
    let mu = m.row_mean();
    let c = DMatrix::from_fn(rows.len(), x.cols(), |i, j| m[(i, j)] - mu[j]);
    c.transpose() * &c / rows.len() as f64
}

fn to_na(t: &Tensor<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(t.rows(), t.cols(), |i, j| t.get(i, j))
}

proptest! {
    #[test]
    fn pooling_matches_full_batch(
        vals in prop::collection::vec(-5.0f64..5.0, 120 * 3),
        labels in prop::collection::vec(0usize..2, 120),
        cuts in prop::collection::vec(1usize..30, 1..40),
    ) {
        let x = Tensor::from_fn(120, 3, |i, j| vals[i * 3 + j] + 10.0 * j as f64);
        let mut stats = ClassStats::<f64>::new(vec![0.5, 0.5], 3, CovarianceMode::Full).unwrap();
        let mut at = 0;
        for len in cuts.iter().cycle() {
            if at >= 120 { break; }
            let ids: Vec<usize> = (at..(at + len).min(120)).collect();
            let batch: Vec<usize> = ids.iter().map(|&i| labels[i]).collect();
            stats.update_covariance(&x.select_rows(&ids), &batch).unwrap();
            at += len;
        }
        for c in 0..2 {
            if labels.iter().filter(|&&y| y == c).count() == 0 { continue; }
            let err = (to_na(stats.covariance(c)) - full_batch(&x, &labels, c)).abs().max();
            prop_assert!(err <= 1e-10, "class {} err {}", c, err);
        }
    }

    #[test]
    fn projection_is_psd_symmetric_and_idempotent(vals in prop::collection::vec(-3.0f64..3.0, 16)) {
        let a = Tensor::from_fn(4, 4, |i, j| vals[i * 4 + j] + vals[j * 4 + i]);
        let p = project_psd(&a).unwrap();
        prop_assert!((to_na(&p) - to_na(&p).transpose()).abs().max() <= 1e-12);
        let eig = nalgebra::SymmetricEigen::new(to_na(&p)).eigenvalues;
        prop_assert!(eig.iter().all(|&l| l >= -1e-10));
        let again = project_psd(&p).unwrap();
        prop_assert!((to_na(&again) - to_na(&p)).abs().max() <= 1e-10);
        // Nearest in Frobenius norm: clipping the eigenvalues of a at zero.
        let e = nalgebra::SymmetricEigen::new(to_na(&a));
        let want = &e.eigenvectors * DMatrix::from_diagonal(&e.eigenvalues.map(|l| l.max(0.0))) * e.eigenvectors.transpose();
        prop_assert!((to_na(&p) - want).abs().max() <= 1e-9);
    }

    #[test]
    fn eigensolver_agrees_with_nalgebra(vals in prop::collection::vec(-3.0f64..3.0, 25)) {
        let a = Tensor::from_fn(5, 5, |i, j| vals[i * 5 + j] + vals[j * 5 + i]);
        let (mut ours, _) = symmetric_eigen(&a).unwrap();
        let mut theirs: Vec<f64> = nalgebra::SymmetricEigen::new(to_na(&a)).eigenvalues.iter().copied().collect();
        ours.sort_by(f64::total_cmp);
        theirs.sort_by(f64::total_cmp);
        for (o, t) in ours.iter().zip(&theirs) {
            prop_assert!((o - t).abs() <= 1e-9);
        }
    }
}

#[test]
fn psd_input_is_a_fixed_point() {
    let a = Tensor::from_vec(2, 2, vec![2.0, 0.5, 0.5, 1.0]).unwrap();
    let p = project_psd(&a).unwrap();
    assert!((to_na(&p) - to_na(&a)).abs().max() < 1e-12);
}
