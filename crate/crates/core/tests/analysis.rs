mod common;

use std::collections::BTreeMap;

use dismae::analysis::*;
use dismae::model::DisMae;
use dismae::seeding::rng_for;
use dismae::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Cyclic Jacobi eigenvalues of a symmetric matrix, descending.
fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

fn covariance(x: &Tensor) -> Vec<Vec<f64>> {
    let (n, d) = (x.rows(), x.last_dim());
    let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| x.row(i)[j]).sum::<f64>() / n as f64).collect();
    let mut c = vec![vec![0.0; d]; d];
    for i in 0..n {
        for a in 0..d {
            for b in 0..d {
                c[a][b] += (x.row(i)[a] - mean[a]) * (x.row(i)[b] - mean[b]) / n as f64;
            }
        }
    }
    c
}

fn gaussian(n: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = rng_for(seed, "gauss", 0);
    let data = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::new(vec![n, d], data).unwrap()
}

#[test]
fn explained_variance_matches_jacobi_oracle() {
    let mut x = gaussian(200, 6, 1);
    // Stretch some axes so the spectrum is well separated.
    for i in 0..200 {
        let r = &mut x.data_mut()[i * 6..(i + 1) * 6];
        r[0] *= 3.0;
        r[3] *= 2.0;
        r[1] += 0.5 * r[0];
    }
    let ev = jacobi_eigenvalues(covariance(&x));
    let total: f64 = ev.iter().sum();
    let proj = pca_project(&x, 2).unwrap();
    for k in 0..2 {
        assert!((proj.explained[k] - ev[k] / total).abs() < 1e-9, "{:?} vs {:?}", proj.explained, ev);
        // Variance of each coordinate equals its eigenvalue.
        let var = (0..200).map(|i| proj.coords.row(i)[k].powi(2)).sum::<f64>() / 200.0;
        assert!((var - ev[k]).abs() < 1e-9 * ev[k].max(1.0));
    }
}

#[test]
fn isotropic_data_splits_variance_evenly() {
    let h = 16;
    let x = gaussian(4000, h, 2);
    let proj = pca_project(&x, 2).unwrap();
    let two: f64 = proj.explained.iter().sum();
    // Sample eigenvalues spread around 1; the top two sit a little above 2/H.
    let ev = jacobi_eigenvalues(covariance(&x));
    let total: f64 = ev.iter().sum();
    assert!((two - (ev[0] + ev[1]) / total).abs() < 1e-9);
    assert!((two - 2.0 / h as f64).abs() < 0.05, "{two}");
}

#[test]
fn planar_data_is_reconstructed() {
    let mut rng = rng_for(3, "plane", 0);
    let (u, v) = ([0.3, -1.0, 0.2, 0.7, 0.0], [1.0, 0.4, -0.5, 0.1, 2.0]);
    let mut data = Vec::new();
    for _ in 0..50 {
        let (a, b): (f64, f64) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        for k in 0..5 {
            data.push(1.5 + a * u[k] + b * v[k]);
        }
    }
    let x = Tensor::new(vec![50, 5], data).unwrap();
    let p = pca_project(&x, 2).unwrap();
    for i in 0..50 {
        for k in 0..5 {
            let rec = p.mean[k] + p.coords.row(i)[0] * p.components.row(0)[k] + p.coords.row(i)[1] * p.components.row(1)[k];
            assert!((rec - x.row(i)[k]).abs() < 1e-9);
        }
    }
    // Deterministic with fixed signs.
    assert_eq!(p, pca_project(&x, 2).unwrap());
}

#[test]
fn swap_grid_dimensions_and_headers() {
    let ds = common::small_dataset(2, 2);
    let model = DisMae::new(common::small_model(3, 2)).unwrap();
    let params = common::jittered_params(&model, 4, 0.05);
    let g = swap_grid(&model, &params, &ds, &[0, 3, 5], &[1, 2], 7, 2).unwrap();
    assert_eq!(g.cells.len(), 3);
    assert!(g.cells.iter().all(|r| r.len() == 2));
    let cell = 8 * 2 + 1;
    assert_eq!(g.image.dimensions(), (3 * cell + 1, 4 * cell + 1));
    // Column header 1 is item 1 scaled by 2.
    let px = g.image.get_pixel(1 + cell, 1);
    let expect: Vec<u8> = (0..3).map(|c| (ds.items[1].pixels[c] * 255.0).round() as u8).collect();
    assert_eq!(px.0.to_vec(), expect);
}

#[test]
fn swap_cells_keep_visible_patches() {
    let ds = common::small_dataset(2, 2);
    let model = DisMae::new(common::small_model(3, 2)).unwrap();
    let params = common::jittered_params(&model, 4, 0.05);
    let a = swap_reconstruction(&model, &params, &ds, 0, 4, 1).unwrap();
    let b = swap_reconstruction(&model, &params, &ds, 0, 5, 1).unwrap();
    // Same row item: visible patches identical, masked patches differ with v0.
    let mut same = 0;
    let mut differ = 0;
    for (x, y) in a.data().iter().zip(b.data()) {
        if x == y {
            same += 1;
        } else {
            differ += 1;
        }
    }
    assert!(same >= 2 * 4 * 4 * 3, "{same}");
    assert!(differ > 0);
    assert!(resolve_ids(&ds, &["nope".into()]).is_err());
    assert_eq!(resolve_ids(&ds, &[ds.items[3].id.clone(), "2".into()]).unwrap(), vec![3, 2]);
}

#[test]
fn scores_reject_missing_series() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(tmp.path().join("logs")).unwrap();
    std::fs::write(tmp.path().join("logs/scalars.csv"), "epoch,series,value\n1,l_rec,0.5\n").unwrap();
    assert!(score_series(tmp.path()).is_err());
    let mut s = BTreeMap::new();
    s.insert("a".to_string(), vec![(1, 0.2)]);
    let img = scores_plot(&s, 1.0 / 3.0);
    // The dashed reference passes through y for 1/3.
    let y = (400.0 - 40.0 - 320.0 / 3.0f64).round() as u32;
    let dark = (40..600).filter(|&x| img.get_pixel(x, y).0 == [100, 100, 100]).count();
    assert!(dark > 200 && dark < 400, "{dark}");
}
