use std::ffi::{CStr, CString};
use std::ptr;

use mlrfit_capi::*;
use nalgebra::{DMatrix, DVector};

// Level sizes [6] / [3, 3] / [1, 2, 1, 2], singleton level implied.
const COUNTS: [usize; 3] = [1, 2, 4];
const SIZES: [usize; 7] = [6, 3, 3, 1, 2, 1, 2];
const RANKS: [usize; 4] = [2, 1, 1, 1];
const N: usize = 6;
const WIDTH: usize = 4;

fn fbar() -> Vec<f64> {
    (0..N * WIDTH)
        .map(|i| (0.7 * i as f64 + 0.3).sin())
        .collect()
}

fn d() -> Vec<f64> {
    (0..N).map(|i| 0.5 + 0.1 * i as f64).collect()
}

/// Dense covariance assembled directly from the block structure.
fn dense_sigma() -> DMatrix<f64> {
    let f = DMatrix::from_row_slice(N, WIDTH, &fbar());
    let levels: [&[usize]; 3] = [&[6], &[3, 3], &[1, 2, 1, 2]];
    let mut sigma = DMatrix::from_diagonal(&DVector::from_vec(d()));
    let mut col = 0;
    for (l, sizes) in levels.iter().enumerate() {
        let r = RANKS[l];
        let mut start = 0;
        for &len in sizes.iter() {
            let block = f.view((start, col), (len, r));
            let prod = block * block.transpose();
            let mut target = sigma.view_mut((start, start), (len, len));
            target += prod;
            start += len;
        }
        col += r;
    }
    sigma
}

unsafe fn build() -> *mut MlrModel {
    let mut model = ptr::null_mut();
    let status = mlr_model_from_compressed(
        COUNTS.len(),
        COUNTS.as_ptr(),
        SIZES.as_ptr(),
        RANKS.as_ptr(),
        fbar().as_ptr(),
        d().as_ptr(),
        &mut model,
    );
    assert_eq!(status, MlrStatus::Ok);
    assert!(!model.is_null());
    model
}

fn last_error() -> String {
    let p = mlr_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn matvec_inverse_and_logdet_match_dense() {
    let sigma = dense_sigma();
    let x: Vec<f64> = (0..N).map(|i| 1.0 - 0.3 * i as f64).collect();
    unsafe {
        let model = build();
        assert_eq!(mlr_model_n(model), N);

        let mut y = vec![0.0; N];
        assert_eq!(
            mlr_model_matvec(model, x.as_ptr(), N, y.as_mut_ptr()),
            MlrStatus::Ok
        );
        let expected = &sigma * DVector::from_column_slice(&x);
        for i in 0..N {
            assert!((y[i] - expected[i]).abs() < 1e-12);
        }

        let mut inv = ptr::null_mut();
        assert_eq!(mlr_model_invert(model, &mut inv), MlrStatus::Ok);
        let mut z = vec![0.0; N];
        assert_eq!(
            mlr_inverse_apply(inv, y.as_ptr(), N, z.as_mut_ptr()),
            MlrStatus::Ok
        );
        for i in 0..N {
            assert!((z[i] - x[i]).abs() < 1e-10, "{} vs {}", z[i], x[i]);
        }

        let mut logdet = 0.0;
        assert_eq!(mlr_inverse_logdet(inv, &mut logdet), MlrStatus::Ok);
        let chol = sigma.clone().cholesky().unwrap();
        let dense_logdet: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        assert!((logdet - dense_logdet).abs() < 1e-10);

        mlr_inverse_free(inv);
        mlr_model_free(model);
    }
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.json").to_str().unwrap()).unwrap();
    let x: Vec<f64> = (0..N).map(|i| i as f64).collect();
    unsafe {
        let model = build();
        assert_eq!(mlr_model_save(model, path.as_ptr()), MlrStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(mlr_model_load(path.as_ptr(), &mut loaded), MlrStatus::Ok);
        let mut a = vec![0.0; N];
        let mut b = vec![0.0; N];
        mlr_model_matvec(model, x.as_ptr(), N, a.as_mut_ptr());
        mlr_model_matvec(loaded, x.as_ptr(), N, b.as_mut_ptr());
        assert_eq!(a, b);
        mlr_model_free(model);
        mlr_model_free(loaded);
    }
}

#[test]
fn log_likelihood_matches_dense_formula() {
    let sigma = dense_sigma();
    let samples = 5;
    let y: Vec<f64> = (0..samples * N).map(|i| (1.3 * i as f64).cos()).collect();
    let ym = DMatrix::from_row_slice(samples, N, &y);
    let chol = sigma.clone().cholesky().unwrap();
    let logdet: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    let sinv = chol.inverse();
    let quad: f64 = (0..samples)
        .map(|k| {
            let row = ym.row(k).transpose();
            (row.transpose() * &sinv * &row)[0]
        })
        .sum();
    let expected = -(samples as f64) * N as f64 / 2.0 * (2.0 * std::f64::consts::PI).ln()
        - samples as f64 / 2.0 * logdet
        - quad / 2.0;
    unsafe {
        let model = build();
        let mut ll = 0.0;
        assert_eq!(
            mlr_model_log_likelihood(model, y.as_ptr(), samples, N, &mut ll),
            MlrStatus::Ok
        );
        assert!(
            (ll - expected).abs() < 1e-9 * expected.abs().max(1.0),
            "{ll} vs {expected}"
        );
        mlr_model_free(model);
    }
}

#[test]
fn fit_returns_a_model() {
    let samples = 40;
    let y: Vec<f64> = (0..samples * N)
        .map(|i| (0.37 * i as f64).sin() + 0.2 * (1.9 * i as f64).cos())
        .collect();
    unsafe {
        let mut model = ptr::null_mut();
        let status = mlr_fit(
            COUNTS.len(),
            COUNTS.as_ptr(),
            SIZES.as_ptr(),
            RANKS.as_ptr(),
            y.as_ptr(),
            samples,
            N,
            50,
            1e-8,
            &mut model,
        );
        assert!(matches!(status, MlrStatus::Ok | MlrStatus::NotConverged));
        assert!(!model.is_null());
        assert_eq!(mlr_model_n(model), N);
        mlr_model_free(model);
    }
}

#[test]
fn errors_are_reported() {
    unsafe {
        let mut out = ptr::null_mut();
        assert_eq!(
            mlr_model_load(ptr::null(), &mut out),
            MlrStatus::NullPointer
        );
        assert!(last_error().contains("null"));

        let missing = CString::new("/nonexistent/dir/model.json").unwrap();
        assert_eq!(mlr_model_load(missing.as_ptr(), &mut out), MlrStatus::Io);
        assert!(out.is_null());

        // Rank of the singleton level must be 1.
        let bad_ranks = [2usize, 1, 1, 2];
        let status = mlr_model_from_compressed(
            COUNTS.len(),
            COUNTS.as_ptr(),
            SIZES.as_ptr(),
            bad_ranks.as_ptr(),
            fbar().as_ptr(),
            d().as_ptr(),
            &mut out,
        );
        assert_eq!(status, MlrStatus::InvalidArgument);
        assert!(!last_error().is_empty());

        // Non-nested levels.
        let sizes = [6usize, 3, 3, 2, 2, 2];
        let counts = [1usize, 2, 3];
        let status = mlr_model_from_compressed(
            3,
            counts.as_ptr(),
            sizes.as_ptr(),
            RANKS.as_ptr(),
            fbar().as_ptr(),
            d().as_ptr(),
            &mut out,
        );
        assert_ne!(status, MlrStatus::Ok);

        let model = build();
        let x = [1.0; 3];
        let mut y = [0.0; 3];
        assert_eq!(
            mlr_model_matvec(model, x.as_ptr(), 3, y.as_mut_ptr()),
            MlrStatus::Dimension
        );
        assert_eq!(mlr_model_n(ptr::null()), 0);
        mlr_model_free(model);
        mlr_model_free(ptr::null_mut());
        mlr_inverse_free(ptr::null_mut());
    }
}
