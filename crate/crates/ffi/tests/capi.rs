use std::ffi::{CStr, CString};
use std::ptr;

use fpq_capi::*;

fn tensor(shape: &[usize], data: &[f64]) -> *mut FpqTensor {
    let mut t = ptr::null_mut();
    let st = unsafe { fpq_tensor_new(shape.as_ptr(), shape.len(), data.as_ptr(), data.len(), &mut t) };
    assert_eq!(st, FpqStatus::Ok);
    t
}

fn last_error() -> String {
    let p = fpq_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn ramp(n: usize) -> Vec<f64> {
    (0..n).map(|i| ((i * 37 % 101) as f64 - 50.0) / 17.0).collect()
}

#[test]
fn quantize_dequantize_round_trip() {
    let data = ramp(64);
    let t = tensor(&[4, 16], &data);
    let spec = CString::new("fp8:e4m3:group16").unwrap();
    let mut q = ptr::null_mut();
    unsafe {
        assert_eq!(fpq_quantize(t, spec.as_ptr(), &mut q), FpqStatus::Ok);
        assert_eq!(fpq_quantized_len(q), 64);
        assert_eq!(fpq_quantized_scale_count(q), 4);
        let mut deq = ptr::null_mut();
        assert_eq!(fpq_dequantize(q, &mut deq), FpqStatus::Ok);
        let mut shape = [0usize; 2];
        assert_eq!(fpq_tensor_shape(deq, shape.as_mut_ptr(), 2), FpqStatus::Ok);
        assert_eq!(shape, [4, 16]);
        let mut out = vec![0.0; 64];
        assert_eq!(fpq_tensor_data(deq, out.as_mut_ptr(), 64), FpqStatus::Ok);
        for (a, b) in data.iter().zip(&out) {
            assert!((a - b).abs() <= a.abs() / 16.0 + 1e-12, "{a} vs {b}");
        }
        let mut s = ptr::null_mut();
        assert_eq!(fpq_quantized_spec(q, &mut s), FpqStatus::Ok);
        assert_eq!(CStr::from_ptr(s).to_str().unwrap(), "fp8:e4m3:group16");
        fpq_string_free(s);
        fpq_tensor_free(deq);
        fpq_quantized_free(q);
        fpq_tensor_free(t);
    }
}

#[test]
fn errors_map_to_status_codes() {
    let t = tensor(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let bad = CString::new("fp5:e9m9:tensor").unwrap();
    let mut q = ptr::null_mut();
    unsafe {
        assert_eq!(fpq_quantize(t, bad.as_ptr(), &mut q), FpqStatus::InvalidSpec);
        assert!(q.is_null());
        assert!(!last_error().is_empty());
        assert_eq!(fpq_quantize(ptr::null(), bad.as_ptr(), &mut q), FpqStatus::NullPointer);
        assert!(last_error().contains("tensor"));

        let mut small = [0.0; 2];
        assert_eq!(fpq_tensor_data(t, small.as_mut_ptr(), 2), FpqStatus::InvalidArgument);

        let mut bad_t = ptr::null_mut();
        let shape = [3usize, 3];
        let data = [0.0; 4];
        assert_eq!(
            fpq_tensor_new(shape.as_ptr(), 2, data.as_ptr(), 4, &mut bad_t),
            FpqStatus::ShapeMismatch
        );

        let missing = CString::new("/nonexistent/dir/w.fpq").unwrap();
        let mut r = ptr::null_mut();
        assert_eq!(fpq_tensor_read(missing.as_ptr(), &mut r), FpqStatus::Io);
        fpq_tensor_free(t);
    }
}

#[test]
fn null_handles_are_tolerated_by_accessors_and_free() {
    unsafe {
        assert_eq!(fpq_tensor_len(ptr::null()), 0);
        assert_eq!(fpq_quantized_len(ptr::null()), 0);
        assert_eq!(fpq_lorc_rank(ptr::null()), 0);
        assert!(fpq_lorc_captured_energy(ptr::null()).is_nan());
        fpq_tensor_free(ptr::null_mut());
        fpq_quantized_free(ptr::null_mut());
        fpq_hessian_free(ptr::null_mut());
        fpq_lorc_free(ptr::null_mut());
        fpq_string_free(ptr::null_mut());
    }
    let v = unsafe { CStr::from_ptr(fpq_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn gptq_cast_and_lorc_pipeline() {
    let (rows, cols, samples) = (8, 64, 32);
    let w = tensor(&[rows, cols], &ramp(rows * cols));
    let x: Vec<f64> = (0..samples * cols)
        .map(|i| ((i * 13 % 29) as f64 - 14.0) / 7.0)
        .collect();
    let x = tensor(&[samples, cols], &x);
    let spec = CString::new("fp4:e2m1:group32:m2").unwrap();
    unsafe {
        let mut h = ptr::null_mut();
        assert_eq!(fpq_hessian_build(x, 0.01, &mut h), FpqStatus::Ok);
        let mut q = ptr::null_mut();
        assert_eq!(fpq_gptq_quantize(w, h, spec.as_ptr(), 32, &mut q), FpqStatus::Ok);

        let (mut sat, mut under) = (usize::MAX, usize::MAX);
        let mut q8 = ptr::null_mut();
        assert_eq!(fpq_cast_to_fp8(q, &mut q8, &mut sat, &mut under), FpqStatus::Ok);
        assert_eq!((sat, under), (0, 0));
        let (mut a, mut b) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(fpq_dequantize(q, &mut a), FpqStatus::Ok);
        assert_eq!(fpq_dequantize(q8, &mut b), FpqStatus::Ok);
        let n = rows * cols;
        let (mut va, mut vb) = (vec![0.0; n], vec![0.0; n]);
        fpq_tensor_data(a, va.as_mut_ptr(), n);
        fpq_tensor_data(b, vb.as_mut_ptr(), n);
        assert_eq!(va, vb);

        let mut f = ptr::null_mut();
        assert_eq!(fpq_lorc_factorize(w, q, 4, &mut f), FpqStatus::Ok);
        assert_eq!(fpq_lorc_rank(f), 4);
        let e = fpq_lorc_captured_energy(f);
        assert!((0.0..=1.0).contains(&e));
        let mut comp = ptr::null_mut();
        assert_eq!(fpq_lorc_apply(q, f, &mut comp), FpqStatus::Ok);

        let mut report = ptr::null_mut();
        assert_eq!(fpq_error_report_json(w, q, x, &mut report), FpqStatus::Ok);
        let json: serde_json::Value = serde_json::from_str(CStr::from_ptr(report).to_str().unwrap()).unwrap();
        assert!(json["proxy_loss"].as_f64().unwrap() > 0.0);
        fpq_string_free(report);

        for t in [a, b, comp, w, x] {
            fpq_tensor_free(t);
        }
        fpq_quantized_free(q8);
        fpq_quantized_free(q);
        fpq_lorc_free(f);
        fpq_hessian_free(h);
    }
}

#[test]
fn files_round_trip_through_handles() {
    let dir = tempfile::tempdir().unwrap();
    let w = tensor(&[4, 32], &ramp(128));
    let spec = CString::new("int4:sym:group32").unwrap();
    let wp = CString::new(dir.path().join("w.fpq").to_str().unwrap()).unwrap();
    let qp = CString::new(dir.path().join("w.qt").to_str().unwrap()).unwrap();
    let lp = CString::new(dir.path().join("w.lorc").to_str().unwrap()).unwrap();
    unsafe {
        assert_eq!(fpq_tensor_write(w, wp.as_ptr()), FpqStatus::Ok);
        let mut w2 = ptr::null_mut();
        assert_eq!(fpq_tensor_read(wp.as_ptr(), &mut w2), FpqStatus::Ok);
        assert_eq!(fpq_tensor_len(w2), 128);

        let mut q = ptr::null_mut();
        assert_eq!(fpq_quantize(w, spec.as_ptr(), &mut q), FpqStatus::Ok);
        assert_eq!(fpq_quantized_write(q, qp.as_ptr()), FpqStatus::Ok);
        let mut q2 = ptr::null_mut();
        assert_eq!(fpq_quantized_read(qp.as_ptr(), &mut q2), FpqStatus::Ok);
        let (mut c1, mut c2) = (vec![0u8; 128], vec![0u8; 128]);
        fpq_quantized_codes(q, c1.as_mut_ptr(), 128);
        fpq_quantized_codes(q2, c2.as_mut_ptr(), 128);
        assert_eq!(c1, c2);
        let (mut s1, mut s2) = (vec![0.0; 4], vec![0.0; 4]);
        fpq_quantized_scales(q, s1.as_mut_ptr(), 4);
        fpq_quantized_scales(q2, s2.as_mut_ptr(), 4);
        assert_eq!(s1, s2);

        let mut f = ptr::null_mut();
        assert_eq!(fpq_lorc_factorize(w, q, 2, &mut f), FpqStatus::Ok);
        assert_eq!(fpq_lorc_write(f, lp.as_ptr()), FpqStatus::Ok);
        let mut f2 = ptr::null_mut();
        assert_eq!(fpq_lorc_read(lp.as_ptr(), &mut f2), FpqStatus::Ok);
        assert_eq!(fpq_lorc_rank(f2), 2);

        // Flip a payload byte: the checksum must catch it.
        let path = dir.path().join("w.fpq");
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&path, bytes).unwrap();
        let mut bad = ptr::null_mut();
        assert_eq!(fpq_tensor_read(wp.as_ptr(), &mut bad), FpqStatus::Format);

        let mut summary = ptr::null_mut();
        assert_eq!(fpq_tensor_summary_json(w, &mut summary), FpqStatus::Ok);
        let v: serde_json::Value = serde_json::from_str(CStr::from_ptr(summary).to_str().unwrap()).unwrap();
        assert!(v.get("excess_kurtosis").is_some());
        fpq_string_free(summary);

        fpq_lorc_free(f);
        fpq_lorc_free(f2);
        fpq_quantized_free(q);
        fpq_quantized_free(q2);
        fpq_tensor_free(w);
        fpq_tensor_free(w2);
    }
}
