//! Exercises the C ABI surface the way a foreign binding would: through
//! raw pointers and status codes only.

use std::ffi::{CStr, CString};
use std::ptr;

use filterlab_ffi::{
    flb_filter_delete, flb_filter_free, flb_filter_insert, flb_filter_len, flb_filter_new,
    flb_filter_query, flb_filter_serialize, flb_last_error_message, flb_run_experiment_json,
    flb_space_bits, flb_string_free, flb_version, FlbFilter, FlbStatus,
};

fn new_filter(impl_id: &str, u: u64, n: u64, num: u64, den: u64, seed: u64) -> *mut FlbFilter {
    let id = CString::new(impl_id).unwrap();
    let mut handle: *mut FlbFilter = ptr::null_mut();
    let status = unsafe { flb_filter_new(id.as_ptr(), u, n, num, den, seed, &mut handle) };
    assert_eq!(status, FlbStatus::Ok);
    assert!(!handle.is_null());
    handle
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(flb_version()) };
    assert!(!v.to_str().unwrap().is_empty());
}

#[test]
fn filter_lifecycle_through_the_abi() {
    let f = new_filter("bitmap_exact", 16, 2, 1, 4, 7);
    unsafe {
        assert_eq!(flb_filter_insert(f, 3), FlbStatus::Ok);
        let mut hit = false;
        assert_eq!(flb_filter_query(f, 3, &mut hit), FlbStatus::Ok);
        assert!(hit);
        assert_eq!(flb_filter_query(f, 5, &mut hit), FlbStatus::Ok);
        assert!(!hit);
        let mut len = 0u64;
        assert_eq!(flb_filter_len(f, &mut len), FlbStatus::Ok);
        assert_eq!(len, 1);
        assert_eq!(flb_filter_delete(f, 3), FlbStatus::Ok);
        flb_filter_free(f);
    }
}

#[test]
fn contract_violations_surface_as_status_codes() {
    let f = new_filter("fingerprint", 4096, 16, 1, 16, 1);
    unsafe {
        assert_eq!(flb_filter_insert(f, 9), FlbStatus::Ok);
        assert_eq!(flb_filter_insert(f, 9), FlbStatus::ContractViolation);
        let msg = CStr::from_ptr(flb_last_error_message());
        assert!(msg.to_str().unwrap().contains("duplicate"));
        assert_eq!(flb_filter_delete(f, 10), FlbStatus::ContractViolation);
        let mut hit = false;
        assert_eq!(flb_filter_query(f, 1 << 40, &mut hit), FlbStatus::InvalidArgument);
        flb_filter_free(f);
    }
}

#[test]
fn null_and_unknown_inputs_are_rejected() {
    unsafe {
        let mut handle: *mut FlbFilter = ptr::null_mut();
        let bogus = CString::new("bloom").unwrap();
        assert_eq!(
            flb_filter_new(bogus.as_ptr(), 16, 2, 1, 4, 0, &mut handle),
            FlbStatus::InvalidArgument
        );
        assert_eq!(
            flb_filter_new(ptr::null(), 16, 2, 1, 4, 0, &mut handle),
            FlbStatus::NullPointer
        );
        let id = CString::new("bitmap_exact").unwrap();
        assert_eq!(
            flb_filter_new(id.as_ptr(), 16, 2, 1, 4, 0, ptr::null_mut()),
            FlbStatus::NullPointer
        );
        // invalid params: eps >= 1
        assert_eq!(
            flb_filter_new(id.as_ptr(), 16, 2, 4, 4, 0, &mut handle),
            FlbStatus::InvalidArgument
        );
        flb_filter_free(ptr::null_mut()); // no-op
    }
}

#[test]
fn serialize_two_phase_call() {
    let f = new_filter("bitmap_exact", 16, 2, 1, 4, 7);
    unsafe {
        flb_filter_insert(f, 3);
        let mut needed = 0usize;
        assert_eq!(flb_filter_serialize(f, ptr::null_mut(), 0, &mut needed), FlbStatus::Ok);
        assert_eq!(needed, 8 + 2); // u64 length prefix + 16 bits
        let mut buf = vec![0u8; needed];
        assert_eq!(
            flb_filter_serialize(f, buf.as_mut_ptr(), buf.len(), &mut needed),
            FlbStatus::Ok
        );
        assert_eq!(&buf[..8], &16u64.to_le_bytes());
        assert_eq!(buf[8], 0b0000_1000); // bit 3 set
        let mut small = [0u8; 4];
        assert_eq!(
            flb_filter_serialize(f, small.as_mut_ptr(), small.len(), &mut needed),
            FlbStatus::InvalidArgument
        );
        flb_filter_free(f);
    }
}

#[test]
fn space_bits_matches_library() {
    let id = CString::new("fingerprint").unwrap();
    let mut bits = 0.0f64;
    let status = unsafe { flb_space_bits(id.as_ptr(), 64, 1, 1, 16, &mut bits) };
    assert_eq!(status, FlbStatus::Ok);
    assert!((bits - 17f64.log2()).abs() < 1e-12);
}

#[test]
fn run_experiment_roundtrip_json() {
    let config = r#"{
        "impl_id": "bitmap_exact",
        "universe": 16,
        "capacity": 2,
        "error_rate": {"num": 1, "den": 4},
        "protocol": "warmup",
        "s": 0,
        "trials": 4,
        "base_seed": 0,
        "mode": "ideal"
    }"#;
    let config = CString::new(config).unwrap();
    let mut out: *mut std::ffi::c_char = ptr::null_mut();
    let status = unsafe { flb_run_experiment_json(config.as_ptr(), &mut out) };
    assert_eq!(status, FlbStatus::Ok);
    let json = unsafe { CStr::from_ptr(out) }.to_str().unwrap().to_string();
    unsafe { flb_string_free(out) };
    let parsed: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(parsed["aggregates"]["decode_fraction"], 1.0);
    assert_eq!(parsed["rows"].as_array().unwrap().len(), 4);
}

#[test]
fn generated_header_declares_the_surface() {
    let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("include/filterlab.h");
    let text = std::fs::read_to_string(header).expect("cbindgen header exists after build");
    for symbol in [
        "FlbStatus",
        "FlbFilter",
        "flb_filter_new",
        "flb_filter_query",
        "flb_filter_insert",
        "flb_filter_delete",
        "flb_space_bits",
        "flb_run_experiment_json",
        "flb_string_free",
        "flb_last_error_message",
    ] {
        assert!(text.contains(symbol), "header is missing {symbol}");
    }
}
