//! Files written by numpy must parse to the source arrays and re-encode to
//! the same bytes.

use std::path::PathBuf;

use geovocab_core::tensor_io::{parse_npy, write_npy, NpyData, NpyDtype, NpyError, NpyHeader};

fn fixture(name: &str) -> Vec<u8> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/npy").join(name);
    std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn assert_roundtrip(name: &str, dtype: NpyDtype, shape: &[usize], expected: NpyData) {
    let bytes = fixture(name);
    let (header, data) = parse_npy(&bytes).unwrap();
    assert_eq!(header, NpyHeader::new(dtype, shape.to_vec()), "{name}");
    assert_eq!(data, expected, "{name}");
    assert_eq!(write_npy(&header, &data).unwrap(), bytes, "{name} re-encodes byte-identically");
}

#[test]
fn f4_rank3_matches_source_formula() {
    let values = (0..128i64).map(|i| (((i * 37) % 101 - 50) as f32) / 16.0).collect();
    assert_roundtrip("f4_4x4x8.npy", NpyDtype::F4, &[4, 4, 8], NpyData::F4(values));
}

#[test]
fn small_and_empty_shapes() {
    assert_roundtrip("f4_scalar_1.npy", NpyDtype::F4, &[1], NpyData::F4(vec![1.5]));
    assert_roundtrip("f4_empty.npy", NpyDtype::F4, &[0], NpyData::F4(vec![]));
}

#[test]
fn unsigned_label_arrays() {
    assert_roundtrip("u2_2x2.npy", NpyDtype::U2, &[2, 2], NpyData::U2(vec![0, 1, 65535, 2]));
    assert_roundtrip("u1_2x3.npy", NpyDtype::U1, &[2, 3], NpyData::U1((0..6).collect()));
    assert_roundtrip(
        "u2_3x5.npy",
        NpyDtype::U2,
        &[3, 5],
        NpyData::U2((0..15).map(|i| i % 4).collect()),
    );
}

#[test]
fn unsupported_reference_files_are_rejected() {
    assert!(matches!(parse_npy(&fixture("f4_fortran.npy")), Err(NpyError::FortranOrderUnsupported)));
    assert!(matches!(parse_npy(&fixture("f8_2.npy")), Err(NpyError::UnsupportedDtype(d)) if d == "<f8"));
}

#[test]
fn reference_headers_are_64_aligned() {
    for name in ["f4_4x4x8.npy", "f4_scalar_1.npy", "f4_empty.npy", "u2_2x2.npy", "u1_2x3.npy", "u2_3x5.npy"] {
        let bytes = fixture(name);
        let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        assert_eq!((10 + header_len) % 64, 0, "{name}");
    }
}
