use std::fs;
use std::path::Path;

use flowcast::scenes::{
    generate, generate_dataset, read_dataset, read_flo, read_pgm, read_ppm, read_sequence, write_dataset,
    write_flo, write_pgm, write_ppm, write_sequence, SceneSpec,
};
use flowcast::segmap::LabelMap;
use flowcast::{Error, Tensor};
use proptest::prelude::*;

fn small_spec(seed: u64) -> SceneSpec {
    SceneSpec {
        seed,
        width: 48,
        height: 32,
        num_frames: 4,
        sprites: 4,
        sprite_size: (3, 5),
        ..SceneSpec::default()
    }
}

fn format_offset(err: Error) -> u64 {
    match err {
        Error::Format { offset, .. } => offset,
        other => panic!("expected a format error, got {other}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn flo_round_trip_is_lossless(h in 1usize..6, w in 1usize..6, values in proptest::collection::vec(-1e3f32..1e3, 50)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.flo");
        let data: Vec<f64> = (0..2 * h * w).map(|k| f64::from(values[k % values.len()])).collect();
        let flow = Tensor::from_vec(&[1, 2, h, w], data).unwrap();
        write_flo(&path, &flow).unwrap();
        prop_assert_eq!(read_flo(&path).unwrap(), flow);
        prop_assert_eq!(fs::metadata(&path).unwrap().len(), 12 + 8 * (h * w) as u64);
    }

    #[test]
    fn ppm_round_trip_is_lossless(h in 1usize..6, w in 1usize..6, bytes in proptest::collection::vec(any::<u8>(), 75)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.ppm");
        let data: Vec<f64> = (0..3 * h * w).map(|k| f64::from(bytes[k]) / 255.0).collect();
        let frame = Tensor::from_vec(&[3, h, w], data).unwrap();
        write_ppm(&path, &frame).unwrap();
        prop_assert_eq!(read_ppm(&path).unwrap(), frame);
    }

    #[test]
    fn pgm_round_trip_is_lossless(h in 1usize..6, w in 1usize..6, labels in proptest::collection::vec(any::<u8>(), 25)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.pgm");
        let map = LabelMap::new(h, w, labels[..h * w].to_vec()).unwrap();
        write_pgm(&path, &map).unwrap();
        prop_assert_eq!(read_pgm(&path).unwrap(), map);
    }
}

#[test]
fn headers_are_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let ppm = dir.path().join("a.ppm");
    write_ppm(&ppm, &Tensor::full(&[3, 2, 3], 1.0)).unwrap();
    let bytes = fs::read(&ppm).unwrap();
    assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
    assert_eq!(bytes.len(), 11 + 18);
    let flo = dir.path().join("a.flo");
    write_flo(&flo, &Tensor::zeros(&[1, 2, 2, 3])).unwrap();
    let bytes = fs::read(&flo).unwrap();
    assert_eq!(&bytes[..4], b"PIEH");
    assert_eq!(&bytes[4..12], &[3, 0, 0, 0, 2, 0, 0, 0]);
}

#[test]
fn pnm_comments_are_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.pgm");
    fs::write(&path, b"P5\n# made by hand\n2 1\n255\n\x03\x04").unwrap();
    assert_eq!(read_pgm(&path).unwrap().labels(), &[3, 4]);
}

#[test]
fn format_errors_report_byte_offsets() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.path().join(name);
        fs::write(&p, bytes).unwrap();
        p
    };
    assert_eq!(format_offset(read_ppm(&write("m.ppm", b"P5\n1 1\n255\n\0")).unwrap_err()), 0);
    assert_eq!(format_offset(read_ppm(&write("v.ppm", b"P6\n1 1\n65535\n")).unwrap_err()), 7);
    assert_eq!(format_offset(read_ppm(&write("t.ppm", b"P6\n2 1\n255\n\0\0\0")).unwrap_err()), 14);
    assert_eq!(format_offset(read_pgm(&write("x.pgm", b"P5\nx 1\n255\n")).unwrap_err()), 3);
    assert_eq!(format_offset(read_flo(&write("m.flo", b"PIEX")).unwrap_err()), 0);
    let mut neg = b"PIEH".to_vec();
    neg.extend_from_slice(&(-1i32).to_le_bytes());
    neg.extend_from_slice(&1i32.to_le_bytes());
    assert_eq!(format_offset(read_flo(&write("n.flo", &neg)).unwrap_err()), 4);
    let mut short = b"PIEH".to_vec();
    short.extend_from_slice(&1i32.to_le_bytes());
    short.extend_from_slice(&1i32.to_le_bytes());
    short.extend_from_slice(&[0; 4]);
    assert_eq!(format_offset(read_flo(&write("s.flo", &short)).unwrap_err()), 16);
}

#[test]
fn sequence_round_trip_is_exact() {
    let seq = generate(&small_spec(3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_sequence(&seq, dir.path()).unwrap();
    assert_eq!(read_sequence(dir.path()).unwrap(), seq);
    let manifest = fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    assert_eq!(manifest.lines().count(), 4 + 4 + 3 + 3);
}

#[test]
fn dataset_round_trip_and_manifest_errors() {
    let dataset = generate_dataset(&small_spec(1), 2, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&dataset, dir.path()).unwrap();
    assert_eq!(read_dataset(dir.path()).unwrap(), dataset);

    let index = dir.path().join("dataset.txt");
    fs::write(&index, "train/seq_0000\nelsewhere/seq_0000\n").unwrap();
    assert_eq!(format_offset(read_dataset(dir.path()).unwrap_err()), 15);

    let missing = read_dataset(Path::new("/nonexistent/data")).unwrap_err();
    assert!(missing.to_string().contains("dataset.txt"), "{missing}");
}

#[test]
fn truncated_sequence_is_rejected() {
    let seq = generate(&small_spec(2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_sequence(&seq, dir.path()).unwrap();
    let manifest = dir.path().join("manifest.txt");
    let text = fs::read_to_string(&manifest).unwrap();
    let kept: String = text.lines().filter(|l| *l != "flow_002.flo").map(|l| format!("{l}\n")).collect();
    fs::write(&manifest, kept).unwrap();
    assert!(matches!(read_sequence(dir.path()), Err(Error::Format { .. })));
}
