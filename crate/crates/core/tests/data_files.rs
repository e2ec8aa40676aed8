use lwi_core::data::{gen_synthetic, load_csv, load_idx, split_classes, SyntheticSpec};
use lwi_core::Error;

fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, 8, 3];
    for d in [n, rows, cols] {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, 8, 1];
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[test]
fn idx_pair_loads_and_splits_into_tasks() {
    let dir = tempfile::tempdir().unwrap();
    let n = 40u8;
    let pixels: Vec<u8> = (0..n as usize * 4).map(|i| (i * 7 % 256) as u8).collect();
    let labels: Vec<u8> = (0..n).map(|i| i % 4).collect();
    let (img, lab) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
    std::fs::write(&img, idx_images(n as u32, 2, 2, &pixels)).unwrap();
    std::fs::write(&lab, idx_labels(&labels)).unwrap();
    let ds = load_idx(&img, &lab).unwrap();
    assert_eq!((ds.len(), ds.width(), ds.class_count), (40, 4, 4));
    assert!(ds.features.iter().all(|&v| (0.0..=1.0).contains(&v)));
    let stream = split_classes(&ds, 2).unwrap();
    assert_eq!(stream.head_sizes(), vec![2, 2]);
    assert_eq!(stream.tasks[1].class_offset, 2);
    assert_eq!(stream.tasks[0].train.len() + stream.tasks[0].test.len(), 20);
}

#[test]
fn idx_count_mismatch_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
    std::fs::write(&img, idx_images(2, 1, 1, &[0, 255])).unwrap();
    std::fs::write(&lab, idx_labels(&[0, 1, 1])).unwrap();
    assert!(matches!(load_idx(&img, &lab), Err(Error::Format { .. })));
}

#[test]
fn csv_file_with_text_labels() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    std::fs::write(&path, "x1,species,x2\n0.5,cat,1\n1.5,dog,2\n2.5,cat,3\n").unwrap();
    let (ds, map) = load_csv(&path, "species").unwrap();
    assert_eq!(map, vec!["cat".to_string(), "dog".to_string()]);
    assert_eq!(ds.labels, vec![0, 1, 0]);
    assert_eq!(ds.features.row(1).to_vec(), vec![1.5, 2.0]);
    std::fs::write(&path, "x1,species\n0.5,cat\nabc,dog\n").unwrap();
    assert!(matches!(load_csv(&path, "species"), Err(Error::Parse { line: 3, .. })));
}

#[test]
fn default_stream_shape() {
    let stream = gen_synthetic(&SyntheticSpec::default()).unwrap();
    assert_eq!(stream.len(), 4);
    assert_eq!(stream.input_width(), 8);
    for (t, task) in stream.tasks.iter().enumerate() {
        assert_eq!(task.class_offset, 2 * t);
        assert_eq!(task.train.len(), 320);
        assert_eq!(task.test.len(), 80);
        assert_eq!(task.test.class_counts(), vec![40, 40]);
    }
    assert_eq!(stream, gen_synthetic(&SyntheticSpec::default()).unwrap());
}
