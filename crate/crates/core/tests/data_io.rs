use std::collections::HashSet;
use std::path::Path;

use conmae::data::{self, Split, SyntheticSpec};
use conmae::imagecore::{ContourConfig, ContourExtractor, Image};
use conmae::Error;

fn small() -> SyntheticSpec {
    SyntheticSpec {
        num_identities: 6,
        views_per_identity: 4,
        num_cameras: 2,
        image_size: 32,
        ..SyntheticSpec::default()
    }
}

fn extractor() -> ContourExtractor {
    ContourExtractor::new(ContourConfig::default())
}

fn files(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(root.join("images"))
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    out.push(("manifest".into(), std::fs::read(root.join(data::MANIFEST)).unwrap()));
    out.sort();
    out
}

#[test]
fn default_sized_set_has_160_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        num_identities: 20,
        ..SyntheticSpec::default()
    };
    let records = data::generate_synthetic(&spec, tmp.path(), &extractor()).unwrap();
    assert_eq!(records.len(), 160);
    let ds = data::load_dataset(tmp.path()).unwrap();
    assert_eq!(ds.records, records);
    assert_eq!(ds.indices(Split::Train).len(), 80);
    assert_eq!(ds.indices(Split::Query).len(), 10);
    assert_eq!(ds.indices(Split::Gallery).len(), 70);
    let img = ds.image(0).unwrap();
    assert_eq!((img.height(), img.width(), img.channels()), (64, 64, 3));
}

#[test]
fn generation_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    data::generate_synthetic(&small(), a.path(), &extractor()).unwrap();
    data::generate_synthetic(&small(), b.path(), &extractor()).unwrap();
    assert_eq!(files(a.path()), files(b.path()));

    let c = tempfile::tempdir().unwrap();
    let other = SyntheticSpec { seed: 1, ..small() };
    data::generate_synthetic(&other, c.path(), &extractor()).unwrap();
    assert_ne!(files(a.path()), files(c.path()));
}

#[test]
fn splits_respect_the_protocol() {
    let tmp = tempfile::tempdir().unwrap();
    let records = data::generate_synthetic(&small(), tmp.path(), &extractor()).unwrap();
    let ids = |s: Split| -> HashSet<usize> { records.iter().filter(|r| r.split == s).map(|r| r.identity).collect() };
    assert!(ids(Split::Query).is_subset(&ids(Split::Gallery)));
    assert!(ids(Split::Train).is_disjoint(&ids(Split::Gallery)));
    let cams: HashSet<usize> = records.iter().map(|r| r.camera).collect();
    assert_eq!(cams.len(), 2);
}

#[test]
fn missing_image_names_the_record() {
    let tmp = tempfile::tempdir().unwrap();
    let records = data::generate_synthetic(&small(), tmp.path(), &extractor()).unwrap();
    std::fs::remove_file(tmp.path().join(&records[5].path)).unwrap();
    match data::load_dataset(tmp.path()) {
        Err(Error::Dataset { path, message }) => {
            assert_eq!(path, records[5].path);
            assert!(message.contains("record 5"), "{message}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn schema_violations_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join(data::MANIFEST), r#"[{"path": "a.png", "identity": 0}]"#).unwrap();
    assert!(matches!(data::load_dataset(tmp.path()), Err(Error::Dataset { .. })));

    // A query identity that never appears in the gallery.
    Image::zeros(8, 8, 3).save(tmp.path().join("q.png")).unwrap();
    std::fs::write(
        tmp.path().join(data::MANIFEST),
        r#"[{"path": "q.png", "identity": 3, "camera": 0, "split": "query"}]"#,
    )
    .unwrap();
    let err = data::load_dataset(tmp.path()).unwrap_err().to_string();
    assert!(err.contains("no gallery image"), "{err}");
}

#[test]
fn external_folder_with_user_manifest() {
    // Someone else's layout: flat folder, own file names, manifest given by path.
    let tmp = tempfile::tempdir().unwrap();
    let spec = small();
    let mut manifest = Vec::new();
    let mut expected = Vec::new();
    for (k, (id, view)) in [(3, 0), (3, 1), (4, 0), (4, 2), (0, 1)].into_iter().enumerate() {
        let (img, _) = data::render(&spec, id, view);
        let name = format!("car-{k}.png");
        img.save(tmp.path().join(&name)).unwrap();
        let split = match (id, view) {
            (0, _) => "train",
            (_, 0) => "query",
            _ => "gallery",
        };
        manifest.push(serde_json::json!({"path": name, "identity": id, "camera": view % 2, "split": split}));
        expected.push(img);
    }
    let manifest_path = tmp.path().join("labels.json");
    std::fs::write(&manifest_path, serde_json::to_string(&manifest).unwrap()).unwrap();

    let ds = data::load_dataset(&manifest_path).unwrap();
    assert_eq!(ds.records.len(), 5);
    let (query, meta) = ds.load_split(Split::Query).unwrap();
    assert_eq!(meta.iter().map(|m| m.identity).collect::<Vec<_>>(), [3, 4]);
    // PNG stores 8 bits, so compare at that resolution.
    for (got, want) in query.iter().zip([&expected[0], &expected[2]]) {
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
