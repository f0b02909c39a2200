use forgeseg_core::forge::{
    build_desk_corpus, composite, corpus::split_counts, enlarge_box, load_split, verify_manifest, BoundingBox,
    CorpusConfig, DatasetManifest, Image, ManipulationMask, SourceTag, Split,
};

fn small() -> CorpusConfig {
    CorpusConfig { samples: 30, image_size: 32, n_train: 20, n_test: 6, ..Default::default() }
}

#[test]
fn grayscale_pair_composites_elementwise() {
    let g = Image::new(1, 2, 1, vec![0.5, 0.5]).unwrap();
    let t = Image::new(1, 2, 1, vec![0.2, 0.2]).unwrap();
    let m = ManipulationMask::new(1, 2, vec![1, 0]).unwrap();
    assert_eq!(composite(&g, &t, &m).unwrap().data, vec![0.5, 0.2]);
}

#[test]
fn crop_enlargement_clips_to_bounds() {
    let b = BoundingBox::new(10.0, 10.0, 100.0, 100.0).unwrap();
    let e = enlarge_box(b, 1.3, (480, 640)).unwrap();
    assert_eq!((e.x, e.y, e.w, e.h), (0.0, 0.0, 125.0, 125.0));
}

#[test]
fn corpus_on_disk_satisfies_manifest_invariants() {
    let dir = tempfile::tempdir().unwrap();
    let m = build_desk_corpus(&small(), 4, dir.path()).unwrap();
    verify_manifest(&m, dir.path()).unwrap();
    assert_eq!(split_counts(&m), (20, 4, 6));
    let reread = DatasetManifest::read(&dir.path().join("manifest.jsonl")).unwrap();
    assert_eq!(reread, m);

    let train = load_split(&m, dir.path(), Split::Train, 3).unwrap();
    assert_eq!(train.len(), 20);
    for s in &train {
        assert_eq!(s.image.shape(), (3, 32, 32));
        assert_eq!(s.label == 1, !s.mask.is_empty());
        let fake_tag = matches!(s.source_tag, SourceTag::SplicedEntire | SourceTag::SplicedPartial);
        assert_eq!(fake_tag, s.label == 1);
    }
    assert_eq!(m.records.iter().filter(|r| r.label == 1).count(), 15);
}

#[test]
fn same_seed_gives_byte_identical_corpora() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = build_desk_corpus(&small(), 9, a.path()).unwrap();
    build_desk_corpus(&small(), 9, b.path()).unwrap();
    let read = |d: &std::path::Path, p: &str| std::fs::read(d.join(p)).unwrap();
    assert_eq!(read(a.path(), "manifest.jsonl"), read(b.path(), "manifest.jsonl"));
    for r in &ma.records {
        assert_eq!(read(a.path(), &r.image_path), read(b.path(), &r.image_path));
        assert_eq!(read(a.path(), &r.mask_path), read(b.path(), &r.mask_path));
    }
    let c = tempfile::tempdir().unwrap();
    build_desk_corpus(&small(), 10, c.path()).unwrap();
    assert_ne!(read(a.path(), &ma.records[1].image_path), read(c.path(), &ma.records[1].image_path));
}

#[test]
fn generated_samples_are_binary_masks_over_unit_range_images() {
    let cfg = small();
    for i in 0..cfg.samples {
        let s = forgeseg_core::forge::generate_sample(&cfg, 2, i).unwrap();
        assert!(s.mask.data.iter().all(|v| *v <= 1));
        assert!(s.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
        s.validate().unwrap();
    }
}
