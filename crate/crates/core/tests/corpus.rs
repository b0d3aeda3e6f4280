use std::collections::HashSet;

use groundiff::corpus::{
    build_corpus, caption_grounds, filter_eval_set, generate_scene, render_caption, Corpus, CorpusOptions, SceneSpec, Split,
    SplitSizes, Templates, Variability,
};
use groundiff::keywords::KeywordTable;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn spec_with(classes: &[&str], n: [usize; 2]) -> SceneSpec {
    SceneSpec {
        object_classes: classes.iter().map(|s| s.to_string()).collect(),
        objects_per_image: n,
        ..SceneSpec::default()
    }
}

#[test]
fn single_circle_scene() {
    let spec = spec_with(&["circle"], [1, 1]);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let scene = generate_scene(&spec, &mut rng).unwrap();
    assert_eq!(scene.objects.len(), 1);
    assert_eq!(scene.objects[0].class, "circle");
    assert!(scene.objects[0].mask.area() > 0);
}

#[test]
fn same_seed_same_bytes() {
    let spec = SceneSpec::default();
    let a = generate_scene(&spec, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
    let b = generate_scene(&spec, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
    assert_eq!(a.image.data, b.image.data);
    assert_eq!(a, b);
}

#[test]
fn pairs_never_occlude() {
    let spec = spec_with(&["circle", "square", "triangle", "cross", "ring", "bar", "blob", "wedge"], [2, 2]);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut max_iou = 0.0f64;
    for _ in 0..1000 {
        let s = generate_scene(&spec, &mut rng).unwrap();
        assert_eq!(s.objects.len(), 2);
        max_iou = max_iou.max(s.objects[0].mask.iou(&s.objects[1].mask));
        for o in &s.objects {
            assert_eq!(o.mask.bbox(), Some(o.bbox));
            let [x0, y0, x1, y1] = o.bbox;
            assert!(x1 - x0 >= 6 && y1 - y0 >= 6);
        }
    }
    assert!(max_iou < 0.5, "max IoU {max_iou}");
}

#[test]
fn overcrowded_spec_fails_to_place() {
    let spec = SceneSpec { image_size: 32, size_range: [16, 16], objects_per_image: [30, 30], ..SceneSpec::default() };
    let err = generate_scene(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
    assert!(err.to_string().contains("100 attempts"), "{err}");
}

#[test]
fn invalid_specs_are_rejected() {
    assert!(SceneSpec { image_size: 48, ..SceneSpec::default() }.validate().is_err());
    assert!(SceneSpec { image_size: 16, ..SceneSpec::default() }.validate().is_err());
    assert!(spec_with(&["circle"], [0, 2]).validate().is_err());
    assert!(spec_with(&["hexagon"], [1, 2]).validate().is_err());
    let text = toml::to_string(&SceneSpec::default()).unwrap();
    assert_eq!(SceneSpec::from_toml(&text).unwrap(), SceneSpec::default());
}

#[test]
fn high_captions_are_diverse_and_grounded() {
    let spec = spec_with(&["circle"], [1, 1]);
    let scene = generate_scene(&spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let traits: Vec<_> = scene.objects.iter().map(|o| o.traits(64)).collect();
    let (t, k) = (Templates::default(), KeywordTable::default());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut seen = HashSet::new();
    for _ in 0..10_000 {
        let c = render_caption(&traits, Variability::High, &t, &k, &mut rng).unwrap();
        assert!(k.mentions(&c, "circle"), "{c}");
        seen.insert(c);
    }
    assert!(seen.len() >= 1000, "only {} distinct captions", seen.len());
}

#[test]
fn filter_examples() {
    let k = KeywordTable::default();
    let rec = |caption: &str| groundiff::corpus::SampleRecord {
        id: "x".into(),
        image_path: String::new(),
        caption: caption.into(),
        variability: Variability::High,
        split: Split::Test,
        objects: vec![groundiff::corpus::ObjectRecord {
            class: "circle".into(),
            bbox: [0, 0, 1, 1],
            mask_path: String::new(),
            color: "red".into(),
            size_px: 12,
        }],
    };
    assert!(caption_grounds(&rec("a red circle near the top"), &k));
    assert!(!caption_grounds(&rec("two round things"), &k));
}

#[test]
fn corpus_round_trip_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let sizes = SplitSizes { train: 40, val: 5, test: 5 };
    let opts = CorpusOptions { variability: Variability::Middle, ..CorpusOptions::default() };
    let a = dir.path().join("a");
    let m = build_corpus(&SceneSpec::default(), sizes, 9, &opts, &a).unwrap();
    assert_eq!(m.samples.len(), 50);
    assert_eq!(m.split(Split::Train).count(), 40);
    assert_eq!(m.split(Split::Val).count(), 5);

    // existing directory needs force
    assert!(build_corpus(&SceneSpec::default(), sizes, 9, &opts, &a).is_err());
    let b = dir.path().join("b");
    let m2 = build_corpus(&SceneSpec::default(), sizes, 9, &opts, &b).unwrap();
    assert_eq!(m.hash(), m2.hash());
    for rec in &m.samples {
        let ia = std::fs::read(a.join(&rec.image_path)).unwrap();
        let ib = std::fs::read(b.join(&rec.image_path)).unwrap();
        assert_eq!(ia, ib);
    }

    let corpus = Corpus::open(&a).unwrap();
    assert_eq!(corpus.manifest, m);
    for rec in &corpus.manifest.samples {
        let s = corpus.load(rec).unwrap();
        let regen = groundiff::corpus::generate_sample(&SceneSpec::default(), &sizes, 9, index_of(&rec.id), &opts).unwrap();
        assert_eq!(s, regen);
        for o in &s.objects {
            assert_eq!(o.mask.bbox(), Some(o.bbox));
        }
    }
    let forced = CorpusOptions { force: true, ..opts };
    build_corpus(&SceneSpec::default(), sizes, 9, &forced, &a).unwrap();
}

fn index_of(id: &str) -> usize {
    id.rsplit('-').next().unwrap().parse().unwrap()
}

#[test]
fn empty_fraction_and_filtering_on_full_split() {
    let dir = tempfile::tempdir().unwrap();
    let sizes = SplitSizes { train: 5000, val: 500, test: 500 };
    let opts = CorpusOptions { variability: Variability::Low, ..CorpusOptions::default() };
    let m = build_corpus(&SceneSpec::default(), sizes, 2024, &opts, dir.path().join("c").as_path()).unwrap();
    assert_eq!(m.samples.len(), 6000);
    let empties = m.split(Split::Train).filter(|s| s.objects.is_empty()).count();
    assert!((475..=525).contains(&empties), "{empties} empty scenes");
    for s in m.split(Split::Train).filter(|s| s.objects.is_empty()) {
        assert_eq!(s.caption, "no finding");
    }
    for s in m.samples.iter().filter(|s| !s.objects.is_empty()) {
        let names: Vec<_> = s.objects.iter().map(|o| o.class.as_str()).collect();
        assert_eq!(s.caption, names.join(", "));
    }
    let corpus = Corpus::open(&dir.path().join("c")).unwrap();
    let kept = filter_eval_set(&corpus, Split::Test, &KeywordTable::default()).unwrap();
    assert_eq!(kept.len(), 500);
}

#[test]
fn middle_and_high_captions_always_ground() {
    let (t, k) = (Templates::default(), KeywordTable::default());
    let spec = SceneSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for v in Variability::ALL {
        for _ in 0..500 {
            let scene = generate_scene(&spec, &mut rng).unwrap();
            let traits: Vec<_> = scene.objects.iter().map(|o| o.traits(64)).collect();
            let c = render_caption(&traits, v, &t, &k, &mut rng).unwrap();
            for o in &scene.objects {
                assert!(k.mentions(&c, &o.class), "{v}: {c} misses {}", o.class);
            }
        }
    }
}
