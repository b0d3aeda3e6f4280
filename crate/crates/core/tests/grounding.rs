use groundiff::atlas::{AtlasMeta, AttentionAtlas};
use groundiff::corpus::{generate_sample, CorpusOptions, Sample, SceneObject, SceneSpec, Split, SplitSizes, Variability};
use groundiff::grounding::*;
use groundiff::imaging::{Mask, RgbImage};
use groundiff::keywords::KeywordTable;
use groundiff::text::{build_vocab, TokenSeq, VocabConfig, Vocabulary, SOS};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const T: usize = 16;

fn vocab() -> Vocabulary {
    let caps = vec!["a red circle and a blue square with a wedge here"; 12];
    build_vocab(&caps, &VocabConfig::default()).unwrap()
}

fn random_atlas(seed: u64, z: usize) -> AttentionAtlas {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = z * z;
    let mut maps = vec![0.0f32; T * n];
    for p in 0..n {
        let w: Vec<f32> = (0..T).map(|_| rng.random::<f32>() + 0.01).collect();
        let s: f32 = w.iter().sum();
        for t in 0..T {
            maps[t * n + p] = w[t] / s;
        }
    }
    let meta = AtlasMeta {
        n_layers: 1,
        noise_levels: vec![10],
        caption: String::new(),
        token_ids: vec![],
        word_spans: vec![],
        words: vec![],
        n_real: 0,
        n_maps: 1,
    };
    AttentionAtlas { t_max: T, z, maps, meta }
}

#[test]
fn keyword_path_picks_the_class_word() {
    let v = vocab();
    let t = KeywordTable::default();
    let seq = v.tokenize("a red circle", T).unwrap();
    let (toks, src) = select_tokens(&seq, "circle", &t);
    assert_eq!(src, TokenSource::Keyword);
    assert_eq!(toks, vec![3]);
}

#[test]
fn fallback_uses_every_word_token() {
    let v = vocab();
    let t = KeywordTable::default();
    let seq = v.tokenize("two shapes here", T).unwrap();
    let (toks, src) = select_tokens(&seq, "circle", &t);
    assert_eq!(src, TokenSource::FallbackAllWords);
    let expected: Vec<usize> = (1..seq.n_real - 1).collect();
    assert_eq!(toks, expected);
    assert!(!toks.contains(&0));
}

#[test]
fn split_word_selects_all_its_pieces() {
    let v = vocab();
    let t = KeywordTable::default();
    let seq: TokenSeq = v.tokenize("a wedge, here", T).unwrap();
    assert!(seq.word_spans[1].len() >= 2);
    let (toks, src) = select_tokens(&seq, "wedge", &t);
    assert_eq!(src, TokenSource::Keyword);
    assert_eq!(toks, seq.word_spans[1].clone().collect::<Vec<_>>());
    assert_eq!(seq.ids[0], SOS);
}

#[test]
fn heatmap_means() {
    let a = random_atlas(1, 4);
    assert_eq!(class_heatmap(&a, &[5]).unwrap(), a.token_map(5));
    let pair = class_heatmap(&a, &[2, 7]).unwrap();
    for (i, v) in pair.iter().enumerate() {
        let want = (a.token_map(2)[i] + a.token_map(7)[i]) / 2.0;
        assert!((v - want).abs() < 1e-7);
    }
    let all: Vec<usize> = (0..T).collect();
    for v in class_heatmap(&a, &all).unwrap() {
        assert!((v - 1.0 / T as f32).abs() < 1e-5);
    }
    assert!(class_heatmap(&a, &[]).is_err());
    assert!(class_heatmap(&a, &[T]).is_err());
}

proptest! {
    #[test]
    fn heatmap_is_linear(s1 in any::<u64>(), s2 in any::<u64>(), alpha in 0.0f32..1.0) {
        let (a, b) = (random_atlas(s1, 4), random_atlas(s2, 4));
        let mut mix = a.clone();
        for (m, (x, y)) in mix.maps.iter_mut().zip(a.maps.iter().zip(&b.maps)) {
            *m = alpha * x + (1.0 - alpha) * y;
        }
        let toks = [1usize, 4, 9];
        let (ha, hb, hm) = (class_heatmap(&a, &toks).unwrap(), class_heatmap(&b, &toks).unwrap(), class_heatmap(&mix, &toks).unwrap());
        for i in 0..hm.len() {
            prop_assert!((hm[i] - (alpha * ha[i] + (1.0 - alpha) * hb[i])).abs() < 1e-6);
        }
    }
}

fn object(class: &str, mask: Mask) -> SceneObject {
    let bbox = mask.bbox().unwrap();
    SceneObject { class: class.into(), color: "red".into(), size_px: 12, mask, bbox }
}

fn sample(objects: Vec<SceneObject>, caption: &str) -> Sample {
    Sample {
        id: "test-00001".into(),
        image: RgbImage::new(64, 64),
        objects,
        caption: caption.into(),
        variability: Variability::Low,
        split: Split::Test,
    }
}

#[test]
fn box_union_area() {
    let s = sample(vec![object("square", Mask::from_bbox(8, 8, [0, 0, 4, 4])), object("square", Mask::from_bbox(8, 8, [2, 2, 6, 6]))], "");
    assert_eq!(union_masks(&s, "square").unwrap().area(), 28);
    let one = sample(vec![object("circle", Mask::from_bbox(8, 8, [1, 1, 3, 3]))], "");
    assert_eq!(union_masks(&one, "circle").unwrap(), one.objects[0].mask);
    assert!(union_masks(&one, "ring").is_none());
}

#[test]
fn cases_per_distinct_class() {
    let v = vocab();
    let t = KeywordTable::default();
    let a = random_atlas(2, 16);
    let two = sample(
        vec![object("circle", Mask::from_bbox(64, 64, [0, 0, 10, 10])), object("square", Mask::from_bbox(64, 64, [30, 30, 44, 44]))],
        "circle, square",
    );
    let seq = v.tokenize(&two.caption, T).unwrap();
    let cases = split_cases(&two, &seq, &a, &t).unwrap();
    assert_eq!(cases.len(), 2);
    assert!(cases.iter().all(|c| c.token_source == TokenSource::Keyword && !c.mask.is_empty() && c.mask.width == 16));

    let circles = sample(
        vec![object("circle", Mask::from_bbox(64, 64, [0, 0, 10, 10])), object("circle", Mask::from_bbox(64, 64, [30, 30, 44, 44]))],
        "circle, circle",
    );
    let seq = v.tokenize(&circles.caption, T).unwrap();
    let cases = split_cases(&circles, &seq, &a, &t).unwrap();
    assert_eq!(cases.len(), 1);
    let m = &cases[0].mask;
    // pixels 0..10 fall in cells 0..=2, pixels 30..44 in cells 7..=10
    assert_eq!(m.area(), 9 + 16);
}

#[test]
fn test_split_case_count_matches_distinct_classes() {
    let spec = SceneSpec::default();
    let sizes = SplitSizes { train: 0, val: 0, test: 500 };
    let opts = CorpusOptions { variability: Variability::Low, ..Default::default() };
    let captions: Vec<String> = (0..500).map(|i| generate_sample(&spec, &sizes, 5, i, &opts).unwrap().caption).collect();
    let v = build_vocab(&captions, &VocabConfig::default()).unwrap();
    let t = KeywordTable::default();
    let a = random_atlas(3, 16);
    let (mut expected, mut got) = (0, 0);
    for i in 0..500 {
        let s = generate_sample(&spec, &sizes, 5, i, &opts).unwrap();
        expected += s.classes().len();
        let seq = v.tokenize(&s.caption, 32).unwrap();
        let mut atlas = a.clone();
        atlas.t_max = 32;
        atlas.maps.resize(32 * 256, 0.0);
        got += split_cases(&s, &seq, &atlas, &t).unwrap().len();
    }
    assert_eq!(got, expected);
}

#[test]
fn cases_export_round_trip() {
    let a = random_atlas(4, 16);
    let cases = vec![GroundingCase {
        sample_id: "test-00003".into(),
        class: "ring".into(),
        heatmap: a.token_map(3).to_vec(),
        mask: Mask::from_bbox(16, 16, [2, 2, 5, 6]),
        token_source: TokenSource::FallbackAllWords,
    }];
    let dir = tempfile::tempdir().unwrap();
    export_cases(&cases, dir.path()).unwrap();
    let back = load_cases(&dir.path().join("cases.jsonl")).unwrap();
    assert_eq!(back, cases);
}
