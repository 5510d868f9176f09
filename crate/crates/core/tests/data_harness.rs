use std::fs;

use fiber_core::data::metrics::{average_precision, bleu4, grounding_recall, recall_at_k, words, Detection};
use fiber_core::data::*;
use fiber_core::objectives::{iou, BBox};
use fiber_core::Error;
use fiber_tensor::Rng;
use proptest::prelude::*;
use tempfile::TempDir;

const VOCAB_FILE: &str = include_str!("../assets/vocab.txt");
const MANIFEST: &str = include_str!("../assets/datasets.sha256");

fn object(shape: Shape, color: Color, cx: u32, cy: u32, size: u32) -> SceneObject {
    SceneObject { shape, color, cx, cy, size }
}

// Scenes and rendering

#[test]
fn centered_square_box_and_pixels() {
    let o = object(Shape::Square, Color::Red, 32, 32, 16);
    assert_eq!(o.bbox(), BBox::new(24.0, 24.0, 40.0, 40.0));
    let spec = SceneSpec { objects: vec![o] };
    spec.validate().unwrap();
    let px = render_bytes(&spec);
    let at = |i: usize, j: usize| &px[(i * CANVAS + j) * 3..][..3];
    assert_eq!(at(24, 24), Color::Red.rgb());
    assert_eq!(at(39, 39), Color::Red.rgb());
    assert_eq!(at(23, 30), [0, 0, 0]);
    assert_eq!(at(30, 40), [0, 0, 0]);
    let lit = px.chunks(3).filter(|p| *p != [0, 0, 0]).count();
    assert_eq!(lit, 16 * 16);
    let t = render(&spec);
    assert_eq!(t.shape(), &[CANVAS, CANVAS, 3]);
    assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn circle_and_triangle_cover_less_than_their_boxes() {
    for shape in [Shape::Circle, Shape::Triangle] {
        let spec = SceneSpec { objects: vec![object(shape, Color::Blue, 32, 32, 20)] };
        let lit = render_bytes(&spec).chunks(3).filter(|p| *p != [0, 0, 0]).count();
        assert!(lit > 100 && lit < 400, "{shape:?}: {lit}");
    }
}

#[test]
fn invalid_scenes_are_rejected() {
    let off = SceneSpec { objects: vec![object(Shape::Square, Color::Red, 4, 32, 16)] };
    assert!(matches!(off.validate(), Err(Error::Data(_))));
    let overlap = SceneSpec {
        objects: vec![object(Shape::Square, Color::Red, 30, 30, 16), object(Shape::Circle, Color::Blue, 32, 32, 16)],
    };
    assert!(overlap.validate().is_err());
    assert!(SceneSpec { objects: vec![] }.validate().is_err());
}

// Captions and the vocabulary

#[test]
fn vocabulary_ids_follow_the_word_file() {
    let v = Vocab::builtin();
    let lines: Vec<&str> = VOCAB_FILE.lines().collect();
    assert_eq!(v.len(), lines.len());
    for (i, w) in lines.iter().enumerate() {
        assert_eq!(v.id(w), Some(i));
        assert_eq!(v.word(i), Some(*w));
    }
    assert_eq!([PAD, BOS, EOS, MASK], [0, 1, 2, 3]);
}

#[test]
fn fixed_caption_has_a_fixed_id_sequence() {
    let v = Vocab::builtin();
    let line = |w: &str| VOCAB_FILE.lines().position(|l| l == w).unwrap();
    let caption = "a red square left of a blue circle";
    let mut expected = vec![BOS];
    expected.extend(caption.split(' ').map(line));
    expected.push(EOS);
    assert_eq!(v.tokenize(caption).unwrap(), expected);
    assert_eq!(expected, vec![1, 4, 5, 11, 14, 16, 4, 7, 12, 2]);
}

#[test]
fn tokenizer_framing_round_trip_and_closed_world() {
    let v = Vocab::builtin();
    assert_eq!(v.tokenize("").unwrap(), vec![BOS, EOS]);
    for s in ["a red square left of a blue circle", "what shape is the green object ?", "red square . blue circle ."] {
        assert_eq!(v.detokenize(&v.tokenize(s).unwrap()), s);
    }
    assert!(matches!(v.tokenize("a magenta square"), Err(Error::Data(_))));
    assert_eq!(v.detokenize(&[BOS, 5, EOS, 11, PAD]), "red");
}

#[test]
fn vocabulary_file_must_be_bijective() {
    assert!(Vocab::parse("[pad]\n[bos]\n[eos]\n[mask]\na\na\n").is_err());
    assert!(Vocab::parse("[pad]\n[bos]\n").is_err());
}

#[test]
fn red_square_span_covers_exactly_its_two_tokens() {
    let spec = SceneSpec {
        objects: vec![object(Shape::Square, Color::Red, 16, 32, 16), object(Shape::Circle, Color::Blue, 48, 32, 16)],
    };
    let (caption, targets) = make_caption(&spec);
    assert_eq!(caption, "a red square left of a blue circle");
    let ids = Vocab::builtin().tokenize(&caption).unwrap();
    // Independent oracle: locate the phrase by searching the id sequence.
    let v = Vocab::builtin();
    let needle = [v.id("red").unwrap(), v.id("square").unwrap()];
    let at = ids.windows(2).position(|w| w == needle).unwrap();
    assert_eq!(targets[0].span, (at, at + 2));
    assert_eq!(targets[0].bbox, spec.objects[0].bbox());
    assert_eq!(&ids[targets[1].span.0..targets[1].span.1], &[v.id("blue").unwrap(), v.id("circle").unwrap()]);
}

#[test]
fn relations_and_detection_prompt() {
    let a = object(Shape::Square, Color::Red, 32, 16, 14);
    let b = object(Shape::Triangle, Color::Green, 32, 48, 14);
    let (c, _) = make_caption(&SceneSpec { objects: vec![a, b] });
    assert_eq!(c, "a red square above a green triangle");
    let (c, _) = make_caption(&SceneSpec { objects: vec![b, a] });
    assert_eq!(c, "a green triangle below a red square");
    let (p, t) = detection_prompt(&SceneSpec { objects: vec![a, b] });
    assert_eq!(p, "red square . green triangle .");
    assert_eq!(t.iter().map(|t| t.span).collect::<Vec<_>>(), vec![(1, 3), (4, 6)]);
}

// Records and dataset files

#[test]
fn records_are_a_pure_function_of_seed_and_index() {
    let v = Vocab::builtin();
    let a = Record::generate(3, 9, &v);
    assert_eq!(a, Record::generate(3, 9, &v));
    assert_eq!(a.pixels, Record::generate(3, 9, &v).pixels);
    assert_ne!(a.scene, Record::generate(3, 10, &v).scene);
    assert_eq!(generate_dataset(3, 12)[9], a);
}

#[test]
fn dataset_hash_is_stable_and_seed_sensitive() {
    let a = dataset_hash(1, &generate_dataset(1, 8), PixelEncoding::Hex).unwrap();
    assert_eq!(a, dataset_hash(1, &generate_dataset(1, 8), PixelEncoding::Hex).unwrap());
    assert_ne!(a, dataset_hash(2, &generate_dataset(2, 8), PixelEncoding::Hex).unwrap());
}

#[test]
fn committed_manifest_pins_the_acceptance_datasets() {
    let mut checked = 0;
    for line in MANIFEST.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
        let f: Vec<&str> = line.split_whitespace().collect();
        let (seed, count): (u64, usize) = (f[0].parse().unwrap(), f[1].parse().unwrap());
        let h = dataset_hash(seed, &generate_dataset(seed, count), PixelEncoding::Hex).unwrap();
        assert_eq!(h, f[2], "dataset seed {seed} count {count}");
        checked += 1;
    }
    assert!(checked >= 3);
}

#[test]
fn dataset_files_round_trip_in_both_encodings() {
    let dir = TempDir::new().unwrap();
    let records = generate_dataset(5, 6);
    for enc in [PixelEncoding::Hex, PixelEncoding::Regenerate] {
        let path = dir.path().join("d.jsonl");
        let h = write_dataset(&path, 5, &records, enc).unwrap();
        assert_eq!(h, dataset_hash(5, &records, enc).unwrap());
        assert_eq!(read_dataset(&path).unwrap(), records);
    }
}

#[test]
fn malformed_dataset_files_are_data_errors() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("d.jsonl");
    let records = generate_dataset(5, 2);
    write_dataset(&path, 5, &records, PixelEncoding::Regenerate).unwrap();
    let good = fs::read_to_string(&path).unwrap();

    let cases = [
        "not json\n".to_string(),
        String::new(),
        good.replacen("\"regenerate\":true", "\"regenerate\":false", 1),
        good.replacen("\"seed\":5", "\"seed\":6", 1),
        good.replacen("\"regenerate\":true", "\"pixels\":\"00ff\",\"regenerate\":false", 1),
    ];
    for (i, text) in cases.iter().enumerate() {
        fs::write(&path, text).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Data(_))), "case {i}");
    }
    assert!(matches!(read_dataset(&dir.path().join("missing.jsonl")), Err(Error::Data(_))));
}

#[test]
fn grounding_targets_name_objects_in_the_scene() {
    let v = Vocab::builtin();
    for r in generate_dataset(11, 200) {
        for (targets, ids) in [(&r.targets, &r.tokens), (&r.prompt_targets, &r.prompt_tokens)] {
            assert_eq!(targets.len(), r.scene.objects.len());
            for t in targets {
                let phrase = v.detokenize(&ids[t.span.0..t.span.1]);
                let hit = r.scene.objects.iter().find(|o| o.phrase().join(" ") == phrase);
                let o = hit.unwrap_or_else(|| panic!("`{phrase}` not in scene {}", r.index));
                assert_eq!(o.bbox(), t.bbox);
            }
        }
    }
}

#[test]
fn questions_have_their_answers_in_the_scene() {
    for r in generate_dataset(12, 200) {
        let answer = ANSWERS[r.label];
        let objs = &r.scene.objects;
        if r.question.starts_with("how many") {
            assert_eq!(answer, ["one", "two", "three", "four"][objs.len() - 1]);
        } else if let Some(shape) = r.question.strip_prefix("what color is the ").and_then(|s| s.strip_suffix(" ?")) {
            let o: Vec<_> = objs.iter().filter(|o| o.shape.word() == shape).collect();
            assert_eq!(o.len(), 1);
            assert_eq!(o[0].color.word(), answer);
        } else {
            let color = r.question.strip_prefix("what shape is the ").and_then(|s| s.strip_suffix(" object ?")).unwrap();
            let o: Vec<_> = objs.iter().filter(|o| o.color.word() == color).collect();
            assert_eq!(o.len(), 1);
            assert_eq!(o[0].shape.word(), answer);
        }
    }
}

// Metrics

#[test]
fn recall_at_k_examples() {
    let perfect: Vec<Vec<usize>> = (0..4).map(|i| vec![i, (i + 1) % 4]).collect();
    let gold: Vec<usize> = (0..4).collect();
    assert_eq!(recall_at_k(&perfect, &gold, 1), 1.0);
    let second: Vec<Vec<usize>> = (0..4).map(|i| vec![(i + 1) % 4, i, 9, 9, 9]).collect();
    assert_eq!(recall_at_k(&second, &gold, 1), 0.0);
    assert_eq!(recall_at_k(&second, &gold, 5), 1.0);
    let rankings: Vec<Vec<usize>> = (0..10).map(|q| if q < 3 { vec![7, 7, 7, 7, 0] } else { vec![7; 10] }).collect();
    assert!((recall_at_k(&rankings, &[0; 10], 5) - 0.3).abs() < 1e-12);
}

#[test]
fn grounding_recall_examples() {
    let gold = BBox::new(0.0, 0.0, 2.0, 1.0);
    assert_eq!(grounding_recall(&[vec![gold]], &[gold], 0.5), [1.0, 1.0, 1.0]);
    let far = BBox::new(10.0, 10.0, 12.0, 11.0);
    assert_eq!(grounding_recall(&[vec![far; 12]], &[gold], 0.5), [0.0, 0.0, 0.0]);
    // Half the gold box: IoU exactly one half.
    let half = BBox::new(0.0, 0.0, 1.0, 1.0);
    assert_eq!(iou(&half, &gold), 0.5);
    assert_eq!(grounding_recall(&[vec![half]], &[gold], 0.5), [1.0, 1.0, 1.0]);
    let late = vec![far, far, half];
    assert_eq!(grounding_recall(&[late], &[gold], 0.5), [0.0, 1.0, 1.0]);
}

#[test]
fn average_precision_examples() {
    let g = |x: f64| BBox::new(x, 0.0, x + 4.0, 4.0);
    let golds = vec![(0, g(0.0)), (0, g(10.0)), (1, g(0.0))];
    let all: Vec<Detection> = golds.iter().enumerate().map(|(i, (img, b))| Detection { image: *img, bbox: *b, score: 1.0 - i as f64 * 0.1 }).collect();
    assert!((average_precision(&all, &golds, 0.5) - 1.0).abs() < 1e-12);

    // TP, FP, TP over two golds: recall 0.5 at precision 1, then 1.0 at 2/3.
    let two = vec![(0, g(0.0)), (0, g(10.0))];
    let preds = vec![
        Detection { image: 0, bbox: g(0.0), score: 0.9 },
        Detection { image: 0, bbox: g(30.0), score: 0.8 },
        Detection { image: 0, bbox: g(10.0), score: 0.7 },
    ];
    assert!((average_precision(&preds, &two, 0.5) - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);

    // A duplicate of a matched box is a false positive.
    let dup = vec![Detection { image: 0, bbox: g(0.0), score: 0.9 }, Detection { image: 0, bbox: g(0.0), score: 0.8 }];
    assert!((average_precision(&dup, &two, 0.5) - 0.5).abs() < 1e-12);
    assert_eq!(average_precision(&[], &two, 0.5), 0.0);
}

#[test]
fn bleu_examples() {
    let r = words("a red square left of a blue circle");
    assert!((bleu4(std::slice::from_ref(&r), std::slice::from_ref(&r)) - 1.0).abs() < 1e-12);
    assert_eq!(bleu4(&[words("a red square")], &[words("a red square")]), 0.0);
    // Full precision but a short candidate: brevity penalty exp(1 − 6/4).
    let b = bleu4(&[words("a b c d")], &[words("a b c d e f")]);
    assert!((b - (-0.5f64).exp()).abs() < 1e-12);
    let b = bleu4(&[words("a red square left of a green circle")], &[r]);
    assert!(b > 0.0 && b < 1.0);
}

// Invariants

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generated_scenes_satisfy_their_invariants(seed in any::<u64>()) {
        let s = generate_scene(&mut Rng::new(seed));
        prop_assert!((1..=MAX_OBJECTS).contains(&s.objects.len()));
        prop_assert!(s.validate().is_ok());
        for (i, a) in s.objects.iter().enumerate() {
            prop_assert!((MIN_SIZE..=MAX_SIZE).contains(&a.size));
            for b in &s.objects[..i] {
                prop_assert!(iou(&a.bbox(), &b.bbox()) < 0.1);
                prop_assert!((a.color, a.shape) != (b.color, b.shape));
            }
        }
    }

    #[test]
    fn in_vocabulary_text_round_trips(picks in prop::collection::vec(4usize..40, 0..12)) {
        let v = Vocab::builtin();
        let s = picks.iter().map(|&i| v.word(i).unwrap()).collect::<Vec<_>>().join(" ");
        prop_assert_eq!(v.detokenize(&v.tokenize(&s).unwrap()), s);
    }
}

#[cfg(feature = "parallel")]
#[test]
fn parallel_generation_matches_sequential() {
    use fiber_core::data::{generate_dataset_parallel, generate_dataset_sequential};
    assert_eq!(generate_dataset_parallel(3, 40), generate_dataset_sequential(3, 40));
}
