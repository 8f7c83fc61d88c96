use hypermixer::text::*;
use hypermixer::Error;
use proptest::prelude::*;

fn ex(a: &str, b: Option<&str>, label: usize) -> Example {
    Example {
        text_a: a.into(),
        text_b: b.map(Into::into),
        label,
    }
}

#[test]
fn pair_tsv_round_trips() {
    let labels = ["entailment", "neutral", "contradiction"];
    let data = vec![
        ex("A man sleeps.", Some("Someone rests."), 0),
        ex("It rains", Some("The sun is out"), 2),
    ];
    let mut buf = Vec::new();
    write_tsv(&mut buf, &data, &labels).unwrap();
    let back = parse_tsv(buf.as_slice(), Schema::Pair, &labels, "mem").unwrap();
    assert_eq!(back, data);
}

#[test]
fn unknown_label_is_a_data_error() {
    let tsv = "sentence\tlabel\ngood\t1\nbad\t7\n";
    match parse_tsv(tsv.as_bytes(), Schema::Single, &["0", "1"], "mem") {
        Err(Error::Data(msg)) => assert!(msg.contains("mem:3"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn missing_file_is_an_io_error() {
    let err = load_tsv(std::path::Path::new("/nonexistent/x.tsv"), Schema::Single, &["0"]).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err:?}");
}

#[test]
fn vocabulary_orders_by_frequency_then_text() {
    let data = vec![ex("b a b", None, 0), ex("c b a", None, 1)];
    let vocab = Vocabulary::build(&data, 1).unwrap();
    let order: Vec<&str> = (0..vocab.len()).map(|i| vocab.token(i).unwrap()).collect();
    assert_eq!(order, ["[PAD]", "[UNK]", "[SEP]", "b", "a", "c"]);
    assert_eq!(vocab.encode("a zebra"), vec![4, UNK]);
    assert!(Vocabulary::build(&data, 0).is_err());
}

#[test]
fn pairs_are_joined_by_a_separator() {
    let data = vec![ex("x y", Some("y"), 0)];
    let vocab = Vocabulary::build(&data, 1).unwrap();
    let ids = vocab.encode_example(&data[0]);
    assert_eq!(ids.len(), 4);
    assert_eq!(ids[2], SEP);
}

#[test]
fn unshuffled_batches_keep_order_and_count_truncations() {
    let data: Vec<Example> = (0..5).map(|i| ex(&"w ".repeat(i + 1), None, i % 2)).collect();
    let vocab = Vocabulary::build(&data, 1).unwrap();
    let mut it = batch_iter(&data, &vocab, 2, Some(3), None).unwrap();
    let batches: Vec<Batch> = it.by_ref().collect();
    assert_eq!(it.truncated(), 2);
    assert_eq!(batches.iter().map(Batch::size).collect::<Vec<_>>(), [2, 2, 1]);
    assert_eq!(batches[0].labels, [0, 1]);
    assert_eq!(batches[1].mask.count(0), 3);
    assert_eq!(batches[1].mask.count(1), 3);
    assert!(batch_iter(&data, &vocab, 0, None, None).is_err());
}

#[test]
fn fixture_is_balanced_and_sized() {
    let data = sentiment_fixture();
    assert_eq!(data.len(), 2000);
    let positives = data.iter().filter(|e| e.label == 1).count();
    assert!((800..=1200).contains(&positives), "{positives}");
}

proptest! {
    #[test]
    fn batches_pad_with_zero_and_mask_lengths(lens in prop::collection::vec(1usize..12, 1..6)) {
        let seqs: Vec<Vec<usize>> = lens.iter().map(|&l| vec![5; l]).collect();
        let batch = Batch::from_sequences(&seqs, vec![0; lens.len()]).unwrap();
        let n = *lens.iter().max().unwrap();
        for (b, &l) in lens.iter().enumerate() {
            prop_assert_eq!(batch.mask.count(b), l);
            let row = &batch.ids[b * n..(b + 1) * n];
            prop_assert!(row[..l].iter().all(|&t| t == 5));
            prop_assert!(row[l..].iter().all(|&t| t == PAD));
        }
    }

    #[test]
    fn shuffling_is_a_seeded_permutation(seed in 0u64..500) {
        let data: Vec<Example> = (0..9).map(|i| ex(&format!("t{i}"), None, i)).collect();
        let vocab = Vocabulary::build(&data, 1).unwrap();
        let labels = |s| batch_iter(&data, &vocab, 4, None, Some(s)).unwrap().flat_map(|b| b.labels).collect::<Vec<_>>();
        let a = labels(seed);
        prop_assert_eq!(&a, &labels(seed));
        let mut sorted = a.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..9).collect::<Vec<_>>());
    }
}
