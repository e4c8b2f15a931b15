use anlab::data::*;
use proptest::prelude::*;

#[test]
fn token_file_round_trip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.antk");
    let s = TokenStream {
        ids: (0..1000).map(|i| (i * 37) % 50304).collect(),
        vocab_size: 50304,
        source: "x".into(),
    };
    save_token_file(&p, &s).unwrap();
    let back = load_token_file(&p).unwrap();
    assert_eq!(back.ids, s.ids);
    assert_eq!(back.vocab_size, 50304);
    assert!(load_token_file(&dir.path().join("missing.antk")).is_err());
}

#[test]
fn text_files_must_be_utf8() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("a.txt");
    std::fs::write(&good, "héllo").unwrap();
    let s = load_text_file(&good).unwrap();
    assert_eq!(byte_decode(&s.ids).unwrap(), "héllo".as_bytes());
    let bad = dir.path().join("b.txt");
    std::fs::write(&bad, [0xff, 0xfe, 0x00]).unwrap();
    assert!(load_text_file(&bad).is_err());
}

#[test]
fn batches_are_shifted_windows() {
    let s = byte_tokenize(&synthetic_corpus(10_000, 4));
    for b in sample_batches(&s, 4, 16, 1).unwrap().take(5) {
        assert_eq!((b.inputs.len(), b.targets.len(), b.starts.len()), (64, 64, 4));
        for (r, &st) in b.starts.iter().enumerate() {
            for j in 0..16 {
                assert_eq!(b.inputs[r * 16 + j], s.ids[st + j] as usize);
                assert_eq!(b.targets[r * 16 + j], s.ids[st + j + 1] as usize);
            }
        }
    }
    let short = byte_tokenize(b"abcd");
    assert!(sample_batches(&short, 1, 4, 0).is_err());
    assert!(sample_batches(&short, 1, 3, 0).is_ok());
    assert!(sample_batches(&s, 0, 3, 0).is_err());
}

#[test]
fn split_keeps_every_token() {
    let s = byte_tokenize(&synthetic_corpus(5000, 2));
    let (a, b) = s.split(0.05);
    assert_eq!(a.len() + b.len(), s.len());
    assert_eq!([a.ids.clone(), b.ids.clone()].concat(), s.ids);
    assert!((b.len() as f64 / s.len() as f64 - 0.05).abs() < 0.01);
}

#[test]
fn synthetic_corpus_depends_on_seed() {
    let a = synthetic_corpus(20_000, 1);
    assert!(a.len() >= 20_000);
    assert_eq!(a, synthetic_corpus(20_000, 1));
    assert_ne!(a, synthetic_corpus(20_000, 2));
    assert!(std::str::from_utf8(&a).is_ok());
}

proptest! {
    #[test]
    fn encode_decode_round_trip(vocab in 1u32..70_000, raw in prop::collection::vec(any::<u32>(), 0..300)) {
        let s = TokenStream {
            ids: raw.iter().map(|x| x % vocab).collect(),
            vocab_size: vocab as usize,
            source: "p".into(),
        };
        let back = decode_tokens(&encode_tokens(&s).unwrap(), "p").unwrap();
        prop_assert_eq!(back, s);
    }

    #[test]
    fn truncation_is_always_detected(raw in prop::collection::vec(0u32..256, 1..100), cut in 1usize..4) {
        let s = TokenStream { ids: raw, vocab_size: 256, source: "p".into() };
        let mut bytes = encode_tokens(&s).unwrap();
        bytes.truncate(bytes.len() - cut);
        prop_assert!(decode_tokens(&bytes, "p").is_err());
    }

    #[test]
    fn sampling_is_a_pure_function_of_the_seed(seed in any::<u64>(), batch in 1usize..6, seq in 1usize..40) {
        let s = byte_tokenize(&synthetic_corpus(2000, 9));
        let a: Vec<Batch> = sample_batches(&s, batch, seq, seed).unwrap().take(3).collect();
        let b: Vec<Batch> = sample_batches(&s, batch, seq, seed).unwrap().take(3).collect();
        prop_assert_eq!(&a, &b);
        for x in &a {
            prop_assert!(x.starts.iter().all(|&st| st + seq < s.len()));
        }
    }

    #[test]
    fn byte_round_trip(text in prop::collection::vec(any::<u8>(), 0..500)) {
        prop_assert_eq!(byte_decode(&byte_tokenize(&text).ids).unwrap(), text);
    }
}
