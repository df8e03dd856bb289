use std::io::Write;

use moe_lpr::data::{
    build_batches, detokenize, eval_batches, ingest_corpus, mix_corpora, pack_sequences, parse_corpus, tokenize,
    Document, MixRatio, Role, SynthConfig, TokenTag, EOD, PAD,
};
use moe_lpr::Error;
use proptest::prelude::*;

fn doc(text: &str, role: Role) -> Document {
    Document::new(text, if role == Role::Original { "aa" } else { "bb" }, role)
}

#[test]
fn ingest_reports_bad_lines_by_number() {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    writeln!(f, r#"{{"text":"abc","lang":"en","role":"original"}}"#).unwrap();
    writeln!(f, r#"{{"text":"def","lang":"sw","role":"klingon"}}"#).unwrap();
    writeln!(f).unwrap();
    writeln!(f, "not json").unwrap();
    writeln!(f, r#"{{"text":"ghi","lang":"sw","role":"expanded"}}"#).unwrap();
    writeln!(f, r#"{{"text":"jkl","lang":"","role":"expanded"}}"#).unwrap();
    let set = ingest_corpus(f.path()).unwrap();
    assert_eq!(set.len(), 2);
    let lines: Vec<usize> = set.rejected.iter().map(|r| r.line).collect();
    assert_eq!(lines, vec![2, 4, 6]);
    assert_eq!(set.count_by_role()[&Role::Expanded], 1);
}

#[test]
fn empty_and_missing_corpora_are_errors() {
    assert!(matches!(parse_corpus("\n\n"), Err(Error::Data(_))));
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        ingest_corpus(&dir.path().join("nope.jsonl")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn jsonl_round_trip() {
    let docs = SynthConfig::default().with_held_out_language();
    let set = moe_lpr::data::DocumentSet::new(docs.languages.iter().flat_map(|l| l.generate(3, 5)).collect());
    let back = parse_corpus(&set.to_jsonl().unwrap()).unwrap();
    assert_eq!(back, set);
}

#[test]
fn packing_appends_eod_and_pads_tail() {
    let docs = [doc("ab", Role::Original), doc("XYZ", Role::Expanded)];
    let rows = pack_sequences(&docs, 4);
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].ids, vec![b'a' as usize, b'b' as usize, EOD, b'X' as usize]);
    assert_eq!(
        rows[0].tags,
        vec![
            TokenTag::Original,
            TokenTag::Original,
            TokenTag::Original,
            TokenTag::Expanded
        ]
    );
    assert_eq!(rows[1].ids, vec![b'Y' as usize, b'Z' as usize, EOD, PAD]);
    assert_eq!(rows[1].tags[3], TokenTag::Pad);
}

#[test]
fn targets_skip_pads_and_row_ends() {
    let docs = [doc("abcde", Role::Original)];
    let batch = &eval_batches(&docs, 4, 8)[0];
    let t = batch.targets();
    assert_eq!(t[0], Some(b'b' as usize));
    assert_eq!(t[3], None);
    // Second row is "e", EOD, PAD, PAD.
    assert_eq!(t[4], Some(EOD));
    assert_eq!(&t[5..], &[None, None, None]);
}

#[test]
fn synthetic_stream_matches_mixing_ratio() {
    let cfg = SynthConfig::default();
    let orig = cfg.original().generate(40, 1);
    let expd = cfg.expanded().generate(80, 2);
    let mixed = mix_corpora(&orig, &expd, MixRatio::new(1, 2), None, 3).unwrap();
    let counts = mixed.count_by_role();
    assert_eq!(counts[&Role::Original], 40);
    assert_eq!(counts[&Role::Expanded], 80);
    let share = mixed.token_count(Some(Role::Original)) as f64 / mixed.token_count(None) as f64;
    assert!((share - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn mixing_rejects_impossible_requests() {
    let o = vec![doc("a", Role::Original)];
    let e = vec![doc("B", Role::Expanded)];
    assert!(matches!(
        mix_corpora(&o, &e, MixRatio::new(1, 2), None, 0),
        Err(Error::Data(_))
    ));
    assert!(matches!(
        mix_corpora(&o, &e, MixRatio::new(0, 0), None, 0),
        Err(Error::Config(_))
    ));
    assert!("1-2".parse::<MixRatio>().is_err());
    assert_eq!("1:2".parse::<MixRatio>().unwrap(), MixRatio::new(1, 2));
}

#[test]
fn entropy_rate_bounds_symbol_loss() {
    let l = SynthConfig::default().original().clone();
    let h = l.entropy_rate();
    assert!((h - 0.897_945_724_856_78).abs() < 1e-9);
    // Empirical transition frequencies converge to the table.
    let table = l.transitions();
    let sym = l.alphabet.as_bytes();
    let mut counts = vec![vec![0usize; sym.len()]; sym.len()];
    for d in l.generate(200, 4) {
        for w in d.text.windows(2) {
            let a = sym.iter().position(|&s| s == w[0]).unwrap();
            let b = sym.iter().position(|&s| s == w[1]).unwrap();
            counts[a][b] += 1;
        }
    }
    for (a, succ) in table.iter().enumerate() {
        let total: usize = counts[a].iter().sum();
        // Some symbols have no predecessors and only appear as starts.
        if total < 500 {
            continue;
        }
        let top = succ[0];
        assert!((counts[a][top.0] as f64 / total as f64 - top.1).abs() < 0.05);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tags_partition_every_batch(seed in 0u64..5000, seq in 2usize..40, bs in 1usize..6) {
        let cfg = SynthConfig::default();
        let mut docs = cfg.original().generate(3, seed);
        docs.extend(cfg.expanded().generate(5, seed + 1));
        let mut stream = build_batches(&docs, seq, bs, seed).unwrap();
        for _ in 0..5 {
            let b = stream.next().unwrap();
            let total = b.count(TokenTag::Original) + b.count(TokenTag::Expanded) + b.count(TokenTag::Pad);
            prop_assert_eq!(total, bs * seq);
            for (&id, &tag) in b.token_ids.iter().zip(b.tags.iter()) {
                prop_assert_eq!(id == PAD, tag == TokenTag::Pad);
                if tag == TokenTag::Original && id != EOD {
                    prop_assert!((b'a' as usize..=b'p' as usize).contains(&id));
                }
                if tag == TokenTag::Expanded && id != EOD {
                    prop_assert!((b'A' as usize..=b'P' as usize).contains(&id));
                }
            }
        }
    }

    #[test]
    fn fixed_seed_gives_identical_streams(seed in 0u64..5000) {
        let docs = SynthConfig::default().original().generate(6, 9);
        let a: Vec<_> = build_batches(&docs, 16, 3, seed).unwrap().take(20).collect();
        let b: Vec<_> = build_batches(&docs, 16, 3, seed).unwrap().take(20).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn packing_preserves_every_token(texts in proptest::collection::vec("[a-z]{0,12}", 1..8), seq in 1usize..20) {
        let docs: Vec<Document> = texts.iter().map(|t| doc(t, Role::Original)).collect();
        let rows = pack_sequences(&docs, seq);
        let flat: Vec<usize> = rows.iter().flat_map(|r| r.ids.iter().copied()).collect();
        let expected: Vec<usize> = docs.iter().flat_map(|d| {
            let mut ids = tokenize(d);
            ids.push(EOD);
            ids
        }).collect();
        prop_assert_eq!(&flat[..expected.len()], &expected[..]);
        prop_assert!(flat[expected.len()..].iter().all(|&i| i == PAD));
        prop_assert!(flat.len() - expected.len() < seq);
        prop_assert_eq!(detokenize(&flat), texts.concat().into_bytes());
    }
}
