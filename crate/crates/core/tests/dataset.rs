use std::io::Write;

use bibit::train::{load_dataset, synth_task, FileFormat, SynthRule, CLS, UNK};
use bibit::Error;

fn file_with(suffix: &str, body: &str) -> tempfile::NamedTempFile {
    let mut f = tempfile::Builder::new().suffix(suffix).tempfile().unwrap();
    f.write_all(body.as_bytes()).unwrap();
    f
}

#[test]
fn two_row_csv_loads_with_header() {
    let f = file_with(".csv", "text,label\nthe cat sat,1\nthe dog,0\n");
    let d = load_dataset(f.path(), FileFormat::Csv, 16).unwrap();
    assert_eq!(d.len(), 2);
    assert_eq!(d.classes, 2);
    assert_eq!(d.examples[0].label, 1);
    // specials, then "the" (twice) before the singletons in lexicographic order
    assert_eq!(d.vocab.len(), 3 + 4);
    assert_eq!(d.vocab.token(3), Some("the"));
    assert_eq!(d.vocab.token(4), Some("cat"));
    assert_eq!(d.examples[1].tokens, vec![CLS, 3, d.vocab.id("dog")]);
}

#[test]
fn tsv_is_detected_from_the_extension() {
    let f = file_with(".tsv", "a b, c\t0\nd\t2\n");
    assert_eq!(FileFormat::from_path(f.path()), FileFormat::Tsv);
    let d = load_dataset(f.path(), FileFormat::Tsv, 16).unwrap();
    assert_eq!(d.classes, 3);
    assert_eq!(d.examples[0].tokens.len(), 4);
}

#[test]
fn unknown_words_map_to_unk_and_sequences_truncate() {
    let f = file_with(".csv", "a b c d e f,0\n");
    let d = load_dataset(f.path(), FileFormat::Csv, 4).unwrap();
    assert_eq!(d.examples[0].tokens.len(), 4);
    assert_eq!(d.vocab.encode("a zzz", 8), vec![CLS, d.vocab.id("a"), UNK]);
}

#[test]
fn loading_is_deterministic() {
    let f = file_with(".csv", "x y z,0\nz z y,1\nq,0\n");
    let a = load_dataset(f.path(), FileFormat::Csv, 8).unwrap();
    let b = load_dataset(f.path(), FileFormat::Csv, 8).unwrap();
    assert_eq!(a, b);
}

#[test]
fn malformed_rows_report_their_line() {
    let f = file_with(".csv", "text,label\ngood row,0\nbad row,yes\n");
    match load_dataset(f.path(), FileFormat::Csv, 8) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a parse error, got {other:?}"),
    }
    let f = file_with(".csv", "one,two,0\n");
    assert!(matches!(
        load_dataset(f.path(), FileFormat::Csv, 8),
        Err(Error::Parse { line: 1, .. })
    ));
}

#[test]
fn empty_file_is_rejected() {
    let f = file_with(".csv", "");
    assert!(matches!(
        load_dataset(f.path(), FileFormat::Csv, 8),
        Err(Error::Domain(_))
    ));
    let f = file_with(".csv", "text,label\n");
    assert!(load_dataset(f.path(), FileFormat::Csv, 8).is_err());
}

#[test]
fn synthetic_tasks_are_balanced_and_labelled_by_their_rule() {
    let d = synth_task(5, 301, SynthRule::ContainsPattern).unwrap();
    let c = d.class_counts();
    assert!(c[0].abs_diff(c[1]) <= 1);
    let (s0, s1) = (d.vocab.id("s0"), d.vocab.id("s1"));
    for ex in &d.examples {
        assert_eq!(ex.tokens[0], CLS);
        let has = ex.tokens.windows(2).any(|w| w == [s0, s1]);
        assert_eq!(has, ex.label == 1);
    }
    let d = synth_task(5, 200, SynthRule::MajorityToken).unwrap();
    for ex in &d.examples {
        let ones = ex.tokens[1..]
            .iter()
            .filter(|&&t| t == d.vocab.id("s1"))
            .count();
        assert_eq!(ones * 2 > ex.tokens.len() - 1, ex.label == 1);
    }
    assert_eq!(synth_task(5, 200, SynthRule::MajorityToken).unwrap(), d);
    assert_ne!(synth_task(6, 200, SynthRule::MajorityToken).unwrap(), d);
}

#[test]
fn split_partitions_without_overlap() {
    let d = synth_task(1, 100, SynthRule::ContainsPattern).unwrap();
    let (tr, ev) = d.split(0.2, 9);
    assert_eq!((tr.len(), ev.len()), (80, 20));
    assert_eq!(d.split(0.2, 9), (tr, ev));
}
