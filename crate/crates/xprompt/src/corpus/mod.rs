//! BIO-tagged domain corpora: the sequence-tagging data model.
//!
//! A corpus is a set of review sentences, each carrying tokens, POS tags and
//! (for labelled domains) per-token B/I/O aspect labels. Corpora are stored
//! as CoNLL-style 3-column TSV files: `token<TAB>pos<TAB>bio`, one token per
//! line, blank line between sentences, `#` starts a comment. A
//! `# split: train|test` directive switches the split the following
//! sentences belong to (train is the default); a BIO column of `-` marks an
//! unlabelled sentence.

mod synthetic;

pub use synthetic::{
    device_reviews_spec, generate_synthetic_corpus, restaurant_reviews_spec, SlotSpec,
    SyntheticSpec, Template, WordPool,
};

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-token aspect label: Begin / Inside / Outside.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BioLabel {
    B,
    I,
    O,
}

impl BioLabel {
    /// All labels, in class-index order (B=0, I=1, O=2).
    pub const ALL: [BioLabel; 3] = [BioLabel::B, BioLabel::I, BioLabel::O];

    /// Class index used by the aspect head.
    pub fn class_index(self) -> usize {
        match self {
            BioLabel::B => 0,
            BioLabel::I => 1,
            BioLabel::O => 2,
        }
    }

    pub fn from_class_index(index: usize) -> Option<BioLabel> {
        Self::ALL.get(index).copied()
    }
}

impl fmt::Display for BioLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BioLabel::B => write!(f, "B"),
            BioLabel::I => write!(f, "I"),
            BioLabel::O => write!(f, "O"),
        }
    }
}

impl FromStr for BioLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "B" => Ok(BioLabel::B),
            "I" => Ok(BioLabel::I),
            "O" => Ok(BioLabel::O),
            other => Err(Error::Validation(format!(
                "unknown BIO label symbol {other:?} (expected B, I or O)"
            ))),
        }
    }
}

/// An aspect term as a token span, both ends inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AspectSpan {
    pub start: usize,
    pub end: usize,
}

impl AspectSpan {
    pub fn new(start: usize, end: usize) -> Self {
        assert!(start <= end, "span start must not exceed end");
        AspectSpan { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// One BIO well-formedness violation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BioViolation {
    pub index: usize,
    pub rule: String,
}

impl fmt::Display for BioViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "index {}: {}", self.index, self.rule)
    }
}

/// Check BIO well-formedness: no I at the start, no I after an O.
///
/// Returns an empty list iff the sequence is in the language `(O | B I*)*`.
pub fn validate_bio(labels: &[BioLabel]) -> Vec<BioViolation> {
    let mut violations = Vec::new();
    let mut prev: Option<BioLabel> = None;
    for (index, &label) in labels.iter().enumerate() {
        if label == BioLabel::I && !matches!(prev, Some(BioLabel::B) | Some(BioLabel::I)) {
            violations.push(BioViolation {
                index,
                rule: "I without preceding B/I".to_string(),
            });
        }
        prev = Some(label);
    }
    violations
}

/// Extract aspect spans as maximal `B I*` runs.
///
/// Errors on an ill-formed sequence; callers that may hold model output
/// should repair it first (see the evaluation module).
pub fn spans_from_bio(labels: &[BioLabel]) -> Result<BTreeSet<AspectSpan>> {
    let violations = validate_bio(labels);
    if !violations.is_empty() {
        let detail: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(Error::Validation(format!(
            "invalid BIO sequence: {}",
            detail.join("; ")
        )));
    }
    let mut spans = BTreeSet::new();
    let mut open: Option<usize> = None;
    for (index, &label) in labels.iter().enumerate() {
        match label {
            BioLabel::B => {
                if let Some(start) = open.take() {
                    spans.insert(AspectSpan::new(start, index - 1));
                }
                open = Some(index);
            }
            BioLabel::I => {}
            BioLabel::O => {
                if let Some(start) = open.take() {
                    spans.insert(AspectSpan::new(start, index - 1));
                }
            }
        }
    }
    if let Some(start) = open {
        spans.insert(AspectSpan::new(start, labels.len() - 1));
    }
    Ok(spans)
}

/// Inverse of [`spans_from_bio`]: B at each span start, I inside, O outside.
///
/// Spans must be disjoint and lie within `len`.
pub fn bio_from_spans(spans: &BTreeSet<AspectSpan>, len: usize) -> Result<Vec<BioLabel>> {
    let mut labels = vec![BioLabel::O; len];
    let mut last_end: Option<usize> = None;
    for span in spans {
        if span.end >= len {
            return Err(Error::Validation(format!(
                "span ({}, {}) exceeds sentence length {len}",
                span.start, span.end
            )));
        }
        if let Some(end) = last_end {
            if span.start <= end {
                return Err(Error::Validation(format!(
                    "overlapping spans at token {}",
                    span.start
                )));
            }
        }
        labels[span.start] = BioLabel::B;
        for slot in labels.iter_mut().take(span.end + 1).skip(span.start + 1) {
            *slot = BioLabel::I;
        }
        last_end = Some(span.end);
    }
    Ok(labels)
}

/// Conservative repair for model-emitted label sequences: an I that begins
/// the sequence or follows an O becomes B. Deterministic, never drops a
/// predicted token.
pub fn repair_bio(labels: &mut [BioLabel]) {
    let mut prev = BioLabel::O;
    let mut first = true;
    for label in labels.iter_mut() {
        if *label == BioLabel::I && (first || prev == BioLabel::O) {
            *label = BioLabel::B;
        }
        prev = *label;
        first = false;
    }
}

/// One review sentence: tokens, POS tags and (when labelled) BIO labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedSentence {
    pub sentence_id: String,
    pub tokens: Vec<String>,
    pub pos_tags: Vec<String>,
    /// `None` for sentences from an unlabelled split.
    pub bio_labels: Option<Vec<BioLabel>>,
}

impl TaggedSentence {
    pub fn new(
        sentence_id: impl Into<String>,
        tokens: Vec<String>,
        pos_tags: Vec<String>,
        bio_labels: Option<Vec<BioLabel>>,
    ) -> Result<Self> {
        let sentence = TaggedSentence {
            sentence_id: sentence_id.into(),
            tokens,
            pos_tags,
            bio_labels,
        };
        sentence.check()?;
        Ok(sentence)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Gold aspect spans, when the sentence is labelled.
    pub fn aspect_spans(&self) -> Result<Option<BTreeSet<AspectSpan>>> {
        match &self.bio_labels {
            Some(labels) => Ok(Some(spans_from_bio(labels)?)),
            None => Ok(None),
        }
    }

    fn check(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::Validation(format!(
                "sentence {}: empty sentence",
                self.sentence_id
            )));
        }
        if self.pos_tags.len() != self.tokens.len() {
            return Err(Error::Validation(format!(
                "sentence {}: {} tokens but {} POS tags",
                self.sentence_id,
                self.tokens.len(),
                self.pos_tags.len()
            )));
        }
        if let Some(labels) = &self.bio_labels {
            if labels.len() != self.tokens.len() {
                return Err(Error::Validation(format!(
                    "sentence {}: {} tokens but {} BIO labels",
                    self.sentence_id,
                    self.tokens.len(),
                    labels.len()
                )));
            }
            let violations = validate_bio(labels);
            if !violations.is_empty() {
                let detail: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
                return Err(Error::Validation(format!(
                    "sentence {}: ill-formed BIO ({})",
                    self.sentence_id,
                    detail.join("; ")
                )));
            }
        }
        for token in &self.tokens {
            if token.is_empty() || token.contains(['\n', '\t']) {
                return Err(Error::Validation(format!(
                    "sentence {}: token {token:?} is empty or contains newline/tab",
                    self.sentence_id
                )));
            }
        }
        Ok(())
    }
}

/// All sentences of one domain, split into train and test.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainCorpus {
    pub domain_name: String,
    pub train: Vec<TaggedSentence>,
    pub test: Vec<TaggedSentence>,
    /// False when the train split carries no gold BIO labels (target domain).
    pub labelled: bool,
}

impl DomainCorpus {
    pub fn new(
        domain_name: impl Into<String>,
        train: Vec<TaggedSentence>,
        test: Vec<TaggedSentence>,
    ) -> Result<Self> {
        let domain_name = domain_name.into();
        if domain_name.is_empty() {
            return Err(Error::Validation("domain name must be nonempty".into()));
        }
        let labelled_count = train.iter().filter(|s| s.bio_labels.is_some()).count();
        if labelled_count != 0 && labelled_count != train.len() {
            return Err(Error::Validation(format!(
                "domain {domain_name}: train split mixes labelled and unlabelled sentences \
                 ({labelled_count} of {})",
                train.len()
            )));
        }
        let labelled = !train.is_empty() && labelled_count == train.len();
        Ok(DomainCorpus {
            domain_name,
            train,
            test,
            labelled,
        })
    }

    pub fn sentence_count(&self) -> usize {
        self.train.len() + self.test.len()
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Split {
    Train,
    Test,
}

/// Load a domain corpus from a TSV file or from a directory holding
/// `train.tsv` and `test.tsv`.
pub fn load_corpus(path: &Path, domain_name: &str) -> Result<DomainCorpus> {
    if path.is_dir() {
        let train = parse_split_file(&path.join("train.tsv"), domain_name, Split::Train)?;
        let test = parse_split_file(&path.join("test.tsv"), domain_name, Split::Test)?;
        let corpus = DomainCorpus::new(domain_name, train, test)?;
        ensure_nonempty(&corpus, path)?;
        return Ok(corpus);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (train, test) = parse_corpus_text(&text, path, domain_name)?;
    let corpus = DomainCorpus::new(domain_name, train, test)?;
    ensure_nonempty(&corpus, path)?;
    Ok(corpus)
}

fn ensure_nonempty(corpus: &DomainCorpus, path: &Path) -> Result<()> {
    if corpus.sentence_count() == 0 {
        return Err(Error::Validation(format!(
            "{}: no sentences",
            path.display()
        )));
    }
    Ok(())
}

fn parse_split_file(path: &Path, domain_name: &str, split: Split) -> Result<Vec<TaggedSentence>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (mut train, mut test) = parse_corpus_text(&text, path, domain_name)?;
    Ok(match split {
        Split::Train => {
            train.append(&mut test);
            train
        }
        Split::Test => {
            test.append(&mut train);
            test
        }
    })
}

fn parse_corpus_text(
    text: &str,
    path: &Path,
    domain_name: &str,
) -> Result<(Vec<TaggedSentence>, Vec<TaggedSentence>)> {
    let path_str = path.display().to_string();
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut split = Split::Train;
    let mut rows: Vec<(usize, String, String, String)> = Vec::new();
    let mut sentence_line = 0usize;

    let flush = |rows: &mut Vec<(usize, String, String, String)>,
                     split: Split,
                     train: &mut Vec<TaggedSentence>,
                     test: &mut Vec<TaggedSentence>|
     -> Result<()> {
        if rows.is_empty() {
            return Ok(());
        }
        let first_line = rows[0].0;
        let tokens: Vec<String> = rows.iter().map(|r| r.1.clone()).collect();
        let pos_tags: Vec<String> = rows.iter().map(|r| r.2.clone()).collect();
        let unlabelled = rows.iter().filter(|r| r.3 == "-").count();
        let labels = if unlabelled == rows.len() {
            None
        } else if unlabelled == 0 {
            let mut parsed = Vec::with_capacity(rows.len());
            for (line, _, _, bio) in rows.iter() {
                let label = bio.parse::<BioLabel>().map_err(|e| Error::Parse {
                    path: path_str.clone(),
                    line: *line,
                    message: e.to_string(),
                })?;
                parsed.push(label);
            }
            Some(parsed)
        } else {
            return Err(Error::Parse {
                path: path_str.clone(),
                line: first_line,
                message: "sentence mixes '-' (unlabelled) with BIO labels".to_string(),
            });
        };
        let index = train.len() + test.len();
        let sentence = TaggedSentence::new(
            format!("{domain_name}:{index}"),
            tokens,
            pos_tags,
            labels,
        )?;
        match split {
            Split::Train => train.push(sentence),
            Split::Test => test.push(sentence),
        }
        rows.clear();
        Ok(())
    };

    for (zero_line, raw) in text.lines().enumerate() {
        let line_no = zero_line + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut rows, split, &mut train, &mut test)?;
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            let directive = comment.trim();
            if let Some(value) = directive.strip_prefix("split:") {
                flush(&mut rows, split, &mut train, &mut test)?;
                split = match value.trim() {
                    "train" => Split::Train,
                    "test" => Split::Test,
                    other => {
                        return Err(Error::Parse {
                            path: path_str.clone(),
                            line: line_no,
                            message: format!("unknown split {other:?} (expected train or test)"),
                        })
                    }
                };
            }
            continue;
        }
        let columns: Vec<&str> = line.split('\t').collect();
        if columns.len() != 3 {
            return Err(Error::Parse {
                path: path_str.clone(),
                line: line_no,
                message: format!("expected 3 tab-separated columns, found {}", columns.len()),
            });
        }
        if rows.is_empty() {
            sentence_line = line_no;
        }
        let _ = sentence_line;
        rows.push((
            line_no,
            columns[0].to_string(),
            columns[1].to_string(),
            columns[2].to_string(),
        ));
    }
    flush(&mut rows, split, &mut train, &mut test)?;
    Ok((train, test))
}

/// Write a corpus as a single TSV file with split directives.
///
/// `load_corpus(write_corpus(c)) == c` up to sentence ids.
pub fn write_corpus(corpus: &DomainCorpus, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (split, sentences) in [("train", &corpus.train), ("test", &corpus.test)] {
        if sentences.is_empty() {
            continue;
        }
        out.push_str(&format!("# split: {split}\n"));
        for sentence in sentences {
            for (index, token) in sentence.tokens.iter().enumerate() {
                let bio = match &sentence.bio_labels {
                    Some(labels) => labels[index].to_string(),
                    None => "-".to_string(),
                };
                out.push_str(&format!(
                    "{token}\t{}\t{bio}\n",
                    sentence.pos_tags[index]
                ));
            }
            out.push('\n');
        }
    }
    atomic_write(path, out.as_bytes())
}

/// Write bytes atomically: temp file in the same directory, then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = parent {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let dir = parent.unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path)
        .map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(s: &str) -> Vec<BioLabel> {
        s.chars().map(|c| c.to_string().parse().unwrap()).collect()
    }

    fn spans(pairs: &[(usize, usize)]) -> BTreeSet<AspectSpan> {
        pairs.iter().map(|&(s, e)| AspectSpan::new(s, e)).collect()
    }

    #[test]
    fn validate_accepts_well_formed() {
        assert!(validate_bio(&labels("OBIO")).is_empty());
        assert!(validate_bio(&labels("")).is_empty());
        assert!(validate_bio(&labels("BBI")).is_empty());
    }

    #[test]
    fn validate_rejects_orphan_inside() {
        let v = validate_bio(&labels("IO"));
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].index, 0);
        assert!(v[0].rule.contains("I without preceding B/I"));

        let v = validate_bio(&labels("BOI"));
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].index, 2);
    }

    #[test]
    fn unknown_label_symbol_is_named() {
        let err = "E".parse::<BioLabel>().unwrap_err();
        assert!(err.to_string().contains("\"E\""));
    }

    #[test]
    fn spans_from_simple_runs() {
        assert_eq!(spans_from_bio(&labels("OBIO")).unwrap(), spans(&[(1, 2)]));
        assert_eq!(spans_from_bio(&labels("OOO")).unwrap(), spans(&[]));
        assert_eq!(
            spans_from_bio(&labels("BBI")).unwrap(),
            spans(&[(0, 0), (1, 2)])
        );
    }

    #[test]
    fn spans_rejects_invalid_bio() {
        assert!(spans_from_bio(&labels("IO")).is_err());
    }

    /// Reference automaton over {B,I,O}: accepts (O | B I*)*, collecting
    /// maximal B I* runs. Independent of the production scan.
    fn oracle_spans(seq: &[BioLabel]) -> Option<Vec<(usize, usize)>> {
        let mut result = Vec::new();
        let mut i = 0;
        while i < seq.len() {
            match seq[i] {
                BioLabel::O => i += 1,
                BioLabel::B => {
                    let start = i;
                    i += 1;
                    while i < seq.len() && seq[i] == BioLabel::I {
                        i += 1;
                    }
                    result.push((start, i - 1));
                }
                BioLabel::I => return None,
            }
        }
        Some(result)
    }

    #[test]
    fn spans_match_reference_automaton_exhaustively() {
        // every label string of length <= 6
        for len in 0..=6usize {
            for code in 0..3usize.pow(len as u32) {
                let mut seq = Vec::with_capacity(len);
                let mut c = code;
                for _ in 0..len {
                    seq.push(BioLabel::ALL[c % 3]);
                    c /= 3;
                }
                match oracle_spans(&seq) {
                    Some(expected) => {
                        let got = spans_from_bio(&seq).unwrap();
                        let expected: BTreeSet<AspectSpan> =
                            expected.iter().map(|&(s, e)| AspectSpan::new(s, e)).collect();
                        assert_eq!(got, expected, "sequence {seq:?}");
                    }
                    None => assert!(spans_from_bio(&seq).is_err(), "sequence {seq:?}"),
                }
            }
        }
    }

    #[test]
    fn bio_round_trip_exhaustive_to_len_8() {
        for len in 1..=8usize {
            for code in 0..3usize.pow(len as u32) {
                let mut seq = Vec::with_capacity(len);
                let mut c = code;
                for _ in 0..len {
                    seq.push(BioLabel::ALL[c % 3]);
                    c /= 3;
                }
                if validate_bio(&seq).is_empty() {
                    let spans = spans_from_bio(&seq).unwrap();
                    let back = bio_from_spans(&spans, len).unwrap();
                    assert_eq!(back, seq);
                }
            }
        }
    }

    #[test]
    fn validate_matches_regex_oracle_exhaustive_to_len_8() {
        // language (O | B I*)* as a hand-rolled regular expression check
        let accepts = |seq: &[BioLabel]| -> bool {
            let mut prev = BioLabel::O;
            let mut first = true;
            for &l in seq {
                if l == BioLabel::I && (first || prev == BioLabel::O) {
                    return false;
                }
                prev = l;
                first = false;
            }
            true
        };
        for len in 0..=8usize {
            for code in 0..3usize.pow(len as u32) {
                let mut seq = Vec::with_capacity(len);
                let mut c = code;
                for _ in 0..len {
                    seq.push(BioLabel::ALL[c % 3]);
                    c /= 3;
                }
                assert_eq!(
                    validate_bio(&seq).is_empty(),
                    accepts(&seq),
                    "sequence {seq:?}"
                );
            }
        }
    }

    #[test]
    fn repair_promotes_orphan_inside() {
        let mut seq = labels("IOIBII");
        repair_bio(&mut seq);
        assert_eq!(seq, labels("BOBBII"));
        assert!(validate_bio(&seq).is_empty());
    }

    #[test]
    fn repair_leaves_valid_sequences_alone() {
        for text in ["OBIO", "BBI", "OOO", "BIIIB"] {
            let mut seq = labels(text);
            repair_bio(&mut seq);
            assert_eq!(seq, labels(text));
        }
    }

    #[test]
    fn load_minimal_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mini.tsv");
        fs::write(&path, "Keyboard\tNN\tB\n\n").unwrap();
        let corpus = load_corpus(&path, "L").unwrap();
        assert_eq!(corpus.train.len(), 1);
        assert_eq!(corpus.test.len(), 0);
        assert_eq!(corpus.train[0].tokens, vec!["Keyboard"]);
        assert!(corpus.labelled);
    }

    #[test]
    fn load_empty_file_fails() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.tsv");
        fs::write(&path, "").unwrap();
        let err = load_corpus(&path, "L").unwrap_err();
        assert!(err.to_string().contains("no sentences"));
    }

    #[test]
    fn parse_error_carries_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tsv");
        fs::write(&path, "Keyboard\tNN\tB\nbroken line\n\n").unwrap();
        let err = load_corpus(&path, "L").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn bio_violation_names_sentence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tsv");
        fs::write(&path, "screen\tNN\tI\nglows\tVBZ\tO\n\n").unwrap();
        let err = load_corpus(&path, "L").unwrap_err();
        assert!(err.to_string().contains("L:0"), "{err}");
    }

    #[test]
    fn split_directive_and_unlabelled_train() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.tsv");
        fs::write(
            &path,
            "# split: train\nscreen\tNN\t-\nglows\tVBZ\t-\n\n# split: test\nscreen\tNN\tB\n\n",
        )
        .unwrap();
        let corpus = load_corpus(&path, "D").unwrap();
        assert!(!corpus.labelled);
        assert_eq!(corpus.train.len(), 1);
        assert!(corpus.train[0].bio_labels.is_none());
        assert_eq!(corpus.test.len(), 1);
        assert!(corpus.test[0].bio_labels.is_some());
    }

    #[test]
    fn corpus_write_load_round_trip() {
        let spec = device_reviews_spec("D", 24);
        let corpus = generate_synthetic_corpus(11, &spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.tsv");
        write_corpus(&corpus, &path).unwrap();
        let loaded = load_corpus(&path, "D").unwrap();
        assert_eq!(loaded, corpus);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        const POS_SET: [&str; 4] = ["NN", "VBZ", "JJ", "DT"];

        type RawSentence = Vec<(String, u8, u8)>;

        fn build_sentences(
            raw: &[RawSentence],
            labelled: bool,
            id_offset: usize,
        ) -> Vec<TaggedSentence> {
            raw.iter()
                .enumerate()
                .map(|(index, rows)| {
                    let tokens: Vec<String> = rows.iter().map(|(t, _, _)| t.clone()).collect();
                    let pos: Vec<String> = rows
                        .iter()
                        .map(|(_, p, _)| POS_SET[*p as usize % 4].to_string())
                        .collect();
                    let mut labels: Vec<BioLabel> = rows
                        .iter()
                        .map(|(_, _, l)| BioLabel::ALL[*l as usize % 3])
                        .collect();
                    repair_bio(&mut labels);
                    TaggedSentence::new(
                        format!("P:{}", id_offset + index),
                        tokens,
                        pos,
                        labelled.then_some(labels),
                    )
                    .unwrap()
                })
                .collect()
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn write_then_load_round_trips(
                raw_train in proptest::collection::vec(
                    proptest::collection::vec(("[a-z]{1,6}", 0u8..4, 0u8..3), 1..8), 1..6),
                raw_test in proptest::collection::vec(
                    proptest::collection::vec(("[a-z]{1,6}", 0u8..4, 0u8..3), 1..8), 0..4),
                train_labelled in proptest::bool::ANY,
            ) {
                let train = build_sentences(&raw_train, train_labelled, 0);
                let test = build_sentences(&raw_test, true, raw_train.len());
                let corpus = DomainCorpus::new("P", train, test).unwrap();

                let dir = tempfile::tempdir().unwrap();
                let path = dir.path().join("p.tsv");
                write_corpus(&corpus, &path).unwrap();
                let loaded = load_corpus(&path, "P").unwrap();
                prop_assert_eq!(loaded, corpus);
            }

            #[test]
            fn spans_round_trip_on_arbitrary_valid_bio(
                codes in proptest::collection::vec(0usize..3, 1..12),
            ) {
                let mut labels: Vec<BioLabel> = codes.iter().map(|&c| BioLabel::ALL[c]).collect();
                repair_bio(&mut labels);
                let spans = spans_from_bio(&labels).unwrap();
                let back = bio_from_spans(&spans, labels.len()).unwrap();
                prop_assert_eq!(back, labels);
            }
        }
    }
}
