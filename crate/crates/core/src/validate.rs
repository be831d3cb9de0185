//! Structural validation of every on-disk format the tools exchange:
//! corpora, triple files, concept lexicons, and pretrained embeddings.
//!
//! The readers elsewhere in this crate stop at the first problem and are
//! deliberately lenient about tag-scheme details; the validator instead
//! scans whole files, collects every violation with its file and line,
//! and applies the strict reading of the BIO scheme (`I-x` must continue
//! a `B-x`/`I-x` of the same type). It also checks cross-file closure:
//! every concept a lexicon names must be an entity somewhere in the
//! triple files, otherwise knowledge-base training cannot give it an
//! embedding.

use std::collections::BTreeSet;
use std::fmt;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use crate::kbembed::CONFIDENCE_FLOOR;

/// One problem found in one file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub file: String,
    /// 1-based; 0 for whole-file problems (unreadable, and so on).
    pub line: usize,
    pub reason: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {}", self.file, self.line, self.reason)
    }
}

fn violation(file: &str, line: usize, reason: impl Into<String>) -> Violation {
    Violation { file: file.to_string(), line, reason: reason.into() }
}

/// Lines the corpus/triple/lexicon formats all skip.
fn skippable(trimmed: &str) -> bool {
    trimmed.is_empty() || trimmed.starts_with('#')
}

// ---------------------------------------------------------------------------
// Corpus files
// ---------------------------------------------------------------------------

/// Tag of one corpus row, classified for the strict BIO scan.
enum TagShape {
    Outside,
    Begin(String),
    Inside(String),
}

fn classify_tag(tag: &str) -> std::result::Result<TagShape, String> {
    if tag == "O" {
        return Ok(TagShape::Outside);
    }
    if let Some(t) = tag.strip_prefix("B-") {
        if t.is_empty() {
            return Err("empty type after `B-`".into());
        }
        return Ok(TagShape::Begin(t.to_string()));
    }
    if let Some(t) = tag.strip_prefix("I-") {
        if t.is_empty() {
            return Err("empty type after `I-`".into());
        }
        return Ok(TagShape::Inside(t.to_string()));
    }
    Err(format!("tag {tag:?} is not `O`, `B-type`, or `I-type`"))
}

/// Scan one corpus: column structure, head flags, and strict BIO
/// continuity. Collects every violation instead of stopping.
pub fn validate_corpus(reader: impl BufRead, file: &str) -> Vec<Violation> {
    let mut out = Vec::new();
    // Type of the entity still open at the previous token, if any.
    let mut open: Option<String> = None;
    for (lineno, line) in reader.lines().enumerate() {
        let line = match line {
            Ok(l) => l,
            Err(e) => {
                out.push(violation(file, lineno + 1, format!("unreadable: {e}")));
                return out;
            }
        };
        let lineno = lineno + 1;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.is_empty() {
            open = None;
            continue;
        }
        if trimmed.starts_with('#') || trimmed == "-DOCSTART-" {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() < 2 || fields.len() > 3 {
            out.push(violation(
                file,
                lineno,
                format!("expected `surface<TAB>tag[<TAB>head]`, got {} fields", fields.len()),
            ));
            open = None;
            continue;
        }
        if fields[0].is_empty() {
            out.push(violation(file, lineno, "empty surface"));
        }
        if fields.len() == 3 && fields[2] != "0" && fields[2] != "1" {
            out.push(violation(
                file,
                lineno,
                format!("head flag must be 0 or 1, got {:?}", fields[2]),
            ));
        }
        match classify_tag(fields[1]) {
            Err(reason) => {
                out.push(violation(file, lineno, reason));
                open = None;
            }
            Ok(TagShape::Outside) => open = None,
            Ok(TagShape::Begin(t)) => open = Some(t),
            Ok(TagShape::Inside(t)) => {
                if open.as_deref() != Some(&t) {
                    out.push(violation(
                        file,
                        lineno,
                        match &open {
                            None => format!("`I-{t}` does not continue an entity"),
                            Some(o) => format!("`I-{t}` continues an entity of type {o:?}"),
                        },
                    ));
                }
                open = Some(t);
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Triple files
// ---------------------------------------------------------------------------

/// Scan one triple file. Besides violations, returns the entities of
/// every *retained* row (confidence at or above the floor), the set a
/// knowledge-base training run would actually embed.
pub fn validate_triples(reader: impl BufRead, file: &str) -> (Vec<Violation>, BTreeSet<String>) {
    let mut out = Vec::new();
    let mut entities = BTreeSet::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = match line {
            Ok(l) => l,
            Err(e) => {
                out.push(violation(file, lineno + 1, format!("unreadable: {e}")));
                return (out, entities);
            }
        };
        let lineno = lineno + 1;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if skippable(trimmed) {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() < 3 || fields.len() > 4 {
            out.push(violation(
                file,
                lineno,
                format!("expected `e1<TAB>rel<TAB>e2[<TAB>conf]`, got {} fields", fields.len()),
            ));
            continue;
        }
        if fields[..3].iter().any(|f| f.is_empty()) {
            out.push(violation(file, lineno, "empty entity or relation"));
            continue;
        }
        let mut retained = true;
        if fields.len() == 4 {
            match fields[3].parse::<f64>() {
                Ok(c) if (0.0..=1.0).contains(&c) => retained = c >= CONFIDENCE_FLOOR,
                Ok(c) => {
                    out.push(violation(file, lineno, format!("confidence {c} outside [0, 1]")));
                    continue;
                }
                Err(e) => {
                    out.push(violation(
                        file,
                        lineno,
                        format!("bad confidence {:?}: {e}", fields[3]),
                    ));
                    continue;
                }
            }
        }
        if retained {
            entities.insert(fields[0].to_string());
            entities.insert(fields[2].to_string());
        }
    }
    (out, entities)
}

// ---------------------------------------------------------------------------
// Lexicon files
// ---------------------------------------------------------------------------

/// Scan one lexicon. Returns the concepts referenced, with the line that
/// references them, for the closure check.
pub fn validate_lexicon(
    reader: impl BufRead,
    file: &str,
) -> (Vec<Violation>, Vec<(usize, String)>) {
    let mut out = Vec::new();
    let mut refs = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = match line {
            Ok(l) => l,
            Err(e) => {
                out.push(violation(file, lineno + 1, format!("unreadable: {e}")));
                return (out, refs);
            }
        };
        let lineno = lineno + 1;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if skippable(trimmed) {
            continue;
        }
        let Some((surface, concepts)) = trimmed.split_once('\t') else {
            out.push(violation(file, lineno, "expected `surface<TAB>concepts`"));
            continue;
        };
        if surface.is_empty() {
            out.push(violation(file, lineno, "empty surface"));
        }
        let names: Vec<&str> =
            concepts.split(',').map(str::trim).filter(|c| !c.is_empty()).collect();
        if names.is_empty() {
            out.push(violation(file, lineno, format!("surface {surface:?} lists no concepts")));
        }
        for n in names {
            refs.push((lineno, n.to_string()));
        }
    }
    (out, refs)
}

// ---------------------------------------------------------------------------
// Embedding files
// ---------------------------------------------------------------------------

/// Scan one embedding text file: a `count dim` header, then rows of
/// `name .. v1 .. vd` whose last `dim` tokens are finite numbers (names
/// may contain spaces). The row count must match the header.
pub fn validate_embeddings(reader: impl BufRead, file: &str) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut header: Option<(usize, usize)> = None;
    let mut rows = 0usize;
    let mut last_line = 0usize;
    for (lineno, line) in reader.lines().enumerate() {
        let line = match line {
            Ok(l) => l,
            Err(e) => {
                out.push(violation(file, lineno + 1, format!("unreadable: {e}")));
                return out;
            }
        };
        let lineno = lineno + 1;
        last_line = lineno;
        if line.trim().is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let Some((_, dim)) = header else {
            let count = tokens.first().and_then(|s| s.parse::<usize>().ok());
            let dim = tokens.get(1).and_then(|s| s.parse::<usize>().ok());
            match (count, dim) {
                (Some(c), Some(d)) if d > 0 => header = Some((c, d)),
                _ => {
                    out.push(violation(
                        file,
                        lineno,
                        format!("expected a `count dim` header, got {:?}", line.trim()),
                    ));
                    return out;
                }
            }
            continue;
        };
        rows += 1;
        if tokens.len() < dim + 1 {
            out.push(violation(
                file,
                lineno,
                format!("row has {} tokens, need at least {}", tokens.len(), dim + 1),
            ));
            continue;
        }
        for v in &tokens[tokens.len() - dim..] {
            match v.parse::<f64>() {
                Ok(x) if x.is_finite() => {}
                _ => out.push(violation(file, lineno, format!("bad value {v:?}"))),
            }
        }
    }
    match header {
        None => out.push(violation(file, last_line, "empty embedding file")),
        Some((count, _)) if count != rows => {
            out.push(violation(
                file,
                last_line,
                format!("header promises {count} rows, found {rows}"),
            ));
        }
        Some(_) => {}
    }
    out
}

// ---------------------------------------------------------------------------
// Whole file sets
// ---------------------------------------------------------------------------

/// The files one validation run covers, grouped by format.
#[derive(Debug, Clone, Default)]
pub struct FileSet {
    pub corpora: Vec<PathBuf>,
    pub triples: Vec<PathBuf>,
    pub lexicons: Vec<PathBuf>,
    pub embeddings: Vec<PathBuf>,
}

fn open(path: &Path, out: &mut Vec<Violation>) -> Option<std::io::BufReader<std::fs::File>> {
    match std::fs::File::open(path) {
        Ok(f) => Some(std::io::BufReader::new(f)),
        Err(e) => {
            out.push(violation(&path.display().to_string(), 0, format!("cannot open: {e}")));
            None
        }
    }
}

/// Validate every file in the set, plus lexicon→triple concept closure
/// when both kinds are present. An empty result means the set is clean.
pub fn validate_files(set: &FileSet) -> Vec<Violation> {
    let mut out = Vec::new();

    for path in &set.corpora {
        if let Some(r) = open(path, &mut out) {
            out.extend(validate_corpus(r, &path.display().to_string()));
        }
    }

    let mut entities = BTreeSet::new();
    let mut any_triples = false;
    for path in &set.triples {
        if let Some(r) = open(path, &mut out) {
            any_triples = true;
            let (vs, ents) = validate_triples(r, &path.display().to_string());
            out.extend(vs);
            entities.extend(ents);
        }
    }

    for path in &set.lexicons {
        if let Some(r) = open(path, &mut out) {
            let file = path.display().to_string();
            let (vs, refs) = validate_lexicon(r, &file);
            out.extend(vs);
            if any_triples {
                for (lineno, concept) in refs {
                    if !entities.contains(&concept) {
                        out.push(violation(
                            &file,
                            lineno,
                            format!("concept {concept:?} has no entity in the triple files"),
                        ));
                    }
                }
            }
        }
    }

    for path in &set.embeddings {
        if let Some(r) = open(path, &mut out) {
            out.extend(validate_embeddings(r, &path.display().to_string()));
        }
    }

    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kbembed::write_triples;
    use crate::knowattn::write_lexicon;
    use crate::pipeline::write_corpus;
    use crate::synth::{gen_disambiguation, SynthSpec};

    #[test]
    fn bare_inside_tag_is_flagged_at_its_line() {
        let text = "he\tO\nclinton\tI-PER\nspoke\tO\n";
        let vs = validate_corpus(text.as_bytes(), "c.tsv");
        assert_eq!(vs.len(), 1);
        assert_eq!(vs[0].line, 2);
        assert!(vs[0].reason.contains("I-PER"), "{}", vs[0].reason);
        assert_eq!(vs[0].to_string(), format!("c.tsv:2: {}", vs[0].reason));
    }

    #[test]
    fn type_switches_and_sentence_starts_are_bio_violations() {
        // I-LOC directly after B-PER, and I-PER opening a sentence.
        let text = "mary\tB-PER\nhill\tI-LOC\n\nsmith\tI-PER\n";
        let vs = validate_corpus(text.as_bytes(), "c.tsv");
        let lines: Vec<usize> = vs.iter().map(|v| v.line).collect();
        assert_eq!(lines, vec![2, 4]);
        // A B-PER after I-PER of the same type is fine; so is I after I.
        let ok = "a\tB-PER\nb\tI-PER\nc\tI-PER\nd\tB-PER\n";
        assert!(validate_corpus(ok.as_bytes(), "c.tsv").is_empty());
    }

    #[test]
    fn corpus_structure_problems_are_collected_not_fatal() {
        let text = "one\ttoo\tmany\tfields\nok\tO\n\tO\nx\tB-PER\t2\ny\tQ-PER\n";
        let vs = validate_corpus(text.as_bytes(), "c.tsv");
        let lines: Vec<usize> = vs.iter().map(|v| v.line).collect();
        assert_eq!(lines, vec![1, 3, 4, 5]);
        assert!(vs[0].reason.contains("4 fields"));
        assert!(vs[1].reason.contains("empty surface"));
        assert!(vs[2].reason.contains("head flag"));
        assert!(vs[3].reason.contains("Q-PER"));
    }

    #[test]
    fn triple_confidence_gates_the_entity_set() {
        let text = "a\tis_a\tcat0\nb\tis_a\tcat1\t0.5\nc\tis_a\tcat2\t0.95\n";
        let (vs, ents) = validate_triples(text.as_bytes(), "t.tsv");
        assert!(vs.is_empty());
        // The 0.5-confidence row is dropped by the reader, so cat1 never
        // gets an embedding.
        assert!(ents.contains("cat0") && ents.contains("cat2"));
        assert!(!ents.contains("cat1"));
    }

    #[test]
    fn malformed_triples_are_flagged() {
        let text = "a\tis_a\nb\tis_a\tcat\tmaybe\nc\tis_a\tcat\t1.5\n\tis_a\tcat\n";
        let (vs, _) = validate_triples(text.as_bytes(), "t.tsv");
        let lines: Vec<usize> = vs.iter().map(|v| v.line).collect();
        assert_eq!(lines, vec![1, 2, 3, 4]);
        assert!(vs[1].reason.contains("maybe"));
        assert!(vs[2].reason.contains("outside"));
    }

    #[test]
    fn lexicon_problems_and_references_are_reported() {
        let text = "clinton\tperson,city\nno-tab-here\nx\t , \n";
        let (vs, refs) = validate_lexicon(text.as_bytes(), "l.tsv");
        assert_eq!(vs.len(), 2);
        assert_eq!(vs[0].line, 2);
        assert_eq!(vs[1].line, 3);
        let names: Vec<&str> = refs.iter().map(|(_, c)| c.as_str()).collect();
        assert_eq!(names, ["person", "city"]);
    }

    #[test]
    fn embedding_files_are_checked_against_their_header() {
        // Multi-word names are legal; the last `dim` tokens are values.
        let clean = "2 2\nthe 0.1 0.2\nnew york 0.3 0.4\n";
        assert!(validate_embeddings(clean.as_bytes(), "e.txt").is_empty());

        let text = "3 2\nthe 0.1 0.2\nof 0.5\nand nan 0.1\n";
        let vs = validate_embeddings(text.as_bytes(), "e.txt");
        let lines: Vec<usize> = vs.iter().map(|v| v.line).collect();
        assert_eq!(lines, vec![3, 4]);
        assert!(vs[0].reason.contains("2 tokens"));
        assert!(vs[1].reason.contains("nan"));

        let short = "5 2\nthe 0.1 0.2\n";
        let vs = validate_embeddings(short.as_bytes(), "e.txt");
        assert_eq!(vs.len(), 1);
        assert!(vs[0].reason.contains("promises 5"), "{}", vs[0].reason);

        let vs = validate_embeddings("not a header\n".as_bytes(), "e.txt");
        assert!(vs[0].reason.contains("header"));
    }

    #[test]
    fn generated_fixture_set_is_clean_end_to_end() {
        // Generator–validator closure over real files.
        let spec = SynthSpec {
            train_sentences: 40,
            dev_sentences: 10,
            test_sentences: 10,
            ..SynthSpec::default()
        };
        let c = gen_disambiguation(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = |name: &str| dir.path().join(name);
        let write = |name: &str, f: &dyn Fn(&mut Vec<u8>)| {
            let mut buf = Vec::new();
            f(&mut buf);
            std::fs::write(path(name), buf).unwrap();
        };
        write("train.tsv", &|b| write_corpus(&c.train, b).unwrap());
        write("dev.tsv", &|b| write_corpus(&c.dev, b).unwrap());
        write("test.tsv", &|b| write_corpus(&c.test, b).unwrap());
        write("triples.tsv", &|b| write_triples(&c.triples, b).unwrap());
        write("lexicon.tsv", &|b| write_lexicon(&c.lexicon, b).unwrap());

        let set = FileSet {
            corpora: vec![path("train.tsv"), path("dev.tsv"), path("test.tsv")],
            triples: vec![path("triples.tsv")],
            lexicons: vec![path("lexicon.tsv")],
            embeddings: vec![],
        };
        let vs = validate_files(&set);
        assert!(vs.is_empty(), "clean fixtures flagged: {:?}", vs);
    }

    #[test]
    fn closure_violation_names_the_lexicon_line() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("t.tsv");
        let l = dir.path().join("l.tsv");
        std::fs::write(&t, "springfield\tis_a\tcity\n").unwrap();
        std::fs::write(&l, "springfield\tcity\nshelbyville\tcity,myth\n").unwrap();
        let set = FileSet {
            triples: vec![t],
            lexicons: vec![l.clone()],
            ..FileSet::default()
        };
        let vs = validate_files(&set);
        assert_eq!(vs.len(), 1);
        assert_eq!(vs[0].line, 2);
        assert!(vs[0].reason.contains("myth"), "{}", vs[0].reason);

        // Without triple files there is nothing to close over.
        let set = FileSet { lexicons: vec![l], ..FileSet::default() };
        assert!(validate_files(&set).is_empty());
    }

    #[test]
    fn missing_file_is_a_whole_file_violation() {
        let set = FileSet {
            corpora: vec![PathBuf::from("/nonexistent/corpus.tsv")],
            ..FileSet::default()
        };
        let vs = validate_files(&set);
        assert_eq!(vs.len(), 1);
        assert_eq!(vs[0].line, 0);
        assert!(vs[0].reason.contains("cannot open"));
    }
}
