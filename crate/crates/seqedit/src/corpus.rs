//! Annotation-dump parsing, quality filtering, coverage statistics, and
//! templated pair-file emission.
//!
//! The dump format is line-oriented UTF-8 with 8 tab-separated columns:
//! accession, sequence, evidence level, then the five property fields
//! (name, function, subcellular location, biological process, similarity).
//! Empty columns mean an absent field; embedded tabs/newlines/backslashes
//! are escaped as `\t`, `\n`, `\\`. Parsing is streaming: one record in
//! memory at a time, malformed lines are reported (with their line number)
//! and skipped rather than aborting the run.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::tokenize::validate_sequence;

pub const PROPERTY_FIELD_COUNT: usize = 5;

pub const FIELD_NAMES: [&str; PROPERTY_FIELD_COUNT] = [
    "name",
    "function",
    "subcellular_location",
    "biological_process",
    "similarity",
];

const FIELD_LABELS: [&str; PROPERTY_FIELD_COUNT] = [
    "Protein Name",
    "Function",
    "Subcellular Location",
    "Biological Process",
    "Similarity",
];

/// One protein entry: sequence, annotation evidence tier (1 strongest .. 5
/// weakest), and the five optional biotext property fields.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationRecord {
    pub accession: String,
    pub sequence: String,
    pub evidence_level: u8,
    pub name: Option<String>,
    pub function: Option<String>,
    pub subcellular_location: Option<String>,
    pub biological_process: Option<String>,
    pub similarity: Option<String>,
}

impl AnnotationRecord {
    pub fn fields(&self) -> [&Option<String>; PROPERTY_FIELD_COUNT] {
        [
            &self.name,
            &self.function,
            &self.subcellular_location,
            &self.biological_process,
            &self.similarity,
        ]
    }

    pub fn present_field_count(&self) -> usize {
        self.fields().iter().filter(|f| f.is_some()).count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.accession.is_empty() {
            return Err(Error::InvalidArgument("empty accession".into()));
        }
        if self.sequence.is_empty() {
            return Err(Error::InvalidArgument("empty sequence".into()));
        }
        validate_sequence(&self.sequence)?;
        if !(1..=5).contains(&self.evidence_level) {
            return Err(Error::InvalidArgument(format!(
                "evidence out of range: {}",
                self.evidence_level
            )));
        }
        for (field, name) in self.fields().iter().zip(FIELD_NAMES) {
            if let Some(v) = field {
                if v.trim().is_empty() || v.trim() != v.as_str() {
                    return Err(Error::InvalidArgument(format!(
                        "field {name} must be a non-empty trimmed string"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn escape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out
}

fn unescape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(ch) = chars.next() {
        if ch != '\\' {
            out.push(ch);
            continue;
        }
        match chars.next() {
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('\\') => out.push('\\'),
            Some(other) => {
                out.push('\\');
                out.push(other);
            }
            None => out.push('\\'),
        }
    }
    out
}

fn parse_optional(column: &str) -> Option<String> {
    if column.is_empty() {
        None
    } else {
        Some(unescape_field(column))
    }
}

/// Parse one dump line. The line number is only used for error reporting.
pub fn parse_line(line: &str, line_no: u64) -> Result<AnnotationRecord> {
    let malformed = |msg: String| Error::MalformedRecord { line: line_no, msg };
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != 3 + PROPERTY_FIELD_COUNT {
        return Err(malformed(format!(
            "expected {} tab-separated columns, got {}",
            3 + PROPERTY_FIELD_COUNT,
            cols.len()
        )));
    }
    let evidence_level: u8 = cols[2]
        .parse()
        .map_err(|_| malformed(format!("unparseable evidence level {:?}", cols[2])))?;
    if !(1..=5).contains(&evidence_level) {
        return Err(malformed("evidence out of range".into()));
    }
    let record = AnnotationRecord {
        accession: cols[0].to_string(),
        sequence: cols[1].to_string(),
        evidence_level,
        name: parse_optional(cols[3]),
        function: parse_optional(cols[4]),
        subcellular_location: parse_optional(cols[5]),
        biological_process: parse_optional(cols[6]),
        similarity: parse_optional(cols[7]),
    };
    record
        .validate()
        .map_err(|e| malformed(e.to_string()))?;
    Ok(record)
}

pub fn format_line(record: &AnnotationRecord) -> String {
    let fields: Vec<String> = record
        .fields()
        .iter()
        .map(|f| f.as_deref().map(escape_field).unwrap_or_default())
        .collect();
    format!(
        "{}\t{}\t{}\t{}",
        record.accession,
        record.sequence,
        record.evidence_level,
        fields.join("\t")
    )
}

/// Streaming dump parser. Yields `Ok(record)` per well-formed line and
/// `Err(Error::MalformedRecord)` per bad line (recoverable: callers log and
/// continue); an I/O failure surfaces as `Err(Error::Io)` and ends the
/// stream.
pub struct DumpParser<R: BufRead> {
    lines: std::io::Lines<R>,
    line_no: u64,
    io_failed: bool,
}

impl<R: BufRead> DumpParser<R> {
    pub fn new(reader: R) -> Self {
        DumpParser {
            lines: reader.lines(),
            line_no: 0,
            io_failed: false,
        }
    }
}

impl<R: BufRead> Iterator for DumpParser<R> {
    type Item = Result<AnnotationRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.io_failed {
            return None;
        }
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => {
                    self.io_failed = true;
                    return Some(Err(Error::Io(e)));
                }
            };
            self.line_no += 1;
            if line.is_empty() {
                continue;
            }
            return Some(parse_line(&line, self.line_no));
        }
    }
}

pub fn write_dump<'a>(
    mut w: impl Write,
    records: impl IntoIterator<Item = &'a AnnotationRecord>,
) -> Result<()> {
    for record in records {
        writeln!(w, "{}", format_line(record))?;
    }
    Ok(())
}

/// Fraction of the five property fields that are present.
pub fn coverage_ratio(record: &AnnotationRecord) -> f64 {
    record.present_field_count() as f64 / PROPERTY_FIELD_COUNT as f64
}

/// The quality filter: keep records with coverage ≥ `min_coverage` (strict
/// less-than is the removal test, so a record at exactly the threshold is
/// kept) and evidence level ≤ `max_evidence`.
pub fn record_passes(record: &AnnotationRecord, min_coverage: f64, max_evidence: u8) -> bool {
    coverage_ratio(record) >= min_coverage && record.evidence_level <= max_evidence
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FilterReport {
    pub kept: usize,
    pub removed: usize,
}

/// In-memory filter preserving input order.
pub fn filter_corpus(
    records: &[AnnotationRecord],
    min_coverage: f64,
    max_evidence: u8,
) -> (Vec<AnnotationRecord>, FilterReport) {
    let mut kept = Vec::new();
    let mut report = FilterReport::default();
    for record in records {
        if record_passes(record, min_coverage, max_evidence) {
            kept.push(record.clone());
            report.kept += 1;
        } else {
            report.removed += 1;
        }
    }
    (kept, report)
}

/// Deterministic biotext template over the present fields, in the fixed
/// field order. Errors when every field is absent.
pub fn template_biotext(record: &AnnotationRecord) -> Result<String> {
    if record.present_field_count() == 0 {
        return Err(Error::InvalidArgument(format!(
            "untemplatable record {}: all property fields absent",
            record.accession
        )));
    }
    let clauses: Vec<String> = record
        .fields()
        .iter()
        .zip(FIELD_LABELS)
        .filter_map(|(field, label)| {
            field.as_ref().map(|v| format!("{label}: {v}."))
        })
        .collect();
    Ok(clauses.join(" "))
}

/// Per-field coverage ratios and per-field × evidence-level counts.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStats {
    pub total: usize,
    pub field_present: [usize; PROPERTY_FIELD_COUNT],
    /// `counts[field][level-1]` = records with that field present at that
    /// evidence level.
    pub counts: [[usize; 5]; PROPERTY_FIELD_COUNT],
}

impl CorpusStats {
    pub fn coverage(&self, field: usize) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.field_present[field] as f64 / self.total as f64
        }
    }

    /// Key-value report: field → coverage ratio, field × evidence → count.
    pub fn to_report(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("total_records = {}\n", self.total));
        for (f, name) in FIELD_NAMES.iter().enumerate() {
            out.push_str(&format!("coverage.{name} = {:.6}\n", self.coverage(f)));
        }
        for (f, name) in FIELD_NAMES.iter().enumerate() {
            for level in 1..=5usize {
                out.push_str(&format!(
                    "count.{name}.evidence_{level} = {}\n",
                    self.counts[f][level - 1]
                ));
            }
        }
        out
    }
}

pub fn compute_stats<'a>(records: impl IntoIterator<Item = &'a AnnotationRecord>) -> CorpusStats {
    let mut stats = CorpusStats {
        total: 0,
        field_present: [0; PROPERTY_FIELD_COUNT],
        counts: [[0; 5]; PROPERTY_FIELD_COUNT],
    };
    for record in records {
        stats.total += 1;
        for (f, field) in record.fields().iter().enumerate() {
            if field.is_some() {
                stats.field_present[f] += 1;
                stats.counts[f][(record.evidence_level - 1) as usize] += 1;
            }
        }
    }
    stats
}

/// A curated (accession, sequence, biotext) pair; one line of the pair file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pair {
    pub accession: String,
    pub sequence: String,
    pub biotext: String,
}

impl Pair {
    pub fn to_line(&self) -> String {
        format!("{}\t{}\t{}", self.accession, self.sequence, self.biotext)
    }

    pub fn parse_line(line: &str, line_no: u64) -> Result<Pair> {
        let mut cols = line.splitn(3, '\t');
        let accession = cols.next().unwrap_or("").to_string();
        let (sequence, biotext) = match (cols.next(), cols.next()) {
            (Some(s), Some(b)) => (s.to_string(), b.to_string()),
            _ => {
                return Err(Error::MalformedRecord {
                    line: line_no,
                    msg: "pair line needs 3 tab-separated columns".into(),
                })
            }
        };
        Ok(Pair {
            accession,
            sequence,
            biotext,
        })
    }
}

pub fn read_pairs(reader: impl BufRead) -> Result<Vec<Pair>> {
    let mut pairs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        pairs.push(Pair::parse_line(&line, i as u64 + 1)?);
    }
    Ok(pairs)
}

pub fn write_pairs<'a>(mut w: impl Write, pairs: impl IntoIterator<Item = &'a Pair>) -> Result<()> {
    for pair in pairs {
        writeln!(w, "{}", pair.to_line())?;
    }
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct CurateReport {
    pub parsed: usize,
    pub malformed: Vec<String>,
    pub filter: FilterReport,
    pub untemplatable: usize,
    pub stats: Option<CorpusStats>,
}

/// Streaming curation: parse → filter → template → write pairs, one record
/// resident at a time. Malformed lines are collected for logging; when
/// `collect_stats` is set the (pre-filter) corpus statistics are recorded.
pub fn curate_stream(
    reader: impl BufRead,
    mut pair_writer: impl Write,
    min_coverage: f64,
    max_evidence: u8,
    collect_stats: bool,
) -> Result<CurateReport> {
    let mut report = CurateReport::default();
    let mut stats = CorpusStats {
        total: 0,
        field_present: [0; PROPERTY_FIELD_COUNT],
        counts: [[0; 5]; PROPERTY_FIELD_COUNT],
    };
    for item in DumpParser::new(reader) {
        let record = match item {
            Ok(r) => r,
            Err(e @ Error::MalformedRecord { .. }) => {
                report.malformed.push(e.to_string());
                continue;
            }
            Err(e) => return Err(e),
        };
        report.parsed += 1;
        if collect_stats {
            stats.total += 1;
            for (f, field) in record.fields().iter().enumerate() {
                if field.is_some() {
                    stats.field_present[f] += 1;
                    stats.counts[f][(record.evidence_level - 1) as usize] += 1;
                }
            }
        }
        if !record_passes(&record, min_coverage, max_evidence) {
            report.filter.removed += 1;
            continue;
        }
        match template_biotext(&record) {
            Ok(biotext) => {
                let pair = Pair {
                    accession: record.accession,
                    sequence: record.sequence,
                    biotext,
                };
                writeln!(pair_writer, "{}", pair.to_line())?;
                report.filter.kept += 1;
            }
            Err(_) => {
                report.untemplatable += 1;
                report.filter.removed += 1;
            }
        }
    }
    if collect_stats {
        report.stats = Some(stats);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(accession: &str, evidence: u8, fields: [Option<&str>; 5]) -> AnnotationRecord {
        AnnotationRecord {
            accession: accession.to_string(),
            sequence: "ACDE".to_string(),
            evidence_level: evidence,
            name: fields[0].map(String::from),
            function: fields[1].map(String::from),
            subcellular_location: fields[2].map(String::from),
            biological_process: fields[3].map(String::from),
            similarity: fields[4].map(String::from),
        }
    }

    #[test]
    fn minimal_line_parses() {
        let r = parse_line("P1\tACDE\t1\tFoo\t\t\t\t", 1).unwrap();
        assert_eq!(r.accession, "P1");
        assert_eq!(r.evidence_level, 1);
        assert_eq!(r.name.as_deref(), Some("Foo"));
        assert_eq!(r.present_field_count(), 1);
    }

    #[test]
    fn evidence_out_of_range_is_recoverable_line_error() {
        let err = parse_line("P1\tACDE\t6\tFoo\t\t\t\t", 3).unwrap_err();
        match err {
            Error::MalformedRecord { line, msg } => {
                assert_eq!(line, 3);
                assert!(msg.contains("evidence out of range"));
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn parser_skips_malformed_and_preserves_order() {
        let dump = "P1\tACDE\t1\tA\t\t\t\t\nbadline\nP2\tACDE\t2\tB\t\t\t\t\n";
        let items: Vec<_> = DumpParser::new(dump.as_bytes()).collect();
        assert_eq!(items.len(), 3);
        assert!(items[1].is_err());
        let good: Vec<_> = items.into_iter().filter_map(|r| r.ok()).collect();
        assert_eq!(good[0].accession, "P1");
        assert_eq!(good[1].accession, "P2");
    }

    #[test]
    fn coverage_ratio_counts_fifths() {
        let all = record("P", 1, [Some("a"), Some("b"), Some("c"), Some("d"), Some("e")]);
        assert_eq!(coverage_ratio(&all), 1.0);
        let two = record("P", 1, [Some("a"), None, Some("c"), None, None]);
        assert_eq!(coverage_ratio(&two), 0.4);
        let none = record("P", 1, [None; 5]);
        assert_eq!(coverage_ratio(&none), 0.0);
    }

    #[test]
    fn filter_keeps_exactly_the_boundary() {
        let records = vec![
            record("FULL_EV4", 4, [Some("a"), Some("b"), Some("c"), Some("d"), Some("e")]),
            record("LOW_EV1", 1, [Some("a"), None, None, None, None]),
            record("BOUNDARY", 3, [Some("a"), Some("b"), None, None, None]),
        ];
        let (kept, report) = filter_corpus(&records, 0.4, 3);
        assert_eq!(report.kept, 1);
        assert_eq!(report.removed, 2);
        assert_eq!(kept[0].accession, "BOUNDARY");
    }

    #[test]
    fn filter_is_idempotent() {
        let records: Vec<AnnotationRecord> = (0..20)
            .map(|i| {
                record(
                    &format!("P{i}"),
                    (i % 5 + 1) as u8,
                    [
                        (i % 2 == 0).then_some("a"),
                        (i % 3 == 0).then_some("b"),
                        (i % 4 == 0).then_some("c"),
                        None,
                        (i % 7 == 0).then_some("e"),
                    ],
                )
            })
            .collect();
        let (once, r1) = filter_corpus(&records, 0.4, 3);
        let (twice, r2) = filter_corpus(&once, 0.4, 3);
        assert_eq!(once, twice);
        assert_eq!(r2.removed, 0);
        assert_eq!(r1.kept + r1.removed, records.len());
    }

    #[test]
    fn template_single_field() {
        let r = record("P", 1, [Some("Kinase A"), None, None, None, None]);
        assert_eq!(template_biotext(&r).unwrap(), "Protein Name: Kinase A.");
    }

    #[test]
    fn template_fixed_order_golden() {
        let r = record("P", 1, [Some("Kinase A"), Some("Phosphorylates B"), None, None, None]);
        assert_eq!(
            template_biotext(&r).unwrap(),
            "Protein Name: Kinase A. Function: Phosphorylates B."
        );
        let full = record("P", 1, [Some("N"), Some("F"), Some("L"), Some("B"), Some("S")]);
        assert_eq!(
            template_biotext(&full).unwrap(),
            "Protein Name: N. Function: F. Subcellular Location: L. Biological Process: B. Similarity: S."
        );
    }

    #[test]
    fn template_all_absent_errors() {
        let r = record("P", 1, [None; 5]);
        assert!(template_biotext(&r).is_err());
    }

    #[test]
    fn stats_empty_input_is_all_zero() {
        let stats = compute_stats([]);
        assert_eq!(stats.total, 0);
        assert_eq!(stats.coverage(0), 0.0);
    }

    #[test]
    fn stats_match_hand_count() {
        let records = vec![
            record("A", 1, [Some("n"), Some("f"), None, None, None]),
            record("B", 1, [None, Some("f"), None, None, None]),
            record("C", 3, [Some("n"), Some("f"), None, None, None]),
            record("D", 3, [None, None, None, None, Some("s")]),
            record("E", 5, [Some("n"), None, None, None, None]),
        ];
        let stats = compute_stats(records.iter());
        assert_eq!(stats.total, 5);
        assert_eq!(stats.coverage(1), 0.6); // function present on 3 of 5
        assert_eq!(stats.counts[0][0], 1); // name at evidence level 1: A
        assert_eq!(stats.counts[0][2], 1); // name at evidence level 3: C
        assert_eq!(stats.counts[0][4], 1); // name at evidence level 5: E
        assert_eq!(stats.counts[1][0], 2); // function at evidence level 1: A, B
    }

    #[test]
    fn stats_recount_brute_force() {
        let records: Vec<AnnotationRecord> = (0..37)
            .map(|i| {
                record(
                    &format!("P{i}"),
                    (i % 5 + 1) as u8,
                    [
                        (i % 2 == 0).then_some("a"),
                        (i % 3 == 0).then_some("b"),
                        None,
                        (i % 5 == 0).then_some("d"),
                        (i % 7 == 0).then_some("e"),
                    ],
                )
            })
            .collect();
        let stats = compute_stats(records.iter());
        // Independent recount.
        for (f, _) in FIELD_NAMES.iter().enumerate() {
            let present = records.iter().filter(|r| r.fields()[f].is_some()).count();
            assert_eq!(stats.field_present[f], present);
            let mut per_level_total = 0;
            for level in 1..=5u8 {
                let n = records
                    .iter()
                    .filter(|r| r.evidence_level == level && r.fields()[f].is_some())
                    .count();
                assert_eq!(stats.counts[f][(level - 1) as usize], n);
                per_level_total += n;
            }
            assert_eq!(per_level_total, present);
        }
    }

    #[test]
    fn dump_round_trip_with_escapes() {
        let r = AnnotationRecord {
            accession: "P42".into(),
            sequence: "ACDEX".into(),
            evidence_level: 2,
            name: Some("has\ttab".into()),
            function: Some("has\nnewline and \\ backslash".into()),
            subcellular_location: None,
            biological_process: None,
            similarity: None,
        };
        let line = format_line(&r);
        assert!(!line.contains('\n'));
        let parsed = parse_line(&line, 1).unwrap();
        assert_eq!(parsed, r);
    }

    #[test]
    fn curate_stream_reports_counts() {
        let dump = "\
P1\tACDE\t1\tname\tfn\t\t\t
P2\tACDE\t4\tname\tfn\tloc\tproc\tsim
P3\tACDE\t1\tname\t\t\t\t
bad line
P4\tACDE\t2\tn\tf\tl\t\t
";
        let mut out = Vec::new();
        let report = curate_stream(dump.as_bytes(), &mut out, 0.4, 3, true).unwrap();
        assert_eq!(report.parsed, 4);
        assert_eq!(report.malformed.len(), 1);
        assert_eq!(report.filter.kept, 2); // P1 (2/5), P4 (3/5); P2 evidence 4; P3 coverage 1/5
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().next().unwrap().starts_with("P1\t"));
        let stats = report.stats.unwrap();
        assert_eq!(stats.total, 4);
    }

    proptest! {
        #[test]
        fn kept_plus_removed_partitions_input(
            seeds in proptest::collection::vec((1u8..=5, 0u8..32), 0..40)
        ) {
            let records: Vec<AnnotationRecord> = seeds
                .iter()
                .enumerate()
                .map(|(i, &(ev, bits))| {
                    record(
                        &format!("P{i}"),
                        ev,
                        [
                            (bits & 1 != 0).then_some("a"),
                            (bits & 2 != 0).then_some("b"),
                            (bits & 4 != 0).then_some("c"),
                            (bits & 8 != 0).then_some("d"),
                            (bits & 16 != 0).then_some("e"),
                        ],
                    )
                })
                .collect();
            let (kept, report) = filter_corpus(&records, 0.4, 3);
            prop_assert_eq!(report.kept + report.removed, records.len());
            prop_assert_eq!(kept.len(), report.kept);
            for k in &kept {
                prop_assert!(record_passes(k, 0.4, 3));
            }
        }

        #[test]
        fn dump_round_trip_identity(
            ev in 1u8..=5,
            name in "[a-zA-Z0-9]{1,10}( [a-zA-Z0-9]{1,8}){0,2}",
            func in proptest::option::of("[a-zA-Z0-9]{1,10}( [a-zA-Z0-9]{1,8}){0,2}"),
            seq in "[ACDEFGHIKLMNPQRSTVWYX]{1,30}"
        ) {
            let r = AnnotationRecord {
                accession: "ACC".into(),
                sequence: seq,
                evidence_level: ev,
                name: Some(name),
                function: func,
                subcellular_location: None,
                biological_process: None,
                similarity: None,
            };
            let parsed = parse_line(&format_line(&r), 1).unwrap();
            prop_assert_eq!(parsed, r);
        }

        #[test]
        fn template_injective_on_differing_fields(
            a in "[a-z]{1,8}", b in "[a-z]{1,8}"
        ) {
            prop_assume!(a != b);
            let ra = record("P", 1, [Some(&a), None, None, None, None]);
            let rb = record("P", 1, [Some(&b), None, None, None, None]);
            prop_assert_ne!(template_biotext(&ra).unwrap(), template_biotext(&rb).unwrap());
        }
    }
}
