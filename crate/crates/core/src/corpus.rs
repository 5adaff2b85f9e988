//! Dialogue data model, ingestion, splitting, sharding and corpus statistics.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::providers::{stable_hash, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Elicitor,
    Respondent,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Elicitor => "elicitor",
            Role::Respondent => "respondent",
        }
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "elicitor" => Ok(Role::Elicitor),
            "respondent" => Ok(Role::Respondent),
            other => Err(format!("role must be \"elicitor\" or \"respondent\", got {other:?}")),
        }
    }
}

/// Content category of a dialogue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DomainTag {
    AcademicInterviews,
    JournalisticInvestigations,
    JudicialProceedings,
    OralHistory,
}

impl DomainTag {
    pub const ALL: [DomainTag; 4] = [
        DomainTag::AcademicInterviews,
        DomainTag::JournalisticInvestigations,
        DomainTag::JudicialProceedings,
        DomainTag::OralHistory,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DomainTag::AcademicInterviews => "academic_interviews",
            DomainTag::JournalisticInvestigations => "journalistic_investigations",
            DomainTag::JudicialProceedings => "judicial_proceedings",
            DomainTag::OralHistory => "oral_history",
        }
    }

    /// Name used inside the system instruction, e.g. "oral history".
    pub fn display_name(self) -> &'static str {
        match self {
            DomainTag::AcademicInterviews => "academic interviews",
            DomainTag::JournalisticInvestigations => "journalistic investigations",
            DomainTag::JudicialProceedings => "judicial proceedings",
            DomainTag::OralHistory => "oral history",
        }
    }

    /// Two-letter column label used in report tables.
    pub fn short_label(self) -> &'static str {
        match self {
            DomainTag::AcademicInterviews => "Ac",
            DomainTag::JournalisticInvestigations => "Jo",
            DomainTag::JudicialProceedings => "Ju",
            DomainTag::OralHistory => "Or",
        }
    }
}

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DomainTag {
    type Err = Error;

    /// Accepts the canonical snake_case names, their spaced/hyphenated or
    /// capitalized forms, and the `judicial_dialogue` alias.
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .trim()
            .chars()
            .map(|c| if c == ' ' || c == '-' { '_' } else { c.to_ascii_lowercase() })
            .collect();
        match key.as_str() {
            "academic_interviews" => Ok(DomainTag::AcademicInterviews),
            "journalistic_investigations" => Ok(DomainTag::JournalisticInvestigations),
            "judicial_proceedings" | "judicial_dialogue" | "judicial_dialogues" => {
                Ok(DomainTag::JudicialProceedings)
            }
            "oral_history" => Ok(DomainTag::OralHistory),
            _ => Err(Error::UnknownDomain(s.to_string())),
        }
    }
}

impl Serialize for DomainTag {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for DomainTag {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Turn identifiers appear both as integers and strings in the wild; keep
/// whichever form the source used so records round-trip unchanged.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TurnId {
    Int(i64),
    Str(String),
}

impl fmt::Display for TurnId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TurnId::Int(i) => write!(f, "{i}"),
            TurnId::Str(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Turn {
    pub turn_id: TurnId,
    pub timestamp: Option<String>,
    pub speaker: String,
    pub role: Role,
    pub utterance: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dialogue {
    pub dialogue_id: String,
    pub metadata: Map<String, Value>,
    pub broad_source: String,
    pub domain: DomainTag,
    pub title: Option<String>,
    pub elicitors: Vec<String>,
    pub respondents: Vec<String>,
    pub languages: Vec<String>,
    pub turns: Vec<Turn>,
}

impl Dialogue {
    /// Metric computations need at least one turn of each role.
    pub fn is_metric_eligible(&self) -> bool {
        let has = |r: Role| self.turns.iter().any(|t| t.role == r);
        has(Role::Elicitor) && has(Role::Respondent)
    }

    fn validate(&self, line: usize) -> Result<()> {
        let err = |field: String, message: &str| Error::Validation {
            line,
            dialogue_id: Some(self.dialogue_id.clone()),
            field,
            message: message.to_string(),
        };
        if self.dialogue_id.trim().is_empty() {
            return Err(err("dialogue_id".into(), "must be nonempty"));
        }
        if self.turns.is_empty() {
            return Err(err("turns".into(), "dialogue has no turns"));
        }
        let mut ids = HashSet::with_capacity(self.turns.len());
        for (i, t) in self.turns.iter().enumerate() {
            if t.utterance.trim().is_empty() {
                return Err(err(format!("turns[{i}].utterance"), "empty after trimming"));
            }
            if !ids.insert(&t.turn_id) {
                return Err(err(
                    format!("turns[{i}].turn_id"),
                    &format!("duplicate turn id {}", t.turn_id),
                ));
            }
        }
        Ok(())
    }

    /// One compact JSON line, no trailing newline.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("dialogue serializes")
    }
}

/// Parses and validates one corpus line. `line` is 1-based and only used for
/// error reporting.
pub fn parse_dialogue_line(text: &str, line: usize) -> Result<Dialogue> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::Validation {
        line,
        dialogue_id: None,
        field: "record".into(),
        message: e.to_string(),
    })?;
    let obj = value.as_object().ok_or_else(|| Error::Validation {
        line,
        dialogue_id: None,
        field: "record".into(),
        message: "expected a JSON object".into(),
    })?;
    let dialogue_id = obj
        .get("dialogue_id")
        .and_then(Value::as_str)
        .map(str::to_string);
    let err = |field: String, message: String| Error::Validation {
        line,
        dialogue_id: dialogue_id.clone(),
        field,
        message,
    };
    if dialogue_id.is_none() {
        return Err(err("dialogue_id".into(), "missing or not a string".into()));
    }
    match obj.get("domain").and_then(Value::as_str) {
        Some(d) => {
            if let Err(e) = d.parse::<DomainTag>() {
                return Err(err("domain".into(), e.to_string()));
            }
        }
        None => return Err(err("domain".into(), "missing or not a string".into())),
    }
    if let Some(turns) = obj.get("turns").and_then(Value::as_array) {
        for (i, t) in turns.iter().enumerate() {
            match t.get("role").and_then(Value::as_str) {
                Some(r) => {
                    if let Err(m) = r.parse::<Role>() {
                        return Err(err(format!("turns[{i}].role"), m));
                    }
                }
                None => return Err(err(format!("turns[{i}].role"), "missing".into())),
            }
        }
    }
    let dialogue: Dialogue =
        serde_json::from_value(value).map_err(|e| err("record".into(), e.to_string()))?;
    dialogue.validate(line)?;
    Ok(dialogue)
}

/// A validation failure in a corpus file.
#[derive(Debug)]
pub struct RecordError {
    pub path: PathBuf,
    pub error: Error,
}

/// Outcome of [`load_corpus`]: the valid dialogues in file order plus every
/// record that was skipped.
#[derive(Debug, Default)]
pub struct LoadReport {
    pub dialogues: Vec<Dialogue>,
    pub rejected: Vec<RecordError>,
}

/// Reads line-delimited dialogue files. Unreadable files abort; invalid
/// records are skipped and reported.
pub fn load_corpus<P: AsRef<Path>>(paths: &[P], exec: Exec) -> Result<LoadReport> {
    let mut report = LoadReport::default();
    for path in paths {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<(usize, &str)> = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| (i + 1, l))
            .collect();
        let parsed = exec.map(&lines, |(n, l)| parse_dialogue_line(l, *n));
        for r in parsed {
            match r {
                Ok(d) => report.dialogues.push(d),
                Err(error) => report.rejected.push(RecordError {
                    path: path.to_path_buf(),
                    error,
                }),
            }
        }
    }
    let mut seen = HashSet::new();
    let mut kept = Vec::with_capacity(report.dialogues.len());
    for d in std::mem::take(&mut report.dialogues) {
        if seen.insert(d.dialogue_id.clone()) {
            kept.push(d);
        } else {
            report.rejected.push(RecordError {
                path: PathBuf::new(),
                error: Error::Validation {
                    line: 0,
                    dialogue_id: Some(d.dialogue_id.clone()),
                    field: "dialogue_id".into(),
                    message: "duplicate dialogue id".into(),
                },
            });
        }
    }
    report.dialogues = kept;
    Ok(report)
}

/// Writes dialogues as JSON lines.
pub fn write_dialogues(path: &Path, dialogues: &[Dialogue]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for d in dialogues {
        writeln!(w, "{}", d.to_json_line()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bucket {
    Train,
    Dev,
    Test,
}

impl Bucket {
    pub const ALL: [Bucket; 3] = [Bucket::Train, Bucket::Dev, Bucket::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Bucket::Train => "train",
            Bucket::Dev => "dev",
            Bucket::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.8,
            dev: 0.1,
            test: 0.1,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.dev, self.test];
        if all.iter().any(|f| !f.is_finite() || *f <= 0.0) {
            return Err(Error::Config("split fractions must be positive".into()));
        }
        if (all.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::Config("split fractions must sum to 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: BTreeSet<String>,
    pub dev: BTreeSet<String>,
    pub test: BTreeSet<String>,
    pub seed: u64,
}

impl CorpusSplit {
    pub fn bucket_of(&self, dialogue_id: &str) -> Option<Bucket> {
        if self.train.contains(dialogue_id) {
            Some(Bucket::Train)
        } else if self.dev.contains(dialogue_id) {
            Some(Bucket::Dev)
        } else if self.test.contains(dialogue_id) {
            Some(Bucket::Test)
        } else {
            None
        }
    }

    pub fn ids(&self, bucket: Bucket) -> &BTreeSet<String> {
        match bucket {
            Bucket::Train => &self.train,
            Bucket::Dev => &self.dev,
            Bucket::Test => &self.test,
        }
    }

    pub fn manifest(&self) -> SplitManifest {
        let mut assignments = BTreeMap::new();
        for b in Bucket::ALL {
            for id in self.ids(b) {
                assignments.insert(id.clone(), b);
            }
        }
        SplitManifest {
            seed: self.seed,
            assignments,
        }
    }
}

/// On-disk form of a split: dialogue id to bucket, plus the seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub assignments: BTreeMap<String, Bucket>,
}

impl SplitManifest {
    pub fn into_split(self) -> CorpusSplit {
        let mut split = CorpusSplit {
            train: BTreeSet::new(),
            dev: BTreeSet::new(),
            test: BTreeSet::new(),
            seed: self.seed,
        };
        for (id, b) in self.assignments {
            match b {
                Bucket::Train => split.train.insert(id),
                Bucket::Dev => split.dev.insert(id),
                Bucket::Test => split.test.insert(id),
            };
        }
        split
    }
}

fn ceil_tolerant(x: f64) -> usize {
    (x - 1e-9).ceil().max(0.0) as usize
}

/// Corpus-level bucket sizes: the held-out share is rounded up first, then
/// the held-out part is divided between test (rounded up) and dev.
pub fn bucket_totals(n: usize, f: &SplitFractions) -> [usize; 3] {
    let held_out = ceil_tolerant((f.dev + f.test) * n as f64).min(n);
    let test = ceil_tolerant(f.test / (f.dev + f.test) * held_out as f64).min(held_out);
    [n - held_out, held_out - test, test]
}

/// Splits `counts[d]` items of each stratum into buckets whose column sums
/// equal `totals`, rounding each stratum's proportional quota by largest
/// remainder.
fn allocate_strata(counts: &[usize], totals: [usize; 3]) -> Vec<[usize; 3]> {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return vec![[0; 3]; counts.len()];
    }
    let mut alloc = vec![[0usize; 3]; counts.len()];
    let mut remainders = Vec::new();
    for (d, &c) in counts.iter().enumerate() {
        for b in 0..3 {
            let quota = c as f64 * totals[b] as f64 / n as f64;
            let fl = (quota + 1e-9).floor() as usize;
            alloc[d][b] = fl;
            remainders.push((quota - fl as f64, d, b));
        }
    }
    let mut row_left: Vec<usize> = counts
        .iter()
        .zip(&alloc)
        .map(|(c, a)| c - a.iter().sum::<usize>())
        .collect();
    let mut col_left: Vec<usize> = (0..3)
        .map(|b| totals[b] - alloc.iter().map(|a| a[b]).sum::<usize>())
        .collect();
    remainders.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    for &(_, d, b) in &remainders {
        if row_left[d] > 0 && col_left[b] > 0 {
            alloc[d][b] += 1;
            row_left[d] -= 1;
            col_left[b] -= 1;
        }
    }
    // Greedy can strand a unit when the best remaining cells are full.
    for d in 0..counts.len() {
        for b in 0..3 {
            while row_left[d] > 0 && col_left[b] > 0 {
                alloc[d][b] += 1;
                row_left[d] -= 1;
                col_left[b] -= 1;
            }
        }
    }
    alloc
}

/// Deterministic stratified train/dev/test split.
///
/// Bucket totals come from [`bucket_totals`]; they are then distributed
/// across domains in proportion to domain size (largest remainder). Within a
/// domain, dialogues are ordered by id and shuffled with the seeded
/// generator before being dealt into buckets.
pub fn stratified_split(
    dialogues: &[Dialogue],
    fractions: SplitFractions,
    seed: u64,
) -> Result<CorpusSplit> {
    fractions.validate()?;
    let mut by_domain: BTreeMap<DomainTag, Vec<&str>> = BTreeMap::new();
    for d in dialogues {
        by_domain.entry(d.domain).or_default().push(&d.dialogue_id);
    }
    let domains: Vec<DomainTag> = by_domain.keys().copied().collect();
    let counts: Vec<usize> = by_domain.values().map(Vec::len).collect();
    let totals = bucket_totals(dialogues.len(), &fractions);
    let alloc = allocate_strata(&counts, totals);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = CorpusSplit {
        train: BTreeSet::new(),
        dev: BTreeSet::new(),
        test: BTreeSet::new(),
        seed,
    };
    for (i, domain) in domains.iter().enumerate() {
        let mut ids = by_domain[domain].clone();
        if ids.len() < 3 {
            warn!(
                "domain {domain} has {} dialogues, fewer than the 3 split buckets",
                ids.len()
            );
        }
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        let [tr, dv, _] = alloc[i];
        for (j, id) in ids.into_iter().enumerate() {
            let set = if j < tr {
                &mut split.train
            } else if j < tr + dv {
                &mut split.dev
            } else {
                &mut split.test
            };
            set.insert(id.to_string());
        }
    }
    Ok(split)
}

/// Groups dialogues into consecutive chunks of `shard_size`; only the last
/// chunk may be shorter.
pub fn shard(dialogues: &[Dialogue], shard_size: usize) -> Result<Vec<&[Dialogue]>> {
    if shard_size == 0 {
        return Err(Error::Config("shard_size must be at least 1".into()));
    }
    Ok(dialogues.chunks(shard_size).collect())
}

/// Writes `{prefix}-00000.jsonl`, `{prefix}-00001.jsonl`, ... into `dir`.
pub fn write_shards(
    dir: &Path,
    prefix: &str,
    dialogues: &[Dialogue],
    shard_size: usize,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for (i, chunk) in shard(dialogues, shard_size)?.into_iter().enumerate() {
        let path = dir.join(format!("{prefix}-{i:05}.jsonl"));
        write_dialogues(&path, chunk)?;
        paths.push(path);
    }
    Ok(paths)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    pub label: String,
    pub dialogues: usize,
    pub turns: usize,
    pub tokens: usize,
    pub avg_turns_per_dialogue: f64,
    pub avg_tokens_per_turn: f64,
}

impl StatsRow {
    fn new(label: &str, dialogues: usize, turns: usize, tokens: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        StatsRow {
            label: label.to_string(),
            dialogues,
            turns,
            tokens,
            avg_turns_per_dialogue: ratio(turns, dialogues),
            avg_tokens_per_turn: ratio(tokens, turns),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub tokenizer: String,
    pub domains: Vec<StatsRow>,
    pub total: StatsRow,
}

/// Per-domain and total dialogue/turn/token counts. Every domain gets a row,
/// empty ones included.
pub fn corpus_stats(dialogues: &[Dialogue], tokenizer: &dyn Tokenizer, exec: Exec) -> CorpusStats {
    let per_dialogue: Vec<usize> = exec.map(dialogues, |d| {
        d.turns.iter().map(|t| tokenizer.count(&t.utterance)).sum()
    });
    let mut acc: BTreeMap<DomainTag, (usize, usize, usize)> =
        DomainTag::ALL.iter().map(|d| (*d, (0, 0, 0))).collect();
    for (d, tokens) in dialogues.iter().zip(&per_dialogue) {
        let e = acc.get_mut(&d.domain).expect("all domains present");
        e.0 += 1;
        e.1 += d.turns.len();
        e.2 += tokens;
    }
    let domains: Vec<StatsRow> = acc
        .iter()
        .map(|(d, (n, t, k))| StatsRow::new(d.as_str(), *n, *t, *k))
        .collect();
    let (n, t, k) = acc
        .values()
        .fold((0, 0, 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
    CorpusStats {
        tokenizer: tokenizer.id().to_string(),
        domains,
        total: StatsRow::new("total", n, t, k),
    }
}

/// Uniformly permutes the turns (Fisher-Yates under a seeded ChaCha
/// generator). Turn records, including their role labels, move as units.
pub fn shuffle_dialogue(d: &Dialogue, seed: u64) -> Dialogue {
    let mut out = d.clone();
    if d.turns.len() < 2 {
        warn!(
            "dialogue {} has {} turn(s); returned unshuffled",
            d.dialogue_id,
            d.turns.len()
        );
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    out.turns.shuffle(&mut rng);
    out
}

/// Seed used for one dialogue within a corpus-wide shuffle.
pub fn dialogue_seed(seed: u64, dialogue_id: &str) -> u64 {
    seed ^ stable_hash(dialogue_id.as_bytes())
}

/// Shuffled-baseline transform: shuffles the turns, then gives each turn the
/// role of the original turn at its new position. The role layout of the
/// dialogue is kept while the content is scrambled, so role-conditioned
/// metrics see randomly drawn utterances in each role slot.
pub fn shuffled_baseline(d: &Dialogue, seed: u64) -> Dialogue {
    let mut out = shuffle_dialogue(d, seed);
    for (slot, orig) in out.turns.iter_mut().zip(&d.turns) {
        slot.role = orig.role;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::ReferenceTokenizer;
    use crate::synthetic::dialogue_from_pairs;

    fn record(turns: &str) -> String {
        format!(
            r#"{{"dialogue_id":"d1","metadata":{{"source":"x"}},"broad_source":"Archive","domain":"oral_history","title":null,"elicitors":["I"],"respondents":["R"],"languages":["en"],"turns":{turns}}}"#
        )
    }

    #[test]
    fn parses_six_turn_record() {
        let turns: Vec<String> = (0..6)
            .map(|i| {
                let role = if i % 2 == 0 { "elicitor" } else { "respondent" };
                format!(
                    r#"{{"turn_id":{i},"timestamp":null,"speaker":"S","role":"{role}","utterance":"u {i}"}}"#
                )
            })
            .collect();
        let line = record(&format!("[{}]", turns.join(",")));
        let d = parse_dialogue_line(&line, 1).unwrap();
        assert_eq!(d.turns.len(), 6);
        assert_eq!(d.turns[0].turn_id, TurnId::Int(0));
        let back: Value = serde_json::from_str(&d.to_json_line()).unwrap();
        let orig: Value = serde_json::from_str(&line).unwrap();
        assert_eq!(back, orig);
    }

    #[test]
    fn rejects_unknown_role_with_dialogue_id() {
        let line = record(
            r#"[{"turn_id":"t1","timestamp":null,"speaker":"M","role":"moderator","utterance":"hi"}]"#,
        );
        match parse_dialogue_line(&line, 7) {
            Err(Error::Validation {
                line,
                dialogue_id,
                field,
                ..
            }) => {
                assert_eq!(line, 7);
                assert_eq!(dialogue_id.as_deref(), Some("d1"));
                assert_eq!(field, "turns[0].role");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_unknown_domain_and_empty_utterance() {
        let line = record(r#"[]"#).replace("oral_history", "podcasts");
        let e = parse_dialogue_line(&line, 1).unwrap_err();
        assert!(e.to_string().contains("podcasts"), "{e}");

        let line = record(
            r#"[{"turn_id":"t1","timestamp":null,"speaker":"M","role":"elicitor","utterance":"   "}]"#,
        );
        let e = parse_dialogue_line(&line, 1).unwrap_err();
        assert!(e.to_string().contains("utterance"), "{e}");

        let line = record("[]");
        assert!(parse_dialogue_line(&line, 1).is_err());
    }

    #[test]
    fn domain_aliases() {
        assert_eq!(
            "judicial_dialogue".parse::<DomainTag>().unwrap(),
            DomainTag::JudicialProceedings
        );
        assert_eq!(
            "Judicial Proceedings".parse::<DomainTag>().unwrap(),
            DomainTag::JudicialProceedings
        );
        assert_eq!(
            serde_json::to_string(&DomainTag::JudicialProceedings).unwrap(),
            "\"judicial_proceedings\""
        );
    }

    #[test]
    fn bucket_totals_match_published_split() {
        assert_eq!(bucket_totals(2281, &SplitFractions::default()), [1824, 228, 229]);
        assert_eq!(bucket_totals(10, &SplitFractions::default()), [8, 1, 1]);
    }

    #[test]
    fn single_domain_of_ten() {
        let ds: Vec<Dialogue> = (0..10)
            .map(|i| {
                let mut d = dialogue_from_pairs(&format!("d{i}"), &[(Role::Elicitor, "q")]);
                d.domain = DomainTag::OralHistory;
                d
            })
            .collect();
        let s = stratified_split(&ds, SplitFractions::default(), 3).unwrap();
        assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (8, 1, 1));
        assert_eq!(s, stratified_split(&ds, SplitFractions::default(), 3).unwrap());
    }

    #[test]
    fn strata_allocation_respects_rows_and_columns() {
        let counts = [148, 129, 621, 1383];
        let totals = bucket_totals(2281, &SplitFractions::default());
        let alloc = allocate_strata(&counts, totals);
        for (row, c) in alloc.iter().zip(counts) {
            assert_eq!(row.iter().sum::<usize>(), c);
        }
        for b in 0..3 {
            assert_eq!(alloc.iter().map(|r| r[b]).sum::<usize>(), totals[b]);
        }
    }

    #[test]
    fn shard_sizes() {
        let d = dialogue_from_pairs("x", &[(Role::Elicitor, "q")]);
        let ds = vec![d; 300];
        let sizes: Vec<usize> = shard(&ds, 128).unwrap().iter().map(|s| s.len()).collect();
        assert_eq!(sizes, vec![128, 128, 44]);
        assert_eq!(shard(&ds[..128], 128).unwrap().len(), 1);
        assert!(shard(&[], 128).unwrap().is_empty());
        assert!(shard(&ds, 0).is_err());
    }

    #[test]
    fn stats_direct_count() {
        let d = dialogue_from_pairs(
            "s",
            &[
                (Role::Elicitor, "a b c"),
                (Role::Respondent, "d e f"),
                (Role::Elicitor, "g h i"),
                (Role::Respondent, "j k l"),
            ],
        );
        let s = corpus_stats(&[d], &ReferenceTokenizer, Exec::Sequential);
        assert_eq!(s.total.turns, 4);
        assert_eq!(s.total.tokens, 12);
        assert_eq!(s.total.avg_tokens_per_turn, 3.0);
        assert_eq!(s.tokenizer, ReferenceTokenizer.id());
        let empty = corpus_stats(&[], &ReferenceTokenizer, Exec::Sequential);
        assert_eq!(empty.total.dialogues, 0);
        assert_eq!(empty.total.avg_tokens_per_turn, 0.0);
    }

    #[test]
    fn shuffle_is_permutation_and_deterministic() {
        let d = dialogue_from_pairs(
            "s",
            &[(Role::Elicitor, "A"), (Role::Respondent, "B"), (Role::Elicitor, "C")],
        );
        let a = shuffle_dialogue(&d, 11);
        let b = shuffle_dialogue(&d, 11);
        assert_eq!(a, b);
        let mut got: Vec<&str> = a.turns.iter().map(|t| t.utterance.as_str()).collect();
        got.sort();
        assert_eq!(got, vec!["A", "B", "C"]);

        let one = dialogue_from_pairs("o", &[(Role::Elicitor, "A")]);
        assert_eq!(shuffle_dialogue(&one, 1), one);
    }

    #[test]
    fn baseline_keeps_role_layout() {
        let d = dialogue_from_pairs(
            "s",
            &[
                (Role::Elicitor, "A"),
                (Role::Respondent, "B"),
                (Role::Elicitor, "C"),
                (Role::Respondent, "D"),
            ],
        );
        let b = shuffled_baseline(&d, 5);
        let roles: Vec<Role> = b.turns.iter().map(|t| t.role).collect();
        let orig: Vec<Role> = d.turns.iter().map(|t| t.role).collect();
        assert_eq!(roles, orig);
    }
}
