//! FEVER-format corpus: wiki pages with indexed sentences, claims with gold
//! evidence groups, and title-prepended candidate construction.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn parse_err(line: usize, msg: impl Into<String>) -> CorpusError {
    CorpusError::Parse {
        line,
        msg: msg.into(),
    }
}

/// Gold verdict attached to a claim. `Unknown` appears only in blind test input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClaimLabel {
    Supported,
    Refuted,
    NotEnoughInfo,
    Unknown,
}

impl ClaimLabel {
    pub fn as_fever_str(&self) -> Option<&'static str> {
        match self {
            ClaimLabel::Supported => Some("SUPPORTS"),
            ClaimLabel::Refuted => Some("REFUTES"),
            ClaimLabel::NotEnoughInfo => Some("NOT ENOUGH INFO"),
            ClaimLabel::Unknown => None,
        }
    }

    pub fn from_fever_str(s: &str) -> Option<ClaimLabel> {
        match s {
            "SUPPORTS" => Some(ClaimLabel::Supported),
            "REFUTES" => Some(ClaimLabel::Refuted),
            "NOT ENOUGH INFO" => Some(ClaimLabel::NotEnoughInfo),
            _ => None,
        }
    }

    /// SUPPORTED or REFUTED, i.e. carries a gold evidence set.
    pub fn is_verifiable(&self) -> bool {
        matches!(self, ClaimLabel::Supported | ClaimLabel::Refuted)
    }
}

impl fmt::Display for ClaimLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_fever_str().unwrap_or("UNKNOWN"))
    }
}

/// A (page, sentence) coordinate pointing into the corpus.
pub type EvidenceCoord = (String, usize);

/// One gold evidence group: a set of coordinates that jointly suffice.
pub type EvidenceGroup = BTreeSet<EvidenceCoord>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Claim {
    pub claim_id: i64,
    pub text: String,
    pub label: ClaimLabel,
    pub evidence_groups: Vec<EvidenceGroup>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WikiPage {
    pub page_id: String,
    /// Ordered (index, text) pairs as they appeared in the dump.
    pub sentences: Vec<(usize, String)>,
    index_of: HashMap<usize, usize>,
}

impl WikiPage {
    pub fn new(page_id: String, sentences: Vec<(usize, String)>) -> Result<Self, CorpusError> {
        if page_id.is_empty() {
            return Err(parse_err(0, "empty page_id"));
        }
        let mut index_of = HashMap::with_capacity(sentences.len());
        for (pos, (idx, _)) in sentences.iter().enumerate() {
            if index_of.insert(*idx, pos).is_some() {
                return Err(parse_err(
                    0,
                    format!("duplicate sentence index {idx} in page {page_id}"),
                ));
            }
        }
        Ok(WikiPage {
            page_id,
            sentences,
            index_of,
        })
    }

    pub fn sentence(&self, index: usize) -> Option<&str> {
        self.index_of
            .get(&index)
            .map(|&pos| self.sentences[pos].1.as_str())
    }
}

/// A (claim, title-prepended sentence) pair with provenance coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub claim_id: i64,
    pub page_id: String,
    pub sentence_index: usize,
    pub text: String,
    pub is_evidence: Option<bool>,
    pub score: Option<f64>,
}

/// Parse the tab-separated `lines` field of a wiki dump entry.
///
/// Each non-empty line is `index<TAB>sentence[<TAB>link...]`; trailing link
/// columns are dropped and empty sentences are kept with empty text.
pub fn parse_wiki_lines(raw: &str) -> Result<Vec<(usize, String)>, CorpusError> {
    let mut out = Vec::new();
    for (lineno, line) in raw.split('\n').enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let idx_field = fields.next().unwrap_or("");
        let idx: usize = idx_field.parse().map_err(|_| {
            parse_err(
                lineno + 1,
                format!("non-integer sentence index {idx_field:?}"),
            )
        })?;
        let sentence = fields.next().unwrap_or("").to_string();
        out.push((idx, sentence));
    }
    Ok(out)
}

/// Undo FEVER title escapes: underscores to spaces, bracket/colon escapes to
/// space-padded punctuation, whitespace collapsed.
pub fn detokenize_title(page_id: &str) -> String {
    let mut s = page_id.replace('_', " ");
    for (esc, lit) in [
        ("-LRB-", " ( "),
        ("-RRB-", " ) "),
        ("-LSB-", " [ "),
        ("-RSB-", " ] "),
        ("-COLON-", " : "),
    ] {
        s = s.replace(esc, lit);
    }
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Attach the detokenized page title to a sentence so the pair classifier
/// sees the co-reference context: `<title> . <sentence>`.
pub fn prepend_title(page_id: &str, sentence_text: &str) -> String {
    assert!(!page_id.is_empty(), "page_id must be non-empty");
    format!("{} . {}", detokenize_title(page_id), sentence_text)
}

/// Immutable page store; safe for concurrent reads once loaded.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pages: BTreeMap<String, WikiPage>,
}

impl Corpus {
    pub fn new(pages: Vec<WikiPage>) -> Self {
        let pages = pages.into_iter().map(|p| (p.page_id.clone(), p)).collect();
        Corpus { pages }
    }

    pub fn page(&self, page_id: &str) -> Option<&WikiPage> {
        self.pages.get(page_id)
    }

    pub fn pages(&self) -> impl Iterator<Item = &WikiPage> {
        self.pages.values()
    }

    pub fn len(&self) -> usize {
        self.pages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pages.is_empty()
    }

    pub fn resolves(&self, page_id: &str, sentence_index: usize) -> bool {
        self.page(page_id)
            .map(|p| p.sentence(sentence_index).is_some())
            .unwrap_or(false)
    }

    /// Load a wiki dump: JSONL objects `{"id": ..., "text": ..., "lines": ...}`.
    pub fn load_wiki_jsonl(path: &Path) -> Result<Self, CorpusError> {
        let file = File::open(path)?;
        let reader = BufReader::new(file);
        let mut pages = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let v: Value = serde_json::from_str(&line)
                .map_err(|e| parse_err(lineno + 1, format!("bad json: {e}")))?;
            let id = v
                .get("id")
                .and_then(Value::as_str)
                .ok_or_else(|| parse_err(lineno + 1, "missing string field 'id'"))?;
            if id.is_empty() {
                // FEVER dumps carry a blank sentinel entry; skip it.
                continue;
            }
            let lines_field = v.get("lines").and_then(Value::as_str).unwrap_or("");
            let sentences = parse_wiki_lines(lines_field).map_err(|e| match e {
                CorpusError::Parse { line, msg } => {
                    parse_err(lineno + 1, format!("page {id:?}, lines entry {line}: {msg}"))
                }
                other => other,
            })?;
            pages.push(WikiPage::new(id.to_string(), sentences).map_err(|e| match e {
                CorpusError::Parse { msg, .. } => parse_err(lineno + 1, msg),
                other => other,
            })?);
        }
        Ok(Corpus::new(pages))
    }

    /// Serialize back to the dump schema with link columns dropped.
    pub fn write_wiki_jsonl<W: Write>(&self, mut w: W) -> Result<(), CorpusError> {
        for page in self.pages.values() {
            let lines = page
                .sentences
                .iter()
                .map(|(i, s)| format!("{i}\t{s}"))
                .collect::<Vec<_>>()
                .join("\n");
            let obj = serde_json::json!({
                "id": page.page_id,
                "text": page.sentences.iter().map(|(_, s)| s.as_str()).collect::<Vec<_>>().join(" "),
                "lines": lines,
            });
            writeln!(w, "{obj}")?;
        }
        Ok(())
    }

    /// Warnings for verifiable claims whose gold evidence does not fully
    /// resolve against this page set. Claims are kept either way.
    pub fn audit_claims(&self, claims: &[Claim]) -> Vec<String> {
        let mut warnings = Vec::new();
        for claim in claims {
            if !claim.label.is_verifiable() {
                continue;
            }
            let any_resolvable = claim.evidence_groups.iter().any(|g| {
                !g.is_empty() && g.iter().all(|(p, i)| self.resolves(p, *i))
            });
            if !any_resolvable {
                warnings.push(format!(
                    "claim {}: no gold evidence group fully resolves in corpus",
                    claim.claim_id
                ));
            }
        }
        warnings
    }
}

fn parse_evidence_groups(v: &Value, lineno: usize) -> Result<Vec<EvidenceGroup>, CorpusError> {
    let mut groups = Vec::new();
    let Some(list) = v.as_array() else {
        return Err(parse_err(lineno, "'evidence' is not a list"));
    };
    for group in list {
        let Some(entries) = group.as_array() else {
            return Err(parse_err(lineno, "evidence group is not a list"));
        };
        let mut set = EvidenceGroup::new();
        for entry in entries {
            let Some(quad) = entry.as_array() else {
                return Err(parse_err(lineno, "evidence entry is not a list"));
            };
            if quad.len() < 4 {
                return Err(parse_err(lineno, "evidence entry has fewer than 4 fields"));
            }
            let page = &quad[2];
            let idx = &quad[3];
            if page.is_null() {
                continue;
            }
            let page = page
                .as_str()
                .ok_or_else(|| parse_err(lineno, "evidence page is not a string"))?;
            let idx = idx
                .as_u64()
                .ok_or_else(|| parse_err(lineno, "evidence sentence index is not an integer"))?;
            set.insert((page.to_string(), idx as usize));
        }
        if !set.is_empty() {
            groups.push(set);
        }
    }
    Ok(groups)
}

/// Load a FEVER claims file: one JSON object per line with `id`, `claim`,
/// optional `label`, and `evidence` quadruple groups.
pub fn load_claims(path: &Path) -> Result<Vec<Claim>, CorpusError> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut claims = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line)
            .map_err(|e| parse_err(lineno + 1, format!("bad json: {e}")))?;
        let claim_id = v
            .get("id")
            .and_then(Value::as_i64)
            .ok_or_else(|| parse_err(lineno + 1, "missing integer field 'id'"))?;
        let text = v
            .get("claim")
            .and_then(Value::as_str)
            .ok_or_else(|| parse_err(lineno + 1, "missing string field 'claim'"))?
            .to_string();
        let label = match v.get("label").and_then(Value::as_str) {
            None => ClaimLabel::Unknown,
            Some(s) => ClaimLabel::from_fever_str(s)
                .ok_or_else(|| parse_err(lineno + 1, format!("unknown label {s:?}")))?,
        };
        let evidence_groups = match v.get("evidence") {
            None => Vec::new(),
            Some(ev) => parse_evidence_groups(ev, lineno + 1)?,
        };
        let evidence_groups = if label == ClaimLabel::NotEnoughInfo {
            Vec::new()
        } else {
            evidence_groups
        };
        claims.push(Claim {
            claim_id,
            text,
            label,
            evidence_groups,
        });
    }
    Ok(claims)
}

/// Serialize claims back to the FEVER claim schema.
pub fn write_claims_jsonl<W: Write>(claims: &[Claim], mut w: W) -> Result<(), CorpusError> {
    for claim in claims {
        let evidence: Vec<Vec<Value>> = claim
            .evidence_groups
            .iter()
            .map(|group| {
                group
                    .iter()
                    .map(|(p, i)| serde_json::json!([0, 0, p, i]))
                    .collect()
            })
            .collect();
        let mut obj = serde_json::json!({
            "id": claim.claim_id,
            "claim": claim.text,
            "evidence": evidence,
        });
        if let Some(label) = claim.label.as_fever_str() {
            obj["label"] = Value::String(label.to_string());
        }
        writeln!(w, "{obj}")?;
    }
    Ok(())
}
