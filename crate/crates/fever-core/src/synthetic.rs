//! Deterministic generator for the bundled desk-scale corpus: single-token
//! entities with one page each, claims about professions, and lexical-marker
//! evidence ("truly" supports, "never" refutes) so that retrieval and
//! verification are learnable in seconds on a CPU.

use std::io::Write;

use crate::corpus::{Claim, ClaimLabel, Corpus, CorpusError, EvidenceGroup, WikiPage};

const NAME_ROOTS: [&str; 20] = [
    "Bar", "Cor", "Del", "Fen", "Gal", "Hur", "Jor", "Kel", "Lum", "Mar", "Nor", "Pel", "Quin",
    "Ros", "Sil", "Tor", "Ul", "Ven", "Wex", "Yor",
];
const NAME_SUFFIXES: [&str; 10] = [
    "an", "eth", "is", "on", "ua", "el", "or", "im", "ax", "un",
];
const PROFESSIONS: [&str; 30] = [
    "painter", "sailor", "teacher", "farmer", "singer", "dancer", "writer", "hunter", "baker",
    "miner", "weaver", "potter", "carver", "fisher", "rider", "trader", "healer", "guard",
    "scout", "smith", "clerk", "cook", "judge", "pilot", "actor", "poet", "monk", "bard",
    "mason", "scribe",
];
const TOWNS: [&str; 20] = [
    "Ashford", "Brookvale", "Caldwell", "Dunmore", "Eastwick", "Fairhaven", "Glenside",
    "Hartwell", "Ironbridge", "Jasperton", "Kingsmere", "Larkspur", "Millbrook", "Northgate",
    "Oakhurst", "Pinecrest", "Quarryton", "Redcliff", "Stonegate", "Thornbury",
];
const NOUNS: [&str; 10] = [
    "river", "orchard", "harbor", "meadow", "forest", "market", "bridge", "valley", "mill",
    "quarry",
];
const OBJECTS: [&str; 8] = [
    "boat", "lantern", "wagon", "loom", "anvil", "telescope", "bookshelf", "kiln",
];

pub const SUPPORT_MARKER: &str = "truly";
pub const REFUTE_MARKER: &str = "never";

#[derive(Debug, Clone)]
pub struct SyntheticFixture {
    /// page -> (index, sentence text, link column entries)
    pub pages: Vec<(String, Vec<(usize, String, Vec<String>)>)>,
    pub claims: Vec<Claim>,
}

fn entity_name(i: usize) -> String {
    format!(
        "{}{}",
        NAME_ROOTS[i % NAME_ROOTS.len()],
        NAME_SUFFIXES[(i / NAME_ROOTS.len()) % NAME_SUFFIXES.len()]
    )
}

fn label_for(i: usize) -> ClaimLabel {
    match i % 4 {
        1 => ClaimLabel::Refuted,
        2 => ClaimLabel::NotEnoughInfo,
        _ => ClaimLabel::Supported,
    }
}

fn distractors(entity: &str, i: usize) -> Vec<String> {
    let noun = NOUNS[i % NOUNS.len()];
    let noun2 = NOUNS[(i + 3) % NOUNS.len()];
    let obj = OBJECTS[i % OBJECTS.len()];
    let obj2 = OBJECTS[(i + 5) % OBJECTS.len()];
    let town2 = TOWNS[(i + 7) % TOWNS.len()];
    vec![
        format!("{entity} lives near the {noun} ."),
        format!("{entity} owns a small {obj} ."),
        format!("{entity} often visits the {noun2} ."),
        format!("{entity} keeps an old {obj2} at home ."),
        format!("{entity} travelled to {town2} once ."),
        format!("{entity} enjoys long walks by the {noun} ."),
        format!("{entity} repaired the {obj} last spring ."),
        format!("{entity} helped rebuild the {noun2} path ."),
        format!("{entity} collects stories about the {noun} ."),
    ]
}

/// Entity `i` must appear in at most one page, so claims can only overlap
/// foreign pages through zero-information tokens.
pub fn generate(num_claims: usize) -> SyntheticFixture {
    assert!(
        num_claims <= NAME_ROOTS.len() * NAME_SUFFIXES.len(),
        "at most {} unique entities available",
        NAME_ROOTS.len() * NAME_SUFFIXES.len()
    );
    let mut pages = Vec::with_capacity(num_claims);
    let mut claims = Vec::with_capacity(num_claims);
    for i in 0..num_claims {
        let entity = entity_name(i);
        let label = label_for(i);
        let profession = PROFESSIONS[i % PROFESSIONS.len()];
        let town = TOWNS[i % TOWNS.len()];

        let mut sentences: Vec<(usize, String, Vec<String>)> = Vec::with_capacity(10);
        sentences.push((
            0,
            format!("{entity} is a person from {town} ."),
            vec![town.to_string()],
        ));
        let gold_index = 1 + (i * 7) % 9;
        let mut fillers = distractors(&entity, i).into_iter();
        for idx in 1..10 {
            if idx == gold_index && label != ClaimLabel::NotEnoughInfo {
                let marker = if label == ClaimLabel::Supported {
                    SUPPORT_MARKER
                } else {
                    REFUTE_MARKER
                };
                sentences.push((
                    idx,
                    format!("{entity} {marker} works as a {profession} ."),
                    vec![entity.clone()],
                ));
            } else {
                sentences.push((idx, fillers.next().unwrap(), Vec::new()));
            }
        }
        if i % 13 == 0 {
            // Occasional empty trailing entry, as real dumps have.
            sentences.push((10, String::new(), Vec::new()));
        }

        let evidence_groups = if label == ClaimLabel::NotEnoughInfo {
            Vec::new()
        } else {
            vec![EvidenceGroup::from([(entity.clone(), gold_index)])]
        };
        claims.push(Claim {
            claim_id: 1000 + i as i64,
            text: format!("{entity} works as a {profession} ."),
            label,
            evidence_groups,
        });
        pages.push((entity, sentences));
    }
    SyntheticFixture { pages, claims }
}

impl SyntheticFixture {
    pub fn to_corpus(&self) -> Corpus {
        let pages = self
            .pages
            .iter()
            .map(|(id, sentences)| {
                WikiPage::new(
                    id.clone(),
                    sentences
                        .iter()
                        .map(|(idx, text, _)| (*idx, text.clone()))
                        .collect(),
                )
                .expect("generator produces valid pages")
            })
            .collect();
        Corpus::new(pages)
    }

    /// Dump-format JSONL, including link columns on annotated lines.
    pub fn write_wiki_jsonl<W: Write>(&self, mut w: W) -> Result<(), CorpusError> {
        for (page_id, sentences) in &self.pages {
            let lines = sentences
                .iter()
                .map(|(idx, text, links)| {
                    let mut line = format!("{idx}\t{text}");
                    for link in links {
                        line.push('\t');
                        line.push_str(link);
                    }
                    line
                })
                .collect::<Vec<_>>()
                .join("\n");
            let text = sentences
                .iter()
                .map(|(_, s, _)| s.as_str())
                .collect::<Vec<_>>()
                .join(" ");
            let obj = serde_json::json!({ "id": page_id, "text": text, "lines": lines });
            writeln!(w, "{obj}")?;
        }
        Ok(())
    }

    pub fn write_claims_jsonl<W: Write>(&self, mut w: W) -> Result<(), CorpusError> {
        for claim in &self.claims {
            let evidence: Vec<Vec<serde_json::Value>> = if claim.evidence_groups.is_empty() {
                vec![vec![serde_json::json!([claim.claim_id, claim.claim_id, null, null])]]
            } else {
                claim
                    .evidence_groups
                    .iter()
                    .map(|group| {
                        group
                            .iter()
                            .map(|(p, i)| serde_json::json!([claim.claim_id, claim.claim_id, p, i]))
                            .collect()
                    })
                    .collect()
            };
            let obj = serde_json::json!({
                "id": claim.claim_id,
                "claim": claim.text,
                "label": claim.label.as_fever_str().expect("generator labels are known"),
                "evidence": evidence,
            });
            writeln!(w, "{obj}")?;
        }
        Ok(())
    }
}
