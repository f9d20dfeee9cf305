//! Seeded synthetic corpus with planted questions of three kinds:
//! single-link lookups, answers behind an unlinked passage that only
//! expansion can reach, and superlatives whose answer row sits outside the
//! lexically strongest segment.

use std::collections::HashSet;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::PipelineConfig;
use crate::corpus::{Corpus, CorpusError, Passage, Table};
use crate::eval::QAPair;

pub const ROSTER_TABLES: usize = 30;
pub const AGGREGATION_TABLES: usize = 10;
pub const SINGLE_LINK_QUESTIONS: usize = 50;
pub const QNE_QUESTIONS: usize = 20;
const ROWS_PER_TABLE: usize = 5;
const CLUBS: usize = 20;
const AGGREGATION_CLUBS: usize = 5;
const SEGMENT_ROWS: usize = 3;
/// Roster players with a biography but no question.
const EXTRA_PEOPLE: usize = 10;

const ONSETS: [&str; 18] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "kr", "tr",
];
const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];
const CODAS: [&str; 6] = ["", "n", "r", "l", "sk", "th"];
const MONTHS: [&str; 12] = [
    "January",
    "February",
    "March",
    "April",
    "May",
    "June",
    "July",
    "August",
    "September",
    "October",
    "November",
    "December",
];

/// Words a pseudo-word must never collide with: question and template
/// vocabulary, aggregation cues, months.
const RESERVED: &[&str] = &[
    "a",
    "an",
    "the",
    "of",
    "in",
    "on",
    "at",
    "to",
    "for",
    "by",
    "with",
    "and",
    "or",
    "is",
    "was",
    "who",
    "what",
    "when",
    "where",
    "which",
    "how",
    "did",
    "does",
    "that",
    "born",
    "nickname",
    "player",
    "club",
    "season",
    "fee",
    "roster",
    "transfer",
    "records",
    "row",
    "rows",
    "table",
    "caption",
    "passage",
    "passages",
    "title",
    "content",
    "answer",
    "list",
    "linked",
    "athlete",
    "most",
    "least",
    "highest",
    "lowest",
    "latest",
    "earliest",
    "first",
    "last",
    "third",
    "recent",
    "maximum",
    "minimum",
    "second",
    "may",
    "paid",
    "football",
    "side",
    "from",
    "one",
    "market",
    "unknown",
    "therefore",
    "relevant",
    "are",
];

struct Words {
    rng: ChaCha8Rng,
    used: HashSet<String>,
}

impl Words {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            used: RESERVED.iter().map(|w| w.to_string()).collect(),
        }
    }

    fn word(&mut self) -> String {
        loop {
            let syllables = self.rng.random_range(2..=3);
            let mut w = String::new();
            for i in 0..syllables {
                w.push_str(ONSETS[self.rng.random_range(0..ONSETS.len())]);
                w.push_str(VOWELS[self.rng.random_range(0..VOWELS.len())]);
                if i + 1 == syllables {
                    w.push_str(CODAS[self.rng.random_range(0..CODAS.len())]);
                }
            }
            if self.used.insert(w.clone()) {
                return capitalize(&w);
            }
        }
    }

    fn name(&mut self) -> String {
        format!("{} {}", self.word(), self.word())
    }
}

fn capitalize(w: &str) -> String {
    let mut chars = w.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

fn fee(rng: &mut ChaCha8Rng) -> u64 {
    rng.random_range(20..400u64) * 25_000
}

fn format_fee(v: u64) -> String {
    let digits = v.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

/// Birth dates with distinct years, so no date is a sub-span of another.
struct Dates {
    years: Vec<u32>,
}

impl Dates {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let mut years: Vec<u32> = (1700..2000).collect();
        years.shuffle(rng);
        Self { years }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> String {
        let year = self
            .years
            .pop()
            .expect("planted suite exceeds the date pool");
        let month = MONTHS[rng.random_range(0..12)];
        let day = rng.random_range(1..=28);
        format!("{day} {month} {year}")
    }
}

/// The planted suite: raw tables and passages plus one question set per
/// pipeline stage.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedSuite {
    pub tables: Vec<Table>,
    pub passages: Vec<Passage>,
    pub single_link: Vec<QAPair>,
    pub qne: Vec<QAPair>,
    pub aggregation: Vec<QAPair>,
}

fn qa(question: String, answer: String, segment: String, passage: String) -> QAPair {
    QAPair {
        question,
        answer,
        gold_segment_ids: Some(vec![segment]),
        gold_passage_ids: Some(vec![passage]),
    }
}

fn segment_of(table_id: &str, row: usize) -> String {
    format!("{table_id}#{}", row / SEGMENT_ROWS)
}

impl PlantedSuite {
    pub fn generate(seed: u64) -> Self {
        let mut words = Words::new(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_7ab1e);
        let mut dates = Dates::new(&mut rng);
        let mut passages = Vec::new();
        let mut tables = Vec::new();

        let clubs: Vec<String> = (0..CLUBS)
            .map(|_| format!("{} {}", words.word(), words.word()))
            .collect();
        for (i, club) in clubs.iter().enumerate() {
            let town = words.word();
            passages.push(Passage {
                id: format!("club{i:02}"),
                title: club.clone(),
                body: format!("{club} is a football side from {town}."),
            });
        }

        // Roster rows in a fixed shuffled order: the first 50 carry the
        // single-link questions, the next 20 the expansion questions, the
        // next few get a biography without a question.
        let mut slots: Vec<(usize, usize)> = (0..ROSTER_TABLES)
            .flat_map(|t| (0..ROWS_PER_TABLE).map(move |r| (t, r)))
            .collect();
        slots.shuffle(&mut rng);
        let single: HashSet<(usize, usize)> =
            slots[..SINGLE_LINK_QUESTIONS].iter().copied().collect();
        let expand: HashSet<(usize, usize)> = slots
            [SINGLE_LINK_QUESTIONS..SINGLE_LINK_QUESTIONS + QNE_QUESTIONS]
            .iter()
            .copied()
            .collect();
        let first_extra = SINGLE_LINK_QUESTIONS + QNE_QUESTIONS;
        let extra: HashSet<(usize, usize)> = slots[first_extra..first_extra + EXTRA_PEOPLE]
            .iter()
            .copied()
            .collect();

        let mut single_link = Vec::new();
        let mut qne = Vec::new();
        let mut person = 0usize;
        for t in 0..ROSTER_TABLES {
            let table_id = format!("roster{t:02}");
            let label = format!("{} {}", words.word(), words.word());
            let mut rows = Vec::new();
            for r in 0..ROWS_PER_TABLE {
                let name = words.name();
                let club = clubs[rng.random_range(0..CLUBS)].clone();
                let season = rng.random_range(1990..2024u32).to_string();
                rows.push(vec![name.clone(), club, season, format_fee(fee(&mut rng))]);
                if expand.contains(&(t, r)) {
                    let nick = words.word();
                    let id = format!("athlete{:02}", qne.len());
                    passages.push(Passage {
                        id: id.clone(),
                        title: format!("{name} (athlete)"),
                        body: format!("The nickname of {name} athlete is {nick}."),
                    });
                    qne.push(qa(
                        format!("What is the nickname of {name} of the {label} roster?"),
                        nick,
                        segment_of(&table_id, r),
                        id,
                    ));
                    continue;
                }
                if !single.contains(&(t, r)) && !extra.contains(&(t, r)) {
                    continue;
                }
                let date = dates.next(&mut rng);
                let town = words.word();
                let id = format!("person{person:03}");
                person += 1;
                passages.push(Passage {
                    id: id.clone(),
                    title: name.clone(),
                    body: format!("{name} was born on {date} in {town}."),
                });
                if single.contains(&(t, r)) {
                    single_link.push(qa(
                        format!("When was {name} of the {label} roster born?"),
                        date,
                        segment_of(&table_id, r),
                        id,
                    ));
                }
            }
            tables.push(Table {
                id: table_id,
                title: format!("{label} roster"),
                header: vec![
                    "Player".into(),
                    "Club".into(),
                    "Season".into(),
                    "Fee".into(),
                ],
                rows,
            });
        }

        let aggregation_clubs: Vec<String> = (0..AGGREGATION_CLUBS)
            .map(|_| format!("{} {}", words.word(), words.word()))
            .collect();
        for (i, club) in aggregation_clubs.iter().enumerate() {
            passages.push(Passage {
                id: format!("aggclub{i}"),
                title: club.clone(),
                body: format!(
                    "{club} paid the highest fee in the transfer records of the player market."
                ),
            });
        }

        let mut aggregation = Vec::new();
        for t in 0..AGGREGATION_TABLES {
            let table_id = format!("transfers{t:02}");
            let label = format!("{} {}", words.word(), words.word());
            let gold_row = SEGMENT_ROWS + rng.random_range(0..ROWS_PER_TABLE - SEGMENT_ROWS);
            let mut fees: Vec<u64> = Vec::new();
            while fees.len() < ROWS_PER_TABLE {
                let f = fee(&mut rng);
                if !fees.contains(&f) {
                    fees.push(f);
                }
            }
            fees.sort_unstable();
            let top = fees.pop().expect("non-empty fees");
            fees.shuffle(&mut rng);
            fees.insert(gold_row, top);

            let mut rows = Vec::new();
            let mut gold = None;
            for (r, fee) in fees.iter().enumerate() {
                let name = words.name();
                let season = rng.random_range(1990..2024u32).to_string();
                let id = format!("{table_id}_p{r}");
                if r < SEGMENT_ROWS {
                    let club = aggregation_clubs[rng.random_range(0..AGGREGATION_CLUBS)].clone();
                    rows.push(vec![name.clone(), club, season, format_fee(*fee)]);
                    passages.push(Passage {
                        id,
                        title: name.clone(),
                        body: format!(
                            "{name} was the player with the highest fee in the {label} transfer records for one season."
                        ),
                    });
                } else {
                    let club = clubs[rng.random_range(0..CLUBS)].clone();
                    rows.push(vec![name.clone(), club, season, format_fee(*fee)]);
                    let date = dates.next(&mut rng);
                    let town = words.word();
                    passages.push(Passage {
                        id: id.clone(),
                        title: name.clone(),
                        body: format!("{name} was born on {date} in {town}."),
                    });
                    if r == gold_row {
                        gold = Some((date, id));
                    }
                }
            }
            let (date, id) = gold.expect("gold row lies in the second segment");
            aggregation.push(qa(
                format!("When was the player with the highest fee in the {label} transfer records born?"),
                date,
                segment_of(&table_id, gold_row),
                id,
            ));
            tables.push(Table {
                id: table_id,
                title: format!("{label} transfer records"),
                header: vec![
                    "Player".into(),
                    "Club".into(),
                    "Season".into(),
                    "Fee".into(),
                ],
                rows,
            });
        }

        Self {
            tables,
            passages,
            single_link,
            qne,
            aggregation,
        }
    }

    /// Segmented corpus at the planted segment size.
    pub fn corpus(&self) -> Result<Corpus, CorpusError> {
        Ok(
            Corpus::from_parts(self.tables.clone(), self.passages.clone())?
                .segment_tables(SEGMENT_ROWS),
        )
    }

    /// Desk-scale configuration: the rule oracle refiner, and a stage-1
    /// budget small enough that the corpus has more strong edges than fit.
    pub fn config(seed: u64) -> PipelineConfig {
        let mut config = PipelineConfig {
            max_rows: SEGMENT_ROWS,
            seed,
            k1: 400,
            k2: 20,
            b: 10,
            fanout: 20,
            k: 10,
            ..PipelineConfig::default()
        };
        config.propagate_seed();
        config
    }

    pub fn all(&self) -> Vec<QAPair> {
        self.single_link
            .iter()
            .chain(&self.qne)
            .chain(&self.aggregation)
            .cloned()
            .collect()
    }

    /// Writes `tables.jsonl`, `passages.jsonl`, one QA file per question
    /// kind and `qa.jsonl` with all of them.
    pub fn write_files(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        write_jsonl(&dir.join("tables.jsonl"), &self.tables)?;
        write_jsonl(&dir.join("passages.jsonl"), &self.passages)?;
        write_jsonl(&dir.join("qa_single_link.jsonl"), &self.single_link)?;
        write_jsonl(&dir.join("qa_qne.jsonl"), &self.qne)?;
        write_jsonl(&dir.join("qa_aggregation.jsonl"), &self.aggregation)?;
        write_jsonl(&dir.join("qa.jsonl"), &self.all())
    }
}

fn write_jsonl<T: serde::Serialize>(path: &Path, items: &[T]) -> io::Result<()> {
    let mut out = io::BufWriter::new(fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}
