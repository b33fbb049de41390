//! A templated toy corpus: facts about invented people, and dialogues whose
//! responses quote one fact at a varying rate.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::DialogueExample;
use crate::index::InvertedIndex;
use crate::textcore::tokenize;

const PEOPLE: [&str; 20] = [
    "amara", "bastian", "corin", "delphine", "emrys", "farah", "gideon", "hollis", "ines", "jory", "kestrel", "linus",
    "maren", "niamh", "oskar", "petra", "quill", "rosalind", "soren", "talia",
];

struct Relation {
    fact: &'static str,
    question: &'static str,
    objects: [&'static str; 6],
}

const RELATIONS: [Relation; 10] = [
    Relation {
        fact: "{e} lives in the town of {o}",
        question: "where does {e} live ?",
        objects: ["harlow", "denby", "morice", "caldera", "pinewood", "ashford"],
    },
    Relation {
        fact: "{e} works as a {o} at the old market",
        question: "what does {e} do for work ?",
        objects: ["baker", "tailor", "painter", "carpenter", "nurse", "teacher"],
    },
    Relation {
        fact: "{e} keeps a pet {o} in the garden",
        question: "does {e} have any pets ?",
        objects: ["rabbit", "tortoise", "parrot", "ferret", "goat", "hedgehog"],
    },
    Relation {
        fact: "{e} plays the {o} every sunday evening",
        question: "does {e} play any music ?",
        objects: ["violin", "cello", "banjo", "flute", "drums", "harp"],
    },
    Relation {
        fact: "{e} likes to cook {o} for friends",
        question: "what food does {e} cook ?",
        objects: ["soup", "dumplings", "curry", "pancakes", "risotto", "stew"],
    },
    Relation {
        fact: "{e} drives a {o} truck to the coast",
        question: "what does {e} drive ?",
        objects: ["red", "green", "yellow", "silver", "blue", "black"],
    },
    Relation {
        fact: "{e} reads books about {o} before bed",
        question: "what does {e} like to read ?",
        objects: ["volcanoes", "pirates", "dragons", "planets", "castles", "glaciers"],
    },
    Relation {
        fact: "{e} was born in the spring of {o}",
        question: "when was {e} born ?",
        objects: ["1961", "1974", "1983", "1990", "1995", "2001"],
    },
    Relation {
        fact: "{e} speaks {o} with the neighbours",
        question: "what language does {e} speak ?",
        objects: ["french", "welsh", "polish", "greek", "danish", "basque"],
    },
    Relation {
        fact: "{e} grew up near a quiet {o}",
        question: "where did {e} grow up ?",
        objects: ["lake", "forest", "harbour", "valley", "desert", "canyon"],
    },
];

const OPENERS: [&str; 4] = ["well ,", "oh ,", "i heard", "sure ,"];
const TAILS: [&str; 4] = ["if i remember right", "or so they told me", "i think", "last time i checked"];
const LEADS: [&str; 3] = ["i met {e} yesterday .", "we talked about {e} .", "{e} came by today ."];

/// Fractions of the fact quoted by a response; 1.0 quotes it verbatim.
pub const RATES: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub dialogues: usize,
    /// Candidates per dialogue, the gold included.
    pub candidates: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dialogues: 500,
            candidates: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub knowledge: Vec<String>,
    /// Each dialogue carries its gold fact and a candidate list for testing;
    /// training ignores both.
    pub dialogues: Vec<DialogueExample>,
    /// Quote rate used for each dialogue.
    pub rates: Vec<f64>,
}

fn fill(template: &str, e: &str, o: &str) -> String {
    template.replace("{e}", e).replace("{o}", o)
}

/// 200 facts (20 people x 10 relations) and `config.dialogues` dialogues.
pub fn generate(config: &SynthConfig) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut knowledge = Vec::with_capacity(PEOPLE.len() * RELATIONS.len());
    for e in PEOPLE {
        for rel in &RELATIONS {
            let o = rel.objects.choose(&mut rng).copied().unwrap_or_default();
            knowledge.push(fill(rel.fact, e, o));
        }
    }
    let index = InvertedIndex::build(&knowledge).ok();
    let mut dialogues = Vec::with_capacity(config.dialogues);
    let mut rates = Vec::with_capacity(config.dialogues);
    for _ in 0..config.dialogues {
        let (pi, ri) = (rng.random_range(0..PEOPLE.len()), rng.random_range(0..RELATIONS.len()));
        let e = PEOPLE[pi];
        let fact = &knowledge[pi * RELATIONS.len() + ri];
        let mut context = Vec::new();
        if rng.random_bool(0.5) {
            context.push(fill(LEADS.choose(&mut rng).copied().unwrap_or_default(), e, ""));
        }
        context.push(fill(RELATIONS[ri].question, e, ""));
        let rate = *RATES.choose(&mut rng).unwrap_or(&1.0);
        let response = quote(fact, rate, &mut rng);
        let candidates = candidate_list(index.as_ref(), &knowledge, &context, fact, config.candidates, &mut rng);
        dialogues.push(DialogueExample {
            context,
            response,
            gold_knowledge: vec![fact.clone()],
            candidate_knowledge: candidates,
        });
        rates.push(rate);
    }
    SyntheticCorpus {
        knowledge,
        dialogues,
        rates,
    }
}

fn quote<R: Rng>(fact: &str, rate: f64, rng: &mut R) -> String {
    if rate >= 1.0 {
        return fact.to_string();
    }
    let tokens = tokenize(fact);
    let keep = ((tokens.len() as f64) * rate).ceil() as usize;
    let mut parts = vec![OPENERS.choose(rng).copied().unwrap_or_default().to_string()];
    parts.push(tokens[..keep.max(1)].join(" "));
    parts.push(TAILS.choose(rng).copied().unwrap_or_default().to_string());
    parts.join(" ")
}

/// The gold fact plus context-retrieved distractors, shuffled.
fn candidate_list<R: Rng>(
    index: Option<&InvertedIndex>,
    knowledge: &[String],
    context: &[String],
    gold: &str,
    n: usize,
    rng: &mut R,
) -> Vec<String> {
    let mut out = vec![gold.to_string()];
    if let Some(index) = index {
        let query = context.join(" ");
        for c in index.retrieve_topl(&query, n + 1).items {
            if out.len() == n {
                break;
            }
            if c.sentence.text != gold {
                out.push(c.sentence.text);
            }
        }
    }
    while out.len() < n.min(knowledge.len()) {
        let k = &knowledge[rng.random_range(0..knowledge.len())];
        if !out.contains(k) {
            out.push(k.clone());
        }
    }
    out.shuffle(rng);
    out
}
