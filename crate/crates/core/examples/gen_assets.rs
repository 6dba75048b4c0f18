//! Regenerates the bundled data files under `crates/core/data/`.
//!
//! ```text
//! cargo run -p specleak --example gen_assets -- crates/core/data
//! ```
//!
//! Output is a pure function of the constants below; rerunning leaves the
//! files byte-identical.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use specleak::lm::{NGramModel, SamplerConfig, UnknownPolicy};
use specleak::specdec::{Engine, EngineKind, LookaheadConfig};

const SEED: u64 = 0x5eed_da7a;

// Must agree with the bundled experiment defaults.
const ORDER: usize = 5;
const ALPHA: f64 = 0.001;
const MAX_TOKENS: usize = 64;

const DISEASES: [&str; 50] = [
    "cold", "asthma", "gout", "anemia", "eczema", "acne", "mumps", "dengue", "ulcers", "otitis",
    "angina", "stroke", "lupus", "scurvy", "croup", "polio", "rabies", "hernia", "lyme", "ebola",
    "zika", "warts", "herpes", "sepsis", "colic", "goiter", "boils", "lice", "thrush", "cysts",
    "piles", "reflux", "palsy", "apnea", "myopia", "mange", "yaws", "chorea", "ileus", "quinsy",
    "typhus", "cancer", "grippe", "strep", "ptosis", "scabs", "polyps", "cramp", "gallop", "styes",
];

const SYMPTOMS: [&str; 35] = [
    "fever", "cough", "aches", "nausea", "rash", "chills", "sweats", "itch", "edema", "wheeze",
    "cramps", "bloat", "thirst", "tremor", "tingle", "sores", "pain", "bruise", "sneeze", "vomit",
    "welts", "spots", "lumps", "faints", "fogs", "dizzy", "stiff", "pallor", "gripe", "chafe",
    "burns", "sweat", "flush", "shakes", "numb",
];

const CAUSES: [&str; 14] = [
    "virus", "germs", "worms", "pollen", "stress", "diet", "genes", "sugar", "aging", "smoke",
    "fungus", "mites", "toxins", "dust",
];

const ORGANS: [&str; 16] = [
    "lungs", "heart", "brain", "skin", "liver", "belly", "joints", "blood", "eyes", "ears",
    "kidney", "colon", "bones", "throat", "nose", "bowel",
];

const GROUPS: [&str; 10] = [
    "kids", "elders", "cooks", "moms", "jocks", "staff", "farmer", "pupils", "adults", "miners",
];

const ADVICE: [&str; 14] = [
    "call a doctor if it gets worse .",
    "drink plenty of water every day .",
    "ask a chemist before you take a new drug .",
    "get enough sleep and keep warm .",
    "wash your hands often to stop the spread .",
    "keep a diary of your signs .",
    "avoid alcohol while you recover .",
    "a blood test can find the cause .",
    "most cases are mild and clear up on their own .",
    "seek urgent care if you cannot breathe .",
    "a yearly exam can catch it early .",
    "eat small meals and rest often .",
    "tell your doctor about any other pain .",
    "follow the dose on the label .",
];

/// Fixed-answer general health questions: (question, answer).
const GENERAL: [(&str, &str); 20] = [
    ("how much water should i drink each day ?", "most adults need about eight glasses of water each day and more when it is hot ."),
    ("how many hours of sleep do adults need ?", "adults need seven to nine hours of sleep each night to stay healthy ."),
    ("is coffee bad for my heart ?", "one or two cups of coffee a day is safe for most people but too much can raise your heart rate ."),
    ("how often should i exercise ?", "try to exercise for thirty minutes on most days of the week ."),
    ("what is a healthy breakfast ?", "a healthy breakfast has whole grains , fruit and some protein such as eggs or yogurt ."),
    ("how can i lower my stress ?", "slow breathing , short walks and talking to friends can lower your stress ."),
    ("when should i get a flu shot ?", "get a flu shot every year before the winter season starts ."),
    ("why does my back hurt after work ?", "sitting for long hours with poor posture often makes your back hurt after work ."),
    ("can i take painkillers with food ?", "yes , taking painkillers with food can protect your stomach ."),
    ("how do i treat a small burn ?", "cool a small burn under running water for ten minutes and cover it with a clean cloth ."),
    ("what should i eat to gain energy ?", "fruit , nuts and whole grains give you steady energy through the day ."),
    ("how long does a cut take to heal ?", "a small cut usually heals in about one week if you keep it clean ."),
    ("is it safe to run every day ?", "running every day is safe for many people if you rest when your legs feel sore ."),
    ("how can i stop snoring ?", "sleeping on your side and losing weight can help you stop snoring ."),
    ("what helps with a hangover ?", "water , rest and a light meal help with a hangover ."),
    ("why do my eyes feel tired ?", "screens and poor light often make your eyes feel tired ."),
    ("how do i know if i have a fever ?", "use a thermometer and if your temperature is above thirty eight degrees you have a fever ."),
    ("should i see a doctor for a headache ?", "see a doctor for a headache that is sudden , severe or comes with a stiff neck ."),
    ("how can i protect my skin from the sun ?", "wear sunscreen , a hat and long sleeves to protect your skin from the sun ."),
    ("what vitamins do children need ?", "children need vitamin d , calcium and iron from a varied diet ."),
];

const FOODS: [&str; 16] = [
    "sugar", "salt", "meat", "fries", "liquor", "coffee", "spices", "dairy", "shrimp", "gluten",
    "soda", "nuts", "eggs", "snacks", "candy", "beer",
];

const TESTS: [&str; 11] = [
    "scan", "xray", "swab", "biopsy", "smear", "panel", "echo", "exam", "assay", "probe", "check",
];

const SPECIALISTS: [&str; 10] = [
    "nurse", "medic", "doctor", "healer", "matron", "physio", "intern", "medics", "surgn", "carer",
];

const DOSES: [&str; 10] = [
    "5", "10", "20", "25", "40", "50", "100", "200", "250", "500",
];

const DRUG_HEADS: [&str; 20] = [
    "ve", "co", "za", "pr", "me", "to", "de", "li", "qu", "ra", "fe", "ox", "be", "sa", "tr", "no",
    "am", "ce", "le", "ha",
];

const DRUG_TAILS: [&str; 10] = [
    "mab", "lol", "zol", "vir", "tid", "xin", "pam", "fen", "nol", "dol",
];

struct Profile {
    symptoms: [&'static str; 3],
    cause: &'static str,
    organ: &'static str,
    drugs: [String; 2],
    dose: &'static str,
    days: usize,
    food: &'static str,
    test: &'static str,
    specialist: &'static str,
    group: &'static str,
}

fn pick<'a, R: Rng>(rng: &mut R, xs: &[&'a str]) -> &'a str {
    xs[rng.gen_range(0..xs.len())]
}

fn profiles(rng: &mut ChaCha8Rng) -> Vec<Profile> {
    let mut drugs: Vec<String> = DRUG_HEADS
        .iter()
        .flat_map(|h| DRUG_TAILS.iter().map(move |t| format!("{h}{t}")))
        .collect();
    drugs.shuffle(rng);
    DISEASES
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let s: Vec<&str> = SYMPTOMS.choose_multiple(rng, 3).copied().collect();
            Profile {
                symptoms: [s[0], s[1], s[2]],
                cause: pick(rng, &CAUSES),
                organ: pick(rng, &ORGANS),
                drugs: [drugs[2 * i].clone(), drugs[2 * i + 1].clone()],
                dose: pick(rng, &DOSES),
                days: rng.gen_range(3..=30),
                food: pick(rng, &FOODS),
                test: pick(rng, &TESTS),
                specialist: pick(rng, &SPECIALISTS),
                group: pick(rng, &GROUPS),
            }
        })
        .collect()
}

/// Question forms per template; index 0 is the canonical form. Variants
/// end in the same three tokens as the canonical form.
fn questions(kind: usize, d: &str) -> Vec<String> {
    match kind {
        0 => vec![
            format!("what are the signs of {d} ?"),
            format!("doctor , what are the signs of {d} ?"),
            format!("please tell me the signs of {d} ?"),
        ],
        1 => vec![
            format!("how is {d} treated ?"),
            format!("doctor , how is {d} treated ?"),
            format!("please tell me how {d} is treated ?"),
        ],
        2 => vec![
            format!("what causes {d} ?"),
            format!("doctor , what causes {d} ?"),
            format!("please tell me what causes {d} ?"),
        ],
        3 => vec![
            format!("who gets {d} ?"),
            format!("doctor , who gets {d} ?"),
            format!("please tell me who gets {d} ?"),
        ],
        _ => vec![
            format!("how can i prevent {d} ?"),
            format!("doctor , how can i prevent {d} ?"),
            format!("please tell me how i can prevent {d} ?"),
        ],
    }
}

/// Answers restate the question and reuse short phrases, as chat answers
/// do, while most 4-token windows stay specific to one disease.
fn answer(kind: usize, d: &str, p: &Profile, rng: &mut ChaCha8Rng) -> String {
    let [s1, s2, s3] = p.symptoms;
    let [a, b] = [&p.drugs[0], &p.drugs[1]];
    let (dose, days, organ, group, food, test, spec, cause) = (
        p.dose,
        p.days,
        p.organ,
        p.group,
        p.food,
        p.test,
        p.specialist,
        p.cause,
    );
    let mut text = match kind {
        0 => format!(
            "{d} signs are {s1} , {s2} and {s3} . {s1} , {s2} and {s3} can last {days} days . \
             see a {spec} if {s1} , {s2} or {s3} get worse ."
        ),
        1 => format!(
            "{d} is treated with {a} and {b} . take {a} {dose} mg and {b} {dose} mg a day for {d} . \
             {a} and {b} clash with {food} ."
        ),
        2 => format!(
            "{d} is caused by {cause} in the {organ} . {cause} in the {organ} hits {group} with {d} . \
             a {spec} can check the {organ} for {cause} ."
        ),
        3 => format!(
            "{group} get {d} more often . {group} who eat {food} get {d} more often . \
             a {spec} should check {group} for {d} and {s1} ."
        ),
        _ => format!(
            "to prevent {d} avoid {food} and {cause} . {food} and {cause} can harm the {organ} . \
             a {test} can find {d} early ."
        ),
    };
    for _ in 0..rng.gen_range(0..3) {
        text.push(' ');
        text.push_str(pick(rng, &ADVICE));
    }
    text
}

fn corpus(rng: &mut ChaCha8Rng, profiles: &[Profile]) -> Vec<String> {
    let mut docs = Vec::new();
    for (d, p) in DISEASES.iter().zip(profiles) {
        for kind in 0..5 {
            let qs = questions(kind, d);
            for rep in 0..6 {
                let q = if rep < 4 { &qs[0] } else { &qs[1 + rep % 2] };
                docs.push(format!("{q} {}", answer(kind, d, p, rng)));
            }
        }
    }
    for (q, a) in GENERAL {
        for _ in 0..10 {
            let mut doc = format!("{q} {a}");
            if rng.gen_bool(0.5) {
                doc.push(' ');
                doc.push_str(pick(rng, &ADVICE));
            }
            docs.push(doc);
        }
    }
    docs.shuffle(rng);
    docs
}

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ne", "ru", "ta", "vo", "zi", "pe", "da", "fu", "go", "hi", "ju", "bo", "se",
];

fn pseudo_word(i: usize) -> String {
    let mut w = String::new();
    let mut x = i;
    for _ in 0..3 {
        w.push_str(SYLLABLES[x % 16]);
        x /= 16;
    }
    w
}

/// Phrase families for the cache-capacity probe: for each phrase length L
/// and family size P, P phrases `I run w1 .. w(L-2)` with words unique to
/// the family. Returns (corpus lines, sidecar lines).
fn probe_assets() -> (Vec<String>, Vec<String>) {
    let mut next = 0usize;
    let mut lines = vec![vec!["A"; 80].join(" ")];
    let mut sidecar = Vec::new();
    for l in 3..=8usize {
        for p in 1..=8usize {
            let phrases: Vec<String> = (0..p)
                .map(|_| {
                    let mut words = vec!["I".to_owned(), "run".to_owned()];
                    for _ in 0..l - 2 {
                        words.push(pseudo_word(next));
                        next += 1;
                    }
                    words.join(" ")
                })
                .collect();
            for ph in &phrases {
                sidecar.push(format!("{l}\t{p}\t{ph}"));
            }
            let cycle = phrases.join(" ");
            lines.push([cycle.as_str(); 4].join(" "));
        }
    }
    (lines, sidecar)
}

fn rephrase(prompt: &str) -> String {
    if let Some(rest) = prompt.strip_prefix("what are the signs of ") {
        format!("please tell me the signs of {rest}")
    } else if prompt.starts_with("how is ")
        || prompt.starts_with("what causes ")
        || prompt.starts_with("who gets ")
    {
        format!("doctor , {prompt}")
    } else if let Some(rest) = prompt.strip_prefix("how can i prevent ") {
        format!("please tell me how i can prevent {rest}")
    } else {
        format!("doctor , {prompt}")
    }
}

fn main() -> anyhow::Result<()> {
    let out = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "crates/core/data".into()),
    );
    std::fs::create_dir_all(&out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let profiles = profiles(&mut rng);
    let docs = corpus(&mut rng, &profiles);
    let corpus_text = docs.join("\n") + "\n";

    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in corpus_text.split_whitespace() {
        *counts.entry(w).or_default() += 1;
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let mut wordlist = String::new();
    for (w, c) in &ranked {
        writeln!(wordlist, "{w}\t{c}")?;
    }

    // Datastore: answers of 200 distinct documents.
    let mut store_set = BTreeSet::new();
    let mut order: Vec<usize> = (0..docs.len()).collect();
    order.shuffle(&mut rng);
    for &i in &order {
        let ans = docs[i]
            .split_once(" ? ")
            .map_or(docs[i].as_str(), |(_, a)| a);
        store_set.insert(ans.to_owned());
        if store_set.len() == 200 {
            break;
        }
    }
    let store_lines: Vec<String> = {
        let mut v: Vec<String> = store_set.into_iter().collect();
        v.shuffle(&mut rng);
        v
    };

    // Benchmark prompts: keep candidates whose greedy responses differ.
    let model = Arc::new(NGramModel::train_on_text(&corpus_text, ORDER, ALPHA)?);
    let engine = Engine::new(
        model.clone(),
        EngineKind::Lookahead(LookaheadConfig::default()),
    )?;
    let mut candidates: Vec<String> = Vec::new();
    for (i, d) in DISEASES.iter().enumerate() {
        candidates.push(questions(i % 5, d)[0].clone());
    }
    for (q, _) in GENERAL {
        candidates.push(q.to_owned());
    }
    for (i, d) in DISEASES.iter().enumerate() {
        candidates.push(questions((i + 2) % 5, d)[0].clone());
    }
    let mut seen: BTreeMap<Vec<usize>, String> = BTreeMap::new();
    let mut general = Vec::new();
    for c in candidates {
        let ids = model.vocab().tokenize(&c, UnknownPolicy::Reject)?;
        let iters = engine.decode(&ids, MAX_TOKENS, SamplerConfig::greedy());
        let sizes: Vec<usize> = iters
            .iter()
            .map(|it| {
                it.tokens
                    .iter()
                    .map(|&t| model.vocab().byte_len(t) + 1)
                    .sum()
            })
            .collect();
        if seen.contains_key(&sizes) {
            continue;
        }
        seen.insert(sizes, c.clone());
        general.push(c);
        if general.len() == 50 {
            break;
        }
    }
    anyhow::ensure!(
        general.len() == 50,
        "only {} distinct prompts",
        general.len()
    );
    let similar: Vec<String> = DISEASES
        .iter()
        .map(|d| questions(0, d)[0].clone())
        .collect();
    let rephrased: Vec<String> = general.iter().map(|p| rephrase(p)).collect();

    let (probe_lines, probe_sidecar) = probe_assets();

    let write =
        |name: &str, lines: &[String]| std::fs::write(out.join(name), lines.join("\n") + "\n");
    std::fs::write(out.join("corpus.txt"), &corpus_text)?;
    std::fs::write(out.join("wordlist.txt"), wordlist)?;
    write("store.txt", &store_lines)?;
    write("prompts_general.txt", &general)?;
    write("prompts_similar.txt", &similar)?;
    write("prompts_rephrased.txt", &rephrased)?;
    write("probe_corpus.txt", &probe_lines)?;
    write("probe_phrases.tsv", &probe_sidecar)?;
    eprintln!(
        "corpus: {} docs, {} tokens, {} types",
        docs.len(),
        corpus_text.split_whitespace().count(),
        ranked.len()
    );
    Ok(())
}
