//! Instances, splits and the dataset transformations: hint lookup,
//! paraphrase augmentation, translation round trips, nested subsampling and
//! a template-based synthetic generator.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    #[default]
    Original,
    Augmented,
    Synthetic,
}

/// One pair of statements with, optionally, the three candidate reasons.
///
/// `nonsense_index` points at the statement that is against common sense;
/// `reason_index` at the option explaining why.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComveInstance {
    pub id: String,
    pub s1: String,
    pub s2: String,
    pub nonsense_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<[String; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason_index: Option<usize>,
    #[serde(default)]
    pub provenance: Provenance,
}

impl ComveInstance {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Input(format!("instance {}: {m}", self.id)));
        if self.s1.is_empty() || self.s2.is_empty() {
            return bad("empty statement".into());
        }
        if self.nonsense_index > 1 {
            return bad(format!("nonsense_index {} not in {{0, 1}}", self.nonsense_index));
        }
        match (&self.options, self.reason_index) {
            (None, Some(_)) => bad("reason_index without options".into()),
            (_, Some(r)) if r > 2 => bad(format!("reason_index {r} not in {{0, 1, 2}}")),
            _ => Ok(()),
        }
    }

    pub fn statements(&self) -> [&str; 2] {
        [&self.s1, &self.s2]
    }

    /// The statement that goes against common sense.
    pub fn nonsense(&self) -> &str {
        self.statements()[self.nonsense_index]
    }

    /// Index of the sensible statement, the Sen-Making target.
    pub fn sensible_index(&self) -> usize {
        1 - self.nonsense_index
    }
}

/// The sensible statement of the pair, used as context for explanations.
pub fn hint_of(instance: &ComveInstance) -> &str {
    instance.statements()[instance.sensible_index()]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Dev,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Dev => "dev",
            SplitName::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    name: SplitName,
    instances: Vec<ComveInstance>,
}

impl DatasetSplit {
    /// Validates every instance and rejects duplicate ids.
    pub fn new(name: SplitName, instances: Vec<ComveInstance>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for inst in &instances {
            inst.validate()?;
            if !seen.insert(inst.id.as_str()) {
                return Err(Error::Input(format!("duplicate id {} in {} split", inst.id, name.as_str())));
            }
        }
        Ok(Self { name, instances })
    }

    pub fn name(&self) -> SplitName {
        self.name
    }

    pub fn instances(&self) -> &[ComveInstance] {
        &self.instances
    }

    pub fn into_instances(self) -> Vec<ComveInstance> {
        self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn has_options(&self) -> bool {
        !self.instances.is_empty() && self.instances.iter().all(|i| i.options.is_some() && i.reason_index.is_some())
    }

    pub fn with_name(mut self, name: SplitName) -> Self {
        self.name = name;
        self
    }
}

/// `⌈fraction · n⌉` without rounding noise pushing exact products up.
fn ceil_count(fraction: f64, n: usize) -> usize {
    let x = fraction * n as f64;
    let r = libm::round(x);
    if libm::fabs(x - r) < 1e-9 {
        r as usize
    } else {
        libm::ceil(x) as usize
    }
}

/// Seeded sample of `⌈fraction · N⌉` instances, kept in their original order.
/// The sample is a prefix of one seeded permutation, so smaller fractions
/// under the same seed are always subsets of larger ones.
pub fn subsample(split: &DatasetSplit, fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Input(format!("fraction {fraction} outside (0, 1]")));
    }
    let n = split.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(seed));
    let mut keep = order[..ceil_count(fraction, n).min(n)].to_vec();
    keep.sort_unstable();
    Ok(DatasetSplit {
        name: split.name,
        instances: keep.into_iter().map(|i| split.instances[i].clone()).collect(),
    })
}

// ---- translation round trip ---------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    S1,
    S2,
}

impl Field {
    pub fn as_str(self) -> &'static str {
        match self {
            Field::S1 => "s1",
            Field::S2 => "s2",
        }
    }
}

/// One statement sent out for (back-)translation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranslationRecord {
    pub id: String,
    pub field: Field,
    pub text: String,
}

/// Two records per instance, `s1` then `s2`.
pub fn export_for_translation(split: &DatasetSplit) -> Vec<TranslationRecord> {
    split
        .instances
        .iter()
        .flat_map(|inst| {
            [(Field::S1, &inst.s1), (Field::S2, &inst.s2)].map(|(field, text)| TranslationRecord {
                id: inst.id.clone(),
                field,
                text: text.clone(),
            })
        })
        .collect()
}

fn augmented_id(id: &str) -> String {
    format!("{id}-aug")
}

fn augmented_copy(inst: &ComveInstance, s1: String, s2: String) -> ComveInstance {
    ComveInstance {
        id: augmented_id(&inst.id),
        s1,
        s2,
        provenance: Provenance::Augmented,
        ..inst.clone()
    }
}

/// Builds `split` followed by one copy per instance whose statements are
/// replaced by the translated texts. Every `(id, field)` of the split must
/// appear exactly once and no record may refer to an unknown id.
pub fn import_translations(split: &DatasetSplit, records: &[TranslationRecord]) -> Result<DatasetSplit> {
    let ids: BTreeSet<&str> = split.instances.iter().map(|i| i.id.as_str()).collect();
    let mut texts: BTreeMap<(&str, Field), &str> = BTreeMap::new();
    for r in records {
        if !ids.contains(r.id.as_str()) {
            return Err(Error::Coverage(format!("record ({}, {}) matches no instance", r.id, r.field.as_str())));
        }
        if texts.insert((r.id.as_str(), r.field), r.text.as_str()).is_some() {
            return Err(Error::Coverage(format!("duplicate record ({}, {})", r.id, r.field.as_str())));
        }
    }
    let mut out = split.instances.clone();
    for inst in &split.instances {
        let get = |field: Field| {
            texts
                .get(&(inst.id.as_str(), field))
                .map(|t| t.to_string())
                .ok_or_else(|| Error::Coverage(format!("missing record ({}, {})", inst.id, field.as_str())))
        };
        let (s1, s2) = (get(Field::S1)?, get(Field::S2)?);
        out.push(augmented_copy(inst, s1, s2));
    }
    DatasetSplit::new(split.name, out)
}

// ---- paraphrase augmentation --------------------------------------------

#[derive(Clone, Copy, Debug)]
pub enum Augmenter<'a> {
    /// Seeded synonym substitution plus article and contraction cleanup.
    Paraphrase,
    /// Texts returned by an external translation workflow.
    RoundTrip(&'a [TranslationRecord]),
}

const SYNONYMS: &[(&str, &[&str])] = &[
    ("big", &["large", "huge"]),
    ("small", &["little", "tiny"]),
    ("little", &["small", "young"]),
    ("old", &["elderly", "aged"]),
    ("young", &["youthful"]),
    ("tired", &["weary", "exhausted"]),
    ("mother", &["mom", "mum"]),
    ("father", &["dad"]),
    ("boy", &["lad", "kid"]),
    ("girl", &["lass", "kid"]),
    ("friend", &["pal", "buddy"]),
    ("teacher", &["tutor", "instructor"]),
    ("farmer", &["grower"]),
    ("nurse", &["carer"]),
    ("brother", &["sibling"]),
    ("sister", &["sibling"]),
    ("best", &["closest"]),
    ("morning", &["forenoon"]),
    ("evening", &["night"]),
    ("dinner", &["supper"]),
    ("garden", &["yard", "backyard"]),
    ("kitchen", &["cookhouse"]),
    ("river", &["stream", "creek"]),
    ("quickly", &["fast", "rapidly"]),
    ("slowly", &["gently", "unhurriedly"]),
    ("carefully", &["cautiously"]),
    ("every", &["each"]),
    ("often", &["frequently"]),
    ("usually", &["normally", "typically"]),
    ("great", &["much", "real"]),
    ("school", &["class"]),
    ("weekend", &["week end"]),
    ("happily", &["gladly", "cheerfully"]),
    ("put", &["placed", "stuck"]),
    ("into", &["in"]),
    ("house", &["home"]),
];

const CONTRACTIONS: &[(&str, &str)] = &[
    ("don't", "do not"),
    ("doesn't", "does not"),
    ("didn't", "did not"),
    ("can't", "cannot"),
    ("won't", "will not"),
    ("isn't", "is not"),
    ("aren't", "are not"),
    ("wasn't", "was not"),
    ("it's", "it is"),
    ("he's", "he is"),
    ("she's", "she is"),
    ("i'm", "i am"),
    ("they're", "they are"),
    ("you're", "you are"),
];

/// Lowercase alphanumeric core of a word, used for protection lookups.
fn word_key(word: &str) -> String {
    word.chars()
        .filter(|c| c.is_ascii_alphanumeric() || *c == '\'')
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

fn split_punct(word: &str) -> (&str, &str) {
    let end = word.trim_end_matches(|c: char| c.is_ascii_punctuation() && c != '\'').len();
    word.split_at(end)
}

fn starts_with_vowel_sound(word: &str) -> bool {
    let w = word.to_ascii_lowercase();
    if ["uni", "use", "usu", "eu", "one", "once"].iter().any(|p| w.starts_with(p)) {
        return false;
    }
    if ["hour", "honest", "honour", "heir"].iter().any(|p| w.starts_with(p)) {
        return true;
    }
    matches!(w.chars().next(), Some('a' | 'e' | 'i' | 'o' | 'u'))
}

/// Rewrites `text` with seeded synonyms. Words whose key is in `protected`
/// are never changed.
pub fn paraphrase<R: Rng + ?Sized>(text: &str, protected: &BTreeSet<String>, rng: &mut R) -> String {
    let mut words: Vec<String> = Vec::new();
    for raw in text.split_whitespace() {
        let (core, punct) = split_punct(raw);
        let key = word_key(core);
        match CONTRACTIONS.iter().find(|(c, _)| *c == key) {
            Some((_, full)) if !protected.contains(&key) => words.push(format!("{full}{punct}")),
            _ => words.push(raw.to_string()),
        }
    }
    let mut out: Vec<String> = Vec::with_capacity(words.len());
    for word in words.iter().flat_map(|w| w.split(' ')) {
        let (core, punct) = split_punct(word);
        let key = word_key(core);
        let swapped = SYNONYMS
            .iter()
            .find(|(w, _)| *w == key)
            .filter(|_| !protected.contains(&key))
            .and_then(|(_, alts)| rng.random_bool(0.5).then(|| alts[rng.random_range(0..alts.len())]));
        out.push(match swapped {
            Some(alt) => format!("{alt}{punct}"),
            None => word.to_string(),
        });
    }
    for i in 0..out.len().saturating_sub(1) {
        let article = word_key(&out[i]);
        if (article == "a" || article == "an") && !protected.contains(&article) {
            let fixed = if starts_with_vowel_sound(&out[i + 1]) { "an" } else { "a" };
            let (_, punct) = split_punct(&out[i]);
            let upper = out[i].starts_with('A');
            let mut w = String::from(fixed);
            if upper {
                w[..1].make_ascii_uppercase();
            }
            w.push_str(punct);
            out[i] = w;
        }
    }
    out.join(" ")
}

/// Word keys appearing in any option of `inst`.
fn option_words(inst: &ComveInstance) -> BTreeSet<String> {
    inst.options
        .iter()
        .flatten()
        .flat_map(|o| o.split_whitespace())
        .map(word_key)
        .collect()
}

/// Doubles a training split: the originals followed by one augmented copy
/// of each instance with rewritten statements and untouched options and
/// labels.
pub fn augment(split: &DatasetSplit, augmenter: Augmenter<'_>, seed: u64) -> Result<DatasetSplit> {
    if split.name != SplitName::Train {
        return Err(Error::Usage(format!(
            "augmentation applies to the train split only, got {}",
            split.name.as_str()
        )));
    }
    match augmenter {
        Augmenter::RoundTrip(records) => import_translations(split, records),
        Augmenter::Paraphrase => {
            let mut rng = seeded(seed);
            let mut out = split.instances.clone();
            for inst in &split.instances {
                let protected = option_words(inst);
                let s1 = paraphrase(&inst.s1, &protected, &mut rng);
                let s2 = paraphrase(&inst.s2, &protected, &mut rng);
                out.push(augmented_copy(inst, s1, s2));
            }
            DatasetSplit::new(split.name, out)
        }
    }
}

// ---- synthetic data -------------------------------------------------------

/// A class of objects and the verbs that only make sense with them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Category {
    pub name: String,
    /// `(base form, third person singular)`.
    pub verbs: Vec<(String, String)>,
    pub objects: Vec<String>,
}

/// Word lists the synthetic generator draws from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticLexicon {
    pub categories: Vec<Category>,
    pub agents: Vec<String>,
    pub tails: Vec<String>,
}

impl Default for SyntheticLexicon {
    fn default() -> Self {
        let cat = |name: &str, verbs: &[(&str, &str)], objects: &[&str]| Category {
            name: name.into(),
            verbs: verbs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
            objects: objects.iter().map(|o| o.to_string()).collect(),
        };
        let strings = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect();
        Self {
            categories: vec![
                cat("food", &[("eat", "eats"), ("cook", "cooks")], &["apple", "sandwich", "potato", "cake", "omelette", "carrot"]),
                cat("beverage", &[("drink", "drinks"), ("sip", "sips")], &["juice", "tea", "coffee", "soda", "milkshake", "lemonade"]),
                cat("document", &[("read", "reads"), ("sign", "signs")], &["letter", "contract", "novel", "report", "receipt", "newspaper"]),
                cat("garment", &[("wear", "wears"), ("iron", "irons")], &["shirt", "jacket", "scarf", "sweater", "dress", "uniform"]),
                cat("vehicle", &[("drive", "drives"), ("park", "parks")], &["car", "truck", "bus", "tractor", "van", "taxi"]),
                cat("plant", &[("water", "waters"), ("prune", "prunes")], &["rose", "fern", "tulip", "cactus", "bush", "orchid"]),
                cat("instrument", &[("play", "plays"), ("tune", "tunes")], &["guitar", "piano", "violin", "drum", "cello", "harp"]),
                cat("animal", &[("feed", "feeds"), ("pet", "pets")], &["dog", "cat", "rabbit", "horse", "goat", "puppy"]),
            ],
            agents: strings(&[
                "he",
                "she",
                "my mother",
                "the boy",
                "our teacher",
                "the old farmer",
                "his little brother",
                "a tired nurse",
                "my best friend",
                "the young girl",
                "her father",
                "my sister",
            ]),
            tails: strings(&[
                "every morning",
                "in the kitchen",
                "after school",
                "at the weekend",
                "with great care",
                "before dinner",
                "in the garden",
                "near the river",
                "twice a day",
                "every single evening",
                "at her house",
                "quickly and happily",
            ]),
        }
    }
}

impl SyntheticLexicon {
    pub fn validate(&self) -> Result<()> {
        if self.categories.len() < 3 {
            return Err(Error::Config("synthetic lexicon needs at least 3 categories".into()));
        }
        if self.categories.iter().any(|c| c.verbs.is_empty() || c.objects.is_empty()) {
            return Err(Error::Config("every category needs a verb and an object".into()));
        }
        if self.agents.is_empty() || self.tails.is_empty() {
            return Err(Error::Config("synthetic lexicon needs agents and tails".into()));
        }
        Ok(())
    }
}

fn article(word: &str) -> &'static str {
    if starts_with_vowel_sound(word) {
        "an"
    } else {
        "a"
    }
}

/// A verb or object slot of a statement together with its category.
#[derive(Clone, Copy)]
enum Slot<'a> {
    Verb(&'a str, usize),
    Object(&'a str, usize),
}

impl Slot<'_> {
    fn category(self) -> usize {
        match self {
            Slot::Verb(_, c) | Slot::Object(_, c) => c,
        }
    }

    /// A claim about the slot's word belonging to `category`.
    fn fact(self, lex: &SyntheticLexicon, category: usize) -> String {
        let c = &lex.categories[category].name;
        match self {
            Slot::Object(o, _) => format!("{} {o} is a kind of {c}", article(o)),
            Slot::Verb(v, _) => format!("to {v} something it must be a kind of {c}"),
        }
    }
}

/// Generates `n` instances following one planted rule: a verb only makes
/// sense with objects of its own category. The nonsensical statement swaps
/// either the object or the verb for one from another category.
///
/// The correct reason states the true category of the swapped word. In a
/// `hint_signal_strength` fraction of instances the options also state the
/// true category of the untouched slot, and only comparing the statement
/// with the sensible hint reveals which slot was swapped.
pub fn generate_synthetic(
    n: usize,
    seed: u64,
    lexicon: &SyntheticLexicon,
    hint_signal_strength: f64,
    split: SplitName,
) -> Result<DatasetSplit> {
    lexicon.validate()?;
    if n == 0 {
        return Err(Error::Input("synthetic dataset size must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&hint_signal_strength) {
        return Err(Error::Input(format!("hint_signal_strength {hint_signal_strength} outside [0, 1]")));
    }
    let cats = &lexicon.categories;
    let mut rng = seeded(seed);
    let mut instances = Vec::with_capacity(n);
    for i in 0..n {
        let home = rng.random_range(0..cats.len());
        let other = (home + rng.random_range(1..cats.len())) % cats.len();
        let (verb, verb3) = cats[home].verbs.choose(&mut rng).expect("validated");
        let object = cats[home].objects.choose(&mut rng).expect("validated");
        let agent = lexicon.agents.choose(&mut rng).expect("validated");
        let tail = lexicon.tails.choose(&mut rng).expect("validated");
        let sentence = |v: &str, o: &str| format!("{agent} {v} {} {o} {tail}", article(o));

        let sensible = sentence(verb3, object);
        let (nonsense, swapped, kept) = if rng.random_bool(0.5) {
            let o = cats[other].objects.choose(&mut rng).expect("validated");
            (sentence(verb3, o), Slot::Object(o, other), Slot::Verb(verb, home))
        } else {
            let (v, v3) = cats[other].verbs.choose(&mut rng).expect("validated");
            (sentence(v3, object), Slot::Verb(v, other), Slot::Object(object, home))
        };

        let third = loop {
            let c = rng.random_range(0..cats.len());
            if c != home && c != other {
                break c;
            }
        };
        let absent = if rng.random_bool(0.5) {
            Slot::Object(cats[third].objects.choose(&mut rng).expect("validated"), third)
        } else {
            Slot::Verb(&cats[third].verbs.choose(&mut rng).expect("validated").0, third)
        };
        let ambiguous = rng.random::<f64>() < hint_signal_strength;
        let distractor = if ambiguous {
            kept.fact(lexicon, kept.category())
        } else {
            swapped.fact(lexicon, kept.category())
        };
        let mut options = [
            swapped.fact(lexicon, swapped.category()),
            distractor,
            absent.fact(lexicon, absent.category()),
        ];
        let reason_index = rng.random_range(0..3);
        options.swap(0, reason_index);

        let nonsense_index = rng.random_range(0..2);
        let (s1, s2) = if nonsense_index == 0 {
            (nonsense, sensible)
        } else {
            (sensible, nonsense)
        };
        instances.push(ComveInstance {
            id: format!("syn-{}-{i:06}", split.as_str()),
            s1,
            s2,
            nonsense_index,
            options: Some(options),
            reason_index: Some(reason_index),
            provenance: Provenance::Synthetic,
        });
    }
    DatasetSplit::new(split, instances)
}
