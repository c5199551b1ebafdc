use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::redial::write_redial;
use super::tokenize::tokenize;
use super::vocab::RESERVED;
use super::{Catalog, Conversation, ItemId, Role, Turn};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_conversations: usize,
    pub n_items: usize,
    pub n_genres: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

/// A generated corpus together with its catalog and knowledge graph.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub conversations: Vec<Conversation>,
    pub catalog: Catalog,
    /// `(head, relation, tail)` entity keys.
    pub kg_triples: Vec<(String, String, String)>,
    pub item_genre: BTreeMap<ItemId, String>,
    pub item_style: BTreeMap<ItemId, String>,
    pub genres: Vec<String>,
    pub styles: Vec<String>,
}

pub const GENRE_RELATION: &str = "has_genre";
pub const STYLE_RELATION: &str = "has_style";
pub const FIRST_ITEM_ID: u64 = 1000;

const GENRES: [&str; 12] = [
    "comedy",
    "horror",
    "drama",
    "action",
    "romance",
    "thriller",
    "documentary",
    "western",
    "musical",
    "fantasy",
    "mystery",
    "crime",
];

const STYLES: [&str; 6] = ["classic", "modern", "indie", "animated", "foreign", "silent"];

const TITLE_ADJ: [&str; 16] = [
    "Crimson", "Quiet", "Broken", "Golden", "Hidden", "Electric", "Frozen", "Wild", "Lost", "Midnight", "Paper",
    "Iron", "Velvet", "Hollow", "Burning", "Distant",
];

const TITLE_NOUN: [&str; 16] = [
    "River", "Empire", "Garden", "Signal", "Harbor", "Mirror", "Canyon", "Orchard", "Lantern", "Voyage", "Citadel",
    "Meadow", "Engine", "Compass", "Tide", "Summit",
];

const GREETINGS: [(&str, &str); 4] = [
    ("hi !", "hello ! what kind of movies do you like ?"),
    ("hello there !", "hi ! what are you in the mood for ?"),
    ("hey , how are you ?", "i am doing well . what do you like to watch ?"),
    ("good evening !", "good evening ! what can i help you find ?"),
];

/// Seeker preference phrasing paired with the recommender reply it elicits.
const PREFERENCES: [(&str, &str); 4] = [
    (
        "i love {genre} movies . something {style} please .",
        "you should watch {item} ! it is a great {genre} film .",
    ),
    (
        "i am in the mood for a {style} {genre} film .",
        "how about {item} ? it is very {style} .",
    ),
    (
        "can you suggest a {genre} movie ? i like {style} ones .",
        "i would recommend {item} .",
    ),
    (
        "my favorite genre is {genre} , especially {style} films .",
        "have you seen {item} ? you will love it .",
    ),
];

const LIKED: (&str, &str) = (
    "i really liked {liked} . any {style} {genre} movies ?",
    "if you liked that , try {item} .",
);

const CLOSINGS: [(&str, &str); 3] = [
    ("thanks , i will check it out !", "enjoy the movie !"),
    ("sounds great , bye !", "you are welcome , bye !"),
    ("perfect , thank you !", "glad i could help !"),
];

const FILLERS: [&str; 120] = [
    "today",
    "tonight",
    "weekend",
    "honestly",
    "actually",
    "really",
    "maybe",
    "later",
    "friends",
    "family",
    "popcorn",
    "couch",
    "rainy",
    "sunny",
    "evening",
    "morning",
    "work",
    "school",
    "holiday",
    "vacation",
    "bored",
    "tired",
    "excited",
    "happy",
    "relaxed",
    "busy",
    "finally",
    "again",
    "recently",
    "lately",
    "usually",
    "sometimes",
    "often",
    "rarely",
    "always",
    "never",
    "cinema",
    "theater",
    "screen",
    "tv",
    "laptop",
    "phone",
    "snacks",
    "pizza",
    "coffee",
    "tea",
    "dinner",
    "lunch",
    "breakfast",
    "kids",
    "partner",
    "roommate",
    "brother",
    "sister",
    "mom",
    "dad",
    "cousin",
    "neighbor",
    "dog",
    "cat",
    "garden",
    "kitchen",
    "city",
    "town",
    "beach",
    "mountains",
    "winter",
    "summer",
    "spring",
    "autumn",
    "monday",
    "tuesday",
    "wednesday",
    "thursday",
    "friday",
    "saturday",
    "sunday",
    "quickly",
    "slowly",
    "quietly",
    "loudly",
    "seriously",
    "basically",
    "literally",
    "totally",
    "mostly",
    "probably",
    "definitely",
    "certainly",
    "perhaps",
    "anyway",
    "besides",
    "meanwhile",
    "otherwise",
    "still",
    "already",
    "soon",
    "now",
    "then",
    "here",
    "there",
    "everywhere",
    "somewhere",
    "nowhere",
    "upstairs",
    "downstairs",
    "outside",
    "inside",
    "nearby",
    "abroad",
    "overseas",
    "downtown",
    "uptown",
    "online",
    "offline",
    "together",
    "alone",
    "early",
    "late",
    "midweek",
];

fn fill(template: &str, genre: &str, style: &str, item: Option<ItemId>, liked: Option<ItemId>) -> String {
    let mut s = template.replace("{genre}", genre).replace("{style}", style);
    if let Some(id) = item {
        s = s.replace("{item}", &format!("@{id}"));
    }
    if let Some(id) = liked {
        s = s.replace("{liked}", &format!("@{id}"));
    }
    s
}

fn title(i: usize) -> String {
    let a = i % 16;
    let q = i / 16;
    let base = format!("{} {}", TITLE_ADJ[a], TITLE_NOUN[(q + 7 * a) % 16]);
    if i < 256 {
        base
    } else {
        format!("{base} {}", i / 256 + 1)
    }
}

fn name(bank: &[&str], prefix: &str, i: usize) -> String {
    bank.get(i).map_or_else(|| format!("{prefix}{i}"), |s| s.to_string())
}

/// Deterministic generator: every item has one genre and one style; seekers
/// state a genre and style, recommenders answer with the matching item.
pub fn synth_corpus(spec: SynthSpec) -> Result<SynthCorpus> {
    if spec.n_genres == 0 || spec.n_items == 0 || !spec.n_items.is_multiple_of(spec.n_genres) {
        return Err(Error::contract(format!(
            "n_items ({}) must be a positive multiple of n_genres ({})",
            spec.n_items, spec.n_genres
        )));
    }
    let per_genre = spec.n_items / spec.n_genres;
    let genres: Vec<String> = (0..spec.n_genres).map(|g| name(&GENRES, "genre", g)).collect();
    let styles: Vec<String> = (0..per_genre).map(|s| name(&STYLES, "style", s)).collect();
    let item_at = |g: usize, s: usize| ItemId(FIRST_ITEM_ID + (g * per_genre + s) as u64);

    let mut titles = BTreeMap::new();
    let mut item_genre = BTreeMap::new();
    let mut item_style = BTreeMap::new();
    let mut kg_triples = Vec::new();
    for (g, genre) in genres.iter().enumerate() {
        for (s, style) in styles.iter().enumerate() {
            let id = item_at(g, s);
            titles.insert(id, title(g * per_genre + s));
            item_genre.insert(id, genre.clone());
            item_style.insert(id, style.clone());
            kg_triples.push((id.to_string(), GENRE_RELATION.into(), format!("genre:{genre}")));
            kg_triples.push((id.to_string(), STYLE_RELATION.into(), format!("style:{style}")));
        }
    }

    // Filler words pad the context vocabulary up to the requested size.
    let mut base: BTreeSet<String> = BTreeSet::new();
    let all_templates = GREETINGS
        .iter()
        .chain(PREFERENCES.iter())
        .chain(std::iter::once(&LIKED))
        .chain(CLOSINGS.iter())
        .flat_map(|(a, b)| [*a, *b]);
    for t in all_templates {
        for g in &genres {
            for s in &styles {
                base.extend(tokenize(&fill(t, g, s, Some(ItemId(0)), Some(ItemId(0)))));
            }
        }
    }
    base.retain(|t| !t.starts_with('@'));
    let n_fillers = spec
        .vocab_size
        .saturating_sub(RESERVED.len() + base.len() + 1)
        .min(FILLERS.len());
    let fillers = &FILLERS[..n_fillers];

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut conversations = Vec::with_capacity(spec.n_conversations);
    for c in 0..spec.n_conversations {
        let g = rng.random_range(0..spec.n_genres);
        let s = rng.random_range(0..per_genre);
        let target = item_at(g, s);
        let (genre, style) = (&genres[g], &styles[s]);
        let mut texts: Vec<(Role, String)> = Vec::new();

        if rng.random_bool(0.8) {
            let (seek, rec) = GREETINGS[rng.random_range(0..GREETINGS.len())];
            let seek = if !fillers.is_empty() && rng.random_bool(0.5) {
                format!("{seek} {} .", fillers[rng.random_range(0..fillers.len())])
            } else {
                seek.to_string()
            };
            texts.push((Role::Seeker, seek));
            texts.push((Role::Recommender, rec.to_string()));
        }

        let mut mentioned = vec![target];
        if per_genre >= 2 && rng.random_bool(0.25) {
            let mut other = rng.random_range(0..per_genre - 1);
            if other >= s {
                other += 1;
            }
            let liked = item_at(g, other);
            mentioned.push(liked);
            texts.push((Role::Seeker, fill(LIKED.0, genre, style, None, Some(liked))));
            texts.push((Role::Recommender, fill(LIKED.1, genre, style, Some(target), None)));
        } else {
            let (seek, rec) = PREFERENCES[rng.random_range(0..PREFERENCES.len())];
            texts.push((Role::Seeker, fill(seek, genre, style, None, None)));
            texts.push((Role::Recommender, fill(rec, genre, style, Some(target), None)));
        }

        if rng.random_bool(0.85) {
            let (seek, rec) = CLOSINGS[rng.random_range(0..CLOSINGS.len())];
            texts.push((Role::Seeker, seek.to_string()));
            texts.push((Role::Recommender, rec.to_string()));
        }

        let mentioned_items: BTreeMap<ItemId, String> = mentioned.iter().map(|id| (*id, titles[id].clone())).collect();
        let turns = texts
            .iter()
            .map(|(role, text)| Turn::parse(*role, text, &mentioned_items).0)
            .collect();
        conversations.push(Conversation {
            id: format!("synth-{c:05}"),
            turns,
            mentioned_items,
        });
    }

    Ok(SynthCorpus {
        conversations,
        catalog: Catalog::new(titles),
        kg_triples,
        item_genre,
        item_style,
        genres,
        styles,
    })
}

impl SynthCorpus {
    /// Writes `dialogues.jsonl` (ReDial line format) and `kg.tsv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_redial(dir.join("dialogues.jsonl"), &self.conversations)?;
        let kg_path = dir.join("kg.tsv");
        let mut f = fs::File::create(&kg_path).map_err(|e| Error::io(&kg_path, e))?;
        for (h, r, t) in &self.kg_triples {
            writeln!(f, "{h}\t{r}\t{t}").map_err(|e| Error::io(&kg_path, e))?;
        }
        Ok(())
    }
}
