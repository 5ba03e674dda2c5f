//! Deterministic wiki-style text used when no real corpus is supplied.
//!
//! Set `DCT_SMOKE_CORPUS` to a raw text file (for example an enwik8 copy) to
//! run the smoke tests on real data instead.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

const ONSETS: &[&str] = &[
    "b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "th",
    "st", "ch", "br", "tr", "pl", "gr", "sh", "",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ea", "ou", "ai", "io", "y"];
const CODAS: &[&str] = &[
    "", "", "", "n", "r", "s", "t", "l", "nd", "st", "ng", "rk", "m",
];
const FUNCTION_WORDS: &[&str] = &[
    "the", "of", "and", "in", "to", "a", "is", "was", "for", "as", "on", "by", "with", "from",
    "that", "at", "his", "it", "an", "were", "which", "are", "this", "be", "also", "has", "or",
    "its", "first", "after",
];

fn make_word(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.random_range(1..=4);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
        w.push_str(VOWELS[rng.random_range(0..VOWELS.len())]);
        w.push_str(CODAS[rng.random_range(0..CODAS.len())]);
    }
    w
}

fn capitalise(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

struct Lexicon {
    words: Vec<String>,
    zipf: Zipf<f64>,
}

impl Lexicon {
    fn new(rng: &mut ChaCha8Rng, size: usize) -> Self {
        let mut words: Vec<String> = FUNCTION_WORDS.iter().map(|s| s.to_string()).collect();
        while words.len() < size {
            words.push(make_word(rng));
        }
        Self {
            words,
            zipf: Zipf::new(size as f64, 1.05).expect("valid zipf"),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> &str {
        let rank = self.zipf.sample(rng) as usize;
        &self.words[(rank - 1).min(self.words.len() - 1)]
    }
}

fn sentence(lex: &Lexicon, rng: &mut ChaCha8Rng, out: &mut String) {
    let n = rng.random_range(6..24);
    for i in 0..n {
        let w = lex.sample(rng);
        let word = if i == 0 { capitalise(w) } else { w.to_string() };
        if i > 0 {
            out.push(' ');
        }
        match rng.random_range(0..100) {
            0..=5 => {
                out.push_str("[[");
                out.push_str(&word);
                out.push_str("]]");
            }
            6..=7 => out.push_str(&format!("{}", rng.random_range(1700..2010))),
            8 => {
                out.push_str("'''");
                out.push_str(&capitalise(&word));
                out.push_str("'''");
            }
            _ => out.push_str(&word),
        }
        if i + 1 < n && rng.random_range(0..12) == 0 {
            out.push(',');
        }
    }
    out.push_str(". ");
}

/// `len` bytes of deterministic pseudo-encyclopedic text.
pub fn synthetic_corpus(len: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lex = Lexicon::new(&mut rng, 4000);
    let mut out = String::with_capacity(len + 4096);
    let mut page = 0u32;
    while out.len() < len {
        let title = capitalise(lex.sample(&mut rng));
        out.push_str(&format!(
            "  <page>\n    <title>{title}</title>\n    <id>{}</id>\n    <text>",
            1000 + page
        ));
        page += 1;
        for section in 0..rng.random_range(1..5) {
            if section > 0 {
                out.push_str(&format!("\n\n== {} ==\n", capitalise(lex.sample(&mut rng))));
            }
            for _ in 0..rng.random_range(2..8) {
                sentence(&lex, &mut rng, &mut out);
            }
        }
        out.push_str("</text>\n  </page>\n");
    }
    out.truncate(len);
    out.into_bytes()
}

/// The smoke corpus: `DCT_SMOKE_CORPUS` if set, else synthetic text.
pub fn smoke_corpus(len: usize) -> (Vec<u8>, String) {
    match std::env::var_os("DCT_SMOKE_CORPUS") {
        Some(path) => {
            let mut bytes = std::fs::read(&path).expect("DCT_SMOKE_CORPUS must be readable");
            bytes.truncate(len);
            (bytes, format!("{}", std::path::Path::new(&path).display()))
        }
        None => (
            synthetic_corpus(len, 2024),
            "synthetic wiki-style text".to_string(),
        ),
    }
}
