//! Seeded random layouts for property checks and the `mask verify` command.

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::layout::{BBox, CanvasSpec, Layout, ObjectEntry};
use crate::tokens::{bind_layout, BoundLayout, LEXICAL_TOKENIZER};

const NOUNS: [&str; 16] = [
    "cat", "dog", "tree", "car", "bird", "lamp", "chair", "boat", "kite", "horse", "apple", "clock", "vase", "book",
    "cup", "house",
];
const ADJECTIVES: [&str; 8] = ["red", "small", "old", "blue", "tall", "green", "wooden", "bright"];
const LINKS: [&str; 5] = ["and", "near", "beside", "under", "with"];

/// A valid box drawn from a mix of shapes: ordinary, hairline, full-canvas and edge-touching.
pub fn random_box<R: Rng + ?Sized>(rng: &mut R) -> BBox {
    let span = |rng: &mut R, lo: f64, hi: f64| {
        let a = rng.random_range(lo..hi);
        let b = rng.random_range(lo..hi);
        if a == b {
            (a, a + (hi - a) / 2.0)
        } else {
            (a.min(b), a.max(b))
        }
    };
    let thin = |rng: &mut R| {
        let w = rng.random_range(1e-6..0.01);
        let a = rng.random_range(0.0..1.0 - w);
        (a, a + w)
    };
    let (x, y) = match rng.random_range(0..10) {
        0 => return BBox::new(0.0, 0.0, 1.0, 1.0).expect("unit box"),
        1 => (thin(rng), span(rng, 0.0, 1.0)),
        2 => (span(rng, 0.0, 1.0), thin(rng)),
        3 => ((rng.random_range(0.0..0.99), 1.0), (0.0, rng.random_range(0.01..1.0))),
        _ => (span(rng, 0.0, 1.0), span(rng, 0.0, 1.0)),
    };
    BBox::new(x.0, y.0, x.1, y.1).expect("generated box is valid")
}

/// Caption plus layout with 1 to 5 objects whose phrases all occur in the caption.
pub fn random_layout<R: Rng + ?Sized>(rng: &mut R) -> Layout {
    let k = rng.random_range(1..=5);
    let nouns: Vec<&str> = NOUNS.choose_multiple(rng, k).copied().collect();
    let mut words = Vec::new();
    let mut entries = Vec::new();
    for (idx, noun) in nouns.iter().enumerate() {
        if idx > 0 {
            words.push(LINKS.choose(rng).copied().unwrap_or("and").to_string());
        }
        words.push(if rng.random_bool(0.5) { "a" } else { "the" }.to_string());
        let phrase = if rng.random_bool(0.5) {
            format!("{} {noun}", ADJECTIVES.choose(rng).copied().unwrap_or("red"))
        } else {
            noun.to_string()
        };
        words.push(phrase.clone());
        entries.push(if rng.random_bool(0.15) {
            ObjectEntry::non_visual(phrase)
        } else {
            let n = rng.random_range(1..=3);
            ObjectEntry::visual(phrase, (0..n).map(|_| random_box(rng)).collect())
        });
    }
    let caption = format!("{}.", words.join(" "));
    Layout::new(CanvasSpec::default(), caption, entries)
}

pub fn random_bound_layout<R: Rng + ?Sized>(rng: &mut R) -> BoundLayout {
    let layout = random_layout(rng);
    let caption = layout.caption.clone();
    bind_layout(&layout, &caption, LEXICAL_TOKENIZER).expect("generated phrases occur in the caption")
}
