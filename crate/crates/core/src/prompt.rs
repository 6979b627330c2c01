//! Layout-generation prompts: task instructions, in-context examples in one
//! of several reasoning styles, and the caption query.

use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::layout::{normalize_bbox, CanvasSpec, Layout, ObjectEntry};
use crate::parser::{render_answer_block, CanvasMode, CoordEncoding, ParseOptions};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("caption is empty")]
    EmptyCaption,
    #[error("requested {requested} in-context examples but the store holds {available}")]
    TooManyExamples { requested: usize, available: usize },
    #[error("unknown variant '{0}'")]
    UnknownVariant(String),
}

/// Reasoning style of the in-context examples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CotVariant {
    /// Caption followed directly by the answer.
    None,
    /// Identify objects, then specify locations.
    V1,
    /// Five reasoning sections before the answer.
    #[default]
    V2,
    /// The v2 reasoning written as one continuous paragraph.
    V3,
}

impl FromStr for CotVariant {
    type Err = PromptError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "v1" => Ok(Self::V1),
            "v2" => Ok(Self::V2),
            "v3" => Ok(Self::V3),
            _ => Err(PromptError::UnknownVariant(s.to_string())),
        }
    }
}

impl fmt::Display for CotVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::V1 => "v1",
            Self::V2 => "v2",
            Self::V3 => "v3",
        })
    }
}

impl FromStr for CanvasMode {
    type Err = PromptError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "512" | "pixel512" => Ok(Self::Pixel512),
            "unit" | "1" => Ok(Self::Unit),
            _ => Err(PromptError::UnknownVariant(s.to_string())),
        }
    }
}

impl FromStr for CoordEncoding {
    type Err = PromptError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "xyxy" => Ok(Self::Xyxy),
            "xywh" => Ok(Self::Xywh),
            _ => Err(PromptError::UnknownVariant(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    pub cot_variant: CotVariant,
    pub canvas_mode: CanvasMode,
    pub coord_encoding: CoordEncoding,
    pub num_examples: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            cot_variant: CotVariant::V2,
            canvas_mode: CanvasMode::Pixel512,
            coord_encoding: CoordEncoding::Xyxy,
            num_examples: 8,
        }
    }
}

impl PromptConfig {
    pub fn parse_options(&self) -> ParseOptions {
        ParseOptions {
            canvas: CanvasSpec::default(),
            canvas_mode: self.canvas_mode,
            coord_encoding: self.coord_encoding,
        }
    }
}

/// Section headers of a v2 example block, in order.
pub const V2_HEADERS: [&str; 6] = [
    "### Parsing the description into objects",
    "### Hierarchy and relationships",
    "### Arranging objects on the canvas",
    "### Reasoning and concretizing ambiguity",
    "### Specifying locations",
    "### Answer",
];
pub const V1_HEADERS: [&str; 3] = ["### Identifying Objects", "### Specifying Locations", "### Answer"];

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredAnswer {
    phrase: String,
    visual: bool,
    boxes: Vec<[f64; 4]>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredExample {
    pub caption: String,
    objects: String,
    hierarchy: Vec<String>,
    arranging: Vec<String>,
    reasoning: Vec<String>,
    locations: Vec<String>,
    prose: String,
    answer: Vec<StoredAnswer>,
}

impl StoredExample {
    /// Answer as a layout on the 512x512 canvas the examples are written for.
    pub fn answer_layout(&self) -> Layout {
        let canvas = CanvasSpec::default();
        let entries = self
            .answer
            .iter()
            .map(|a| {
                if a.visual {
                    let boxes = a
                        .boxes
                        .iter()
                        .map(|q| normalize_bbox(*q, canvas).expect("bundled example box is valid"))
                        .collect();
                    ObjectEntry::visual(a.phrase.clone(), boxes)
                } else {
                    ObjectEntry::non_visual(a.phrase.clone())
                }
            })
            .collect();
        Layout::new(canvas, self.caption.clone(), entries)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExampleStore {
    pub version: String,
    pub examples: Vec<StoredExample>,
}

static BUNDLED: LazyLock<ExampleStore> = LazyLock::new(|| {
    serde_json::from_str(include_str!("../data/examples.json")).expect("bundled example store parses")
});

impl ExampleStore {
    pub fn bundled() -> &'static ExampleStore {
        &BUNDLED
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PromptBundle {
    pub system_text: String,
    pub example_blocks: Vec<String>,
    pub query_block: String,
    pub config: PromptConfig,
    pub store_version: String,
}

impl PromptBundle {
    /// Examples and query, the content of the user message.
    pub fn user_text(&self) -> String {
        let mut parts: Vec<&str> = self.example_blocks.iter().map(String::as_str).collect();
        parts.push(&self.query_block);
        parts.join("\n\n")
    }

    /// Full prompt as one document.
    pub fn render(&self) -> String {
        format!("{}\n\n{}", self.system_text, self.user_text())
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.render().as_bytes()))
    }
}

fn size_word(mode: CanvasMode) -> &'static str {
    match mode {
        CanvasMode::Pixel512 => "512",
        CanvasMode::Unit => "1",
    }
}

fn system_text(config: &PromptConfig) -> String {
    let size = size_word(config.canvas_mode);
    let location_clause = match config.coord_encoding {
        CoordEncoding::Xyxy => "3. For each object, you need to specify its location by listing the top-left coordinate and the bottom-left coordinate. Your answer for each object should be (x1, y1, x2, y2), where (x1, y1) is the top-left coordinate and (x2, y2) is the bottom-right coordinate.",
        CoordEncoding::Xywh => "3. For each object, you need to specify its location by listing the top-left coordinate together with the width and height of its bounding box. Your answer for each object should be (x, y, w, h), where (x, y) is the top-left coordinate and (w, h) are the width and the height of the bounding box.",
    };
    let unit_note = match config.canvas_mode {
        CanvasMode::Pixel512 => "",
        CanvasMode::Unit => " All coordinates are decimal fractions between 0 and 1.",
    };
    let mut text = String::from(
        "You are an expert photographer who can infer the best layout of the given objects inside a photo or a picture. Now, given a description of the picture, you are asked to perform the following tasks.\n\n",
    );
    text.push_str("1. Given the description, parse the objects that appear in the text in a hierarchical manner.\n\n");
    text.push_str(&format!(
        "2. Based on your parsed result, arrange the objects within a canvas with a width of {size} and a height of {size}. The top-left coordinate in the canvas is the origin (0, 0).\n\n"
    ));
    text.push_str(location_clause);
    text.push_str(unit_note);
    text.push_str("\n\n");
    text.push_str("4. In the description, if there is any ambiguity about the number of objects or the spatial relationship between objects, you should first concretize it through reasoning before giving the answer.\n\n");
    text.push_str("5. When representing the identified objects in your answer, you should use the exact same words that appear in the caption.");
    if config.num_examples > 0 {
        text.push_str("\n\nBelow are a few examples:");
    }
    text
}

fn bullets(items: &[String], size: &str) -> String {
    items
        .iter()
        .map(|s| format!("- {}", s.replace("{size}", size)))
        .collect::<Vec<_>>()
        .join("\n")
}

fn example_block(ex: &StoredExample, config: &PromptConfig) -> String {
    let size = size_word(config.canvas_mode);
    let answer = render_answer_block(&ex.answer_layout(), &config.parse_options());
    let answer = answer.trim_end();
    let mut out = format!("## Caption: {}\n\n", ex.caption);
    match config.cot_variant {
        CotVariant::None => {}
        CotVariant::V1 => {
            out.push_str(&format!("{}\n{}\n\n", V1_HEADERS[0], ex.objects));
            out.push_str(&format!("{}\n{}\n\n", V1_HEADERS[1], bullets(&ex.locations, size)));
        }
        CotVariant::V2 => {
            out.push_str(&format!("{}\n{}\n\n", V2_HEADERS[0], ex.objects));
            out.push_str(&format!("{}\n{}\n\n", V2_HEADERS[1], bullets(&ex.hierarchy, size)));
            out.push_str(&format!("{}\n{}\n\n", V2_HEADERS[2], bullets(&ex.arranging, size)));
            out.push_str(&format!("{}\n{}\n\n", V2_HEADERS[3], bullets(&ex.reasoning, size)));
            out.push_str(&format!("{}\n{}\n\n", V2_HEADERS[4], bullets(&ex.locations, size)));
        }
        CotVariant::V3 => {
            out.push_str(&ex.prose.replace("{size}", size));
            out.push_str("\n\n");
        }
    }
    out.push_str(answer);
    out
}

fn query_block(caption: &str, config: &PromptConfig) -> String {
    let lead = match (config.cot_variant, config.num_examples) {
        (_, 0) => "Now given the caption below, derive the bounding box for each object, then give the answer under a \"### Answer\" header with one line per object in the form - **object**: visual [[x1, y1, x2, y2]] (use \"non-visual\" without boxes for objects that cannot be drawn).",
        (CotVariant::None, _) => "Now given the caption below, can you derive the resulting bounding box for those objects? Give the answer, strictly following the format of the answer given in the examples.",
        _ => "Now given the caption below, can you give a similar reasoning and derive the resulting bounding box for those objects? then give the answer, strictly following the format of the answer given in the examples.",
    };
    format!("{lead}\n\n## Caption: {}", caption.trim())
}

pub fn build_prompt(caption: &str, config: &PromptConfig) -> Result<PromptBundle, PromptError> {
    build_prompt_with_store(caption, config, ExampleStore::bundled())
}

pub fn build_prompt_with_store(
    caption: &str,
    config: &PromptConfig,
    store: &ExampleStore,
) -> Result<PromptBundle, PromptError> {
    if caption.trim().is_empty() {
        return Err(PromptError::EmptyCaption);
    }
    if config.num_examples > store.len() {
        return Err(PromptError::TooManyExamples {
            requested: config.num_examples,
            available: store.len(),
        });
    }
    Ok(PromptBundle {
        system_text: system_text(config),
        example_blocks: store.examples[..config.num_examples]
            .iter()
            .map(|ex| example_block(ex, config))
            .collect(),
        query_block: query_block(caption, config),
        config: *config,
        store_version: store.version.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::parse_response;
    use crate::tokens::{bind_layout, LEXICAL_TOKENIZER};

    #[test]
    fn default_bundle_mentions_canvas_and_caption() {
        let b = build_prompt("a red apple and a blue bird.", &PromptConfig::default()).unwrap();
        assert!(b.system_text.starts_with("You are an expert photographer"));
        assert!(b.system_text.contains("width of 512 and a height of 512"));
        assert!(b.query_block.contains("Caption: a red apple and a blue bird."));
        assert!(b.query_block.ends_with("## Caption: a red apple and a blue bird."));
        assert_eq!(b.example_blocks.len(), 8);
        for n in 1..=5 {
            assert!(b.system_text.contains(&format!("\n{n}. ")) || b.system_text.contains(&format!("{n}. Given")));
        }
    }

    #[test]
    fn zero_examples_is_system_and_query_only() {
        let cfg = PromptConfig {
            cot_variant: CotVariant::None,
            num_examples: 0,
            ..Default::default()
        };
        let b = build_prompt("a cat", &cfg).unwrap();
        assert!(b.example_blocks.is_empty());
        assert!(!b.system_text.contains("Below are a few examples"));
    }

    #[test]
    fn rendering_is_deterministic() {
        let cfg = PromptConfig::default();
        let a = build_prompt("a cat on a mat", &cfg).unwrap();
        let b = build_prompt("a cat on a mat", &cfg).unwrap();
        assert_eq!(a.render(), b.render());
        assert_eq!(a.sha256(), b.sha256());
    }

    #[test]
    fn errors() {
        assert_eq!(build_prompt("  ", &PromptConfig::default()), Err(PromptError::EmptyCaption));
        let cfg = PromptConfig {
            num_examples: 9,
            ..Default::default()
        };
        assert!(matches!(build_prompt("x", &cfg), Err(PromptError::TooManyExamples { .. })));
        assert!("v4".parse::<CotVariant>().is_err());
    }

    fn header_positions(block: &str, headers: &[&str]) -> Vec<usize> {
        headers
            .iter()
            .map(|h| block.find(h).unwrap_or_else(|| panic!("missing {h} in\n{block}")))
            .collect()
    }

    #[test]
    fn v2_blocks_have_all_headers_in_order() {
        let b = build_prompt("x", &PromptConfig::default()).unwrap();
        for block in &b.example_blocks {
            let pos = header_positions(block, &V2_HEADERS);
            assert!(pos.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn variant_structure() {
        let cfg = |v| PromptConfig {
            cot_variant: v,
            ..Default::default()
        };
        let v1 = build_prompt("x", &cfg(CotVariant::V1)).unwrap();
        for block in &v1.example_blocks {
            header_positions(block, &V1_HEADERS);
            assert!(!block.contains("### Hierarchy"));
        }
        let v3 = build_prompt("x", &cfg(CotVariant::V3)).unwrap();
        let none = build_prompt("x", &cfg(CotVariant::None)).unwrap();
        for (a, b) in v3.example_blocks.iter().zip(&none.example_blocks) {
            assert_eq!(a.matches("### ").count(), 1);
            assert_eq!(b.matches("### ").count(), 1);
            assert!(a.len() > b.len());
        }
        assert!(v1.example_blocks[1].contains("Identifying Objects\nFrom this caption, we can identify the following objects: A glass bowl, oranges, and apples."));
    }

    #[test]
    fn canvas_and_encoding_adapt_text_and_answers() {
        let cfg = PromptConfig {
            canvas_mode: CanvasMode::Unit,
            coord_encoding: CoordEncoding::Xywh,
            ..Default::default()
        };
        let b = build_prompt("x", &cfg).unwrap();
        assert!(b.system_text.contains("width of 1 and a height of 1"));
        assert!(b.system_text.contains("(x, y, w, h)"));
        assert!(b.example_blocks[0].contains("width and height of 1,"));
        assert!(b.example_blocks[0].contains("**A man**: visual [[0.308594, 0.099609, 0.349609, 0.689453]]"));
    }

    #[test]
    fn example_answers_parse_back_and_bind_to_their_captions() {
        let store = ExampleStore::bundled();
        assert_eq!(store.len(), 8);
        let cfg = PromptConfig::default();
        let b = build_prompt("x", &cfg).unwrap();
        for (ex, block) in store.examples.iter().zip(&b.example_blocks) {
            let (layout, _) = parse_response(block, &ex.caption, &cfg.parse_options()).unwrap();
            assert_eq!(layout, ex.answer_layout());
            bind_layout(&layout, &ex.caption, LEXICAL_TOKENIZER).unwrap();
        }
        assert!(b.example_blocks[0].contains("- **A man**: visual [[158, 51, 337, 404]]"));
        assert!(b.example_blocks[1]
            .contains("- **Oranges**: visual [[179, 179, 230, 230], [281, 179, 332, 230], [230, 281, 281, 332]]"));
    }
}
