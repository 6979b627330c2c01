//! Answer-block extraction and conversion of LLM responses into layouts.
//!
//! Accepted line grammar (whitespace-tolerant, case-insensitive tag):
//!
//! ```text
//! [- | * | 1.] **phrase** : visual [[x1, y1, x2, y2], [...]]
//! [- | * | 1.] phrase : non-visual
//! ```

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layout::{
    normalize_bbox_tracked, validate_layout, BBox, CanvasSpec, Layout, LayoutError, ObjectEntry, Visibility,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("response has no answer section")]
    NoAnswerSection,
    #[error("no visual object survived parsing")]
    EmptyLayout,
    #[error("parsed layout violates invariants: {0:?}")]
    InvalidLayout(Vec<String>),
}

/// How coordinates in the answer are expressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CanvasMode {
    /// Pixel coordinates on the configured canvas (512x512 by default).
    #[default]
    #[serde(rename = "512")]
    Pixel512,
    /// Fractions of a 1x1 canvas.
    Unit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoordEncoding {
    /// Top-left and bottom-right corners.
    #[default]
    Xyxy,
    /// Top-left corner, width and height.
    Xywh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParseOptions {
    pub canvas: CanvasSpec,
    pub canvas_mode: CanvasMode,
    pub coord_encoding: CoordEncoding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnswerLine {
    /// 1-based line number in the full response.
    pub line_no: usize,
    pub phrase: String,
    pub tag: Visibility,
    pub raw_boxes: Vec<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MalformedLine {
    pub line_no: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnswerBlock {
    pub lines: Vec<AnswerLine>,
    pub malformed: Vec<MalformedLine>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParseReport {
    /// Boxes with at least one coordinate clamped into the canvas.
    pub clamped: usize,
    /// Boxes whose corner order was repaired.
    pub repaired: usize,
    /// Line numbers with content that could not be used.
    pub dropped: Vec<usize>,
}

static ANSWER_HEADER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^\s*#+\s*\**\s*answer\s*\**\s*:?\s*$").unwrap());
static ANY_HEADER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*#+").unwrap());
static ENTRY_LINE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?ix)^\s*
        (?:[-*•+]|\d+[.)])?\s*
        (?: \*\*(?P<bold>[^*]+?)\*\*\s*:? | __(?P<under>[^_]+?)__\s*:? | (?P<plain>[^:*\[\]]+?)\s*: )
        \s*(?P<tag>non[-_\s]?visual|visual)\b
        (?P<rest>.*)$",
    )
    .unwrap()
});
static QUAD: LazyLock<Regex> = LazyLock::new(|| {
    let num = r"([-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?)";
    Regex::new(&format!(r"\[\s*{num}\s*,\s*{num}\s*,\s*{num}\s*,\s*{num}\s*\]")).unwrap()
});

/// Parse the bracketed box list that follows the visibility tag.
fn parse_box_list(rest: &str) -> Option<Vec<[f64; 4]>> {
    let rest = rest.trim().trim_end_matches(['.', ';', ',']).trim_end();
    let mut boxes = Vec::new();
    for caps in QUAD.captures_iter(rest) {
        let mut q = [0.0; 4];
        for (k, slot) in q.iter_mut().enumerate() {
            *slot = caps[k + 1].parse().ok()?;
        }
        boxes.push(q);
    }
    let residue = QUAD.replace_all(rest, "");
    if residue.chars().any(|c| !(c.is_whitespace() || matches!(c, '[' | ']' | ','))) {
        return None;
    }
    let opens = residue.matches('[').count();
    if opens != residue.matches(']').count() {
        return None;
    }
    Some(boxes)
}

/// Locate the last `Answer` header and parse the bullet lines under it.
pub fn extract_answer_section(response: &str) -> Result<AnswerBlock, ParseError> {
    let lines: Vec<&str> = response.lines().collect();
    let header = lines
        .iter()
        .rposition(|l| ANSWER_HEADER.is_match(l))
        .ok_or(ParseError::NoAnswerSection)?;
    let mut block = AnswerBlock::default();
    for (idx, raw) in lines.iter().enumerate().skip(header + 1) {
        let line_no = idx + 1;
        if ANY_HEADER.is_match(raw) {
            break;
        }
        if raw.trim().is_empty() {
            continue;
        }
        let malformed = || MalformedLine {
            line_no,
            text: raw.to_string(),
        };
        let Some(caps) = ENTRY_LINE.captures(raw) else {
            block.malformed.push(malformed());
            continue;
        };
        let phrase = caps
            .name("bold")
            .or_else(|| caps.name("under"))
            .or_else(|| caps.name("plain"))
            .map(|m| m.as_str().trim().trim_matches(['"', '\'']).trim().to_string())
            .unwrap_or_default();
        if phrase.is_empty() {
            block.malformed.push(malformed());
            continue;
        }
        let tag_text = caps["tag"].to_ascii_lowercase();
        let Some(raw_boxes) = parse_box_list(&caps["rest"]) else {
            block.malformed.push(malformed());
            continue;
        };
        let tag = if tag_text.starts_with("non") || raw_boxes.is_empty() {
            Visibility::NonVisual
        } else {
            Visibility::Visual
        };
        block.lines.push(AnswerLine {
            line_no,
            phrase,
            tag,
            raw_boxes: if tag.is_visual() { raw_boxes } else { Vec::new() },
        });
    }
    Ok(block)
}

/// Convert one answer quadruple into canvas pixels in corner form.
fn to_pixel_corners(q: [f64; 4], opts: &ParseOptions) -> [f64; 4] {
    let (w, h) = (f64::from(opts.canvas.width()), f64::from(opts.canvas.height()));
    let q = match opts.canvas_mode {
        // unit answers: values <= 1 are already fractions; anything larger is pixels
        CanvasMode::Unit if q.iter().all(|v| v.abs() <= 1.0) => [q[0] * w, q[1] * h, q[2] * w, q[3] * h],
        _ => q,
    };
    match opts.coord_encoding {
        CoordEncoding::Xyxy => q,
        CoordEncoding::Xywh => [q[0], q[1], q[0] + q[2], q[1] + q[3]],
    }
}

pub fn parse_response(response: &str, caption: &str, opts: &ParseOptions) -> Result<(Layout, ParseReport), ParseError> {
    let block = extract_answer_section(response)?;
    let mut report = ParseReport {
        dropped: block.malformed.iter().map(|m| m.line_no).collect(),
        ..Default::default()
    };
    let mut entries: Vec<ObjectEntry> = Vec::new();
    for line in block.lines {
        let mut boxes = Vec::new();
        let mut lost_box = false;
        for q in &line.raw_boxes {
            match normalize_bbox_tracked(to_pixel_corners(*q, opts), opts.canvas) {
                Ok(n) => {
                    report.clamped += usize::from(n.clamped);
                    report.repaired += usize::from(n.reordered);
                    boxes.push(n.bbox);
                }
                Err(LayoutError::ZeroAreaBox { .. } | LayoutError::NonFiniteCoordinate) => lost_box = true,
                Err(_) => lost_box = true,
            }
        }
        if lost_box {
            report.dropped.push(line.line_no);
        }
        if line.tag.is_visual() && boxes.is_empty() {
            // every box of a visual line was unusable
            continue;
        }
        merge_entry(&mut entries, line.phrase, line.tag, boxes);
    }
    report.dropped.sort_unstable();
    report.dropped.dedup();

    if !entries.iter().any(ObjectEntry::is_visual) {
        return Err(ParseError::EmptyLayout);
    }
    let layout = Layout::new(opts.canvas, caption, entries);
    let validation = validate_layout(&layout);
    if !validation.is_valid() {
        return Err(ParseError::InvalidLayout(
            validation.violations.iter().map(|v| format!("{v:?}")).collect(),
        ));
    }
    Ok((layout, report))
}

/// Entries sharing a phrase merge: boxes concatenate, visual wins over non-visual.
fn merge_entry(entries: &mut Vec<ObjectEntry>, phrase: String, tag: Visibility, boxes: Vec<BBox>) {
    if let Some(existing) = entries.iter_mut().find(|e| e.phrase == phrase) {
        existing.boxes.extend(boxes);
        if tag.is_visual() {
            existing.visibility = Visibility::Visual;
        }
        return;
    }
    entries.push(ObjectEntry {
        phrase,
        visibility: tag,
        boxes,
    });
}

fn format_unit(v: f64) -> String {
    let s = format!("{v:.6}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() { "0".to_string() } else { s.to_string() }
}

/// Pixel coordinate for an edge: exact integers stay put, otherwise low edges
/// round down and high edges round up so a box never collapses.
fn pixel_edge(v: f64, size: u32, high: bool) -> i64 {
    let scaled = v * f64::from(size);
    let nearest = scaled.round();
    if (scaled - nearest).abs() < 1e-6 {
        nearest as i64
    } else if high {
        scaled.ceil() as i64
    } else {
        scaled.floor() as i64
    }
}

/// Render a layout in the answer-line format, under a `### Answer` header.
pub fn render_answer_block(layout: &Layout, opts: &ParseOptions) -> String {
    let mut out = String::from("### Answer\n");
    for entry in &layout.entries {
        if !entry.is_visual() {
            out.push_str(&format!("- **{}**: non-visual\n", entry.phrase));
            continue;
        }
        let quads: Vec<String> = entry
            .boxes
            .iter()
            .map(|b| match opts.canvas_mode {
                CanvasMode::Pixel512 => {
                    let (w, h) = (opts.canvas.width(), opts.canvas.height());
                    let x1 = pixel_edge(b.x1(), w, false);
                    let y1 = pixel_edge(b.y1(), h, false);
                    let x2 = pixel_edge(b.x2(), w, true);
                    let y2 = pixel_edge(b.y2(), h, true);
                    let q = match opts.coord_encoding {
                        CoordEncoding::Xyxy => [x1, y1, x2, y2],
                        CoordEncoding::Xywh => [x1, y1, x2 - x1, y2 - y1],
                    };
                    format!("[{}, {}, {}, {}]", q[0], q[1], q[2], q[3])
                }
                CanvasMode::Unit => {
                    let q = match opts.coord_encoding {
                        CoordEncoding::Xyxy => b.to_array(),
                        CoordEncoding::Xywh => [b.x1(), b.y1(), b.width(), b.height()],
                    };
                    format!(
                        "[{}, {}, {}, {}]",
                        format_unit(q[0]),
                        format_unit(q[1]),
                        format_unit(q[2]),
                        format_unit(q[3])
                    )
                }
            })
            .collect();
        out.push_str(&format!("- **{}**: visual [{}]\n", entry.phrase, quads.join(", ")));
    }
    out
}

/// Caption from the last `Caption:` line, as written in prompts and examples.
pub fn find_caption(response: &str) -> Option<String> {
    static CAPTION: LazyLock<Regex> =
        LazyLock::new(|| Regex::new(r"(?im)^\s*#*\s*\**\s*caption\s*:\s*(.+?)\s*\**\s*$").unwrap());
    CAPTION
        .captures_iter(response)
        .last()
        .map(|c| c[1].trim().trim_end_matches('*').trim().to_string())
}
