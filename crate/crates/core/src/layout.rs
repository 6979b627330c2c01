//! Layout domain types: canvases, unit-normalized boxes, object entries.
//!
//! Boxes are stored in unit coordinates (fractions of canvas width and
//! height, origin top-left). Pixel coordinates only exist at the
//! parse/render boundary.
//!
//! Every stored coordinate is snapped to a dyadic grid of spacing
//! [`COORD_QUANTUM`]. On that grid `1 - x` is exact in `f64`, so horizontal
//! flipping is an exact involution.

use std::collections::HashSet;
use std::fmt;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Spacing of the grid every stored box coordinate lives on (2^-32).
pub const COORD_QUANTUM: f64 = 1.0 / 4_294_967_296.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LayoutError {
    #[error("box has zero area after normalization: ({x1}, {y1}, {x2}, {y2})")]
    ZeroAreaBox { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("box coordinate is not finite")]
    NonFiniteCoordinate,
    #[error("box coordinates outside [0, 1] or inverted: ({x1}, {y1}, {x2}, {y2})")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("canvas dimensions must be positive, got {width}x{height}")]
    InvalidCanvas { width: u32, height: u32 },
}

/// Pixel canvas the language model places boxes on. Origin is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CanvasSpec {
    width: u32,
    height: u32,
}

impl CanvasSpec {
    pub fn new(width: u32, height: u32) -> Result<Self, LayoutError> {
        if width == 0 || height == 0 {
            return Err(LayoutError::InvalidCanvas { width, height });
        }
        Ok(Self { width, height })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    /// Both dimensions positive. Only false for canvases deserialized from bad input.
    pub fn is_valid(&self) -> bool {
        self.width > 0 && self.height > 0
    }
}

impl Default for CanvasSpec {
    fn default() -> Self {
        Self {
            width: 512,
            height: 512,
        }
    }
}

fn snap(v: f64) -> f64 {
    (v / COORD_QUANTUM).round() * COORD_QUANTUM
}

/// Axis-aligned box in unit coordinates, `(x1, y1)` top-left and `(x2, y2)` bottom-right.
///
/// [`BBox::new`] enforces `0 <= x1 < x2 <= 1` and `0 <= y1 < y2 <= 1`.
/// [`BBox::unchecked`] exists so that invalid layouts can be represented and
/// reported by [`validate_layout`].
#[derive(Clone, Copy, PartialEq)]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, LayoutError> {
        let b = Self::unchecked(x1, y1, x2, y2);
        b.check()?;
        Ok(b)
    }

    pub fn unchecked(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            x1: snap(x1),
            y1: snap(y1),
            x2: snap(x2),
            y2: snap(y2),
        }
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Mirror around the vertical center line: `(1 - x2, y1, 1 - x1, y2)`.
    pub fn flipped(&self) -> Self {
        Self {
            x1: 1.0 - self.x2,
            y1: self.y1,
            x2: 1.0 - self.x1,
            y2: self.y2,
        }
    }

    fn check(&self) -> Result<(), LayoutError> {
        let [x1, y1, x2, y2] = self.to_array();
        if !self.to_array().iter().all(|v| v.is_finite()) {
            return Err(LayoutError::NonFiniteCoordinate);
        }
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(in_unit(x1) && in_unit(y1) && in_unit(x2) && in_unit(y2)) || x1 > x2 || y1 > y2 {
            return Err(LayoutError::InvalidBox { x1, y1, x2, y2 });
        }
        if x1 == x2 || y1 == y2 {
            return Err(LayoutError::ZeroAreaBox { x1, y1, x2, y2 });
        }
        Ok(())
    }

    pub fn is_valid(&self) -> bool {
        self.check().is_ok()
    }
}

impl fmt::Debug for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BBox({}, {}, {}, {})", self.x1, self.y1, self.x2, self.y2)
    }
}

impl Serialize for BBox {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let [x1, y1, x2, y2] = <[f64; 4]>::deserialize(d)?;
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(D::Error::custom("box coordinate is not finite"));
        }
        Ok(BBox::unchecked(x1, y1, x2, y2))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Visibility {
    Visual,
    NonVisual,
}

impl Visibility {
    pub fn is_visual(self) -> bool {
        matches!(self, Visibility::Visual)
    }
}

mod visual_flag {
    use super::Visibility;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Visibility, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_bool(v.is_visual())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Visibility, D::Error> {
        Ok(if bool::deserialize(d)? {
            Visibility::Visual
        } else {
            Visibility::NonVisual
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectEntry {
    pub phrase: String,
    #[serde(rename = "visual", with = "visual_flag")]
    pub visibility: Visibility,
    pub boxes: Vec<BBox>,
}

impl ObjectEntry {
    pub fn visual(phrase: impl Into<String>, boxes: Vec<BBox>) -> Self {
        Self {
            phrase: phrase.into(),
            visibility: Visibility::Visual,
            boxes,
        }
    }

    pub fn non_visual(phrase: impl Into<String>) -> Self {
        Self {
            phrase: phrase.into(),
            visibility: Visibility::NonVisual,
            boxes: Vec::new(),
        }
    }

    pub fn is_visual(&self) -> bool {
        self.visibility.is_visual()
    }
}

/// Canonical interchange form: `{"canvas", "caption", "entries"}` in that order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layout {
    pub canvas: CanvasSpec,
    pub caption: String,
    pub entries: Vec<ObjectEntry>,
}

impl Layout {
    pub fn new(canvas: CanvasSpec, caption: impl Into<String>, entries: Vec<ObjectEntry>) -> Self {
        Self {
            canvas,
            caption: caption.into(),
            entries,
        }
    }

    pub fn visual_entries(&self) -> impl Iterator<Item = &ObjectEntry> {
        self.entries.iter().filter(|e| e.is_visual())
    }

    /// Number of object instances: every box of every visual entry counts once.
    pub fn instance_count(&self) -> usize {
        self.visual_entries().map(|e| e.boxes.len()).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("layout serialization is infallible")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("layout serialization is infallible")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Result of normalizing one pixel quadruple.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedBox {
    pub bbox: BBox,
    /// At least one coordinate fell outside the canvas and was clamped.
    pub clamped: bool,
    /// Corner order was inverted on at least one axis and got swapped.
    pub reordered: bool,
}

/// Divide by the canvas size, clamp into `[0, 1]`, then repair inverted corners.
pub fn normalize_bbox(raw: [f64; 4], canvas: CanvasSpec) -> Result<BBox, LayoutError> {
    normalize_bbox_tracked(raw, canvas).map(|n| n.bbox)
}

pub fn normalize_bbox_tracked(raw: [f64; 4], canvas: CanvasSpec) -> Result<NormalizedBox, LayoutError> {
    if !raw.iter().all(|v| v.is_finite()) {
        return Err(LayoutError::NonFiniteCoordinate);
    }
    if !canvas.is_valid() {
        return Err(LayoutError::InvalidCanvas {
            width: canvas.width,
            height: canvas.height,
        });
    }
    let (w, h) = (f64::from(canvas.width), f64::from(canvas.height));
    let scaled = [raw[0] / w, raw[1] / h, raw[2] / w, raw[3] / h];
    let clamped = scaled.iter().any(|v| !(0.0..=1.0).contains(v));
    let [mut x1, mut y1, mut x2, mut y2] = scaled.map(|v| v.clamp(0.0, 1.0));
    let mut reordered = false;
    if x1 > x2 {
        std::mem::swap(&mut x1, &mut x2);
        reordered = true;
    }
    if y1 > y2 {
        std::mem::swap(&mut y1, &mut y2);
        reordered = true;
    }
    let bbox = BBox::unchecked(x1, y1, x2, y2);
    if bbox.x1 == bbox.x2 || bbox.y1 == bbox.y2 {
        return Err(LayoutError::ZeroAreaBox {
            x1: bbox.x1,
            y1: bbox.y1,
            x2: bbox.x2,
            y2: bbox.y2,
        });
    }
    Ok(NormalizedBox {
        bbox,
        clamped,
        reordered,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    InvalidCanvas { width: u32, height: u32 },
    EmptyPhrase { entry: usize },
    MissingBoxes { phrase: String },
    UnexpectedBoxes { phrase: String },
    DuplicatePhrase { phrase: String },
    ZeroAreaBox { phrase: String, box_index: usize },
    BoxOutOfRange { phrase: String, box_index: usize },
    NonFiniteBox { phrase: String, box_index: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check every canvas, entry, and box invariant. Never fails; problems go in the report.
pub fn validate_layout(layout: &Layout) -> ValidationReport {
    let mut violations = Vec::new();
    if !layout.canvas.is_valid() {
        violations.push(Violation::InvalidCanvas {
            width: layout.canvas.width,
            height: layout.canvas.height,
        });
    }
    let mut seen = HashSet::new();
    for (idx, entry) in layout.entries.iter().enumerate() {
        if entry.phrase.trim().is_empty() {
            violations.push(Violation::EmptyPhrase { entry: idx });
        } else if !seen.insert(entry.phrase.as_str()) {
            violations.push(Violation::DuplicatePhrase {
                phrase: entry.phrase.clone(),
            });
        }
        match entry.visibility {
            Visibility::Visual if entry.boxes.is_empty() => violations.push(Violation::MissingBoxes {
                phrase: entry.phrase.clone(),
            }),
            Visibility::NonVisual if !entry.boxes.is_empty() => {
                violations.push(Violation::UnexpectedBoxes {
                    phrase: entry.phrase.clone(),
                })
            }
            _ => {}
        }
        for (box_index, b) in entry.boxes.iter().enumerate() {
            let phrase = entry.phrase.clone();
            match b.check() {
                Ok(()) => {}
                Err(LayoutError::NonFiniteCoordinate) => {
                    violations.push(Violation::NonFiniteBox { phrase, box_index })
                }
                Err(LayoutError::ZeroAreaBox { .. }) => {
                    violations.push(Violation::ZeroAreaBox { phrase, box_index })
                }
                Err(_) => violations.push(Violation::BoxOutOfRange { phrase, box_index }),
            }
        }
    }
    ValidationReport { violations }
}

/// Mirror every box horizontally; entry order, phrases and canvas are kept.
pub fn flip_horizontal(layout: &Layout) -> Layout {
    Layout {
        canvas: layout.canvas,
        caption: layout.caption.clone(),
        entries: layout
            .entries
            .iter()
            .map(|e| ObjectEntry {
                phrase: e.phrase.clone(),
                visibility: e.visibility,
                boxes: e.boxes.iter().map(BBox::flipped).collect(),
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn canvas_defaults_to_512_square() {
        let c = CanvasSpec::default();
        assert_eq!((c.width(), c.height()), (512, 512));
        assert!(CanvasSpec::new(0, 10).is_err());
    }

    #[test]
    fn normalize_divides_by_canvas() {
        let b = normalize_bbox([158.0, 51.0, 337.0, 404.0], CanvasSpec::default()).unwrap();
        assert_eq!(b.to_array(), [158.0 / 512.0, 51.0 / 512.0, 337.0 / 512.0, 404.0 / 512.0]);
    }

    #[test]
    fn normalize_full_canvas_is_unit_box() {
        let b = normalize_bbox([0.0, 0.0, 512.0, 512.0], CanvasSpec::default()).unwrap();
        assert_eq!(b.to_array(), [0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn normalize_clamps_then_reorders() {
        let n = normalize_bbox_tracked([600.0, 51.0, 337.0, 404.0], CanvasSpec::default()).unwrap();
        assert_eq!(n.bbox.to_array(), [337.0 / 512.0, 51.0 / 512.0, 1.0, 404.0 / 512.0]);
        assert!(n.clamped);
        assert!(n.reordered);
    }

    #[test]
    fn normalize_rejects_degenerate_boxes() {
        let c = CanvasSpec::default();
        assert!(matches!(
            normalize_bbox([10.0, 10.0, 10.0, 50.0], c),
            Err(LayoutError::ZeroAreaBox { .. })
        ));
        // both x coordinates clamp onto the right edge
        assert!(matches!(
            normalize_bbox([600.0, 0.0, 700.0, 50.0], c),
            Err(LayoutError::ZeroAreaBox { .. })
        ));
        assert!(matches!(
            normalize_bbox([f64::NAN, 0.0, 1.0, 1.0], c),
            Err(LayoutError::NonFiniteCoordinate)
        ));
    }

    #[test]
    fn valid_layout_has_empty_report() {
        let l = Layout::new(
            CanvasSpec::default(),
            "a cat",
            vec![ObjectEntry::visual("a cat", vec![bx(0.1, 0.1, 0.5, 0.5)])],
        );
        assert!(validate_layout(&l).is_valid());
    }

    #[test]
    fn report_lists_missing_boxes_and_zero_area() {
        let l = Layout::new(
            CanvasSpec::default(),
            "a cat and a dog",
            vec![
                ObjectEntry::visual("a cat", vec![]),
                ObjectEntry::visual("a dog", vec![BBox::unchecked(0.3, 0.1, 0.3, 0.5)]),
                ObjectEntry {
                    phrase: "a dog".into(),
                    visibility: Visibility::NonVisual,
                    boxes: vec![bx(0.0, 0.0, 0.5, 0.5)],
                },
            ],
        );
        let r = validate_layout(&l);
        assert!(r.violations.contains(&Violation::MissingBoxes { phrase: "a cat".into() }));
        assert!(r.violations.contains(&Violation::ZeroAreaBox {
            phrase: "a dog".into(),
            box_index: 0
        }));
        assert!(r.violations.contains(&Violation::DuplicatePhrase { phrase: "a dog".into() }));
        assert!(r.violations.contains(&Violation::UnexpectedBoxes { phrase: "a dog".into() }));
    }

    #[test]
    fn flip_examples() {
        assert_eq!(bx(0.0, 0.0, 0.2, 0.2).flipped(), bx(0.8, 0.0, 1.0, 0.2));
        let centered = bx(0.4, 0.3, 0.6, 0.7);
        assert_eq!(centered.flipped(), centered);
    }

    #[test]
    fn json_field_order_is_canonical() {
        let l = Layout::new(
            CanvasSpec::default(),
            "a cat",
            vec![
                ObjectEntry::visual("a cat", vec![bx(0.0, 0.0, 0.5, 0.25)]),
                ObjectEntry::non_visual("the sky"),
            ],
        );
        assert_eq!(
            l.to_json(),
            r#"{"canvas":{"width":512,"height":512},"caption":"a cat","entries":[{"phrase":"a cat","visual":true,"boxes":[[0.0,0.0,0.5,0.25]]},{"phrase":"the sky","visual":false,"boxes":[]}]}"#
        );
        assert_eq!(Layout::from_json(&l.to_json()).unwrap(), l);
        assert!(Layout::from_json(r#"{"canvas":{"width":1,"height":1},"caption":"","entries":[],"extra":1}"#).is_err());
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0).prop_filter_map("degenerate", |(a, b, c, d)| {
            BBox::new(a.min(c), b.min(d), a.max(c), b.max(d)).ok()
        })
    }

    proptest! {
        #[test]
        fn flip_is_an_involution(boxes in prop::collection::vec(prop::collection::vec(arb_box(), 1..4), 0..6)) {
            let entries = boxes
                .into_iter()
                .enumerate()
                .map(|(i, b)| ObjectEntry::visual(format!("object {i}"), b))
                .collect();
            let l = Layout::new(CanvasSpec::default(), "caption", entries);
            prop_assert_eq!(flip_horizontal(&flip_horizontal(&l)), l);
        }

        #[test]
        fn normalized_boxes_are_valid(raw in prop::array::uniform4(-200.0f64..800.0)) {
            match normalize_bbox(raw, CanvasSpec::default()) {
                Ok(b) => prop_assert!(b.is_valid()),
                Err(e) => { let zero_area = matches!(e, LayoutError::ZeroAreaBox { .. }); prop_assert!(zero_area) }
            }
        }
    }
}
