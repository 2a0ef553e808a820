//! Annotated detection figures: class-coloured boxes with `name score` labels
//! in a built-in 5×7 bitmap font.

use crate::detector::Detection;
use crate::patch::Placement;
use crate::tensor::Tensor;

pub const GLYPH_WIDTH: usize = 5;
pub const GLYPH_HEIGHT: usize = 7;
/// Horizontal advance per character, including one column of spacing.
pub const ADVANCE: usize = GLYPH_WIDTH + 1;
const LABEL_PAD: usize = 1;
const BOX_THICKNESS: usize = 2;

/// Fixed class palette, indexed by `class_id % len`.
pub const PALETTE: [[f64; 3]; 8] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.75, 0.20],
    [0.15, 0.35, 0.95],
    [0.95, 0.75, 0.05],
    [0.70, 0.20, 0.85],
    [0.05, 0.80, 0.80],
    [0.95, 0.45, 0.10],
    [0.55, 0.55, 0.55],
];

const OUTLINE: [f64; 3] = [1.0, 1.0, 1.0];
const TEXT: [f64; 3] = [1.0, 1.0, 1.0];

pub fn class_color(class_id: usize) -> [f64; 3] {
    PALETTE[class_id % PALETTE.len()]
}

/// Label drawn above each box: class name and confidence to two decimals.
pub fn label_text(name: &str, confidence: f64) -> String {
    format!("{name} {confidence:.2}")
}

/// Rows of a glyph, most significant of the low five bits leftmost.
pub fn glyph(ch: char) -> [u8; GLYPH_HEIGHT] {
    match ch.to_ascii_lowercase() {
        'a' => [0b00000, 0b00000, 0b01110, 0b00001, 0b01111, 0b10001, 0b01111],
        'b' => [0b10000, 0b10000, 0b10110, 0b11001, 0b10001, 0b10001, 0b11110],
        'c' => [0b00000, 0b00000, 0b01110, 0b10000, 0b10000, 0b10001, 0b01110],
        'd' => [0b00001, 0b00001, 0b01101, 0b10011, 0b10001, 0b10001, 0b01111],
        'e' => [0b00000, 0b00000, 0b01110, 0b10001, 0b11111, 0b10000, 0b01110],
        'f' => [0b00110, 0b01001, 0b01000, 0b11100, 0b01000, 0b01000, 0b01000],
        'g' => [0b00000, 0b01111, 0b10001, 0b10001, 0b01111, 0b00001, 0b01110],
        'h' => [0b10000, 0b10000, 0b10110, 0b11001, 0b10001, 0b10001, 0b10001],
        'i' => [0b00100, 0b00000, 0b01100, 0b00100, 0b00100, 0b00100, 0b01110],
        'j' => [0b00010, 0b00000, 0b00110, 0b00010, 0b00010, 0b10010, 0b01100],
        'k' => [0b10000, 0b10000, 0b10010, 0b10100, 0b11000, 0b10100, 0b10010],
        'l' => [0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
        'm' => [0b00000, 0b00000, 0b11010, 0b10101, 0b10101, 0b10001, 0b10001],
        'n' => [0b00000, 0b00000, 0b10110, 0b11001, 0b10001, 0b10001, 0b10001],
        'o' => [0b00000, 0b00000, 0b01110, 0b10001, 0b10001, 0b10001, 0b01110],
        'p' => [0b00000, 0b00000, 0b11110, 0b10001, 0b11110, 0b10000, 0b10000],
        'q' => [0b00000, 0b00000, 0b01101, 0b10011, 0b01111, 0b00001, 0b00001],
        'r' => [0b00000, 0b00000, 0b10110, 0b11001, 0b10000, 0b10000, 0b10000],
        's' => [0b00000, 0b00000, 0b01110, 0b10000, 0b01110, 0b00001, 0b11110],
        't' => [0b01000, 0b01000, 0b11100, 0b01000, 0b01000, 0b01001, 0b00110],
        'u' => [0b00000, 0b00000, 0b10001, 0b10001, 0b10001, 0b10011, 0b01101],
        'v' => [0b00000, 0b00000, 0b10001, 0b10001, 0b10001, 0b01010, 0b00100],
        'w' => [0b00000, 0b00000, 0b10001, 0b10001, 0b10101, 0b10101, 0b01010],
        'x' => [0b00000, 0b00000, 0b10001, 0b01010, 0b00100, 0b01010, 0b10001],
        'y' => [0b00000, 0b00000, 0b10001, 0b10001, 0b01111, 0b00001, 0b01110],
        'z' => [0b00000, 0b00000, 0b11111, 0b00010, 0b00100, 0b01000, 0b11111],
        '0' => [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110],
        '1' => [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
        '2' => [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111],
        '3' => [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110],
        '4' => [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010],
        '5' => [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110],
        '6' => [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110],
        '7' => [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000],
        '8' => [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110],
        '9' => [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100],
        '.' => [0b00000, 0b00000, 0b00000, 0b00000, 0b00000, 0b01100, 0b01100],
        '-' => [0b00000, 0b00000, 0b00000, 0b11111, 0b00000, 0b00000, 0b00000],
        '_' => [0b00000, 0b00000, 0b00000, 0b00000, 0b00000, 0b00000, 0b11111],
        ' ' => [0; GLYPH_HEIGHT],
        _ => [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b00000, 0b00100],
    }
}

fn put(img: &mut Tensor, y: isize, x: isize, color: [f64; 3]) {
    if y < 0 || x < 0 || y as usize >= img.height() || x as usize >= img.width() {
        return;
    }
    for (c, v) in color.iter().enumerate() {
        img.set(c, y as usize, x as usize, *v);
    }
}

fn fill_rect(img: &mut Tensor, y0: isize, x0: isize, h: usize, w: usize, color: [f64; 3]) {
    for y in y0..y0 + h as isize {
        for x in x0..x0 + w as isize {
            put(img, y, x, color);
        }
    }
}

/// Draws an outline `thickness` pixels wide just inside `[x1, y1, x2, y2)`.
pub fn draw_rect(img: &mut Tensor, bbox: [f64; 4], thickness: usize, color: [f64; 3]) {
    let x1 = bbox[0].round() as isize;
    let y1 = bbox[1].round() as isize;
    let x2 = bbox[2].round() as isize - 1;
    let y2 = bbox[3].round() as isize - 1;
    for t in 0..thickness as isize {
        for x in x1..=x2 {
            put(img, y1 + t, x, color);
            put(img, y2 - t, x, color);
        }
        for y in y1..=y2 {
            put(img, y, x1 + t, color);
            put(img, y, x2 - t, color);
        }
    }
}

/// Draws `text` with its top-left glyph corner at `(x, y)`.
pub fn draw_text(img: &mut Tensor, y: isize, x: isize, text: &str, color: [f64; 3]) {
    for (i, ch) in text.chars().enumerate() {
        let rows = glyph(ch);
        let gx = x + (i * ADVANCE) as isize;
        for (dy, row) in rows.iter().enumerate() {
            for dx in 0..GLYPH_WIDTH {
                if row >> (GLYPH_WIDTH - 1 - dx) & 1 == 1 {
                    put(img, y + dy as isize, gx + dx as isize, color);
                }
            }
        }
    }
}

/// Size of the filled label bar for `text`.
pub fn label_size(text: &str) -> (usize, usize) {
    (GLYPH_HEIGHT + 2 * LABEL_PAD, (text.chars().count() * ADVANCE).saturating_sub(1) + 2 * LABEL_PAD)
}

/// Top-left corner of the label bar for a box: above it when there is room,
/// otherwise just inside its top edge.
pub fn label_origin(bbox: [f64; 4]) -> (isize, isize) {
    let (h, _) = label_size("");
    let top = bbox[1].round() as isize;
    let y = if top >= h as isize { top - h as isize } else { top };
    (y, bbox[0].round() as isize)
}

/// Renders boxes, labels and an optional white patch outline onto a copy of
/// `image`.
pub fn render_annotated(
    image: &Tensor,
    detections: &[Detection],
    class_names: &[String],
    placement: Option<&Placement>,
) -> Tensor {
    let mut out = image.clone();
    if let Some(p) = placement {
        draw_rect(&mut out, p.bbox(), 1, OUTLINE);
    }
    for d in detections {
        let color = class_color(d.class_id);
        draw_rect(&mut out, d.bbox, BOX_THICKNESS, color);
        let name = class_names.get(d.class_id).cloned().unwrap_or_else(|| d.class_id.to_string());
        let text = label_text(&name, d.confidence);
        let (h, w) = label_size(&text);
        let (y, x) = label_origin(d.bbox);
        fill_rect(&mut out, y, x, h, w, color);
        draw_text(&mut out, y + LABEL_PAD as isize, x + LABEL_PAD as isize, &text, TEXT);
    }
    out
}
