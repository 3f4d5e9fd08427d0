//! Figure rendering for evaluation artifacts.
//!
//! Figures are assembled as shape lists and rasterized only on save, so
//! layout logic is testable without decoding pixels.  Output is plain PNG.

use std::path::Path;

use thiserror::Error;

use crate::pipeline::PredictedGroup;
use crate::scene::Scene;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("image write failed: {0}")]
    Image(#[from] image::ImageError),
}

pub type Color = [u8; 3];

pub const WHITE: Color = [255, 255, 255];
pub const BLACK: Color = [25, 25, 25];
pub const GRAY: Color = [150, 150, 150];
pub const LIGHT_GRAY: Color = [224, 224, 224];

/// Group overlay colors, cycled when a scene holds more groups than entries.
pub const PALETTE: [Color; 6] = [
    [214, 69, 65],
    [31, 119, 180],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [23, 190, 207],
];

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    /// Outline rectangle; thickness grows outward from the given corners.
    Rect {
        x0: i32,
        y0: i32,
        x1: i32,
        y1: i32,
        color: Color,
        thick: u32,
    },
    FillRect {
        x0: i32,
        y0: i32,
        x1: i32,
        y1: i32,
        color: Color,
    },
    Disk {
        cx: i32,
        cy: i32,
        r: i32,
        color: Color,
    },
    Line {
        x0: i32,
        y0: i32,
        x1: i32,
        y1: i32,
        color: Color,
    },
    Text {
        x: i32,
        y: i32,
        text: String,
        color: Color,
        scale: u32,
    },
}

#[derive(Clone, Debug)]
pub struct Drawing {
    pub width: u32,
    pub height: u32,
    pub background: Color,
    pub shapes: Vec<Shape>,
}

impl Drawing {
    pub fn new(width: u32, height: u32) -> Self {
        Drawing {
            width,
            height,
            background: WHITE,
            shapes: Vec::new(),
        }
    }

    pub fn rasterize(&self) -> image::RgbImage {
        let mut img = image::RgbImage::from_pixel(
            self.width,
            self.height,
            image::Rgb(self.background),
        );
        for shape in &self.shapes {
            draw_shape(&mut img, shape);
        }
        img
    }

    pub fn save(&self, path: &Path) -> Result<(), PlotError> {
        self.rasterize().save(path)?;
        Ok(())
    }
}

fn put(img: &mut image::RgbImage, x: i32, y: i32, color: Color) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, image::Rgb(color));
    }
}

fn hline(img: &mut image::RgbImage, x0: i32, x1: i32, y: i32, color: Color) {
    for x in x0.min(x1)..=x0.max(x1) {
        put(img, x, y, color);
    }
}

fn vline(img: &mut image::RgbImage, x: i32, y0: i32, y1: i32, color: Color) {
    for y in y0.min(y1)..=y0.max(y1) {
        put(img, x, y, color);
    }
}

fn draw_line(img: &mut image::RgbImage, x0: i32, y0: i32, x1: i32, y1: i32, color: Color) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    let (mut x, mut y) = (x0, y0);
    loop {
        put(img, x, y, color);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn draw_shape(img: &mut image::RgbImage, shape: &Shape) {
    match shape {
        Shape::Rect {
            x0,
            y0,
            x1,
            y1,
            color,
            thick,
        } => {
            for k in 0..*thick as i32 {
                let (a, b, c, d) = (x0 - k, y0 - k, x1 + k, y1 + k);
                hline(img, a, c, b, *color);
                hline(img, a, c, d, *color);
                vline(img, a, b, d, *color);
                vline(img, c, b, d, *color);
            }
        }
        Shape::FillRect {
            x0,
            y0,
            x1,
            y1,
            color,
        } => {
            for y in *y0.min(y1)..=*y0.max(y1) {
                hline(img, *x0, *x1, y, *color);
            }
        }
        Shape::Disk { cx, cy, r, color } => {
            for dy in -r..=*r {
                for dx in -r..=*r {
                    if dx * dx + dy * dy <= r * r {
                        put(img, cx + dx, cy + dy, *color);
                    }
                }
            }
        }
        Shape::Line {
            x0,
            y0,
            x1,
            y1,
            color,
        } => draw_line(img, *x0, *y0, *x1, *y1, *color),
        Shape::Text {
            x,
            y,
            text,
            color,
            scale,
        } => draw_text(img, *x, *y, text, *color, *scale),
    }
}

/// 5x7 bitmap glyphs, one u8 per row with bit 4 as the leftmost column.
/// Lowercase input is drawn with the uppercase glyph.
fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_uppercase() {
        'A' => [0b01110, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001],
        'B' => [0b11110, 0b10001, 0b10001, 0b11110, 0b10001, 0b10001, 0b11110],
        'C' => [0b01110, 0b10001, 0b10000, 0b10000, 0b10000, 0b10001, 0b01110],
        'D' => [0b11100, 0b10010, 0b10001, 0b10001, 0b10001, 0b10010, 0b11100],
        'E' => [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b11111],
        'F' => [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b10000],
        'G' => [0b01110, 0b10001, 0b10000, 0b10111, 0b10001, 0b10001, 0b01111],
        'H' => [0b10001, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001],
        'I' => [0b01110, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
        'J' => [0b00111, 0b00010, 0b00010, 0b00010, 0b00010, 0b10010, 0b01100],
        'K' => [0b10001, 0b10010, 0b10100, 0b11000, 0b10100, 0b10010, 0b10001],
        'L' => [0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b11111],
        'M' => [0b10001, 0b11011, 0b10101, 0b10101, 0b10001, 0b10001, 0b10001],
        'N' => [0b10001, 0b10001, 0b11001, 0b10101, 0b10011, 0b10001, 0b10001],
        'O' => [0b01110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110],
        'P' => [0b11110, 0b10001, 0b10001, 0b11110, 0b10000, 0b10000, 0b10000],
        'Q' => [0b01110, 0b10001, 0b10001, 0b10001, 0b10101, 0b10010, 0b01101],
        'R' => [0b11110, 0b10001, 0b10001, 0b11110, 0b10100, 0b10010, 0b10001],
        'S' => [0b01111, 0b10000, 0b10000, 0b01110, 0b00001, 0b00001, 0b11110],
        'T' => [0b11111, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100],
        'U' => [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110],
        'V' => [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01010, 0b00100],
        'W' => [0b10001, 0b10001, 0b10001, 0b10101, 0b10101, 0b10101, 0b01010],
        'X' => [0b10001, 0b10001, 0b01010, 0b00100, 0b01010, 0b10001, 0b10001],
        'Y' => [0b10001, 0b10001, 0b01010, 0b00100, 0b00100, 0b00100, 0b00100],
        'Z' => [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b10000, 0b11111],
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
        ',' => [0b00000, 0b00000, 0b00000, 0b00000, 0b01100, 0b00100, 0b01000],
        '-' => [0b00000, 0b00000, 0b00000, 0b11111, 0b00000, 0b00000, 0b00000],
        '=' => [0b00000, 0b00000, 0b11111, 0b00000, 0b11111, 0b00000, 0b00000],
        '<' => [0b00010, 0b00100, 0b01000, 0b10000, 0b01000, 0b00100, 0b00010],
        '>' => [0b01000, 0b00100, 0b00010, 0b00001, 0b00010, 0b00100, 0b01000],
        ':' => [0b00000, 0b01100, 0b01100, 0b00000, 0b01100, 0b01100, 0b00000],
        '/' => [0b00001, 0b00010, 0b00010, 0b00100, 0b01000, 0b01000, 0b10000],
        '_' => [0b00000, 0b00000, 0b00000, 0b00000, 0b00000, 0b00000, 0b11111],
        _ => [0; 7],
    }
}

fn draw_text(img: &mut image::RgbImage, x: i32, y: i32, text: &str, color: Color, scale: u32) {
    let s = scale.max(1) as i32;
    let mut cx = x;
    for c in text.chars() {
        let rows = glyph(c);
        for (ry, row) in rows.iter().enumerate() {
            for rx in 0..5 {
                if row & (1 << (4 - rx)) != 0 {
                    for oy in 0..s {
                        for ox in 0..s {
                            put(
                                img,
                                cx + rx * s + ox,
                                y + ry as i32 * s + oy,
                                color,
                            );
                        }
                    }
                }
            }
        }
        cx += 6 * s;
    }
}

pub fn text_width(text: &str, scale: u32) -> i32 {
    text.chars().count() as i32 * 6 * scale.max(1) as i32
}

pub fn dist_label(theta_dist: f64) -> String {
    if theta_dist.is_infinite() {
        "inf".into()
    } else {
        format!("{theta_dist}")
    }
}

const PR_WIDTH: u32 = 480;
const PR_HEIGHT: u32 = 360;
const PR_LEFT: i32 = 52;
const PR_RIGHT: i32 = PR_WIDTH as i32 - 16;
const PR_TOP: i32 = 34;
const PR_BOTTOM: i32 = PR_HEIGHT as i32 - 42;

/// Precision-recall figure for one threshold cell.  `points` are cumulative
/// (recall, precision) pairs in rank order; an empty slice draws the
/// all-zero curve along the recall axis.
pub fn pr_figure(points: &[(f64, f64)], theta_iou: f64, theta_dist: f64, ap: f64) -> Drawing {
    let mut d = Drawing::new(PR_WIDTH, PR_HEIGHT);
    let px = |r: f64| PR_LEFT + (r * (PR_RIGHT - PR_LEFT) as f64).round() as i32;
    let py = |p: f64| PR_BOTTOM - (p * (PR_BOTTOM - PR_TOP) as f64).round() as i32;

    for step in 1..4 {
        let v = step as f64 * 0.25;
        d.shapes.push(Shape::Line {
            x0: px(v),
            y0: py(0.0),
            x1: px(v),
            y1: py(1.0),
            color: LIGHT_GRAY,
        });
        d.shapes.push(Shape::Line {
            x0: px(0.0),
            y0: py(v),
            x1: px(1.0),
            y1: py(v),
            color: LIGHT_GRAY,
        });
    }
    d.shapes.push(Shape::Line {
        x0: px(0.0),
        y0: py(0.0),
        x1: px(1.0),
        y1: py(0.0),
        color: BLACK,
    });
    d.shapes.push(Shape::Line {
        x0: px(0.0),
        y0: py(0.0),
        x1: px(0.0),
        y1: py(1.0),
        color: BLACK,
    });
    for (v, label) in [(0.0, "0"), (0.5, "0.5"), (1.0, "1")] {
        d.shapes.push(Shape::Text {
            x: px(v) - text_width(label, 1) / 2,
            y: py(0.0) + 6,
            text: label.into(),
            color: BLACK,
            scale: 1,
        });
        d.shapes.push(Shape::Text {
            x: px(0.0) - text_width(label, 1) - 6,
            y: py(v) - 3,
            text: label.into(),
            color: BLACK,
            scale: 1,
        });
    }
    d.shapes.push(Shape::Text {
        x: (px(0.0) + px(1.0)) / 2 - text_width("recall", 1) / 2,
        y: PR_BOTTOM + 20,
        text: "recall".into(),
        color: BLACK,
        scale: 1,
    });
    d.shapes.push(Shape::Text {
        x: 6,
        y: PR_TOP - 14,
        text: "precision".into(),
        color: BLACK,
        scale: 1,
    });

    let title = format!(
        "iou>={theta_iou} dist<{} ap={ap:.3}",
        dist_label(theta_dist)
    );
    d.shapes.push(Shape::Text {
        x: PR_LEFT + 60,
        y: 8,
        text: title,
        color: BLACK,
        scale: 1,
    });

    let curve = PALETTE[1];
    if points.is_empty() {
        d.shapes.push(Shape::Line {
            x0: px(0.0),
            y0: py(0.0),
            x1: px(1.0),
            y1: py(0.0),
            color: curve,
        });
    } else {
        let mut prev = (px(points[0].0), py(points[0].1));
        for &(r, p) in &points[1..] {
            let next = (px(r), py(p));
            d.shapes.push(Shape::Line {
                x0: prev.0,
                y0: prev.1,
                x1: next.0,
                y1: next.1,
                color: curve,
            });
            prev = next;
        }
        if points.len() <= 60 {
            for &(r, p) in points {
                d.shapes.push(Shape::Disk {
                    cx: px(r),
                    cy: py(p),
                    r: 2,
                    color: curve,
                });
            }
        }
    }
    d
}

const SCENE_SIDE: i32 = 360;
const SCENE_TITLE_H: i32 = 24;
const SCENE_MARGIN: i32 = 10;

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Push one scene panel with its group overlays at the given origin.
/// Person heads are filled gray blocks; each predicted group draws an
/// outline rectangle per member and a disk at its shared-attention point,
/// all in the group's palette color.
fn scene_panel(
    scene: &Scene,
    groups: &[PredictedGroup],
    ox: i32,
    oy: i32,
    shapes: &mut Vec<Shape>,
) {
    let side = SCENE_SIDE as f64;
    let sx = |v: f64| ox + (clamp01(v) * side).round() as i32;
    let sy = |v: f64| oy + (clamp01(v) * side).round() as i32;

    for (x0, y0, x1, y1) in [
        (ox, oy, ox + SCENE_SIDE, oy),
        (ox, oy + SCENE_SIDE, ox + SCENE_SIDE, oy + SCENE_SIDE),
        (ox, oy, ox, oy + SCENE_SIDE),
        (ox + SCENE_SIDE, oy, ox + SCENE_SIDE, oy + SCENE_SIDE),
    ] {
        shapes.push(Shape::Line {
            x0,
            y0,
            x1,
            y1,
            color: GRAY,
        });
    }

    for person in &scene.persons {
        let [x0, y0, x1, y1] = person.head_box;
        shapes.push(Shape::FillRect {
            x0: sx(x0),
            y0: sy(y0),
            x1: sx(x1),
            y1: sy(y1),
            color: LIGHT_GRAY,
        });
    }

    for gt in &scene.groups {
        let (cx, cy) = (sx(gt.sa_point.0), sy(gt.sa_point.1));
        shapes.push(Shape::Line {
            x0: cx - 5,
            y0: cy,
            x1: cx + 5,
            y1: cy,
            color: GRAY,
        });
        shapes.push(Shape::Line {
            x0: cx,
            y0: cy - 5,
            x1: cx,
            y1: cy + 5,
            color: GRAY,
        });
    }

    for (gi, group) in groups.iter().enumerate() {
        let color = PALETTE[gi % PALETTE.len()];
        for &m in &group.members {
            if let Some(person) = scene.persons.get(m) {
                let [x0, y0, x1, y1] = person.head_box;
                shapes.push(Shape::Rect {
                    x0: sx(x0),
                    y0: sy(y0),
                    x1: sx(x1),
                    y1: sy(y1),
                    color,
                    thick: 2,
                });
            }
        }
        shapes.push(Shape::Disk {
            cx: sx(group.sa_point.0),
            cy: sy(group.sa_point.1),
            r: 4,
            color,
        });
    }
}

/// Qualitative rendering of one scene with its predicted groups.
pub fn scene_figure(scene: &Scene, groups: &[PredictedGroup]) -> Drawing {
    let width = (SCENE_SIDE + 2 * SCENE_MARGIN) as u32;
    let height = (SCENE_SIDE + SCENE_TITLE_H + 2 * SCENE_MARGIN + 16) as u32;
    let mut d = Drawing::new(width, height);
    d.shapes.push(Shape::Text {
        x: SCENE_MARGIN,
        y: 8,
        text: scene.scene_id.clone(),
        color: BLACK,
        scale: 1,
    });
    scene_panel(scene, groups, SCENE_MARGIN, SCENE_TITLE_H, &mut d.shapes);
    let caption = format!("{} groups", groups.len());
    d.shapes.push(Shape::Text {
        x: SCENE_MARGIN,
        y: SCENE_TITLE_H + SCENE_SIDE + 8,
        text: caption,
        color: BLACK,
        scale: 1,
    });
    d
}

/// Side-by-side panels comparing first-stage and refined group estimates.
pub fn refine_figure(
    scene: &Scene,
    initial: &[PredictedGroup],
    refined: &[PredictedGroup],
) -> Drawing {
    let gap = 18;
    let width = (2 * SCENE_SIDE + 2 * SCENE_MARGIN + gap) as u32;
    let height = (SCENE_SIDE + SCENE_TITLE_H + 2 * SCENE_MARGIN + 16) as u32;
    let mut d = Drawing::new(width, height);
    d.shapes.push(Shape::Text {
        x: SCENE_MARGIN,
        y: 8,
        text: scene.scene_id.clone(),
        color: BLACK,
        scale: 1,
    });
    let left = SCENE_MARGIN;
    let right = SCENE_MARGIN + SCENE_SIDE + gap;
    scene_panel(scene, initial, left, SCENE_TITLE_H, &mut d.shapes);
    scene_panel(scene, refined, right, SCENE_TITLE_H, &mut d.shapes);
    let cap_y = SCENE_TITLE_H + SCENE_SIDE + 8;
    d.shapes.push(Shape::Text {
        x: left + SCENE_SIDE / 2 - text_width("initial", 1) / 2,
        y: cap_y,
        text: "initial".into(),
        color: BLACK,
        scale: 1,
    });
    d.shapes.push(Shape::Text {
        x: right + SCENE_SIDE / 2 - text_width("refined", 1) / 2,
        y: cap_y,
        text: "refined".into(),
        color: BLACK,
        scale: 1,
    });
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, GeneratorConfig};

    fn rect_count(d: &Drawing) -> usize {
        d.shapes
            .iter()
            .filter(|s| matches!(s, Shape::Rect { .. }))
            .count()
    }

    fn disk_count(d: &Drawing) -> usize {
        d.shapes
            .iter()
            .filter(|s| matches!(s, Shape::Disk { .. }))
            .count()
    }

    fn demo_scene(with_group: bool) -> Scene {
        let cfg = GeneratorConfig {
            positive_fraction: if with_group { 1.0 } else { 0.0 },
            seed: 11,
            ..GeneratorConfig::default()
        };
        for index in 0..64 {
            let scene = generate_scene(&cfg, index).unwrap();
            if with_group {
                if let Some(g) = scene.groups.first() {
                    if g.members.len() == 2 {
                        return scene;
                    }
                }
            } else {
                return scene;
            }
        }
        panic!("generator never produced the requested scene shape");
    }

    #[test]
    fn two_person_group_draws_two_rects_one_disk() {
        let scene = demo_scene(true);
        let group = PredictedGroup {
            members: scene.groups[0].members.clone(),
            sa_point: scene.groups[0].sa_point,
            confidence: 0.9,
        };
        let d = scene_figure(&scene, &[group]);
        assert_eq!(rect_count(&d), 2);
        assert_eq!(disk_count(&d), 1);
        let colors: Vec<Color> = d
            .shapes
            .iter()
            .filter_map(|s| match s {
                Shape::Rect { color, .. } => Some(*color),
                _ => None,
            })
            .collect();
        assert_eq!(colors[0], colors[1]);
        let fills = d
            .shapes
            .iter()
            .filter(|s| matches!(s, Shape::FillRect { .. }))
            .count();
        assert_eq!(fills, scene.persons.len());
    }

    #[test]
    fn empty_prediction_renders_no_overlay() {
        let scene = demo_scene(false);
        let d = scene_figure(&scene, &[]);
        assert_eq!(rect_count(&d), 0);
        assert_eq!(disk_count(&d), 0);
    }

    #[test]
    fn groups_cycle_through_distinct_colors() {
        let scene = demo_scene(true);
        let mk = |m: Vec<usize>| PredictedGroup {
            members: m,
            sa_point: (0.5, 0.5),
            confidence: 0.5,
        };
        let groups = vec![mk(vec![0, 1]), mk(vec![0, 1])];
        let d = scene_figure(&scene, &groups);
        let colors: Vec<Color> = d
            .shapes
            .iter()
            .filter_map(|s| match s {
                Shape::Disk { color, .. } => Some(*color),
                _ => None,
            })
            .collect();
        assert_eq!(colors.len(), 2);
        assert_ne!(colors[0], colors[1]);
    }

    #[test]
    fn refine_figure_has_both_captions_and_offset_panels() {
        let scene = demo_scene(true);
        let group = PredictedGroup {
            members: scene.groups[0].members.clone(),
            sa_point: scene.groups[0].sa_point,
            confidence: 0.9,
        };
        let d = refine_figure(&scene, &[group.clone()], &[group]);
        let texts: Vec<&str> = d
            .shapes
            .iter()
            .filter_map(|s| match s {
                Shape::Text { text, .. } => Some(text.as_str()),
                _ => None,
            })
            .collect();
        assert!(texts.contains(&"initial"));
        assert!(texts.contains(&"refined"));
        assert_eq!(rect_count(&d), 4);
        let disk_xs: Vec<i32> = d
            .shapes
            .iter()
            .filter_map(|s| match s {
                Shape::Disk { cx, .. } => Some(*cx),
                _ => None,
            })
            .collect();
        assert_eq!(disk_xs.len(), 2);
        assert_eq!(disk_xs[1] - disk_xs[0], SCENE_SIDE + 18);
    }

    #[test]
    fn pr_figure_plots_the_curve_inside_the_axes() {
        let points = vec![(0.25, 1.0), (0.5, 1.0), (0.5, 0.666), (0.75, 0.75)];
        let d = pr_figure(&points, 0.5, 0.1, 0.62);
        let title = d
            .shapes
            .iter()
            .find_map(|s| match s {
                Shape::Text { text, .. } if text.contains("ap=") => Some(text.clone()),
                _ => None,
            })
            .expect("title text");
        assert_eq!(title, "iou>=0.5 dist<0.1 ap=0.620");
        for s in &d.shapes {
            if let Shape::Disk { cx, cy, .. } = s {
                assert!(*cx >= PR_LEFT && *cx <= PR_RIGHT);
                assert!(*cy >= PR_TOP && *cy <= PR_BOTTOM);
            }
        }
        assert_eq!(
            d.shapes
                .iter()
                .filter(|s| matches!(s, Shape::Disk { .. }))
                .count(),
            points.len()
        );
    }

    #[test]
    fn empty_pr_curve_is_flat_at_zero_precision() {
        let d = pr_figure(&[], 1.0, f64::INFINITY, 0.0);
        let zero = d
            .shapes
            .iter()
            .filter_map(|s| match s {
                Shape::Line {
                    y0, y1, color, ..
                } if *color == PALETTE[1] => Some((*y0, *y1)),
                _ => None,
            })
            .collect::<Vec<_>>();
        assert_eq!(zero, vec![(PR_BOTTOM, PR_BOTTOM)]);
        let title = d
            .shapes
            .iter()
            .find_map(|s| match s {
                Shape::Text { text, .. } if text.contains("dist<") => Some(text.clone()),
                _ => None,
            })
            .unwrap();
        assert!(title.contains("dist<inf"));
    }

    #[test]
    fn rasterized_shapes_hit_expected_pixels() {
        let mut d = Drawing::new(20, 20);
        d.shapes.push(Shape::Rect {
            x0: 5,
            y0: 5,
            x1: 10,
            y1: 10,
            color: [200, 0, 0],
            thick: 1,
        });
        d.shapes.push(Shape::Disk {
            cx: 15,
            cy: 15,
            r: 2,
            color: [0, 0, 200],
        });
        let img = d.rasterize();
        assert_eq!(img.get_pixel(5, 5).0, [200, 0, 0]);
        assert_eq!(img.get_pixel(7, 5).0, [200, 0, 0]);
        assert_eq!(img.get_pixel(7, 7).0, [255, 255, 255]);
        assert_eq!(img.get_pixel(15, 15).0, [0, 0, 200]);
    }

    #[test]
    fn out_of_bounds_shapes_clip_instead_of_panicking() {
        let mut d = Drawing::new(12, 12);
        d.shapes.push(Shape::Rect {
            x0: -5,
            y0: -5,
            x1: 40,
            y1: 40,
            color: BLACK,
            thick: 3,
        });
        d.shapes.push(Shape::Line {
            x0: -20,
            y0: 6,
            x1: 30,
            y1: 6,
            color: BLACK,
        });
        d.shapes.push(Shape::Text {
            x: -4,
            y: 9,
            text: "edge".into(),
            color: BLACK,
            scale: 2,
        });
        let _ = d.rasterize();
    }

    #[test]
    fn label_alphabet_is_fully_covered() {
        for c in "abcdefghijklmnopqrstuvwxyz0123456789.-=<>:/_, ".chars() {
            if c == ' ' {
                continue;
            }
            assert_ne!(glyph(c), [0u8; 7], "missing glyph for {c:?}");
        }
    }

    #[test]
    fn text_rasterizes_dark_pixels() {
        let mut d = Drawing::new(60, 14);
        d.shapes.push(Shape::Text {
            x: 2,
            y: 2,
            text: "ap=0.5".into(),
            color: BLACK,
            scale: 1,
        });
        let img = d.rasterize();
        let dark = img.pixels().filter(|p| p.0 == BLACK).count();
        assert!(dark > 20, "only {dark} glyph pixels drawn");
    }

    #[test]
    fn saved_png_decodes_back_with_same_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fig.png");
        let d = pr_figure(&[(0.5, 1.0)], 0.5, 0.05, 0.5);
        d.save(&path).unwrap();
        let img = image::open(&path).unwrap();
        assert_eq!(img.width(), PR_WIDTH);
        assert_eq!(img.height(), PR_HEIGHT);
    }
}
