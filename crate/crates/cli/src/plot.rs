//! Minimal scatter-plot rendering for projected style features.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};

use restyle::eval::ProjectedPoint;

const SIZE: u32 = 640;
const MARGIN: f64 = 40.0;
const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [23, 190, 207],
];

/// Colour assigned to each group, in sorted group order.
pub fn group_colors(points: &[ProjectedPoint]) -> BTreeMap<String, Rgb<u8>> {
    let mut groups: Vec<&str> = points.iter().map(|p| p.group.as_str()).collect();
    groups.sort_unstable();
    groups.dedup();
    groups
        .into_iter()
        .enumerate()
        .map(|(i, g)| (g.to_string(), Rgb(PALETTE[i % PALETTE.len()])))
        .collect()
}

/// Renders points as filled squares on a white canvas with light axes.
pub fn render(points: &[ProjectedPoint]) -> RgbImage {
    let mut img = RgbImage::from_pixel(SIZE, SIZE, Rgb([255, 255, 255]));
    let colors = group_colors(points);
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in points {
        x0 = x0.min(p.x);
        x1 = x1.max(p.x);
        y0 = y0.min(p.y);
        y1 = y1.max(p.y);
    }
    let span = |a: f64, b: f64| if b - a > 1e-12 { b - a } else { 1.0 };
    let inner = SIZE as f64 - 2.0 * MARGIN;
    let px = |x: f64| MARGIN + (x - x0) / span(x0, x1) * inner;
    let py = |y: f64| SIZE as f64 - MARGIN - (y - y0) / span(y0, y1) * inner;
    let grey = Rgb([200, 200, 200]);
    if (x0..=x1).contains(&0.0) {
        let x = px(0.0) as u32;
        (0..SIZE).for_each(|y| img.put_pixel(x.min(SIZE - 1), y, grey));
    }
    if (y0..=y1).contains(&0.0) {
        let y = py(0.0) as u32;
        (0..SIZE).for_each(|x| img.put_pixel(x, y.min(SIZE - 1), grey));
    }
    for p in points {
        let (cx, cy) = (px(p.x) as i64, py(p.y) as i64);
        let c = colors[&p.group];
        for dx in -2..=2 {
            for dy in -2..=2 {
                let (x, y) = (cx + dx, cy + dy);
                if (0..SIZE as i64).contains(&x) && (0..SIZE as i64).contains(&y) {
                    img.put_pixel(x as u32, y as u32, c);
                }
            }
        }
    }
    img
}

pub fn scatter(points: &[ProjectedPoint], path: &Path) -> Result<()> {
    render(points)
        .save(path)
        .with_context(|| format!("writing {}", path.display()))?;
    for (group, c) in group_colors(points) {
        log::info!("{group}: rgb({}, {}, {})", c[0], c[1], c[2]);
    }
    Ok(())
}
