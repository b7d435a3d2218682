//! Static scatter of 2D embedding coordinates: color by modality, marker by subject.

use std::collections::BTreeMap;

use anyhow::{ensure, Result};
use image::{Rgb, RgbImage};
use modalign::embedeval::CoordRow;
use modalign::Modality;

const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Marker {
    Disc,
    Square,
    Triangle,
    Diamond,
    Cross,
    Ring,
    TriangleDown,
    Plus,
}

const MARKERS: [Marker; 8] = [
    Marker::Disc,
    Marker::Square,
    Marker::Triangle,
    Marker::Diamond,
    Marker::Cross,
    Marker::Ring,
    Marker::TriangleDown,
    Marker::Plus,
];

impl Marker {
    /// Whether offset (dx, dy) from the center, in units of the radius, is inked.
    fn covers(self, dx: f64, dy: f64) -> bool {
        let r2 = dx * dx + dy * dy;
        match self {
            Marker::Disc => r2 <= 1.0,
            Marker::Square => dx.abs() <= 0.8 && dy.abs() <= 0.8,
            Marker::Triangle => dy <= 0.8 && dy >= -1.0 + 2.0 * dx.abs(),
            Marker::TriangleDown => dy >= -0.8 && dy <= 1.0 - 2.0 * dx.abs(),
            Marker::Diamond => dx.abs() + dy.abs() <= 1.0,
            Marker::Cross => ((dx - dy).abs() <= 0.3 || (dx + dy).abs() <= 0.3) && r2 <= 1.0,
            Marker::Ring => (0.45..=1.0).contains(&r2),
            Marker::Plus => (dx.abs() <= 0.22 || dy.abs() <= 0.22) && dx.abs() <= 1.0 && dy.abs() <= 1.0,
        }
    }
}

pub fn scatter(rows: &[CoordRow], size: u32) -> Result<RgbImage> {
    ensure!(!rows.is_empty(), "no coordinates to plot");
    ensure!(size >= 64, "image size must be at least 64 pixels");
    let colors: BTreeMap<Modality, Rgb<u8>> = rows
        .iter()
        .map(|r| r.modality)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, m)| (m, Rgb(PALETTE[i % PALETTE.len()])))
        .collect();
    let markers: BTreeMap<u32, Marker> = rows
        .iter()
        .map(|r| r.subject)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, s)| (s, MARKERS[i % MARKERS.len()]))
        .collect();

    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for r in rows {
        x0 = x0.min(r.x);
        x1 = x1.max(r.x);
        y0 = y0.min(r.y);
        y1 = y1.max(r.y);
    }
    let span = (x1 - x0).max(y1 - y0).max(1e-12);
    let margin = f64::from(size) * 0.06;
    let usable = f64::from(size) - 2.0 * margin;
    let radius = (f64::from(size) / 110.0).max(3.0);

    let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    for r in rows {
        // centered so the cloud sits in the middle whatever its aspect
        let cx = margin + ((r.x - x0) + (span - (x1 - x0)) / 2.0) / span * usable;
        let cy = margin + ((y1 - r.y) + (span - (y1 - y0)) / 2.0) / span * usable;
        let (color, marker) = (colors[&r.modality], markers[&r.subject]);
        let reach = radius.ceil() as i64 + 1;
        for py in (cy as i64 - reach)..=(cy as i64 + reach) {
            for px in (cx as i64 - reach)..=(cx as i64 + reach) {
                if px < 0 || py < 0 || px >= i64::from(size) || py >= i64::from(size) {
                    continue;
                }
                let dx = (px as f64 + 0.5 - cx) / radius;
                let dy = (cy - (py as f64 + 0.5)) / radius;
                if marker.covers(dx, dy) {
                    img.put_pixel(px as u32, py as u32, color);
                }
            }
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(subject: u32, modality: Modality, x: f64, y: f64) -> CoordRow {
        CoordRow {
            subject,
            session: 0,
            modality,
            x,
            y,
        }
    }

    #[test]
    fn points_land_in_their_colors() {
        let rows = vec![row(0, Modality::T1, 0.0, 0.0), row(1, Modality::T2, 1.0, 1.0)];
        let img = scatter(&rows, 200).unwrap();
        let blue = Rgb(PALETTE[0]);
        let orange = Rgb(PALETTE[1]);
        // T1 at bottom-left, T2 at top-right
        let m = (200.0 * 0.06) as u32;
        assert_eq!(*img.get_pixel(m, 200 - m - 1), blue);
        assert_eq!(*img.get_pixel(200 - m - 1, m + 1), orange);
        assert_eq!(*img.get_pixel(100, 100), Rgb([255, 255, 255]));
    }

    #[test]
    fn markers_differ_by_subject() {
        let shapes: Vec<usize> = MARKERS
            .iter()
            .map(|m| {
                (0..40)
                    .flat_map(|i| (0..40).map(move |j| (i, j)))
                    .filter(|&(i, j)| m.covers(i as f64 / 20.0 - 1.0, j as f64 / 20.0 - 1.0))
                    .count()
            })
            .collect();
        assert!(shapes.iter().all(|&n| n > 0));
        let footprint = |m: Marker| -> Vec<bool> {
            (0..400)
                .map(|k| m.covers((k % 20) as f64 / 10.0 - 1.0, (k / 20) as f64 / 10.0 - 1.0))
                .collect()
        };
        for (i, &a) in MARKERS.iter().enumerate() {
            for &b in &MARKERS[i + 1..] {
                assert_ne!(footprint(a), footprint(b), "{a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(scatter(&[], 200).is_err());
    }
}
