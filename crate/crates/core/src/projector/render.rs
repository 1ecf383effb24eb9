use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::ArrayView2;

use crate::corpus::TissueClass;
use crate::error::{Error, IoContext, Result};

/// One colour per tissue class, indexed by [`TissueClass::index`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Palette(pub [[u8; 3]; 8]);

impl Default for Palette {
    fn default() -> Self {
        Palette([
            [31, 119, 180],
            [255, 127, 14],
            [44, 160, 44],
            [214, 39, 40],
            [148, 103, 189],
            [140, 86, 75],
            [227, 119, 194],
            [127, 127, 127],
        ])
    }
}

impl Palette {
    pub fn color(&self, class: TissueClass) -> Rgb<u8> {
        Rgb(self.0[class.index()])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScatterFiles {
    pub image: PathBuf,
    pub coordinates: PathBuf,
    /// Legend entries, in class order.
    pub legend: Vec<TissueClass>,
}

const WIDTH: u32 = 960;
const HEIGHT: u32 = 680;
const PLOT: u32 = 640;
const MARGIN: u32 = 20;
const FONT_SCALE: u32 = 2;

fn glyph(c: char) -> [u8; 7] {
    match c {
        'A' => [0x0e, 0x11, 0x11, 0x1f, 0x11, 0x11, 0x11],
        'B' => [0x1e, 0x11, 0x11, 0x1e, 0x11, 0x11, 0x1e],
        'C' => [0x0e, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0e],
        'D' => [0x1e, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1e],
        'E' => [0x1f, 0x10, 0x10, 0x1e, 0x10, 0x10, 0x1f],
        'F' => [0x1f, 0x10, 0x10, 0x1e, 0x10, 0x10, 0x10],
        'G' => [0x0e, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0f],
        'H' => [0x11, 0x11, 0x11, 0x1f, 0x11, 0x11, 0x11],
        'I' => [0x0e, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0e],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0c],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1f],
        'M' => [0x11, 0x1b, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11],
        'O' => [0x0e, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0e],
        'P' => [0x1e, 0x11, 0x11, 0x1e, 0x10, 0x10, 0x10],
        'Q' => [0x0e, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0d],
        'R' => [0x1e, 0x11, 0x11, 0x1e, 0x14, 0x12, 0x11],
        'S' => [0x0f, 0x10, 0x10, 0x0e, 0x01, 0x01, 0x1e],
        'T' => [0x1f, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0e],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0a, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0a],
        'X' => [0x11, 0x11, 0x0a, 0x04, 0x0a, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x0a, 0x04, 0x04, 0x04, 0x04],
        'Z' => [0x1f, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1f],
        '0' => [0x0e, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0e],
        '1' => [0x04, 0x0c, 0x04, 0x04, 0x04, 0x04, 0x0e],
        '2' => [0x0e, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1f],
        '3' => [0x1f, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0e],
        '4' => [0x02, 0x06, 0x0a, 0x12, 0x1f, 0x02, 0x02],
        '5' => [0x1f, 0x10, 0x1e, 0x01, 0x01, 0x11, 0x0e],
        '6' => [0x06, 0x08, 0x10, 0x1e, 0x11, 0x11, 0x0e],
        '7' => [0x1f, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0e, 0x11, 0x11, 0x0e, 0x11, 0x11, 0x0e],
        '9' => [0x0e, 0x11, 0x11, 0x0f, 0x01, 0x02, 0x0c],
        '-' => [0x00, 0x00, 0x00, 0x1f, 0x00, 0x00, 0x00],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0c, 0x0c],
        _ => [0; 7],
    }
}

fn draw_text(img: &mut RgbImage, x: u32, y: u32, text: &str, color: Rgb<u8>) {
    for (n, c) in text.chars().enumerate() {
        let rows = glyph(c.to_ascii_uppercase());
        let x0 = x + n as u32 * 6 * FONT_SCALE;
        for (r, bits) in rows.iter().enumerate() {
            for col in 0..5 {
                if bits & (0x10 >> col) == 0 {
                    continue;
                }
                for dy in 0..FONT_SCALE {
                    for dx in 0..FONT_SCALE {
                        let (px, py) = (x0 + col * FONT_SCALE + dx, y + r as u32 * FONT_SCALE + dy);
                        if px < img.width() && py < img.height() {
                            img.put_pixel(px, py, color);
                        }
                    }
                }
            }
        }
    }
}

fn fill_rect(img: &mut RgbImage, x: u32, y: u32, w: u32, h: u32, color: Rgb<u8>) {
    for py in y..(y + h).min(img.height()) {
        for px in x..(x + w).min(img.width()) {
            img.put_pixel(px, py, color);
        }
    }
}

fn dot(img: &mut RgbImage, cx: i64, cy: i64, color: Rgb<u8>) {
    for dy in -2i64..=2 {
        for dx in -2i64..=2 {
            if dx * dx + dy * dy > 5 {
                continue;
            }
            let (px, py) = (cx + dx, cy + dy);
            if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, color);
            }
        }
    }
}

/// `item_id,x,y,label` with coordinates at six significant digits.
pub fn coordinate_csv(
    coords: ArrayView2<f64>,
    labels: &[TissueClass],
    item_ids: &[String],
) -> String {
    let mut s = String::from("item_id,x,y,label\n");
    for ((row, label), id) in coords.rows().into_iter().zip(labels).zip(item_ids) {
        writeln!(s, "{id},{:.5e},{:.5e},{label}", row[0], row[1]).unwrap();
    }
    s
}

/// Draws one dot per item, coloured by class, with a legend of the classes
/// present, and writes the coordinates next to the image as `<stem>.csv`.
pub fn render_scatter(
    coords: ArrayView2<f64>,
    labels: &[TissueClass],
    item_ids: &[String],
    palette: &Palette,
    out: &Path,
) -> Result<ScatterFiles> {
    let n = coords.nrows();
    if n == 0 {
        return Err(Error::Contract("nothing to plot".into()));
    }
    if labels.len() != n || item_ids.len() != n || coords.ncols() != 2 {
        return Err(Error::Contract(format!(
            "{n}×{} coordinates, {} labels, {} ids",
            coords.ncols(),
            labels.len(),
            item_ids.len()
        )));
    }
    if coords.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("non-finite coordinate".into()));
    }
    let span = |d: usize| {
        let (lo, hi) = coords
            .column(d)
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
                (l.min(v), h.max(v))
            });
        (lo, (hi - lo).max(1e-12))
    };
    let ((x0, xr), (y0, yr)) = (span(0), span(1));
    let inner = f64::from(PLOT - 2 * MARGIN);
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let frame = Rgb([200, 200, 200]);
    fill_rect(&mut img, MARGIN / 2, MARGIN / 2, PLOT, 1, frame);
    fill_rect(&mut img, MARGIN / 2, MARGIN / 2 + PLOT, PLOT, 1, frame);
    fill_rect(&mut img, MARGIN / 2, MARGIN / 2, 1, PLOT, frame);
    fill_rect(&mut img, MARGIN / 2 + PLOT, MARGIN / 2, 1, PLOT + 1, frame);
    for (row, &label) in coords.rows().into_iter().zip(labels) {
        let px = f64::from(MARGIN) + (row[0] - x0) / xr * inner;
        // Image rows grow downwards.
        let py = f64::from(MARGIN) + (1.0 - (row[1] - y0) / yr) * inner;
        dot(
            &mut img,
            px.round() as i64,
            py.round() as i64,
            palette.color(label),
        );
    }
    let legend: Vec<TissueClass> = TissueClass::ALL
        .into_iter()
        .filter(|c| labels.contains(c))
        .collect();
    let lx = PLOT + 2 * MARGIN;
    for (k, &class) in legend.iter().enumerate() {
        let ly = MARGIN + k as u32 * 10 * FONT_SCALE;
        fill_rect(
            &mut img,
            lx,
            ly,
            7 * FONT_SCALE,
            7 * FONT_SCALE,
            palette.color(class),
        );
        draw_text(
            &mut img,
            lx + 10 * FONT_SCALE,
            ly,
            &class.as_str().replace('_', " "),
            Rgb([0, 0, 0]),
        );
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).at(dir)?;
    }
    img.save_with_format(out, image::ImageFormat::Png)?;
    let csv_path = out.with_extension("csv");
    std::fs::write(&csv_path, coordinate_csv(coords, labels, item_ids)).at(&csv_path)?;
    Ok(ScatterFiles {
        image: out.to_path_buf(),
        coordinates: csv_path,
        legend,
    })
}
