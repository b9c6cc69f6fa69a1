//! Debug images: relevance overlays, sampled masks, expert renderings and
//! summary plots.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::Serialize;

use crate::backends::mock::CAPTION_PROMPT;
use crate::backends::{BackendSuite, Image};
use crate::error::{Error, Result};
use crate::experts::{render, RenderStyle};
use crate::masking::{apply_mask, sample_mask_set, Mask};
use crate::pipeline::{captioning_queries, sample_seed, DnRConfig};
use crate::relevance::{compute_alpha, compute_relevance_map, query_set_with_fallback, region_distribution, RelevanceMap};

/// Heat overlay: red rises and blue falls with min-max normalized relevance;
/// green carries half the image luminance so the scene stays readable.
pub fn relevance_overlay(image: &Image, map: &RelevanceMap<f64>) -> Result<Image> {
    let (h, w) = map.shape();
    if (h, w) != image.shape() {
        return Err(Error::invalid("relevance map and image differ in shape"));
    }
    let lo = map.values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let r = if span > 0.0 { (map.values[[y, x]] - lo) / span } else { 0.0 };
            let [pr, pg, pb] = image.get(x as u32, y as u32);
            let lum = 0.299 * f64::from(pr) + 0.587 * f64::from(pg) + 0.114 * f64::from(pb);
            out.put(
                x as u32,
                y as u32,
                [(255.0 * r).round() as u8, (lum / 2.0).round() as u8, (255.0 * (1.0 - r)).round() as u8],
            );
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Sidecar<'a> {
    Overlay { terms: &'a [String] },
    Mask { index: usize, mask: &'a Mask },
    Render { expert: &'a str, style: &'a RenderStyle, no_op: bool },
}

fn write_pair(dir: &Path, stem: &str, image: &Image, sidecar: &Sidecar<'_>) -> Result<PathBuf> {
    let png = dir.join(format!("{stem}.png"));
    image.save(&png)?;
    let side = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(sidecar).expect("sidecar serializes");
    std::fs::write(&side, text).map_err(|e| Error::io(&side, e))?;
    Ok(png)
}

/// Write the overlay, every sampled mask and every expert rendering for each
/// requested style. Returns the PNG paths; each has a `.json` sidecar.
pub fn debug_render(
    image: &Image,
    question: Option<&str>,
    config: &DnRConfig,
    backends: &BackendSuite,
    styles: &[RenderStyle],
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let dir = out_dir.as_ref();
    config.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let query_set = match question {
        Some(q) => query_set_with_fallback(q, backends.decomposer.as_ref())?,
        None => {
            let caption = backends.vlm.answer(image, CAPTION_PROMPT)?;
            captioning_queries(&caption, backends.decomposer.as_ref())?
        }
    };
    let map = compute_relevance_map::<f64>(image, &query_set, backends.grounder.as_ref())?;
    let grid = config.grid()?;
    let mut dist = region_distribution(&map, grid)?;
    compute_alpha(&mut dist, config.beta_ent, config.beta_ctr)?;
    let masks = sample_mask_set(&dist, &config.mask_params(sample_seed(config.seed, image.id(), question)))?;

    let mut files = vec![write_pair(
        dir,
        "relevance",
        &relevance_overlay(image, &map)?,
        &Sidecar::Overlay { terms: &query_set.terms },
    )?];
    for (i, m) in masks.masks.iter().enumerate() {
        let masked = apply_mask(image, m, &grid, config.fill)?;
        files.push(write_pair(dir, &format!("mask_{i:02}"), &masked, &Sidecar::Mask { index: i, mask: m })?);
    }
    for expert in &backends.experts {
        let output = expert.run(image)?;
        for style in styles {
            let r = render(image, &output, style)?;
            let stem = format!("render_{}_{}", expert.name(), style_name(style));
            files.push(write_pair(
                dir,
                &stem,
                &r.image,
                &Sidecar::Render {
                    expert: expert.name(),
                    style,
                    no_op: r.no_op,
                },
            )?);
        }
    }
    Ok(files)
}

fn style_name(s: &RenderStyle) -> &'static str {
    match s.style {
        crate::experts::StyleKind::Gray => "gray",
        crate::experts::StyleKind::Blur => "blur",
        crate::experts::StyleKind::Highlight => "highlight",
    }
}

const PLOT_W: u32 = 320;
const PLOT_H: u32 = 200;
const MARGIN: u32 = 20;
const INK: Rgb<u8> = Rgb([30, 30, 30]);
const BAR: Rgb<u8> = Rgb([60, 110, 200]);

fn canvas() -> RgbImage {
    let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, Rgb([255, 255, 255]));
    for x in MARGIN..PLOT_W - MARGIN {
        img.put_pixel(x, PLOT_H - MARGIN, INK);
    }
    for y in MARGIN..=PLOT_H - MARGIN {
        img.put_pixel(MARGIN, y, INK);
    }
    img
}

fn save_plot(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png).map_err(Error::from)
}

/// Bar chart of `values` in `bins` equal-width bins over `[lo, hi]`.
pub fn histogram_png(values: &[f64], bins: usize, lo: f64, hi: f64, path: impl AsRef<Path>) -> Result<Vec<usize>> {
    if bins == 0 || !(hi > lo) {
        return Err(Error::invalid("histogram needs bins > 0 and hi > lo"));
    }
    let mut counts = vec![0usize; bins];
    for &v in values.iter().filter(|v| v.is_finite()) {
        let b = (((v - lo) / (hi - lo)) * bins as f64).floor();
        counts[(b.max(0.0) as usize).min(bins - 1)] += 1;
    }
    let mut img = canvas();
    let peak = counts.iter().copied().max().unwrap_or(0).max(1);
    let inner_w = PLOT_W - 2 * MARGIN - 1;
    let inner_h = PLOT_H - 2 * MARGIN - 1;
    for (i, &c) in counts.iter().enumerate() {
        let x0 = MARGIN + 1 + (i as u32 * inner_w) / bins as u32;
        let x1 = MARGIN + 1 + ((i as u32 + 1) * inner_w) / bins as u32;
        let bar_h = (c as u64 * u64::from(inner_h) / peak as u64) as u32;
        for x in x0..x1.saturating_sub(1).max(x0 + 1) {
            for y in (PLOT_H - MARGIN - bar_h)..(PLOT_H - MARGIN) {
                img.put_pixel(x, y, BAR);
            }
        }
    }
    save_plot(&img, path.as_ref())?;
    Ok(counts)
}

/// Scatter of `(x, y)` points, axes fitted to the data range.
pub fn scatter_png(points: &[(f64, f64)], path: impl AsRef<Path>) -> Result<()> {
    let mut img = canvas();
    let pts: Vec<(f64, f64)> = points.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
    let range = |f: fn(&(f64, f64)) -> f64| {
        let lo = pts.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            (lo, hi)
        } else {
            (lo - 1.0, lo + 1.0)
        }
    };
    if !pts.is_empty() {
        let (xl, xh) = range(|p| p.0);
        let (yl, yh) = range(|p| p.1);
        let inner_w = f64::from(PLOT_W - 2 * MARGIN - 6);
        let inner_h = f64::from(PLOT_H - 2 * MARGIN - 6);
        for (x, y) in pts {
            let px = MARGIN + 3 + ((x - xl) / (xh - xl) * inner_w).round() as u32;
            let py = PLOT_H - MARGIN - 3 - ((y - yl) / (yh - yl) * inner_h).round() as u32;
            for dx in 0..3 {
                for dy in 0..3 {
                    img.put_pixel(px + dx - 1, py + dy - 1, BAR);
                }
            }
        }
    }
    save_plot(&img, path.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn overlay_tracks_relevance() {
        let img = Image::filled("o", 16, 16, [100, 100, 100]).unwrap();
        let mut v = Array2::zeros((16, 16));
        v[[3, 4]] = 1.0;
        v[[10, 10]] = 0.5;
        let map = RelevanceMap::new(v, vec![], "o").unwrap();
        let o = relevance_overlay(&img, &map).unwrap();
        assert_eq!(o.get(4, 3), [255, 50, 0]);
        assert_eq!(o.get(10, 10)[0], 128);
        assert_eq!(o.get(0, 0), [0, 50, 255]);
    }

    #[test]
    fn histogram_counts() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.png");
        let c = histogram_png(&[0.0, 0.05, 0.5, 1.0, 1.5, f64::NAN], 10, 0.0, 1.0, &p).unwrap();
        assert_eq!(c, vec![2, 0, 0, 0, 0, 1, 0, 0, 0, 2]);
        assert!(p.exists());
        scatter_png(&[(0.0, 1.0), (1.0, -1.0)], dir.path().join("s.png")).unwrap();
        scatter_png(&[], dir.path().join("e.png")).unwrap();
    }
}
