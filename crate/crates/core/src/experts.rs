//! Expert structural outputs and their rendering into visual cues.

use serde::{Deserialize, Serialize};

use crate::backends::{
    BackendResult, Bitmask, Expert, Image, NormBox, VisionLanguageModel,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    Boxes,
    Segments,
    Depth,
}

/// Dense depth in `[0,1]`, 0 = nearest, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Geometry {
    Box(NormBox),
    Mask(Bitmask),
    Depth(DepthMap),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertElement {
    pub geometry: Geometry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertOutput {
    pub expert_name: String,
    pub kind: OutputKind,
    pub elements: Vec<ExpertElement>,
}

impl ExpertOutput {
    pub fn empty(expert_name: impl Into<String>, kind: OutputKind) -> Self {
        Self {
            expert_name: expert_name.into(),
            kind,
            elements: Vec::new(),
        }
    }

    /// Structural checks against the image the output is meant for.
    pub fn validate(&self, image: &Image) -> Result<()> {
        let (w, h) = (image.width(), image.height());
        for el in &self.elements {
            if !(0.0..=1.0).contains(&el.score) {
                return Err(Error::invalid(format!(
                    "{}: element score {} outside [0,1]",
                    self.expert_name, el.score
                )));
            }
            match (&el.geometry, self.kind) {
                (Geometry::Box(_), OutputKind::Boxes) => {}
                (Geometry::Mask(m), OutputKind::Segments) => {
                    if m.width != w || m.height != h || m.bits().len() != (w * h) as usize {
                        return Err(Error::invalid(format!(
                            "{}: mask {}x{} does not match image {w}x{h}",
                            self.expert_name, m.width, m.height
                        )));
                    }
                }
                (Geometry::Depth(d), OutputKind::Depth) => {
                    if d.width != w || d.height != h || d.values.len() != (w * h) as usize {
                        return Err(Error::invalid(format!(
                            "{}: depth map does not match image {w}x{h}",
                            self.expert_name
                        )));
                    }
                    if d.values.iter().any(|v| !(0.0..=1.0).contains(v)) {
                        return Err(Error::invalid(format!(
                            "{}: depth values must be normalized to [0,1]",
                            self.expert_name
                        )));
                    }
                }
                _ => {
                    return Err(Error::invalid(format!(
                        "{}: geometry does not match output kind {:?}",
                        self.expert_name, self.kind
                    )))
                }
            }
        }
        if self.kind == OutputKind::Depth && self.elements.len() > 1 {
            return Err(Error::invalid(format!(
                "{}: depth output carries exactly one dense map",
                self.expert_name
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleKind {
    Gray,
    Blur,
    Highlight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderStyle {
    pub style: StyleKind,
    pub gray_value: u8,
    pub blur_radius: u32,
    pub outline_color: [u8; 3],
    pub outline_width: u32,
    pub depth_keep_fraction: f64,
}

impl Default for RenderStyle {
    fn default() -> Self {
        Self {
            style: StyleKind::Gray,
            gray_value: 128,
            blur_radius: 7,
            outline_color: [255, 0, 0],
            outline_width: 3,
            depth_keep_fraction: 0.4,
        }
    }
}

impl RenderStyle {
    pub fn gray() -> Self {
        Self::default()
    }

    pub fn blur() -> Self {
        Self {
            style: StyleKind::Blur,
            ..Self::default()
        }
    }

    pub fn highlight() -> Self {
        Self {
            style: StyleKind::Highlight,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blur_radius < 1 {
            return Err(Error::invalid("style.blur_radius must be >= 1"));
        }
        if self.outline_width < 1 {
            return Err(Error::invalid("style.outline_width must be >= 1"));
        }
        if !(self.depth_keep_fraction > 0.0 && self.depth_keep_fraction < 1.0) {
            return Err(Error::invalid("style.depth_keep_fraction must lie in (0,1)"));
        }
        Ok(())
    }
}

/// Pixel region an element designates on a `width`×`height` raster.
pub fn element_region(el: &ExpertElement, width: u32, height: u32, keep_fraction: f64) -> Bitmask {
    match &el.geometry {
        Geometry::Box(b) => Bitmask::from_rect(width, height, b.to_pixels(width, height)),
        Geometry::Mask(m) => m.clone(),
        Geometry::Depth(d) => depth_region(d, keep_fraction),
    }
}

/// Pixels within the nearest `keep_fraction` quantile of the depth map.
pub fn depth_region(depth: &DepthMap, keep_fraction: f64) -> Bitmask {
    let n = depth.values.len();
    let mut sorted = depth.values.clone();
    sorted.sort_by(f64::total_cmp);
    let k = ((keep_fraction * n as f64).ceil() as usize).clamp(1, n);
    let threshold = sorted[k - 1];
    let bits = depth.values.iter().map(|&v| v <= threshold).collect();
    Bitmask::from_bits(depth.width, depth.height, bits).expect("depth map shape")
}

/// Union of every element's region.
pub fn union_region(output: &ExpertOutput, width: u32, height: u32, keep_fraction: f64) -> Bitmask {
    let mut acc = Bitmask::empty(width, height);
    for el in &output.elements {
        acc.union_with(&element_region(el, width, height, keep_fraction));
    }
    acc
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub image: Image,
    /// The expert contributed nothing; `image` equals the input.
    pub no_op: bool,
}

pub fn render(image: &Image, output: &ExpertOutput, style: &RenderStyle) -> Result<Rendered> {
    style.validate()?;
    output.validate(image)?;
    if output.elements.is_empty() {
        return Ok(Rendered {
            image: image.clone(),
            no_op: true,
        });
    }
    let (w, h) = (image.width(), image.height());
    let keep = style.depth_keep_fraction;
    let mut out = image.clone();
    match style.style {
        StyleKind::Gray => {
            let region = union_region(output, w, h, keep);
            let g = style.gray_value;
            for y in 0..h {
                for x in 0..w {
                    if !region.get(x, y) {
                        out.put(x, y, [g, g, g]);
                    }
                }
            }
        }
        StyleKind::Blur => {
            let region = union_region(output, w, h, keep);
            let blurred = box_blur(image, style.blur_radius);
            for y in 0..h {
                for x in 0..w {
                    if !region.get(x, y) {
                        out.put(x, y, blurred[(y * w + x) as usize]);
                    }
                }
            }
        }
        StyleKind::Highlight => {
            for el in &output.elements {
                let band = element_region(el, w, h, keep).inner_band(style.outline_width);
                for y in 0..h {
                    for x in 0..w {
                        if band.get(x, y) {
                            out.put(x, y, style.outline_color);
                        }
                    }
                }
            }
        }
    }
    Ok(Rendered {
        image: out,
        no_op: false,
    })
}

/// Normalized box filter over a `(2r+1)²` window, clipped at the borders.
fn box_blur(image: &Image, radius: u32) -> Vec<[u8; 3]> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    // summed-area table with a zero border row/col
    let stride = w + 1;
    let mut sat = vec![[0u64; 3]; stride * (h + 1)];
    for y in 0..h {
        let mut row = [0u64; 3];
        for x in 0..w {
            let p = image.get(x as u32, y as u32);
            for c in 0..3 {
                row[c] += u64::from(p[c]);
                sat[(y + 1) * stride + x + 1][c] = sat[y * stride + x + 1][c] + row[c];
            }
        }
    }
    let r = radius as usize;
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let (ya, yb) = (y.saturating_sub(r), (y + r + 1).min(h));
        for x in 0..w {
            let (xa, xb) = (x.saturating_sub(r), (x + r + 1).min(w));
            let n = ((yb - ya) * (xb - xa)) as f64;
            let mut px = [0u8; 3];
            for c in 0..3 {
                let s = sat[yb * stride + xb][c] + sat[ya * stride + xa][c]
                    - sat[ya * stride + xb][c]
                    - sat[yb * stride + xa][c];
                px[c] = (s as f64 / n).round() as u8;
            }
            out.push(px);
        }
    }
    out
}

/// Result of one expert branch before utilization is measured.
#[derive(Debug, Clone)]
pub struct Refinement {
    pub output: ExpertOutput,
    pub rendered: Image,
    pub no_op: bool,
    pub answer: String,
}

#[derive(Debug, thiserror::Error)]
pub enum RefineError {
    #[error("expert failed: {0}")]
    Expert(crate::backends::BackendError),
    #[error("expert output unusable: {0}")]
    Render(Error),
    #[error("re-query failed: {0}")]
    Vlm(crate::backends::BackendError),
}

/// Run the expert, render its output and re-query the VLM with the original question.
pub fn refine_with_expert(
    image: &Image,
    question: &str,
    expert: &dyn Expert,
    style: &RenderStyle,
    vlm: &dyn VisionLanguageModel,
) -> std::result::Result<Refinement, RefineError> {
    let output = expert.run(image).map_err(RefineError::Expert)?;
    let rendered = render(image, &output, style).map_err(RefineError::Render)?;
    let answer: BackendResult<String> = vlm.answer(&rendered.image, question);
    Ok(Refinement {
        output,
        rendered: rendered.image,
        no_op: rendered.no_op,
        answer: answer.map_err(RefineError::Vlm)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: u32, h: u32) -> Image {
        let mut img = Image::filled("g", w, h, [0; 3]).unwrap();
        for y in 0..h {
            for x in 0..w {
                img.put(x, y, [(x * 7 % 250) as u8, (y * 5 % 250) as u8, ((x + y) % 200) as u8]);
            }
        }
        img
    }

    fn boxes(bs: &[NormBox]) -> ExpertOutput {
        ExpertOutput {
            expert_name: "det".into(),
            kind: OutputKind::Boxes,
            elements: bs
                .iter()
                .map(|&b| ExpertElement {
                    geometry: Geometry::Box(b),
                    label: None,
                    score: 1.0,
                })
                .collect(),
        }
    }

    #[test]
    fn gray_full_box_is_identity() {
        let img = gradient(32, 32);
        let r = render(&img, &boxes(&[NormBox::full()]), &RenderStyle::gray()).unwrap();
        assert_eq!(r.image, img);
        assert!(!r.no_op);
    }

    #[test]
    fn gray_half_box() {
        let img = gradient(32, 32);
        let half = NormBox::new(0.0, 0.0, 0.5, 1.0).unwrap();
        let r = render(&img, &boxes(&[half]), &RenderStyle::gray()).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                if x < 16 {
                    assert_eq!(r.image.get(x, y), img.get(x, y));
                } else {
                    assert_eq!(r.image.get(x, y), [128; 3]);
                }
            }
        }
    }

    #[test]
    fn highlight_changes_only_the_outline_band() {
        // no pure-red pixels in the source, so every band pixel changes
        let img = gradient(40, 40);
        let b = NormBox::new(0.25, 0.25, 0.75, 0.625).unwrap();
        let style = RenderStyle::highlight();
        let r = render(&img, &boxes(&[b]), &style).unwrap();
        let px = b.to_pixels(40, 40);
        let (bw, bh, t) = ((px.x1 - px.x0) as usize, (px.y1 - px.y0) as usize, 3usize);
        let band_area = bw * bh - (bw - 2 * t) * (bh - 2 * t);
        let mut changed = 0;
        for y in 0..40 {
            for x in 0..40 {
                if r.image.get(x, y) != img.get(x, y) {
                    changed += 1;
                    assert_eq!(r.image.get(x, y), [255, 0, 0]);
                    assert!(px.contains(x, y));
                }
            }
        }
        assert_eq!(changed, band_area);
    }

    #[test]
    fn blur_keeps_interior_and_changes_exterior() {
        let img = gradient(32, 32);
        let b = NormBox::new(0.25, 0.25, 0.75, 0.75).unwrap();
        let r = render(&img, &boxes(&[b]), &RenderStyle::blur()).unwrap();
        let px = b.to_pixels(32, 32);
        let mut exterior_changed = 0;
        for y in 0..32 {
            for x in 0..32 {
                if px.contains(x, y) {
                    assert_eq!(r.image.get(x, y), img.get(x, y));
                } else if r.image.get(x, y) != img.get(x, y) {
                    exterior_changed += 1;
                }
            }
        }
        assert!(exterior_changed > 0);
    }

    #[test]
    fn box_blur_of_constant_is_constant() {
        let img = Image::filled("c", 20, 20, [9, 99, 199]).unwrap();
        assert!(box_blur(&img, 3).iter().all(|p| *p == [9, 99, 199]));
    }

    #[test]
    fn overlapping_boxes_render_as_union() {
        let img = gradient(32, 32);
        let a = NormBox::new(0.0, 0.0, 0.5, 0.5).unwrap();
        let b = NormBox::new(0.25, 0.25, 0.75, 0.75).unwrap();
        let mut mask = Bitmask::from_rect(32, 32, a.to_pixels(32, 32));
        mask.union_with(&Bitmask::from_rect(32, 32, b.to_pixels(32, 32)));
        let seg = ExpertOutput {
            expert_name: "seg".into(),
            kind: OutputKind::Segments,
            elements: vec![ExpertElement {
                geometry: Geometry::Mask(mask),
                label: None,
                score: 1.0,
            }],
        };
        for style in [RenderStyle::gray(), RenderStyle::blur()] {
            let by_boxes = render(&img, &boxes(&[a, b]), &style).unwrap();
            let by_union = render(&img, &seg, &style).unwrap();
            assert_eq!(by_boxes.image, by_union.image);
        }
    }

    #[test]
    fn empty_output_is_no_op() {
        let img = gradient(16, 16);
        let r = render(&img, &boxes(&[]), &RenderStyle::highlight()).unwrap();
        assert!(r.no_op);
        assert_eq!(r.image, img);
    }

    #[test]
    fn depth_region_keeps_nearest_fraction() {
        let values: Vec<f64> = (0..100).map(|i| i as f64 / 99.0).collect();
        let d = DepthMap {
            width: 10,
            height: 10,
            values,
        };
        let region = depth_region(&d, 0.4);
        assert_eq!(region.count(), 40);
        assert!(region.get(9, 3) && !region.get(0, 4));
    }

    #[test]
    fn style_validation() {
        let s = RenderStyle {
            blur_radius: 0,
            ..RenderStyle::default()
        };
        assert!(s.validate().is_err());
        let s = RenderStyle {
            depth_keep_fraction: 1.0,
            ..RenderStyle::default()
        };
        assert!(s.validate().is_err());
    }
}
