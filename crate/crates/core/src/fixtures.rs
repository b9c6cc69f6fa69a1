//! The 20-scene mock suite: half the scenes carry a prior bias on their
//! question, half are answered from the image alone.

use std::path::Path;

use crate::backends::mock::{HashedBowEncoder, UNKNOWN_ANSWER};
use crate::backends::scene::{Background, SceneObject, SceneQuestion, SceneSpec};
use crate::backends::NormBox;
use crate::error::{Error, Result};
use crate::experts::RenderStyle;
use crate::pipeline::DnRConfig;

pub const SUITE_SIZE: usize = 20;

const COLORS: &[&str] = &["red", "blue", "green", "yellow", "white", "black", "brown", "orange", "purple", "pink"];
const LABELS: &[&str] = &["car", "dog", "cat", "ball", "bus", "chair", "cup", "bird", "boat", "kite"];

/// Box on the 16-cell lattice, in cells.
fn cell_box(cx: u32, cy: u32, w: u32, h: u32) -> NormBox {
    let f = |v: u32| f64::from(v) / 16.0;
    NormBox::new(f(cx), f(cy), f(cx + w), f(cy + h)).expect("lattice box lies in the unit square")
}

/// Scene `i` of the suite. Even indices are biased.
pub fn suite_scene(i: usize) -> SceneSpec {
    let enc = HashedBowEncoder::default();
    let biased = i.is_multiple_of(2);
    let label = LABELS[i % LABELS.len()];
    let color = COLORS[(3 * i + 1) % COLORS.len()];
    let other_label = LABELS[(i + 3) % LABELS.len()];
    let other_color = COLORS[(3 * i + 5) % COLORS.len()];
    // Target 6x6 cells; distractor 3x3 cells in the opposite half.
    let left = (i / 2).is_multiple_of(2);
    let (tx, ty) = if left { (1 + (i % 3) as u32, 2 + (i % 4) as u32) } else { (8 + (i % 3) as u32, 1 + (i % 5) as u32) };
    let (ox, oy) = if left { (12, 11) } else { (1, 12) };
    let bias = biased.then(|| {
        COLORS
            .iter()
            .find(|c| {
                **c != color
                    && **c != other_color
                    && enc.bucket(c) != enc.bucket(color)
                    && enc.bucket(c) != enc.bucket(UNKNOWN_ANSWER)
            })
            .expect("a free bias color")
            .to_string()
    });
    let text = if i.is_multiple_of(3) {
        format!("What color is the {label}?")
    } else {
        format!("Which color is the {label} in the picture?")
    };
    SceneSpec {
        id: format!("scene{i:02}"),
        width: 64,
        height: 64,
        background: Background::default(),
        objects: vec![
            SceneObject {
                label: label.to_owned(),
                bbox: cell_box(tx, ty, 6, 6),
                attributes: vec![color.to_owned()],
                color: None,
                depth: 0.2,
            },
            SceneObject {
                label: other_label.to_owned(),
                bbox: cell_box(ox, oy, 3, 3),
                attributes: vec![other_color.to_owned()],
                color: None,
                depth: 0.3,
            },
        ],
        questions: vec![SceneQuestion {
            id: "q1".to_owned(),
            text,
            targets: vec![label.to_owned()],
            bias,
        }],
        truth: [("q1".to_owned(), color.to_owned())].into_iter().collect(),
    }
}

/// Run configuration the suite is meant for: highlight rendering, everything
/// else at defaults.
pub fn suite_config() -> DnRConfig {
    DnRConfig {
        style: RenderStyle::highlight(),
        ..DnRConfig::default()
    }
}

pub fn mock_suite() -> Vec<SceneSpec> {
    (0..SUITE_SIZE).map(suite_scene).collect()
}

pub fn is_biased(scene: &SceneSpec) -> bool {
    scene.questions.iter().any(|q| q.bias.is_some())
}

/// Write the suite as one TOML file per scene.
pub fn write_mock_suite(dir: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    mock_suite()
        .iter()
        .map(|s| {
            let p = dir.join(format!("{}.toml", s.id));
            std::fs::write(&p, s.to_toml()).map_err(|e| Error::io(&p, e))?;
            Ok(p)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::scene::named_color;

    #[test]
    fn suite_is_valid_and_balanced() {
        let suite = mock_suite();
        assert_eq!(suite.len(), SUITE_SIZE);
        assert_eq!(suite.iter().filter(|s| is_biased(s)).count(), SUITE_SIZE / 2);
        for s in &suite {
            s.validate().unwrap();
            let [a, b] = [&s.objects[0], &s.objects[1]];
            let rb = b.rect(64, 64);
            assert!(a.rect(64, 64).pixels().all(|(x, y)| !rb.contains(x, y)), "{} objects overlap", s.id);
            assert_ne!(a.fill_color(), b.fill_color());
            assert!(named_color(&a.attributes[0]).is_some());
            if let Some(bias) = &s.questions[0].bias {
                assert_ne!(bias, &s.truth["q1"]);
                assert!(s.objects.iter().all(|o| !o.attributes.contains(bias)));
            }
        }
    }
}
