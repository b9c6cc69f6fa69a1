//! Scene fixtures: the ground-truth world that drives every mock backend.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::image::{Image, NormBox, PixelRect};
use crate::error::{Error, Result};

/// One object placed in a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneObject {
    pub label: String,
    #[serde(rename = "box")]
    pub bbox: NormBox,
    #[serde(default)]
    pub attributes: Vec<String>,
    /// Explicit fill color; otherwise derived from a color attribute or the label.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color: Option<[u8; 3]>,
    /// Normalized depth, 0 = nearest.
    #[serde(default = "default_object_depth")]
    pub depth: f64,
}

fn default_object_depth() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Background {
    pub color: [u8; 3],
}

impl Default for Background {
    fn default() -> Self {
        Self {
            color: [90, 140, 110],
        }
    }
}

/// A question posed about a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneQuestion {
    pub id: String,
    pub text: String,
    /// Labels of the objects whose visibility the answer depends on.
    #[serde(default)]
    pub targets: Vec<String>,
    /// Prior-driven wrong answer the mock VLM gives unless its attention is steered.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub id: String,
    #[serde(default = "default_side")]
    pub width: u32,
    #[serde(default = "default_side")]
    pub height: u32,
    #[serde(default)]
    pub background: Background,
    #[serde(default)]
    pub objects: Vec<SceneObject>,
    #[serde(default)]
    pub questions: Vec<SceneQuestion>,
    /// question id → ground-truth answer.
    #[serde(default)]
    pub truth: BTreeMap<String, String>,
}

fn default_side() -> u32 {
    64
}

const NAMED_COLORS: &[(&str, [u8; 3])] = &[
    ("red", [200, 40, 40]),
    ("blue", [40, 60, 200]),
    ("green", [40, 170, 60]),
    ("yellow", [225, 205, 40]),
    ("white", [240, 240, 240]),
    ("black", [20, 20, 20]),
    ("brown", [120, 80, 40]),
    ("orange", [235, 135, 30]),
    ("purple", [130, 50, 160]),
    ("pink", [235, 150, 190]),
];

pub fn named_color(name: &str) -> Option<[u8; 3]> {
    NAMED_COLORS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, c)| *c)
}

impl SceneObject {
    pub fn fill_color(&self) -> [u8; 3] {
        if let Some(c) = self.color {
            return c;
        }
        if let Some(c) = self.attributes.iter().find_map(|a| named_color(a)) {
            return c;
        }
        // label-derived, kept away from the mask fill and the outline color
        let h = super::text::stable_hash(&self.label);
        [
            40 + (h & 0x7f) as u8,
            40 + ((h >> 8) & 0x3f) as u8 + 100,
            40 + ((h >> 16) & 0x7f) as u8,
        ]
    }

    pub fn rect(&self, width: u32, height: u32) -> PixelRect {
        self.bbox.to_pixels(width, height)
    }

    /// Whether a query term names this object or one of its attributes.
    pub fn matches(&self, term: &str) -> bool {
        let term = term.trim().to_lowercase();
        self.label.to_lowercase() == term
            || self.attributes.iter().any(|a| a.to_lowercase() == term)
            || self
                .label
                .to_lowercase()
                .split_whitespace()
                .any(|w| w == term)
    }
}

impl SceneSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SceneSpec = toml::from_str(text).map_err(|e| Error::parse("scene", e))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Parse { message, .. } => Error::parse(path.display().to_string(), message),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.trim().is_empty() {
            return Err(Error::invalid("scene id is empty"));
        }
        if self.width < super::image::MIN_SIDE || self.height < super::image::MIN_SIDE {
            return Err(Error::invalid(format!(
                "scene {} is smaller than the 16x16 minimum",
                self.id
            )));
        }
        for obj in &self.objects {
            if obj.label.trim().is_empty() {
                return Err(Error::invalid(format!("scene {} has an unlabeled object", self.id)));
            }
            NormBox::new(obj.bbox.x0, obj.bbox.y0, obj.bbox.x1, obj.bbox.y1)?;
        }
        for q in &self.questions {
            if !self.truth.contains_key(&q.id) {
                return Err(Error::invalid(format!(
                    "scene {} question {} has no truth entry",
                    self.id, q.id
                )));
            }
            if let Some(t) = q.targets.iter().find(|t| self.object(t).is_none()) {
                return Err(Error::invalid(format!(
                    "scene {} question {} targets unknown object {t}",
                    self.id, q.id
                )));
            }
        }
        Ok(())
    }

    pub fn object(&self, label: &str) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.label == label)
    }

    pub fn question_by_text(&self, text: &str) -> Option<&SceneQuestion> {
        let key = super::text::normalize(text);
        self.questions
            .iter()
            .find(|q| super::text::normalize(&q.text) == key)
    }

    pub fn answer(&self, question_id: &str) -> Option<&str> {
        self.truth.get(question_id).map(String::as_str)
    }

    /// Rasterize: background fill, then objects in list order.
    pub fn render(&self) -> Image {
        let mut img = Image::filled(&self.id, self.width, self.height, self.background.color)
            .expect("validated size");
        for obj in &self.objects {
            let color = obj.fill_color();
            for (x, y) in obj.rect(self.width, self.height).pixels() {
                img.put(x, y, color);
            }
        }
        img
    }

    /// Canonical textual digest of the scene content, used as an image stand-in for featurization.
    pub fn digest(&self) -> String {
        let mut parts: Vec<String> = self
            .objects
            .iter()
            .map(|o| {
                let mut words = o.attributes.clone();
                words.push(o.label.clone());
                words.join(" ")
            })
            .collect();
        parts.sort();
        parts.join(", ")
    }
}
