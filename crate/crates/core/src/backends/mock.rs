//! Deterministic backends driven by a [`SceneSpec`] world.
//!
//! Each mock is a pure function of its inputs and the fixture world, so a full
//! pipeline run has an analytic oracle: the scene's truth table.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use ndarray::Array2;

use super::scene::{SceneObject, SceneSpec};
use super::text::{content_words, normalize, stable_hash, tokens};
use super::{
    Backend, BackendError, BackendResult, BackendSuite, Decomposer, Expert, Grounder, Image,
    ImageEmbedder, TextEncoder, VisionLanguageModel,
};
use crate::experts::{DepthMap, ExpertElement, ExpertOutput, Geometry, OutputKind};

pub const MOCK_VERSION: &str = "mock-1";
pub const CAPTION_PROMPT: &str = "Describe the image.";
pub const UNKNOWN_ANSWER: &str = "unknown";

/// Labels the standard suite's detector recognizes; other objects need the segmenter.
pub const DETECTOR_CLASSES: &[&str] = &[
    "bicycle", "bird", "boat", "bus", "car", "cat", "dog", "horse", "man", "person", "train",
    "truck", "woman",
];

/// The fixture world: scenes keyed by image id.
#[derive(Debug, Clone, Default)]
pub struct MockWorld {
    scenes: BTreeMap<String, SceneSpec>,
}

impl MockWorld {
    pub fn new(scenes: impl IntoIterator<Item = SceneSpec>) -> Self {
        Self {
            scenes: scenes.into_iter().map(|s| (s.id.clone(), s)).collect(),
        }
    }

    pub fn insert(&mut self, scene: SceneSpec) {
        self.scenes.insert(scene.id.clone(), scene);
    }

    pub fn scene(&self, id: &str) -> Option<&SceneSpec> {
        self.scenes.get(id)
    }

    pub fn scenes(&self) -> impl Iterator<Item = &SceneSpec> {
        self.scenes.values()
    }

    fn lookup(&self, backend: &str, image: &Image) -> BackendResult<&SceneSpec> {
        self.scene(image.id())
            .ok_or_else(|| BackendError::rejected(backend, format!("no scene `{}`", image.id())))
    }

    /// Mock handles for every role, with the three standard experts.
    pub fn suite(self: &Arc<Self>) -> BackendSuite {
        let encoder: Arc<dyn TextEncoder> = Arc::new(HashedBowEncoder::default());
        BackendSuite {
            decomposer: Arc::new(MockDecomposer::with_world(self)),
            grounder: Arc::new(MockGrounder::new(Arc::clone(self))),
            vlm: Arc::new(MockVlm::new(Arc::clone(self))),
            encoder: Arc::clone(&encoder),
            experts: vec![
                Arc::new(MockDetector::detecting(Arc::clone(self), DETECTOR_CLASSES)),
                Arc::new(MockSegmenter::new(Arc::clone(self))),
                Arc::new(MockDepth::new(Arc::clone(self))),
            ],
            image_embedder: Some(Arc::new(SceneDigestEmbedder::new(Arc::clone(self), encoder))),
        }
    }
}

const BASE_VOCABULARY: &[&str] = &[
    "apple", "ball", "banana", "bench", "bicycle", "bird", "black", "blue", "boat", "book",
    "bottle", "box", "brown", "bus", "cake", "car", "cat", "chair", "clock", "clothing", "color",
    "cup", "dog", "feet", "flower", "green", "hat", "horse", "kite", "lamp", "man", "orange",
    "person", "pink", "plate", "purple", "red", "shirt", "shoes", "sign", "table", "train",
    "tree", "truck", "umbrella", "vase", "white", "woman", "yellow",
];

/// Keeps content words that appear in a fixed visual vocabulary, plus a small
/// table of concept expansions.
#[derive(Debug, Clone)]
pub struct MockDecomposer {
    vocabulary: BTreeSet<String>,
    expansions: BTreeMap<String, Vec<String>>,
}

impl Default for MockDecomposer {
    fn default() -> Self {
        let expansions = [
            ("feet", vec!["shoes"]),
            ("wearing", vec!["clothing"]),
            ("riding", vec!["person"]),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_owned(), v.into_iter().map(str::to_owned).collect()))
        .collect();
        Self {
            vocabulary: BASE_VOCABULARY.iter().map(|s| (*s).to_owned()).collect(),
            expansions,
        }
    }
}

impl MockDecomposer {
    /// Base vocabulary extended with every label and attribute in the world.
    pub fn with_world(world: &MockWorld) -> Self {
        let mut d = Self::default();
        for scene in world.scenes() {
            for obj in &scene.objects {
                d.vocabulary.extend(tokens(&obj.label));
                d.vocabulary.extend(obj.attributes.iter().flat_map(|a| tokens(a)));
            }
        }
        d
    }
}

impl Backend for MockDecomposer {
    fn name(&self) -> &str {
        "mock-decomposer"
    }
    fn version(&self) -> &str {
        MOCK_VERSION
    }
}

impl Decomposer for MockDecomposer {
    fn decompose(&self, text: &str) -> BackendResult<Vec<String>> {
        let mut out: Vec<String> = Vec::new();
        let mut push = |t: &str| {
            if !out.iter().any(|o| o == t) {
                out.push(t.to_owned());
            }
        };
        for word in content_words(text) {
            if self.vocabulary.contains(&word) {
                push(&word);
            }
            if let Some(extra) = self.expansions.get(&word) {
                extra.iter().for_each(|e| push(e));
            }
        }
        Ok(out)
    }
}

/// Box blob per matching object: 1 inside, `exp(-d²/2σ²)` outside at distance `d`.
#[derive(Debug, Clone)]
pub struct MockGrounder {
    world: Arc<MockWorld>,
    pub sigma: f64,
}

impl MockGrounder {
    pub fn new(world: Arc<MockWorld>) -> Self {
        Self { world, sigma: 1.0 }
    }
}

impl Backend for MockGrounder {
    fn name(&self) -> &str {
        "mock-grounder"
    }
    fn version(&self) -> &str {
        MOCK_VERSION
    }
}

/// Closed-form blob value of one object at pixel `(x, y)`.
pub fn blob_value(obj: &SceneObject, width: u32, height: u32, sigma: f64, x: u32, y: u32) -> f64 {
    let d = obj.rect(width, height).distance(x, y);
    if d == 0.0 {
        1.0
    } else {
        (-(d * d) / (2.0 * sigma * sigma)).exp()
    }
}

impl Grounder for MockGrounder {
    fn ground(&self, image: &Image, query: &str) -> BackendResult<Array2<f64>> {
        let scene = self.world.lookup(self.name(), image)?;
        let (h, w) = image.shape();
        let mut map = Array2::<f64>::zeros((h, w));
        for obj in scene.objects.iter().filter(|o| o.matches(query)) {
            for ((y, x), v) in map.indexed_iter_mut() {
                let b = blob_value(obj, image.width(), image.height(), self.sigma, x as u32, y as u32);
                *v = v.max(b).clamp(0.0, 1.0);
            }
        }
        Ok(map)
    }
}

/// Fixture-driven VLM.
///
/// Answers from the scene truth table, says `unknown` once at least
/// `occlusion_threshold` of a target object's pixels are gone, and, for questions
/// carrying a prior bias, answers the bias unless an outline in `cue_color`
/// surrounds a target object.
#[derive(Debug, Clone)]
pub struct MockVlm {
    world: Arc<MockWorld>,
    pub occlusion_threshold: f64,
    pub cue_color: [u8; 3],
    pub honor_bias: bool,
}

impl MockVlm {
    pub fn new(world: Arc<MockWorld>) -> Self {
        Self {
            world,
            occlusion_threshold: 0.5,
            cue_color: [255, 0, 0],
            honor_bias: true,
        }
    }

    /// Fraction of the object's footprint no longer showing the object (or a cue outline).
    pub fn occluded_fraction(&self, image: &Image, obj: &SceneObject) -> f64 {
        let rect = obj.rect(image.width(), image.height());
        let color = obj.fill_color();
        let hidden = rect
            .pixels()
            .filter(|&(x, y)| {
                let p = image.get(x, y);
                p != color && p != self.cue_color
            })
            .count();
        hidden as f64 / rect.area() as f64
    }

    /// Whether at least half of the object's outermost pixel ring shows the cue color.
    pub fn has_cue(&self, image: &Image, obj: &SceneObject) -> bool {
        let r = obj.rect(image.width(), image.height());
        let ring: Vec<(u32, u32)> = r
            .pixels()
            .filter(|&(x, y)| x == r.x0 || y == r.y0 || x + 1 == r.x1 || y + 1 == r.y1)
            .collect();
        let lit = ring
            .iter()
            .filter(|&&(x, y)| image.get(x, y) == self.cue_color)
            .count();
        2 * lit >= ring.len()
    }

    fn caption(&self, image: &Image, scene: &SceneSpec) -> String {
        let visible: Vec<String> = scene
            .objects
            .iter()
            .filter(|o| self.occluded_fraction(image, o) < self.occlusion_threshold)
            .map(|o| {
                let mut words = vec!["a".to_owned()];
                words.extend(o.attributes.iter().cloned());
                words.push(o.label.clone());
                words.join(" ")
            })
            .collect();
        if visible.is_empty() {
            "an empty scene".to_owned()
        } else {
            visible.join(" and ")
        }
    }
}

impl Backend for MockVlm {
    fn name(&self) -> &str {
        "mock-vlm"
    }
    fn version(&self) -> &str {
        MOCK_VERSION
    }
}

impl VisionLanguageModel for MockVlm {
    fn answer(&self, image: &Image, question: &str) -> BackendResult<String> {
        let scene = self.world.lookup(self.name(), image)?;
        if normalize(question) == normalize(CAPTION_PROMPT) {
            return Ok(self.caption(image, scene));
        }
        let Some(q) = scene.question_by_text(question) else {
            return Ok(UNKNOWN_ANSWER.to_owned());
        };
        let targets: Vec<&SceneObject> = q.targets.iter().filter_map(|t| scene.object(t)).collect();
        if let Some(bias) = q.bias.as_ref().filter(|_| self.honor_bias) {
            if !targets.iter().any(|o| self.has_cue(image, o)) {
                return Ok(bias.clone());
            }
        }
        if targets
            .iter()
            .any(|o| self.occluded_fraction(image, o) >= self.occlusion_threshold)
        {
            return Ok(UNKNOWN_ANSWER.to_owned());
        }
        Ok(scene
            .answer(&q.id)
            .map(str::to_owned)
            .unwrap_or_else(|| UNKNOWN_ANSWER.to_owned()))
    }
}

/// Hashed bag-of-words encoder: token counts in `dim` buckets, L2-normalized.
#[derive(Debug, Clone)]
pub struct HashedBowEncoder {
    dim: usize,
}

impl Default for HashedBowEncoder {
    fn default() -> Self {
        Self { dim: 256 }
    }
}

impl HashedBowEncoder {
    pub fn new(dim: usize) -> Self {
        Self { dim: dim.max(1) }
    }

    pub fn bucket(&self, token: &str) -> usize {
        (stable_hash(token) % self.dim as u64) as usize
    }
}

impl Backend for HashedBowEncoder {
    fn name(&self) -> &str {
        "hashed-bow"
    }
    fn version(&self) -> &str {
        MOCK_VERSION
    }
}

impl TextEncoder for HashedBowEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> BackendResult<Vec<f64>> {
        let mut v = vec![0.0; self.dim];
        for t in tokens(text) {
            v[self.bucket(&t)] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(v)
    }
}

fn detected<'a>(scene: &'a SceneSpec, set: &'a Option<BTreeSet<String>>) -> impl Iterator<Item = &'a SceneObject> {
    scene
        .objects
        .iter()
        .filter(move |o| set.as_ref().is_none_or(|s| s.contains(&o.label)))
}

/// Detector expert: one box per object whose label it can detect.
#[derive(Debug, Clone)]
pub struct MockDetector {
    world: Arc<MockWorld>,
    pub detectable: Option<BTreeSet<String>>,
}

impl MockDetector {
    pub fn new(world: Arc<MockWorld>) -> Self {
        Self {
            world,
            detectable: None,
        }
    }

    pub fn detecting(world: Arc<MockWorld>, labels: &[&str]) -> Self {
        Self {
            world,
            detectable: Some(labels.iter().map(|s| (*s).to_owned()).collect()),
        }
    }
}

impl Backend for MockDetector {
    fn name(&self) -> &str {
        "mock-detector"
    }
    fn version(&self) -> &str {
        MOCK_VERSION
    }
}

impl Expert for MockDetector {
    fn run(&self, image: &Image) -> BackendResult<ExpertOutput> {
        let scene = self.world.lookup(self.name(), image)?;
        Ok(ExpertOutput {
            expert_name: self.name().to_owned(),
            kind: OutputKind::Boxes,
            elements: detected(scene, &self.detectable)
                .map(|o| ExpertElement {
                    geometry: Geometry::Box(o.bbox),
                    label: Some(o.label.clone()),
                    score: 1.0,
                })
                .collect(),
        })
    }
}

/// Segmenter expert: rectangular masks equal to the object boxes.
#[derive(Debug, Clone)]
pub struct MockSegmenter {
    world: Arc<MockWorld>,
}

impl MockSegmenter {
    pub fn new(world: Arc<MockWorld>) -> Self {
        Self { world }
    }
}

impl Backend for MockSegmenter {
    fn name(&self) -> &str {
        "mock-segmenter"
    }
    fn version(&self) -> &str {
        MOCK_VERSION
    }
}

impl Expert for MockSegmenter {
    fn run(&self, image: &Image) -> BackendResult<ExpertOutput> {
        let scene = self.world.lookup(self.name(), image)?;
        let (w, h) = (image.width(), image.height());
        Ok(ExpertOutput {
            expert_name: self.name().to_owned(),
            kind: OutputKind::Segments,
            elements: scene
                .objects
                .iter()
                .map(|o| ExpertElement {
                    geometry: Geometry::Mask(super::Bitmask::from_rect(w, h, o.rect(w, h))),
                    label: Some(o.label.clone()),
                    score: 1.0,
                })
                .collect(),
        })
    }
}

/// Depth expert: background recedes from 0.5 (bottom row) to 1.0 (top row);
/// objects sit at their own depth. An empty scene yields no map.
#[derive(Debug, Clone)]
pub struct MockDepth {
    world: Arc<MockWorld>,
}

impl MockDepth {
    pub fn new(world: Arc<MockWorld>) -> Self {
        Self { world }
    }
}

impl Backend for MockDepth {
    fn name(&self) -> &str {
        "mock-depth"
    }
    fn version(&self) -> &str {
        MOCK_VERSION
    }
}

impl Expert for MockDepth {
    fn run(&self, image: &Image) -> BackendResult<ExpertOutput> {
        let scene = self.world.lookup(self.name(), image)?;
        if scene.objects.is_empty() {
            return Ok(ExpertOutput::empty(self.name(), OutputKind::Depth));
        }
        let (w, h) = (image.width(), image.height());
        let mut values = Vec::with_capacity((w * h) as usize);
        for y in 0..h {
            for x in 0..w {
                let ground = 1.0 - 0.5 * f64::from(y) / f64::from(h - 1);
                let v = scene
                    .objects
                    .iter()
                    .filter(|o| o.rect(w, h).contains(x, y))
                    .map(|o| o.depth.clamp(0.0, 1.0))
                    .fold(ground, f64::min);
                values.push(v);
            }
        }
        Ok(ExpertOutput {
            expert_name: self.name().to_owned(),
            kind: OutputKind::Depth,
            elements: vec![ExpertElement {
                geometry: Geometry::Depth(DepthMap {
                    width: w,
                    height: h,
                    values,
                }),
                label: None,
                score: 1.0,
            }],
        })
    }
}

/// Embeds the scene's textual digest with a text encoder.
pub struct SceneDigestEmbedder {
    world: Arc<MockWorld>,
    encoder: Arc<dyn TextEncoder>,
}

impl SceneDigestEmbedder {
    pub fn new(world: Arc<MockWorld>, encoder: Arc<dyn TextEncoder>) -> Self {
        Self { world, encoder }
    }
}

impl Backend for SceneDigestEmbedder {
    fn name(&self) -> &str {
        "scene-digest"
    }
    fn version(&self) -> &str {
        MOCK_VERSION
    }
}

impl ImageEmbedder for SceneDigestEmbedder {
    fn embed_image(&self, image: &Image) -> BackendResult<Vec<f64>> {
        let scene = self.world.lookup(self.name(), image)?;
        self.encoder.embed(&scene.digest())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::NormBox;
    use crate::masking::{apply_mask, Fill, Mask, MaskKind};
    use crate::relevance::RegionGrid;

    fn car_scene() -> SceneSpec {
        SceneSpec::from_toml(
            r#"
id = "car"
width = 64
height = 64
[[objects]]
label = "car"
box = [0.25, 0.25, 0.625, 0.625]
attributes = ["red"]
[[questions]]
id = "color"
text = "What color is the car?"
targets = ["car"]
[[questions]]
id = "biased"
text = "What color is the car really?"
targets = ["car"]
bias = "blue"
[truth]
color = "red"
biased = "red"
"#,
        )
        .unwrap()
    }

    fn world() -> Arc<MockWorld> {
        Arc::new(MockWorld::new([car_scene()]))
    }

    #[test]
    fn decomposer_keeps_vocabulary_words() {
        let d = MockDecomposer::default();
        assert_eq!(d.decompose("Is there a red car?").unwrap(), vec!["red", "car"]);
        let feet = d.decompose("What is the man wearing on his feet?").unwrap();
        for t in ["shoes", "feet", "clothing"] {
            assert!(feet.contains(&t.to_owned()), "{feet:?}");
        }
        assert!(d.decompose("").unwrap().is_empty());
    }

    #[test]
    fn grounder_blob_at_probe_pixels() {
        let w = world();
        let g = MockGrounder::new(Arc::clone(&w));
        let img = car_scene().render();
        let map = g.ground(&img, "car").unwrap();
        // box covers pixels [16, 40) on both axes; sigma = 1
        assert_eq!(map[[20, 20]], 1.0);
        assert_eq!(map[[39, 39]], 1.0);
        assert!((map[[20, 15]] - (-0.5f64).exp()).abs() < 1e-15);
        assert!((map[[13, 13]] - (-(18.0f64) / 2.0).exp()).abs() < 1e-15);
        let none = g.ground(&img, "horse").unwrap();
        assert!(none.iter().all(|&v| v == 0.0));
        assert!(map.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(map.dim(), (64, 64));
    }

    #[test]
    fn vlm_answers_truth_and_unknown_under_occlusion() {
        let w = world();
        let vlm = MockVlm::new(Arc::clone(&w));
        let img = car_scene().render();
        assert_eq!(vlm.answer(&img, "What color is the car?").unwrap(), "red");

        // box is 24x24 px; gray out the first 60% of its pixels
        let grid = RegionGrid::new(16, 16).unwrap();
        let mut occluded = img.clone();
        let rect = car_scene().objects[0].rect(64, 64);
        let limit = (0.6 * rect.area() as f64).round() as usize;
        for (i, (x, y)) in rect.pixels().enumerate() {
            if i < limit {
                occluded.put(x, y, [128; 3]);
            }
        }
        let obj = &car_scene().objects[0];
        assert_eq!(vlm.occluded_fraction(&occluded, obj), limit as f64 / rect.area() as f64);
        assert_eq!(vlm.answer(&occluded, "What color is the car?").unwrap(), "unknown");

        // 40% occluded is still answerable
        let mut partial = img.clone();
        for (i, (x, y)) in rect.pixels().enumerate() {
            if i < (0.4 * rect.area() as f64) as usize {
                partial.put(x, y, [128; 3]);
            }
        }
        assert_eq!(vlm.answer(&partial, "What color is the car?").unwrap(), "red");

        let one = Mask {
            kind: MaskKind::Top,
            regions: vec![0],
            rho: 0.0,
            seed: 0,
        };
        let corner = apply_mask(&img, &one, &grid, Fill::default()).unwrap();
        assert_eq!(vlm.answer(&corner, "What color is the car?").unwrap(), "red");
    }

    #[test]
    fn biased_vlm_needs_highlight() {
        use crate::experts::{render, RenderStyle};
        let w = world();
        let vlm = MockVlm::new(Arc::clone(&w));
        let img = car_scene().render();
        let q = "What color is the car really?";
        assert_eq!(vlm.answer(&img, q).unwrap(), "blue");
        let det = MockDetector::new(Arc::clone(&w)).run(&img).unwrap();
        let lit = render(&img, &det, &RenderStyle::highlight()).unwrap().image;
        assert_eq!(vlm.answer(&lit, q).unwrap(), "red");
        let grayed = render(&img, &det, &RenderStyle::gray()).unwrap().image;
        assert_eq!(vlm.answer(&grayed, q).unwrap(), "blue");
    }

    #[test]
    fn vlm_caption_lists_visible_objects() {
        let w = world();
        let vlm = MockVlm::new(w);
        assert_eq!(vlm.answer(&car_scene().render(), CAPTION_PROMPT).unwrap(), "a red car");
    }

    #[test]
    fn encoder_unit_norm_and_empty_canonical() {
        let e = HashedBowEncoder::default();
        let v = e.embed("a red car").unwrap();
        let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
        assert!(e.embed("").unwrap().iter().all(|&x| x == 0.0));
        assert_eq!(e.embed("same text").unwrap(), e.embed("same text").unwrap());
    }

    #[test]
    fn experts_follow_scene() {
        let w = world();
        let img = car_scene().render();
        let det = MockDetector::new(Arc::clone(&w)).run(&img).unwrap();
        assert_eq!(det.elements.len(), 1);
        assert_eq!(det.elements[0].geometry, Geometry::Box(NormBox::new(0.25, 0.25, 0.625, 0.625).unwrap()));
        let none = MockDetector::detecting(Arc::clone(&w), &["dog"]).run(&img).unwrap();
        assert!(none.elements.is_empty());
        let seg = MockSegmenter::new(Arc::clone(&w)).run(&img).unwrap();
        seg.validate(&img).unwrap();
        let depth = MockDepth::new(Arc::clone(&w)).run(&img).unwrap();
        depth.validate(&img).unwrap();

        let mut empty = car_scene();
        empty.id = "empty".into();
        empty.objects.clear();
        empty.questions.clear();
        empty.truth.clear();
        let ew = Arc::new(MockWorld::new([empty.clone()]));
        let eimg = empty.render();
        assert!(MockDetector::new(Arc::clone(&ew)).run(&eimg).unwrap().elements.is_empty());
        assert!(MockSegmenter::new(Arc::clone(&ew)).run(&eimg).unwrap().elements.is_empty());
        assert!(MockDepth::new(ew).run(&eimg).unwrap().elements.is_empty());
    }

    #[test]
    fn mocks_reject_unknown_images() {
        let w = world();
        let stranger = Image::filled("nobody", 32, 32, [0; 3]).unwrap();
        assert!(MockVlm::new(Arc::clone(&w)).answer(&stranger, "q").is_err());
        assert!(MockGrounder::new(w).ground(&stranger, "car").is_err());
    }
}
