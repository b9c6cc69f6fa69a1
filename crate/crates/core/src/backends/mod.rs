//! Adapter interfaces for the external models the pipeline drives.
//!
//! Every model is reached through one of the traits below. [`mock`] provides
//! deterministic implementations backed by a [`SceneSpec`] world and
//! [`remote`] forwards calls to a separate process over a line protocol.

pub mod image;
pub mod mock;
pub mod remote;
pub mod scene;
pub mod text;

use std::collections::BTreeMap;
use std::sync::{Arc, Condvar, Mutex};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::experts::ExpertOutput;
pub use self::image::{Bitmask, Image, NormBox, PixelRect};
pub use scene::{Background, SceneObject, SceneQuestion, SceneSpec};

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum BackendError {
    #[error("backend {backend} unavailable: {reason}")]
    Unavailable { backend: String, reason: String },
    #[error("backend {backend} timed out")]
    Timeout { backend: String },
    #[error("backend {backend} protocol error: {reason}")]
    Protocol { backend: String, reason: String },
    #[error("backend {backend} rejected input: {reason}")]
    Rejected { backend: String, reason: String },
}

impl BackendError {
    pub fn unavailable(backend: &str, reason: impl Into<String>) -> Self {
        Self::Unavailable {
            backend: backend.to_owned(),
            reason: reason.into(),
        }
    }

    pub fn rejected(backend: &str, reason: impl Into<String>) -> Self {
        Self::Rejected {
            backend: backend.to_owned(),
            reason: reason.into(),
        }
    }
}

pub type BackendResult<T> = std::result::Result<T, BackendError>;

/// Identity and concurrency contract common to every backend handle.
pub trait Backend: Send + Sync {
    fn name(&self) -> &str;
    fn version(&self) -> &str;
    /// Maximum concurrent calls; `None` means unrestricted.
    fn capacity(&self) -> Option<usize> {
        None
    }
}

/// Rewrites a question (or caption) into concrete visual query terms.
pub trait Decomposer: Backend {
    fn decompose(&self, text: &str) -> BackendResult<Vec<String>>;
}

/// Produces a per-pixel relevance map in `[0,1]^{H×W}` for one query term.
pub trait Grounder: Backend {
    fn ground(&self, image: &Image, query: &str) -> BackendResult<Array2<f64>>;
}

pub trait VisionLanguageModel: Backend {
    fn answer(&self, image: &Image, question: &str) -> BackendResult<String>;
}

/// Semantic text encoder. Non-empty text embeds to a unit vector; empty text
/// embeds to the all-zero canonical vector.
pub trait TextEncoder: Backend {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> BackendResult<Vec<f64>>;
}

pub trait Expert: Backend {
    fn run(&self, image: &Image) -> BackendResult<ExpertOutput>;
}

/// Image representation used by the learned selector.
pub trait ImageEmbedder: Backend {
    fn embed_image(&self, image: &Image) -> BackendResult<Vec<f64>>;
}

/// Averages several encoders of equal dimension and renormalizes.
pub struct AveragingEncoder {
    parts: Vec<Arc<dyn TextEncoder>>,
    name: String,
    version: String,
}

impl AveragingEncoder {
    pub fn new(parts: Vec<Arc<dyn TextEncoder>>) -> crate::Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| crate::Error::invalid("averaging encoder needs at least one part"))?;
        let dim = first.dim();
        if parts.iter().any(|p| p.dim() != dim) {
            return Err(crate::Error::invalid("averaged encoders must share a dimension"));
        }
        let name = parts.iter().map(|p| p.name()).collect::<Vec<_>>().join("+");
        let version = parts.iter().map(|p| p.version()).collect::<Vec<_>>().join("+");
        Ok(Self {
            parts,
            name: format!("mean({name})"),
            version,
        })
    }
}

impl Backend for AveragingEncoder {
    fn name(&self) -> &str {
        &self.name
    }
    fn version(&self) -> &str {
        &self.version
    }
}

impl TextEncoder for AveragingEncoder {
    fn dim(&self) -> usize {
        self.parts[0].dim()
    }

    fn embed(&self, text: &str) -> BackendResult<Vec<f64>> {
        let mut acc = vec![0.0; self.dim()];
        for p in &self.parts {
            for (a, v) in acc.iter_mut().zip(p.embed(text)?) {
                *a += v;
            }
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            acc.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(acc)
    }
}

/// Counting semaphore that bounds concurrent calls into one backend.
#[derive(Debug)]
pub struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    pub fn new(permits: usize) -> Self {
        Self {
            free: Mutex::new(permits.max(1)),
            cv: Condvar::new(),
        }
    }

    pub fn with<R>(&self, f: impl FnOnce() -> R) -> R {
        {
            let mut free = self.free.lock().expect("gate lock");
            while *free == 0 {
                free = self.cv.wait(free).expect("gate lock");
            }
            *free -= 1;
        }
        let out = f();
        *self.free.lock().expect("gate lock") += 1;
        self.cv.notify_one();
        out
    }
}

/// Wraps a handle whose declared capacity is finite so callers queue on it.
pub struct Gated<T: ?Sized> {
    inner: Arc<T>,
    gate: Gate,
}

impl<T: ?Sized + Backend> Gated<T> {
    pub fn new(inner: Arc<T>, permits: usize) -> Self {
        Self {
            inner,
            gate: Gate::new(permits),
        }
    }
}

impl<T: ?Sized + Backend> Backend for Gated<T> {
    fn name(&self) -> &str {
        self.inner.name()
    }
    fn version(&self) -> &str {
        self.inner.version()
    }
    fn capacity(&self) -> Option<usize> {
        self.inner.capacity()
    }
}

impl<T: ?Sized + Decomposer> Decomposer for Gated<T> {
    fn decompose(&self, text: &str) -> BackendResult<Vec<String>> {
        self.gate.with(|| self.inner.decompose(text))
    }
}

impl<T: ?Sized + Grounder> Grounder for Gated<T> {
    fn ground(&self, image: &Image, query: &str) -> BackendResult<Array2<f64>> {
        self.gate.with(|| self.inner.ground(image, query))
    }
}

impl<T: ?Sized + VisionLanguageModel> VisionLanguageModel for Gated<T> {
    fn answer(&self, image: &Image, question: &str) -> BackendResult<String> {
        self.gate.with(|| self.inner.answer(image, question))
    }
}

impl<T: ?Sized + TextEncoder> TextEncoder for Gated<T> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn embed(&self, text: &str) -> BackendResult<Vec<f64>> {
        self.gate.with(|| self.inner.embed(text))
    }
}

impl<T: ?Sized + Expert> Expert for Gated<T> {
    fn run(&self, image: &Image) -> BackendResult<ExpertOutput> {
        self.gate.with(|| self.inner.run(image))
    }
}

impl<T: ?Sized + ImageEmbedder> ImageEmbedder for Gated<T> {
    fn embed_image(&self, image: &Image) -> BackendResult<Vec<f64>> {
        self.gate.with(|| self.inner.embed_image(image))
    }
}

/// The full set of model handles one pipeline run needs.
#[derive(Clone)]
pub struct BackendSuite {
    pub decomposer: Arc<dyn Decomposer>,
    pub grounder: Arc<dyn Grounder>,
    pub vlm: Arc<dyn VisionLanguageModel>,
    pub encoder: Arc<dyn TextEncoder>,
    pub experts: Vec<Arc<dyn Expert>>,
    pub image_embedder: Option<Arc<dyn ImageEmbedder>>,
}

fn gate<T: ?Sized + Backend + 'static>(h: Arc<T>) -> Option<Gated<T>> {
    h.capacity().map(|c| Gated::new(h, c))
}

impl BackendSuite {
    /// `name → version` for every handle; feeds the run fingerprint.
    pub fn versions(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        let mut put = |role: &str, b: &dyn Backend| {
            out.insert(format!("{role}:{}", b.name()), b.version().to_owned());
        };
        put("decomposer", self.decomposer.as_ref());
        put("grounder", self.grounder.as_ref());
        put("vlm", self.vlm.as_ref());
        put("encoder", self.encoder.as_ref());
        for (i, e) in self.experts.iter().enumerate() {
            put(&format!("expert{i}"), e.as_ref());
        }
        if let Some(e) = &self.image_embedder {
            put("image_embedder", e.as_ref());
        }
        out
    }

    pub fn expert_names(&self) -> Vec<String> {
        self.experts.iter().map(|e| e.name().to_owned()).collect()
    }

    /// Keep only the named experts, in the given order.
    pub fn select_experts(&self, names: &[String]) -> crate::Result<Self> {
        let mut experts = Vec::with_capacity(names.len());
        for n in names {
            let e = self
                .experts
                .iter()
                .find(|e| e.name() == n)
                .ok_or_else(|| crate::Error::invalid(format!("unknown expert `{n}`")))?;
            experts.push(Arc::clone(e));
        }
        Ok(Self {
            experts,
            ..self.clone()
        })
    }

    /// Route every handle with a finite declared capacity through a queueing gate.
    pub fn gated(self) -> Self {
        let decomposer: Arc<dyn Decomposer> = match gate(Arc::clone(&self.decomposer)) {
            Some(g) => Arc::new(g),
            None => self.decomposer,
        };
        let grounder: Arc<dyn Grounder> = match gate(Arc::clone(&self.grounder)) {
            Some(g) => Arc::new(g),
            None => self.grounder,
        };
        let vlm: Arc<dyn VisionLanguageModel> = match gate(Arc::clone(&self.vlm)) {
            Some(g) => Arc::new(g),
            None => self.vlm,
        };
        let encoder: Arc<dyn TextEncoder> = match gate(Arc::clone(&self.encoder)) {
            Some(g) => Arc::new(g),
            None => self.encoder,
        };
        let experts = self
            .experts
            .into_iter()
            .map(|e| -> Arc<dyn Expert> {
                match gate(Arc::clone(&e)) {
                    Some(g) => Arc::new(g),
                    None => e,
                }
            })
            .collect();
        let image_embedder = self.image_embedder.map(|e| -> Arc<dyn ImageEmbedder> {
            match gate(Arc::clone(&e)) {
                Some(g) => Arc::new(g),
                None => e,
            }
        });
        Self {
            decomposer,
            grounder,
            vlm,
            encoder,
            experts,
            image_embedder,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::time::Duration;

    struct Slow {
        live: AtomicUsize,
        peak: AtomicUsize,
    }

    impl Backend for Slow {
        fn name(&self) -> &str {
            "slow"
        }
        fn version(&self) -> &str {
            "0"
        }
        fn capacity(&self) -> Option<usize> {
            Some(1)
        }
    }

    impl VisionLanguageModel for Slow {
        fn answer(&self, _: &Image, _: &str) -> BackendResult<String> {
            let now = self.live.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(5));
            self.live.fetch_sub(1, Ordering::SeqCst);
            Ok("ok".into())
        }
    }

    #[test]
    fn gate_serializes_capacity_one_backend() {
        let slow = Arc::new(Slow {
            live: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        });
        let gated = Arc::new(Gated::new(Arc::clone(&slow), 1));
        let img = Image::filled("g", 16, 16, [0; 3]).unwrap();
        std::thread::scope(|s| {
            for _ in 0..6 {
                let g = Arc::clone(&gated);
                let img = img.clone();
                s.spawn(move || g.answer(&img, "q").unwrap());
            }
        });
        assert_eq!(slow.peak.load(Ordering::SeqCst), 1);
    }
}
