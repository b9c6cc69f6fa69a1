//! Datasets, batch evaluation, result logs and accounting metrics.

mod log;
mod metrics;

use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use log::{BranchRecord, LogLine, RecordFailure, ResultLog, RunHeader, SampleRecord, TraceSummary, LOG_FORMAT};
pub use metrics::{
    correlation, hallucination_tally, judge_against_scene, midranks, pearson, spearman, summarize,
    transition_stats, Correlation, CorrelationReport, HallucinationLabel, HallucinationTally,
    Summary, TransitionStats,
};

use crate::backends::mock::MockWorld;
use crate::backends::scene::SceneSpec;
use crate::backends::text::normalize;
use crate::backends::{BackendSuite, Image};
use crate::error::{Error, Result};
use crate::pipeline::{run_dnr, run_policy, DnRConfig};
use crate::selector::ExpertPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Vqa,
    Caption,
    Binary,
}

#[derive(Debug, Clone)]
pub enum ImageSource {
    File(PathBuf),
    Scene(Arc<SceneSpec>),
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: ImageSource,
    pub question: Option<String>,
    /// Accepted answers.
    pub ground_truth: Option<Vec<String>>,
    pub task_kind: TaskKind,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        let needs_truth = matches!(self.task_kind, TaskKind::Vqa | TaskKind::Binary);
        if needs_truth && self.ground_truth.as_ref().is_none_or(|t| t.is_empty()) {
            return Err(Error::invalid(format!("sample {} has no ground truth", self.id)));
        }
        if needs_truth && self.question.is_none() {
            return Err(Error::invalid(format!("sample {} has no question", self.id)));
        }
        Ok(())
    }

    pub fn load_image(&self) -> Result<Image> {
        match &self.image {
            ImageSource::File(p) => Image::open(p),
            ImageSource::Scene(s) => Ok(s.render()),
        }
    }
}

pub trait DatasetAdapter {
    fn name(&self) -> &str;
    fn samples(&self) -> Result<Vec<Sample>>;
}

/// A directory of scene files; one sample per scene question, optionally
/// plus one captioning sample per scene.
#[derive(Debug, Clone)]
pub struct SceneDirAdapter {
    dir: PathBuf,
    name: String,
    scenes: Vec<Arc<SceneSpec>>,
    pub captions: bool,
}

impl SceneDirAdapter {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "toml"))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::invalid(format!("no scene files in {}", dir.display())));
        }
        let scenes = paths
            .iter()
            .map(|p| SceneSpec::load(p).map(Arc::new))
            .collect::<Result<Vec<_>>>()?;
        let name = dir
            .file_name()
            .map_or_else(|| "scenes".to_owned(), |n| n.to_string_lossy().into_owned());
        Ok(Self::from_scenes(name, scenes.into_iter().map(|s| (*s).clone())).with_dir(dir))
    }

    pub fn from_scenes(name: impl Into<String>, scenes: impl IntoIterator<Item = SceneSpec>) -> Self {
        Self {
            dir: PathBuf::new(),
            name: name.into(),
            scenes: scenes.into_iter().map(Arc::new).collect(),
            captions: false,
        }
    }

    fn with_dir(mut self, dir: PathBuf) -> Self {
        self.dir = dir;
        self
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn with_captions(mut self, on: bool) -> Self {
        self.captions = on;
        self
    }

    pub fn world(&self) -> MockWorld {
        MockWorld::new(self.scenes.iter().map(|s| (**s).clone()))
    }

    pub fn scenes(&self) -> &[Arc<SceneSpec>] {
        &self.scenes
    }
}

fn is_binary(answer: &str) -> bool {
    matches!(normalize(answer).as_str(), "yes" | "no")
}

impl DatasetAdapter for SceneDirAdapter {
    fn name(&self) -> &str {
        &self.name
    }

    fn samples(&self) -> Result<Vec<Sample>> {
        let mut out = Vec::new();
        for scene in &self.scenes {
            for q in &scene.questions {
                let truth = scene.answer(&q.id).unwrap_or_default().to_owned();
                out.push(Sample {
                    id: format!("{}/{}", scene.id, q.id),
                    image: ImageSource::Scene(Arc::clone(scene)),
                    question: Some(q.text.clone()),
                    task_kind: if is_binary(&truth) { TaskKind::Binary } else { TaskKind::Vqa },
                    ground_truth: Some(vec![truth]),
                });
            }
            if self.captions {
                out.push(Sample {
                    id: format!("{}/caption", scene.id),
                    image: ImageSource::Scene(Arc::clone(scene)),
                    question: None,
                    ground_truth: None,
                    task_kind: TaskKind::Caption,
                });
            }
        }
        Ok(out)
    }
}

/// One JSON object per line: `{id, image, question?, answers?, task?}` with
/// image paths relative to the record file.
#[derive(Debug, Clone)]
pub struct RecordFileAdapter {
    path: PathBuf,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: String,
    image: PathBuf,
    #[serde(default)]
    question: Option<String>,
    #[serde(default)]
    answers: Option<Vec<String>>,
    #[serde(default)]
    task: Option<TaskKind>,
}

impl RecordFileAdapter {
    pub fn new(path: impl AsRef<Path>) -> Self {
        Self {
            path: path.as_ref().to_path_buf(),
        }
    }
}

impl DatasetAdapter for RecordFileAdapter {
    fn name(&self) -> &str {
        self.path.file_stem().and_then(|s| s.to_str()).unwrap_or("records")
    }

    fn samples(&self) -> Result<Vec<Sample>> {
        let file = std::fs::File::open(&self.path).map_err(|e| Error::io(&self.path, e))?;
        let base = self.path.parent().unwrap_or(Path::new(""));
        let mut out = Vec::new();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&self.path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let at = || format!("{}:{}", self.path.display(), i + 1);
            let r: RecordLine = serde_json::from_str(&line).map_err(|e| Error::parse(at(), e.to_string()))?;
            let task_kind = r.task.unwrap_or(match (&r.question, &r.answers) {
                (None, _) => TaskKind::Caption,
                (Some(_), Some(a)) if a.iter().all(|a| is_binary(a)) => TaskKind::Binary,
                _ => TaskKind::Vqa,
            });
            let sample = Sample {
                id: r.id,
                image: ImageSource::File(base.join(r.image)),
                question: r.question,
                ground_truth: r.answers,
                task_kind,
            };
            sample.validate().map_err(|e| Error::parse(at(), e.to_string()))?;
            out.push(sample);
        }
        Ok(out)
    }
}

/// Case-folded, punctuation-stripped membership in the accepted answers.
pub fn evaluate_answer(predicted: &str, ground_truth: &[String]) -> bool {
    let p = normalize(predicted);
    ground_truth.iter().any(|t| normalize(t) == p)
}

/// Map `f` over `items` on a pool of `threads` workers, keeping input order.
/// `threads == 0` uses rayon's default sizing.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    use rayon::prelude::*;
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        Err(_) => items.iter().map(f).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum RunMode {
    Exhaustive,
    Policy { verify: bool },
}

/// Fingerprint of everything that determines a run's records.
pub fn run_fingerprint(config: &DnRConfig, backends: &BackendSuite, mode: RunMode, dataset: &str) -> String {
    let versions = serde_json::to_string(&backends.versions()).expect("versions serialize");
    let mode = serde_json::to_string(&mode).expect("mode serializes");
    let key = format!("{}\n{versions}\n{mode}\n{dataset}", config.to_toml());
    crate::digest::fingerprint(key.as_bytes())
}

/// Evaluate every sample. Records stay in dataset order; when `sink` is
/// given they are appended to it as soon as all earlier samples finish.
pub fn run_benchmark(
    dataset: &dyn DatasetAdapter,
    config: &DnRConfig,
    backends: &BackendSuite,
    mode: RunMode,
    policy: Option<&dyn ExpertPolicy>,
    threads: usize,
    sink: Option<&Path>,
) -> Result<ResultLog> {
    config.validate()?;
    let backends = match &config.experts {
        Some(names) => backends.select_experts(names)?,
        None => backends.clone(),
    };
    let policy = match (mode, policy) {
        (RunMode::Policy { .. }, None) => return Err(Error::invalid("policy mode requires a selector")),
        (_, p) => p,
    };
    let samples = dataset.samples()?;
    let header = RunHeader {
        format: LOG_FORMAT.to_owned(),
        fingerprint: run_fingerprint(config, &backends, mode, dataset.name()),
        dataset: dataset.name().to_owned(),
        mode,
        seed: config.seed,
        config: config.clone(),
        backend_versions: backends.versions(),
        expert_names: backends.expert_names(),
        samples: samples.len(),
    };
    let mut writer = match sink {
        Some(p) => Some(log::LogWriter::create(p, &header)?),
        None => None,
    };
    let fingerprint = header.fingerprint.clone();
    let (tx, rx) = std::sync::mpsc::channel::<(usize, SampleRecord)>();
    let records = std::thread::scope(|scope| -> Result<Vec<SampleRecord>> {
        let consumer = scope.spawn(move || -> Result<Vec<SampleRecord>> {
            let mut pending = std::collections::BTreeMap::new();
            let mut done = Vec::new();
            for (i, rec) in rx {
                pending.insert(i, rec);
                while let Some(rec) = pending.remove(&done.len()) {
                    if let Some(w) = writer.as_mut() {
                        w.append(&rec)?;
                    }
                    done.push(rec);
                }
            }
            Ok(done)
        });
        let indexed: Vec<(usize, &Sample)> = samples.iter().enumerate().collect();
        parallel_map(&indexed, threads, |&(i, s)| {
            let rec = evaluate_sample(s, config, &backends, mode, policy, &fingerprint);
            // The consumer only stops early on a write error, reported below.
            let _ = tx.send((i, rec));
        });
        drop(tx);
        consumer.join().expect("log writer panicked")
    })?;
    Ok(ResultLog { header, records })
}

fn evaluate_sample(
    s: &Sample,
    config: &DnRConfig,
    backends: &BackendSuite,
    mode: RunMode,
    policy: Option<&dyn ExpertPolicy>,
    fingerprint: &str,
) -> SampleRecord {
    let image = match s.validate().and_then(|_| s.load_image()) {
        Ok(img) => img,
        Err(e) => return SampleRecord::failed(fingerprint, s, "load", e.to_string()),
    };
    let q = s.question.as_deref();
    let result = match (mode, policy) {
        (RunMode::Policy { verify }, Some(p)) => run_policy(&image, q, config, backends, p, verify),
        _ => run_dnr(&image, q, config, backends),
    };
    match result {
        Ok(r) => SampleRecord::from_result(fingerprint, s, &r),
        Err(f) => SampleRecord::failed(fingerprint, s, &format!("{:?}", f.stage).to_lowercase(), f.message),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn answer_normalization() {
        assert!(evaluate_answer("Yes", &["yes".into()]));
        assert!(evaluate_answer("two dogs", &["2 dogs".into(), "two dogs".into()]));
        assert!(evaluate_answer("Two dogs!", &["two   dogs".into()]));
        assert!(!evaluate_answer("cat", &["dog".into()]));
    }

    #[test]
    fn parallel_map_keeps_order() {
        let v: Vec<usize> = (0..100).collect();
        assert_eq!(parallel_map(&v, 4, |x| x * 2), v.iter().map(|x| x * 2).collect::<Vec<_>>());
        assert_eq!(parallel_map(&v, 1, |x| x + 1)[99], 100);
    }

    #[test]
    fn record_file_adapter_reads_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("set.jsonl");
        std::fs::write(
            &p,
            "{\"id\":\"a\",\"image\":\"a.png\",\"question\":\"Is it red?\",\"answers\":[\"yes\"]}\n\n\
             {\"id\":\"b\",\"image\":\"b.png\"}\n",
        )
        .unwrap();
        let s = RecordFileAdapter::new(&p).samples().unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].task_kind, TaskKind::Binary);
        assert_eq!(s[1].task_kind, TaskKind::Caption);
        assert!(matches!(&s[0].image, ImageSource::File(f) if f == &dir.path().join("a.png")));
        std::fs::write(&p, "{\"id\":\"a\",\"image\":\"a.png\",\"question\":\"q\"}\n").unwrap();
        assert!(RecordFileAdapter::new(&p).samples().is_err());
    }
}
