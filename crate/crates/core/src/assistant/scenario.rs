//! Recorded scenarios: a scripted sequence of triggers, frames and queries
//! replayed through a session to produce a transcript.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{FrameInput, ServiceError, Services, SessionConfig, SessionManager};
use crate::detorch::{Detection, MockDetector, MockNoise};
use crate::detpost::DepthMap;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::fsutil;
use crate::geometry::BoundingBox;
use crate::knowledge::{build_index, load_knowledge_base, HashingEmbedder, KnowledgeEntry, DEFAULT_DIM};

pub const TRANSCRIPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub version: u32,
    pub name: String,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub config: SessionConfig,
    pub knowledge: ScenarioKnowledge,
    #[serde(default = "default_dim")]
    pub embedding_dim: usize,
    #[serde(default)]
    pub mock: MockSettings,
    pub steps: Vec<Step>,
}

fn default_dim() -> usize {
    DEFAULT_DIM
}

/// Knowledge entries inline or in a file relative to the scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScenarioKnowledge {
    Path { path: PathBuf },
    Entries { entries: Vec<KnowledgeEntry> },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockSettings {
    pub seed: u64,
    pub noise: MockNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Step {
    Trigger,
    Frame(ScenarioFrame),
    Query { q: String },
    State,
}

impl Step {
    fn name(&self) -> &'static str {
        match self {
            Step::Trigger => "trigger",
            Step::Frame(_) => "frame",
            Step::Query { .. } => "query",
            Step::State => "state",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFrame {
    /// Ground-truth objects seen by the mock detector.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objects: Option<Vec<SceneObject>>,
    /// Precomputed detections, used verbatim.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detections: Option<Vec<Detection>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<DepthSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub label: String,
    pub bbox: BoundingBox,
}

/// A depth map built from a background value and boxes painted in order,
/// or read from a `DPTH` file relative to the scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DepthSpec {
    File { file: PathBuf },
    Regions { background: f32, regions: Vec<DepthRegion> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthRegion {
    pub bbox: BoundingBox,
    pub value: f32,
}

impl DepthSpec {
    pub fn build(&self, width: u32, height: u32, base: &Path) -> Result<DepthMap> {
        match self {
            DepthSpec::File { file } => {
                let d = DepthMap::load(&base.join(file))?;
                if (d.width(), d.height()) != (width, height) {
                    return Err(Error::Depth(format!(
                        "{}: {}x{} map for a {width}x{height} scenario",
                        file.display(),
                        d.width(),
                        d.height()
                    )));
                }
                Ok(d)
            }
            DepthSpec::Regions { background, regions } => {
                let mut d = DepthMap::constant(width, height, *background)?;
                for r in regions {
                    d.fill_box(&r.bbox, r.value);
                }
                Ok(d)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub op: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<ServiceError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub version: u32,
    pub scenario: String,
    pub config: SessionConfig,
    pub steps: Vec<StepRecord>,
}

impl Transcript {
    /// Canonical bytes: pretty JSON with a trailing newline.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = serde_json::to_vec_pretty(self).expect("transcript serializes");
        v.push(b'\n');
        v
    }
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self> {
        let s: Scenario = fsutil::read_json(path)?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidInput("scenario frame size must be positive".into()));
        }
        for (i, step) in self.steps.iter().enumerate() {
            if let Step::Frame(f) = step {
                if f.objects.is_some() == f.detections.is_some() {
                    return Err(Error::InvalidInput(format!(
                        "step {i}: a frame needs exactly one of `objects` or `detections`"
                    )));
                }
            }
        }
        self.mock.noise.validate()
    }

    fn entries(&self, base: &Path) -> Result<Vec<KnowledgeEntry>> {
        match &self.knowledge {
            ScenarioKnowledge::Path { path } => load_knowledge_base(&base.join(path)),
            ScenarioKnowledge::Entries { entries } => Ok(entries.clone()),
        }
    }
}

/// Replays `scenario` through a fresh session. Relative paths resolve
/// against `base`. Service errors are recorded in the transcript; only
/// malformed scenarios fail the call.
pub fn run_scenario(scenario: &Scenario, base: &Path, exec: Exec) -> Result<Transcript> {
    scenario.validate()?;
    let embedder = HashingEmbedder::new(scenario.embedding_dim)?;
    let kb = build_index(&scenario.entries(base)?, &embedder, exec)?;
    let mut services = Services::default().with_knowledge(kb);
    services.embedder = std::sync::Arc::new(embedder);
    services.exec = exec;
    let manager = SessionManager::new(services);
    let mock = MockDetector::new(scenario.mock.noise.clone(), scenario.mock.seed)?;

    let mut steps = Vec::with_capacity(scenario.steps.len());
    let created = manager
        .create(scenario.config)
        .map_err(|e| Error::InvalidInput(format!("scenario config: {}", e.message)))?;
    let id = created.id;
    let mut frame_no = 0u64;
    for (i, step) in scenario.steps.iter().enumerate() {
        let outcome: std::result::Result<Value, ServiceError> = match step {
            Step::Trigger => manager.trigger(id).map(to_value),
            Step::State => manager.snapshot(id).map(to_value),
            Step::Query { q } => manager.submit_query(id, q).map(to_value),
            Step::Frame(f) => {
                let detections = match (&f.objects, &f.detections) {
                    (Some(objs), _) => {
                        let truth: Vec<(String, BoundingBox)> =
                            objs.iter().map(|o| (o.label.clone(), o.bbox)).collect();
                        mock.observe(&truth, scenario.width, scenario.height, frame_no)
                    }
                    (_, Some(d)) => d.clone(),
                    _ => unreachable!("validated"),
                };
                frame_no += 1;
                let depth = f
                    .depth
                    .as_ref()
                    .map(|d| d.build(scenario.width, scenario.height, base))
                    .transpose()?;
                manager
                    .push_frame(
                        id,
                        FrameInput {
                            detections: Some(detections),
                            image: None,
                            depth,
                        },
                    )
                    .map(to_value)
            }
        };
        let (result, error) = match outcome {
            Ok(v) => (Some(v), None),
            Err(e) => (None, Some(e)),
        };
        steps.push(StepRecord {
            step: i,
            op: step.name().to_owned(),
            result,
            error,
        });
    }
    Ok(Transcript {
        version: TRANSCRIPT_VERSION,
        scenario: scenario.name.clone(),
        config: scenario.config,
        steps,
    })
}

fn to_value<T: Serialize>(v: T) -> Value {
    serde_json::to_value(v).expect("response serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenario_json() -> &'static str {
        r#"{
          "version": 1,
          "name": "unit",
          "width": 100,
          "height": 80,
          "config": {"frames": 2},
          "knowledge": {"entries": [
            {"part_id": "P1", "label": "gear", "display_name": "Gear"},
            {"part_id": "P2", "label": "bolt", "display_name": "Bolt"}
          ]},
          "steps": [
            {"op": "frame", "detections": []},
            {"op": "trigger"},
            {"op": "frame", "objects": [{"label": "gear", "bbox": [10, 10, 30, 30]},
                                        {"label": "bolt", "bbox": [50, 10, 60, 20]}],
             "depth": {"background": 9.0, "regions": [{"bbox": [10, 10, 30, 30], "value": 2.0},
                                                       {"bbox": [50, 10, 60, 20], "value": 1.0}]}},
            {"op": "frame", "objects": [{"label": "gear", "bbox": [10, 10, 30, 30]},
                                        {"label": "bolt", "bbox": [50, 10, 60, 20]}],
             "depth": {"background": 9.0, "regions": [{"bbox": [10, 10, 30, 30], "value": 2.0},
                                                       {"bbox": [50, 10, 60, 20], "value": 1.0}]}},
            {"op": "query", "q": "which part is closest"},
            {"op": "state"}
          ]
        }"#
    }

    #[test]
    fn replay_records_errors_and_answers() {
        let mut s: Scenario = serde_json::from_str(scenario_json()).unwrap();
        s.config.min_votes = 2;
        let t = run_scenario(&s, Path::new("."), Exec::Sequential).unwrap();
        assert_eq!(t.steps[0].error.as_ref().unwrap().code, super::super::ErrorCode::InvalidState);
        assert_eq!(t.steps[3].result.as_ref().unwrap()["state"], "gated");
        let answer = t.steps[4].result.as_ref().unwrap()["answer"].as_str().unwrap();
        assert!(answer.starts_with("The closest part is Bolt (P2)"), "{answer}");
        let again = run_scenario(&s, Path::new("."), Exec::Parallel).unwrap();
        assert_eq!(t.to_bytes(), again.to_bytes());
    }

    #[test]
    fn frame_needs_one_source() {
        let mut s: Scenario = serde_json::from_str(scenario_json()).unwrap();
        s.steps.push(Step::Frame(ScenarioFrame::default()));
        assert!(s.validate().is_err());
    }
}
