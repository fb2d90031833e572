//! Query lifecycle: sessions buffer frames after a trigger, gate on
//! consecutive valid frames, fuse and rank what they saw, then answer
//! questions against the knowledge base.

mod scenario;

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::detorch::{detect_sliced, detect_tta, Detection, DetectorProvider, FusionParams, SliceConfig, TtaConfig};
use crate::detpost::{
    dedup, fuse, gate_consecutive, rank_topk, DepthMap, FrameBuffer, RankedObject, DEFAULT_CONFIDENCE,
    DEFAULT_FRAMES, DEFAULT_FUSION_IOU, DEFAULT_MIN_VOTES, DEFAULT_TOP_K,
};
use crate::error::Error;
use crate::exec::Exec;
use crate::geometry::PixelImage;
use crate::knowledge::{
    compose_context, Context, EmbedderProvider, HashingEmbedder, KnowledgeIndex, Responder, RetrievalConfig,
    TemplateResponder,
};

pub use scenario::{
    run_scenario, DepthRegion, DepthSpec, MockSettings, Scenario, SceneObject, ScenarioFrame, ScenarioKnowledge, Step,
    StepRecord, Transcript,
    TRANSCRIPT_VERSION,
};

pub const DEFAULT_FRAME_BUDGET: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    /// Consecutive valid frames required to open the gate.
    pub frames: usize,
    pub confidence: f64,
    pub fusion_iou: f64,
    pub min_votes: usize,
    pub top_k: usize,
    /// Frames accepted after the trigger before giving up.
    pub frame_budget: usize,
    pub retrieval: RetrievalConfig,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            frames: DEFAULT_FRAMES,
            confidence: DEFAULT_CONFIDENCE,
            fusion_iou: DEFAULT_FUSION_IOU,
            min_votes: DEFAULT_MIN_VOTES,
            top_k: DEFAULT_TOP_K,
            frame_budget: DEFAULT_FRAME_BUDGET,
            retrieval: RetrievalConfig::default(),
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), ServiceError> {
        let bad = |m: String| Err(ServiceError::new(ErrorCode::InvalidConfig, m));
        if self.frames == 0 {
            return bad("frames must be at least 1".into());
        }
        if self.top_k == 0 {
            return bad("top_k must be at least 1".into());
        }
        if self.min_votes == 0 {
            return bad("min_votes must be at least 1".into());
        }
        if self.retrieval.per_object_m == 0 {
            return bad("per_object_m must be at least 1".into());
        }
        for (name, v) in [("confidence", self.confidence), ("fusion_iou", self.fusion_iou)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0,1]"));
            }
        }
        if self.frame_budget < self.frames {
            return bad(format!(
                "frame_budget {} smaller than frames {}",
                self.frame_budget, self.frames
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Idle,
    Buffering,
    Gated,
    Answered,
    Failed,
}

impl SessionState {
    pub fn as_str(self) -> &'static str {
        match self {
            SessionState::Idle => "idle",
            SessionState::Buffering => "buffering",
            SessionState::Gated => "gated",
            SessionState::Answered => "answered",
            SessionState::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    InvalidConfig,
    InvalidInput,
    InvalidState,
    NotFound,
    DepthMissing,
    GateTimeout,
    ProviderFailed,
    KnowledgeError,
    Internal,
}

/// Wire error: a stable code, a message, and whether retrying can help.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, thiserror::Error)]
#[error("{code:?}: {message}")]
pub struct ServiceError {
    pub code: ErrorCode,
    pub message: String,
    pub retriable: bool,
}

impl ServiceError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        let retriable = matches!(
            code,
            ErrorCode::GateTimeout | ErrorCode::ProviderFailed | ErrorCode::KnowledgeError
        );
        ServiceError {
            code,
            message: message.into(),
            retriable,
        }
    }

    fn state(expected: &str, actual: SessionState) -> Self {
        Self::new(
            ErrorCode::InvalidState,
            format!("session must be {expected}, is {}", actual.as_str()),
        )
    }
}

impl From<Error> for ServiceError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Provider { .. } => ErrorCode::ProviderFailed,
            Error::Knowledge(_) => ErrorCode::KnowledgeError,
            Error::Depth(_) => ErrorCode::InvalidInput,
            Error::Config(_) => ErrorCode::InvalidConfig,
            Error::Io { .. } => ErrorCode::Internal,
            _ => ErrorCode::InvalidInput,
        };
        ServiceError::new(code, e.to_string())
    }
}

/// One frame: precomputed detections or an image for the configured
/// provider, plus an optional depth map.
#[derive(Debug, Clone, Default)]
pub struct FrameInput {
    pub detections: Option<Vec<Detection>>,
    pub image: Option<PixelImage>,
    pub depth: Option<DepthMap>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameStatus {
    pub state: SessionState,
    pub frame_index: u64,
    /// Detections kept after the confidence filter.
    pub detections: usize,
    pub valid: bool,
    /// Trailing run of valid frames in the buffer.
    pub consecutive_valid: usize,
    pub gate_open: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ranked: Option<Vec<RankedObject>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub query: String,
    pub answer: String,
    pub ranked: Vec<RankedObject>,
    pub context: Context,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub id: u64,
    pub state: SessionState,
    pub config: SessionConfig,
    pub frames_received: u64,
    pub frames_buffered: usize,
    pub ranked: Option<Vec<RankedObject>>,
    pub last_answer: Option<QueryResponse>,
    pub error: Option<ServiceError>,
}

/// How images pushed without detections are run through the provider.
#[derive(Debug, Clone, Default, PartialEq)]
pub enum Inference {
    #[default]
    Plain,
    Tta(TtaConfig),
    Sliced(SliceConfig),
}

/// Shared, read-mostly resources of an assistant service.
pub struct Services {
    knowledge: RwLock<Option<Arc<KnowledgeIndex>>>,
    pub embedder: Arc<dyn EmbedderProvider>,
    pub responder: Arc<dyn Responder>,
    pub provider: Option<Arc<dyn DetectorProvider>>,
    pub inference: Inference,
    pub exec: Exec,
}

impl Default for Services {
    fn default() -> Self {
        Services {
            knowledge: RwLock::new(None),
            embedder: Arc::new(HashingEmbedder::default()),
            responder: Arc::new(TemplateResponder),
            provider: None,
            inference: Inference::Plain,
            exec: Exec::default(),
        }
    }
}

impl Services {
    pub fn with_knowledge(self, kb: KnowledgeIndex) -> Self {
        self.swap_knowledge(kb);
        self
    }

    /// Replaces the knowledge index; in-flight queries keep the old one.
    pub fn swap_knowledge(&self, kb: KnowledgeIndex) {
        *self.knowledge.write().expect("knowledge lock") = Some(Arc::new(kb));
    }

    pub fn knowledge(&self) -> Option<Arc<KnowledgeIndex>> {
        self.knowledge.read().expect("knowledge lock").clone()
    }

    fn run_provider(&self, image: &PixelImage, iou: f64) -> Result<Vec<Detection>, ServiceError> {
        let Some(p) = &self.provider else {
            return Err(ServiceError::new(
                ErrorCode::InvalidInput,
                "frame carries an image but no detector provider is configured",
            ));
        };
        let fusion = FusionParams { iou_threshold: iou };
        let out = match &self.inference {
            Inference::Plain => p.detect(image),
            Inference::Tta(c) => detect_tta(p.as_ref(), image, c, fusion, self.exec),
            Inference::Sliced(c) => detect_sliced(p.as_ref(), image, c, fusion, self.exec),
        };
        out.map_err(|e| ServiceError::new(ErrorCode::ProviderFailed, e.to_string()))
    }
}

/// One user query lifecycle.
#[derive(Debug)]
pub struct Session {
    id: u64,
    config: SessionConfig,
    state: SessionState,
    buffer: FrameBuffer,
    frames_received: u64,
    frames_since_trigger: usize,
    last_depth: Option<DepthMap>,
    ranked: Vec<RankedObject>,
    last_answer: Option<QueryResponse>,
    error: Option<ServiceError>,
}

impl Session {
    pub fn new(id: u64, config: SessionConfig) -> Result<Self, ServiceError> {
        config.validate()?;
        Ok(Session {
            id,
            config,
            state: SessionState::Idle,
            buffer: FrameBuffer::new(config.frames).map_err(ServiceError::from)?,
            frames_received: 0,
            frames_since_trigger: 0,
            last_depth: None,
            ranked: Vec::new(),
            last_answer: None,
            error: None,
        })
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn trigger(&mut self) -> Result<SessionSnapshot, ServiceError> {
        if self.state != SessionState::Idle {
            return Err(ServiceError::state("idle", self.state));
        }
        self.state = SessionState::Buffering;
        Ok(self.snapshot())
    }

    fn fail(&mut self, err: ServiceError) -> ServiceError {
        self.state = SessionState::Failed;
        self.error = Some(err.clone());
        err
    }

    pub fn push_frame(&mut self, frame: FrameInput, services: &Services) -> Result<FrameStatus, ServiceError> {
        if self.state != SessionState::Buffering {
            return Err(ServiceError::state("buffering", self.state));
        }
        if let (Some(img), Some(d)) = (&frame.image, &frame.depth) {
            if (img.width(), img.height()) != (d.width(), d.height()) {
                return Err(ServiceError::new(
                    ErrorCode::InvalidInput,
                    format!(
                        "depth map {}x{} does not match frame {}x{}",
                        d.width(),
                        d.height(),
                        img.width(),
                        img.height()
                    ),
                ));
            }
        }
        let raw = match (frame.detections, &frame.image) {
            (Some(d), _) => {
                for det in &d {
                    det.validate().map_err(ServiceError::from)?;
                }
                d
            }
            (None, Some(img)) => services
                .run_provider(img, self.config.fusion_iou)
                .map_err(|e| self.fail(e))?,
            (None, None) => {
                return Err(ServiceError::new(
                    ErrorCode::InvalidInput,
                    "frame needs detections or an image",
                ))
            }
        };
        let index = self.frames_received;
        let kept: Vec<Detection> = raw
            .into_iter()
            .filter(|d| d.confidence >= self.config.confidence)
            .map(|d| Detection { frame_index: index, ..d })
            .collect();
        let n_kept = kept.len();
        self.buffer.push(index, kept).map_err(ServiceError::from)?;
        self.frames_received += 1;
        self.frames_since_trigger += 1;
        self.last_depth = frame.depth;

        let consecutive = self
            .buffer
            .frames()
            .rev()
            .take_while(|(_, d)| !d.is_empty())
            .count();
        let gate = gate_consecutive(&self.buffer, self.config.frames, self.config.confidence);
        let mut status = FrameStatus {
            state: self.state,
            frame_index: index,
            detections: n_kept,
            valid: n_kept > 0,
            consecutive_valid: consecutive,
            gate_open: gate,
            ranked: None,
        };
        if gate {
            let Some(depth) = &self.last_depth else {
                return Err(self.fail(ServiceError::new(
                    ErrorCode::DepthMissing,
                    format!("gate opened at frame {index} but the frame has no depth map"),
                )));
            };
            let c = &self.config;
            let fused = fuse(&self.buffer.detections(), c.fusion_iou, c.min_votes);
            let kept = dedup(&fused, c.fusion_iou);
            let ranked = rank_topk(&kept, depth, c.top_k).map_err(|e| {
                let err = ServiceError::new(ErrorCode::DepthMissing, e.to_string());
                self.fail(err)
            })?;
            self.ranked = ranked.clone();
            self.state = SessionState::Gated;
            status.state = self.state;
            status.ranked = Some(ranked);
        } else if self.frames_since_trigger >= self.config.frame_budget {
            return Err(self.fail(ServiceError::new(
                ErrorCode::GateTimeout,
                format!(
                    "no {} consecutive valid frames within {} frames",
                    self.config.frames, self.config.frame_budget
                ),
            )));
        }
        Ok(status)
    }

    pub fn submit_query(&mut self, q: &str, services: &Services) -> Result<QueryResponse, ServiceError> {
        if !matches!(self.state, SessionState::Gated | SessionState::Answered) {
            return Err(ServiceError::state("gated or answered", self.state));
        }
        if q.trim().is_empty() {
            return Err(ServiceError::new(ErrorCode::InvalidInput, "query text is empty"));
        }
        let context = if self.ranked.is_empty() {
            Context::default()
        } else {
            let kb = services.knowledge().ok_or_else(|| {
                ServiceError::new(ErrorCode::KnowledgeError, "no knowledge base loaded")
            })?;
            compose_context(
                &self.ranked,
                &kb,
                services.embedder.as_ref(),
                &self.config.retrieval,
                services.exec,
            )?
        };
        let answer = services.responder.respond(q, &context)?;
        let resp = QueryResponse {
            query: q.to_owned(),
            answer,
            ranked: self.ranked.clone(),
            context,
        };
        self.last_answer = Some(resp.clone());
        self.state = SessionState::Answered;
        Ok(resp)
    }

    pub fn snapshot(&self) -> SessionSnapshot {
        let gated = matches!(self.state, SessionState::Gated | SessionState::Answered);
        SessionSnapshot {
            id: self.id,
            state: self.state,
            config: self.config,
            frames_received: self.frames_received,
            frames_buffered: self.buffer.len(),
            ranked: gated.then(|| self.ranked.clone()),
            last_answer: self.last_answer.clone(),
            error: self.error.clone(),
        }
    }
}

/// Concurrent session registry. Each session is guarded by its own lock,
/// so calls on different sessions never contend beyond the map lookup.
pub struct SessionManager {
    services: Arc<Services>,
    sessions: RwLock<HashMap<u64, Arc<Mutex<Session>>>>,
    next_id: AtomicU64,
}

impl SessionManager {
    pub fn new(services: Services) -> Self {
        SessionManager {
            services: Arc::new(services),
            sessions: RwLock::new(HashMap::new()),
            next_id: AtomicU64::new(1),
        }
    }

    pub fn services(&self) -> &Services {
        &self.services
    }

    pub fn create(&self, config: SessionConfig) -> Result<SessionSnapshot, ServiceError> {
        config.validate()?;
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let session = Session::new(id, config)?;
        let snap = session.snapshot();
        self.sessions
            .write()
            .expect("session map lock")
            .insert(id, Arc::new(Mutex::new(session)));
        Ok(snap)
    }

    fn get(&self, id: u64) -> Result<Arc<Mutex<Session>>, ServiceError> {
        self.sessions
            .read()
            .expect("session map lock")
            .get(&id)
            .cloned()
            .ok_or_else(|| ServiceError::new(ErrorCode::NotFound, format!("no session {id}")))
    }

    fn with<R>(&self, id: u64, f: impl FnOnce(&mut Session) -> R) -> Result<R, ServiceError> {
        let s = self.get(id)?;
        let mut guard = s.lock().map_err(|_| {
            ServiceError::new(ErrorCode::Internal, format!("session {id} lock poisoned"))
        })?;
        Ok(f(&mut guard))
    }

    pub fn trigger(&self, id: u64) -> Result<SessionSnapshot, ServiceError> {
        self.with(id, |s| s.trigger())?
    }

    pub fn push_frame(&self, id: u64, frame: FrameInput) -> Result<FrameStatus, ServiceError> {
        let services = self.services.clone();
        self.with(id, |s| s.push_frame(frame, &services))?
    }

    pub fn submit_query(&self, id: u64, q: &str) -> Result<QueryResponse, ServiceError> {
        let services = self.services.clone();
        self.with(id, |s| s.submit_query(q, &services))?
    }

    pub fn snapshot(&self, id: u64) -> Result<SessionSnapshot, ServiceError> {
        self.with(id, |s| s.snapshot())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoundingBox;
    use crate::knowledge::{build_index, KnowledgeEntry};

    fn det(label: &str, a: [f64; 4], c: f64) -> Detection {
        Detection {
            label: label.into(),
            bbox: BoundingBox::from_array(a).unwrap(),
            confidence: c,
            frame_index: 0,
        }
    }

    fn scene() -> Vec<Detection> {
        vec![
            det("gear", [10., 10., 30., 30.], 0.9),
            det("bolt", [40., 10., 50., 20.], 0.8),
            det("cover", [60., 40., 90., 70.], 0.7),
        ]
    }

    fn depth() -> DepthMap {
        let mut d = DepthMap::constant(100, 80, 10.0).unwrap();
        d.fill_box(&BoundingBox::from_array([10., 10., 30., 30.]).unwrap(), 3.0);
        d.fill_box(&BoundingBox::from_array([40., 10., 50., 20.]).unwrap(), 1.0);
        d.fill_box(&BoundingBox::from_array([60., 40., 90., 70.]).unwrap(), 2.0);
        d
    }

    fn services() -> Services {
        let entries: Vec<KnowledgeEntry> = ["gear", "bolt", "cover"]
            .iter()
            .enumerate()
            .map(|(i, l)| KnowledgeEntry {
                part_id: format!("P{i}"),
                label: l.to_string(),
                display_name: format!("{l} part"),
                attributes: Default::default(),
                description: format!("The {l}."),
            })
            .collect();
        let kb = build_index(&entries, &HashingEmbedder::default(), Exec::Sequential).unwrap();
        Services::default().with_knowledge(kb)
    }

    fn frame(dets: Vec<Detection>) -> FrameInput {
        FrameInput {
            detections: Some(dets),
            image: None,
            depth: Some(depth()),
        }
    }

    #[test]
    fn defaults() {
        let c = SessionConfig::default();
        assert_eq!((c.frames, c.confidence, c.fusion_iou, c.min_votes, c.top_k), (5, 0.4, 0.5, 3, 3));
        let bad = SessionConfig { frames: 0, ..c };
        assert_eq!(bad.validate().unwrap_err().code, ErrorCode::InvalidConfig);
        assert!(SessionConfig { top_k: 1, ..c }.validate().is_ok());
    }

    #[test]
    fn full_lifecycle() {
        let sv = services();
        let mut s = Session::new(1, SessionConfig::default()).unwrap();
        assert_eq!(s.push_frame(frame(scene()), &sv).unwrap_err().code, ErrorCode::InvalidState);
        assert_eq!(s.submit_query("hi", &sv).unwrap_err().code, ErrorCode::InvalidState);
        s.trigger().unwrap();
        assert!(s.trigger().is_err());
        for i in 0..4 {
            let st = s.push_frame(frame(scene()), &sv).unwrap();
            assert_eq!(st.state, SessionState::Buffering, "frame {i}");
            assert!(s.snapshot().ranked.is_none());
        }
        let st = s.push_frame(frame(scene()), &sv).unwrap();
        assert_eq!(st.state, SessionState::Gated);
        let labels: Vec<_> = st.ranked.unwrap().iter().map(|r| r.label.clone()).collect();
        assert_eq!(labels, ["bolt", "cover", "gear"]);
        let a = s.submit_query("which part is closest", &sv).unwrap();
        assert!(a.answer.contains("bolt part"));
        assert_eq!(s.state(), SessionState::Answered);
        let b = s.submit_query("what about torque", &sv).unwrap();
        assert_eq!(a.ranked, b.ranked);
        assert_ne!(a.query, b.query);
    }

    #[test]
    fn empty_frame_resets_gate() {
        let sv = services();
        let mut s = Session::new(1, SessionConfig::default()).unwrap();
        s.trigger().unwrap();
        for _ in 0..4 {
            s.push_frame(frame(scene()), &sv).unwrap();
        }
        let st = s.push_frame(frame(vec![det("gear", [0., 0., 5., 5.], 0.2)]), &sv).unwrap();
        assert_eq!(st.state, SessionState::Buffering);
        assert!(!st.valid);
        assert_eq!(st.consecutive_valid, 0);
    }

    #[test]
    fn missing_depth_fails() {
        let sv = services();
        let mut s = Session::new(1, SessionConfig { frames: 1, ..Default::default() }).unwrap();
        s.trigger().unwrap();
        let e = s
            .push_frame(
                FrameInput {
                    detections: Some(scene()),
                    ..Default::default()
                },
                &sv,
            )
            .unwrap_err();
        assert_eq!(e.code, ErrorCode::DepthMissing);
        assert_eq!(s.state(), SessionState::Failed);
    }

    #[test]
    fn frame_budget_times_out() {
        let sv = services();
        let cfg = SessionConfig {
            frames: 2,
            frame_budget: 3,
            ..Default::default()
        };
        let mut s = Session::new(1, cfg).unwrap();
        s.trigger().unwrap();
        s.push_frame(frame(vec![]), &sv).unwrap();
        s.push_frame(frame(vec![]), &sv).unwrap();
        let e = s.push_frame(frame(vec![]), &sv).unwrap_err();
        assert_eq!(e.code, ErrorCode::GateTimeout);
        assert!(e.retriable);
        assert_eq!(s.snapshot().state, SessionState::Failed);
    }

    #[test]
    fn manager_isolates_sessions() {
        let m = SessionManager::new(services());
        let a = m.create(SessionConfig::default()).unwrap().id;
        let b = m.create(SessionConfig { top_k: 1, ..Default::default() }).unwrap().id;
        assert_ne!(a, b);
        m.trigger(a).unwrap();
        m.trigger(b).unwrap();
        for _ in 0..5 {
            m.push_frame(a, frame(scene())).unwrap();
            m.push_frame(b, frame(scene())).unwrap();
        }
        assert_eq!(m.snapshot(a).unwrap().ranked.unwrap().len(), 3);
        assert_eq!(m.snapshot(b).unwrap().ranked.unwrap().len(), 1);
        assert_eq!(m.snapshot(99).unwrap_err().code, ErrorCode::NotFound);
    }
}
