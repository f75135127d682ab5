use serde::{Deserialize, Serialize};

use crate::grammar::PlanRecord;
use crate::PromptId;

/// Ground-truth annotations planted by the generator. Only mock oracles read
/// these; pipeline stages see them through oracle verdicts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameTruth {
    pub is_good: bool,
    pub has_overlay: bool,
    pub has_transition_artifact: bool,
    pub quality_score: f64,
    pub aesthetic_score: f64,
    pub person_id: u32,
    pub scene_id: u32,
    pub event_id: u32,
    pub new_object_flag: bool,
    /// Edit attempt on which overlay removal succeeds; `None` never succeeds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlay_fixed_at: Option<u32>,
    /// Which plan variant produced this frame (good frames only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan_variant: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub timestamp: f64,
    /// Latent embedding of the frame.
    pub features: Vec<f64>,
    pub truth: FrameTruth,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScreenLabels {
    pub ad: bool,
    pub irrelevant: bool,
    pub showcase_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub video_id: String,
    pub frames: Vec<FrameRecord>,
    /// Event intervals `(start, end)` in seconds.
    pub segments: Vec<(f64, f64)>,
    pub labels: ScreenLabels,
}

impl VideoRecord {
    pub fn duration(&self) -> f64 {
        self.frames.last().map_or(0.0, |f| f.timestamp)
    }

    /// Frames strictly increasing; segments ordered, disjoint and in range.
    pub fn is_well_formed(&self) -> bool {
        let frames_ok = self.frames.windows(2).all(|w| w[0].timestamp < w[1].timestamp);
        let segs_ok = self
            .segments
            .iter()
            .all(|&(a, b)| a <= b && a >= 0.0 && b <= self.duration())
            && self.segments.windows(2).all(|w| w[0].1 < w[1].0);
        frames_ok && segs_ok
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRef {
    pub index: usize,
    pub frame: FrameRecord,
}

/// One verdict in a pair's audit trail. Re-running a stage replaces its entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub stage: String,
    pub verdict: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair_id: String,
    pub video_id: String,
    pub segment: usize,
    pub scene: PromptId,
    pub poor: FrameRef,
    pub good: FrameRef,
    /// Set once the overlay stage has replaced `poor` with its cleaned edit.
    #[serde(default)]
    pub poor_cleaned: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actions: Option<PlanRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_cue: Option<String>,
    #[serde(default)]
    pub audit: Vec<AuditEntry>,
}

impl PairRecord {
    pub fn record(&mut self, stage: &str, verdict: impl Into<String>) {
        let verdict = verdict.into();
        match self.audit.iter_mut().find(|e| e.stage == stage) {
            Some(e) => e.verdict = verdict,
            None => self.audit.push(AuditEntry {
                stage: stage.to_string(),
                verdict,
            }),
        }
    }

    pub fn verdict(&self, stage: &str) -> Option<&str> {
        self.audit.iter().find(|e| e.stage == stage).map(|e| e.verdict.as_str())
    }
}

/// A pair removed by a stage, with the single reason it was dropped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropRecord {
    pub pair_id: String,
    pub stage: String,
    pub reason: String,
}

/// A video removed during deduplication or screening.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoDrop {
    pub video_id: String,
    pub position: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StageOutput {
    pub kept: Vec<PairRecord>,
    pub dropped: Vec<DropRecord>,
}
