//! Judgment interfaces used by the mining stages, and mocks that read the
//! generator's planted ground truth.

use crate::grammar::Vocabulary;
use crate::rng::stable_hash;
use crate::world::World;
use crate::PromptId;

use super::types::{FrameRecord, PairRecord, VideoRecord};

/// Returns the exclusion reason for non-instructional videos.
pub trait ScreenOracle: Sync {
    fn screen(&self, video: &VideoRecord) -> Option<String>;
}

pub trait SegmentLocalizer: Sync {
    fn localize(&self, video: &VideoRecord) -> Vec<(f64, f64)>;
}

pub trait GoodFrameOracle: Sync {
    fn is_good(&self, frame: &FrameRecord) -> bool;
}

pub trait QualityOracle: Sync {
    fn quality(&self, frame: &FrameRecord) -> f64;
}

pub trait AestheticOracle: Sync {
    fn aesthetic(&self, frame: &FrameRecord) -> f64;
}

pub trait ArtifactOracle: Sync {
    fn has_artifact(&self, frame: &FrameRecord) -> bool;
}

pub trait OverlayEditor: Sync {
    fn has_overlay(&self, frame: &FrameRecord) -> bool;
    /// Attempts are numbered from 1; `seed` varies per attempt.
    fn edit(&self, frame: &FrameRecord, attempt: u32, seed: u64) -> FrameRecord;
}

pub trait OverlayVerifier: Sync {
    /// Overlays gone, scene and subject identity unchanged.
    fn verify(&self, original: &FrameRecord, edited: &FrameRecord) -> bool;
}

/// Returns the rejection reason for a misaligned pair.
pub trait AlignmentOracle: Sync {
    fn check(&self, poor: &FrameRecord, good: &FrameRecord) -> Option<String>;
}

/// Describes the edit between a pair's frames as a plan line.
pub trait TutorialOracle: Sync {
    fn describe(&self, pair: &PairRecord, attempt: u32) -> String;
}

/// Mock for every frame-level judgment.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockJudges;

impl ScreenOracle for MockJudges {
    fn screen(&self, video: &VideoRecord) -> Option<String> {
        let l = video.labels;
        if l.ad {
            Some("ad".into())
        } else if l.irrelevant {
            Some("irrelevant".into())
        } else if l.showcase_only {
            Some("showcase-only".into())
        } else {
            None
        }
    }
}

impl SegmentLocalizer for MockJudges {
    fn localize(&self, video: &VideoRecord) -> Vec<(f64, f64)> {
        video.segments.clone()
    }
}

impl GoodFrameOracle for MockJudges {
    fn is_good(&self, frame: &FrameRecord) -> bool {
        frame.truth.is_good
    }
}

impl QualityOracle for MockJudges {
    fn quality(&self, frame: &FrameRecord) -> f64 {
        frame.truth.quality_score
    }
}

impl AestheticOracle for MockJudges {
    fn aesthetic(&self, frame: &FrameRecord) -> f64 {
        frame.truth.aesthetic_score
    }
}

impl ArtifactOracle for MockJudges {
    fn has_artifact(&self, frame: &FrameRecord) -> bool {
        frame.truth.has_transition_artifact
    }
}

impl OverlayEditor for MockJudges {
    fn has_overlay(&self, frame: &FrameRecord) -> bool {
        frame.truth.has_overlay
    }

    fn edit(&self, frame: &FrameRecord, attempt: u32, _seed: u64) -> FrameRecord {
        let mut out = frame.clone();
        out.truth.has_overlay = !frame.truth.overlay_fixed_at.is_some_and(|k| attempt >= k);
        out
    }
}

impl OverlayVerifier for MockJudges {
    fn verify(&self, original: &FrameRecord, edited: &FrameRecord) -> bool {
        !edited.truth.has_overlay
            && edited.truth.scene_id == original.truth.scene_id
            && edited.truth.person_id == original.truth.person_id
    }
}

impl AlignmentOracle for MockJudges {
    fn check(&self, poor: &FrameRecord, good: &FrameRecord) -> Option<String> {
        let (p, g) = (&poor.truth, &good.truth);
        if p.scene_id != g.scene_id {
            Some("scene".into())
        } else if p.person_id != g.person_id {
            Some("identity".into())
        } else if g.new_object_flag {
            Some("new-object".into())
        } else if p.event_id != g.event_id {
            Some("cross-event".into())
        } else {
            None
        }
    }
}

/// Mock tutorial narrator: renders the plan variant that produced the good
/// frame. On the first attempt a deterministic fraction of pairs come back
/// truncated; later attempts are always well formed.
#[derive(Debug, Clone)]
pub struct MockTutorialOracle {
    world: World,
    /// Fraction of pairs whose first description is malformed, in percent.
    pub malformed_percent: u64,
}

impl MockTutorialOracle {
    pub fn new(world: World) -> Self {
        Self {
            world,
            malformed_percent: 10,
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.world.vocab
    }
}

impl TutorialOracle for MockTutorialOracle {
    fn describe(&self, pair: &PairRecord, attempt: u32) -> String {
        let variant = pair.good.frame.truth.plan_variant.unwrap_or(0);
        let Some(plan) = self.world.variant_plan(PromptId(pair.scene.0), variant) else {
            return String::new();
        };
        let mut tokens = plan.raw_tokens().to_vec();
        if attempt <= 1 && stable_hash(&pair.pair_id) % 100 < self.malformed_percent {
            tokens.pop();
        }
        self.world.vocab.render(&tokens)
    }
}
