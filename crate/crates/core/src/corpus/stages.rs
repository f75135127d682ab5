use std::collections::HashSet;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::grammar::{parse_action_plan, PlanRecord, Vocabulary};
use crate::rng;
use crate::PromptId;

use super::oracles::{
    AestheticOracle, AlignmentOracle, ArtifactOracle, GoodFrameOracle, OverlayEditor, OverlayVerifier, QualityOracle,
    ScreenOracle, SegmentLocalizer, TutorialOracle,
};
use super::types::{DropRecord, FrameRecord, FrameRef, PairRecord, StageOutput, VideoDrop, VideoRecord};
use super::CorpusError;

pub const STAGE_FILTER: &str = "filter-good-images";
pub const STAGE_OVERLAY: &str = "remove-overlays";
pub const STAGE_ALIGN: &str = "strict-align";
pub const STAGE_ACTIONS: &str = "attach-actions";

const GRID_STEP: f64 = 0.5;
const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    pub quality: f64,
    pub aesthetic: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            quality: 0.5,
            aesthetic: 0.5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScreenOutput {
    pub kept: Vec<VideoRecord>,
    pub dropped: Vec<VideoDrop>,
}

/// Keeps the first record per id, drops non-instructional videos and
/// returns survivors sorted by id.
pub fn dedup_and_screen(videos: Vec<VideoRecord>, oracle: &dyn ScreenOracle) -> ScreenOutput {
    let mut seen = HashSet::new();
    let mut out = ScreenOutput::default();
    let mut unique = Vec::new();
    for (position, v) in videos.into_iter().enumerate() {
        if seen.insert(v.video_id.clone()) {
            unique.push((position, v));
        } else {
            out.dropped.push(VideoDrop {
                video_id: v.video_id,
                position,
                reason: "duplicate".into(),
            });
        }
    }
    let verdicts: Vec<Option<String>> = unique.par_iter().map(|(_, v)| oracle.screen(v)).collect();
    for ((position, v), verdict) in unique.into_iter().zip(verdicts) {
        match verdict {
            Some(reason) => out.dropped.push(VideoDrop {
                video_id: v.video_id,
                position,
                reason,
            }),
            None => out.kept.push(v),
        }
    }
    out.kept.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    out
}

/// Frames nearest to the 2 fps grid `start, start + 0.5, … ≤ end`, chosen
/// among frames inside the segment. Returns frame indices, deduplicated.
pub fn sample_frames(segment: (f64, f64), video: &VideoRecord) -> Result<Vec<usize>, CorpusError> {
    let (start, end) = segment;
    let lo = video.frames.partition_point(|f| f.timestamp < start - TIME_EPS);
    let hi = video.frames.partition_point(|f| f.timestamp <= end + TIME_EPS);
    if lo >= hi {
        return Err(CorpusError::EmptySegment {
            video_id: video.video_id.clone(),
            start,
            end,
        });
    }
    let inside = &video.frames[lo..hi];
    let mut picked: Vec<usize> = Vec::new();
    let mut k = 0u64;
    loop {
        let tau = start + GRID_STEP * k as f64;
        if tau > end + TIME_EPS {
            break;
        }
        let j = inside.partition_point(|f| f.timestamp < tau);
        let best = match (j.checked_sub(1), (j < inside.len()).then_some(j)) {
            (Some(a), Some(b)) if tau - inside[a].timestamp <= inside[b].timestamp - tau => a,
            (Some(_), Some(b)) => b,
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => unreachable!("segment has frames"),
        };
        if picked.last() != Some(&(lo + best)) {
            picked.push(lo + best);
        }
        k += 1;
    }
    Ok(picked)
}

/// Pairs each good frame in a segment with the segment's first sampled frame.
/// Segments without frames are skipped.
pub fn construct_coarse_pairs(
    video: &VideoRecord,
    localizer: &dyn SegmentLocalizer,
    good: &dyn GoodFrameOracle,
) -> Vec<PairRecord> {
    let mut pairs = Vec::new();
    for (k, seg) in localizer.localize(video).into_iter().enumerate() {
        let Ok(sampled) = sample_frames(seg, video) else {
            continue;
        };
        let poor_index = sampled[0];
        let poor = &video.frames[poor_index];
        for &gi in &sampled {
            let g = &video.frames[gi];
            if !good.is_good(g) {
                continue;
            }
            pairs.push(PairRecord {
                pair_id: format!("{}/s{k}/f{gi}", video.video_id),
                video_id: video.video_id.clone(),
                segment: k,
                scene: PromptId(poor.truth.scene_id),
                poor: FrameRef {
                    index: poor_index,
                    frame: poor.clone(),
                },
                good: FrameRef {
                    index: gi,
                    frame: g.clone(),
                },
                poor_cleaned: false,
                actions: None,
                text_cue: None,
                audit: Vec::new(),
            });
        }
    }
    pairs
}

fn run_stage<F>(pairs: Vec<PairRecord>, stage: &str, f: F) -> StageOutput
where
    F: Fn(PairRecord) -> Result<PairRecord, (String, String)> + Sync + Send,
{
    let results: Vec<_> = pairs.into_par_iter().map(f).collect();
    let mut out = StageOutput::default();
    for r in results {
        match r {
            Ok(p) => out.kept.push(p),
            Err((pair_id, reason)) => out.dropped.push(DropRecord {
                pair_id,
                stage: stage.to_string(),
                reason,
            }),
        }
    }
    out
}

/// Drops degenerate pairs (poor not strictly before good), transition
/// artifacts and good frames under either threshold (inclusive).
pub fn filter_good_images(
    pairs: Vec<PairRecord>,
    quality: &dyn QualityOracle,
    aesthetic: &dyn AestheticOracle,
    artifact: &dyn ArtifactOracle,
    thresholds: &Thresholds,
) -> StageOutput {
    run_stage(pairs, STAGE_FILTER, |mut p| {
        if p.poor.frame.timestamp >= p.good.frame.timestamp {
            return Err((p.pair_id, "degenerate-pair".into()));
        }
        let g = &p.good.frame;
        if artifact.has_artifact(g) {
            return Err((p.pair_id, "transition-artifact".into()));
        }
        let q = quality.quality(g);
        if q < thresholds.quality {
            return Err((p.pair_id, "low-quality".into()));
        }
        let a = aesthetic.aesthetic(g);
        if a < thresholds.aesthetic {
            return Err((p.pair_id, "low-aesthetic".into()));
        }
        p.record(STAGE_FILTER, format!("pass quality={q:.3} aesthetic={a:.3}"));
        Ok(p)
    })
}

/// Edit-then-verify loop for poor frames carrying overlays, at most
/// `max_retries` attempts each.
pub fn remove_overlays(
    pairs: Vec<PairRecord>,
    editor: &dyn OverlayEditor,
    verifier: &dyn OverlayVerifier,
    max_retries: u32,
    seed: u64,
) -> StageOutput {
    run_stage(pairs, STAGE_OVERLAY, |mut p| {
        if !editor.has_overlay(&p.poor.frame) {
            if p.verdict(STAGE_OVERLAY).is_none() {
                p.record(STAGE_OVERLAY, "no-overlay");
            }
            return Ok(p);
        }
        for attempt in 1..=max_retries {
            let s = rng::derive_seed(seed, &format!("overlay/{}", p.pair_id), u64::from(attempt));
            let edited: FrameRecord = editor.edit(&p.poor.frame, attempt, s);
            if verifier.verify(&p.poor.frame, &edited) {
                p.poor.frame = edited;
                p.poor_cleaned = true;
                p.record(STAGE_OVERLAY, format!("cleaned attempts={attempt}"));
                return Ok(p);
            }
        }
        Err((p.pair_id, "overlay-verify-exhausted".into()))
    })
}

/// Rejects scene changes, identity changes, new objects and cross-event pairs.
pub fn strict_align(pairs: Vec<PairRecord>, oracle: &dyn AlignmentOracle) -> StageOutput {
    run_stage(pairs, STAGE_ALIGN, |mut p| {
        match oracle.check(&p.poor.frame, &p.good.frame) {
            Some(reason) => Err((p.pair_id, reason)),
            None => {
                p.record(STAGE_ALIGN, "aligned");
                Ok(p)
            }
        }
    })
}

/// Asks the tutorial oracle for each pair's plan, regenerating malformed
/// descriptions up to `max_attempts` times.
pub fn attach_actions(
    pairs: Vec<PairRecord>,
    oracle: &dyn TutorialOracle,
    vocab: &Vocabulary,
    max_attempts: u32,
) -> StageOutput {
    run_stage(pairs, STAGE_ACTIONS, |mut p| {
        if p.actions.as_ref().is_some_and(|a| a.to_plan(vocab).is_ok()) {
            return Ok(p);
        }
        for attempt in 1..=max_attempts {
            let text = oracle.describe(&p, attempt);
            let Ok(tokens) = vocab.encode_line(&text) else {
                continue;
            };
            if let Ok(plan) = parse_action_plan(&tokens, vocab) {
                p.actions = Some(PlanRecord::from_plan(&plan, vocab));
                p.record(STAGE_ACTIONS, format!("attempts={attempt}"));
                return Ok(p);
            }
        }
        Err((p.pair_id, "actions-invalid".into()))
    })
}

/// Seeded uniform test sample; both halves keep the input order.
pub fn split_dataset(
    pairs: Vec<PairRecord>,
    test_count: usize,
    seed: u64,
) -> Result<(Vec<PairRecord>, Vec<PairRecord>), CorpusError> {
    if test_count > pairs.len() {
        return Err(CorpusError::TestCountTooLarge {
            requested: test_count,
            available: pairs.len(),
        });
    }
    let mut r = rng::stream(seed, "corpus/split", 0);
    let test_idx: HashSet<usize> = index::sample(&mut r, pairs.len(), test_count).into_iter().collect();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, p) in pairs.into_iter().enumerate() {
        if test_idx.contains(&i) {
            test.push(p);
        } else {
            train.push(p);
        }
    }
    Ok((train, test))
}
