//! Mining aligned (poor, good, plan) pairs from synthetic tutorial videos.
//!
//! Stages, in order: deduplicate and screen videos, localize event segments
//! and sample them at 2 fps, pair each good frame with its segment's first
//! frame, filter good images, remove overlays from poor frames with a
//! verify-and-retry loop, enforce strict alignment, attach action plans and
//! split into train and test.

mod generator;
mod oracles;
mod stages;
mod types;

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::Vocabulary;

pub use generator::{generate_videos, GeneratorConfig};
pub use oracles::{
    AestheticOracle, AlignmentOracle, ArtifactOracle, GoodFrameOracle, MockJudges, MockTutorialOracle, OverlayEditor,
    OverlayVerifier, QualityOracle, ScreenOracle, SegmentLocalizer, TutorialOracle,
};
pub use stages::{
    attach_actions, construct_coarse_pairs, dedup_and_screen, filter_good_images, remove_overlays, sample_frames,
    split_dataset, strict_align, ScreenOutput, Thresholds, STAGE_ACTIONS, STAGE_ALIGN, STAGE_FILTER, STAGE_OVERLAY,
};
pub use types::{
    AuditEntry, DropRecord, FrameRecord, FrameRef, FrameTruth, PairRecord, ScreenLabels, StageOutput, VideoDrop,
    VideoRecord,
};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("segment [{start}, {end}] of video {video_id} contains no frames")]
    EmptySegment { video_id: String, start: f64, end: f64 },
    #[error("test count {requested} exceeds the {available} available pairs")]
    TestCountTooLarge { requested: usize, available: usize },
    #[error("generator: {0}")]
    Generator(String),
    #[error("invalid mining config: {0}")]
    BadConfig(String),
    #[error("{path}:{line}: {source}")]
    Parse {
        path: String,
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiningConfig {
    pub thresholds: Thresholds,
    pub max_retries: u32,
    pub tutorial_attempts: u32,
    pub test_count: usize,
    pub seed: u64,
    /// Worker threads for per-video and per-pair oracle calls.
    pub parallelism: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            thresholds: Thresholds::default(),
            max_retries: 3,
            tutorial_attempts: 3,
            test_count: 903,
            seed: 0,
            parallelism: 8,
        }
    }
}

/// The oracles consulted by [`mine_corpus`].
pub struct MiningOracles<'a> {
    pub screen: &'a dyn ScreenOracle,
    pub localizer: &'a dyn SegmentLocalizer,
    pub good: &'a dyn GoodFrameOracle,
    pub quality: &'a dyn QualityOracle,
    pub aesthetic: &'a dyn AestheticOracle,
    pub artifact: &'a dyn ArtifactOracle,
    pub editor: &'a dyn OverlayEditor,
    pub verifier: &'a dyn OverlayVerifier,
    pub alignment: &'a dyn AlignmentOracle,
    pub tutorial: &'a dyn TutorialOracle,
}

impl<'a> MiningOracles<'a> {
    pub fn mock(judges: &'a MockJudges, tutorial: &'a dyn TutorialOracle) -> Self {
        Self {
            screen: judges,
            localizer: judges,
            good: judges,
            quality: judges,
            aesthetic: judges,
            artifact: judges,
            editor: judges,
            verifier: judges,
            alignment: judges,
            tutorial,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FunnelReport {
    pub videos_in: usize,
    pub videos_unique: usize,
    pub videos_kept: usize,
    pub video_drops: BTreeMap<String, usize>,
    pub coarse_pairs: usize,
    pub after_filter: usize,
    pub after_overlay: usize,
    pub after_align: usize,
    pub final_pairs: usize,
    pub train: usize,
    pub test: usize,
    /// stage -> reason -> count
    pub pair_drops: BTreeMap<String, BTreeMap<String, usize>>,
}

#[derive(Debug, Clone, Default)]
pub struct MiningResult {
    pub report: FunnelReport,
    pub video_drops: Vec<VideoDrop>,
    pub pair_drops: Vec<DropRecord>,
    pub train: Vec<PairRecord>,
    pub test: Vec<PairRecord>,
}

/// Runs every stage with a bounded worker pool.
pub fn mine_corpus(
    videos: Vec<VideoRecord>,
    oracles: &MiningOracles<'_>,
    cfg: &MiningConfig,
    vocab: &Vocabulary,
) -> Result<MiningResult, CorpusError> {
    if cfg.max_retries == 0 || cfg.tutorial_attempts == 0 {
        return Err(CorpusError::BadConfig("retry limits must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallelism.max(1))
        .build()
        .map_err(|e| CorpusError::BadConfig(e.to_string()))?;
    pool.install(|| run_pipeline(videos, oracles, cfg, vocab))
}

fn run_pipeline(
    videos: Vec<VideoRecord>,
    oracles: &MiningOracles<'_>,
    cfg: &MiningConfig,
    vocab: &Vocabulary,
) -> Result<MiningResult, CorpusError> {
    let mut report = FunnelReport {
        videos_in: videos.len(),
        ..Default::default()
    };
    let screened = dedup_and_screen(videos, oracles.screen);
    report.videos_kept = screened.kept.len();
    for d in &screened.dropped {
        *report.video_drops.entry(d.reason.clone()).or_default() += 1;
    }
    report.videos_unique = report.videos_in - report.video_drops.get("duplicate").copied().unwrap_or(0);

    let coarse: Vec<PairRecord> = screened
        .kept
        .par_iter()
        .map(|v| construct_coarse_pairs(v, oracles.localizer, oracles.good))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    report.coarse_pairs = coarse.len();

    let mut drops = Vec::new();
    let mut take = |out: StageOutput| {
        drops.extend(out.dropped);
        out.kept
    };
    let p1 = take(filter_good_images(
        coarse,
        oracles.quality,
        oracles.aesthetic,
        oracles.artifact,
        &cfg.thresholds,
    ));
    report.after_filter = p1.len();
    let p2 = take(remove_overlays(
        p1,
        oracles.editor,
        oracles.verifier,
        cfg.max_retries,
        cfg.seed,
    ));
    report.after_overlay = p2.len();
    let p3 = take(strict_align(p2, oracles.alignment));
    report.after_align = p3.len();
    let finals = take(attach_actions(p3, oracles.tutorial, vocab, cfg.tutorial_attempts));
    report.final_pairs = finals.len();

    for d in &drops {
        *report
            .pair_drops
            .entry(d.stage.clone())
            .or_default()
            .entry(d.reason.clone())
            .or_default() += 1;
    }
    let (train, test) = split_dataset(finals, cfg.test_count, cfg.seed)?;
    report.train = train.len();
    report.test = test.len();
    Ok(MiningResult {
        report,
        video_drops: screened.dropped,
        pair_drops: drops,
        train,
        test,
    })
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| CorpusError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            source,
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
