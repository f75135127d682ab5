//! Seeded generator of synthetic tutorial videos with planted funnel counts.
//!
//! Every pair that should be dropped gets exactly one planted defect, so the
//! mining pipeline with mock oracles recovers the configured counts exactly.

use std::collections::HashSet;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::world::World;
use crate::PromptId;

use super::types::{FrameRecord, FrameTruth, ScreenLabels, VideoRecord};
use super::CorpusError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub clean_videos: usize,
    pub ad_videos: usize,
    pub irrelevant_videos: usize,
    pub showcase_videos: usize,
    pub duplicate_videos: usize,
    /// Pairs that survive every stage.
    pub final_pairs: usize,
    pub overlay_rate: f64,
    pub exhausted_rate: f64,
    pub degenerate_rate: f64,
    pub ideal_plan_rate: f64,
    pub feature_noise: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 2026,
            clean_videos: 2144,
            ad_videos: 1100,
            irrelevant_videos: 1300,
            showcase_videos: 800,
            duplicate_videos: 356,
            final_pairs: 9071,
            overlay_rate: 0.3,
            exhausted_rate: 0.02,
            degenerate_rate: 0.01,
            ideal_plan_rate: 0.75,
            feature_noise: 0.02,
        }
    }
}

impl GeneratorConfig {
    pub fn total_videos(&self) -> usize {
        self.clean_videos + self.ad_videos + self.irrelevant_videos + self.showcase_videos + self.duplicate_videos
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Fate {
    Survive,
    LowQuality,
    LowAesthetic,
    Artifact,
    Identity,
    Scene,
    NewObject,
    CrossEvent,
}

const DROP_FATES: [Fate; 7] = [
    Fate::LowQuality,
    Fate::LowAesthetic,
    Fate::Artifact,
    Fate::Identity,
    Fate::Scene,
    Fate::NewObject,
    Fate::CrossEvent,
];

struct SegmentLayout {
    gap: usize,
    len: usize,
    goods: Vec<usize>,
    degenerate: bool,
    overlay: Option<Option<u32>>,
}

struct VideoLayout {
    scene: u32,
    person: u32,
    tail: usize,
    segments: Vec<SegmentLayout>,
}

fn layout_video(r: &mut ChaCha8Rng, cfg: &GeneratorConfig, num_scenes: u32) -> VideoLayout {
    let segments = (0..r.random_range(2..=4))
        .map(|_| {
            let len = r.random_range(4..=10usize);
            let n_good = r.random_range(1..=3usize);
            let mut goods = index::sample(r, len - 1, n_good).into_vec();
            goods.iter_mut().for_each(|g| *g += 1);
            goods.sort_unstable();
            let overlay = if r.random_bool(cfg.exhausted_rate) {
                Some(None)
            } else if r.random_bool(cfg.overlay_rate) {
                let u: f64 = r.random();
                Some(Some(if u < 0.7 {
                    1
                } else if u < 0.9 {
                    2
                } else {
                    3
                }))
            } else {
                None
            };
            SegmentLayout {
                gap: r.random_range(1..=4),
                len,
                goods,
                degenerate: r.random_bool(cfg.degenerate_rate),
                overlay,
            }
        })
        .collect();
    VideoLayout {
        scene: r.random_range(0..num_scenes),
        person: r.random_range(0..10_000),
        tail: r.random_range(1..=3),
        segments,
    }
}

fn video_id(seed: u64, i: usize) -> String {
    format!("v{:016x}", rng::derive_seed(seed, "gen/id", i as u64))
}

fn noisy(base: &[f64], noise: &Normal<f64>, r: &mut ChaCha8Rng) -> Vec<f64> {
    base.iter().map(|x| x + noise.sample(r)).collect()
}

fn plain_truth(scene: u32, person: u32, event: u32, r: &mut ChaCha8Rng) -> FrameTruth {
    FrameTruth {
        is_good: false,
        has_overlay: false,
        has_transition_artifact: false,
        quality_score: r.random(),
        aesthetic_score: r.random(),
        person_id: person,
        scene_id: scene,
        event_id: event,
        new_object_flag: false,
        overlay_fixed_at: None,
        plan_variant: None,
    }
}

#[allow(clippy::too_many_arguments)]
fn build_clean_video(
    id: String,
    layout: &VideoLayout,
    fates: &[Fate],
    world: &World,
    cfg: &GeneratorConfig,
    num_scenes: u32,
    r: &mut ChaCha8Rng,
) -> VideoRecord {
    let noise = Normal::new(0.0, cfg.feature_noise.max(0.0)).expect("finite noise");
    let prof = world.profile(PromptId(layout.scene)).expect("scene exists");
    let mut frames = Vec::new();
    let mut segments = Vec::new();
    let mut grid = 0usize;
    let mut fate_iter = fates.iter();
    let jitter = |r: &mut ChaCha8Rng, g: usize| if g == 0 { 0.0 } else { r.random_range(-0.1..0.1) };

    for (k, seg) in layout.segments.iter().enumerate() {
        let event = k as u32;
        for _ in 0..seg.gap {
            let ts = grid as f64 * 0.5 + jitter(r, grid);
            let truth = plain_truth(layout.scene, layout.person, event, r);
            frames.push(FrameRecord {
                timestamp: ts,
                features: noisy(&prof.poor_latent, &noise, r),
                truth,
            });
            grid += 1;
        }
        let start = grid as f64 * 0.5;
        for j in 0..seg.len {
            let on_edge = j == 0 || j + 1 == seg.len;
            let ts = grid as f64 * 0.5 + if on_edge { 0.0 } else { jitter(r, grid) };
            let mut truth = plain_truth(layout.scene, layout.person, event, r);
            let mut features = noisy(&prof.poor_latent, &noise, r);
            if j == 0 {
                truth.is_good = seg.degenerate;
                if let Some(fixed) = seg.overlay {
                    truth.has_overlay = true;
                    truth.overlay_fixed_at = fixed;
                }
            }
            if seg.goods.contains(&j) {
                let fate = *fate_iter.next().expect("one fate per good frame");
                let variant = if r.random_bool(cfg.ideal_plan_rate) {
                    0
                } else {
                    r.random_range(1..=3)
                };
                let plan = world.variant_plan(prof.id, variant).expect("variant exists");
                features = noisy(&world.apply(&prof.poor_latent, &plan), &noise, r);
                truth.is_good = true;
                truth.plan_variant = Some(variant);
                truth.quality_score = r.random_range(0.55..1.0);
                truth.aesthetic_score = r.random_range(0.55..1.0);
                match fate {
                    Fate::Survive => {}
                    Fate::LowQuality => truth.quality_score = r.random_range(0.0..0.45),
                    Fate::LowAesthetic => truth.aesthetic_score = r.random_range(0.0..0.45),
                    Fate::Artifact => truth.has_transition_artifact = true,
                    Fate::Identity => truth.person_id = layout.person + 10_000,
                    Fate::Scene => truth.scene_id = (layout.scene + 1) % num_scenes.max(2),
                    Fate::NewObject => truth.new_object_flag = true,
                    Fate::CrossEvent => truth.event_id = event + 1_000,
                }
            }
            frames.push(FrameRecord {
                timestamp: ts,
                features,
                truth,
            });
            grid += 1;
        }
        segments.push((start, (grid - 1) as f64 * 0.5));
    }
    for _ in 0..layout.tail {
        let ts = grid as f64 * 0.5 + jitter(r, grid);
        let truth = plain_truth(layout.scene, layout.person, layout.segments.len() as u32, r);
        frames.push(FrameRecord {
            timestamp: ts,
            features: noisy(&prof.poor_latent, &noise, r),
            truth,
        });
        grid += 1;
    }
    VideoRecord {
        video_id: id,
        frames,
        segments,
        labels: ScreenLabels::default(),
    }
}

fn build_screened_video(id: String, labels: ScreenLabels, dim: usize, r: &mut ChaCha8Rng) -> VideoRecord {
    let n = r.random_range(3..=8);
    let frames = (0..n)
        .map(|g| FrameRecord {
            timestamp: g as f64 * 0.5,
            features: vec![0.0; dim],
            truth: plain_truth(0, 0, 0, r),
        })
        .collect();
    VideoRecord {
        video_id: id,
        frames,
        segments: vec![(0.0, (n - 1) as f64 * 0.5)],
        labels,
    }
}

/// Generates the raw video list (with duplicates interleaved after their originals).
pub fn generate_videos(world: &World, cfg: &GeneratorConfig) -> Result<Vec<VideoRecord>, CorpusError> {
    let num_scenes = world.profiles().len() as u32;
    let mut r = rng::stream(cfg.seed, "gen/layout", 0);
    let layouts: Vec<VideoLayout> = (0..cfg.clean_videos)
        .map(|_| layout_video(&mut r, cfg, num_scenes))
        .collect();

    // Every good frame of a segment with a recoverable overlay is a candidate survivor.
    let mut eligible = Vec::new();
    let mut slot = 0usize;
    for l in &layouts {
        for s in &l.segments {
            for _ in &s.goods {
                if s.overlay != Some(None) {
                    eligible.push(slot);
                }
                slot += 1;
            }
        }
    }
    if eligible.len() < cfg.final_pairs {
        return Err(CorpusError::Generator(format!(
            "only {} candidate pairs for {} requested survivors",
            eligible.len(),
            cfg.final_pairs
        )));
    }
    let mut fr = rng::stream(cfg.seed, "gen/fates", 0);
    let survivors: HashSet<usize> = index::sample(&mut fr, eligible.len(), cfg.final_pairs)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    let eligible: HashSet<usize> = eligible.into_iter().collect();
    let fates: Vec<Fate> = (0..slot)
        .map(|i| {
            if survivors.contains(&i) || !eligible.contains(&i) {
                Fate::Survive
            } else {
                DROP_FATES[fr.random_range(0..DROP_FATES.len())]
            }
        })
        .collect();

    let mut unique = Vec::with_capacity(cfg.total_videos());
    let mut offset = 0;
    let mut vr = rng::stream(cfg.seed, "gen/frames", 0);
    for l in &layouts {
        let n: usize = l.segments.iter().map(|s| s.goods.len()).sum();
        let id = video_id(cfg.seed, unique.len());
        unique.push(build_clean_video(
            id,
            l,
            &fates[offset..offset + n],
            world,
            cfg,
            num_scenes,
            &mut vr,
        ));
        offset += n;
    }
    let groups = [
        (
            cfg.ad_videos,
            ScreenLabels {
                ad: true,
                ..Default::default()
            },
        ),
        (
            cfg.irrelevant_videos,
            ScreenLabels {
                irrelevant: true,
                ..Default::default()
            },
        ),
        (
            cfg.showcase_videos,
            ScreenLabels {
                showcase_only: true,
                ..Default::default()
            },
        ),
    ];
    for (count, labels) in groups {
        for _ in 0..count {
            let id = video_id(cfg.seed, unique.len());
            unique.push(build_screened_video(id, labels, world.latent_dim(), &mut vr));
        }
    }

    let mut sr = rng::stream(cfg.seed, "gen/order", 0);
    rand::seq::SliceRandom::shuffle(unique.as_mut_slice(), &mut sr);
    if cfg.duplicate_videos > 0 && unique.is_empty() {
        return Err(CorpusError::Generator("duplicates need at least one video".into()));
    }
    let mut out = unique;
    for _ in 0..cfg.duplicate_videos {
        let n = out.len();
        let original = sr.random_range(0..n);
        let copy = out[original].clone();
        let at = sr.random_range(original + 1..=n);
        out.insert(at, copy);
    }
    Ok(out)
}
