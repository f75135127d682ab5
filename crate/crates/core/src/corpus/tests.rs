use super::*;
use crate::world::{Lexicon, World, WorldConfig};
use crate::PromptId;

fn truth() -> FrameTruth {
    FrameTruth {
        is_good: false,
        has_overlay: false,
        has_transition_artifact: false,
        quality_score: 0.9,
        aesthetic_score: 0.9,
        person_id: 1,
        scene_id: 0,
        event_id: 0,
        new_object_flag: false,
        overlay_fixed_at: None,
        plan_variant: None,
    }
}

fn frame(ts: f64) -> FrameRecord {
    FrameRecord {
        timestamp: ts,
        features: vec![0.0; 2],
        truth: truth(),
    }
}

fn video(id: &str, times: &[f64], segments: Vec<(f64, f64)>) -> VideoRecord {
    VideoRecord {
        video_id: id.into(),
        frames: times.iter().map(|&t| frame(t)).collect(),
        segments,
        labels: ScreenLabels::default(),
    }
}

fn pair(id: &str, poor: FrameRecord, good: FrameRecord) -> PairRecord {
    PairRecord {
        pair_id: id.into(),
        video_id: "v".into(),
        segment: 0,
        scene: PromptId(0),
        poor: FrameRef { index: 0, frame: poor },
        good: FrameRef { index: 1, frame: good },
        poor_cleaned: false,
        actions: None,
        text_cue: None,
        audit: Vec::new(),
    }
}

fn grid(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64 * 0.5).collect()
}

#[test]
fn dedup_keeps_first_and_screens() {
    let mut a = video("a", &[0.0], vec![]);
    a.frames[0].timestamp = 0.0;
    let mut a2 = a.clone();
    a2.frames[0].timestamp = 9.0;
    let mut ad = video("b", &[0.0], vec![]);
    ad.labels.ad = true;
    let out = dedup_and_screen(vec![a.clone(), a2, ad], &MockJudges);
    assert_eq!(out.kept, vec![a]);
    let reasons: Vec<_> = out.dropped.iter().map(|d| d.reason.as_str()).collect();
    assert_eq!(reasons, vec!["duplicate", "ad"]);
    assert!(dedup_and_screen(vec![], &MockJudges).kept.is_empty());
}

#[test]
fn frame_sampling_examples() {
    let v = video("v", &grid(30), vec![]);
    assert_eq!(sample_frames((0.0, 2.0), &v).unwrap(), vec![0, 1, 2, 3, 4]);
    assert_eq!(sample_frames((10.0, 10.0), &v).unwrap(), vec![20]);
    let sparse = video("s", &[0.0, 1.0, 1.2, 3.0], vec![]);
    assert_eq!(sample_frames((1.1, 1.4), &sparse).unwrap(), vec![2]);
    assert!(matches!(
        sample_frames((1.5, 2.5), &sparse),
        Err(CorpusError::EmptySegment { .. })
    ));
    let jittered = video("j", &[0.0, 0.58, 0.93, 1.5], vec![]);
    assert_eq!(sample_frames((0.0, 1.5), &jittered).unwrap(), vec![0, 1, 2, 3]);
}

#[test]
fn coarse_pairs_use_the_first_sampled_frame() {
    let mut v = video("v", &grid(12), vec![(0.0, 5.0)]);
    v.frames[4].truth.is_good = true;
    v.frames[7].truth.is_good = true;
    let pairs = construct_coarse_pairs(&v, &MockJudges, &MockJudges);
    assert_eq!(pairs.len(), 2);
    assert!(pairs.iter().all(|p| p.poor.index == 0));
    assert_eq!(pairs[0].good.index, 4);
    assert_eq!(pairs[1].good.index, 7);

    v.frames[0].truth.is_good = true;
    let pairs = construct_coarse_pairs(&v, &MockJudges, &MockJudges);
    assert_eq!(pairs.len(), 3);
    let out = filter_good_images(pairs, &MockJudges, &MockJudges, &MockJudges, &Thresholds::default());
    assert_eq!(out.kept.len(), 2);
    assert_eq!(out.dropped[0].reason, "degenerate-pair");

    let none = video("n", &grid(12), vec![(0.0, 5.0)]);
    assert!(construct_coarse_pairs(&none, &MockJudges, &MockJudges).is_empty());
}

#[test]
fn good_image_filter_boundaries() {
    let t = Thresholds::default();
    let mut at = frame(1.0);
    at.truth.quality_score = 0.5;
    at.truth.aesthetic_score = 0.5;
    let mut art = frame(1.0);
    art.truth.has_transition_artifact = true;
    let mut low = frame(1.0);
    low.truth.quality_score = 0.49;
    let pairs = vec![
        pair("at", frame(0.0), at),
        pair("art", frame(0.0), art),
        pair("low", frame(0.0), low),
    ];
    let out = filter_good_images(pairs, &MockJudges, &MockJudges, &MockJudges, &t);
    assert_eq!(out.kept.len(), 1);
    assert_eq!(out.kept[0].pair_id, "at");
    let reasons: Vec<_> = out
        .dropped
        .iter()
        .map(|d| (d.pair_id.as_str(), d.reason.as_str()))
        .collect();
    assert_eq!(reasons, vec![("art", "transition-artifact"), ("low", "low-quality")]);

    let clean: Vec<_> = (0..4).map(|i| pair(&format!("p{i}"), frame(0.0), frame(1.0))).collect();
    let out = filter_good_images(clean.clone(), &MockJudges, &MockJudges, &MockJudges, &t);
    let ids: Vec<_> = out.kept.iter().map(|p| p.pair_id.clone()).collect();
    assert_eq!(ids, vec!["p0", "p1", "p2", "p3"]);
}

#[test]
fn overlay_retry_loop() {
    let mut second = frame(0.0);
    second.truth.has_overlay = true;
    second.truth.overlay_fixed_at = Some(2);
    let mut never = frame(0.0);
    never.truth.has_overlay = true;
    let pairs = vec![
        pair("clean", frame(0.0), frame(1.0)),
        pair("second", second, frame(1.0)),
        pair("never", never, frame(1.0)),
    ];
    let out = remove_overlays(pairs, &MockJudges, &MockJudges, 3, 0);
    assert_eq!(out.kept.len(), 2);
    assert_eq!(out.kept[0].verdict(STAGE_OVERLAY), Some("no-overlay"));
    assert!(!out.kept[0].poor_cleaned);
    assert_eq!(out.kept[1].verdict(STAGE_OVERLAY), Some("cleaned attempts=2"));
    assert!(out.kept[1].poor_cleaned && !out.kept[1].poor.frame.truth.has_overlay);
    assert_eq!(out.dropped[0].reason, "overlay-verify-exhausted");

    let again = remove_overlays(out.kept.clone(), &MockJudges, &MockJudges, 3, 0);
    assert_eq!(again.kept, out.kept);
}

#[test]
fn strict_alignment_reasons() {
    let mut person = frame(1.0);
    person.truth.person_id = 2;
    let mut obj = frame(1.0);
    obj.truth.new_object_flag = true;
    let mut scene = frame(1.0);
    scene.truth.scene_id = 3;
    let mut event = frame(1.0);
    event.truth.event_id = 5;
    let pairs = vec![
        pair("ok", frame(0.0), frame(1.0)),
        pair("person", frame(0.0), person),
        pair("obj", frame(0.0), obj),
        pair("scene", frame(0.0), scene),
        pair("event", frame(0.0), event),
    ];
    let out = strict_align(pairs, &MockJudges);
    assert_eq!(out.kept.len(), 1);
    let reasons: Vec<_> = out.dropped.iter().map(|d| d.reason.as_str()).collect();
    assert_eq!(reasons, vec!["identity", "new-object", "scene", "cross-event"]);
}

#[test]
fn split_examples() {
    let pairs: Vec<_> = (0..50)
        .map(|i| pair(&format!("p{i}"), frame(0.0), frame(1.0)))
        .collect();
    let (train, test) = split_dataset(pairs.clone(), 7, 3).unwrap();
    assert_eq!((train.len(), test.len()), (43, 7));
    assert_eq!(
        split_dataset(pairs.clone(), 7, 3).unwrap(),
        (train.clone(), test.clone())
    );
    let mut ids: Vec<_> = train.iter().chain(&test).map(|p| p.pair_id.clone()).collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 50);
    let (all, none) = split_dataset(pairs.clone(), 0, 3).unwrap();
    assert_eq!((all.len(), none.len()), (50, 0));
    assert!(matches!(
        split_dataset(pairs, 51, 3),
        Err(CorpusError::TestCountTooLarge { .. })
    ));
}

#[test]
fn small_pipeline_is_audited_and_stages_are_idempotent() {
    let w = World::generate(Lexicon::default(), WorldConfig::default()).unwrap();
    let gen = GeneratorConfig {
        clean_videos: 60,
        ad_videos: 5,
        irrelevant_videos: 6,
        showcase_videos: 7,
        duplicate_videos: 8,
        final_pairs: 150,
        ..Default::default()
    };
    let videos = generate_videos(&w, &gen).unwrap();
    let judges = MockJudges;
    let tutor = MockTutorialOracle::new(w.clone());
    let oracles = MiningOracles::mock(&judges, &tutor);
    let cfg = MiningConfig {
        test_count: 20,
        ..Default::default()
    };
    let res = mine_corpus(videos.clone(), &oracles, &cfg, &w.vocab).unwrap();
    let r = &res.report;
    assert_eq!(r.videos_in, 86);
    assert_eq!(r.videos_kept, 60);
    assert_eq!(r.final_pairs, 150);
    assert_eq!((r.train, r.test), (130, 20));
    assert_eq!(r.coarse_pairs, r.final_pairs + res.pair_drops.len());
    assert!(res.train.iter().chain(&res.test).all(|p| {
        p.poor.frame.timestamp < p.good.frame.timestamp
            && p.actions.as_ref().is_some_and(|a| a.to_plan(&w.vocab).is_ok())
            && p.verdict(STAGE_ALIGN) == Some("aligned")
    }));

    let again = mine_corpus(videos, &oracles, &cfg, &w.vocab).unwrap();
    assert_eq!(again.train, res.train);
    assert_eq!(again.report, res.report);

    let finals: Vec<_> = res.train.iter().chain(&res.test).cloned().collect();
    let t = Thresholds::default();
    assert_eq!(
        filter_good_images(finals.clone(), &judges, &judges, &judges, &t).kept,
        finals
    );
    assert_eq!(remove_overlays(finals.clone(), &judges, &judges, 3, 0).kept, finals);
    assert_eq!(strict_align(finals.clone(), &judges).kept, finals);
    assert_eq!(attach_actions(finals.clone(), &tutor, &w.vocab, 3).kept, finals);
}

#[test]
fn malformed_tutorial_output_is_regenerated() {
    let w = World::generate(Lexicon::default(), WorldConfig::default()).unwrap();
    let mut tutor = MockTutorialOracle::new(w.clone());
    tutor.malformed_percent = 100;
    let mut good = frame(1.0);
    good.truth.plan_variant = Some(0);
    let out = attach_actions(vec![pair("x", frame(0.0), good.clone())], &tutor, &w.vocab, 3);
    assert_eq!(out.kept[0].verdict(STAGE_ACTIONS), Some("attempts=2"));
    let out = attach_actions(vec![pair("x", frame(0.0), good)], &tutor, &w.vocab, 1);
    assert_eq!(out.dropped[0].reason, "actions-invalid");
}

#[test]
fn jsonl_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.jsonl");
    let vids = vec![video("a", &grid(3), vec![(0.0, 1.0)]), video("b", &grid(2), vec![])];
    write_jsonl(&path, &vids).unwrap();
    let back: Vec<VideoRecord> = read_jsonl(&path).unwrap();
    assert_eq!(back, vids);
}
