use std::path::Path;
use std::sync::Arc;

use partsight_core::assistant::{ErrorCode, FrameInput, Services, SessionConfig, SessionManager, SessionState};
use partsight_core::corruptions::{build_corrupted_set, CorruptionProfile, Registry};
use partsight_core::detorch::{Detection, MockDetector};
use partsight_core::detpost::{rank_topk, DepthMap, FusedDetection};
use partsight_core::evalmetrics::{evaluate_grouped, load_ground_truth, DatasetLayout};
use partsight_core::fixtures::{background, mask_set};
use partsight_core::geometry::{BoundingBox, Channels, PixelImage};
use partsight_core::knowledge::{
    build_index, compose_context, load_knowledge_base, HashingEmbedder, KnowledgeIndex, RetrievalConfig, Responder,
    TemplateResponder,
};
use partsight_core::synthgen::{generate_into, CompositionConfig, MaskLibrary, Sources};
use partsight_core::Exec;

fn bx(a: [f64; 4]) -> BoundingBox {
    BoundingBox::from_array(a).unwrap()
}

fn golden_kb() -> KnowledgeIndex {
    let kb = load_knowledge_base(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/golden_kb.json")).unwrap();
    build_index(&kb, &HashingEmbedder::default(), Exec::Sequential).unwrap()
}

fn fused(label: &str, b: [f64; 4], confidence: f64) -> FusedDetection {
    FusedDetection {
        label: label.into(),
        bbox: bx(b),
        confidence,
        votes: 5,
        frames: vec![0, 1, 2, 3, 4],
        members: Vec::new(),
    }
}

// three parts on a 640x360 frame; depths 3.8, 1.2 and 2.5
const PARTS: [(&str, [f64; 4], f32); 3] = [
    ("drive_shaft", [40.0, 60.0, 200.0, 120.0], 3.8),
    ("gear_cover", [260.0, 40.0, 420.0, 200.0], 1.2),
    ("bearing_housing", [460.0, 150.0, 600.0, 290.0], 2.5),
];

fn depth_map() -> DepthMap {
    let mut d = DepthMap::constant(640, 360, 10.0).unwrap();
    for (_, b, z) in PARTS {
        d.fill_box(&bx(b), z);
    }
    d
}

#[test]
fn corrupted_set_reports_one_group_per_tag() {
    let tmp = tempfile::tempdir().unwrap();
    let clean = tmp.path().join("clean");
    let sources = Sources {
        backgrounds: vec![("bg".into(), background(160, 120, 1))],
        library: MaskLibrary::from_masks(mask_set(3, 1, 32, 1).unwrap()).unwrap(),
    };
    let config = CompositionConfig {
        output_width: 160,
        output_height: 120,
        ..CompositionConfig::default()
    };
    generate_into(&sources, &config, 20, "test", 4, &clean, Exec::Parallel).unwrap();
    let out = tmp.path().join("corrupt");
    let specs = CorruptionProfile::default_profile().specs;
    let summary = build_corrupted_set(&clean, &specs, 9, &out, &Registry::default(), Exec::Parallel).unwrap();
    assert_eq!(summary.total_images, 220);
    assert_eq!(summary.per_tag.len(), 11);

    let classes: Vec<String> = std::fs::read_to_string(clean.join("classes.txt"))
        .unwrap()
        .lines()
        .map(str::to_owned)
        .collect();
    std::fs::copy(clean.join("classes.txt"), out.join("classes.txt")).unwrap();
    let mut images = load_ground_truth(&DatasetLayout::locate(&out).unwrap(), &classes).unwrap();
    assert_eq!(images.len(), 220);
    for img in &mut images {
        img.predictions = img
            .truths
            .iter()
            .map(|t| Detection {
                label: t.label.clone(),
                bbox: t.bbox,
                confidence: 0.9,
                frame_index: 0,
            })
            .collect();
    }
    let (overall, groups) = evaluate_grouped(&images, &classes, 0.4, Exec::Parallel);
    assert_eq!(groups.len(), 11);
    assert_eq!(groups.keys().cloned().collect::<Vec<_>>(), summary.per_tag.keys().cloned().collect::<Vec<_>>());
    assert_eq!(overall.map50, 1.0);
    assert!(groups.values().all(|g| g.map50 == 1.0));
}

#[test]
fn context_follows_depth_order() {
    let kb = golden_kb();
    let objects: Vec<FusedDetection> = PARTS.iter().map(|(l, b, _)| fused(l, *b, 0.9)).collect();
    let ranked = rank_topk(&objects, &depth_map(), 3).unwrap();
    let labels: Vec<&str> = ranked.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["gear_cover", "bearing_housing", "drive_shaft"]);

    let e = HashingEmbedder::default();
    let ctx = compose_context(&ranked, &kb, &e, &RetrievalConfig::default(), Exec::Sequential).unwrap();
    let ids: Vec<&str> = ctx.items.iter().map(|i| i.matches[0].part_id.as_str()).collect();
    assert_eq!(ids, ["GC-100", "BH-220", "DS-310"]);
    assert!(ctx.items.windows(2).all(|w| w[0].depth < w[1].depth));
    assert_eq!(ctx.items[0].rank, 1);

    let answer = TemplateResponder.respond("what is this", &ctx).unwrap();
    let top = &ctx.items[0].matches[0];
    assert!(answer.contains(&top.display_name), "{answer}");
    assert!(answer.contains(top.description.trim().trim_end_matches('.')), "{answer}");
}

#[test]
fn repeated_labels_repeat_their_entry() {
    let kb = golden_kb();
    let objects = vec![
        fused("gear_cover", [10.0, 10.0, 60.0, 60.0], 0.9),
        fused("gear_cover", [300.0, 10.0, 360.0, 60.0], 0.8),
    ];
    let mut depth = DepthMap::constant(640, 360, 5.0).unwrap();
    depth.fill_box(&bx([300.0, 10.0, 360.0, 60.0]), 2.0);
    let ranked = rank_topk(&objects, &depth, 3).unwrap();
    let ctx = compose_context(&ranked, &kb, &HashingEmbedder::default(), &RetrievalConfig::default(), Exec::Sequential)
        .unwrap();
    assert_eq!(ctx.items.len(), 2);
    assert_eq!(ctx.items[0].matches, ctx.items[1].matches);
    assert_eq!(ctx.items[0].bbox, bx([300.0, 10.0, 360.0, 60.0]));
}

#[test]
fn far_matches_are_flagged() {
    let kb = golden_kb();
    let ranked = rank_topk(&[fused("zzz", [0.0, 0.0, 10.0, 10.0], 0.9)], &depth_map(), 1).unwrap();
    let cfg = RetrievalConfig {
        per_object_m: 2,
        max_distance: Some(0.1),
    };
    let ctx = compose_context(&ranked, &kb, &HashingEmbedder::default(), &cfg, Exec::Sequential).unwrap();
    assert!(ctx.items[0].no_knowledge);
    assert!(ctx.items[0].matches.is_empty());
}

fn frame_image(tint: u8) -> PixelImage {
    let mut img = PixelImage::filled(640, 360, Channels::Rgb, &[90, 90, 90]).unwrap();
    img.pixel_mut(0, 0)[0] = tint;
    img
}

fn image_manager() -> (SessionManager, Vec<PixelImage>) {
    let mut mock = MockDetector::perfect();
    let frames: Vec<PixelImage> = (0..8).map(frame_image).collect();
    for f in &frames {
        mock.register(f, PARTS.iter().map(|(l, b, _)| (l.to_string(), bx(*b))).collect());
    }
    let mut services = Services::default().with_knowledge(golden_kb());
    services.provider = Some(Arc::new(mock));
    (SessionManager::new(services), frames)
}

#[test]
fn session_answers_from_image_frames() {
    let (mgr, frames) = image_manager();
    let id = mgr.create(SessionConfig::default()).unwrap().id;
    assert_eq!(mgr.submit_query(id, "hello").unwrap_err().code, ErrorCode::InvalidState);
    mgr.trigger(id).unwrap();
    for (i, f) in frames.iter().take(5).enumerate() {
        let status = mgr
            .push_frame(
                id,
                FrameInput {
                    detections: None,
                    image: Some(f.clone()),
                    depth: Some(depth_map()),
                },
            )
            .unwrap();
        assert_eq!(status.consecutive_valid, i + 1);
        assert_eq!(status.gate_open, i == 4);
    }
    let snap = mgr.snapshot(id).unwrap();
    assert_eq!(snap.state, SessionState::Gated);
    assert!(snap.ranked.as_ref().unwrap().len() <= 3);

    let first = mgr.submit_query(id, "which part is closest").unwrap();
    assert!(first.answer.contains("Type A gear cover"), "{}", first.answer);
    assert_eq!(first.ranked[0].label, "gear_cover");
    let second = mgr.submit_query(id, "what material is it").unwrap();
    assert_ne!(first.answer, second.answer);
    assert_eq!(first.ranked, second.ranked);
    assert_eq!(mgr.snapshot(id).unwrap().state, SessionState::Answered);
}

#[test]
fn an_empty_frame_resets_the_streak() {
    let (mgr, frames) = image_manager();
    let id = mgr.create(SessionConfig::default()).unwrap().id;
    mgr.trigger(id).unwrap();
    let push = |dets: Option<Vec<Detection>>, img: Option<PixelImage>| {
        mgr.push_frame(
            id,
            FrameInput {
                detections: dets,
                image: img,
                depth: Some(depth_map()),
            },
        )
        .unwrap()
    };
    for f in &frames[..4] {
        assert!(!push(None, Some(f.clone())).gate_open);
    }
    let gap = push(Some(Vec::new()), None);
    assert!(!gap.valid);
    assert_eq!(gap.consecutive_valid, 0);
    for f in &frames[4..8] {
        assert!(!push(None, Some(f.clone())).gate_open);
    }
    assert_eq!(mgr.snapshot(id).unwrap().state, SessionState::Buffering);
}
