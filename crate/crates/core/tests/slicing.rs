use partsight_core::detorch::{detect_sliced, detect_tta, DetectorProvider, FusionParams, MockDetector, SliceConfig, TtaConfig, TtaTransform, View};
use partsight_core::geometry::{BoundingBox, Channels, PixelImage};
use partsight_core::Exec;

fn bx(a: [f64; 4]) -> BoundingBox {
    BoundingBox::from_array(a).unwrap()
}

fn scene(w: u32, h: u32, tint: u8) -> PixelImage {
    let mut img = PixelImage::filled(w, h, Channels::Rgb, &[tint, 40, 90]).unwrap();
    img.pixel_mut(w - 1, h - 1).copy_from_slice(&[1, 2, tint]);
    img
}

// 900 px wide with 500 px tiles at 20% overlap: tiles start at x = 0 and 400.
const SLICE: SliceConfig = SliceConfig {
    tile_size: 500,
    overlap: 0.2,
};

#[test]
fn tile_layout_for_two_columns() {
    let tiles = SLICE.tiles(900, 400);
    assert_eq!(
        tiles,
        vec![
            View::Tile { x: 0, y: 0, w: 500, h: 400 },
            View::Tile { x: 400, y: 0, w: 500, h: 400 },
        ]
    );
}

#[test]
fn object_inside_one_tile_appears_once() {
    let img = scene(900, 400, 3);
    let mut mock = MockDetector::perfect();
    mock.register(&img, vec![("bolt".into(), bx([50.0, 50.0, 150.0, 150.0]))]);
    let out = detect_sliced(&mock, &img, &SLICE, FusionParams::default(), Exec::Sequential).unwrap();
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].bbox, bx([50.0, 50.0, 150.0, 150.0]));
}

#[test]
fn object_in_the_overlap_is_not_duplicated() {
    let img = scene(900, 400, 4);
    let mut mock = MockDetector::perfect();
    mock.register(&img, vec![("gear".into(), bx([420.0, 100.0, 480.0, 160.0]))]);
    let out = detect_sliced(&mock, &img, &SLICE, FusionParams::default(), Exec::Parallel).unwrap();
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].bbox, bx([420.0, 100.0, 480.0, 160.0]));
}

#[test]
fn straddling_object_fuses_to_one_detection() {
    let img = scene(900, 400, 5);
    let truth = bx([380.0, 100.0, 520.0, 200.0]);
    let mut mock = MockDetector::perfect();
    mock.register(&img, vec![("shaft".into(), truth)]);

    // each tile sees a clipped part: [380, 500] and [400, 520]
    let per_tile: Vec<_> = SLICE
        .tiles(900, 400)
        .iter()
        .map(|t| mock.detect_view(&img, t).unwrap())
        .collect();
    assert!(per_tile.iter().all(|d| d.len() == 1));
    let a = bx([380.0, 100.0, 500.0, 200.0]);
    let b = bx([400.0, 100.0, 520.0, 200.0]);
    assert!(a.iou(&b) > 0.5);

    let out = detect_sliced(&mock, &img, &SLICE, FusionParams::default(), Exec::Sequential).unwrap();
    assert_eq!(out.len(), 1, "{out:?}");
    assert_eq!(out[0].label, "shaft");
    // equal confidences: the fused box is the plain mean of the two views
    assert_eq!(out[0].bbox, bx([390.0, 100.0, 510.0, 200.0]));
}

#[test]
fn distinct_labels_in_overlap_survive() {
    let img = scene(900, 400, 6);
    let mut mock = MockDetector::perfect();
    mock.register(
        &img,
        vec![
            ("gear".into(), bx([410.0, 10.0, 490.0, 90.0])),
            ("bolt".into(), bx([410.0, 10.0, 490.0, 90.0])),
        ],
    );
    let mut labels: Vec<String> = detect_sliced(&mock, &img, &SLICE, FusionParams::default(), Exec::Sequential)
        .unwrap()
        .into_iter()
        .map(|d| d.label)
        .collect();
    labels.sort();
    assert_eq!(labels, ["bolt", "gear"]);
}

#[test]
fn flip_tta_keeps_perfect_boxes() {
    let img = scene(321, 200, 7);
    let truth = vec![
        ("gear".to_string(), bx([10.5, 20.0, 60.25, 90.0])),
        ("bolt".to_string(), bx([200.0, 5.0, 321.0, 40.0])),
    ];
    let mut mock = MockDetector::perfect();
    mock.register(&img, truth.clone());
    let plain = mock.detect(&img).unwrap();
    let tta = detect_tta(&mock, &img, &TtaConfig::default(), FusionParams::default(), Exec::Parallel).unwrap();
    assert_eq!(tta.len(), plain.len());
    for (p, t) in plain.iter().zip(&tta) {
        assert_eq!(p.label, t.label);
        for (a, b) in p.bbox.to_array().iter().zip(t.bbox.to_array()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }
}

#[test]
fn flip_view_maps_and_inverts() {
    let t = View::Transform(TtaTransform { flip: true, scale: 1.0 });
    let b = bx([10.0, 3.0, 30.0, 9.0]);
    assert_eq!(t.forward(&b, 100, 50), bx([70.0, 3.0, 90.0, 9.0]));
    assert_eq!(t.inverse(&t.forward(&b, 100, 50), 100, 50), b);
}
