use std::fs;
use std::path::{Path, PathBuf};

use rantrack::experiments::fresh_model;
use rantrack::io::{self, load_checkpoint, save_checkpoint, Checkpoint};
use rantrack::PredictorKind;

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn golden(name: &str) -> String {
    fs::read_to_string(data(name)).unwrap()
}

#[test]
fn detections_golden_round_trip() {
    let dets = io::read_detections(&data("det.txt")).unwrap();
    assert_eq!(dets.len(), 5);
    let first = &dets.frame(1)[0];
    assert_eq!((first.bbox.x, first.bbox.y, first.bbox.w, first.bbox.h), (10.0, 20.0, 30.0, 40.0));
    assert_eq!(first.confidence, 0.9);
    assert_eq!(dets.frame(2)[1].bbox.w, 0.1 + 0.2);
    assert_eq!(dets.frame(2)[1].bbox.h, 1e-7);
    assert!(dets.frame(3).is_empty());
    assert_eq!(io::format_detections(&dets), golden("det.txt"));

    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("det.txt");
    io::write_detections(&path, &dets).unwrap();
    assert_eq!(io::read_detections(&path).unwrap(), dets);
}

#[test]
fn features_golden_round_trip() {
    let dets = io::read_detections(&data("det.txt")).unwrap();
    let with = io::read_features(&data("features.txt"), &dets).unwrap();
    let v = with.frame(2)[0].appearance.as_ref().unwrap();
    assert_eq!(v.as_slice(), &[0.5773502691896258; 3]);
    assert_eq!(with.frame(1)[1].appearance.as_ref().unwrap().as_slice(), &[0.0, -1.0, 0.0]);
    assert_eq!(io::format_features(&with).unwrap(), golden("features.txt"));
    assert_eq!(with.without_features(), dets);
}

#[test]
fn ground_truth_golden_round_trip() {
    let gt = io::read_ground_truth(&data("gt.txt")).unwrap();
    assert_eq!(gt.len(), 6);
    assert_eq!(gt.total_visible(), 5);
    let hidden = gt.frame(2).iter().find(|o| o.id == 2).unwrap();
    assert!(!hidden.visible);
    assert_eq!(hidden.bbox.x, 101.5);
    assert_eq!(io::format_ground_truth(&gt), golden("gt.txt"));
}

#[test]
fn mot_style_ground_truth_marks_ignored_rows() {
    let gt = io::read_ground_truth(&data("gt_mot.txt")).unwrap();
    let visible = |f: u32, id: u64| gt.frame(f).iter().find(|o| o.id == id).unwrap().visible;
    assert!(visible(1, 1));
    assert!(!visible(1, 2), "class 7 is a distractor");
    assert!(!visible(1, 3), "flag 0");
    assert!(!visible(2, 1), "zero visibility");
    assert!(visible(2, 2));
    let canonical = io::format_ground_truth(&gt);
    let (again, _) = io::parse_ground_truth(&canonical, Path::new("canonical")).unwrap();
    assert_eq!(again, gt);
}

#[test]
fn results_golden_round_trip() {
    let rows = io::read_results(&data("results.txt")).unwrap();
    assert_eq!(rows.len(), 5);
    assert_eq!(rows[4].bbox.x, -3.2);
    assert_eq!(io::format_results(&rows), golden("results.txt"));
    let mut reversed = rows.clone();
    reversed.reverse();
    assert_eq!(io::format_results(&reversed), golden("results.txt"));
}

#[test]
fn checkpoint_golden_round_trip() {
    for (name, kind) in [("checkpoint_ran.json", PredictorKind::Ran), ("checkpoint_tiv.json", PredictorKind::Tiv)] {
        let ckpt = load_checkpoint(&data(name)).unwrap();
        assert_eq!(ckpt.kind, kind);
        assert_eq!(ckpt.metadata.seed, 11);
        assert_eq!(ckpt.metadata.iterations, 42);
        assert_eq!(ckpt.metadata.score_threshold, Some(-62.5));

        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join(name);
        save_checkpoint(&path, &ckpt).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), golden(name));
        let again = load_checkpoint(&path).unwrap();
        let bits = |c: &Checkpoint| c.model.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&again), bits(&ckpt));
    }
}

#[test]
fn golden_ran_checkpoint_matches_seeded_initialization() {
    let ckpt = load_checkpoint(&data("checkpoint_ran.json")).unwrap();
    let fresh = fresh_model(&ckpt.config, 11).unwrap();
    let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
    assert_eq!(bits(ckpt.model.flatten()), bits(fresh.flatten()));
}

#[test]
fn empty_inputs_give_empty_outputs() {
    let (dets, stats) = io::parse_detections("", Path::new("empty")).unwrap();
    assert!(dets.is_empty());
    assert_eq!(stats.rows, 0);
    assert_eq!(io::format_results(&[]), "");
}
