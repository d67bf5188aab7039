mod common;

use std::collections::VecDeque;
use std::process::Command;
use std::time::Duration;

use eiph::evaluation::{match_detections, mean_average_precision};
use eiph::io::SlideSource;
use eiph::model::{AnnotationSet, CellAnnotation, Detection};
use eiph::pipeline::external::{WireDetection, WireRequest, WireResponse};
use eiph::pipeline::{run_pipeline, ExternalDetector, PipelineConfig, Transport};
use eiph::synth::golden_fixture;
use eiph::Error;

/// In-process stand-in for a detector process: answers every request with
/// the ground-truth cells lying fully inside the tile, in tile coordinates.
struct Loopback {
    cells: Vec<CellAnnotation>,
    pending: VecDeque<String>,
    id_offset: u64,
}

impl Transport for Loopback {
    fn send(&mut self, line: &str) -> eiph::Result<()> {
        let req: WireRequest = serde_json::from_str(line)?;
        let (x0, y0) = (req.x as f64, req.y as f64);
        let (x1, y1) = (x0 + req.w as f64, y0 + req.h as f64);
        // the patch file must exist while the request is outstanding
        assert!(std::path::Path::new(&req.patch_ppm_path).exists());
        let detections = self
            .cells
            .iter()
            .filter(|c| {
                c.bbox.x >= x0 && c.bbox.y >= y0 && c.bbox.right() <= x1 && c.bbox.bottom() <= y1
            })
            .map(|c| {
                let d = Detection::certain(c.bbox.translate(-x0, -y0), c.grade, 0.9);
                WireDetection::from_detection(&d)
            })
            .collect();
        let resp = WireResponse {
            id: req.id + self.id_offset,
            detections,
        };
        self.pending.push_back(serde_json::to_string(&resp)?);
        Ok(())
    }

    fn recv(&mut self, _timeout: Duration) -> eiph::Result<String> {
        self.pending
            .pop_front()
            .ok_or_else(|| Error::Invalid("timed out waiting for detector".into()))
    }
}

fn mini() -> (tempfile::TempDir, SlideSource, AnnotationSet) {
    let dir = tempfile::tempdir().unwrap();
    let (slide, set) = golden_fixture("mini", &dir.path().join("mini")).unwrap();
    (dir, slide, set)
}

#[test]
fn loopback_detector_through_pipeline() {
    let (dir, slide, set) = mini();
    let transport = Loopback {
        cells: set.cells.clone(),
        pending: VecDeque::new(),
        id_offset: 0,
    };
    let scratch = dir.path().join("scratch");
    let det = ExternalDetector::new(Box::new(transport), &scratch, Duration::from_secs(5)).unwrap();
    let cfg = PipelineConfig {
        workers: 3,
        ..Default::default()
    };
    let r = run_pipeline(&slide, &det, &cfg).unwrap();
    assert_eq!(r.detections.len(), set.cells.len());
    let report = match_detections(&set, &r.detections, 0.5).unwrap();
    assert_eq!(mean_average_precision(&report).unwrap(), 1.0);
    // patch files are cleaned up after each request
    assert_eq!(std::fs::read_dir(&scratch).unwrap().count(), 0);
}

#[test]
fn mismatched_id_fails_the_run() {
    let (dir, slide, set) = mini();
    let transport = Loopback {
        cells: set.cells.clone(),
        pending: VecDeque::new(),
        id_offset: 7,
    };
    let det = ExternalDetector::new(
        Box::new(transport),
        &dir.path().join("s"),
        Duration::from_secs(5),
    )
    .unwrap();
    let err = run_pipeline(&slide, &det, &PipelineConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Detector { .. }), "{err}");
    assert!(err.to_string().contains("id"), "{err}");
}

fn python() -> Option<&'static str> {
    Command::new("python3")
        .arg("--version")
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|_| "python3")
}

const STUB: &str = r#"
import json, sys
for line in sys.stdin:
    req = json.loads(line)
    with open(req["patch_ppm_path"], "rb") as f:
        data = f.read()
    # one detection in the middle of every patch whose size checks out
    ok = data.startswith(b"P6") and len(data) >= req["w"] * req["h"] * 3
    dets = []
    if ok:
        dets.append({"x": req["w"] // 2 - 20, "y": req["h"] // 2 - 20, "w": 40, "h": 40,
                     "probs": [0.0, 0.0, 0.8, 0.1, 0.0], "score": 2.1, "confidence": 0.8})
    print(json.dumps({"id": req["id"], "detections": dets}), flush=True)
"#;

#[test]
fn python_stub_process() {
    let Some(py) = python() else {
        eprintln!("python3 not available; skipping process round trip");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let slide_dir = dir.path().join("blank");
    common::blank_slide(&slide_dir, 2048, 2048, 1024);
    let script = dir.path().join("stub.py");
    std::fs::write(&script, STUB).unwrap();
    let slide = SlideSource::open(&slide_dir).unwrap();
    let cmd = vec![py.to_string(), script.to_string_lossy().into_owned()];
    let det = ExternalDetector::spawn(&cmd, &dir.path().join("scratch"), Duration::from_secs(20))
        .unwrap();
    let cfg = PipelineConfig {
        workers: 2,
        ..Default::default()
    };
    let r = run_pipeline(&slide, &det, &cfg).unwrap();
    // 3x3 tiles, one centered detection each, all owned by their tile
    assert_eq!(r.tiles, 9);
    assert_eq!(r.detections.len(), 9);
    assert!(r.detections.iter().all(|d| d.grade.value() == 2));
}

#[test]
fn dying_process_reports_progress() {
    let Some(py) = python() else {
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let slide_dir = dir.path().join("blank");
    common::blank_slide(&slide_dir, 2048, 2048, 1024);
    let slide = SlideSource::open(&slide_dir).unwrap();
    let cmd = vec![
        py.to_string(),
        "-c".to_string(),
        "import sys; sys.stdin.readline()".to_string(),
    ];
    let det =
        ExternalDetector::spawn(&cmd, &dir.path().join("scratch"), Duration::from_secs(5)).unwrap();
    match run_pipeline(&slide, &det, &PipelineConfig::default()) {
        Err(Error::Detector {
            completed, total, ..
        }) => {
            assert_eq!(total, 9);
            assert!(completed < total);
        }
        other => panic!("{other:?}"),
    }
}
