//! Adapter for detectors running in a separate process.
//!
//! One JSON request per line on the child's stdin:
//! `{"id":1,"slide":"s","x":0,"y":0,"w":1024,"h":1024,"patch_ppm_path":"/tmp/..."}`;
//! one JSON response per line on its stdout, echoing the id:
//! `{"id":1,"detections":[{"x":..,"y":..,"w":..,"h":..,"probs":[..5],"score":..,"confidence":..}]}`.
//! Detection boxes are tile-local.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::detector::{Detector, TileRequest};
use crate::error::{Error, Result};
use crate::io::Patch;
use crate::model::{BoundingBox, ContinuousGrade, Detection, NUM_GRADES};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub id: u64,
    pub slide: String,
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
    pub patch_ppm_path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireDetection {
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
    pub probs: [f64; NUM_GRADES],
    pub score: f64,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub id: u64,
    pub detections: Vec<WireDetection>,
}

impl WireDetection {
    pub fn from_detection(d: &Detection) -> Self {
        WireDetection {
            x: d.bbox.x.round() as i64,
            y: d.bbox.y.round() as i64,
            w: d.bbox.w.round() as i64,
            h: d.bbox.h.round() as i64,
            probs: d.class_probs,
            score: d.score.value(),
            confidence: d.confidence,
        }
    }

    pub fn to_detection(&self) -> Result<Detection> {
        let bbox =
            BoundingBox::try_new(self.x as f64, self.y as f64, self.w as f64, self.h as f64)?;
        Detection::new(
            bbox,
            self.probs,
            self.confidence,
            ContinuousGrade::new(self.score)?,
        )
    }
}

/// A bidirectional line channel to a detector.
pub trait Transport: Send {
    fn send(&mut self, line: &str) -> Result<()>;
    fn recv(&mut self, timeout: Duration) -> Result<String>;
}

/// Child process speaking the protocol on stdin/stdout. A reader thread
/// forwards stdout lines so that receives can time out.
pub struct ProcessTransport {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

impl ProcessTransport {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::invalid(format!("cannot start detector `{program}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(ProcessTransport {
            child,
            stdin,
            lines: rx,
        })
    }
}

impl Transport for ProcessTransport {
    fn send(&mut self, line: &str) -> Result<()> {
        self.stdin.write_all(line.as_bytes())?;
        self.stdin.write_all(b"\n")?;
        self.stdin.flush()?;
        Ok(())
    }

    fn recv(&mut self, timeout: Duration) -> Result<String> {
        match self.lines.recv_timeout(timeout) {
            Ok(line) => Ok(line?),
            Err(RecvTimeoutError::Timeout) => Err(Error::invalid(format!(
                "detector did not answer within {:.1} s",
                timeout.as_secs_f64()
            ))),
            Err(RecvTimeoutError::Disconnected) => {
                Err(Error::invalid("detector closed its output"))
            }
        }
    }
}

impl Drop for ProcessTransport {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// [`Detector`] that forwards every tile to a [`Transport`]. Requests are
/// serialized: one in flight per adapter.
pub struct ExternalDetector {
    transport: Mutex<Box<dyn Transport>>,
    scratch: PathBuf,
    timeout: Duration,
    next_id: AtomicU64,
}

impl ExternalDetector {
    /// `scratch` receives the patch PPM files handed to the detector.
    pub fn new(transport: Box<dyn Transport>, scratch: &Path, timeout: Duration) -> Result<Self> {
        std::fs::create_dir_all(scratch)?;
        Ok(ExternalDetector {
            transport: Mutex::new(transport),
            scratch: scratch.to_path_buf(),
            timeout,
            next_id: AtomicU64::new(1),
        })
    }

    /// Spawns `command` (program followed by arguments).
    pub fn spawn(command: &[String], scratch: &Path, timeout: Duration) -> Result<Self> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| Error::invalid("empty detector command"))?;
        Self::new(
            Box::new(ProcessTransport::spawn(program, args)?),
            scratch,
            timeout,
        )
    }

    fn exchange(&self, req: &WireRequest) -> Result<WireResponse> {
        let line = serde_json::to_string(req)?;
        let mut t = self
            .transport
            .lock()
            .map_err(|_| Error::invalid("detector lock poisoned"))?;
        t.send(&line)?;
        let reply = t.recv(self.timeout)?;
        let resp: WireResponse = serde_json::from_str(reply.trim())
            .map_err(|e| Error::invalid(format!("malformed detector response: {e}")))?;
        if resp.id != req.id {
            return Err(Error::invalid(format!(
                "detector answered id {} to request {}",
                resp.id, req.id
            )));
        }
        Ok(resp)
    }
}

impl Detector for ExternalDetector {
    fn detect(&self, req: &TileRequest<'_>, patch: &Patch) -> Result<Vec<Detection>> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let path = self.scratch.join(format!("tile_{}.ppm", req.index));
        patch.write_ppm(&path)?;
        let wire = WireRequest {
            id,
            slide: req.slide.id.clone(),
            x: req.tile.x as i64,
            y: req.tile.y as i64,
            w: req.tile.w as i64,
            h: req.tile.h as i64,
            patch_ppm_path: path.to_string_lossy().into_owned(),
        };
        let result = self.exchange(&wire);
        let _ = std::fs::remove_file(&path);
        result?
            .detections
            .iter()
            .map(WireDetection::to_detection)
            .collect()
    }
}
