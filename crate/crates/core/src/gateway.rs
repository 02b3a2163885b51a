//! Uniform access to top-5 image classifiers: the in-process desk model or an
//! external child process speaking the line protocol described in
//! `docs/formats.md`.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{GatewayError, ModelError};
use crate::image::Image;
use crate::ops;

pub const PROTOCOL_NAME: &str = "advdetect-top5";
pub const PROTOCOL_VERSION: u32 = 1;

/// The five highest-confidence labels, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Top5 {
    pub labels: [u32; 5],
    pub confidences: [f64; 5],
}

impl Top5 {
    /// Validates distinct labels and non-increasing confidences in `[0, 1]`.
    pub fn new(labels: [u32; 5], confidences: [f64; 5]) -> Result<Self, GatewayError> {
        for i in 0..5 {
            if labels[i + 1..].contains(&labels[i]) {
                return Err(GatewayError::ProtocolViolation(format!(
                    "duplicate label {} in top-5",
                    labels[i]
                )));
            }
        }
        if confidences.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(GatewayError::ProtocolViolation("confidence outside [0, 1]".into()));
        }
        if confidences.windows(2).any(|w| w[0] < w[1]) {
            return Err(GatewayError::ProtocolViolation("confidences not sorted".into()));
        }
        Ok(Self { labels, confidences })
    }

    /// Picks the top five of a probability vector. Equal confidences rank the
    /// lower label id first.
    pub fn from_probabilities(probs: &[f64]) -> Result<Self, GatewayError> {
        if probs.len() < 6 {
            return Err(GatewayError::LabelSpaceTooSmall(probs.len()));
        }
        let mut order: Vec<usize> = (0..probs.len()).collect();
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        let mut labels = [0u32; 5];
        let mut confidences = [0.0; 5];
        for (slot, &k) in order.iter().take(5).enumerate() {
            labels[slot] = k as u32;
            confidences[slot] = probs[k].clamp(0.0, 1.0);
        }
        Ok(Self { labels, confidences })
    }

    /// Labels-only tuple with placeholder confidences, for scripted fixtures.
    pub fn from_labels(labels: [u32; 5]) -> Self {
        Self { labels, confidences: [0.2; 5] }
    }

    pub fn top1(&self) -> u32 {
        self.labels[0]
    }

    pub fn contains(&self, label: u32) -> bool {
        self.labels.contains(&label)
    }

    pub fn confidence_of(&self, label: u32) -> Option<f64> {
        self.labels.iter().position(|&l| l == label).map(|i| self.confidences[i])
    }
}

/// True iff the ground truth appears anywhere in the top five.
pub fn top5_correct(t: &Top5, ground_truth: u32) -> bool {
    t.contains(ground_truth)
}

/// Access to class probabilities and loss gradients with respect to the
/// input pixels. Only in-process models provide this.
pub trait Differentiable: Send + Sync {
    fn num_labels(&self) -> usize;
    fn input_dims(&self) -> (u32, u32);
    fn probabilities(&self, img: &Image) -> Result<Vec<f64>, ModelError>;
    /// Gradient of the cross-entropy loss at `label` w.r.t. every intensity.
    fn loss_gradient(&self, img: &Image, label: u32) -> Result<Vec<f64>, ModelError>;
}

/// A top-5 classifier. Implementations must be deterministic and must not
/// reorder or rename the labels they report.
pub trait Classifier: Send + Sync {
    fn id(&self) -> &str;
    fn num_labels(&self) -> usize;
    /// Human-readable description of the preprocessing the backend applies.
    fn input_contract(&self) -> String;
    fn protocol_version(&self) -> String {
        format!("in-process/{PROTOCOL_VERSION}")
    }
    fn classify_top5(&self, img: &Image) -> Result<Top5, GatewayError>;

    /// Fails fast on the first error, reporting its index.
    fn classify_batch(&self, imgs: &[Image]) -> Result<Vec<Top5>, GatewayError> {
        imgs.iter()
            .enumerate()
            .map(|(index, img)| {
                self.classify_top5(img)
                    .map_err(|e| GatewayError::BatchItem { index, source: Box::new(e) })
            })
            .collect()
    }

    fn as_differentiable(&self) -> Option<&dyn Differentiable> {
        None
    }
}

// ------------------------------------------------------------ wire types

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Handshake {
    pub protocol: String,
    pub version: u32,
    pub num_labels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    /// Base-64 PNG of the 8-bit quantized image.
    pub png_base64: String,
}

impl Request {
    pub fn encode(id: u64, img: &Image) -> Result<Self, GatewayError> {
        Ok(Self {
            id,
            width: img.width(),
            height: img.height(),
            png_base64: BASE64.encode(ops::encode_png(img)?),
        })
    }

    pub fn decode_image(&self) -> Result<Image, GatewayError> {
        let bytes = BASE64
            .decode(&self.png_base64)
            .map_err(|e| GatewayError::ProtocolViolation(format!("bad base64: {e}")))?;
        let img = ops::decode_image(&bytes)?;
        if img.dims() != (self.width, self.height) {
            return Err(GatewayError::ProtocolViolation("payload size disagrees with header".into()));
        }
        Ok(img)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reply {
    pub id: u64,
    pub labels: Vec<u32>,
    pub confidences: Vec<f64>,
}

impl Reply {
    fn into_top5(self, expected_id: u64, num_labels: usize) -> Result<Top5, GatewayError> {
        if self.id != expected_id {
            return Err(GatewayError::ProtocolViolation(format!(
                "reply id {} does not match request {expected_id}",
                self.id
            )));
        }
        let labels: [u32; 5] = self
            .labels
            .try_into()
            .map_err(|_| GatewayError::ProtocolViolation("expected exactly 5 labels".into()))?;
        let confidences: [f64; 5] = self
            .confidences
            .try_into()
            .map_err(|_| GatewayError::ProtocolViolation("expected exactly 5 confidences".into()))?;
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= num_labels) {
            return Err(GatewayError::ProtocolViolation(format!(
                "label {l} outside label space {num_labels}"
            )));
        }
        Top5::new(labels, confidences)
    }
}

// -------------------------------------------------------- child process

struct Channel {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
    next_id: u64,
}

impl Channel {
    fn spawn(program: &Path, args: &[String]) -> Result<(Self, Handshake), GatewayError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| GatewayError::BackendUnavailable(format!("{}: {e}", program.display())))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let mut stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let mut line = String::new();
        let read = stdout
            .read_line(&mut line)
            .map_err(|e| GatewayError::BackendUnavailable(format!("handshake read: {e}")))?;
        if read == 0 {
            return Err(GatewayError::BackendUnavailable("process closed before handshake".into()));
        }
        let hs: Handshake = serde_json::from_str(line.trim_end())
            .map_err(|e| GatewayError::BackendUnavailable(format!("bad handshake: {e}")))?;
        if hs.protocol != PROTOCOL_NAME || hs.version != PROTOCOL_VERSION {
            return Err(GatewayError::BackendUnavailable(format!(
                "unsupported protocol {} v{}",
                hs.protocol, hs.version
            )));
        }
        Ok((Self { child, stdin, stdout, next_id: 0 }, hs))
    }

    fn roundtrip(&mut self, img: &Image, num_labels: usize) -> Result<Top5, GatewayError> {
        let id = self.next_id;
        self.next_id += 1;
        let mut line = serde_json::to_string(&Request::encode(id, img)?)
            .expect("request serializes");
        line.push('\n');
        self.stdin
            .write_all(line.as_bytes())
            .and_then(|_| self.stdin.flush())
            .map_err(|e| GatewayError::BackendUnavailable(format!("write failed: {e}")))?;
        let mut reply = String::new();
        let read = self
            .stdout
            .read_line(&mut reply)
            .map_err(|e| GatewayError::BackendUnavailable(format!("read failed: {e}")))?;
        if read == 0 {
            return Err(GatewayError::BackendUnavailable("process closed its output".into()));
        }
        let reply: Reply = serde_json::from_str(reply.trim_end())
            .map_err(|e| GatewayError::ProtocolViolation(format!("malformed reply: {e}")))?;
        reply.into_top5(id, num_labels)
    }
}

impl Drop for Channel {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// A pool of external classifier processes. Each process is a serial
/// channel; requests go to the first idle one.
pub struct ExecBackend {
    id: String,
    program: PathBuf,
    num_labels: usize,
    channels: Vec<Mutex<Channel>>,
    cursor: AtomicUsize,
}

impl ExecBackend {
    pub fn spawn(program: impl AsRef<Path>, args: &[String], pool: usize) -> Result<Self, GatewayError> {
        let program = program.as_ref().to_path_buf();
        let mut channels = Vec::new();
        let mut num_labels = None;
        for _ in 0..pool.max(1) {
            let (ch, hs) = Channel::spawn(&program, args)?;
            if hs.num_labels < 6 {
                return Err(GatewayError::LabelSpaceTooSmall(hs.num_labels));
            }
            if num_labels.is_some_and(|k| k != hs.num_labels) {
                return Err(GatewayError::BackendUnavailable("pool members disagree on K".into()));
            }
            num_labels = Some(hs.num_labels);
            channels.push(Mutex::new(ch));
        }
        Ok(Self {
            id: format!("exec:{}", program.display()),
            program,
            num_labels: num_labels.expect("pool is non-empty"),
            channels,
            cursor: AtomicUsize::new(0),
        })
    }

    pub fn program(&self) -> &Path {
        &self.program
    }
}

impl Classifier for ExecBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn num_labels(&self) -> usize {
        self.num_labels
    }

    fn input_contract(&self) -> String {
        "native-size 8-bit RGB PNG; preprocessing owned by the external process".into()
    }

    fn protocol_version(&self) -> String {
        format!("{PROTOCOL_NAME}/{PROTOCOL_VERSION}")
    }

    fn classify_top5(&self, img: &Image) -> Result<Top5, GatewayError> {
        let n = self.channels.len();
        let start = self.cursor.fetch_add(1, Ordering::Relaxed);
        for k in 0..n {
            if let Ok(mut ch) = self.channels[(start + k) % n].try_lock() {
                return ch.roundtrip(img, self.num_labels);
            }
        }
        let mut ch = self.channels[start % n]
            .lock()
            .map_err(|_| GatewayError::BackendUnavailable("channel poisoned".into()))?;
        ch.roundtrip(img, self.num_labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top5_membership() {
        let t = Top5::from_labels([1, 2, 3, 4, 5]);
        assert!(top5_correct(&t, 3));
        assert!(!top5_correct(&t, 9));
        assert!(top5_correct(&t, t.labels[0]));
    }

    #[test]
    fn ties_prefer_lower_label() {
        let probs = [0.1, 0.2, 0.2, 0.1, 0.1, 0.1, 0.2];
        let t = Top5::from_probabilities(&probs).unwrap();
        assert_eq!(t.labels, [1, 2, 6, 0, 3]);
    }

    #[test]
    fn small_label_space_rejected() {
        assert!(matches!(
            Top5::from_probabilities(&[0.2; 5]),
            Err(GatewayError::LabelSpaceTooSmall(5))
        ));
    }

    #[test]
    fn validation_rejects_bad_tuples() {
        assert!(Top5::new([1, 1, 2, 3, 4], [0.2; 5]).is_err());
        assert!(Top5::new([1, 2, 3, 4, 5], [0.1, 0.2, 0.0, 0.0, 0.0]).is_err());
        assert!(Top5::new([1, 2, 3, 4, 5], [1.5, 0.2, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn reply_validation() {
        let ok = Reply { id: 3, labels: vec![1, 2, 3, 4, 5], confidences: vec![0.5, 0.2, 0.1, 0.1, 0.05] };
        assert_eq!(ok.clone().into_top5(3, 10).unwrap().labels, [1, 2, 3, 4, 5]);
        assert!(ok.clone().into_top5(4, 10).is_err());
        assert!(ok.into_top5(3, 5).is_err());
        let short = Reply { id: 0, labels: vec![1, 2, 3], confidences: vec![0.3; 3] };
        assert!(matches!(short.into_top5(0, 10), Err(GatewayError::ProtocolViolation(_))));
    }

    #[test]
    fn request_roundtrips_quantized_image() {
        let bytes: Vec<u8> = (0..12 * 9 * 3).map(|i| (i % 256) as u8).collect();
        let img = Image::from_rgb8(12, 9, &bytes).unwrap();
        let req = Request::encode(7, &img).unwrap();
        assert_eq!(req.decode_image().unwrap(), img);
    }
}
