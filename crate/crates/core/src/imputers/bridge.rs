//! Out-of-process imputers over line-delimited JSON on stdio.
//!
//! The client writes one request object per line to the child's stdin and
//! reads exactly one response line, whose `id` must echo the request. Hidden
//! values travel as `null`.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{check_output, mse_loss, Imputer, ImputerFactory};
use crate::error::{Error, Result};
use crate::seed::RunSeed;
use crate::types::{MaskVector, SeriesWindow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MessageKind {
    Fit,
    Impute,
    Loss,
    Shutdown,
    Ok,
    Result,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeMessage {
    pub id: u64,
    pub kind: MessageKind,
    #[serde(default = "empty_object")]
    pub payload: Value,
}

fn empty_object() -> Value {
    json!({})
}

impl BridgeMessage {
    pub fn new(id: u64, kind: MessageKind, payload: impl Serialize) -> Result<Self> {
        Ok(BridgeMessage {
            id,
            kind,
            payload: serde_json::to_value(payload)?,
        })
    }

    pub fn error(id: u64, message: impl Into<String>) -> Self {
        BridgeMessage {
            id,
            kind: MessageKind::Error,
            payload: json!({ "message": message.into() }),
        }
    }

    pub fn to_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn parse(line: &str) -> Result<Self> {
        Ok(serde_json::from_str(line.trim_end_matches(['\r', '\n']))?)
    }

    pub fn payload_as<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.payload.clone())?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireWindow {
    pub values: Vec<Option<f64>>,
    pub mask: Vec<u8>,
}

impl WireWindow {
    pub fn from_window(w: &SeriesWindow) -> Self {
        WireWindow {
            values: w
                .values
                .iter()
                .zip(w.mask.bits())
                .map(|(v, m)| m.then_some(*v))
                .collect(),
            mask: w.mask.to_u8(),
        }
    }

    pub fn to_window(&self, id: &str, index: usize) -> Result<SeriesWindow> {
        if self.values.len() != self.mask.len() {
            return Err(Error::LengthMismatch {
                expected: self.mask.len(),
                actual: self.values.len(),
            });
        }
        let mask = MaskVector::new(
            self.mask
                .iter()
                .zip(&self.values)
                .map(|(m, v)| *m != 0 && v.is_some())
                .collect(),
        );
        let values = self.values.iter().map(|v| v.unwrap_or(f64::NAN)).collect();
        SeriesWindow::new(id, index, values, mask)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitPayload {
    pub windows: Vec<WireWindow>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputePayload {
    pub windows: Vec<WireWindow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputeResult {
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossPayload {
    pub pred: Vec<f64>,
    pub truth: Vec<f64>,
    /// 0 marks a scored position.
    pub mask: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossResult {
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorPayload {
    pub message: String,
}

struct Channel {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
    next_id: u64,
}

impl Channel {
    fn spawn(command: &str) -> Result<Self> {
        debug!("spawning bridge `{command}`");
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Bridge(format!("cannot start `{command}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Channel {
            child,
            stdin,
            stdout,
            next_id: 1,
        })
    }

    fn request(&mut self, kind: MessageKind, payload: impl Serialize) -> Result<BridgeMessage> {
        let id = self.next_id;
        self.next_id += 1;
        let line = BridgeMessage::new(id, kind, payload)?.to_line()?;
        writeln!(self.stdin, "{line}")
            .and_then(|_| self.stdin.flush())
            .map_err(|e| Error::Bridge(format!("write failed: {e}")))?;
        let mut reply = String::new();
        let n = self
            .stdout
            .read_line(&mut reply)
            .map_err(|e| Error::Bridge(format!("read failed: {e}")))?;
        if n == 0 {
            return Err(Error::Bridge("adapter closed its output".into()));
        }
        let msg = BridgeMessage::parse(&reply)
            .map_err(|e| Error::Bridge(format!("malformed response: {e}")))?;
        if msg.id != id {
            return Err(Error::Bridge(format!(
                "response id {} does not echo request {id}",
                msg.id
            )));
        }
        if msg.kind == MessageKind::Error {
            let message = msg
                .payload_as::<ErrorPayload>()
                .map(|e| e.message)
                .unwrap_or_else(|_| msg.payload.to_string());
            return Err(Error::Bridge(message));
        }
        Ok(msg)
    }

    fn shutdown(mut self) {
        if self.request(MessageKind::Shutdown, json!({})).is_err() {
            warn!("bridge adapter did not acknowledge shutdown");
        }
        drop(self.stdin);
        let deadline = Instant::now() + Duration::from_secs(5);
        loop {
            match self.child.try_wait() {
                Ok(Some(_)) => return,
                Ok(None) if Instant::now() < deadline => {
                    std::thread::sleep(Duration::from_millis(10))
                }
                _ => {
                    let _ = self.child.kill();
                    let _ = self.child.wait();
                    return;
                }
            }
        }
    }
}

/// Imputer served by a child process speaking [`BridgeMessage`]s.
pub struct BridgeImputer {
    command: String,
    batch: usize,
    channel: Mutex<Option<Channel>>,
    fitted: bool,
}

impl BridgeImputer {
    pub fn new(command: impl Into<String>, batch: usize) -> Self {
        BridgeImputer {
            command: command.into(),
            batch: batch.max(1),
            channel: Mutex::new(None),
            fitted: false,
        }
    }

    fn with_channel<T>(&self, f: impl FnOnce(&mut Channel) -> Result<T>) -> Result<T> {
        let mut guard = self
            .channel
            .lock()
            .map_err(|_| Error::Bridge("channel poisoned".into()))?;
        if guard.is_none() {
            *guard = Some(Channel::spawn(&self.command)?);
        }
        f(guard.as_mut().expect("spawned above"))
    }

    /// Ask the adapter to score `pred` against `truth`.
    pub fn remote_loss(&self, pred: &[f64], truth: &[f64], eval_mask: &MaskVector) -> Result<f64> {
        let payload = LossPayload {
            pred: pred.to_vec(),
            truth: truth.to_vec(),
            mask: eval_mask.to_u8(),
        };
        let msg = self.with_channel(|c| c.request(MessageKind::Loss, &payload))?;
        Ok(msg.payload_as::<LossResult>()?.loss)
    }
}

impl Drop for BridgeImputer {
    fn drop(&mut self) {
        if let Ok(mut guard) = self.channel.lock() {
            if let Some(c) = guard.take() {
                c.shutdown();
            }
        }
    }
}

impl Imputer for BridgeImputer {
    fn spec(&self) -> String {
        format!("bridge:{}", self.command)
    }

    fn fit(&mut self, train: &[SeriesWindow], seed: RunSeed) -> Result<()> {
        let payload = FitPayload {
            windows: train.iter().map(WireWindow::from_window).collect(),
            seed: seed.0,
        };
        self.with_channel(|c| c.request(MessageKind::Fit, &payload))?;
        self.fitted = true;
        Ok(())
    }

    fn impute(&self, window: &SeriesWindow) -> Result<Vec<f64>> {
        Ok(self.impute_batch(std::slice::from_ref(window))?.remove(0))
    }

    fn impute_batch(&self, windows: &[SeriesWindow]) -> Result<Vec<Vec<f64>>> {
        if !self.fitted {
            return Err(Error::NotFitted(self.spec()));
        }
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(self.batch) {
            let payload = ImputePayload {
                windows: chunk.iter().map(WireWindow::from_window).collect(),
            };
            let msg = self.with_channel(|c| c.request(MessageKind::Impute, &payload))?;
            let result: ImputeResult = msg.payload_as()?;
            if result.values.len() != chunk.len() {
                return Err(Error::Bridge(format!(
                    "asked for {} windows, got {}",
                    chunk.len(),
                    result.values.len()
                )));
            }
            for (w, v) in chunk.iter().zip(&result.values) {
                check_output(w, v, "bridge adapter")?;
            }
            out.extend(result.values);
        }
        Ok(out)
    }

    fn state(&self) -> serde_json::Value {
        json!({ "command": self.command })
    }
}

/// Serve imputers built by `factory` over `input`/`output` until shutdown
/// or end of input. Each `fit` replaces the previous model.
pub fn serve(input: impl BufRead, mut output: impl Write, factory: &ImputerFactory) -> Result<()> {
    let mut model: Option<Box<dyn Imputer>> = None;
    let io_err = |e| Error::Bridge(format!("output failed: {e}"));
    for line in input.lines() {
        let line = line.map_err(|e| Error::Bridge(format!("input failed: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let (reply, stop) = match BridgeMessage::parse(&line) {
            Err(e) => {
                let id = serde_json::from_str::<Value>(&line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(Value::as_u64))
                    .unwrap_or(0);
                (
                    BridgeMessage::error(id, format!("malformed request: {e}")),
                    false,
                )
            }
            Ok(msg) => {
                let stop = msg.kind == MessageKind::Shutdown;
                let reply = handle(&msg, &mut model, factory)
                    .unwrap_or_else(|e| BridgeMessage::error(msg.id, e.to_string()));
                (reply, stop)
            }
        };
        writeln!(output, "{}", reply.to_line()?).map_err(io_err)?;
        output.flush().map_err(io_err)?;
        if stop {
            break;
        }
    }
    Ok(())
}

fn handle(
    msg: &BridgeMessage,
    model: &mut Option<Box<dyn Imputer>>,
    factory: &ImputerFactory,
) -> Result<BridgeMessage> {
    let id = msg.id;
    match msg.kind {
        MessageKind::Fit => {
            let p: FitPayload = msg.payload_as()?;
            let windows = p
                .windows
                .iter()
                .enumerate()
                .map(|(i, w)| w.to_window("fit", i))
                .collect::<Result<Vec<_>>>()?;
            *model = Some(factory.fit(&windows, RunSeed(p.seed))?);
            BridgeMessage::new(id, MessageKind::Ok, json!({}))
        }
        MessageKind::Impute => {
            let m = model
                .as_ref()
                .ok_or_else(|| Error::Bridge("not fitted".into()))?;
            let p: ImputePayload = msg.payload_as()?;
            let windows = p
                .windows
                .iter()
                .enumerate()
                .map(|(i, w)| w.to_window("impute", i))
                .collect::<Result<Vec<_>>>()?;
            BridgeMessage::new(
                id,
                MessageKind::Result,
                ImputeResult {
                    values: m.impute_batch(&windows)?,
                },
            )
        }
        MessageKind::Loss => {
            let p: LossPayload = msg.payload_as()?;
            let loss = mse_loss(&p.pred, &p.truth, &MaskVector::from_u8(&p.mask))?;
            BridgeMessage::new(id, MessageKind::Result, LossResult { loss })
        }
        MessageKind::Shutdown => BridgeMessage::new(id, MessageKind::Ok, json!({})),
        other => Err(Error::Bridge(format!("unexpected request kind {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imputers::ImputerRegistry;
    use proptest::prelude::*;

    fn run(requests: &[&str]) -> Vec<BridgeMessage> {
        let factory = ImputerRegistry::builtin().factory("linear").unwrap();
        let input = requests.join("\n");
        let mut out = Vec::new();
        serve(input.as_bytes(), &mut out, &factory).unwrap();
        String::from_utf8(out)
            .unwrap()
            .lines()
            .map(|l| BridgeMessage::parse(l).unwrap())
            .collect()
    }

    #[test]
    fn impute_before_fit_is_an_error() {
        let r = run(&[
            r#"{"id":4,"kind":"impute","payload":{"windows":[{"values":[1.0,null],"mask":[1,0]}]}}"#,
        ]);
        assert_eq!(r[0].id, 4);
        assert_eq!(r[0].kind, MessageKind::Error);
        assert!(r[0].payload["message"]
            .as_str()
            .unwrap()
            .contains("not fitted"));
    }

    #[test]
    fn malformed_request_keeps_loop_alive() {
        let r = run(&[
            r#"{"id":9,"kind":"bogus"}"#,
            "not json",
            r#"{"id":10,"kind":"shutdown","payload":{}}"#,
            r#"{"id":11,"kind":"shutdown","payload":{}}"#,
        ]);
        assert_eq!(r.len(), 3);
        assert_eq!((r[0].id, r[0].kind), (9, MessageKind::Error));
        assert_eq!((r[1].id, r[1].kind), (0, MessageKind::Error));
        assert_eq!((r[2].id, r[2].kind), (10, MessageKind::Ok));
    }

    #[test]
    fn fit_impute_loss_round_trip() {
        let r = run(&[
            r#"{"id":1,"kind":"fit","payload":{"windows":[{"values":[0.0,1.0],"mask":[1,1]}],"seed":3}}"#,
            r#"{"id":2,"kind":"impute","payload":{"windows":[{"values":[1.0,null,3.0],"mask":[1,0,1]}]}}"#,
            r#"{"id":3,"kind":"loss","payload":{"pred":[1.0,2.0],"truth":[3.0,2.0],"mask":[0,1]}}"#,
        ]);
        assert_eq!(r[0].kind, MessageKind::Ok);
        assert_eq!(
            r[1].payload_as::<ImputeResult>().unwrap().values,
            vec![vec![1.0, 2.0, 3.0]]
        );
        assert_eq!(r[2].payload_as::<LossResult>().unwrap().loss, 4.0);
    }

    #[test]
    fn byte_exact_lines() {
        let w = SeriesWindow::new(
            "a",
            0,
            vec![0.5, 0.0, -1.25],
            MaskVector::from_u8(&[1, 0, 1]),
        )
        .unwrap();
        let fit = BridgeMessage::new(
            1,
            MessageKind::Fit,
            FitPayload {
                windows: vec![WireWindow::from_window(&w)],
                seed: 7,
            },
        )
        .unwrap();
        assert_eq!(
            fit.to_line().unwrap(),
            r#"{"id":1,"kind":"fit","payload":{"seed":7,"windows":[{"mask":[1,0,1],"values":[0.5,null,-1.25]}]}}"#
        );
        assert_eq!(
            BridgeMessage::error(2, "not fitted").to_line().unwrap(),
            r#"{"id":2,"kind":"error","payload":{"message":"not fitted"}}"#
        );
    }

    fn arb_kind() -> impl Strategy<Value = MessageKind> {
        prop_oneof![
            Just(MessageKind::Fit),
            Just(MessageKind::Impute),
            Just(MessageKind::Loss),
            Just(MessageKind::Shutdown),
            Just(MessageKind::Ok),
            Just(MessageKind::Result),
            Just(MessageKind::Error),
        ]
    }

    proptest! {
        #[test]
        fn message_round_trip(
            id in any::<u64>(),
            kind in arb_kind(),
            values in prop::collection::vec(prop::option::of(-1e6f64..1e6), 0..20),
        ) {
            let mask = values.iter().map(|v| u8::from(v.is_some())).collect();
            let msg = BridgeMessage::new(id, kind, ImputePayload { windows: vec![WireWindow { values, mask }] }).unwrap();
            let line = msg.to_line().unwrap();
            prop_assert!(!line.contains('\n'));
            prop_assert_eq!(BridgeMessage::parse(&line).unwrap(), msg);
        }
    }
}
