//! Device bridge line protocol.
//!
//! Requests and replies are single `\n`-terminated lines:
//!
//! | request        | reply                                   |
//! |----------------|-----------------------------------------|
//! | `SHOT`         | `DIMS <w> <h>` then one base64 line     |
//! | `EXEC <action>`| `OK` or `ERR <reason>`                  |
//! | `RESET`        | `OK`                                    |
//!
//! Actions use the textual action grammar.

use async_trait::async_trait;
use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use tokio::io::{AsyncBufReadExt, AsyncRead, AsyncWrite, AsyncWriteExt, BufStream};

use super::{ApplyOutcome, EnvError, Environment, SimEnv};
use crate::codec::parse_action;
use crate::types::{Action, PayloadRef, ScreenDims, Screenshot};

/// Client side of the bridge; drives a real device through a bridge process.
pub struct DeviceBridge<S> {
    stream: BufStream<S>,
    shots: u64,
}

impl<S: AsyncRead + AsyncWrite + Unpin + Send> DeviceBridge<S> {
    pub fn new(stream: S) -> Self {
        Self { stream: BufStream::new(stream), shots: 0 }
    }

    async fn send(&mut self, line: &str) -> Result<(), EnvError> {
        self.stream.write_all(line.as_bytes()).await?;
        self.stream.write_all(b"\n").await?;
        self.stream.flush().await?;
        Ok(())
    }

    async fn recv(&mut self) -> Result<String, EnvError> {
        let mut line = String::new();
        if self.stream.read_line(&mut line).await? == 0 {
            return Err(EnvError::Io("bridge closed the connection".into()));
        }
        Ok(line.trim_end_matches(['\r', '\n']).to_string())
    }

    async fn expect_ok(&mut self) -> Result<(), EnvError> {
        let reply = self.recv().await?;
        if reply == "OK" {
            Ok(())
        } else if let Some(reason) = reply.strip_prefix("ERR") {
            Err(EnvError::Rejected(reason.trim().to_string()))
        } else {
            Err(EnvError::Protocol(format!("expected OK or ERR, got {reply:?}")))
        }
    }
}

#[async_trait]
impl<S: AsyncRead + AsyncWrite + Unpin + Send> Environment for DeviceBridge<S> {
    async fn reset(&mut self) -> Result<(), EnvError> {
        self.send("RESET").await?;
        self.expect_ok().await
    }

    async fn screenshot(&mut self) -> Result<Screenshot, EnvError> {
        self.send("SHOT").await?;
        let header = self.recv().await?;
        if let Some(reason) = header.strip_prefix("ERR") {
            return Err(EnvError::Rejected(reason.trim().to_string()));
        }
        let dims = parse_dims(&header)?;
        let image = self.recv().await?;
        let bytes = STANDARD.decode(image.trim()).map_err(|e| EnvError::Protocol(format!("bad base64 image: {e}")))?;
        let id = format!("shot-{}", self.shots);
        self.shots += 1;
        Ok(Screenshot { id, dims, payload_ref: PayloadRef::Inline(bytes) })
    }

    async fn apply(&mut self, action: &Action) -> Result<ApplyOutcome, EnvError> {
        self.send(&format!("EXEC {action}")).await?;
        self.expect_ok().await?;
        Ok(ApplyOutcome::default())
    }

    fn goal_satisfied(&self, _instruction_id: &str) -> Result<bool, EnvError> {
        Err(EnvError::Unsupported("goal checking"))
    }
}

fn parse_dims(line: &str) -> Result<ScreenDims, EnvError> {
    let bad = || EnvError::Protocol(format!("expected `DIMS w h`, got {line:?}"));
    let mut parts = line.split_whitespace();
    if parts.next() != Some("DIMS") {
        return Err(bad());
    }
    let w = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
    let h = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
    if parts.next().is_some() {
        return Err(bad());
    }
    ScreenDims::new(w, h).map_err(EnvError::Protocol)
}

/// Serves the bridge protocol from a simulated app until the peer hangs
/// up. Screens are sent as their payload bytes (file payloads as the path).
pub async fn serve_sim_bridge<S>(stream: S, mut env: SimEnv) -> Result<(), EnvError>
where
    S: AsyncRead + AsyncWrite + Unpin + Send,
{
    let mut stream = BufStream::new(stream);
    let mut line = String::new();
    loop {
        line.clear();
        if stream.read_line(&mut line).await? == 0 {
            return Ok(());
        }
        let request = line.trim();
        let reply = if request == "SHOT" {
            let shot = env.screenshot().await?;
            let bytes = match &shot.payload_ref {
                PayloadRef::Inline(b) => b.clone(),
                PayloadRef::File(p) | PayloadRef::Blob(p) => p.as_bytes().to_vec(),
            };
            format!("DIMS {} {}\n{}\n", shot.dims.width(), shot.dims.height(), STANDARD.encode(bytes))
        } else if request == "RESET" {
            env.reset().await?;
            "OK\n".to_string()
        } else if let Some(action) = request.strip_prefix("EXEC ") {
            match parse_action(action) {
                Ok(action) => {
                    env.apply(&action).await?;
                    "OK\n".to_string()
                }
                Err(e) => format!("ERR {e}\n"),
            }
        } else {
            format!("ERR unknown request {request:?}\n")
        };
        stream.write_all(reply.as_bytes()).await?;
        stream.flush().await?;
    }
}
