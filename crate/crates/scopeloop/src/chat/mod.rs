//! Parent side of the chat bridge: spawns a child speaking the line protocol
//! in [`protocol`], streams its tokens and survives it dying at any point.

pub mod child;
pub mod protocol;

use std::io::{BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use protocol::{encode_line, read_line, split_image, ChildMessage, ParentMessage, IMAGE_CHUNK_CHARS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatMessage {
    pub role: Role,
    pub text: String,
    /// PNG bytes; only user messages carry one.
    pub image: Option<Vec<u8>>,
}

impl ChatMessage {
    pub fn user(text: impl Into<String>, image: Option<Vec<u8>>) -> Self {
        ChatMessage {
            role: Role::User,
            text: text.into(),
            image,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TokenChunk {
    pub text: String,
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChatError {
    #[error("unknown chat model {0:?}")]
    UnknownModel(String),
    #[error("could not start chat worker: {0}")]
    SpawnFailure(String),
    #[error("chat worker not ready after {0:?}")]
    HandshakeTimeout(Duration),
    #[error("chat channel broken: {reason}")]
    ChannelBroken { partial: String, reason: String },
    #[error("chat model error: {0}")]
    Model(String),
    #[error("only user messages can be sent")]
    NotAUserMessage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatState {
    Open,
    Streaming,
    Closed,
}

/// How to launch the child.
#[derive(Debug, Clone)]
pub struct ChatCommand {
    pub program: PathBuf,
    pub args: Vec<String>,
    pub handshake_timeout: Duration,
    /// Longest gap tolerated between two child messages while streaming.
    pub idle_timeout: Duration,
}

impl ChatCommand {
    /// This executable's hidden `chat-worker` subcommand.
    pub fn current_exe() -> std::io::Result<Self> {
        Ok(ChatCommand::new(std::env::current_exe()?, vec!["chat-worker".into()]))
    }

    pub fn new(program: PathBuf, args: Vec<String>) -> Self {
        ChatCommand {
            program,
            args,
            handshake_timeout: Duration::from_secs(5),
            idle_timeout: Duration::from_secs(30),
        }
    }
}

enum ReaderEvent {
    Message(ChildMessage),
    Garbled(String),
    Eof,
}

struct Shared {
    child: Mutex<Option<Child>>,
    stdin: Mutex<Option<ChildStdin>>,
    events: Mutex<Receiver<ReaderEvent>>,
    state: Mutex<ChatState>,
    abandoned: Mutex<u32>,
    idle_timeout: Duration,
    pid: u32,
}

impl Shared {
    fn set_state(&self, s: ChatState) {
        *self.state.lock().unwrap() = s;
    }

    /// Kills and reaps the child if it is still around.
    fn reap(&self) {
        if let Some(mut c) = self.child.lock().unwrap().take() {
            let _ = c.kill();
            let _ = c.wait();
        }
        self.stdin.lock().unwrap().take();
        self.set_state(ChatState::Closed);
    }
}

impl Drop for Shared {
    fn drop(&mut self) {
        if let Some(mut c) = self.child.get_mut().unwrap().take() {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

/// A running chat child. Cheap to clone; every clone refers to the same process.
#[derive(Clone)]
pub struct ChatHandle {
    shared: Arc<Shared>,
    model: String,
}

const GRACE: Duration = Duration::from_millis(1500);

/// Spawns the child for `model` and waits for its `ready` line.
pub fn open_chat(model: &str, command: &ChatCommand) -> Result<ChatHandle, ChatError> {
    if !child::CHAT_MODELS.contains(&model) {
        return Err(ChatError::UnknownModel(model.to_string()));
    }
    let mut child = Command::new(&command.program)
        .args(&command.args)
        .arg("--model")
        .arg(model)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .map_err(|e| ChatError::SpawnFailure(format!("{}: {e}", command.program.display())))?;
    let stdout = child.stdout.take().expect("piped stdout");
    let stdin = child.stdin.take().expect("piped stdin");
    let (tx, rx) = mpsc::channel();
    std::thread::Builder::new()
        .name("scopeloop-chat-reader".into())
        .spawn(move || {
            let mut r = BufReader::new(stdout);
            loop {
                let ev = match read_line(&mut r) {
                    Ok(Some(line)) if line.trim().is_empty() => continue,
                    Ok(Some(line)) => match serde_json::from_str::<ChildMessage>(&line) {
                        Ok(m) => ReaderEvent::Message(m),
                        Err(_) => ReaderEvent::Garbled(line),
                    },
                    Ok(None) | Err(_) => ReaderEvent::Eof,
                };
                let end = matches!(ev, ReaderEvent::Eof);
                if tx.send(ev).is_err() || end {
                    break;
                }
            }
        })
        .map_err(|e| ChatError::SpawnFailure(e.to_string()))?;
    let shared = Arc::new(Shared {
        pid: child.id(),
        child: Mutex::new(Some(child)),
        stdin: Mutex::new(Some(stdin)),
        events: Mutex::new(rx),
        state: Mutex::new(ChatState::Open),
        abandoned: Mutex::new(0),
        idle_timeout: command.idle_timeout,
    });
    let handshake = shared.events.lock().unwrap().recv_timeout(command.handshake_timeout);
    match handshake {
        Ok(ReaderEvent::Message(ChildMessage::Ready { .. })) => Ok(ChatHandle {
            shared,
            model: model.to_string(),
        }),
        Err(RecvTimeoutError::Timeout) => {
            shared.reap();
            Err(ChatError::HandshakeTimeout(command.handshake_timeout))
        }
        Ok(ReaderEvent::Message(ChildMessage::Error { message })) => {
            shared.reap();
            Err(ChatError::SpawnFailure(message))
        }
        Ok(_) | Err(RecvTimeoutError::Disconnected) => {
            shared.reap();
            Err(ChatError::SpawnFailure("worker exited before the handshake".into()))
        }
    }
}

impl ChatHandle {
    pub fn model(&self) -> &str {
        &self.model
    }

    pub fn pid(&self) -> u32 {
        self.shared.pid
    }

    /// Current state; notices a child that died since the last call.
    pub fn state(&self) -> ChatState {
        let s = *self.shared.state.lock().unwrap();
        if s == ChatState::Closed {
            return s;
        }
        let exited = match self.shared.child.lock().unwrap().as_mut() {
            Some(c) => !matches!(c.try_wait(), Ok(None)),
            None => true,
        };
        if exited {
            self.shared.reap();
            return ChatState::Closed;
        }
        s
    }

    fn write(&self, bytes: &[u8]) -> std::io::Result<()> {
        let mut guard = self.shared.stdin.lock().unwrap();
        let stdin = guard
            .as_mut()
            .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::BrokenPipe, "stdin closed"))?;
        stdin.write_all(bytes)?;
        stdin.flush()
    }

    /// Sends `msg` and returns the stream of its reply.
    pub fn send_prompt(&self, msg: &ChatMessage) -> Result<TokenStream<'_>, ChatError> {
        if msg.role != Role::User {
            return Err(ChatError::NotAUserMessage);
        }
        let broken = |reason: String| ChatError::ChannelBroken {
            partial: String::new(),
            reason,
        };
        let events = self.shared.events.lock().unwrap();
        match self.state() {
            ChatState::Closed => return Err(broken("chat is closed".into())),
            ChatState::Streaming => return Err(broken("a reply is already streaming".into())),
            ChatState::Open => {}
        }
        // finish replies whose streams were dropped early
        while *self.shared.abandoned.lock().unwrap() > 0 {
            match events.recv_timeout(self.shared.idle_timeout) {
                Ok(ReaderEvent::Message(ChildMessage::Done | ChildMessage::Error { .. })) => {
                    *self.shared.abandoned.lock().unwrap() -= 1;
                }
                Ok(ReaderEvent::Message(_)) => {}
                Ok(ReaderEvent::Garbled(_)) | Ok(ReaderEvent::Eof) | Err(_) => {
                    self.shared.reap();
                    return Err(broken("chat worker exited".into()));
                }
            }
        }
        let b64 = msg
            .image
            .as_ref()
            .map(|img| base64::engine::general_purpose::STANDARD.encode(img));
        let mut wire = Vec::new();
        let prompt = match b64 {
            Some(b) if b.len() > IMAGE_CHUNK_CHARS => {
                let parts = split_image(&b);
                for (seq, data) in parts.iter().enumerate() {
                    wire.extend(encode_line(&ParentMessage::ImageChunk {
                        seq: seq as u32,
                        data: (*data).to_string(),
                    }));
                }
                ParentMessage::Prompt {
                    text: msg.text.clone(),
                    image_b64: None,
                    image_chunks: parts.len() as u32,
                }
            }
            image_b64 => ParentMessage::Prompt {
                text: msg.text.clone(),
                image_b64,
                image_chunks: 0,
            },
        };
        wire.extend(encode_line(&prompt));
        if let Err(e) = self.write(&wire) {
            self.shared.reap();
            return Err(broken(e.to_string()));
        }
        self.shared.set_state(ChatState::Streaming);
        Ok(TokenStream {
            handle: self,
            events,
            partial: String::new(),
            finished: false,
        })
    }

    /// Convenience: the whole reply as one string.
    pub fn ask(&self, msg: &ChatMessage) -> Result<String, ChatError> {
        let mut text = String::new();
        for chunk in self.send_prompt(msg)? {
            text.push_str(&chunk?.text);
        }
        Ok(text)
    }

    /// Asks the child to exit, then kills it if it has not within the grace
    /// period. Safe to call repeatedly and from any thread.
    pub fn close(&self) {
        if *self.shared.state.lock().unwrap() == ChatState::Closed {
            self.shared.reap();
            return;
        }
        let _ = self.write(&encode_line(&ParentMessage::Shutdown));
        self.shared.stdin.lock().unwrap().take();
        let deadline = Instant::now() + GRACE;
        loop {
            let done = match self.shared.child.lock().unwrap().as_mut() {
                Some(c) => !matches!(c.try_wait(), Ok(None)),
                None => true,
            };
            if done || Instant::now() >= deadline {
                break;
            }
            std::thread::sleep(Duration::from_millis(10));
        }
        self.shared.reap();
    }
}

/// Reply chunks in order. The final item is a chunk with `terminal = true`
/// unless the stream fails, in which case the error carries the text
/// received so far.
pub struct TokenStream<'a> {
    handle: &'a ChatHandle,
    events: MutexGuard<'a, Receiver<ReaderEvent>>,
    partial: String,
    finished: bool,
}

impl TokenStream<'_> {
    pub fn partial(&self) -> &str {
        &self.partial
    }

    fn fail(&mut self, reason: String) -> Option<Result<TokenChunk, ChatError>> {
        self.finished = true;
        self.handle.shared.reap();
        Some(Err(ChatError::ChannelBroken {
            partial: std::mem::take(&mut self.partial),
            reason,
        }))
    }
}

impl Iterator for TokenStream<'_> {
    type Item = Result<TokenChunk, ChatError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.finished {
            return None;
        }
        match self.events.recv_timeout(self.handle.shared.idle_timeout) {
            Ok(ReaderEvent::Message(ChildMessage::Token { text })) => {
                self.partial.push_str(&text);
                Some(Ok(TokenChunk {
                    text,
                    terminal: false,
                }))
            }
            Ok(ReaderEvent::Message(ChildMessage::Done)) => {
                self.finished = true;
                self.handle.shared.set_state(ChatState::Open);
                Some(Ok(TokenChunk {
                    text: String::new(),
                    terminal: true,
                }))
            }
            Ok(ReaderEvent::Message(ChildMessage::Error { message })) => {
                self.finished = true;
                self.handle.shared.set_state(ChatState::Open);
                Some(Err(ChatError::Model(message)))
            }
            Ok(ReaderEvent::Message(ChildMessage::Ready { .. })) => {
                self.fail("unexpected ready message mid-stream".into())
            }
            Ok(ReaderEvent::Garbled(line)) => {
                let shown: String = line.chars().take(80).collect();
                self.fail(format!("unparseable line from worker: {shown}"))
            }
            Ok(ReaderEvent::Eof) | Err(RecvTimeoutError::Disconnected) => {
                self.fail("chat worker exited mid-stream".into())
            }
            Err(RecvTimeoutError::Timeout) => self.fail("chat worker stopped responding".into()),
        }
    }
}

impl Drop for TokenStream<'_> {
    fn drop(&mut self) {
        if !self.finished {
            // the reply keeps arriving; the next prompt discards it
            let mut s = self.handle.shared.state.lock().unwrap();
            if *s == ChatState::Streaming {
                *s = ChatState::Open;
                *self.handle.shared.abandoned.lock().unwrap() += 1;
            }
        }
    }
}
