//! Newline-delimited JSON spoken over the chat child's stdin and stdout.
//!
//! Parent to child: `prompt`, `image_chunk`, `shutdown`.
//! Child to parent: `ready`, `token`, `done`, `error`.
//!
//! Images larger than [`IMAGE_CHUNK_CHARS`] base64 characters are sent as a
//! run of `image_chunk` messages followed by a `prompt` whose `image_chunks`
//! field gives their number; smaller ones travel inline as `image_b64`.

use std::io::{BufRead, Read};

use serde::{Deserialize, Serialize};

/// Upper bound on one encoded message, newline excluded.
pub const MAX_MESSAGE_BYTES: usize = 1 << 20;
pub const IMAGE_CHUNK_CHARS: usize = 512 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ParentMessage {
    Prompt {
        text: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        image_b64: Option<String>,
        #[serde(default, skip_serializing_if = "is_zero")]
        image_chunks: u32,
    },
    ImageChunk {
        seq: u32,
        data: String,
    },
    Shutdown,
}

fn is_zero(v: &u32) -> bool {
    *v == 0
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ChildMessage {
    Ready { model: String },
    Token { text: String },
    Done,
    Error { message: String },
}

/// One JSON line including the trailing newline.
pub fn encode_line<T: Serialize>(msg: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec(msg).expect("protocol messages serialize");
    v.push(b'\n');
    v
}

/// Splits base64 text into protocol-sized pieces.
pub fn split_image(b64: &str) -> Vec<&str> {
    // base64 is ASCII, so byte offsets are char boundaries
    b64.as_bytes()
        .chunks(IMAGE_CHUNK_CHARS)
        .map(|c| std::str::from_utf8(c).expect("base64 is ascii"))
        .collect()
}

/// Reads one line of at most `MAX_MESSAGE_BYTES`. `Ok(None)` at end of input.
pub fn read_line<R: BufRead>(r: &mut R) -> std::io::Result<Option<String>> {
    let mut buf = Vec::new();
    let n = r.by_ref().take(MAX_MESSAGE_BYTES as u64 + 2).read_until(b'\n', &mut buf)?;
    if n == 0 {
        return Ok(None);
    }
    if buf.last() != Some(&b'\n') && buf.len() > MAX_MESSAGE_BYTES {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            "message exceeds the 1 MiB limit",
        ));
    }
    while matches!(buf.last(), Some(b'\n' | b'\r')) {
        buf.pop();
    }
    String::from_utf8(buf)
        .map(Some)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}
