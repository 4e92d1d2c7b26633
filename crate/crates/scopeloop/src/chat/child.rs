//! The chat child process and its mock text model.

use std::io::{BufRead, Write};
use std::time::Duration;

use base64::Engine;

use scopeloop_core::adapters::registry::sha256_hex;

use super::protocol::{encode_line, read_line, ChildMessage, ParentMessage};

pub const MOCK_MODEL: &str = "mock-describer";

/// Models the shipped child can host.
pub const CHAT_MODELS: [&str; 1] = [MOCK_MODEL];

const DESCRIPTIONS: [&str; 4] = [
    "The field shows densely packed tumor cells with hyperchromatic, pleomorphic nuclei. \
     Several mitotic figures are visible near the center. The stroma is sparse and the \
     architecture is largely solid.",
    "Tissue architecture is preserved with evenly spaced nuclei and abundant eosinophilic \
     cytoplasm. No convincing atypia or mitotic activity is seen in this view.",
    "A mixed population of brown-stained (Ki-67 positive) and blue-stained nuclei is \
     present. Roughly a third of the nuclei appear positive, clustered at the lower edge.",
    "This region is dominated by fibrous stroma with scattered inflammatory cells. \
     Nuclear detail is limited at this magnification; consider zooming to 40× for \
     a closer look at the 5 µm structures.",
];

pub const NO_IMAGE: &str = "No image was attached to this question. Capture a field of view \
     and ask again so the description can refer to what is on screen.";

/// The canned answer for an image (selected by content hash) or for a
/// text-only prompt.
pub fn mock_response(image: Option<&[u8]>) -> &'static str {
    match image {
        None => NO_IMAGE,
        Some(bytes) => {
            let digest = sha256_hex(bytes);
            let first = u8::from_str_radix(&digest[..2], 16).expect("hex digest");
            DESCRIPTIONS[first as usize % DESCRIPTIONS.len()]
        }
    }
}

/// Splits a response into stream chunks; each chunk is a word plus the
/// whitespace after it.
pub fn tokenize(text: &str) -> Vec<&str> {
    text.split_inclusive(char::is_whitespace).collect()
}

fn send<W: Write>(out: &mut W, msg: &ChildMessage) -> std::io::Result<()> {
    out.write_all(&encode_line(msg))?;
    out.flush()
}

/// Serves the protocol until `shutdown` or end of input.
pub fn run_chat_worker<R: BufRead, W: Write>(
    model: &str,
    mut input: R,
    mut output: W,
    token_delay: Duration,
) -> std::io::Result<()> {
    if !CHAT_MODELS.contains(&model) {
        send(
            &mut output,
            &ChildMessage::Error {
                message: format!("unknown chat model {model:?}"),
            },
        )?;
        return Ok(());
    }
    send(
        &mut output,
        &ChildMessage::Ready {
            model: model.to_string(),
        },
    )?;
    let mut chunks: Vec<String> = Vec::new();
    while let Some(line) = read_line(&mut input)? {
        if line.trim().is_empty() {
            continue;
        }
        let msg: ParentMessage = match serde_json::from_str(&line) {
            Ok(m) => m,
            Err(e) => {
                send(
                    &mut output,
                    &ChildMessage::Error {
                        message: format!("unparseable message: {e}"),
                    },
                )?;
                continue;
            }
        };
        match msg {
            ParentMessage::Shutdown => break,
            ParentMessage::ImageChunk { seq, data } => {
                if seq as usize != chunks.len() {
                    chunks.clear();
                    send(
                        &mut output,
                        &ChildMessage::Error {
                            message: format!("image chunk {seq} out of order"),
                        },
                    )?;
                    continue;
                }
                chunks.push(data);
            }
            ParentMessage::Prompt {
                image_b64,
                image_chunks,
                ..
            } => {
                let b64 = if image_chunks > 0 {
                    if chunks.len() != image_chunks as usize {
                        let got = chunks.len();
                        chunks.clear();
                        send(
                            &mut output,
                            &ChildMessage::Error {
                                message: format!("expected {image_chunks} image chunks, got {got}"),
                            },
                        )?;
                        continue;
                    }
                    Some(std::mem::take(&mut chunks).concat())
                } else {
                    image_b64
                };
                let image = match b64.map(|s| base64::engine::general_purpose::STANDARD.decode(s)) {
                    None => None,
                    Some(Ok(bytes)) => Some(bytes),
                    Some(Err(e)) => {
                        send(
                            &mut output,
                            &ChildMessage::Error {
                                message: format!("image is not valid base64: {e}"),
                            },
                        )?;
                        continue;
                    }
                };
                for piece in tokenize(mock_response(image.as_deref())) {
                    send(&mut output, &ChildMessage::Token { text: piece.into() })?;
                    if !token_delay.is_zero() {
                        std::thread::sleep(token_delay);
                    }
                }
                send(&mut output, &ChildMessage::Done)?;
            }
        }
    }
    Ok(())
}
