//! Embedder wire protocol, version 1.
//!
//! Newline-delimited JSON, one message per line, tagged by `op`:
//!
//! ```text
//! -> {"op":"hello","proto":1}
//! <- {"op":"hello","dim":384,"budget":512,"name":"..."}
//! -> {"op":"embed","items":[{"id":"a","text":"..."}]}
//! <- {"op":"vecs","items":[{"id":"a","v":[0.1, ...]}]}
//! -> {"op":"count","text":"..."}
//! <- {"op":"count","n":7}
//! <- {"op":"err","id":null,"msg":"..."}
//! ```

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::ColumnEmbedder;
use crate::Result;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextItem {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VecItem {
    pub id: String,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Request {
    Hello { proto: u32 },
    Embed { items: Vec<TextItem> },
    Count { text: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Response {
    Hello { dim: usize, budget: usize, name: String },
    Vecs { items: Vec<VecItem> },
    Count { n: usize },
    Err { id: Option<String>, msg: String },
}

/// Writes `msg` as one line with a single write, so small messages are not
/// split across TCP segments.
pub fn write_message<W: Write, T: Serialize>(w: &mut W, msg: &T) -> Result<()> {
    let mut buf = serde_json::to_vec(msg)?;
    buf.push(b'\n');
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

/// Answers one request.
pub fn respond(embedder: &dyn ColumnEmbedder, req: Request) -> Response {
    match req {
        Request::Hello { proto } if proto != PROTOCOL_VERSION => Response::Err {
            id: None,
            msg: format!("unsupported protocol version {proto}"),
        },
        Request::Hello { .. } => Response::Hello {
            dim: embedder.dim(),
            budget: embedder.token_budget(),
            name: embedder.name(),
        },
        Request::Embed { items } => {
            let pairs: Vec<(String, String)> = items.into_iter().map(|i| (i.id, i.text)).collect();
            match embedder.embed_batch(&pairs) {
                Ok(vs) => Response::Vecs {
                    items: vs
                        .into_iter()
                        .map(|(id, v)| VecItem { id, v: v.into_inner() })
                        .collect(),
                },
                Err(e) => Response::Err {
                    id: None,
                    msg: e.to_string(),
                },
            }
        }
        Request::Count { text } => match embedder.count_tokens(&text) {
            Ok(n) => Response::Count { n },
            Err(e) => Response::Err {
                id: None,
                msg: e.to_string(),
            },
        },
    }
}

/// Serves requests from `reader` until end of input. Malformed lines get an
/// `err` response and the loop continues.
pub fn serve<R: BufRead, W: Write>(reader: R, mut writer: W, embedder: &dyn ColumnEmbedder) -> Result<()> {
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = match serde_json::from_str::<Request>(&line) {
            Ok(req) => respond(embedder, req),
            Err(e) => Response::Err {
                id: None,
                msg: format!("bad request: {e}"),
            },
        };
        write_message(&mut writer, &resp)?;
    }
    Ok(())
}
