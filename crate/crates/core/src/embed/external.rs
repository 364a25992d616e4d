//! Client for an out-of-process embedder speaking [`super::protocol`].

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::Mutex;

use super::protocol::{write_message, Request, Response, TextItem, PROTOCOL_VERSION};
use super::{CellEmbedder, ColumnEmbedder, EmbeddingVector};
use crate::{Error, Result};

struct Connection {
    reader: Box<dyn BufRead + Send>,
    writer: Box<dyn Write + Send>,
    child: Option<Child>,
}

impl Connection {
    fn call(&mut self, req: &Request) -> Result<Response> {
        write_message(&mut self.writer, req).map_err(transport)?;
        let mut line = String::new();
        let n = self.reader.read_line(&mut line).map_err(|e| Error::Transport(e.to_string()))?;
        if n == 0 {
            return Err(Error::Transport("embedder closed the connection".into()));
        }
        serde_json::from_str(&line).map_err(|e| Error::Protocol(format!("bad response: {e}")))
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(child) = &mut self.child {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

fn transport(e: Error) -> Error {
    match e {
        Error::Io(e) => Error::Transport(e.to_string()),
        other => other,
    }
}

/// An embedder behind a TCP socket or a child process's stdio.
///
/// One request is in flight per connection; concurrent callers serialize on
/// an internal lock.
pub struct ExternalEmbedder {
    conn: Mutex<Connection>,
    dim: usize,
    budget: usize,
    name: String,
}

impl ExternalEmbedder {
    pub fn connect_tcp(addr: &str) -> Result<Self> {
        let stream = TcpStream::connect(addr).map_err(|e| Error::Transport(format!("{addr}: {e}")))?;
        stream.set_nodelay(true).map_err(|e| Error::Transport(e.to_string()))?;
        let writer = stream.try_clone().map_err(|e| Error::Transport(e.to_string()))?;
        Self::handshake(Connection {
            reader: Box::new(BufReader::new(stream)),
            writer: Box::new(writer),
            child: None,
        })
    }

    /// Spawns `command` (split on whitespace) and talks over its stdio.
    pub fn spawn(command: &str) -> Result<Self> {
        let mut parts = command.split_whitespace();
        let program = parts
            .next()
            .ok_or_else(|| Error::InvalidParam("empty embedder command".into()))?;
        let mut child = Command::new(program)
            .args(parts)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Transport(format!("{command}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Self::handshake(Connection {
            reader: Box::new(BufReader::new(stdout)),
            writer: Box::new(stdin),
            child: Some(child),
        })
    }

    pub fn from_streams<R, W>(reader: R, writer: W) -> Result<Self>
    where
        R: BufRead + Send + 'static,
        W: Write + Send + 'static,
    {
        Self::handshake(Connection {
            reader: Box::new(reader),
            writer: Box::new(writer),
            child: None,
        })
    }

    fn handshake(mut conn: Connection) -> Result<Self> {
        match conn.call(&Request::Hello {
            proto: PROTOCOL_VERSION,
        })? {
            Response::Hello { dim, budget, name } => {
                if dim == 0 {
                    return Err(Error::Protocol("embedder advertised dimension 0".into()));
                }
                log::info!("external embedder {name:?}: dim={dim} budget={budget}");
                Ok(ExternalEmbedder {
                    conn: Mutex::new(conn),
                    dim,
                    budget,
                    name,
                })
            }
            Response::Err { id, msg } => Err(Error::Remote { id, msg }),
            other => Err(Error::Protocol(format!("expected hello, got {other:?}"))),
        }
    }

    fn call(&self, req: &Request) -> Result<Response> {
        let mut conn = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        conn.call(req)
    }
}

impl ColumnEmbedder for ExternalEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn token_budget(&self) -> usize {
        self.budget
    }

    fn embed_batch(&self, items: &[(String, String)]) -> Result<Vec<(String, EmbeddingVector)>> {
        if items.is_empty() {
            return Ok(Vec::new());
        }
        let req = Request::Embed {
            items: items
                .iter()
                .map(|(id, text)| TextItem {
                    id: id.clone(),
                    text: text.clone(),
                })
                .collect(),
        };
        let returned = match self.call(&req)? {
            Response::Vecs { items } => items,
            Response::Err { id, msg } => return Err(Error::Remote { id, msg }),
            other => return Err(Error::Protocol(format!("expected vecs, got {other:?}"))),
        };
        // matched by id, not by position
        let by_id: HashMap<String, Vec<f64>> =
            returned.into_iter().map(|item| (item.id, item.v)).collect();
        items
            .iter()
            .map(|(id, _)| {
                let v = by_id.get(id).ok_or_else(|| Error::MissingId(id.clone()))?;
                if v.len() != self.dim {
                    return Err(Error::DimensionMismatch {
                        expected: self.dim,
                        found: v.len(),
                    });
                }
                Ok((id.clone(), EmbeddingVector::new(v.clone())?))
            })
            .collect()
    }

    fn count_tokens(&self, text: &str) -> Result<usize> {
        match self.call(&Request::Count {
            text: text.to_owned(),
        })? {
            Response::Count { n } => Ok(n),
            Response::Err { id, msg } => Err(Error::Remote { id, msg }),
            other => Err(Error::Protocol(format!("expected count, got {other:?}"))),
        }
    }

    fn name(&self) -> String {
        self.name.clone()
    }
}

impl CellEmbedder for ExternalEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_cell(&self, cell: &str) -> Result<EmbeddingVector> {
        ColumnEmbedder::embed(self, cell)
    }
}
