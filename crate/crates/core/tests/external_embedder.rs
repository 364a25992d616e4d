use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::thread;

use lakejoin::embed::external::ExternalEmbedder;
use lakejoin::embed::protocol::{self, Request, Response, VecItem};
use lakejoin::embed::{CellEmbedder, ColumnEmbedder, HashEmbedder};
use lakejoin::Error;

fn hash_server(emb: HashEmbedder) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    thread::spawn(move || {
        for conn in listener.incoming() {
            let conn = conn.unwrap();
            let emb = emb;
            thread::spawn(move || {
                let reader = BufReader::new(conn.try_clone().unwrap());
                let _ = protocol::serve(reader, conn, &emb);
            });
        }
    });
    addr
}

// A server that answers hello honestly and every other request with `reply`.
fn scripted_server(dim: usize, reply: impl Fn(Request) -> Response + Send + 'static) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    thread::spawn(move || {
        let (conn, _) = listener.accept().unwrap();
        let mut w: TcpStream = conn.try_clone().unwrap();
        for line in BufReader::new(conn).lines() {
            let req: Request = serde_json::from_str(&line.unwrap()).unwrap();
            let resp = match req {
                Request::Hello { .. } => Response::Hello { dim, budget: 128, name: "scripted".into() },
                other => reply(other),
            };
            protocol::write_message(&mut w, &resp).unwrap();
            w.flush().unwrap();
        }
    });
    addr
}

fn items(texts: &[&str]) -> Vec<(String, String)> {
    texts.iter().enumerate().map(|(i, t)| (format!("t{i}"), t.to_string())).collect()
}

#[test]
fn tcp_vectors_are_bit_identical() {
    let local = HashEmbedder::new(48, 11).unwrap().with_budget(300);
    let remote = ExternalEmbedder::connect_tcp(&hash_server(local)).unwrap();
    assert_eq!(ColumnEmbedder::dim(&remote), 48);
    assert_eq!(remote.token_budget(), 300);
    assert_eq!(remote.name(), "hash:48:11");

    let batch = items(&["Paris, Berlin and Rome.", "apple banana", "x", "", "Ünïcödé cells 3.14159"]);
    let want = local.embed_batch(&batch).unwrap();
    let got = remote.embed_batch(&batch).unwrap();
    assert_eq!(got.len(), want.len());
    for ((gi, gv), (wi, wv)) in got.iter().zip(&want) {
        assert_eq!(gi, wi);
        let gb: Vec<u64> = gv.iter().map(|x| x.to_bits()).collect();
        let wb: Vec<u64> = wv.iter().map(|x| x.to_bits()).collect();
        assert_eq!(gb, wb, "{gi}");
    }
    assert_eq!(remote.count_tokens("one two  three").unwrap(), 3);
    assert_eq!(
        remote.embed_cell("Madrid").unwrap().to_vec(),
        local.embed_cell("Madrid").unwrap().to_vec()
    );
    assert!(remote.embed_batch(&[]).unwrap().is_empty());
}

#[test]
fn concurrent_callers_share_one_connection() {
    let local = HashEmbedder::new(16, 2).unwrap();
    let remote = ExternalEmbedder::connect_tcp(&hash_server(local)).unwrap();
    thread::scope(|s| {
        for t in 0..4 {
            let (remote, local) = (&remote, &local);
            s.spawn(move || {
                for i in 0..50 {
                    let text = format!("cell {t} {i}");
                    assert_eq!(remote.embed(&text).unwrap().to_vec(), local.embed(&text).unwrap().to_vec());
                }
            });
        }
    });
}

#[test]
fn responses_matched_by_id_not_position() {
    let addr = scripted_server(2, |req| match req {
        Request::Embed { items } => Response::Vecs {
            items: items
                .iter()
                .rev()
                .map(|i| VecItem { id: i.id.clone(), v: vec![i.text.len() as f64, 1.0] })
                .collect(),
        },
        _ => unreachable!(),
    });
    let remote = ExternalEmbedder::connect_tcp(&addr).unwrap();
    let got = remote.embed_batch(&items(&["a", "bbb", "cc"])).unwrap();
    let lens: Vec<f64> = got.iter().map(|(_, v)| v[0]).collect();
    assert_eq!(lens, vec![1.0, 3.0, 2.0]);
    assert_eq!(got[1].0, "t1");
}

#[test]
fn missing_id_is_an_error() {
    let addr = scripted_server(2, |req| match req {
        Request::Embed { items } => Response::Vecs {
            items: items.iter().skip(1).map(|i| VecItem { id: i.id.clone(), v: vec![1.0, 0.0] }).collect(),
        },
        _ => unreachable!(),
    });
    let remote = ExternalEmbedder::connect_tcp(&addr).unwrap();
    assert!(matches!(remote.embed_batch(&items(&["a", "b"])), Err(Error::MissingId(id)) if id == "t0"));
}

#[test]
fn wrong_dimension_is_an_error() {
    let addr = scripted_server(3, |req| match req {
        Request::Embed { items } => Response::Vecs {
            items: items.iter().map(|i| VecItem { id: i.id.clone(), v: vec![1.0, 0.0] }).collect(),
        },
        _ => unreachable!(),
    });
    let remote = ExternalEmbedder::connect_tcp(&addr).unwrap();
    assert!(matches!(
        remote.embed_batch(&items(&["a"])),
        Err(Error::DimensionMismatch { expected: 3, found: 2 })
    ));
}

#[test]
fn remote_errors_surface() {
    let addr = scripted_server(2, |_| Response::Err { id: Some("t0".into()), msg: "too long".into() });
    let remote = ExternalEmbedder::connect_tcp(&addr).unwrap();
    match remote.embed_batch(&items(&["a"])) {
        Err(Error::Remote { id, msg }) => {
            assert_eq!(id.as_deref(), Some("t0"));
            assert_eq!(msg, "too long");
        }
        other => panic!("expected remote error, got {other:?}"),
    }
    assert!(matches!(remote.count_tokens("x"), Err(Error::Remote { .. })));
}

#[test]
fn unreachable_server_is_a_transport_error() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    drop(listener);
    assert!(matches!(ExternalEmbedder::connect_tcp(&addr), Err(Error::Transport(_))));
}
