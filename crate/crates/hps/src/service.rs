//! TCP front end for a [`Node`] and a matching blocking client.
//!
//! One thread per connection; requests on a connection are answered in
//! order. A frame that fails to decode gets a BAD_REQUEST reply and the
//! connection stays usable. A length prefix above `MAX_FRAME_LEN` gets a
//! BAD_REQUEST reply and the connection is closed, since the body cannot
//! be skipped safely.

use std::collections::HashMap;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use hps_core::wire::{Opcode, Request, Response, MAX_FRAME_LEN};
use hps_core::EmbeddingKey;
use log::{debug, warn};
use parking_lot::Mutex;

use crate::error::{Error, Result};
use crate::node::Node;

pub struct Server {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    conns: Arc<Mutex<HashMap<u64, TcpStream>>>,
    accept: Option<JoinHandle<()>>,
}

impl Server {
    pub fn bind(node: Arc<Node>, addr: impl ToSocketAddrs) -> Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let conns: Arc<Mutex<HashMap<u64, TcpStream>>> = Arc::default();
        let (st, cs) = (Arc::clone(&stop), Arc::clone(&conns));
        let accept = std::thread::Builder::new()
            .name("hps-accept".into())
            .spawn(move || {
                for (id, stream) in (0u64..).zip(listener.incoming()) {
                    if st.load(Ordering::Acquire) {
                        break;
                    }
                    let stream = match stream {
                        Ok(s) => s,
                        Err(e) => {
                            warn!("accept failed: {e}");
                            continue;
                        }
                    };
                    if let Ok(c) = stream.try_clone() {
                        cs.lock().insert(id, c);
                    }
                    let node = Arc::clone(&node);
                    let cs = Arc::clone(&cs);
                    let _ = std::thread::Builder::new().name("hps-conn".into()).spawn(move || {
                        let peer = stream.peer_addr().ok();
                        if let Err(e) = serve_connection(&node, stream) {
                            debug!("connection {peer:?} ended: {e}");
                        }
                        cs.lock().remove(&id);
                    });
                }
            })
            .expect("spawn accept thread");
        Ok(Self { addr, stop, conns, accept: Some(accept) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the accept loop exits.
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    pub fn shutdown(&mut self) {
        if self.stop.swap(true, Ordering::AcqRel) {
            return;
        }
        // wake the blocking accept
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        for (_, c) in self.conns.lock().drain() {
            let _ = c.shutdown(Shutdown::Both);
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn write_frame(w: &mut impl Write, resp: &Response) -> io::Result<()> {
    w.write_all(&resp.to_frame())?;
    w.flush()
}

/// Reads exactly `buf.len()` bytes; `Ok(false)` on a clean EOF before the
/// first byte.
fn read_full(r: &mut impl Read, buf: &mut [u8]) -> io::Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(false),
            Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(true)
}

/// Decodes one request body and executes it.
pub fn respond(node: &Node, body: &[u8]) -> Response {
    match Request::decode_body(body) {
        Ok(req) => node.handle(req),
        Err(e) => Response::bad_request(e.to_string()),
    }
}

pub fn serve_connection(node: &Node, stream: TcpStream) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    let mut len_buf = [0u8; 4];
    let mut body = Vec::new();
    loop {
        if !read_full(&mut reader, &mut len_buf)? {
            return Ok(());
        }
        let len = u32::from_le_bytes(len_buf) as usize;
        if len > MAX_FRAME_LEN {
            write_frame(&mut writer, &Response::bad_request(format!("frame of {len} bytes exceeds the limit")))?;
            return Ok(());
        }
        body.resize(len, 0);
        if !read_full(&mut reader, &mut body)? && len > 0 {
            return Err(io::ErrorKind::UnexpectedEof.into());
        }
        write_frame(&mut writer, &respond(node, &body))?;
    }
}

pub struct Client {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        let s = TcpStream::connect(addr)?;
        s.set_nodelay(true)?;
        Ok(Self { reader: BufReader::new(s.try_clone()?), writer: BufWriter::new(s) })
    }

    /// Sends raw bytes and reads one response, decoding it as a reply to
    /// `opcode`.
    pub fn call_raw(&mut self, bytes: &[u8], opcode: Opcode) -> Result<Response> {
        self.writer.write_all(bytes)?;
        self.writer.flush()?;
        let mut len_buf = [0u8; 4];
        if !read_full(&mut self.reader, &mut len_buf)? {
            return Err(Error::Io(io::ErrorKind::UnexpectedEof.into()));
        }
        let len = u32::from_le_bytes(len_buf) as usize;
        if len > MAX_FRAME_LEN {
            return Err(Error::Corrupt(hps_core::DecodeError::FrameTooLarge(len)));
        }
        let mut body = vec![0u8; len];
        read_full(&mut self.reader, &mut body)?;
        Ok(Response::decode_body(&body, opcode)?)
    }

    pub fn call(&mut self, req: &Request) -> Result<Response> {
        self.call_raw(&req.to_frame(), req.opcode())
    }

    pub fn lookup(&mut self, table: &str, keys: Vec<EmbeddingKey>) -> Result<Response> {
        self.call(&Request::Lookup { table: table.into(), keys })
    }

    pub fn update(&mut self, table: &str, records: Vec<(EmbeddingKey, Vec<f32>)>) -> Result<Response> {
        self.call(&Request::Update { table: table.into(), records })
    }

    pub fn refresh(&mut self, table: &str) -> Result<Response> {
        self.call(&Request::Refresh { table: table.into() })
    }

    pub fn stats(&mut self, table: &str) -> Result<Response> {
        self.call(&Request::Stats { table: table.into() })
    }
}
