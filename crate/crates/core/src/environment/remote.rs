use std::io::{self, BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use log::warn;

use super::protocol::{
    self, codes, decode_request, decode_response, decode_token, encode_request, encode_response,
    encode_token, ProtocolError, Request, Response, StateFrame, PROTOCOL_VERSION,
};
use super::{EnvError, Environment, StateToken, StepResult};

/// An environment living in another process, reached over the line protocol.
pub struct RemoteEnv {
    game: String,
    writer: Box<dyn Write + Send>,
    lines: Receiver<io::Result<String>>,
    timeout: Duration,
    broken: bool,
    child: Option<Child>,
    socket: Option<TcpStream>,
}

impl RemoteEnv {
    /// Connects to an endpoint: `tcp://host:port`, a bare `host:port`, or
    /// otherwise a command line whose stdio speaks the protocol.
    pub fn connect(endpoint: &str, timeout: Duration) -> Result<Self, EnvError> {
        if let Some(addr) = endpoint.strip_prefix("tcp://") {
            return Self::connect_tcp(addr, timeout);
        }
        if !endpoint.contains(char::is_whitespace)
            && endpoint.contains(':')
            && endpoint.to_socket_addrs().is_ok()
        {
            return Self::connect_tcp(endpoint, timeout);
        }
        let mut parts = endpoint.split_whitespace();
        let program = parts
            .next()
            .ok_or_else(|| EnvError::Unavailable("empty endpoint".into()))?;
        let mut cmd = Command::new(program);
        cmd.args(parts);
        Self::spawn(cmd, timeout)
    }

    pub fn connect_tcp(addr: &str, timeout: Duration) -> Result<Self, EnvError> {
        let addr = addr
            .to_socket_addrs()
            .map_err(|e| EnvError::Unavailable(format!("{addr}: {e}")))?
            .next()
            .ok_or_else(|| EnvError::Unavailable(format!("{addr}: no address")))?;
        let stream = TcpStream::connect_timeout(&addr, timeout)
            .map_err(|e| EnvError::Unavailable(format!("{addr}: {e}")))?;
        stream.set_nodelay(true).ok();
        let reader = stream
            .try_clone()
            .map_err(|e| EnvError::Unavailable(e.to_string()))?;
        let shutdown = stream
            .try_clone()
            .map_err(|e| EnvError::Unavailable(e.to_string()))?;
        let mut env = Self::from_streams(BufReader::new(reader), stream, timeout)?;
        env.socket = Some(shutdown);
        Ok(env)
    }

    pub fn spawn(mut cmd: Command, timeout: Duration) -> Result<Self, EnvError> {
        let mut child = cmd
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| EnvError::Unavailable(format!("spawn failed: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let mut env = Self::from_streams(BufReader::new(stdout), stdin, timeout)?;
        env.child = Some(child);
        Ok(env)
    }

    /// Wraps an arbitrary byte stream pair and performs the handshake.
    pub fn from_streams<R, W>(reader: R, writer: W, timeout: Duration) -> Result<Self, EnvError>
    where
        R: BufRead + Send + 'static,
        W: Write + Send + 'static,
    {
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in reader.lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        });
        let mut env = Self {
            game: String::new(),
            writer: Box::new(writer),
            lines: rx,
            timeout,
            broken: false,
            child: None,
            socket: None,
        };
        match env.call(&Request::Hello {
            version: PROTOCOL_VERSION,
        })? {
            Response::Hello { version, game } if version == PROTOCOL_VERSION => {
                env.game = game;
                Ok(env)
            }
            Response::Hello { version, .. } => {
                env.broken = true;
                Err(ProtocolError::VersionMismatch {
                    expected: PROTOCOL_VERSION,
                    found: version,
                }
                .into())
            }
            other => {
                env.broken = true;
                Err(ProtocolError::Unexpected(format!("{other:?}")).into())
            }
        }
    }

    /// Whether a transport or framing failure has closed this handle.
    pub fn is_closed(&self) -> bool {
        self.broken
    }

    fn call(&mut self, req: &Request) -> Result<Response, ProtocolError> {
        if self.broken {
            return Err(ProtocolError::Closed);
        }
        let result = self.exchange(req);
        if let Err(e) = &result {
            if !matches!(e, ProtocolError::Remote { .. }) {
                self.broken = true;
            }
        }
        result
    }

    fn exchange(&mut self, req: &Request) -> Result<Response, ProtocolError> {
        let mut line = encode_request(req);
        line.push('\n');
        self.writer.write_all(line.as_bytes())?;
        self.writer.flush()?;
        let reply = match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(l)) => l,
            Ok(Err(e)) => return Err(e.into()),
            Err(RecvTimeoutError::Timeout) => return Err(ProtocolError::Timeout),
            Err(RecvTimeoutError::Disconnected) => return Err(ProtocolError::Closed),
        };
        match decode_response(&reply)? {
            Response::Error { code, message } => Err(ProtocolError::Remote { code, message }),
            r => Ok(r),
        }
    }

    fn state_call(&mut self, req: &Request) -> Result<StateFrame, EnvError> {
        match self.call(req) {
            Ok(Response::State(f)) => Ok(f),
            Ok(other) => {
                self.broken = true;
                Err(ProtocolError::Unexpected(format!("{other:?}")).into())
            }
            Err(ProtocolError::Remote { code, message }) => Err(match code.as_str() {
                codes::INVALID_ACTION => EnvError::InvalidAction { action: message },
                codes::EPISODE_FINISHED => EnvError::EpisodeFinished,
                codes::INVALID_TOKEN => EnvError::InvalidToken,
                _ => ProtocolError::Remote { code, message }.into(),
            }),
            Err(e) => Err(e.into()),
        }
    }

    fn checked(frame: StateFrame) -> Result<StepResult, EnvError> {
        let r = frame.to_step();
        r.check()?;
        Ok(r)
    }
}

impl Environment for RemoteEnv {
    fn reset(&mut self) -> Result<StepResult, EnvError> {
        Self::checked(self.state_call(&Request::Reset)?)
    }

    fn step(&mut self, action: &str) -> Result<StepResult, EnvError> {
        Self::checked(self.state_call(&Request::Step {
            action: action.to_string(),
        })?)
    }

    fn snapshot(&mut self) -> Result<StateToken, EnvError> {
        let frame = self.state_call(&Request::Snapshot)?;
        let token = frame
            .token
            .ok_or_else(|| ProtocolError::Malformed("snapshot without token".into()))?;
        Ok(decode_token(&token)?)
    }

    fn restore(&mut self, token: &StateToken) -> Result<StepResult, EnvError> {
        Self::checked(self.state_call(&Request::Restore {
            token: encode_token(token),
        })?)
    }

    fn name(&self) -> &str {
        &self.game
    }
}

impl Drop for RemoteEnv {
    fn drop(&mut self) {
        if let Some(sock) = &self.socket {
            let _ = sock.shutdown(std::net::Shutdown::Both);
        }
        if let Some(child) = &mut self.child {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ServeStats {
    pub frames: usize,
    pub errors: usize,
}

/// Reference server: answers protocol frames from `reader` on behalf of
/// `env` until end of input. Malformed requests get an error frame and the
/// loop keeps going.
pub fn serve<E, R, W>(env: &mut E, reader: R, mut writer: W) -> io::Result<ServeStats>
where
    E: Environment + ?Sized,
    R: BufRead,
    W: Write,
{
    let mut stats = ServeStats::default();
    let mut current: Option<StepResult> = None;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        stats.frames += 1;
        let resp = match decode_request(&line) {
            Ok(req) => answer(env, req, &mut current),
            Err(e) => error_frame(codes::MALFORMED, e.to_string()),
        };
        if matches!(resp, Response::Error { .. }) {
            stats.errors += 1;
        }
        let text = match encode_response(&resp) {
            Ok(t) => t,
            Err(e) => {
                stats.errors += 1;
                encode_response(&error_frame(codes::ENGINE, e.to_string()))
                    .expect("error frames encode")
            }
        };
        writer.write_all(text.as_bytes())?;
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(stats)
}

fn error_frame(code: &str, message: String) -> Response {
    Response::Error {
        code: code.to_string(),
        message,
    }
}

fn answer<E: Environment + ?Sized>(
    env: &mut E,
    req: Request,
    current: &mut Option<StepResult>,
) -> Response {
    let outcome = match req {
        Request::Hello { version } => {
            if version != PROTOCOL_VERSION {
                warn!("client speaks protocol version {version}");
            }
            return Response::Hello {
                version: PROTOCOL_VERSION,
                game: env.name().to_string(),
            };
        }
        Request::Reset => env.reset().map(|r| (r, None)),
        Request::Step { action } => env.step(&action).map(|r| (r, None)),
        Request::Snapshot => env.snapshot().and_then(|t| {
            let mut view = match current.clone() {
                Some(v) => v,
                None => env.restore(&t)?,
            };
            view.reward = 0.0;
            Ok((view, Some(t)))
        }),
        Request::Restore { token } => match protocol::decode_token(&token) {
            Ok(t) => env.restore(&t).map(|r| (r, None)),
            Err(_) => Err(EnvError::InvalidToken),
        },
    };
    match outcome {
        Ok((r, token)) => {
            *current = Some(r.clone());
            Response::State(StateFrame::from_step(&r, token.as_ref()))
        }
        Err(e) => {
            let code = match &e {
                EnvError::InvalidAction { .. } => codes::INVALID_ACTION,
                EnvError::EpisodeFinished => codes::EPISODE_FINISHED,
                EnvError::InvalidToken => codes::INVALID_TOKEN,
                _ => codes::ENGINE,
            };
            let message = match e {
                EnvError::InvalidAction { action } => action,
                other => other.to_string(),
            };
            error_frame(code, message)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::ToyEnv;
    use std::net::TcpListener;

    fn loopback() -> (RemoteEnv, thread::JoinHandle<ServeStats>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let reader = BufReader::new(stream.try_clone().unwrap());
            let mut env = ToyEnv::builtin("cellar_gate").unwrap();
            serve(&mut env, reader, stream).unwrap()
        });
        let env = RemoteEnv::connect(&addr.to_string(), Duration::from_secs(5)).unwrap();
        (env, handle)
    }

    #[test]
    fn remote_matches_local() {
        let (mut remote, handle) = loopback();
        let mut local = ToyEnv::builtin("cellar_gate").unwrap();
        assert_eq!(remote.name(), "CellarGate");
        assert_eq!(remote.reset().unwrap(), local.reset().unwrap());
        let rt = remote.snapshot().unwrap();
        for a in ["take lantern", "open trapdoor", "east"] {
            assert_eq!(remote.step(a).unwrap(), local.step(a).unwrap());
        }
        let back = remote.restore(&rt).unwrap();
        assert_eq!(back, local.reset().unwrap());
        assert!(matches!(
            remote.step("dance"),
            Err(EnvError::InvalidAction { .. })
        ));
        assert!(!remote.is_closed());
        assert!(matches!(
            remote.restore(&StateToken(vec![9; 3])),
            Err(EnvError::InvalidToken)
        ));
        drop(remote);
        let stats = handle.join().unwrap();
        assert_eq!(stats.errors, 2);
    }

    #[test]
    fn snapshot_frame_reports_current_state() {
        let (mut remote, _h) = loopback();
        remote.reset().unwrap();
        let after = remote.step("open trapdoor").unwrap();
        remote.snapshot().unwrap();
        remote.step("east").unwrap();
        let t = remote.snapshot().unwrap();
        let r = remote.restore(&t).unwrap();
        assert!(r.failed);
        assert_eq!(after.reward, 5.0);
    }

    #[test]
    fn version_mismatch_is_typed() {
        let (client_r, server_w) = pipe();
        let (server_r, client_w) = pipe();
        thread::spawn(move || {
            let mut lines = BufReader::new(server_r).lines();
            let _hello = lines.next();
            let mut w = server_w;
            writeln!(w, r#"{{"type":"hello","version":2,"game":"x"}}"#).unwrap();
        });
        let err = RemoteEnv::from_streams(BufReader::new(client_r), client_w, Duration::from_secs(5))
            .err()
            .unwrap();
        assert!(matches!(
            err,
            EnvError::Protocol(ProtocolError::VersionMismatch { found: 2, .. })
        ));
    }

    #[test]
    fn silent_peer_times_out() {
        let (client_r, _server_w) = pipe();
        let (_server_r, client_w) = pipe();
        let err = RemoteEnv::from_streams(
            BufReader::new(client_r),
            client_w,
            Duration::from_millis(50),
        )
        .err()
        .unwrap();
        assert!(matches!(err, EnvError::Protocol(ProtocolError::Timeout)));
    }

    #[test]
    fn malformed_reply_closes_connection() {
        let (client_r, server_w) = pipe();
        let (server_r, client_w) = pipe();
        thread::spawn(move || {
            let mut lines = BufReader::new(server_r).lines();
            let mut w = server_w;
            lines.next();
            writeln!(w, r#"{{"type":"hello","version":1,"game":"x"}}"#).unwrap();
            lines.next();
            writeln!(w, "{{oops").unwrap();
            for _ in lines {}
        });
        let mut env =
            RemoteEnv::from_streams(BufReader::new(client_r), client_w, Duration::from_secs(5))
                .unwrap();
        assert!(matches!(
            env.reset(),
            Err(EnvError::Protocol(ProtocolError::Malformed(_)))
        ));
        assert!(env.is_closed());
        assert!(matches!(
            env.reset(),
            Err(EnvError::Protocol(ProtocolError::Closed))
        ));
    }

    #[test]
    fn server_survives_garbage() {
        let input = "garbage\n{\"type\":\"reset\"}\n{\"type\":\"step\"}\n\n{\"type\":\"step\",\"action\":\"go east\"}\n";
        let mut env = ToyEnv::builtin("cellar_gate").unwrap();
        let mut out = Vec::new();
        let stats = serve(&mut env, input.as_bytes(), &mut out).unwrap();
        assert_eq!(stats, ServeStats { frames: 4, errors: 2 });
        let text = String::from_utf8(out).unwrap();
        let replies: Vec<_> = text.lines().map(|l| decode_response(l).unwrap()).collect();
        assert!(matches!(&replies[0], Response::Error { code, .. } if code == codes::MALFORMED));
        assert!(matches!(&replies[1], Response::State(_)));
        assert!(matches!(&replies[2], Response::Error { .. }));
        assert!(matches!(&replies[3], Response::State(f) if f.look.starts_with("Kitchen")));
    }

    // Minimal in-memory pipe built on a channel of byte chunks.
    struct PipeWriter(mpsc::Sender<Vec<u8>>);
    struct PipeReader {
        rx: mpsc::Receiver<Vec<u8>>,
        buf: Vec<u8>,
        pos: usize,
    }

    fn pipe() -> (PipeReader, PipeWriter) {
        let (tx, rx) = mpsc::channel();
        (
            PipeReader {
                rx,
                buf: Vec::new(),
                pos: 0,
            },
            PipeWriter(tx),
        )
    }

    impl Write for PipeWriter {
        fn write(&mut self, b: &[u8]) -> io::Result<usize> {
            self.0
                .send(b.to_vec())
                .map_err(|_| io::Error::from(io::ErrorKind::BrokenPipe))?;
            Ok(b.len())
        }
        fn flush(&mut self) -> io::Result<()> {
            Ok(())
        }
    }

    impl io::Read for PipeReader {
        fn read(&mut self, out: &mut [u8]) -> io::Result<usize> {
            if self.pos == self.buf.len() {
                match self.rx.recv() {
                    Ok(b) => {
                        self.buf = b;
                        self.pos = 0;
                    }
                    Err(_) => return Ok(0),
                }
            }
            let n = out.len().min(self.buf.len() - self.pos);
            out[..n].copy_from_slice(&self.buf[self.pos..self.pos + n]);
            self.pos += n;
            Ok(n)
        }
    }
}
