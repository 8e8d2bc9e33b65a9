//! HTTP evaluation service: one resident frozen backbone, many registered
//! metric adapters, per-request adapter selection, and structured results
//! with server-side timing. Plain HTTP/1.1 with JSON bodies over std
//! networking; request handlers run on a thread per connection, bounded by a
//! concurrency permit that sheds load with 503 instead of queueing.

pub mod api;
pub mod config;
pub mod http;
pub mod state;

use std::io::BufReader;
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

pub use api::{EvalRequest, WireEvalResult, WireMultilabelResult};
pub use config::ServiceConfig;
pub use http::HttpClient;
pub use state::ServiceState;

/// A bound-but-not-yet-serving server. Binding early means `/health` can
/// answer `loading` while the model file is still being read.
pub struct Server {
    listener: TcpListener,
    state: Arc<ServiceState>,
}

impl Server {
    pub fn bind(config: ServiceConfig) -> std::io::Result<Server> {
        config
            .validate()
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e.to_string()))?;
        let listener = TcpListener::bind(&config.listen)?;
        listener.set_nonblocking(true)?;
        Ok(Server {
            listener,
            state: Arc::new(ServiceState::new(config)),
        })
    }

    pub fn local_addr(&self) -> std::io::Result<std::net::SocketAddr> {
        self.listener.local_addr()
    }

    pub fn state(&self) -> Arc<ServiceState> {
        self.state.clone()
    }

    /// Start the accept loop and (unless an engine was pre-installed) a
    /// loader thread. Returns a handle that can stop the server.
    pub fn start(self) -> std::io::Result<RunningServer> {
        let addr = self.local_addr()?;
        let shutdown = Arc::new(AtomicBool::new(false));
        let state = self.state.clone();

        let loader = if state.engine().is_none() {
            let state = state.clone();
            Some(std::thread::spawn(move || {
                if let Err(e) = state.load() {
                    eprintln!("model load failed: {e}");
                }
            }))
        } else {
            None
        };

        let listener = self.listener;
        let accept_state = state.clone();
        let accept_shutdown = shutdown.clone();
        let acceptor = std::thread::spawn(move || {
            while !accept_shutdown.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        let state = accept_state.clone();
                        let shutdown = accept_shutdown.clone();
                        std::thread::spawn(move || serve_connection(stream, state, shutdown));
                    }
                    Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                        std::thread::sleep(Duration::from_millis(2));
                    }
                    Err(_) => break,
                }
            }
        });

        Ok(RunningServer {
            addr,
            state,
            shutdown,
            acceptor: Some(acceptor),
            loader,
        })
    }
}

pub struct RunningServer {
    pub addr: std::net::SocketAddr,
    state: Arc<ServiceState>,
    shutdown: Arc<AtomicBool>,
    acceptor: Option<JoinHandle<()>>,
    loader: Option<JoinHandle<()>>,
}

impl RunningServer {
    pub fn state(&self) -> Arc<ServiceState> {
        self.state.clone()
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Block until the model finished loading (or failed).
    pub fn wait_ready(&mut self) {
        if let Some(loader) = self.loader.take() {
            let _ = loader.join();
        }
    }

    pub fn stop(mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        if let Some(acceptor) = self.acceptor.take() {
            let _ = acceptor.join();
        }
    }

    /// Serve until the process ends.
    pub fn wait(mut self) {
        if let Some(acceptor) = self.acceptor.take() {
            let _ = acceptor.join();
        }
    }
}

impl Drop for RunningServer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
    }
}

fn serve_connection(stream: TcpStream, state: Arc<ServiceState>, shutdown: Arc<AtomicBool>) {
    if stream.set_read_timeout(Some(Duration::from_secs(30))).is_err() {
        return;
    }
    let _ = stream.set_nodelay(true);
    let mut writer = match stream.try_clone() {
        Ok(w) => w,
        Err(_) => return,
    };
    let mut reader = BufReader::new(stream);
    loop {
        if shutdown.load(Ordering::SeqCst) {
            return;
        }
        let request = match http::read_request(&mut reader) {
            Ok(r) => r,
            Err(http::HttpError::Closed) => return,
            Err(http::HttpError::Io(_)) => return,
            Err(e) => {
                let response = http::Response::json(
                    400,
                    format!("{{\"error\":{{\"code\":\"bad_request\",\"message\":\"{e}\"}}}}"),
                );
                let _ = http::write_response(&mut writer, &response, false);
                return;
            }
        };
        let keep_alive = !request.wants_close();
        let response = api::route(&state, &request);
        if http::write_response(&mut writer, &response, keep_alive).is_err() || !keep_alive {
            return;
        }
    }
}
