//! REST transport for the KMS.
//!
//! ```text
//! PUT  /v1/keys/{id}         admin   {"allowed_tokens":[..]}  -> 201 {"key_id":id}
//! POST /v1/keys/{id}/wrap            {"plaintext":b64}        -> 200 {"wrapped":b64}
//! POST /v1/keys/{id}/unwrap          {"wrapped":b64}          -> 200 {"plaintext":b64}
//! POST /v1/keys/{id}/revoke  admin   {"token":t}              -> 200 {}
//! ```
//!
//! Callers authenticate with `Authorization: Bearer <token>`. Failures return
//! `{"error": ...}` with 403 (access denied), 404 (unknown key), 401
//! (unauthorized admin call), 409 (duplicate key) or 400 (bad request or a
//! wrapped key that fails authentication).

use std::net::{SocketAddr, TcpListener as StdTcpListener};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{post, put};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::oneshot;

use super::{KeyStore, KmsClient};
use crate::error::{Error, Result};

const INTEGRITY_FAILED: &str = "integrity check failed";
const MALFORMED_WRAPPED: &str = "malformed wrapped key";

#[derive(Serialize, Deserialize)]
struct WrapRequest {
    plaintext: String,
}

#[derive(Serialize, Deserialize)]
struct WrapResponse {
    wrapped: String,
}

#[derive(Serialize, Deserialize)]
struct UnwrapRequest {
    wrapped: String,
}

#[derive(Serialize, Deserialize)]
struct UnwrapResponse {
    plaintext: String,
}

#[derive(Serialize, Deserialize)]
struct CreateKeyRequest {
    #[serde(default)]
    allowed_tokens: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct RevokeRequest {
    token: String,
}

#[derive(Deserialize)]
struct ErrorBody {
    error: String,
}

fn error_response(err: &Error) -> Response {
    let (status, message) = match err {
        Error::AccessDenied(_) => (StatusCode::FORBIDDEN, "access denied".to_string()),
        Error::UnknownKey(_) => (StatusCode::NOT_FOUND, "unknown key".to_string()),
        Error::DuplicateKey(_) => (StatusCode::CONFLICT, "duplicate key".to_string()),
        Error::Unauthorized => (StatusCode::UNAUTHORIZED, "unauthorized".to_string()),
        Error::Integrity(_) => (StatusCode::BAD_REQUEST, INTEGRITY_FAILED.to_string()),
        Error::MalformedBlob(_) => (StatusCode::BAD_REQUEST, MALFORMED_WRAPPED.to_string()),
        Error::Config(msg) => (StatusCode::BAD_REQUEST, format!("bad request: {msg}")),
        other => (StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
    };
    (status, Json(json!({ "error": message }))).into_response()
}

fn bearer(headers: &HeaderMap) -> &str {
    headers
        .get(axum::http::header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .unwrap_or("")
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T> {
    serde_json::from_slice(body).map_err(|e| Error::Config(format!("invalid JSON body: {e}")))
}

fn decode_b64(field: &str, value: &str) -> Result<Vec<u8>> {
    BASE64
        .decode(value)
        .map_err(|e| Error::Config(format!("field '{field}' is not base64: {e}")))
}

fn respond<T: Serialize>(status: StatusCode, result: Result<T>) -> Response {
    match result {
        Ok(body) => (status, Json(body)).into_response(),
        Err(err) => error_response(&err),
    }
}

async fn wrap_handler(
    State(store): State<Arc<KeyStore>>,
    Path(key_id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let result = parse_body::<WrapRequest>(&body)
        .and_then(|req| decode_b64("plaintext", &req.plaintext))
        .and_then(|plain| store.wrap(bearer(&headers), &key_id, &plain))
        .map(|wrapped| WrapResponse { wrapped });
    respond(StatusCode::OK, result)
}

async fn unwrap_handler(
    State(store): State<Arc<KeyStore>>,
    Path(key_id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let result = parse_body::<UnwrapRequest>(&body)
        .and_then(|req| store.unwrap(bearer(&headers), &key_id, &req.wrapped))
        .map(|plain| UnwrapResponse {
            plaintext: BASE64.encode(plain),
        });
    respond(StatusCode::OK, result)
}

async fn create_handler(
    State(store): State<Arc<KeyStore>>,
    Path(key_id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let result = parse_body::<CreateKeyRequest>(&body)
        .and_then(|req| store.create_master_key(bearer(&headers), &key_id, req.allowed_tokens))
        .map(|()| json!({ "key_id": key_id }));
    respond(StatusCode::CREATED, result)
}

async fn revoke_handler(
    State(store): State<Arc<KeyStore>>,
    Path(key_id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let result = parse_body::<RevokeRequest>(&body)
        .and_then(|req| store.revoke_access(bearer(&headers), &key_id, &req.token))
        .map(|()| json!({}));
    respond(StatusCode::OK, result)
}

fn router(store: Arc<KeyStore>) -> Router {
    Router::new()
        .route("/v1/keys/:key_id", put(create_handler))
        .route("/v1/keys/:key_id/wrap", post(wrap_handler))
        .route("/v1/keys/:key_id/unwrap", post(unwrap_handler))
        .route("/v1/keys/:key_id/revoke", post(revoke_handler))
        .with_state(store)
}

/// Handle to a KMS HTTP server running on a background thread. Dropping it
/// shuts the server down.
pub struct KmsServer {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<std::io::Result<()>>>,
}

impl KmsServer {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the server exits (it only exits on shutdown or error).
    pub fn wait(mut self) -> Result<()> {
        match self.thread.take() {
            Some(handle) => handle
                .join()
                .map_err(|_| Error::KmsUnavailable("server thread panicked".into()))?
                .map_err(Error::Io),
            None => Ok(()),
        }
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(handle) = self.thread.take() {
            let _ = handle.join();
        }
    }
}

impl Drop for KmsServer {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Binds `bind_addr` and serves the KMS protocol on a background thread.
pub fn serve_http(store: Arc<KeyStore>, bind_addr: SocketAddr) -> Result<KmsServer> {
    let listener = StdTcpListener::bind(bind_addr)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();

    let thread =
        thread::Builder::new()
            .name(format!("kms-http-{}", addr.port()))
            .spawn(move || -> std::io::Result<()> {
                let runtime = tokio::runtime::Builder::new_multi_thread()
                    .worker_threads(2)
                    .enable_all()
                    .build()?;
                runtime.block_on(async move {
                    let listener = tokio::net::TcpListener::from_std(listener)?;
                    axum::serve(listener, router(store))
                        .with_graceful_shutdown(async {
                            let _ = rx.await;
                        })
                        .await
                })
            })?;

    Ok(KmsServer {
        addr,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}

/// Serves until the process is interrupted.
pub fn serve_http_blocking(store: Arc<KeyStore>, bind_addr: SocketAddr) -> Result<()> {
    serve_http(store, bind_addr)?.wait()
}

/// Blocking REST client. Must not be used from inside an async runtime.
pub struct HttpKmsClient {
    base_url: String,
    token: String,
    client: reqwest::blocking::Client,
}

impl HttpKmsClient {
    pub fn new(base_url: impl Into<String>, token: impl Into<String>) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .connect_timeout(Duration::from_secs(5))
            .timeout(Duration::from_secs(30))
            .build()
            .map_err(|e| Error::KmsUnavailable(e.to_string()))?;
        Ok(Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            token: token.into(),
            client,
        })
    }

    fn url(&self, key_id: &str, action: Option<&str>) -> String {
        match action {
            Some(action) => format!("{}/v1/keys/{key_id}/{action}", self.base_url),
            None => format!("{}/v1/keys/{key_id}", self.base_url),
        }
    }

    fn send<T: for<'de> Deserialize<'de>>(
        &self,
        request: reqwest::blocking::RequestBuilder,
        token: &str,
        key_id: &str,
    ) -> Result<T> {
        let response = request
            .bearer_auth(token)
            .send()
            .map_err(|e| Error::KmsUnavailable(e.to_string()))?;
        let status = response.status();
        if status.is_success() {
            return response
                .json::<T>()
                .map_err(|e| Error::KmsUnavailable(format!("invalid KMS response: {e}")));
        }
        let message = response
            .json::<ErrorBody>()
            .map(|b| b.error)
            .unwrap_or_else(|_| status.to_string());
        Err(match status.as_u16() {
            403 => Error::AccessDenied(key_id.to_string()),
            404 => Error::UnknownKey(key_id.to_string()),
            409 => Error::DuplicateKey(key_id.to_string()),
            401 => Error::Unauthorized,
            400 if message == INTEGRITY_FAILED => Error::Integrity(format!("KMS rejected wrapped key for '{key_id}'")),
            400 if message == MALFORMED_WRAPPED => {
                Error::MalformedBlob(format!("KMS rejected wrapped key for '{key_id}'"))
            }
            400 => Error::Config(message),
            _ => Error::KmsUnavailable(format!("KMS returned {status}: {message}")),
        })
    }

    pub fn create_master_key(&self, admin_token: &str, key_id: &str, allowed_tokens: &[String]) -> Result<()> {
        super::validate_key_id(key_id)?;
        let body = CreateKeyRequest {
            allowed_tokens: allowed_tokens.to_vec(),
        };
        let _: serde_json::Value =
            self.send(self.client.put(self.url(key_id, None)).json(&body), admin_token, key_id)?;
        Ok(())
    }

    pub fn revoke_access(&self, admin_token: &str, key_id: &str, token: &str) -> Result<()> {
        super::validate_key_id(key_id)?;
        let body = RevokeRequest {
            token: token.to_string(),
        };
        let _: serde_json::Value = self.send(
            self.client.post(self.url(key_id, Some("revoke"))).json(&body),
            admin_token,
            key_id,
        )?;
        Ok(())
    }
}

impl KmsClient for HttpKmsClient {
    fn wrap(&self, key_id: &str, plaintext: &[u8]) -> Result<String> {
        super::validate_key_id(key_id)?;
        let body = WrapRequest {
            plaintext: BASE64.encode(plaintext),
        };
        let resp: WrapResponse = self.send(
            self.client.post(self.url(key_id, Some("wrap"))).json(&body),
            &self.token,
            key_id,
        )?;
        Ok(resp.wrapped)
    }

    fn unwrap(&self, key_id: &str, wrapped: &str) -> Result<Vec<u8>> {
        super::validate_key_id(key_id)?;
        let body = UnwrapRequest {
            wrapped: wrapped.to_string(),
        };
        let resp: UnwrapResponse = self.send(
            self.client.post(self.url(key_id, Some("unwrap"))).json(&body),
            &self.token,
            key_id,
        )?;
        BASE64
            .decode(resp.plaintext)
            .map_err(|e| Error::KmsUnavailable(format!("invalid KMS response: {e}")))
    }
}
