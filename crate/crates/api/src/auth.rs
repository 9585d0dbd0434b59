//! Bearer-token verification.
//!
//! The verifier is an interface; deployments plug in identity-provider
//! key verification. The built-in static-key verifier accepts tokens of
//! the form `v1.<hex claims JSON>.<hex HMAC-SHA256 over the claims hex>`.

use std::sync::Arc;

use axum::extract::FromRequestParts;
use axum::http::header::AUTHORIZATION;
use axum::http::request::Parts;
use chrono::{DateTime, Utc};
use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;

use crate::error::ApiError;
use crate::AppState;

type HmacSha256 = Hmac<Sha256>;

const VERSION: &str = "v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthContext {
    /// Identity-provider subject id.
    pub subject: String,
    pub email: String,
    pub name: String,
    pub verified: bool,
    /// Unix seconds; absent means no expiry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exp: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenError {
    Malformed,
    BadSignature,
    Expired,
    NoKey,
}

pub trait TokenVerifier: Send + Sync {
    fn verify(&self, token: &str, now: DateTime<Utc>) -> Result<AuthContext, TokenError>;
}

#[derive(Clone)]
pub struct StaticKeyVerifier {
    key: Vec<u8>,
}

impl StaticKeyVerifier {
    pub fn new(key: impl AsRef<[u8]>) -> Self {
        Self {
            key: key.as_ref().to_vec(),
        }
    }

    fn mac(&self, body: &str) -> HmacSha256 {
        let mut m = HmacSha256::new_from_slice(&self.key).expect("HMAC takes any key length");
        m.update(body.as_bytes());
        m
    }

    /// Signs claims; used by tests and the CLI to mint stub tokens.
    pub fn issue(&self, claims: &AuthContext) -> String {
        let body = hex::encode(serde_json::to_vec(claims).expect("claims serialize"));
        let sig = hex::encode(self.mac(&body).finalize().into_bytes());
        format!("{VERSION}.{body}.{sig}")
    }
}

impl TokenVerifier for StaticKeyVerifier {
    fn verify(&self, token: &str, now: DateTime<Utc>) -> Result<AuthContext, TokenError> {
        if self.key.is_empty() {
            return Err(TokenError::NoKey);
        }
        let mut parts = token.split('.');
        let (Some(VERSION), Some(body), Some(sig), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(TokenError::Malformed);
        };
        let sig = hex::decode(sig).map_err(|_| TokenError::Malformed)?;
        self.mac(body).verify_slice(&sig).map_err(|_| TokenError::BadSignature)?;
        let raw = hex::decode(body).map_err(|_| TokenError::Malformed)?;
        let claims: AuthContext = serde_json::from_slice(&raw).map_err(|_| TokenError::Malformed)?;
        if claims.exp.is_some_and(|exp| now.timestamp() >= exp) {
            return Err(TokenError::Expired);
        }
        Ok(claims)
    }
}

fn bearer(parts: &Parts) -> Option<&str> {
    let v = parts.headers.get(AUTHORIZATION)?.to_str().ok()?;
    let (scheme, token) = v.split_once(' ')?;
    scheme.eq_ignore_ascii_case("bearer").then(|| token.trim())
}

/// Byte comparison whose duration does not depend on where inputs differ.
fn same(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

/// An authenticated contributor.
pub struct User(pub AuthContext);

impl FromRequestParts<Arc<AppState>> for User {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &Arc<AppState>) -> Result<Self, ApiError> {
        let token = bearer(parts).ok_or_else(ApiError::unauthenticated)?;
        state
            .verifier
            .verify(token, state.store.now())
            .map(User)
            .map_err(|_| ApiError::unauthenticated())
    }
}

/// A caller presenting one of the configured admin tokens.
pub struct Admin;

impl FromRequestParts<Arc<AppState>> for Admin {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &Arc<AppState>) -> Result<Self, ApiError> {
        let token = bearer(parts).ok_or_else(ApiError::unauthenticated)?;
        if state.config.auth.admin_tokens.iter().any(|t| !t.is_empty() && same(t.as_bytes(), token.as_bytes())) {
            return Ok(Admin);
        }
        match state.verifier.verify(token, state.store.now()) {
            Ok(_) => Err(ApiError::forbidden("admin role required")),
            Err(_) => Err(ApiError::unauthenticated()),
        }
    }
}
