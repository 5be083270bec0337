use axum::extract::rejection::JsonRejection;
use axum::extract::{FromRequest, Request};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::de::DeserializeOwned;

use navtoken_core::bats::BatsError;
use navtoken_core::cache::CacheError;
use navtoken_core::episode::EpisodeError;
use navtoken_core::metrics::MetricsError;
use navtoken_core::organizer::OrganizerError;
use navtoken_core::sim::SimError;
use navtoken_core::trajectory::TrajectoryError;
use navtoken_core::tvi::TviError;
use navtoken_core::types::{GridError, RigError};
use navtoken_core::wire::{ErrorBody, ErrorKind};

#[derive(Debug)]
pub struct ApiError {
    pub kind: ErrorKind,
    pub message: String,
}

impl ApiError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self { kind, message: message.into() }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::InvalidRequest, message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::NotFound, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Internal, message)
    }

    fn status(&self) -> StatusCode {
        match self.kind {
            ErrorKind::InvalidRequest => StatusCode::BAD_REQUEST,
            ErrorKind::InfeasibleBudget => StatusCode::UNPROCESSABLE_ENTITY,
            ErrorKind::NotFound => StatusCode::NOT_FOUND,
            ErrorKind::Conflict => StatusCode::CONFLICT,
            ErrorKind::Corrupt | ErrorKind::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status().is_server_error() {
            tracing::error!(kind = ?self.kind, "{}", self.message);
        }
        (self.status(), Json(ErrorBody { kind: self.kind, message: self.message })).into_response()
    }
}

impl From<BatsError> for ApiError {
    fn from(e: BatsError) -> Self {
        let kind = match e {
            BatsError::BudgetTooSmall { .. } | BatsError::InfeasibleCurve { .. } => ErrorKind::InfeasibleBudget,
            BatsError::InvalidArgument(_) => ErrorKind::InvalidRequest,
            BatsError::NonConvergence { .. } => ErrorKind::Internal,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<SimError> for ApiError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Budget(b) => b.into(),
            SimError::Io(_) | SimError::Csv(_) => Self::internal(e.to_string()),
            _ => Self::invalid(e.to_string()),
        }
    }
}

impl From<CacheError> for ApiError {
    fn from(e: CacheError) -> Self {
        let kind = match e {
            CacheError::NotFound(_) => ErrorKind::NotFound,
            CacheError::DuplicateKey(_) => ErrorKind::Conflict,
            CacheError::ChecksumFailure(_) | CacheError::Corrupt { .. } | CacheError::VersionMismatch(_) => ErrorKind::Corrupt,
            CacheError::DimensionMismatch { .. } | CacheError::NotCoarse(_) | CacheError::KeyTooLong(_) => ErrorKind::InvalidRequest,
            CacheError::Io(_) => ErrorKind::Internal,
        };
        Self::new(kind, e.to_string())
    }
}

macro_rules! invalid_from {
    ($($t:ty),*) => {
        $(impl From<$t> for ApiError {
            fn from(e: $t) -> Self {
                Self::invalid(e.to_string())
            }
        })*
    };
}

invalid_from!(OrganizerError, EpisodeError, MetricsError, TrajectoryError, TviError, GridError, RigError);

/// `Json` extractor whose rejections use the service error body.
pub struct ApiJson<T>(pub T);

impl<S, T> FromRequest<S> for ApiJson<T>
where
    T: DeserializeOwned,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(Self(v)),
            Err(rejection) => Err(ApiError::invalid(rejection_message(rejection))),
        }
    }
}

fn rejection_message(r: JsonRejection) -> String {
    r.body_text()
}
