use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use dosing_core::study::StudyPoint;
use thiserror::Error;

use crate::api::ErrorBody;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("unknown patient {0}")]
    UnknownPatient(String),
    #[error("unknown study {0}")]
    UnknownStudy(String),
    #[error("hour {t} is outside a stay of {length} hours")]
    OutOfRange { t: usize, length: usize },
    #[error("{}@{} has not been reached by this session", .0.patient_id, .0.time_index)]
    Blinded(StudyPoint),
    #[error("means must be finite and non-negative and variances positive")]
    InvalidDose,
    #[error("{}@{} was already submitted", .0.patient_id, .0.time_index)]
    Duplicate(StudyPoint),
    #[error("expected {}@{}, got {}@{}", .expected.patient_id, .expected.time_index, .got.patient_id, .got.time_index)]
    OutOfOrder { expected: StudyPoint, got: StudyPoint },
    #[error("session {0} has submitted every point")]
    SessionComplete(String),
    #[error("{0} not loaded")]
    NotLoaded(&'static str),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("corrupt log: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Core(#[from] dosing_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::UnknownSession(_) => "unknown_session",
            Self::UnknownPatient(_) => "unknown_patient",
            Self::UnknownStudy(_) => "unknown_study",
            Self::OutOfRange { .. } => "out_of_range",
            Self::Blinded(_) => "blinded",
            Self::InvalidDose => "invalid_dose",
            Self::Duplicate(_) => "duplicate",
            Self::OutOfOrder { .. } => "out_of_order",
            Self::SessionComplete(_) => "session_complete",
            Self::NotLoaded(_) => "not_loaded",
            Self::BadRequest(_) => "bad_request",
            Self::Corrupt(_) => "corrupt_log",
            Self::Core(dosing_core::Error::Score(_)) => "incomplete_study",
            Self::Core(_) | Self::Io(_) => "internal",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            Self::UnknownSession(_) | Self::UnknownPatient(_) | Self::UnknownStudy(_) => StatusCode::NOT_FOUND,
            Self::OutOfRange { .. } | Self::InvalidDose | Self::BadRequest(_) => StatusCode::BAD_REQUEST,
            Self::Blinded(_) => StatusCode::FORBIDDEN,
            Self::Duplicate(_) | Self::OutOfOrder { .. } | Self::SessionComplete(_) => StatusCode::CONFLICT,
            Self::Core(dosing_core::Error::Score(_)) => StatusCode::CONFLICT,
            Self::NotLoaded(_) => StatusCode::SERVICE_UNAVAILABLE,
            Self::Corrupt(_) | Self::Core(_) | Self::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.code().into(),
            message: self.to_string(),
        };
        (self.status(), Json(body)).into_response()
    }
}
