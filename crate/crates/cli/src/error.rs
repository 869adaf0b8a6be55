use rowcast_core::backend::BackendError;
use rowcast_core::evalkit::EvalError;
use rowcast_core::predictor::PredictError;
use rowcast_core::table::TableError;
use serde_json::json;

/// Bad input or configuration.
#[derive(Debug)]
pub struct UserError(pub String);

impl std::fmt::Display for UserError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    User,
    Environment,
    Backend,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            Self::User => 2,
            Self::Environment => 3,
            Self::Backend => 4,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::User => "user",
            Self::Environment => "environment",
            Self::Backend => "backend",
        }
    }
}

fn backend_kind(e: &BackendError) -> ErrorKind {
    match e {
        BackendError::MissingCredential(_) => ErrorKind::Environment,
        BackendError::Config(_) => ErrorKind::User,
        _ => ErrorKind::Backend,
    }
}

fn predict_kind(e: &PredictError) -> ErrorKind {
    match e {
        PredictError::Backend { source: Some(b), .. } => backend_kind(b),
        PredictError::Backend { .. } => ErrorKind::Backend,
        _ => ErrorKind::User,
    }
}

fn eval_kind(e: &EvalError) -> ErrorKind {
    match e {
        EvalError::Predict(p) => predict_kind(p),
        EvalError::Io(_) => ErrorKind::Environment,
        _ => ErrorKind::User,
    }
}

/// Picks the exit category from the first recognised error in the chain.
pub fn classify(err: &anyhow::Error) -> ErrorKind {
    for cause in err.chain() {
        if cause.is::<UserError>() {
            return ErrorKind::User;
        }
        if let Some(e) = cause.downcast_ref::<BackendError>() {
            return backend_kind(e);
        }
        if let Some(e) = cause.downcast_ref::<PredictError>() {
            return predict_kind(e);
        }
        if let Some(e) = cause.downcast_ref::<EvalError>() {
            return eval_kind(e);
        }
        if let Some(e) = cause.downcast_ref::<TableError>() {
            return match e {
                TableError::Io(_) => ErrorKind::Environment,
                _ => ErrorKind::User,
            };
        }
        if cause.is::<std::io::Error>() {
            return ErrorKind::Environment;
        }
    }
    ErrorKind::User
}

/// One-line JSON error report for stderr.
pub fn report(err: &anyhow::Error) -> (i32, String) {
    let kind = classify(err);
    let message = err.chain().map(ToString::to_string).collect::<Vec<_>>().join(": ");
    let body = json!({ "error": { "kind": kind.name(), "exit_code": kind.exit_code(), "message": message } });
    (kind.exit_code(), body.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        let cred: anyhow::Error = BackendError::MissingCredential("TOKEN".into()).into();
        assert_eq!(report(&cred).0, 3);
        let timeout: anyhow::Error = BackendError::Timeout.into();
        assert_eq!(report(&timeout).0, 4);
        let col: anyhow::Error = TableError::UnknownColumn("y".into()).into();
        let (code, body) = report(&col.context("loading dataset"));
        assert_eq!(code, 2);
        assert!(body.contains("unknown column"));
        let wrapped: anyhow::Error = EvalError::Predict(PredictError::Backend {
            detail: "HTTP 500".into(),
            prompt_bytes: 10,
            exemplar_count: 1,
            source: None,
        })
        .into();
        assert_eq!(report(&wrapped).0, 4);
    }
}
