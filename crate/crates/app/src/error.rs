use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppError {
    pub kind: ErrorKind,
    pub message: String,
}

impl AppError {
    pub fn usage(m: impl fmt::Display) -> Self {
        Self { kind: ErrorKind::Usage, message: m.to_string() }
    }

    pub fn data(m: impl fmt::Display) -> Self {
        Self { kind: ErrorKind::Data, message: m.to_string() }
    }

    pub fn internal(m: impl fmt::Display) -> Self {
        Self { kind: ErrorKind::Internal, message: m.to_string() }
    }

    /// 1 usage, 2 data, 3 internal.
    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Usage => 1,
            ErrorKind::Data => 2,
            ErrorKind::Internal => 3,
        }
    }
}

impl fmt::Display for AppError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for AppError {}

impl From<shapefit_core::fit::FitError> for AppError {
    fn from(e: shapefit_core::fit::FitError) -> Self {
        use shapefit_core::fit::FitError;
        match e {
            FitError::Config(_) => Self::usage(e),
            FitError::Energy(_) => Self::data(e),
            _ => Self::internal(e),
        }
    }
}

impl From<shapefit_core::scene::SceneError> for AppError {
    fn from(e: shapefit_core::scene::SceneError) -> Self {
        Self::data(e)
    }
}

impl From<shapefit_core::prior::PriorError> for AppError {
    fn from(e: shapefit_core::prior::PriorError) -> Self {
        Self::data(e)
    }
}

impl From<shapefit_core::synth::SynthError> for AppError {
    fn from(e: shapefit_core::synth::SynthError) -> Self {
        use shapefit_core::synth::SynthError;
        match e {
            SynthError::Config(_) => Self::usage(e),
            SynthError::PlacementFailure(_) | SynthError::Fit(_) => Self::internal(e),
            _ => Self::data(e),
        }
    }
}

impl From<shapefit_core::metrics::harness::HarnessError> for AppError {
    fn from(e: shapefit_core::metrics::harness::HarnessError) -> Self {
        use shapefit_core::metrics::harness::HarnessError;
        match e {
            HarnessError::Spec(_) => Self::usage(e),
            HarnessError::Synth(s) => s.into(),
            HarnessError::Fit(f) => f.into(),
            _ => Self::data(e),
        }
    }
}
