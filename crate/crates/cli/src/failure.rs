use anyhow::anyhow;
use vseg::pipeline::PipelineError;

/// A command failure and whether the caller or the program is at fault.
#[derive(Debug)]
pub enum Failure {
    User(anyhow::Error),
    Internal(anyhow::Error),
}

impl Failure {
    pub fn user(msg: impl std::fmt::Display) -> Self {
        Failure::User(anyhow!("{msg}"))
    }

    pub fn internal(msg: impl std::fmt::Display) -> Self {
        Failure::Internal(anyhow!("{msg}"))
    }

    pub fn code(&self) -> u8 {
        match self {
            Failure::User(_) => 1,
            Failure::Internal(_) => 2,
        }
    }

    /// The error chain joined by `: `, skipping causes already quoted by
    /// their parent's message.
    pub fn message(&self) -> String {
        let (Failure::User(e) | Failure::Internal(e)) = self;
        let mut msg = String::new();
        for cause in e.chain() {
            let text = cause.to_string();
            if !msg.contains(&text) {
                if !msg.is_empty() {
                    msg.push_str(": ");
                }
                msg.push_str(&text);
            }
        }
        msg
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::NonFiniteLoss { .. } | PipelineError::Network(_) | PipelineError::Optim(_) => Failure::Internal(e.into()),
            _ => Failure::User(e.into()),
        }
    }
}

/// Attaches context and marks the error as the caller's fault.
pub trait UserContext<T> {
    fn user(self, context: impl std::fmt::Display) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> UserContext<T> for Result<T, E> {
    fn user(self, context: impl std::fmt::Display) -> Result<T, Failure> {
        self.map_err(|e| Failure::User(e.into().context(context.to_string())))
    }
}
