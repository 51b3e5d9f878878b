use std::fmt::Display;

/// Which exit code a failure maps to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Config,
    Input,
    Endpoint,
}

impl Kind {
    pub fn code(self) -> u8 {
        match self {
            Kind::Config => 2,
            Kind::Input => 3,
            Kind::Endpoint => 4,
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub error: anyhow::Error,
}

pub type CliResult<T> = Result<T, Failure>;

pub fn fail(kind: Kind, message: impl Display) -> Failure {
    Failure {
        kind,
        error: anyhow::anyhow!("{message}"),
    }
}

/// Attach an exit-code class and a context line to any error.
pub trait Classify<T> {
    fn or_fail(self, kind: Kind, context: impl Display) -> CliResult<T>;

    fn config(self, context: impl Display) -> CliResult<T>
    where
        Self: Sized,
    {
        self.or_fail(Kind::Config, context)
    }

    fn input(self, context: impl Display) -> CliResult<T>
    where
        Self: Sized,
    {
        self.or_fail(Kind::Input, context)
    }
}

impl<T, E> Classify<T> for Result<T, E>
where
    E: Into<anyhow::Error>,
{
    fn or_fail(self, kind: Kind, context: impl Display) -> CliResult<T> {
        self.map_err(|e| Failure {
            kind,
            error: e.into().context(context.to_string()),
        })
    }
}
