use std::fmt;

/// Failure classes, each with its own exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Config,
    Io,
    Contract,
}

impl Kind {
    pub fn exit_code(self) -> i32 {
        match self {
            Kind::Config => 2,
            Kind::Io => 3,
            Kind::Contract => 4,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Kind::Config => "config",
            Kind::Io => "io",
            Kind::Contract => "contract",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            kind: Kind::Config,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        CliError {
            kind: Kind::Io,
            message: message.into(),
        }
    }

    pub fn contract(message: impl Into<String>) -> Self {
        CliError {
            kind: Kind::Contract,
            message: message.into(),
        }
    }
}

/// Rendered as a single line: `error[<kind>]: <message>`.
impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flat = self.message.replace('\n', " ");
        write!(f, "error[{}]: {flat}", self.kind.label())
    }
}

impl From<teamwork::Error> for CliError {
    fn from(e: teamwork::Error) -> Self {
        let kind = match &e {
            teamwork::Error::Parameter(_) => Kind::Config,
            teamwork::Error::Io { .. } | teamwork::Error::Stream(_) => Kind::Io,
            teamwork::Error::Shape(_) | teamwork::Error::Format(_) => Kind::Contract,
        };
        CliError {
            kind,
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
