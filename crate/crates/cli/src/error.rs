use std::fmt;

/// Failure of a subcommand, carrying its process exit code.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    MissingInput(String),
    Numerical(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::MissingInput(_) => 3,
            Self::Numerical(_) => 4,
            Self::Io(_) => 1,
        }
    }

    pub fn io(context: impl fmt::Display, err: std::io::Error) -> Self {
        Self::Io(format!("{context}: {err}"))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config(m) => write!(f, "config error: {m}"),
            Self::MissingInput(m) => write!(f, "missing input: {m}"),
            Self::Numerical(m) => write!(f, "numerical failure: {m}"),
            Self::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<fedho::Error> for CliError {
    fn from(e: fedho::Error) -> Self {
        use fedho::Error as E;
        let msg = e.to_string();
        match e {
            E::Numerical(_) => Self::Numerical(msg),
            E::Codec(_) | E::Parse(_) | E::Empty(_) => Self::MissingInput(msg),
            E::Io(_) => Self::Io(msg),
            _ => Self::Config(msg),
        }
    }
}
