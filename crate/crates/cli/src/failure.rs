use std::fmt;
use std::path::Path;

pub const CONFIG: u8 = 2;
pub const NUMERICAL: u8 = 3;
pub const IO: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<nnme::Error> for CliError {
    fn from(e: nnme::Error) -> Self {
        let code = if e.is_io() {
            IO
        } else if e.is_numerical() || matches!(e, nnme::Error::StaleTape) {
            NUMERICAL
        } else {
            CONFIG
        };
        CliError { code, message: e.to_string() }
    }
}

pub fn config_error(message: impl Into<String>) -> CliError {
    CliError { code: CONFIG, message: message.into() }
}

pub fn io_error(path: &Path, e: impl fmt::Display) -> CliError {
    CliError { code: IO, message: format!("{}: {e}", path.display()) }
}
