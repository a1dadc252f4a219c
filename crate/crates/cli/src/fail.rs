use std::fmt;

/// A failure with a fixed process exit code.
#[derive(Debug)]
pub struct Fail {
    pub code: i32,
    pub msg: String,
}

pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_MISSING: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

impl Fail {
    pub fn config(msg: impl Into<String>) -> Self {
        Fail {
            code: EXIT_CONFIG,
            msg: msg.into(),
        }
    }

    pub fn missing(msg: impl Into<String>) -> Self {
        Fail {
            code: EXIT_MISSING,
            msg: msg.into(),
        }
    }
}

impl fmt::Display for Fail {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl std::error::Error for Fail {}

/// Exit code for an error chain: the first `Fail` or library error decides.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Fail>() {
            return f.code;
        }
        if let Some(e) = cause.downcast_ref::<distillkit::Error>() {
            return match e {
                e if e.is_numeric() => EXIT_NUMERIC,
                distillkit::Error::Missing(_) | distillkit::Error::Format { .. } | distillkit::Error::Io { .. } => {
                    EXIT_MISSING
                }
                _ => EXIT_CONFIG,
            };
        }
    }
    EXIT_CONFIG
}
