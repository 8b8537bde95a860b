use std::error::Error;
use std::fmt;

/// Exit status for command-line usage errors.
pub const EXIT_USAGE: u8 = 64;

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Io(_) => 2,
        }
    }

    /// I/O if any error in the source chain is an `io::Error`, validation otherwise.
    pub fn classify<E: Error + 'static>(e: E) -> Self {
        let mut cur: Option<&(dyn Error + 'static)> = Some(&e);
        while let Some(x) = cur {
            if x.is::<std::io::Error>() {
                return CliError::Io(e.to_string());
            }
            cur = x.source();
        }
        CliError::Validation(e.to_string())
    }

    pub fn io(context: impl fmt::Display, e: std::io::Error) -> Self {
        CliError::Io(format!("{context}: {e}"))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Io(m) => f.write_str(m),
        }
    }
}

macro_rules! classify_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::classify(e)
            }
        }
    )*};
}

classify_from!(
    rocktoken::trace::TraceError,
    rocktoken::detect::DetectError,
    rocktoken::cutoff::CutoffError,
    rocktoken::gradgeom::GradError,
    rocktoken::knockout::KnockoutError,
    rocktoken::reweight::ReweightError,
    rocktoken::simlab::SimError,
    rocktoken::stats::StatsError
);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn io_in_chain_maps_to_two() {
        let e = rocktoken::trace::load_vocabulary(std::path::Path::new("/nonexistent/vocab.json")).unwrap_err();
        let c = CliError::from(rocktoken::detect::DetectError::from(e));
        assert_eq!(c.exit_code(), 2);
        assert!(c.to_string().contains("/nonexistent/vocab.json"));
    }

    #[test]
    fn config_errors_map_to_one() {
        let c = CliError::from(rocktoken::simlab::SimError::Config("x".into()));
        assert_eq!(c.exit_code(), 1);
    }
}
