//! The `(prompt, temperature) -> first output token` interface shared by the
//! HTTP client and the synthetic endpoints.

use thiserror::Error;

/// Observation recorded when an endpoint returns an empty completion.
pub const EMPTY_TOKEN: &str = "∅";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SourceError {
    /// Transient failure; the same request may succeed later.
    #[error("transient failure: {0}")]
    Retriable(String),
    /// Misconfiguration such as bad credentials or an unknown model.
    #[error("configuration error: {0}")]
    Fatal(String),
    /// The endpoint answered with something that is not a completion.
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("unknown prompt {0:?}")]
    UnknownPrompt(String),
}

pub trait TokenSource {
    /// Draws `n` independent first-token observations for `prompt`.
    /// One result per requested sample, in any order.
    fn sample(&mut self, prompt: &str, temperature: f64, n: usize) -> Vec<Result<String, SourceError>>;

    /// Identifies the endpoint behind this source (recorded in references).
    fn fingerprint(&self) -> String;
}

impl<T: TokenSource + ?Sized> TokenSource for &mut T {
    fn sample(&mut self, prompt: &str, temperature: f64, n: usize) -> Vec<Result<String, SourceError>> {
        (**self).sample(prompt, temperature, n)
    }

    fn fingerprint(&self) -> String {
        (**self).fingerprint()
    }
}

impl<T: TokenSource + ?Sized> TokenSource for Box<T> {
    fn sample(&mut self, prompt: &str, temperature: f64, n: usize) -> Vec<Result<String, SourceError>> {
        (**self).sample(prompt, temperature, n)
    }

    fn fingerprint(&self) -> String {
        (**self).fingerprint()
    }
}
