use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("episode is terminal at step {step} (horizon {horizon})")]
    Terminal { step: u32, horizon: u32 },
    #[error("invalid task or instruction id {0}")]
    UnknownTask(usize),
    #[error("cannot fit a policy on an empty weighted union")]
    EmptyUnion,
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}
