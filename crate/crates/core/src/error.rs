use thiserror::Error;

use crate::centers::CenterError;
use crate::decompose::DecomposeError;
use crate::metrics::MetricError;
use crate::net::NetError;
use crate::score::ScoreError;
use crate::sim::SimError;
use crate::store::StoreError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Decompose(#[from] DecomposeError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Centers(#[from] CenterError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("record {id}: {source}")]
    Record {
        id: String,
        #[source]
        source: Box<Error>,
    },
    /// Inputs are readable but unusable, e.g. nothing left to train on.
    #[error("{0}")]
    Data(String),
}

impl Error {
    pub(crate) fn in_record(id: &str, source: impl Into<Error>) -> Error {
        Error::Record { id: id.to_string(), source: Box::new(source.into()) }
    }

    /// True for problems with the input data rather than the computation.
    pub fn is_data_error(&self) -> bool {
        match self {
            Error::Store(_) | Error::Decompose(_) | Error::Data(_) | Error::Metric(_) => true,
            Error::Record { source, .. } => source.is_data_error(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
