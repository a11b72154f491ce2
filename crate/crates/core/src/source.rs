//! Candidate sources: anything that can hand out `ThetaCandidate`s by index.
//!
//! Large candidate sets are generated on demand so that a 2000-candidate
//! sweep never holds every weight matrix in memory at once.

use std::borrow::Cow;

use crate::data::{CandidateSet, ThetaCandidate};
use crate::error::Result;

pub trait CandidateSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn log_prior_mass(&self, j: usize) -> f64;

    fn candidate(&self, j: usize) -> Result<Cow<'_, ThetaCandidate>>;

    fn log_prior_masses(&self) -> Vec<f64> {
        (0..self.len()).map(|j| self.log_prior_mass(j)).collect()
    }

    /// Materializes every candidate.
    fn collect_set(&self) -> Result<CandidateSet> {
        let cands = (0..self.len())
            .map(|j| self.candidate(j).map(Cow::into_owned))
            .collect::<Result<Vec<_>>>()?;
        CandidateSet::new(cands)
    }
}

impl CandidateSource for CandidateSet {
    fn len(&self) -> usize {
        CandidateSet::len(self)
    }

    fn log_prior_mass(&self, j: usize) -> f64 {
        self.candidates()[j].log_prior_mass
    }

    fn candidate(&self, j: usize) -> Result<Cow<'_, ThetaCandidate>> {
        Ok(Cow::Borrowed(&self.candidates()[j]))
    }

    fn collect_set(&self) -> Result<CandidateSet> {
        Ok(self.clone())
    }
}
