//! `--backend` parsing and construction.

use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use widescale::sim::judges::{FirstChoiceJudge, KeywordJudge, RandomChoiceJudge};
use widescale::sim::taskpack::SimTask;
use widescale::vlm::{record_session, ChatBackend, HttpBackend, Limited, ReplayBackend};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MockJudge {
    /// Knows the true rewards.
    Oracle,
    First,
    Random(u64),
    /// Reads change lines out of the narratives.
    Keyword,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BackendSpec {
    Live,
    Mock(MockJudge),
    Replay(PathBuf),
    Record(PathBuf),
}

impl FromStr for BackendSpec {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        let bad = || CliError::Config(format!("unknown backend {s:?}; expected live, mock[:oracle|first|random:SEED|keyword], replay:PATH or record:PATH"));
        let (head, rest) = match s.split_once(':') {
            Some((h, r)) => (h, Some(r)),
            None => (s, None),
        };
        Ok(match (head, rest) {
            ("live", None) => BackendSpec::Live,
            ("mock", None) | ("mock", Some("keyword")) => BackendSpec::Mock(MockJudge::Keyword),
            ("mock", Some("oracle")) => BackendSpec::Mock(MockJudge::Oracle),
            ("mock", Some("first")) => BackendSpec::Mock(MockJudge::First),
            ("mock", Some(r)) => match r.strip_prefix("random") {
                Some("") => BackendSpec::Mock(MockJudge::Random(0)),
                Some(seed) => BackendSpec::Mock(MockJudge::Random(
                    seed.strip_prefix(':').and_then(|v| v.parse().ok()).ok_or_else(bad)?,
                )),
                None => return Err(bad()),
            },
            ("replay", Some(p)) if !p.is_empty() => BackendSpec::Replay(PathBuf::from(p)),
            ("record", Some(p)) if !p.is_empty() => BackendSpec::Record(PathBuf::from(p)),
            _ => return Err(bad()),
        })
    }
}

/// What every model call goes through. `None` means the oracle judge,
/// which is built per task from the true rewards.
pub fn build(spec: &BackendSpec, tasks: &[SimTask], max_in_flight: usize) -> Result<Option<Arc<dyn ChatBackend>>, CliError> {
    Ok(Some(match spec {
        BackendSpec::Live => Arc::new(Limited::new(HttpBackend::from_env()?, max_in_flight)),
        BackendSpec::Mock(MockJudge::Oracle) => return Ok(None),
        BackendSpec::Mock(MockJudge::First) => Arc::new(FirstChoiceJudge),
        BackendSpec::Mock(MockJudge::Random(seed)) => Arc::new(RandomChoiceJudge::new(*seed)),
        BackendSpec::Mock(MockJudge::Keyword) => Arc::new(KeywordJudge::new(tasks)),
        BackendSpec::Replay(path) => Arc::new(ReplayBackend::open(path)?),
        BackendSpec::Record(path) => Arc::new(record_session(
            Limited::new(HttpBackend::from_env()?, max_in_flight),
            path,
        )?),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_form() {
        assert_eq!("live".parse::<BackendSpec>().unwrap(), BackendSpec::Live);
        assert_eq!("mock".parse::<BackendSpec>().unwrap(), BackendSpec::Mock(MockJudge::Keyword));
        assert_eq!("mock:oracle".parse::<BackendSpec>().unwrap(), BackendSpec::Mock(MockJudge::Oracle));
        assert_eq!("mock:random:7".parse::<BackendSpec>().unwrap(), BackendSpec::Mock(MockJudge::Random(7)));
        assert_eq!(
            "replay:a/b.cas".parse::<BackendSpec>().unwrap(),
            BackendSpec::Replay(PathBuf::from("a/b.cas"))
        );
        assert_eq!(
            "record:c:/x".parse::<BackendSpec>().unwrap(),
            BackendSpec::Record(PathBuf::from("c:/x"))
        );
        for bad in ["", "mock:nope", "mock:random:x", "replay:", "live:x"] {
            assert_eq!(bad.parse::<BackendSpec>().unwrap_err().exit_code(), 2, "{bad}");
        }
    }
}
