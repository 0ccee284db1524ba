use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;

use super::{series_unit, IngestError, MonthlySeries};
use crate::month::YearMonth;

pub const FRED_BASE_URL: &str = "https://api.stlouisfed.org";

#[derive(Debug, Deserialize)]
struct ObservationsResponse {
    #[serde(default)]
    observations: Vec<Observation>,
}

#[derive(Debug, Deserialize)]
struct Observation {
    date: String,
    value: String,
}

/// Blocking client for the FRED observations endpoint. Every successful
/// response body is written to `<cache_dir>/<series_id>.json`.
#[derive(Debug, Clone)]
pub struct FredClient {
    base_url: String,
    api_key: String,
    cache_dir: PathBuf,
    agent: ureq::Agent,
}

impl FredClient {
    pub fn new(api_key: impl Into<String>, cache_dir: impl Into<PathBuf>) -> Self {
        Self {
            base_url: FRED_BASE_URL.to_string(),
            api_key: api_key.into(),
            cache_dir: cache_dir.into(),
            agent: ureq::AgentBuilder::new()
                .timeout(Duration::from_secs(30))
                .build(),
        }
    }

    /// Reads the key from `FRED_API_KEY`.
    pub fn from_env(cache_dir: impl Into<PathBuf>) -> Result<Self, IngestError> {
        let key = std::env::var("FRED_API_KEY").map_err(|_| IngestError::AuthError)?;
        Ok(Self::new(key, cache_dir))
    }

    pub fn with_base_url(mut self, base_url: impl Into<String>) -> Self {
        self.base_url = base_url.into().trim_end_matches('/').to_string();
        self
    }

    pub fn cache_path(&self, series_id: &str) -> PathBuf {
        self.cache_dir.join(format!("{series_id}.json"))
    }

    pub fn observations_url(&self, series_id: &str, start: YearMonth, end: YearMonth) -> String {
        format!(
            "{}/fred/series/observations?series_id={}&api_key={}&file_type=json&frequency=m&observation_start={}&observation_end={}",
            self.base_url,
            series_id,
            self.api_key,
            start.first_of_month_string(),
            end.first_of_month_string()
        )
    }

    pub fn fetch_series(
        &self,
        series_id: &str,
        start: YearMonth,
        end: YearMonth,
    ) -> Result<MonthlySeries, IngestError> {
        if end < start {
            return Err(IngestError::EmptyResponse);
        }
        if self.api_key.trim().is_empty() {
            return Err(IngestError::AuthError);
        }
        let url = self.observations_url(series_id, start, end);
        log::info!("fetching {series_id} {start}..{end}");
        let body = match self.agent.get(&url).call() {
            Ok(resp) => resp.into_string()?,
            Err(ureq::Error::Status(code, resp)) => {
                let text = resp.into_string().unwrap_or_default();
                return Err(classify_status(code, &text));
            }
            Err(ureq::Error::Transport(t)) => {
                return Err(IngestError::Io(std::io::Error::other(
                    t.to_string(),
                )))
            }
        };
        fs::create_dir_all(&self.cache_dir)?;
        fs::write(self.cache_path(series_id), &body)?;
        parse_observations(&body, series_id)
    }

    /// Re-parses a previously cached response without touching the network.
    pub fn load_cached(&self, series_id: &str) -> Result<MonthlySeries, IngestError> {
        load_cached_response(&self.cache_path(series_id), series_id)
    }
}

pub fn load_cached_response(path: &Path, series_id: &str) -> Result<MonthlySeries, IngestError> {
    if !path.exists() {
        return Err(IngestError::MissingFile(path.to_path_buf()));
    }
    parse_observations(&fs::read_to_string(path)?, series_id)
}

fn classify_status(code: u16, body: &str) -> IngestError {
    // FRED answers a bad key with 400 and an error_message naming api_key.
    if code == 401 || code == 403 || (code == 400 && body.contains("api_key")) {
        IngestError::AuthError
    } else {
        IngestError::HttpError(code)
    }
}

/// Converts a FRED JSON observations body. Row numbers in errors are 1-based
/// positions in the observations array.
pub(crate) fn parse_observations(body: &str, series_id: &str) -> Result<MonthlySeries, IngestError> {
    let parsed: ObservationsResponse =
        serde_json::from_str(body).map_err(|e| IngestError::MalformedRow {
            line: e.line(),
            reason: e.to_string(),
        })?;
    if parsed.observations.is_empty() {
        return Err(IngestError::EmptyResponse);
    }
    let mut observations = Vec::with_capacity(parsed.observations.len());
    for (i, obs) in parsed.observations.iter().enumerate() {
        let malformed = |reason: String| IngestError::MalformedRow { line: i + 1, reason };
        let month = YearMonth::parse_first_of_month(&obs.date).map_err(|e| malformed(e.to_string()))?;
        let value: f64 = obs
            .value
            .trim()
            .parse()
            .map_err(|_| malformed(format!("unparseable value `{}`", obs.value)))?;
        observations.push((month, value));
    }
    MonthlySeries::new(series_id, series_unit(series_id), observations)
}
