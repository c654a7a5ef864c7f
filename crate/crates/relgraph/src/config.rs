//! Service configuration: TOML file, then `RELGRAPH_*` environment overrides.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ReasonerMode {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    /// Framed TCP listener.
    pub listen: SocketAddr,
    /// Snapshot endpoint and websocket listener.
    pub http_listen: SocketAddr,
    pub max_sessions: usize,
    /// Server messages queued per subscriber before it is disconnected.
    pub buffer_limit: usize,
    /// Largest accepted client frame, bytes.
    pub max_frame_bytes: usize,
    /// Where `open` looks up scenarios by name.
    pub scenario_dir: PathBuf,
    pub reasoner: ReasonerMode,
    pub http_reasoner_url: String,
    /// Overrides the per-attempt reasoner deadline of every session.
    pub timeout_secs: Option<f64>,
    /// Overrides the in-flight request bound of every session.
    pub max_in_flight: Option<usize>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            listen: "127.0.0.1:7410".parse().expect("literal address"),
            http_listen: "127.0.0.1:7411".parse().expect("literal address"),
            max_sessions: 64,
            buffer_limit: 256,
            max_frame_bytes: 1 << 20,
            scenario_dir: PathBuf::from("scenarios"),
            reasoner: ReasonerMode::Mock,
            http_reasoner_url: "http://127.0.0.1:8080/reason".into(),
            timeout_secs: None,
            max_in_flight: None,
        }
    }
}

impl ServiceConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => ServiceConfig::default(),
        };
        config.apply_env(|k| std::env::var(k).ok())?;
        config.check()?;
        Ok(config)
    }

    /// Applies `RELGRAPH_<FIELD>` overrides read through `get`.
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> anyhow::Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> anyhow::Result<T>
        where
            T::Err: std::fmt::Display,
        {
            v.trim().parse().map_err(|e| anyhow::anyhow!("{key}={v:?}: {e}"))
        }
        if let Some(v) = get("RELGRAPH_LISTEN") {
            self.listen = parse("RELGRAPH_LISTEN", &v)?;
        }
        if let Some(v) = get("RELGRAPH_HTTP_LISTEN") {
            self.http_listen = parse("RELGRAPH_HTTP_LISTEN", &v)?;
        }
        if let Some(v) = get("RELGRAPH_MAX_SESSIONS") {
            self.max_sessions = parse("RELGRAPH_MAX_SESSIONS", &v)?;
        }
        if let Some(v) = get("RELGRAPH_BUFFER_LIMIT") {
            self.buffer_limit = parse("RELGRAPH_BUFFER_LIMIT", &v)?;
        }
        if let Some(v) = get("RELGRAPH_MAX_FRAME_BYTES") {
            self.max_frame_bytes = parse("RELGRAPH_MAX_FRAME_BYTES", &v)?;
        }
        if let Some(v) = get("RELGRAPH_SCENARIO_DIR") {
            self.scenario_dir = PathBuf::from(v);
        }
        if let Some(v) = get("RELGRAPH_REASONER") {
            self.reasoner = match v.trim() {
                "mock" => ReasonerMode::Mock,
                "http" => ReasonerMode::Http,
                other => bail!("RELGRAPH_REASONER={other:?}: expected mock or http"),
            };
        }
        if let Some(v) = get("RELGRAPH_HTTP_REASONER_URL") {
            self.http_reasoner_url = v;
        }
        if let Some(v) = get("RELGRAPH_TIMEOUT_SECS") {
            self.timeout_secs = Some(parse("RELGRAPH_TIMEOUT_SECS", &v)?);
        }
        if let Some(v) = get("RELGRAPH_MAX_IN_FLIGHT") {
            self.max_in_flight = Some(parse("RELGRAPH_MAX_IN_FLIGHT", &v)?);
        }
        Ok(())
    }

    pub fn check(&self) -> anyhow::Result<()> {
        if self.max_sessions == 0 {
            bail!("max_sessions must be at least 1");
        }
        if self.buffer_limit == 0 {
            bail!("buffer_limit must be at least 1");
        }
        if let Some(t) = self.timeout_secs {
            if !(t.is_finite() && t > 0.0) {
                bail!("timeout_secs must be positive");
            }
        }
        if self.max_in_flight == Some(0) {
            bail!("max_in_flight must be at least 1");
        }
        Ok(())
    }
}
