//! Service configuration: a TOML file plus command-line overrides.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use medirelay_core::store::RetentionPolicy;
use medirelay_core::sync::SyncConfig;
use medirelay_core::time::{DAY, HOUR};
use medirelay_core::workflow::PortalSettings;
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;

/// Environment variable naming the config file.
pub const CONFIG_ENV: &str = "MEDIRELAY_CONFIG";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SiteRole {
    /// Hosts the portal and the Main and LongTerm tiers.
    Center,
    /// Records visits locally and syncs with a center.
    Rural,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen: SocketAddr,
    pub data_dir: PathBuf,
    pub role: SiteRole,
    /// Base URL of the center, e.g. `http://10.0.0.2:8080`. Rural only.
    pub peer: Option<String>,
    /// Shared secret for the peer-only sync endpoints.
    pub peer_token: Option<String>,
    pub main_retention_days: u32,
    pub local_capacity: usize,
    pub horizon_hours: u32,
    /// Portal timezone as minutes east of UTC.
    pub tz_offset_minutes: i32,
    pub activation_ttl_hours: u32,
    pub session_ttl_secs: u64,
    /// Seconds between sync ticks (rural) or tier maintenance (center).
    pub tick_secs: u64,
    /// Log entries between snapshots.
    pub snapshot_every: u64,
    pub kdf_iterations: u32,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".parse().expect("literal address"),
            data_dir: PathBuf::from("medirelay-data"),
            role: SiteRole::Center,
            peer: None,
            peer_token: None,
            main_retention_days: 90,
            local_capacity: 1000,
            horizon_hours: 24,
            tz_offset_minutes: 0,
            activation_ttl_hours: 72,
            session_ttl_secs: 8 * 3600,
            tick_secs: 60,
            snapshot_every: 1000,
            kdf_iterations: 100_000,
        }
    }
}

/// Command-line values that win over the file.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct ConfigOverrides {
    /// Config file; defaults to $MEDIRELAY_CONFIG, then built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory holding the event log and record tiers.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    /// Address the HTTP service binds.
    #[arg(long, global = true)]
    pub listen: Option<SocketAddr>,
    /// Site role.
    #[arg(long, value_enum, global = true)]
    pub role: Option<SiteRole>,
    /// Base URL of the center (rural sites).
    #[arg(long, global = true)]
    pub peer: Option<String>,
    /// Shared secret for the sync endpoints.
    #[arg(long, global = true)]
    pub peer_token: Option<String>,
    /// Seconds between sync or maintenance ticks.
    #[arg(long, global = true)]
    pub tick_secs: Option<u64>,
}

impl ServiceConfig {
    pub fn parse(text: &str) -> Result<Self, ServiceError> {
        toml::from_str(text).map_err(|e| ServiceError::ConfigInvalid(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::ConfigInvalid(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Resolves the file (flag, then environment), applies overrides and
    /// validates the result.
    pub fn load(overrides: &ConfigOverrides) -> Result<Self, ServiceError> {
        let path = overrides
            .config
            .clone()
            .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
        let mut cfg = match path {
            Some(p) => Self::from_file(&p)?,
            None => Self::default(),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &ConfigOverrides) {
        if let Some(v) = &o.data_dir {
            self.data_dir = v.clone();
        }
        if let Some(v) = o.listen {
            self.listen = v;
        }
        if let Some(v) = o.role {
            self.role = v;
        }
        if let Some(v) = &o.peer {
            self.peer = Some(v.clone());
        }
        if let Some(v) = &o.peer_token {
            self.peer_token = Some(v.clone());
        }
        if let Some(v) = o.tick_secs {
            self.tick_secs = v;
        }
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        let bad = |m: &str| Err(ServiceError::ConfigInvalid(m.to_string()));
        match (&self.role, &self.peer) {
            (SiteRole::Rural, None) => return bad("a rural site needs a peer address"),
            (_, Some(p)) if !(p.starts_with("http://") || p.starts_with("https://")) => {
                return bad("peer must be an http:// or https:// URL")
            }
            _ => {}
        }
        if self.peer_token.as_deref().is_some_and(|t| t.len() < 16) {
            return bad("peer_token must be at least 16 characters");
        }
        if self.local_capacity == 0 {
            return bad("local_capacity must be positive");
        }
        if self.horizon_hours == 0 {
            return bad("horizon_hours must be positive");
        }
        if self.tz_offset_minutes.abs() > 14 * 60 {
            return bad("tz_offset_minutes must be within +-14 hours");
        }
        if self.activation_ttl_hours == 0 || self.session_ttl_secs == 0 {
            return bad("token lifetimes must be positive");
        }
        if self.tick_secs == 0 || self.snapshot_every == 0 || self.kdf_iterations == 0 {
            return bad("tick_secs, snapshot_every and kdf_iterations must be positive");
        }
        Ok(())
    }

    pub fn retention(&self) -> RetentionPolicy {
        RetentionPolicy::new(i64::from(self.main_retention_days) * DAY, self.local_capacity)
    }

    pub fn sync(&self) -> SyncConfig {
        SyncConfig {
            horizon: i64::from(self.horizon_hours) * HOUR,
        }
    }

    pub fn portal(&self) -> PortalSettings {
        PortalSettings {
            tz_offset_minutes: self.tz_offset_minutes,
            token_ttl_secs: i64::from(self.activation_ttl_hours) * HOUR,
        }
    }
}
