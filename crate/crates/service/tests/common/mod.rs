#![allow(dead_code)]

use std::path::Path;

use medirelay_core::workflow::{Notification, NotificationKind, Profile, Recipient};
use medirelay_core::{AccountId, IdGen, Timestamp};
use medirelay_service::config::{ServiceConfig, SiteRole};
use medirelay_service::node::{Clock, Node};

/// 2026-10-05 00:00 UTC, a Monday.
pub const START: i64 = 1_791_158_400;
pub const PASSWORD: &str = "s3cret-passphrase";
pub const PEER_TOKEN: &str = "peer-token-0123456789";

/// A fast-hashing center config rooted at `dir`.
pub fn center_config(dir: &Path) -> ServiceConfig {
    ServiceConfig {
        data_dir: dir.to_path_buf(),
        listen: "127.0.0.1:0".parse().unwrap(),
        kdf_iterations: 10,
        peer_token: Some(PEER_TOKEN.into()),
        tick_secs: 3600,
        ..ServiceConfig::default()
    }
}

pub fn rural_config(dir: &Path, peer: &str) -> ServiceConfig {
    ServiceConfig {
        role: SiteRole::Rural,
        peer: Some(peer.into()),
        ..center_config(dir)
    }
}

pub fn open(config: ServiceConfig, seed: u64) -> Node {
    Node::open_with(config, Clock::manual(Timestamp::from_secs(START)), IdGen::seeded(seed)).unwrap()
}

pub fn profile(name: &str) -> Profile {
    [("name".to_string(), name.to_string())].into()
}

/// Activation tokens sent so far, newest last.
pub fn activation_tokens(node: &Node, account: AccountId) -> Vec<String> {
    let text = std::fs::read_to_string(node.notifications_path()).unwrap_or_default();
    text.lines()
        .map(|l| serde_json::from_str::<Notification>(l).unwrap())
        .filter(|n| n.kind == NotificationKind::ActivateAccount && n.recipient == Recipient::Account(account))
        .filter_map(|n| n.payload.rsplit(' ').next().map(str::to_string))
        .collect()
}

pub fn last_token(node: &Node, account: AccountId) -> String {
    activation_tokens(node, account)
        .pop()
        .expect("an activation token was sent")
}

/// Registers, activates and (for doctors) approves an account.
pub fn active_patient(node: &Node, email: &str) -> AccountId {
    let a = node
        .register(medirelay_core::workflow::Role::Patient, email, profile(email))
        .unwrap();
    node.activate(&last_token(node, a.account_id), PASSWORD).unwrap();
    a.account_id
}

pub fn ensure_admin(node: &Node) -> AccountId {
    if let Ok(a) = node.operator() {
        return a;
    }
    node.bootstrap_admin("admin@portal.test", PASSWORD, profile("Admin"))
        .unwrap()
        .account_id
}

pub fn active_doctor(node: &Node, email: &str) -> AccountId {
    ensure_admin(node);
    let a = node
        .register(medirelay_core::workflow::Role::Doctor, email, profile(email))
        .unwrap();
    node.activate(&last_token(node, a.account_id), PASSWORD).unwrap();
    node.approve_doctor(email).unwrap();
    a.account_id
}
