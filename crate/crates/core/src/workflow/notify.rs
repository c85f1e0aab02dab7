use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;

use super::Notification;

/// Where notifications go once a command has been applied. Delivery must
/// never fail the command, so implementations swallow their own errors.
pub trait Notifier: Send {
    fn deliver(&mut self, notification: &Notification);
}

impl Notifier for Vec<Notification> {
    fn deliver(&mut self, notification: &Notification) {
        self.push(notification.clone());
    }
}

/// Appends one JSON object per line to a file.
#[derive(Debug)]
pub struct FileNotifier {
    path: PathBuf,
    failures: u64,
}

impl FileNotifier {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self {
            path: path.into(),
            failures: 0,
        }
    }

    /// Deliveries that could not be written.
    pub fn failures(&self) -> u64 {
        self.failures
    }
}

impl Notifier for FileNotifier {
    fn deliver(&mut self, notification: &Notification) {
        let line = serde_json::to_string(notification).expect("notifications serialize");
        let written = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .and_then(|mut f| writeln!(f, "{line}"));
        if written.is_err() {
            self.failures += 1;
        }
    }
}
