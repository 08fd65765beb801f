//! Collects warnings from every thread and writes them once, sorted and
//! counted, so the log does not depend on scheduling.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use log::{Level, LevelFilter, Log, Metadata, Record};

pub struct RunLog {
    entries: Mutex<BTreeMap<(Level, String), usize>>,
}

static LOGGER: RunLog = RunLog {
    entries: Mutex::new(BTreeMap::new()),
};

impl Log for RunLog {
    fn enabled(&self, metadata: &Metadata) -> bool {
        metadata.level() <= Level::Warn
    }

    fn log(&self, record: &Record) {
        if self.enabled(record.metadata()) {
            let mut entries = self.entries.lock().expect("log mutex poisoned");
            *entries.entry((record.level(), record.args().to_string())).or_default() += 1;
        }
    }

    fn flush(&self) {}
}

pub fn install() {
    if log::set_logger(&LOGGER).is_ok() {
        log::set_max_level(LevelFilter::Warn);
    }
}

pub fn warning_count() -> usize {
    LOGGER.entries.lock().expect("log mutex poisoned").values().sum()
}

/// Writes `run.log` into `dir`, one line per distinct message.
pub fn write(dir: &Path) -> std::io::Result<()> {
    let entries = LOGGER.entries.lock().expect("log mutex poisoned");
    let mut file = std::fs::File::create(dir.join("run.log"))?;
    for ((level, message), count) in entries.iter() {
        if *count == 1 {
            writeln!(file, "{level} {message}")?;
        } else {
            writeln!(file, "{level} {message} (x{count})")?;
        }
    }
    Ok(())
}
