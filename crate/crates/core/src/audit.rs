//! File-read accounting.
//!
//! Every file the crate reads goes through [`read_bytes`] or [`read_text`],
//! which record the path when a [`capture_reads`] scope is active on the
//! current thread. Tests use this to show which inputs a pipeline touched.

use std::cell::RefCell;
use std::path::{Path, PathBuf};

use crate::{Error, Result};

thread_local! {
    static LOG: RefCell<Vec<Vec<PathBuf>>> = const { RefCell::new(Vec::new()) };
}

fn record(path: &Path) {
    LOG.with(|log| {
        for scope in log.borrow_mut().iter_mut() {
            scope.push(path.to_path_buf());
        }
    });
}

/// Runs `f` and returns its result with every path read meanwhile, in
/// order, duplicates kept. Scopes nest.
pub fn capture_reads<T>(f: impl FnOnce() -> T) -> (T, Vec<PathBuf>) {
    LOG.with(|log| log.borrow_mut().push(Vec::new()));
    let out = f();
    let paths = LOG.with(|log| log.borrow_mut().pop().unwrap_or_default());
    (out, paths)
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    record(path);
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    record(path);
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}
