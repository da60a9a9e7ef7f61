//! Advisory file locks. One writer per repository: every mutating
//! operation takes the exclusive lock at the repo root; reads stay
//! lock-free and rely on atomic renames for consistency.

use crate::error::{Error, Result};
use std::fs::{File, OpenOptions};
use std::path::Path;

/// Held for the duration of a mutating operation; released on drop.
#[derive(Debug)]
pub struct LockGuard {
    _file: File,
}

/// Take an exclusive advisory lock on `path`, creating the file if needed.
/// Blocks until the lock is available.
pub fn lock_exclusive(path: &Path) -> Result<LockGuard> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
    }
    let file = OpenOptions::new()
        .create(true)
        .truncate(false)
        .write(true)
        .open(path)
        .map_err(|e| Error::io_at(path, e))?;
    flock_exclusive(&file, path)?;
    Ok(LockGuard { _file: file })
}

#[cfg(unix)]
fn flock_exclusive(file: &File, path: &Path) -> Result<()> {
    use std::os::unix::io::AsRawFd;
    let rc = unsafe { libc::flock(file.as_raw_fd(), libc::LOCK_EX) };
    if rc != 0 {
        return Err(Error::io_at(path, std::io::Error::last_os_error()));
    }
    Ok(())
}

#[cfg(not(unix))]
fn flock_exclusive(_file: &File, _path: &Path) -> Result<()> {
    // Best effort on platforms without flock; atomic renames still keep
    // individual documents consistent.
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::{Arc, Mutex};

    #[test]
    fn lock_serializes_two_threads() {
        let dir = tempfile::tempdir().unwrap();
        let lock_path = dir.path().join(".lock");
        let log = Arc::new(Mutex::new(Vec::new()));
        let mut handles = Vec::new();
        for id in 0..4 {
            let lock_path = lock_path.clone();
            let log = Arc::clone(&log);
            handles.push(std::thread::spawn(move || {
                let _guard = lock_exclusive(&lock_path).unwrap();
                log.lock().unwrap().push((id, "in"));
                std::thread::sleep(std::time::Duration::from_millis(5));
                log.lock().unwrap().push((id, "out"));
            }));
        }
        for h in handles {
            h.join().unwrap();
        }
        // Critical sections never interleave: every "in" is followed by the
        // same thread's "out".
        let log = log.lock().unwrap();
        for pair in log.chunks(2) {
            assert_eq!(pair[0].0, pair[1].0);
            assert_eq!(pair[0].1, "in");
            assert_eq!(pair[1].1, "out");
        }
    }
}
