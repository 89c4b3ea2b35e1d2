//! Output directories that appear only once every file is written.

use std::fs;
use std::path::{Path, PathBuf};

use crate::CliError;

fn io(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Files are written to a hidden sibling directory and renamed onto the
/// destination by [`Staging::commit`]. Dropping without committing removes them.
#[derive(Debug)]
pub struct Staging {
    tmp: PathBuf,
    dest: PathBuf,
    done: bool,
}

impl Staging {
    pub fn begin(dest: &Path) -> Result<Self, CliError> {
        let name = dest
            .file_name()
            .ok_or_else(|| {
                CliError::Config(format!("output directory {} has no name", dest.display()))
            })?
            .to_string_lossy()
            .into_owned();
        let parent = match dest.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).map_err(|e| io(&parent, e))?;
        let tmp = parent.join(format!(".{name}.partial-{}", std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| io(&tmp, e))?;
        }
        fs::create_dir(&tmp).map_err(|e| io(&tmp, e))?;
        Ok(Staging {
            tmp,
            dest: dest.to_path_buf(),
            done: false,
        })
    }

    pub fn path(&self) -> &Path {
        &self.tmp
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
        let p = self.tmp.join(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| io(parent, e))?;
        }
        fs::write(&p, contents).map_err(|e| io(&p, e))
    }

    /// Replaces any previous contents of the destination.
    pub fn commit(mut self) -> Result<PathBuf, CliError> {
        if self.dest.exists() {
            fs::remove_dir_all(&self.dest).map_err(|e| io(&self.dest, e))?;
        }
        fs::rename(&self.tmp, &self.dest).map_err(|e| io(&self.dest, e))?;
        self.done = true;
        Ok(self.dest.clone())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.done {
            let _ = fs::remove_dir_all(&self.tmp);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn commit_moves_files_into_place() {
        let dir = tempfile::tempdir().unwrap();
        let dest = dir.path().join("out");
        let s = Staging::begin(&dest).unwrap();
        s.write("a.csv", "x\n").unwrap();
        assert!(!dest.exists());
        s.commit().unwrap();
        assert_eq!(fs::read_to_string(dest.join("a.csv")).unwrap(), "x\n");
    }

    #[test]
    fn abandoned_staging_leaves_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let dest = dir.path().join("out");
        {
            let s = Staging::begin(&dest).unwrap();
            s.write("a.csv", "x\n").unwrap();
        }
        assert!(!dest.exists());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }
}
