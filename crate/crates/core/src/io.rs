//! Run directories and artifact writers.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};

/// One directory per invocation; every artifact is written inside it.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// Creates `parent/<name>` or `parent/<UTC timestamp>-<command>`, adding a
    /// numeric suffix when the name is taken.
    pub fn create(parent: &Path, command: &str, name: Option<&str>) -> Result<Self> {
        std::fs::create_dir_all(parent)
            .map_err(|e| Error::config("output.dir", format!("cannot create {}: {e}", parent.display())))?;
        let base = match name {
            Some(n) => {
                check_name(n).map_err(|m| Error::config("output.name", m))?;
                n.to_string()
            }
            None => format!("{}-{command}", chrono::Utc::now().format("%Y%m%dT%H%M%SZ")),
        };
        for i in 0..1000 {
            let candidate = if i == 0 { base.clone() } else { format!("{base}-{i}") };
            let path = parent.join(&candidate);
            match std::fs::create_dir(&path) {
                Ok(()) => return Ok(RunDir { path }),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(e.into()),
            }
        }
        Err(Error::config("output.dir", "could not find a free run directory name"))
    }

    pub fn file(&self, name: &str) -> Result<PathBuf> {
        check_name(name).map_err(|m| Error::config("output", m))?;
        Ok(self.path.join(name))
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<PathBuf> {
        let p = self.file(name)?;
        std::fs::write(&p, contents)?;
        Ok(p)
    }

    /// Pretty JSON with sorted object keys and a trailing newline.
    pub fn write_json(&self, name: &str, value: &impl Serialize) -> Result<PathBuf> {
        self.write(name, &to_sorted_json(value)?)
    }
}

fn check_name(name: &str) -> std::result::Result<(), String> {
    let p = Path::new(name);
    if name.is_empty() || p.components().count() != 1 || name == "." || name == ".." || p.is_absolute() {
        return Err(format!("`{name}` must be a plain file name"));
    }
    Ok(())
}

/// `serde_json::Value` keeps objects in a sorted map, so a round trip sorts keys.
pub fn to_sorted_json(value: &impl Serialize) -> Result<String> {
    let v = serde_json::to_value(value)?;
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn keys_sorted() {
        let mut m = HashMap::new();
        m.insert("zeta", 1);
        m.insert("alpha", 2);
        m.insert("mid", 3);
        let s = to_sorted_json(&m).unwrap();
        let a = s.find("alpha").unwrap();
        let b = s.find("mid").unwrap();
        let c = s.find("zeta").unwrap();
        assert!(a < b && b < c);
    }

    #[test]
    fn names_stay_inside() {
        let tmp = tempfile::tempdir().unwrap();
        let r = RunDir::create(tmp.path(), "cell", Some("fixed")).unwrap();
        let again = RunDir::create(tmp.path(), "cell", Some("fixed")).unwrap();
        assert_ne!(r.path, again.path);
        assert!(r.write("../escape.txt", "x").is_err());
        assert!(r.write("a/b.txt", "x").is_err());
        assert!(RunDir::create(tmp.path(), "cell", Some("../up")).is_err());
        r.write("ok.txt", "x").unwrap();
        assert!(r.path.join("ok.txt").is_file());
    }
}
