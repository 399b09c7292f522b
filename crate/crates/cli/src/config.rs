use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::failure::{CliResult, Context, Failure, EXIT_DATA};

/// Directory searched for `<command>.json` when `--config` is not given.
pub const CONFIG_DIR_ENV: &str = "VCR_CONFIG_DIR";

/// Reads `explicit`, else `$VCR_CONFIG_DIR/<default_name>` if it exists,
/// else falls back to defaults. Returns the file actually used.
pub fn load<T: DeserializeOwned + Default>(explicit: Option<&Path>, default_name: &str) -> CliResult<(T, Option<PathBuf>)> {
    let path = match explicit {
        Some(p) => Some(p.to_path_buf()),
        None => std::env::var_os(CONFIG_DIR_ENV)
            .map(|dir| Path::new(&dir).join(default_name))
            .filter(|p| p.is_file()),
    };
    let Some(path) = path else {
        return Ok((T::default(), None));
    };
    let text = std::fs::read_to_string(&path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    let value = serde_json::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    Ok((value, Some(path)))
}

/// Writes the resolved configuration next to the command's outputs and
/// prints it.
pub fn echo<T: Serialize>(value: &T, path: &Path) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("configs serialize");
    text.push('\n');
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).or_exit(EXIT_DATA, dir)?;
    }
    std::fs::write(path, &text).or_exit(EXIT_DATA, path)?;
    print!("effective config ({}):\n{text}", path.display());
    Ok(())
}

/// `dir/model.json` -> `dir/model.<suffix>`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}
