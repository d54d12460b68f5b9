//! Key-value config files. Each `key = value` line becomes `--key value`
//! ahead of the real command-line flags, so flags given explicitly win.

use std::ffi::OsString;
use std::fs;

use clap::{ArgAction, Command};

use crate::CliError;

/// Splices the contents of `--config <path>` into `args`, right after the
/// subcommand name.
pub fn expand(args: Vec<OsString>, command: &Command) -> Result<Vec<OsString>, CliError> {
    let Some(sub_pos) = args
        .iter()
        .skip(1)
        .position(|a| !a.to_string_lossy().starts_with('-'))
        .map(|p| p + 1)
    else {
        return Ok(args);
    };
    let Some(sub) = command.find_subcommand(args[sub_pos].to_string_lossy().as_ref()) else {
        return Ok(args);
    };

    let mut path = None;
    let mut rest = Vec::with_capacity(args.len());
    let mut iter = args[sub_pos + 1..].iter();
    while let Some(arg) = iter.next() {
        let s = arg.to_string_lossy();
        if s == "--config" {
            let value = iter
                .next()
                .ok_or_else(|| CliError::Usage("--config needs a file path".into()))?;
            path = Some(value.clone());
        } else if let Some(value) = s.strip_prefix("--config=") {
            path = Some(OsString::from(value));
        } else {
            rest.push(arg.clone());
        }
    }
    let Some(path) = path else {
        return Ok(args);
    };

    let text = fs::read_to_string(&path)
        .map_err(|e| CliError::Usage(format!("--config: cannot read {}: {e}", path.to_string_lossy())))?;
    let mut out: Vec<OsString> = args[..=sub_pos].to_vec();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let at = || format!("{}:{}", path.to_string_lossy(), i + 1);
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("{}: expected `key = value`", at())))?;
        let (key, value) = (key.trim(), value.trim());
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key))
            .ok_or_else(|| CliError::Usage(format!("{}: unknown option `{key}` for `{}`", at(), sub.get_name())))?;
        match arg.get_action() {
            ArgAction::SetTrue => match value {
                "true" | "yes" | "1" => out.push(format!("--{key}").into()),
                "false" | "no" | "0" => {}
                other => {
                    return Err(CliError::Usage(format!(
                        "{}: `{key}` expects true or false, got {other:?}",
                        at()
                    )))
                }
            },
            _ => {
                out.push(format!("--{key}").into());
                out.push(value.into());
            }
        }
    }
    out.extend(rest);
    Ok(out)
}
