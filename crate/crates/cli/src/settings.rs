//! Defaults read from `--config`; flags given on the command line win.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::Format;

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub format: Option<Format>,
    pub output: Option<PathBuf>,

    pub panel: Option<PathBuf>,
    pub streaming: Option<PathBuf>,
    pub subject_col: Option<String>,
    pub period_col: Option<String>,
    pub response_col: Option<String>,
    pub treat_cols: Option<Vec<String>>,
    pub covar_cols: Option<Vec<String>>,
    pub mechanism: Option<String>,
    pub floor: Option<f64>,

    pub estimator: Option<String>,
    pub tau: Option<f64>,
    pub lambda: Option<f64>,
    pub lambda_method: Option<String>,
    pub penalty: Option<String>,
    pub kappa: Option<f64>,
    pub c: Option<f64>,
    pub draws: Option<usize>,
    pub method: Option<String>,

    pub design: Option<String>,
    pub n: Option<usize>,
    pub t: Option<usize>,
    pub mc_reps: Option<usize>,

    pub table: Option<String>,
    pub scale: Option<f64>,
}

impl Settings {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
        serde_json::from_str(&text).map_err(|e| e.to_string())
    }
}
