use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use dlmap_study::{StudyService, StudySpec};
use serde::{Deserialize, Serialize};

use crate::manifest::RunManifest;
use crate::ConfigError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeRun {
    /// Study state directory; restored on start.
    pub data: PathBuf,
    /// Study specs (JSON or TOML) registered unless a study of the same name
    /// already exists.
    pub studies: Vec<PathBuf>,
    pub bind: String,
    pub port: u16,
}

impl Default for ServeRun {
    fn default() -> Self {
        Self {
            data: PathBuf::new(),
            studies: Vec::new(),
            bind: "127.0.0.1".into(),
            port: 8080,
        }
    }
}

/// Read a study spec; relative stimulus paths resolve against its directory.
pub fn load_study(path: &Path) -> Result<StudySpec> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read study {}", path.display()))?;
    let mut spec: StudySpec = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {}", path.display(), e.message())))?
    } else {
        serde_json::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?
    };
    let base = path.parent().unwrap_or(Path::new(""));
    for s in spec.stimuli.iter_mut().chain(spec.training.iter_mut()) {
        if s.path.is_relative() {
            s.path = base.join(&s.path);
        }
    }
    Ok(spec)
}

impl ServeRun {
    pub fn execute(&self) -> Result<()> {
        std::fs::create_dir_all(&self.data).with_context(|| format!("cannot create {}", self.data.display()))?;
        let service = Arc::new(StudyService::open(&self.data)?);
        for path in &self.studies {
            let spec = load_study(path)?;
            if let Some(existing) = service.list_studies().into_iter().find(|s| s.name == spec.name) {
                log::info!("study {:?} already registered as {}", spec.name, existing.study_id);
                continue;
            }
            let info = service.create_study(spec)?;
            println!("registered {} ({} pairs, models {})", info.study_id, info.pairs, info.models.join(", "));
        }
        RunManifest::new("serve-study", 0, self, &self.studies, &[], &self.data)?.write(&self.data)?;

        let rt = tokio::runtime::Runtime::new().context("cannot start the async runtime")?;
        rt.block_on(async {
            let addr = format!("{}:{}", self.bind, self.port);
            let listener = tokio::net::TcpListener::bind(&addr)
                .await
                .with_context(|| format!("cannot listen on {addr}"))?;
            println!("listening on http://{}", listener.local_addr()?);
            std::io::stdout().flush()?;
            let shutdown = async {
                let _ = tokio::signal::ctrl_c().await;
            };
            dlmap_study::serve(listener, service, shutdown).await.context("server failed")
        })
    }
}
