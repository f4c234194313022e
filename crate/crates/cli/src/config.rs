//! Run configuration: knowledge-base paths, batch sizes, and the backend
//! roster. Credentials are never stored in the config, only the names of the
//! environment variables holding them. Relative paths resolve against the
//! config file's directory.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::Deserialize;
use thiserror::Error;

use diagsim_core::gateway::{BackendConfig, ChatBackend, GatewayError, ScriptedBackend};
use diagsim_core::orchestrator::{BackendFactory, SessionBackends};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed config {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error("config invalid: {0}")]
    Invalid(String),
    #[error("scripted backend replies file {path}: {detail}")]
    RepliesFile { path: String, detail: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

fn default_case_count() -> usize {
    300
}
fn default_run_count() -> usize {
    5
}
fn default_t_max() -> u32 {
    15
}
fn default_parallelism() -> usize {
    4
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_max_retries() -> u32 {
    3
}
fn default_timeout_secs() -> u64 {
    60
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KbPaths {
    pub graph: PathBuf,
    pub encyclopedia: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendSpec {
    /// OpenAI-compatible chat-completions endpoint.
    OpenaiChat {
        endpoint: String,
        model_id: String,
        credential_env_var: String,
        #[serde(default = "default_max_retries")]
        max_retries: u32,
        #[serde(default = "default_timeout_secs")]
        timeout_secs: u64,
    },
    /// Canned replies, inline or from a JSON array file; used for offline
    /// runs and golden replays.
    Scripted {
        #[serde(default)]
        model_id: Option<String>,
        #[serde(default)]
        replies: Vec<String>,
        #[serde(default)]
        replies_file: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendRoster {
    pub doctor: BackendSpec,
    pub patient: BackendSpec,
    pub examiner: BackendSpec,
    pub generator: BackendSpec,
    #[serde(default)]
    pub judges: Vec<BackendSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub kb: KbPaths,
    #[serde(default = "default_case_count")]
    pub case_count: usize,
    #[serde(default = "default_run_count")]
    pub run_count: usize,
    #[serde(default = "default_t_max")]
    pub t_max: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub backends: BackendRoster,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut config: RunConfig =
            serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
                path: path.display().to_string(),
                source,
            })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                let joined = base.join(p.as_path());
                *p = joined;
            }
        };
        resolve(&mut self.kb.graph);
        resolve(&mut self.kb.encyclopedia);
        resolve(&mut self.output_dir);
        let mut specs: Vec<&mut BackendSpec> = vec![
            &mut self.backends.doctor,
            &mut self.backends.patient,
            &mut self.backends.examiner,
            &mut self.backends.generator,
        ];
        specs.extend(self.backends.judges.iter_mut());
        for spec in specs {
            if let BackendSpec::Scripted {
                replies_file: Some(file),
                ..
            } = spec
            {
                resolve(file);
            }
        }
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.case_count < 1 {
            return Err(ConfigError::Invalid("case_count must be >= 1".into()));
        }
        if self.run_count < 1 {
            return Err(ConfigError::Invalid("run_count must be >= 1".into()));
        }
        if self.t_max < 1 {
            return Err(ConfigError::Invalid("t_max must be >= 1".into()));
        }
        if self.parallelism < 1 {
            return Err(ConfigError::Invalid("parallelism must be >= 1".into()));
        }
        if !self.backends.judges.is_empty() && self.backends.judges.len() != 5 {
            return Err(ConfigError::Invalid(format!(
                "judging requires exactly 5 judge backends, got {}",
                self.backends.judges.len()
            )));
        }
        Ok(())
    }
}

impl BackendSpec {
    fn scripted_replies(&self) -> Result<(String, Vec<String>), ConfigError> {
        match self {
            BackendSpec::Scripted {
                model_id,
                replies,
                replies_file,
            } => {
                let mut all = replies.clone();
                if let Some(file) = replies_file {
                    let text =
                        std::fs::read_to_string(file).map_err(|e| ConfigError::RepliesFile {
                            path: file.display().to_string(),
                            detail: e.to_string(),
                        })?;
                    let from_file: Vec<String> =
                        serde_json::from_str(&text).map_err(|e| ConfigError::RepliesFile {
                            path: file.display().to_string(),
                            detail: format!("expected a JSON array of strings: {e}"),
                        })?;
                    all.extend(from_file);
                }
                if all.is_empty() {
                    return Err(ConfigError::Invalid(
                        "scripted backend has no replies".into(),
                    ));
                }
                let label = model_id.clone().unwrap_or_else(|| "scripted".into());
                Ok((label, all))
            }
            BackendSpec::OpenaiChat { .. } => unreachable!("caller checks the variant"),
        }
    }

    /// Build one shared backend handle (generator, judges).
    pub fn build_shared(&self) -> Result<Arc<dyn ChatBackend>, ConfigError> {
        match self {
            BackendSpec::OpenaiChat {
                endpoint,
                model_id,
                credential_env_var,
                max_retries,
                timeout_secs,
            } => {
                let backend = diagsim_core::gateway::HttpBackend::new(BackendConfig {
                    endpoint: endpoint.clone(),
                    model_id: model_id.clone(),
                    credential_env_var: credential_env_var.clone(),
                    max_retries: *max_retries,
                    timeout: Duration::from_secs(*timeout_secs),
                })?;
                Ok(Arc::new(backend))
            }
            BackendSpec::Scripted { .. } => {
                let (label, replies) = self.scripted_replies()?;
                Ok(Arc::new(ScriptedBackend::labeled(label, replies)))
            }
        }
    }

    fn runtime(&self) -> Result<SpecRuntime, ConfigError> {
        match self {
            BackendSpec::OpenaiChat { .. } => Ok(SpecRuntime::Shared(self.build_shared()?)),
            BackendSpec::Scripted { .. } => {
                let (label, replies) = self.scripted_replies()?;
                Ok(SpecRuntime::Script {
                    label,
                    replies: Arc::new(replies),
                })
            }
        }
    }
}

/// Runtime form of one backend spec: HTTP backends are shared handles,
/// scripted backends spawn a fresh single-consumer instance per session.
enum SpecRuntime {
    Shared(Arc<dyn ChatBackend>),
    Script {
        label: String,
        replies: Arc<Vec<String>>,
    },
}

impl SpecRuntime {
    fn instantiate(&self) -> Arc<dyn ChatBackend> {
        match self {
            SpecRuntime::Shared(backend) => backend.clone(),
            SpecRuntime::Script { label, replies } => Arc::new(ScriptedBackend::labeled(
                label.clone(),
                replies.iter().cloned(),
            )),
        }
    }

    fn model_id(&self) -> String {
        match self {
            SpecRuntime::Shared(backend) => backend.model_id().to_string(),
            SpecRuntime::Script { label, .. } => label.clone(),
        }
    }
}

/// Per-session backend factory built from the config roster.
pub struct RosterFactory {
    doctor: SpecRuntime,
    patient: SpecRuntime,
    examiner: SpecRuntime,
}

impl RosterFactory {
    pub fn new(roster: &BackendRoster) -> Result<Self, ConfigError> {
        Ok(Self {
            doctor: roster.doctor.runtime()?,
            patient: roster.patient.runtime()?,
            examiner: roster.examiner.runtime()?,
        })
    }

    pub fn doctor_model_id(&self) -> String {
        self.doctor.model_id()
    }
}

impl BackendFactory for RosterFactory {
    fn session_backends(&self, _case_index: usize) -> Result<SessionBackends, GatewayError> {
        Ok(SessionBackends {
            doctor: self.doctor.instantiate(),
            patient: self.patient.instantiate(),
            examiner: self.examiner.instantiate(),
        })
    }
}
