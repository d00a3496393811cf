//! Fixers: a chat-completions client and a scripted, file-backed fixer.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};

pub const DEFAULT_TEMPERATURE: f64 = 0.7;
pub const REPEATED_TEMPERATURE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixerKind {
    Scripted,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixerConfig {
    pub name: String,
    pub kind: FixerKind,
    /// Chat-completions URL, or the response directory of a scripted fixer.
    pub endpoint: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_output_tokens: u32,
    #[serde(default)]
    pub api_key_env: Option<String>,
    /// Model identifier sent to the endpoint; defaults to `name`.
    #[serde(default)]
    pub model: Option<String>,
    /// Whether this fixer also produced broken starts in the corpus.
    #[serde(default)]
    pub is_source_model: bool,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_request_timeout")]
    pub request_timeout_s: u64,
}

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}
fn default_max_tokens() -> u32 {
    8192
}
fn default_retries() -> u32 {
    2
}
fn default_request_timeout() -> u64 {
    600
}

impl FixerConfig {
    pub fn scripted(name: &str, dir: &Path) -> FixerConfig {
        FixerConfig {
            name: name.to_string(),
            kind: FixerKind::Scripted,
            endpoint: dir.display().to_string(),
            temperature: DEFAULT_TEMPERATURE,
            max_output_tokens: default_max_tokens(),
            api_key_env: None,
            model: None,
            is_source_model: false,
            retries: default_retries(),
            request_timeout_s: default_request_timeout(),
        }
    }

    pub fn build(&self) -> Result<Box<dyn Fixer>> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(Error::Config(format!("fixer {}: temperature must be >= 0", self.name)));
        }
        match self.kind {
            FixerKind::Scripted => Ok(Box::new(ScriptedFixer::new(&self.name, &self.endpoint))),
            FixerKind::Remote => Ok(Box::new(RemoteFixer::new(self.clone())?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FixerFile {
    fixers: Vec<FixerConfig>,
}

/// Reads a fixer panel file. Relative scripted endpoints resolve against the
/// file's directory.
pub fn load_fixers(path: &Path) -> Result<Vec<FixerConfig>> {
    let text = crate::read_to_string(path)?;
    let file: FixerFile = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("fixer file {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut names = std::collections::BTreeSet::new();
    let mut fixers = Vec::with_capacity(file.fixers.len());
    for mut f in file.fixers {
        if !names.insert(f.name.clone()) {
            return Err(Error::Config(format!("duplicate fixer name `{}`", f.name)));
        }
        if f.kind == FixerKind::Scripted && Path::new(&f.endpoint).is_relative() {
            f.endpoint = base.join(&f.endpoint).display().to_string();
        }
        fixers.push(f);
    }
    Ok(fixers)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryPair {
    pub candidate: String,
    pub feedback: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub prompt: String,
    pub broken_kernel: String,
    pub error_log: String,
    /// Oldest first; the last pair carries the latest feedback.
    pub history: Vec<HistoryPair>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// Frozen prompt assembly, recorded in the run's config snapshot.
pub const PROMPT_ASSEMBLY_VERSION: &str = "prompt-kernel-log-history/1";

impl PromptBundle {
    /// Initial user turn, then one assistant/user exchange per history pair.
    pub fn messages(&self) -> Vec<ChatMessage> {
        let mut messages = vec![ChatMessage {
            role: "user".into(),
            content: format!(
                "{}\n\nThe current solution fails. Broken solution:\n```\n{}\n```\n\nRecorded error log:\n```\n{}\n```\n\nReturn the complete corrected file in a single fenced code block.",
                self.prompt.trim_end(),
                self.broken_kernel.trim_end(),
                self.error_log.trim_end()
            ),
        }];
        for pair in &self.history {
            messages.push(ChatMessage {
                role: "assistant".into(),
                content: format!("```\n{}\n```", pair.candidate.trim_end()),
            });
            messages.push(ChatMessage {
                role: "user".into(),
                content: pair.feedback.clone(),
            });
        }
        messages
    }
}

/// Identifies the request being made, for scripted lookups and logging.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestContext {
    pub task_id: String,
    pub stem: String,
    pub iteration: usize,
}

pub trait Fixer: Send + Sync {
    fn name(&self) -> &str;

    fn request_candidate(&self, ctx: &RequestContext, bundle: &PromptBundle, temperature: f64) -> Result<String>;
}

/// Reads `<dir>/<stem>/iter_<n>.txt`, falling back to `<dir>/<stem>/fallback.txt`
/// and then `<dir>/fallback.txt`.
#[derive(Debug, Clone)]
pub struct ScriptedFixer {
    name: String,
    dir: PathBuf,
}

impl ScriptedFixer {
    pub fn new(name: &str, dir: impl Into<PathBuf>) -> ScriptedFixer {
        ScriptedFixer {
            name: name.to_string(),
            dir: dir.into(),
        }
    }
}

impl Fixer for ScriptedFixer {
    fn name(&self) -> &str {
        &self.name
    }

    fn request_candidate(&self, ctx: &RequestContext, _bundle: &PromptBundle, _temperature: f64) -> Result<String> {
        let task_dir = self.dir.join(&ctx.stem);
        let candidates = [
            task_dir.join(format!("iter_{}.txt", ctx.iteration)),
            task_dir.join("fallback.txt"),
            self.dir.join("fallback.txt"),
        ];
        for path in &candidates {
            if path.is_file() {
                return crate::read_to_string(path);
            }
        }
        Err(Error::FixerUnavailable {
            fixer: self.name.clone(),
            message: format!("no scripted response for {} iteration {}", ctx.stem, ctx.iteration),
        })
    }
}

/// Chat-completions client with bounded retries.
#[derive(Debug)]
pub struct RemoteFixer {
    cfg: FixerConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl RemoteFixer {
    pub fn new(cfg: FixerConfig) -> Result<RemoteFixer> {
        let api_key = match &cfg.api_key_env {
            Some(var) if !var.is_empty() => Some(std::env::var(var).map_err(|_| {
                Error::Config(format!("fixer {}: environment variable {var} is not set", cfg.name))
            })?),
            _ => None,
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.request_timeout_s.max(1))))
            .build()
            .into();
        Ok(RemoteFixer { cfg, api_key, agent })
    }

    pub fn payload(&self, bundle: &PromptBundle, temperature: f64) -> Value {
        json!({
            "model": self.cfg.model.as_deref().unwrap_or(&self.cfg.name),
            "messages": bundle.messages(),
            "temperature": temperature,
            "max_tokens": self.cfg.max_output_tokens,
        })
    }

    fn attempt(&self, payload: &Value) -> std::result::Result<String, String> {
        let mut req = self.agent.post(&self.cfg.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let resp = req.send_json(payload).map_err(|e| e.to_string())?;
        let body: Value = resp.into_body().read_json().map_err(|e| e.to_string())?;
        body.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| "response has no choices[0].message.content".to_string())
    }
}

impl Fixer for RemoteFixer {
    fn name(&self) -> &str {
        &self.cfg.name
    }

    fn request_candidate(&self, _ctx: &RequestContext, bundle: &PromptBundle, temperature: f64) -> Result<String> {
        let payload = self.payload(bundle, temperature);
        let mut last = String::new();
        for _ in 0..=self.cfg.retries {
            match self.attempt(&payload) {
                Ok(text) => return Ok(text),
                Err(e) => last = e,
            }
        }
        Err(Error::FixerUnavailable {
            fixer: self.cfg.name.clone(),
            message: format!("{} attempts failed; last error: {last}", self.cfg.retries + 1),
        })
    }
}

/// Contents of the last complete fenced block, else the whole response.
pub fn extract_code(response: &str) -> Result<String> {
    let mut blocks: Vec<Vec<&str>> = Vec::new();
    let mut current: Option<Vec<&str>> = None;
    for line in response.lines() {
        let is_fence = line.trim_start().starts_with("```");
        match (&mut current, is_fence) {
            (None, true) => current = Some(Vec::new()),
            (Some(_), true) if line.trim() == "```" => blocks.push(current.take().unwrap()),
            (Some(body), _) => body.push(line),
            (None, false) => {}
        }
    }
    let code = match blocks.last() {
        Some(lines) => {
            let mut s = lines.join("\n");
            s.push('\n');
            s
        }
        None => response.to_string(),
    };
    if code.trim().is_empty() {
        return Err(Error::EmptyCandidate);
    }
    Ok(code)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extraction_rules() {
        assert_eq!(extract_code("```cuda\nint a;\n```").unwrap(), "int a;\n");
        let two = "first:\n```\nold\n```\nthen\n```cpp\nnew();\n```\nbye";
        assert_eq!(extract_code(two).unwrap(), "new();\n");
        assert_eq!(extract_code("plain text").unwrap(), "plain text");
        assert!(matches!(extract_code("  \n"), Err(Error::EmptyCandidate)));
        assert!(matches!(extract_code("```\n```"), Err(Error::EmptyCandidate)));
    }

    #[test]
    fn history_becomes_exchanges() {
        let bundle = PromptBundle {
            prompt: "p".into(),
            broken_kernel: "k".into(),
            error_log: "e".into(),
            history: (0..4)
                .map(|i| HistoryPair {
                    candidate: format!("c{i}"),
                    feedback: format!("f{i}"),
                })
                .collect(),
        };
        let m = bundle.messages();
        assert_eq!(m.len(), 1 + 2 * 4);
        assert_eq!(m.iter().filter(|x| x.role == "assistant").count(), 4);
        assert_eq!(m.last().unwrap().content, "f3");
    }

    #[test]
    fn scripted_lookup_order() {
        let dir = tempfile::tempdir().unwrap();
        crate::write_file(&dir.path().join("t/iter_2.txt"), "two").unwrap();
        crate::write_file(&dir.path().join("fallback.txt"), "fb").unwrap();
        let f = ScriptedFixer::new("s", dir.path());
        let b = PromptBundle {
            prompt: String::new(),
            broken_kernel: String::new(),
            error_log: String::new(),
            history: vec![],
        };
        let ctx = |i| RequestContext {
            task_id: "T".into(),
            stem: "t".into(),
            iteration: i,
        };
        assert_eq!(f.request_candidate(&ctx(2), &b, 0.7).unwrap(), "two");
        assert_eq!(f.request_candidate(&ctx(3), &b, 0.7).unwrap(), "fb");
    }
}
