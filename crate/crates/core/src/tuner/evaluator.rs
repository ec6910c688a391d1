//! Evaluator plugins: the bridge between sampled configurations and measured
//! objectives.

use std::collections::HashSet;
use std::io::Read;
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use regex::Regex;

use crate::space::{Configuration, ParameterSpace};
use crate::tuner::TuneError;

/// A failed evaluation. Failures are recorded, consume budget, and do not
/// abort the tuning loop.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalFailure {
    pub message: String,
}

impl std::fmt::Display for EvalFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl EvalFailure {
    pub fn new(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
        }
    }
}

/// Measures one configuration on one task. Lower objectives are better.
/// Implementations must return a finite value or a structured failure, and
/// are called sequentially from the tuning loop's thread.
pub trait Evaluator {
    fn evaluate(&mut self, config: &Configuration, task_value: f64) -> Result<f64, EvalFailure>;
}

impl<F> Evaluator for F
where
    F: FnMut(&Configuration, f64) -> Result<f64, EvalFailure>,
{
    fn evaluate(&mut self, config: &Configuration, task_value: f64) -> Result<f64, EvalFailure> {
        self(config, task_value)
    }
}

/// Runs a shell command template with `{name}` placeholders for every tunable
/// and the task feature, repeats it, and aggregates the objective as the mean
/// of the last `repeats - 1` runs (the first run warms caches and is
/// discarded; with `repeats = 1` the single run is used as-is).
///
/// The objective is extracted from the process output (stdout, then stderr)
/// by a regular expression with exactly one capture group. A non-zero exit
/// status, a timeout, or an unmatched pattern is a failure.
#[derive(Debug)]
pub struct ShellEvaluator {
    space: Arc<ParameterSpace>,
    template: String,
    pattern: Regex,
    timeout: Duration,
    repeats: u32,
}

pub const DEFAULT_SHELL_REPEATS: u32 = 3;

impl ShellEvaluator {
    pub fn new(
        space: Arc<ParameterSpace>,
        template: impl Into<String>,
        pattern: &str,
        timeout: Duration,
        repeats: u32,
    ) -> Result<Self, TuneError> {
        let template = template.into();
        let pattern = Regex::new(pattern)
            .map_err(|e| TuneError::Template(format!("invalid objective pattern: {e}")))?;
        if pattern.captures_len() != 2 {
            return Err(TuneError::Template(format!(
                "objective pattern must have exactly one capture group, found {}",
                pattern.captures_len() - 1
            )));
        }
        if repeats == 0 {
            return Err(TuneError::Template("repeats must be at least 1".into()));
        }

        let placeholder = Regex::new(r"\{([A-Za-z_][A-Za-z0-9_]*)\}").unwrap();
        let found: HashSet<&str> = placeholder
            .captures_iter(&template)
            .map(|c| c.get(1).unwrap().as_str())
            .collect();
        let mut expected: HashSet<&str> =
            space.tunables().iter().map(|p| p.name.as_str()).collect();
        expected.insert(space.task_feature().name.as_str());
        if found != expected {
            let missing: Vec<_> = expected.difference(&found).copied().collect();
            let unknown: Vec<_> = found.difference(&expected).copied().collect();
            return Err(TuneError::Template(format!(
                "template placeholders must match the schema exactly \
                 (missing: [{}], unknown: [{}])",
                missing.join(", "),
                unknown.join(", ")
            )));
        }
        Ok(Self {
            space,
            template,
            pattern,
            timeout,
            repeats,
        })
    }

    fn render(&self, config: &Configuration, task_value: f64) -> String {
        let mut cmd = self.template.clone();
        for (name, value) in config.iter_named(&self.space) {
            cmd = cmd.replace(&format!("{{{name}}}"), &value.to_string());
        }
        cmd.replace(
            &format!("{{{}}}", self.space.task_feature().name),
            &task_value.to_string(),
        )
    }

    fn run_once(&self, cmd: &str) -> Result<f64, EvalFailure> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(cmd)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| EvalFailure::new(format!("failed to spawn `{cmd}`: {e}")))?;

        // Drain pipes on helper threads so a chatty child cannot deadlock
        // against a full pipe while we poll for exit.
        let mut stdout_pipe = child.stdout.take().unwrap();
        let mut stderr_pipe = child.stderr.take().unwrap();
        let out_thread = std::thread::spawn(move || {
            let mut buf = String::new();
            stdout_pipe.read_to_string(&mut buf).ok();
            buf
        });
        let err_thread = std::thread::spawn(move || {
            let mut buf = String::new();
            stderr_pipe.read_to_string(&mut buf).ok();
            buf
        });

        let deadline = Instant::now() + self.timeout;
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break status,
                Ok(None) => {
                    if Instant::now() >= deadline {
                        child.kill().ok();
                        child.wait().ok();
                        // Grandchildren may still hold the pipes open, so the
                        // reader threads are abandoned rather than joined.
                        return Err(EvalFailure::new(format!(
                            "timed out after {:?}: `{cmd}`",
                            self.timeout
                        )));
                    }
                    std::thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(EvalFailure::new(format!("wait failed: {e}"))),
            }
        };
        let stdout = out_thread.join().unwrap_or_default();
        let stderr = err_thread.join().unwrap_or_default();

        if !status.success() {
            return Err(EvalFailure::new(format!(
                "`{cmd}` exited with {status}; stderr: {}",
                stderr.trim()
            )));
        }
        let captured = self
            .pattern
            .captures(&stdout)
            .or_else(|| self.pattern.captures(&stderr))
            .and_then(|c| c.get(1))
            .ok_or_else(|| {
                EvalFailure::new(format!(
                    "objective pattern `{}` matched nothing in the output of `{cmd}`",
                    self.pattern
                ))
            })?;
        let value: f64 = captured.as_str().parse().map_err(|_| {
            EvalFailure::new(format!("objective `{}` is not a number", captured.as_str()))
        })?;
        if !value.is_finite() {
            return Err(EvalFailure::new(format!("objective {value} is not finite")));
        }
        Ok(value)
    }
}

impl Evaluator for ShellEvaluator {
    fn evaluate(&mut self, config: &Configuration, task_value: f64) -> Result<f64, EvalFailure> {
        let cmd = self.render(config, task_value);
        let runs: Vec<f64> = (0..self.repeats)
            .map(|_| self.run_once(&cmd))
            .collect::<Result<_, _>>()?;
        let used = if runs.len() > 1 {
            &runs[1..]
        } else {
            &runs[..]
        };
        Ok(used.iter().sum::<f64>() / used.len() as f64)
    }
}
