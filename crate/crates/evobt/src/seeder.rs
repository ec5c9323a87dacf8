//! Seeding the initial population from a chat-completion provider.
//!
//! A prompt bundle carries three parts: a system message (role, output
//! grammar, skill list, constraints), environment information (a textual
//! descriptor generated from the scenario, plus an optional image file
//! forwarded unmodified), and the user's task command. Replies run
//! through extraction, parsing, and contextual validation; invalid ones
//! trigger regeneration until enough candidates exist or the attempt cap
//! is hit. A replay provider serves canned replies from a directory so
//! the whole stage runs offline and deterministically; the HTTP provider
//! speaks the chat-completions wire shape.
//!
//! The system message never embeds example trees: desired trees are
//! treated as unknown in advance, only the format and primitives are
//! described.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bt::{BTNode, ParamDomain, SkillRegistry};
use crate::sim::{CubeSource, Scenario};
use crate::text::{extract_tree, parse, validate, ValidationReport};

/// The three-part prompt handed to a provider.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub system_message: String,
    pub environment: EnvironmentInfo,
    pub task_command: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentInfo {
    pub descriptor: String,
    /// Opaque file reference forwarded to multimodal endpoints.
    pub image_ref: Option<PathBuf>,
}

/// Connection settings for the HTTP provider. The API key is read from
/// the named environment variable, never stored in config files.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub endpoint_url: String,
    pub model_name: String,
    pub temperature: f64,
    pub top_p: f64,
    pub api_key_env: String,
    pub timeout_s: u64,
    pub max_retries: u32,
}

impl Default for ProviderConfig {
    fn default() -> ProviderConfig {
        ProviderConfig {
            endpoint_url: "https://api.openai.com/v1/chat/completions".to_string(),
            model_name: "gpt-4o".to_string(),
            temperature: 1.2,
            top_p: 0.95,
            api_key_env: "EVOBT_API_KEY".to_string(),
            timeout_s: 60,
            max_retries: 2,
        }
    }
}

#[derive(Debug, Error)]
pub enum SeederError {
    #[error("task_text must not be empty")]
    EmptyTask,
}

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("provider unreachable: {0}")]
    Unreachable(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("replay script exhausted after {served} replies")]
    ScriptExhausted { served: usize },
    #[error("replay script unreadable: {0}")]
    Script(String),
}

/// One seeding attempt as persisted to the JSON Lines log.
#[derive(Debug, Clone, Serialize)]
pub struct AttemptRecord {
    pub attempt: usize,
    pub latency_ms: u64,
    pub raw_reply: String,
    pub extracted: Option<String>,
    pub error: Option<String>,
    pub validation: Option<ValidationReport>,
    /// Contextually valid: extracted, parsed, zero error violations.
    pub valid: bool,
    /// Filled in by the downstream fitness gate, when one runs.
    pub gate_accepted: Option<bool>,
    pub gate_mean_j: Option<f64>,
}

/// Append-only record of a seeding session.
#[derive(Debug, Clone, Default, Serialize)]
pub struct SeedRequestLog {
    pub attempts: Vec<AttemptRecord>,
}

impl SeedRequestLog {
    pub fn rejected_count(&self) -> usize {
        self.attempts.iter().filter(|a| !a.valid).count()
    }

    /// One attempt per line, JSON Lines.
    pub fn write_jsonl(&self, path: &Path) -> std::io::Result<()> {
        let mut out = String::new();
        for attempt in &self.attempts {
            out.push_str(&serde_json::to_string(attempt).expect("attempt serializes"));
            out.push('\n');
        }
        fs::write(path, out)
    }
}

/// Anything that can turn a prompt bundle into a reply.
pub trait ChatProvider {
    fn complete(&mut self, bundle: &PromptBundle) -> Result<String, ProviderError>;
}

/// Renders the deterministic prompt bundle for a scenario, registry and
/// task. The system message teaches the output grammar and lists every
/// registered primitive exactly once; no example trees are included.
pub fn build_prompt(
    scenario: &Scenario,
    registry: &SkillRegistry,
    task_text: &str,
    image_ref: Option<&Path>,
) -> Result<PromptBundle, SeederError> {
    if task_text.trim().is_empty() {
        return Err(SeederError::EmptyTask);
    }
    let mut msg = String::new();
    msg.push_str(
        "You write control policies for a mobile manipulator robot as behavior trees.\n\
         Reply with exactly one behavior tree as a single s-expression and no other text.\n\n\
         Output grammar:\n\
           tree := \"(\" \"seq\" tree* \")\" | \"(\" \"fb\" tree* \")\" | \"(\" \"par\" INT tree* \")\"\n\
                 | \"(\" \"act\" NAME [TABLE] \")\" | \"(\" \"cond\" NAME [TABLE] \")\"\n\
         seq succeeds when all children succeed; fb succeeds when any child succeeds;\n\
         par INT succeeds when at least INT children succeed.\n\n",
    );
    msg.push_str("The robot's action skills (NAME, with TABLE where shown):\n");
    for (name, line) in action_descriptions() {
        if registry.action_domain(name).is_some() {
            writeln!(msg, "  {line}").expect("write to string");
        }
    }
    msg.push_str("The robot's condition checks:\n");
    for (name, line) in condition_descriptions() {
        if registry.condition_domain(name).is_some() {
            writeln!(msg, "  {line}").expect("write to string");
        }
    }
    msg.push_str(
        "\nConstraints: use only the skills and checks above; drives only succeed after \
         localizing with the arm retracted; grasping needs the camera lowered at the cube's \
         table; retract the arm again before driving on. Keep the tree small.\n",
    );
    let descriptor = environment_descriptor(scenario);
    Ok(PromptBundle {
        system_message: msg,
        environment: EnvironmentInfo { descriptor, image_ref: image_ref.map(Path::to_path_buf) },
        task_command: task_text.to_string(),
    })
}

fn action_descriptions() -> [(&'static str, &'static str); 7] {
    [
        ("localise", "localise -- establish localization (camera must be raised)"),
        ("head_up", "head_up -- raise the camera"),
        ("head_down", "head_down -- lower the camera"),
        ("tuck", "tuck -- retract the arm"),
        ("pick", "pick -- grasp the cube from the table the robot is at"),
        ("place", "place -- put the held cube onto the table the robot is at"),
        ("move_to", "move_to TABLE -- drive to the named table"),
    ]
}

fn condition_descriptions() -> [(&'static str, &'static str); 3] {
    [
        ("have_cube", "have_cube -- is the cube in the gripper?"),
        ("cube_placed", "cube_placed TABLE -- is the cube on the named table?"),
        ("task_done", "task_done -- is the cube on the target table?"),
    ]
}

fn environment_descriptor(scenario: &Scenario) -> String {
    let mut text = String::new();
    writeln!(text, "Top-down view of an office. Tables and their coordinates in meters:").unwrap();
    for (table, point) in &scenario.geometry {
        writeln!(text, "  {table} at {point}").unwrap();
    }
    writeln!(
        text,
        "The robot starts at {}, not localized, camera raised, arm retracted, gripper empty.",
        scenario.robot_start
    )
    .unwrap();
    match &scenario.cube_source {
        CubeSource::Fixed(table) => writeln!(text, "The cube sits on {table}.").unwrap(),
        CubeSource::Uniform(tables) => {
            writeln!(text, "The cube sits on one of {}; which one is uncertain.", tables.join(", ")).unwrap()
        }
    }
    writeln!(text, "The target is {}.", scenario.goal_table).unwrap();
    text
}

/// Requests completions until `n` contextually valid trees are gathered
/// or `max_attempts` replies have been consumed; every attempt lands in
/// the log. A provider running out of scripted replies ends the loop
/// with partial results; unreachable/auth failures propagate.
pub fn generate_candidates(
    provider: &mut dyn ChatProvider,
    bundle: &PromptBundle,
    n: usize,
    registry: &SkillRegistry,
    max_attempts: usize,
) -> Result<(Vec<BTNode>, SeedRequestLog), ProviderError> {
    let mut log = SeedRequestLog::default();
    let mut trees = Vec::new();
    while trees.len() < n && log.attempts.len() < max_attempts {
        let started = Instant::now();
        let reply = match provider.complete(bundle) {
            Ok(reply) => reply,
            Err(ProviderError::ScriptExhausted { .. }) => break,
            Err(err) => return Err(err),
        };
        let latency_ms = started.elapsed().as_millis() as u64;
        let mut record = AttemptRecord {
            attempt: log.attempts.len() + 1,
            latency_ms,
            raw_reply: reply.clone(),
            extracted: None,
            error: None,
            validation: None,
            valid: false,
            gate_accepted: None,
            gate_mean_j: None,
        };
        match extract_tree(&reply).and_then(|text| parse(&text).map(|tree| (text, tree))) {
            Err(err) => record.error = Some(err.to_string()),
            Ok((text, tree)) => {
                record.extracted = Some(text);
                let report = validate(&tree, registry);
                record.valid = report.is_valid();
                record.validation = Some(report);
                if record.valid {
                    trees.push(tree);
                }
            }
        }
        log.attempts.push(record);
    }
    Ok((trees, log))
}

/// Serves replies from numbered files in a directory, in lexicographic
/// filename order. Running past the end is an error, not a cycle.
pub struct ReplayProvider {
    replies: Vec<String>,
    cursor: usize,
}

impl ReplayProvider {
    pub fn remaining(&self) -> usize {
        self.replies.len() - self.cursor
    }

    pub fn len(&self) -> usize {
        self.replies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.replies.is_empty()
    }
}

pub fn replay_provider(script_dir: &Path) -> Result<ReplayProvider, ProviderError> {
    let mut files: Vec<PathBuf> = fs::read_dir(script_dir)
        .map_err(|e| ProviderError::Script(format!("{}: {e}", script_dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    let mut replies = Vec::with_capacity(files.len());
    for file in files {
        let text = fs::read_to_string(&file)
            .map_err(|e| ProviderError::Script(format!("{}: {e}", file.display())))?;
        replies.push(text);
    }
    Ok(ReplayProvider { replies, cursor: 0 })
}

impl ChatProvider for ReplayProvider {
    fn complete(&mut self, _bundle: &PromptBundle) -> Result<String, ProviderError> {
        match self.replies.get(self.cursor) {
            Some(reply) => {
                self.cursor += 1;
                Ok(reply.clone())
            }
            None => Err(ProviderError::ScriptExhausted { served: self.cursor }),
        }
    }
}

/// Chat-completions HTTP client: system + user messages, the scenario
/// image attached as a data URL when present, temperature and top_p from
/// the provider config. Retries transient failures before giving up.
pub struct HttpProvider {
    config: ProviderConfig,
    api_key: String,
    client: reqwest::blocking::Client,
}

impl HttpProvider {
    pub fn new(config: ProviderConfig) -> Result<HttpProvider, ProviderError> {
        let api_key = std::env::var(&config.api_key_env).map_err(|_| {
            ProviderError::Auth(format!("environment variable {} is not set", config.api_key_env))
        })?;
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(config.timeout_s))
            .build()
            .map_err(|e| ProviderError::Unreachable(e.to_string()))?;
        Ok(HttpProvider { config, api_key, client })
    }

    fn user_content(&self, bundle: &PromptBundle) -> Result<serde_json::Value, ProviderError> {
        let text = format!("{}\n{}", bundle.environment.descriptor, bundle.task_command);
        match &bundle.environment.image_ref {
            None => Ok(serde_json::Value::String(text)),
            Some(path) => {
                use base64::Engine as _;
                let bytes = fs::read(path)
                    .map_err(|e| ProviderError::Unreachable(format!("image {}: {e}", path.display())))?;
                let encoded = base64::engine::general_purpose::STANDARD.encode(bytes);
                Ok(serde_json::json!([
                    { "type": "text", "text": text },
                    { "type": "image_url",
                      "image_url": { "url": format!("data:image/png;base64,{encoded}") } },
                ]))
            }
        }
    }
}

impl ChatProvider for HttpProvider {
    fn complete(&mut self, bundle: &PromptBundle) -> Result<String, ProviderError> {
        let body = serde_json::json!({
            "model": self.config.model_name,
            "temperature": self.config.temperature,
            "top_p": self.config.top_p,
            "messages": [
                { "role": "system", "content": bundle.system_message },
                { "role": "user", "content": self.user_content(bundle)? },
            ],
        });
        let mut last_error = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                std::thread::sleep(std::time::Duration::from_millis(200 << attempt));
            }
            let response = self
                .client
                .post(&self.config.endpoint_url)
                .bearer_auth(&self.api_key)
                .json(&body)
                .send();
            match response {
                Err(e) => last_error = e.to_string(),
                Ok(resp) => {
                    let status = resp.status();
                    if status.as_u16() == 401 || status.as_u16() == 403 {
                        return Err(ProviderError::Auth(format!("endpoint returned {status}")));
                    }
                    if status.is_server_error() || status.as_u16() == 429 {
                        last_error = format!("endpoint returned {status}");
                        continue;
                    }
                    if !status.is_success() {
                        return Err(ProviderError::Unreachable(format!("endpoint returned {status}")));
                    }
                    let value: serde_json::Value =
                        resp.json().map_err(|e| ProviderError::Unreachable(e.to_string()))?;
                    let content = value
                        .pointer("/choices/0/message/content")
                        .and_then(|v| v.as_str())
                        .ok_or_else(|| {
                            ProviderError::Unreachable("reply has no choices[0].message.content".to_string())
                        })?;
                    return Ok(content.to_string());
                }
            }
        }
        Err(ProviderError::Unreachable(last_error))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::serialize;
    use std::io::Write as _;

    fn scenario() -> Scenario {
        Scenario::scenario1()
    }

    fn registry() -> SkillRegistry {
        scenario().registry()
    }

    fn count_ident(haystack: &str, ident: &str) -> usize {
        let bytes = haystack.as_bytes();
        let is_word = |b: u8| b.is_ascii_alphanumeric() || b == b'_';
        let mut count = 0;
        let mut from = 0;
        while let Some(at) = haystack[from..].find(ident) {
            let start = from + at;
            let end = start + ident.len();
            let left_ok = start == 0 || !is_word(bytes[start - 1]);
            let right_ok = end == bytes.len() || !is_word(bytes[end]);
            if left_ok && right_ok {
                count += 1;
            }
            from = start + ident.len().max(1);
        }
        count
    }

    #[test]
    fn system_message_lists_every_identifier_exactly_once() {
        let scenario = scenario();
        let registry = registry();
        let bundle = build_prompt(
            &scenario,
            &registry,
            "Take the cube to the black table and place it there.",
            None,
        )
        .unwrap();
        let identifiers = [
            "localise", "head_up", "head_down", "tuck", "pick", "place", "move_to",
            "have_cube", "cube_placed", "task_done",
        ];
        for ident in identifiers {
            assert_eq!(
                count_ident(&bundle.system_message, ident),
                1,
                "identifier {ident} should appear exactly once in:\n{}",
                bundle.system_message
            );
        }
        // no example trees: s-expressions with tree heads never appear
        assert!(extract_tree(&bundle.system_message).is_err());
    }

    #[test]
    fn build_prompt_is_deterministic() {
        let scenario = scenario();
        let registry = registry();
        let a = build_prompt(&scenario, &registry, "task", None).unwrap();
        let b = build_prompt(&scenario, &registry, "task", None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_task_is_rejected() {
        assert!(matches!(
            build_prompt(&scenario(), &registry(), "  \n", None),
            Err(SeederError::EmptyTask)
        ));
    }

    #[test]
    fn descriptor_mentions_uncertainty_in_scenario2() {
        let bundle = build_prompt(&Scenario::scenario2(), &registry(), "bring it", None).unwrap();
        assert!(bundle.environment.descriptor.contains("uncertain"));
    }

    fn write_script(dir: &Path, replies: &[&str]) {
        for (i, reply) in replies.iter().enumerate() {
            let mut f = std::fs::File::create(dir.join(format!("{:03}.txt", i + 1))).unwrap();
            f.write_all(reply.as_bytes()).unwrap();
        }
    }

    #[test]
    fn replay_provider_serves_in_order_then_errors() {
        let dir = tempfile::tempdir().unwrap();
        write_script(dir.path(), &["one", "two", "three"]);
        let mut provider = replay_provider(dir.path()).unwrap();
        assert_eq!(provider.len(), 3);
        let bundle = build_prompt(&scenario(), &registry(), "t", None).unwrap();
        assert_eq!(provider.complete(&bundle).unwrap(), "one");
        assert_eq!(provider.complete(&bundle).unwrap(), "two");
        assert_eq!(provider.complete(&bundle).unwrap(), "three");
        assert!(matches!(
            provider.complete(&bundle),
            Err(ProviderError::ScriptExhausted { served: 3 })
        ));
    }

    #[test]
    fn replay_provider_is_deterministic_across_sessions() {
        let dir = tempfile::tempdir().unwrap();
        write_script(dir.path(), &["(act pick)", "(act place)"]);
        let bundle = build_prompt(&scenario(), &registry(), "t", None).unwrap();
        let collect = || {
            let mut p = replay_provider(dir.path()).unwrap();
            let mut out = Vec::new();
            while let Ok(reply) = p.complete(&bundle) {
                out.push(reply);
            }
            out
        };
        assert_eq!(collect(), collect());
    }

    #[test]
    fn generate_candidates_collects_all_valid_replies() {
        let dir = tempfile::tempdir().unwrap();
        let replies: Vec<String> = (0..30).map(|_| "(seq (act localise) (act pick))".to_string()).collect();
        let refs: Vec<&str> = replies.iter().map(String::as_str).collect();
        write_script(dir.path(), &refs);
        let mut provider = replay_provider(dir.path()).unwrap();
        let bundle = build_prompt(&scenario(), &registry(), "t", None).unwrap();
        let (trees, log) = generate_candidates(&mut provider, &bundle, 30, &registry(), 150).unwrap();
        assert_eq!(trees.len(), 30);
        assert_eq!(log.attempts.len(), 30);
        assert!(log.attempts.iter().all(|a| a.valid));
    }

    #[test]
    fn generate_candidates_regenerates_past_invalid_replies() {
        let dir = tempfile::tempdir().unwrap();
        write_script(dir.path(), &["(act fly)", "not a tree at all", "(act pick)"]);
        let mut provider = replay_provider(dir.path()).unwrap();
        let bundle = build_prompt(&scenario(), &registry(), "t", None).unwrap();
        let (trees, log) = generate_candidates(&mut provider, &bundle, 1, &registry(), 15).unwrap();
        assert_eq!(trees.len(), 1);
        assert_eq!(serialize(&trees[0]), "(act pick)");
        assert_eq!(log.attempts.len(), 3);
        assert_eq!(log.rejected_count(), 2);
    }

    #[test]
    fn generate_candidates_filters_unregistered_skills() {
        let dir = tempfile::tempdir().unwrap();
        let mut replies = Vec::new();
        for i in 0..20 {
            if i % 5 == 0 {
                replies.push("(seq (act fly) (act pick))".to_string());
            } else {
                replies.push(format!("(seq (act localise) (act move_to table{}))", i % 3 + 1));
            }
        }
        let refs: Vec<&str> = replies.iter().map(String::as_str).collect();
        write_script(dir.path(), &refs);
        let mut provider = replay_provider(dir.path()).unwrap();
        let bundle = build_prompt(&scenario(), &registry(), "t", None).unwrap();
        let (trees, log) = generate_candidates(&mut provider, &bundle, 10, &registry(), 20).unwrap();
        assert_eq!(trees.len(), 10);
        assert!(log.rejected_count() >= 2);
        for tree in &trees {
            assert!(validate(tree, &registry()).is_valid());
        }
    }

    #[test]
    fn generate_candidates_returns_partials_on_script_exhaustion() {
        let dir = tempfile::tempdir().unwrap();
        write_script(dir.path(), &["(act pick)", "(act fly)"]);
        let mut provider = replay_provider(dir.path()).unwrap();
        let bundle = build_prompt(&scenario(), &registry(), "t", None).unwrap();
        let (trees, log) = generate_candidates(&mut provider, &bundle, 5, &registry(), 50).unwrap();
        assert_eq!(trees.len(), 1);
        assert_eq!(log.attempts.len(), 2);
    }

    #[test]
    fn http_provider_requires_the_api_key_env() {
        let mut cfg = ProviderConfig::default();
        cfg.api_key_env = "EVOBT_TEST_KEY_THAT_DOES_NOT_EXIST".to_string();
        assert!(matches!(HttpProvider::new(cfg), Err(ProviderError::Auth(_))));
    }

    #[test]
    fn http_provider_round_trips_a_local_endpoint() {
        use std::io::{BufRead, BufReader, Read};
        use std::net::TcpListener;

        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let port = listener.local_addr().unwrap().port();
        let server = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut content_length = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let lower = line.to_ascii_lowercase();
                if let Some(rest) = lower.strip_prefix("content-length:") {
                    content_length = rest.trim().parse().unwrap();
                }
                if line == "\r\n" {
                    break;
                }
            }
            let mut body = vec![0u8; content_length];
            reader.read_exact(&mut body).unwrap();
            let request: serde_json::Value = serde_json::from_slice(&body).unwrap();
            assert_eq!(request["temperature"], 1.2);
            assert_eq!(request["messages"][0]["role"], "system");
            let reply = serde_json::json!({
                "choices": [ { "message": { "role": "assistant", "content": "(act pick)" } } ]
            })
            .to_string();
            let response = format!(
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
                reply.len(),
                reply
            );
            use std::io::Write as _;
            stream.write_all(response.as_bytes()).unwrap();
        });

        std::env::set_var("EVOBT_LOCAL_TEST_KEY", "k");
        let mut cfg = ProviderConfig::default();
        cfg.endpoint_url = format!("http://127.0.0.1:{port}/v1/chat/completions");
        cfg.api_key_env = "EVOBT_LOCAL_TEST_KEY".to_string();
        cfg.max_retries = 0;
        let mut provider = HttpProvider::new(cfg).unwrap();
        let bundle = build_prompt(&scenario(), &registry(), "t", None).unwrap();
        let reply = provider.complete(&bundle).unwrap();
        assert_eq!(reply, "(act pick)");
        server.join().unwrap();
    }
}
