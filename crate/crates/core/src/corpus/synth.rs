// SPDX-License-Identifier: MIT OR Apache-2.0

//! Couplet synthesis through a text-generation provider.

use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Couplet, Split};
use crate::error::{Error, Result};
use crate::phonology::{final_word, PronunciationLexicon, RhymeVerdict};

/// Environment variable holding the provider API key.
pub const PROVIDER_KEY_ENV: &str = "PLANSITE_PROVIDER_API_KEY";

/// A text-generation endpoint.
pub trait CoupletProvider: Send + Sync {
    /// Return the provider's reply to `prompt`.
    fn complete(&self, prompt: &str) -> Result<String>;
}

/// Offline provider replaying recorded replies in order.
#[derive(Debug)]
pub struct RecordedProvider {
    replies: Vec<String>,
    cursor: Mutex<usize>,
}

#[derive(Deserialize)]
struct RecordedReply {
    response: String,
}

impl RecordedProvider {
    /// Replay `replies` in order.
    pub fn new(replies: Vec<String>) -> Self {
        Self {
            replies,
            cursor: Mutex::new(0),
        }
    }

    /// Load `{"response": ...}` JSON lines.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let replies = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str::<RecordedReply>(l).map(|r| r.response))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self::new(replies))
    }
}

impl CoupletProvider for RecordedProvider {
    fn complete(&self, _prompt: &str) -> Result<String> {
        let mut i = self.cursor.lock().expect("cursor lock");
        let reply = self
            .replies
            .get(*i)
            .cloned()
            .ok_or_else(|| Error::Provider("recorded replies exhausted".into()))?;
        *i += 1;
        Ok(reply)
    }
}

/// Provider speaking the widely implemented chat-completions JSON protocol.
/// Calls are serialized and spaced by `min_interval`.
#[derive(Debug)]
pub struct HttpProvider {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    min_interval: Duration,
    last_call: Mutex<Option<Instant>>,
}

impl HttpProvider {
    /// Configure an endpoint; the key is read from [`PROVIDER_KEY_ENV`].
    pub fn from_env(endpoint: &str, model: &str) -> Self {
        Self {
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            api_key: std::env::var(PROVIDER_KEY_ENV).ok(),
            min_interval: Duration::from_millis(500),
            last_call: Mutex::new(None),
        }
    }
}

impl CoupletProvider for HttpProvider {
    fn complete(&self, prompt: &str) -> Result<String> {
        let mut last = self.last_call.lock().expect("rate-limit lock");
        if let Some(t) = *last {
            let since = t.elapsed();
            if since < self.min_interval {
                std::thread::sleep(self.min_interval - since);
            }
        }
        let body = json!({
            "model": self.model,
            "max_tokens": 200,
            "temperature": 1.0,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut req = ureq::post(&self.endpoint);
        if let Some(k) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {k}"));
        }
        let result = req.send_json(&body);
        *last = Some(Instant::now());
        let mut resp = result.map_err(|e| Error::Provider(e.to_string()))?;
        let v: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::Provider(e.to_string()))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| Error::Provider(format!("unexpected response shape: {v}")))
    }
}

/// What to synthesize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisSpec {
    /// Couplets wanted.
    pub count: usize,
    /// Topics, cycled in order.
    pub topics: Vec<String>,
    /// Generation attempts allowed per wanted couplet.
    pub attempts_per_couplet: usize,
    /// Retries after a provider error before giving up.
    pub provider_retries: usize,
    /// Minimum accepted / attempted ratio.
    pub min_yield: f64,
    /// Fraction of accepted couplets tagged validation (taken from the end).
    pub validation_fraction: f64,
}

impl Default for SynthesisSpec {
    fn default() -> Self {
        Self {
            count: 10,
            topics: vec!["weather".into()],
            attempts_per_couplet: 3,
            provider_retries: 2,
            min_yield: 0.3,
            validation_fraction: 1.0 / 6.0,
        }
    }
}

/// Accepted couplets plus the rejection log.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisReport {
    /// Validated couplets.
    pub couplets: Vec<Couplet>,
    /// `(raw reply, reason)` for each rejected generation.
    pub rejected: Vec<(String, String)>,
    /// Generation attempts made.
    pub attempts: usize,
}

impl SynthesisReport {
    /// Accepted / attempted.
    pub fn yield_rate(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            self.couplets.len() as f64 / self.attempts as f64
        }
    }
}

fn prompt_for(topic: &str) -> String {
    format!(
        "Write one original rhyming couplet about {topic}. \
         Reply with exactly two lines and nothing else; the lines must end in rhyming words."
    )
}

fn parse_reply(reply: &str, id: String, topic: &str) -> std::result::Result<Couplet, String> {
    let lines: Vec<&str> = reply
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect();
    if lines.len() < 2 {
        return Err("fewer than two lines".into());
    }
    let r1 = final_word(lines[0]).map_err(|e| e.to_string())?;
    let r2 = final_word(lines[1]).map_err(|e| e.to_string())?;
    Ok(Couplet {
        id,
        line1: lines[0].to_string(),
        line2: lines[1].to_string(),
        r1,
        r2,
        topic: topic.to_string(),
        split: Split::Train,
    })
}

/// Generate `spec.count` validated couplets, regenerating rejected ones
/// within the attempt budget.
pub fn synthesize_couplets(
    provider: &dyn CoupletProvider,
    spec: &SynthesisSpec,
    lexicon: &PronunciationLexicon,
) -> Result<SynthesisReport> {
    if spec.topics.is_empty() {
        return Err(Error::Dataset("synthesis needs at least one topic".into()));
    }
    let budget = spec.count * spec.attempts_per_couplet.max(1);
    let mut report = SynthesisReport {
        couplets: Vec::new(),
        rejected: Vec::new(),
        attempts: 0,
    };
    while report.couplets.len() < spec.count && report.attempts < budget {
        let topic = &spec.topics[report.couplets.len() % spec.topics.len()];
        let prompt = prompt_for(topic);
        let mut reply = None;
        let mut last_err = None;
        for _ in 0..=spec.provider_retries {
            match provider.complete(&prompt) {
                Ok(r) => {
                    reply = Some(r);
                    break;
                }
                Err(e) => {
                    tracing::warn!(error = %e, "provider call failed");
                    last_err = Some(e);
                }
            }
        }
        let reply = match reply {
            Some(r) => r,
            None => return Err(last_err.expect("at least one attempt")),
        };
        report.attempts += 1;
        let id = format!("s{:04}", report.couplets.len());
        let verdict = parse_reply(&reply, id, topic)
            .and_then(|c| c.validate(lexicon).map(|v| (c, v)));
        match verdict {
            Ok((c, v)) => {
                if v == RhymeVerdict::Unknown {
                    tracing::warn!(id = %c.id, "synthesized couplet has out-of-lexicon rhyme words");
                }
                report.couplets.push(c);
            }
            Err(reason) => {
                tracing::info!(%reason, "rejected synthesized couplet");
                report.rejected.push((reply, reason));
            }
        }
    }
    if report.couplets.len() < spec.count || report.yield_rate() < spec.min_yield {
        return Err(Error::Dataset(format!(
            "synthesis yield too low: {} accepted of {} attempts ({:.0}%), {} wanted",
            report.couplets.len(),
            report.attempts,
            report.yield_rate() * 100.0,
            spec.count
        )));
    }
    let n_val = (report.couplets.len() as f64 * spec.validation_fraction).round() as usize;
    let n = report.couplets.len();
    for c in report.couplets.iter_mut().skip(n - n_val) {
        c.split = Split::Validation;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::OnceLock;

    fn lex() -> &'static PronunciationLexicon {
        static L: OnceLock<PronunciationLexicon> = OnceLock::new();
        L.get_or_init(PronunciationLexicon::bundled)
    }

    fn good(i: usize) -> String {
        let pairs = [("rain", "again"), ("sky", "fly"), ("day", "away")];
        let (a, b) = pairs[i % pairs.len()];
        format!("The weather brought a sudden {a},\nand we were happy once {b}.")
    }

    #[test]
    fn recorded_fixture_yields_requested_count() {
        let replies = (0..10).map(good).collect();
        let p = RecordedProvider::new(replies);
        let spec = SynthesisSpec {
            count: 10,
            ..SynthesisSpec::default()
        };
        let r = synthesize_couplets(&p, &spec, lex()).unwrap();
        assert_eq!(r.couplets.len(), 10);
        assert!(r.couplets.iter().all(|c| c.topic == "weather"));
        assert_eq!(r.couplets.iter().filter(|c| c.split == Split::Validation).count(), 2);
    }

    #[test]
    fn non_rhyming_reply_is_rejected_and_retried() {
        let replies = vec![
            "The storm rolled in with sudden rain,\nand all the garden turned to gold.".to_string(),
            good(0),
        ];
        let p = RecordedProvider::new(replies);
        let spec = SynthesisSpec {
            count: 1,
            ..SynthesisSpec::default()
        };
        let r = synthesize_couplets(&p, &spec, lex()).unwrap();
        assert_eq!(r.couplets.len(), 1);
        assert_eq!(r.rejected.len(), 1);
        assert_eq!(r.attempts, 2);
    }

    #[test]
    fn replay_is_deterministic() {
        let replies: Vec<String> = (0..6).map(good).collect();
        let spec = SynthesisSpec {
            count: 6,
            ..SynthesisSpec::default()
        };
        let a = synthesize_couplets(&RecordedProvider::new(replies.clone()), &spec, lex()).unwrap();
        let b = synthesize_couplets(&RecordedProvider::new(replies), &spec, lex()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn provider_failure_surfaces() {
        let p = RecordedProvider::new(vec![]);
        assert!(matches!(
            synthesize_couplets(&p, &SynthesisSpec::default(), lex()),
            Err(Error::Provider(_))
        ));
    }
}
