//! Chat-style HTTP adapter for a hosted vision-language agent.
//!
//! Request: `{messages: [{role, content_parts: [{type, value}]}], max_tokens, temperature?}`.
//! Response: `{text}`. Temperature is omitted unless configured, leaving the
//! endpoint's default in effect.

use serde::{Deserialize, Serialize};

use super::prompt::{self, PromptTemplates};
use super::{
    AgentError, AgentGateway, Attempt, Diagnosis, ExtractionRequest, NoteDraft, PathProposal,
    Relevance,
};
use crate::corpus::CaseRecord;
use crate::http::{EndpointConfig, JsonClient};
use crate::label::DiagnosisLabel;
use crate::note::ExperienceNote;
use crate::retrieval::RetrievedNote;
use crate::taxonomy::{AnatomicalPath, Taxonomy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteAgentConfig {
    pub model: String,
    #[serde(flatten)]
    pub endpoint: EndpointConfig,
    pub max_tokens: u32,
    pub temperature: Option<f64>,
    /// Upper bound on paths requested in the scoping prompt.
    pub max_paths: usize,
}

impl Default for RemoteAgentConfig {
    fn default() -> Self {
        Self {
            model: "remote-agent".into(),
            endpoint: EndpointConfig::default(),
            max_tokens: 2048,
            temperature: None,
            max_paths: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum ContentPart {
    Text(String),
    ImageRef(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ChatMessage {
    pub role: String,
    pub content_parts: Vec<ContentPart>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
}

pub struct RemoteAgent {
    client: JsonClient,
    config: RemoteAgentConfig,
    prompts: PromptTemplates,
}

impl RemoteAgent {
    pub fn new(config: RemoteAgentConfig, prompts: PromptTemplates) -> Self {
        Self {
            client: JsonClient::new(config.endpoint.clone()),
            config,
            prompts,
        }
    }

    fn request(&self, user: String, images: &[String]) -> ChatRequest {
        let mut parts = vec![ContentPart::Text(user)];
        parts.extend(images.iter().cloned().map(ContentPart::ImageRef));
        ChatRequest {
            messages: vec![
                ChatMessage {
                    role: "system".into(),
                    content_parts: vec![ContentPart::Text(self.prompts.system.trim().into())],
                },
                ChatMessage {
                    role: "user".into(),
                    content_parts: parts,
                },
            ],
            max_tokens: self.config.max_tokens,
            temperature: self.config.temperature,
        }
    }

    fn chat(&self, user: String, images: &[String]) -> Result<String, AgentError> {
        let resp: ChatResponse = self
            .client
            .post_json(&self.request(user, images))
            .map_err(|e| AgentError::Unavailable(e.to_string()))?;
        Ok(resp.text)
    }

    fn notes_block(&self, notes: &[RetrievedNote]) -> String {
        if notes.is_empty() {
            return String::new();
        }
        let mut out = self.prompts.notes_header.trim().to_string();
        out.push_str("\n\n");
        for n in notes {
            out.push_str(&prompt::render_note(&n.note));
            out.push('\n');
        }
        out
    }
}

impl AgentGateway for RemoteAgent {
    fn identity(&self) -> String {
        self.config.model.clone()
    }

    fn diagnose(
        &self,
        case: &CaseRecord,
        notes: &[RetrievedNote],
        _attempt: Attempt,
    ) -> Result<Diagnosis, AgentError> {
        let notes = self.notes_block(notes);
        let user = prompt::render(
            &self.prompts.diagnose,
            &[("history", &case.clinical_history), ("notes", &notes)],
        );
        let raw = self.chat(user, &case.image_refs)?;
        let (rationale, label) = prompt::parse_final_answer(&raw).ok_or_else(|| {
            AgentError::MalformedResponse("no FINAL DIAGNOSIS line in response".into())
        })?;
        Ok(Diagnosis {
            label,
            rationale,
            raw_response: raw,
        })
    }

    fn propose_candidates(&self, case: &CaseRecord) -> Result<Vec<DiagnosisLabel>, AgentError> {
        let user = prompt::render(&self.prompts.candidates, &[("history", &case.clinical_history)]);
        let raw = self.chat(user, &case.image_refs)?;
        prompt::parse_candidates(&raw).map_err(AgentError::MalformedResponse)
    }

    fn select_paths(
        &self,
        case: &CaseRecord,
        taxonomy: &Taxonomy,
    ) -> Result<Vec<PathProposal>, AgentError> {
        let max_paths = self.config.max_paths.to_string();
        let tax = prompt::render_taxonomy(taxonomy);
        let user = prompt::render(
            &self.prompts.paths,
            &[
                ("history", &case.clinical_history),
                ("taxonomy", &tax),
                ("max_paths", &max_paths),
            ],
        );
        let raw = self.chat(user, &case.image_refs)?;
        prompt::parse_paths(&raw).map_err(AgentError::MalformedResponse)
    }

    fn extract_note(
        &self,
        request: &ExtractionRequest<'_>,
        feedback: Option<&str>,
    ) -> Result<NoteDraft, AgentError> {
        let feedback = feedback
            .map(|f| format!("Your previous answer was rejected: {f}. Follow the JSON schema exactly."))
            .unwrap_or_default();
        let user = prompt::render(
            &self.prompts.extract,
            &[
                ("history", &request.case.clinical_history),
                ("wrong", request.wrong.text()),
                ("truth", request.truth.text()),
                ("discussion", &request.case.discussion),
                ("feedback", &feedback),
            ],
        );
        let raw = self.chat(user, &request.case.image_refs)?;
        prompt::parse_note_draft(&raw).map_err(AgentError::MalformedResponse)
    }

    fn score_relevance(
        &self,
        case: &CaseRecord,
        note: &ExperienceNote,
        selected: &[AnatomicalPath],
    ) -> Relevance {
        let paths = selected
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(", ");
        let note_text = prompt::render_note(note);
        let user = prompt::render(
            &self.prompts.relevance,
            &[
                ("history", &case.clinical_history),
                ("paths", &paths),
                ("note", &note_text),
            ],
        );
        match self.chat(user, &[]) {
            Ok(raw) => prompt::parse_relevance(&raw),
            Err(err) => {
                tracing::warn!(case = %case.id, error = %err, "relevance scoring failed");
                Relevance::Unknown
            }
        }
    }

    fn judge_match(&self, case: &CaseRecord, predicted: &DiagnosisLabel) -> Result<bool, AgentError> {
        if predicted.matches(&case.ground_truth) {
            return Ok(true);
        }
        let user = prompt::render(
            &self.prompts.judge,
            &[("truth", case.ground_truth.text()), ("prediction", predicted.text())],
        );
        let raw = self.chat(user, &[])?;
        prompt::parse_verdict(&raw)
            .ok_or_else(|| AgentError::MalformedResponse("no VERDICT line in response".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_wire_format() {
        let agent = RemoteAgent::new(RemoteAgentConfig::default(), PromptTemplates::default());
        let req = agent.request("hello".into(), &["img/1.png".into()]);
        let json = serde_json::to_value(&req).unwrap();
        assert_eq!(json["messages"][1]["role"], "user");
        assert_eq!(
            json["messages"][1]["content_parts"][1],
            serde_json::json!({"type": "image_ref", "value": "img/1.png"})
        );
        assert_eq!(json["messages"][1]["content_parts"][0]["type"], "text");
        assert_eq!(json["max_tokens"], 2048);
        assert!(json.get("temperature").is_none());
    }
}
