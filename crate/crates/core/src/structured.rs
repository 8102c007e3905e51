//! Schema-checked model calls with a single repair re-prompt.

use serde_json::Value;

use crate::gateway::{extract_json, ChatBackend, ChatRequest, GatewayError};

/// Parsed value of one model call plus what was sent and received.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput<T> {
    pub value: T,
    /// User-facing prompt text (all text parts of the request).
    pub prompt: String,
    /// Model text that produced `value`.
    pub raw_response: String,
    pub warnings: Vec<String>,
    /// Whether the repair re-prompt was needed.
    pub reprompted: bool,
}

impl<T> StageOutput<T> {
    pub fn map<U>(self, f: impl FnOnce(T) -> U) -> StageOutput<U> {
        StageOutput {
            value: f(self.value),
            prompt: self.prompt,
            raw_response: self.raw_response,
            warnings: self.warnings,
            reprompted: self.reprompted,
        }
    }
}

#[derive(Debug)]
pub(crate) enum AskError {
    Gateway(GatewayError),
    /// Still unusable after the repair re-prompt.
    Malformed(String),
}

/// Sends `request`, extracts JSON and runs `parse`. On an extraction or parse
/// failure the request is repeated once with the schema and the error appended
/// to the system prompt. The user parts stay unchanged, so the mock fixture
/// key is the same for both attempts.
/// Parsed value, raw response text and parse warnings; `Err` carries the
/// reason a reply could not be parsed.
type Parsed<T> = Result<(T, String, Vec<String>), String>;

pub(crate) fn ask_structured<T>(
    backend: &dyn ChatBackend,
    request: ChatRequest,
    schema: &str,
    parse: impl Fn(&Value, &mut Vec<String>) -> Result<T, String>,
) -> Result<StageOutput<T>, AskError> {
    let prompt = request.user_text();
    let attempt = |req: &ChatRequest| -> Result<Parsed<T>, AskError> {
        let response = backend.complete(req).map_err(AskError::Gateway)?;
        let value = match extract_json(&response.text) {
            Ok(v) => v,
            Err(e) => return Ok(Err(e.to_string())),
        };
        let mut warnings = Vec::new();
        Ok(parse(&value, &mut warnings).map(|v| (v, response.text, warnings)))
    };
    let first_error = match attempt(&request)? {
        Ok((value, raw_response, warnings)) => {
            return Ok(StageOutput {
                value,
                prompt,
                raw_response,
                warnings,
                reprompted: false,
            })
        }
        Err(e) => e,
    };
    log::warn!(
        "{}: unusable reply ({first_error}); re-prompting once",
        request.response_schema_id
    );
    let mut repair = request;
    repair.system_prompt = format!(
        "{}\n\nYour previous reply could not be used: {first_error}.\nReply again with only a JSON object matching this schema:\n{schema}",
        repair.system_prompt.trim_end()
    );
    match attempt(&repair)? {
        Ok((value, raw_response, mut warnings)) => {
            warnings.insert(0, format!("re-prompted after: {first_error}"));
            Ok(StageOutput {
                value,
                prompt,
                raw_response,
                warnings,
                reprompted: true,
            })
        }
        Err(e) => Err(AskError::Malformed(e)),
    }
}

/// Required non-empty string field.
pub(crate) fn required_str<'a>(v: &'a Value, field: &str) -> Result<&'a str, String> {
    match v.get(field) {
        Some(Value::String(s)) if !s.trim().is_empty() => Ok(s.trim()),
        Some(Value::String(_)) => Err(format!("field {field:?} is empty")),
        Some(_) => Err(format!("field {field:?} is not a string")),
        None => Err(format!("missing field {field:?}")),
    }
}

/// Optional string field; empty when absent or null.
pub(crate) fn optional_str<'a>(v: &'a Value, field: &str) -> Result<&'a str, String> {
    match v.get(field) {
        None | Some(Value::Null) => Ok(""),
        Some(Value::String(s)) => Ok(s.trim()),
        Some(_) => Err(format!("field {field:?} is not a string")),
    }
}

/// A list of strings, also accepting a single comma-separated string.
pub(crate) fn string_list(v: &Value, field: &str) -> Result<Vec<String>, String> {
    let items: Vec<String> = match v.get(field) {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::String(s)) => s.split([',', ';']).map(str::to_string).collect(),
        Some(Value::Array(a)) => a
            .iter()
            .map(|x| {
                x.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| format!("field {field:?} must contain strings"))
            })
            .collect::<Result<_, _>>()?,
        Some(_) => return Err(format!("field {field:?} is not a list")),
    };
    Ok(items
        .into_iter()
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect())
}
