use log::warn;

use super::{PriorDistribution, PriorError, PriorPolicy, PriorRequest};
use crate::llm::{truncate, ChatClient, ChatMessage, ChatRequest, TokenLogprobs};
use crate::memory::{render_reflections, InTrialMemory, Reflection};

pub const ACTION_TEMPLATE: &str = include_str!("../../prompts/action.txt");

/// Log probability given to an index missing from the top tokens.
pub const ABSENT_LOGPROB: f64 = -10.0;
pub const SOFTMAX_TEMPERATURE: f64 = 5.0;

/// Numerically stable softmax of `xs / temperature`.
pub fn softmax(xs: &[f64], temperature: f64) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| ((x - m) / temperature).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Maps the top tokens at the answer position onto 1-based action indices.
/// Index `i` takes the logprob of the token spelling exactly `i` (surrounding
/// whitespace ignored), else [`ABSENT_LOGPROB`].
pub fn logprobs_to_distribution<S: AsRef<str>>(
    top: &[(String, f64)],
    valid_actions: &[S],
) -> Result<PriorDistribution, PriorError> {
    if valid_actions.is_empty() {
        return Err(PriorError::NoActions);
    }
    let lps: Vec<f64> = (1..=valid_actions.len())
        .map(|i| {
            let key = i.to_string();
            top.iter()
                .filter(|(t, _)| t.trim() == key)
                .map(|(_, lp)| *lp)
                .fold(None, |acc: Option<f64>, lp| Some(acc.map_or(lp, |a| a.max(lp))))
                .unwrap_or(ABSENT_LOGPROB)
        })
        .collect();
    PriorDistribution::from_weights(valid_actions, &softmax(&lps, SOFTMAX_TEMPERATURE))
}

/// Position of the first generated token that is a bare integer.
pub fn answer_position(tokens: &[TokenLogprobs]) -> Option<usize> {
    tokens.iter().position(|t| {
        let s = t.token.trim();
        !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit())
    })
}

/// What the action prompt is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptStyle {
    /// In-trial window and cross-trial reflections.
    Full,
    /// Current observation only, no reflections.
    ObservationOnly,
}

/// Renders the action-selection prompt. The in-trial fragment is truncated
/// from the front so the whole prompt fits `budget` characters where
/// possible.
pub fn action_prompt<S: AsRef<str>>(
    template: &str,
    in_trial: &InTrialMemory,
    reflections: &[Reflection],
    valid_actions: &[S],
    budget: usize,
) -> String {
    let listing = valid_actions
        .iter()
        .enumerate()
        .map(|(i, a)| format!("{}. {}", i + 1, a.as_ref()))
        .collect::<Vec<_>>()
        .join("\n");
    let partial = template
        .replace("{CROSS_TRIAL_MEMORY}", &render_reflections(reflections))
        .replace("{VALID_ACTIONS}", &listing);
    let fixed = partial.chars().count() - "{IN_TRIAL_MEMORY}".len();
    let room = budget.saturating_sub(fixed).max(1);
    partial.replace("{IN_TRIAL_MEMORY}", &truncate(&in_trial.render(), room))
}

/// Prior read off a chat model's logprobs at the answer index.
pub struct LlmPrior<C> {
    client: C,
    model: String,
    budget: usize,
    template: String,
    style: PromptStyle,
    temperature: f64,
    queries: u64,
    fallbacks: u64,
}

impl<C: ChatClient> LlmPrior<C> {
    pub fn new(client: C, model: impl Into<String>, budget: usize) -> Self {
        Self {
            client,
            model: model.into(),
            budget,
            template: ACTION_TEMPLATE.to_string(),
            style: PromptStyle::Full,
            temperature: 0.0,
            queries: 0,
            fallbacks: 0,
        }
    }

    pub fn with_template(mut self, template: impl Into<String>) -> Self {
        self.template = template.into();
        self
    }

    pub fn with_style(mut self, style: PromptStyle) -> Self {
        self.style = style;
        self
    }

    /// Temperature sent with each request; 0 unless set.
    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    /// Times a malformed answer or transport failure fell back to uniform.
    pub fn fallbacks(&self) -> u64 {
        self.fallbacks
    }

    pub fn request_for(&self, req: &PriorRequest<'_>) -> ChatRequest {
        let prompt = match self.style {
            PromptStyle::Full => action_prompt(
                &self.template,
                req.in_trial,
                req.reflections,
                req.valid_actions,
                self.budget,
            ),
            PromptStyle::ObservationOnly => action_prompt(
                &self.template,
                &InTrialMemory::current_only(req.in_trial.current.clone()),
                &[],
                req.valid_actions,
                self.budget,
            ),
        };
        ChatRequest {
            model: self.model.clone(),
            messages: vec![ChatMessage::user(prompt)],
            temperature: self.temperature,
            want_logprobs: true,
            top_logprobs: 20,
        }
    }

    fn fallback(&mut self, req: &PriorRequest<'_>, why: &str) -> Result<PriorDistribution, PriorError> {
        warn!("prior falls back to uniform: {why}");
        self.fallbacks += 1;
        PriorDistribution::uniform(req.valid_actions)
    }
}

impl<C: ChatClient> PriorPolicy for LlmPrior<C> {
    fn prior(&mut self, req: &PriorRequest<'_>) -> Result<PriorDistribution, PriorError> {
        if req.valid_actions.is_empty() {
            return Err(PriorError::NoActions);
        }
        let request = self.request_for(req);
        self.queries += 1;
        let resp = match self.client.complete(&request) {
            Ok(r) => r,
            Err(e) if e.is_offline_gap() => return Err(e.into()),
            Err(e) => return self.fallback(req, &e.to_string()),
        };
        let Some(tokens) = resp.token_logprobs.as_deref() else {
            return self.fallback(req, "response carried no logprobs");
        };
        let Some(pos) = answer_position(tokens) else {
            return self.fallback(req, &format!("no integer index in {:?}", resp.content));
        };
        let mut top = tokens[pos].top_logprobs.clone();
        if !top.iter().any(|(t, _)| t == &tokens[pos].token) {
            top.push((tokens[pos].token.clone(), tokens[pos].logprob));
        }
        logprobs_to_distribution(&top, req.valid_actions)
    }

    fn queries(&self) -> u64 {
        self.queries
    }
}
