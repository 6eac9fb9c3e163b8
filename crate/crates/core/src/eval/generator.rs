use crate::llm::{ChatRequest, GatewayError, Message, Sampling};
use crate::pipeline::{EvalExample, ModelHandle};

/// What a generator is asked for.
#[derive(Debug, Clone, Copy)]
pub struct GenerationRequest<'a> {
    pub example: &'a EvalExample,
    pub messages: &'a [Message],
    pub sampling: Sampling,
    pub round: u32,
}

/// Anything that produces completions for a prompt: a chat model, a fixed
/// answer key, a scripted stand-in.
pub trait Generator: Send + Sync {
    fn model_id(&self) -> &str;

    /// Returns `sampling.n` completions. A refusal error fails every
    /// sample; other errors are infrastructure failures.
    fn generate(&self, req: &GenerationRequest) -> Result<Vec<String>, GatewayError>;
}

/// Answers with each example's ground-truth program.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleGenerator;

impl Generator for OracleGenerator {
    fn model_id(&self) -> &str {
        "oracle"
    }

    fn generate(&self, req: &GenerationRequest) -> Result<Vec<String>, GatewayError> {
        let answer = format!("```python\n{}```\n", req.example.assemble());
        Ok(vec![answer; req.sampling.n as usize])
    }
}

/// Answers with an empty string.
#[derive(Debug, Clone, Copy, Default)]
pub struct EmptyGenerator;

impl Generator for EmptyGenerator {
    fn model_id(&self) -> &str {
        "empty"
    }

    fn generate(&self, req: &GenerationRequest) -> Result<Vec<String>, GatewayError> {
        Ok(vec![String::new(); req.sampling.n as usize])
    }
}

/// A chat model behind the gateway.
#[derive(Debug, Clone)]
pub struct ChatGenerator {
    pub handle: ModelHandle,
}

impl ChatGenerator {
    pub fn new(handle: ModelHandle) -> Self {
        ChatGenerator { handle }
    }
}

impl Generator for ChatGenerator {
    fn model_id(&self) -> &str {
        &self.handle.model_id
    }

    fn generate(&self, req: &GenerationRequest) -> Result<Vec<String>, GatewayError> {
        let request = ChatRequest::new(self.handle.model_id.clone(), req.messages.to_vec(), req.sampling);
        let mut samples = self.handle.client.complete(&request)?.samples;
        samples.resize(req.sampling.n as usize, String::new());
        Ok(samples)
    }
}

type AnswerFn = dyn Fn(&EvalExample, &[Message], u32, usize) -> String + Send + Sync;

/// Generator defined by a closure of (example, messages, round, sample
/// index).
pub struct FnGenerator {
    id: String,
    answer: Box<AnswerFn>,
}

impl FnGenerator {
    pub fn new(
        id: impl Into<String>,
        answer: impl Fn(&EvalExample, &[Message], u32, usize) -> String + Send + Sync + 'static,
    ) -> Self {
        FnGenerator { id: id.into(), answer: Box::new(answer) }
    }
}

impl Generator for FnGenerator {
    fn model_id(&self) -> &str {
        &self.id
    }

    fn generate(&self, req: &GenerationRequest) -> Result<Vec<String>, GatewayError> {
        Ok((0..req.sampling.n as usize).map(|i| (self.answer)(req.example, req.messages, req.round, i)).collect())
    }
}
