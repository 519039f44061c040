use std::io::{BufRead, Write};
use std::sync::Mutex;

use super::{Dependencies, Guard, GuardError, Verdict};
use crate::state::Context;

const PREVIEW_CHARS: usize = 500;

struct Channel {
    input: Box<dyn BufRead + Send>,
    output: Box<dyn Write + Send>,
}

/// Asks a person to approve the artifact.
///
/// Answers are matched case-insensitively: `y` approves, `n` rejects, and
/// anything else is a rejection carrying the text as feedback.
pub struct HumanGuard {
    prompt: String,
    channel: Mutex<Channel>,
}

impl HumanGuard {
    pub const DEFAULT_PROMPT: &'static str = "Approve this artifact?";

    pub fn new<R, W>(prompt: impl Into<String>, input: R, output: W) -> Self
    where
        R: BufRead + Send + 'static,
        W: Write + Send + 'static,
    {
        Self {
            prompt: prompt.into(),
            channel: Mutex::new(Channel {
                input: Box::new(input),
                output: Box::new(output),
            }),
        }
    }

    pub fn stdio(prompt: impl Into<String>) -> Self {
        Self::new(prompt, std::io::BufReader::new(std::io::stdin()), std::io::stdout())
    }
}

fn preview(content: &str) -> String {
    match content.char_indices().nth(PREVIEW_CHARS) {
        Some((cut, _)) => format!("{}...", &content[..cut]),
        None => content.to_string(),
    }
}

impl Guard for HumanGuard {
    fn type_name(&self) -> &str {
        "human"
    }

    fn is_replayable(&self) -> bool {
        false
    }

    fn evaluate(&self, artifact: &str, _ctx: &Context, _deps: &Dependencies) -> Result<Verdict, GuardError> {
        let mut channel = self.channel.lock().expect("human channel lock");
        let banner = "=".repeat(20);
        write!(
            channel.output,
            "\n{banner} HUMAN REVIEW {banner}\n\n{}\n\n{} [y/n/feedback]: ",
            preview(artifact),
            self.prompt
        )
        .and_then(|_| channel.output.flush())
        .map_err(|_| GuardError::ChannelClosed)?;

        let mut line = String::new();
        let n = channel
            .input
            .read_line(&mut line)
            .map_err(|_| GuardError::ChannelClosed)?;
        if n == 0 {
            return Err(GuardError::ChannelClosed);
        }
        let answer = line.trim();
        Ok(if answer.eq_ignore_ascii_case("y") {
            Verdict::pass()
        } else if answer.eq_ignore_ascii_case("n") {
            Verdict::fail("Human rejected artifact")
        } else {
            Verdict::fail(format!("Human feedback: {answer}"))
        })
    }
}
