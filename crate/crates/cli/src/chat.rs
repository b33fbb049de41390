//! The interactive loop. Knowledge for each turn is retrieved with the latest
//! user utterance as the query.

use std::fmt::Write as _;
use std::io::{BufRead, IsTerminal, Write};

use kgd_core::decode::{self, AlphaMode, Generation};

use crate::{ChatArgs, CliResult, Loaded};

pub const HELP: &str = "commands:
  /alpha x     fix the grounding rate to x in [0, 1]
  /alpha auto  let the model predict it
  /show        ranked knowledge and bucket of the last turn
  /reset       forget the conversation
  /quit        leave
anything else is a message";

#[derive(Debug, Clone, PartialEq)]
pub enum Reply {
    Text(String),
    Quit,
}

/// What the last turn saw.
#[derive(Debug, Clone)]
pub struct Turn {
    pub candidates: Vec<String>,
    pub context_utterances: usize,
    pub generation: Option<Generation>,
}

pub struct Session {
    pub loaded: Loaded,
    pub alpha: Option<f64>,
    pub context: Vec<String>,
    pub last: Option<Turn>,
}

impl Session {
    pub fn open(a: &ChatArgs) -> CliResult<Self> {
        let loaded = Loaded::open(&a.decode)?;
        loaded.alpha_mode(a.alpha)?;
        Ok(Self::new(loaded, a.alpha))
    }

    pub fn new(loaded: Loaded, alpha: Option<f64>) -> Self {
        Self {
            loaded,
            alpha,
            context: Vec::new(),
            last: None,
        }
    }

    pub fn handle(&mut self, line: &str) -> Reply {
        let line = line.trim();
        if let Some(cmd) = line.strip_prefix('/') {
            return self.command(cmd);
        }
        if line.is_empty() {
            return Reply::Text(String::new());
        }
        Reply::Text(self.turn(line))
    }

    fn command(&mut self, cmd: &str) -> Reply {
        let parts: Vec<&str> = cmd.split_whitespace().collect();
        let text = match parts.as_slice() {
            ["quit"] => return Reply::Quit,
            ["reset"] => {
                self.context.clear();
                self.last = None;
                "context cleared".to_string()
            }
            ["show"] => self.show(),
            ["alpha", "auto"] => {
                self.alpha = None;
                "alpha predicted by the model".to_string()
            }
            ["alpha", x] => match x.parse::<f64>() {
                Ok(a) => match self.loaded.alpha_mode(Some(a)) {
                    Ok(_) => {
                        self.alpha = Some(a);
                        format!("alpha fixed at {a}")
                    }
                    Err(e) => format!("error: {e}"),
                },
                Err(_) => format!("error: not a number: {x}\n{HELP}"),
            },
            _ => HELP.to_string(),
        };
        Reply::Text(text)
    }

    fn mode(&self) -> AlphaMode {
        self.loaded.alpha_mode(self.alpha).unwrap_or(AlphaMode::Predict)
    }

    fn turn(&mut self, user: &str) -> String {
        self.context.push(user.to_string());
        let m = &self.loaded;
        let candidates: Vec<String> = m
            .index
            .retrieve_topl(user, m.config.l)
            .texts()
            .into_iter()
            .map(str::to_string)
            .collect();
        let mut turn = Turn {
            candidates,
            context_utterances: self.context.len(),
            generation: None,
        };
        let reply = if turn.candidates.is_empty() {
            "(no knowledge matches that; try other words)".to_string()
        } else {
            match decode::generate(&m.model, &self.context, &turn.candidates, self.mode(), &m.config.decode_config()) {
                Ok(g) => {
                    let text = g.text.clone();
                    turn.generation = Some(g);
                    self.context.push(text.clone());
                    text
                }
                Err(e) => format!("error: {e}"),
            }
        };
        self.last = Some(turn);
        reply
    }

    fn show(&self) -> String {
        let Some(turn) = &self.last else {
            return "nothing yet".to_string();
        };
        let mut s = format!("context\t{} utterances\n", turn.context_utterances);
        let Some(g) = &turn.generation else {
            s.push_str("no knowledge retrieved");
            return s;
        };
        let r = &g.ranked;
        match (r.bucket(), r.alpha) {
            (Some(b), Some(a)) => {
                let how = if self.alpha.is_some() { "fixed" } else { "predicted" };
                let _ = writeln!(s, "bucket\t{b}\nalpha\t{a:.3} ({how})");
            }
            _ => s.push_str("bucket\tnone\n"),
        }
        s.push_str("rank\tprob\tpacked\tknowledge");
        for (rank, &i) in r.order.iter().enumerate() {
            let packed = if r.packed.knowledge.contains(&i) { "yes" } else { "no" };
            let _ = write!(s, "\n{}\t{:.4}\t{packed}\t{}", rank + 1, r.probs[i], turn.candidates[i]);
        }
        s
    }
}

/// Reads lines until `/quit` or end of input.
pub fn run_repl<R: BufRead>(mut session: Session, input: R, out: &mut dyn Write) -> std::io::Result<()> {
    let prompt = std::io::stdin().is_terminal();
    if prompt {
        write!(out, "> ")?;
        out.flush()?;
    }
    for line in input.lines() {
        match session.handle(&line?) {
            Reply::Quit => break,
            Reply::Text(t) => writeln!(out, "{t}")?,
        }
        if prompt {
            write!(out, "> ")?;
            out.flush()?;
        }
    }
    Ok(())
}
