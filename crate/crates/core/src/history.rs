//! Serialization of trajectories into policy contexts.
//!
//! A trajectory is laid out as one flat token stream
//!
//! ```text
//! <obs> s_0 </obs> a_0 <fb> r_0 </fb> <obs> s_1 </obs> a_1 <fb> r_1 </fb> ...
//! ```
//!
//! where each `a_j` is the full emitted response (it carries its own
//! `<act> ... </act>` markers). The history `h_t` followed by the first `i`
//! tokens of `a_t` is therefore a prefix of the stream.

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::trajectory::Trajectory;
use crate::vocab::Token;

#[derive(Debug, Clone, Default)]
pub struct HistoryStream {
    tokens: Vec<Token>,
    action_starts: Vec<usize>,
    action_lens: Vec<usize>,
}

impl HistoryStream {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_trajectory(traj: &Trajectory) -> Self {
        let mut s = HistoryStream::new();
        for step in &traj.steps {
            s.push_observation(&step.observation_tokens);
            s.push_action(&step.action_tokens);
            s.push_feedback(&step.feedback_tokens);
        }
        s
    }

    pub fn push_observation(&mut self, obs: &[Token]) {
        self.tokens.push(Token::OBS_BEGIN);
        self.tokens.extend_from_slice(obs);
        self.tokens.push(Token::OBS_END);
    }

    pub fn push_action(&mut self, action: &[Token]) {
        self.action_starts.push(self.tokens.len());
        self.action_lens.push(action.len());
        self.tokens.extend_from_slice(action);
    }

    pub fn push_feedback(&mut self, feedback: &[Token]) {
        self.tokens.push(Token::FB_BEGIN);
        self.tokens.extend_from_slice(feedback);
        self.tokens.push(Token::FB_END);
    }

    /// Everything pushed so far.
    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn steps(&self) -> usize {
        self.action_starts.len()
    }

    /// Untruncated `h_t ++ a_t[..prefix_len]`.
    pub fn prefix(&self, t: usize, prefix_len: usize) -> Result<&[Token]> {
        let start = *self.action_starts.get(t).ok_or(Error::IndexOutOfRange {
            what: "step",
            index: t,
            len: self.action_starts.len(),
        })?;
        if prefix_len > self.action_lens[t] {
            return Err(Error::IndexOutOfRange {
                what: "action prefix",
                index: prefix_len,
                len: self.action_lens[t],
            });
        }
        Ok(&self.tokens[..start + prefix_len])
    }

    /// `prefix(t, prefix_len)` restricted to its most recent `cap` tokens.
    pub fn context(&self, t: usize, prefix_len: usize, cap: usize) -> Result<&[Token]> {
        Ok(truncate_recent(self.prefix(t, prefix_len)?, cap))
    }
}

pub fn truncate_recent(tokens: &[Token], cap: usize) -> &[Token] {
    &tokens[tokens.len().saturating_sub(cap)..]
}

/// `h_t ++ y_{t,<prefix_len}` truncated to the most recent `context_cap` tokens.
pub fn build_history(
    trajectory: &Trajectory,
    t: usize,
    prefix_len: usize,
    config: &TrainConfig,
) -> Result<Vec<Token>> {
    let step = trajectory.step(t)?;
    if prefix_len > step.action_tokens.len() {
        return Err(Error::IndexOutOfRange {
            what: "action prefix",
            index: prefix_len,
            len: step.action_tokens.len(),
        });
    }
    let mut out = Vec::new();
    for (j, s) in trajectory.steps[..=t].iter().enumerate() {
        out.push(Token::OBS_BEGIN);
        out.extend_from_slice(&s.observation_tokens);
        out.push(Token::OBS_END);
        if j < t {
            out.extend_from_slice(&s.action_tokens);
            out.push(Token::FB_BEGIN);
            out.extend_from_slice(&s.feedback_tokens);
            out.push(Token::FB_END);
        }
    }
    out.extend_from_slice(&step.action_tokens[..prefix_len]);
    let cut = out.len().saturating_sub(config.context_cap);
    out.drain(..cut);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::Step;
    use crate::vocab::Vocabulary;

    fn vocab() -> Vocabulary {
        Vocabulary::new(["go", "north", "room", "a", "b", "You", "moved."]).unwrap()
    }

    fn two_step(v: &Vocabulary) -> Trajectory {
        let step = |obs: &str, act: &str, fb: &str| {
            let action = v.tokenize(act);
            let lp = vec![-0.5; action.len()];
            Step::new(v.tokenize(obs), action, v.tokenize(fb), lp, obs.into()).unwrap()
        };
        Trajectory {
            task_id: "t".into(),
            steps: vec![
                step("room a", "<think> <act> go north </act>", "You moved."),
                step("room b", "<act> go </act>", "You moved."),
            ],
            outcome_reward: 0.0,
            success: false,
        }
    }

    #[test]
    fn first_step_is_bare_observation() {
        let v = vocab();
        let tr = two_step(&v);
        let h = build_history(&tr, 0, 0, &TrainConfig::default()).unwrap();
        assert_eq!(h, v.tokenize("<obs> room a </obs>"));
    }

    #[test]
    fn matches_string_level_oracle() {
        let v = vocab();
        let tr = two_step(&v);
        // the same layout assembled as text, then tokenized
        let text = "<obs> room a </obs> <think> <act> go north </act> <fb> You moved. </fb> \
                    <obs> room b </obs> <act> go";
        let h = build_history(&tr, 1, 2, &TrainConfig::default()).unwrap();
        assert_eq!(h, v.tokenize(text));
        let stream = HistoryStream::from_trajectory(&tr);
        assert_eq!(stream.prefix(1, 2).unwrap(), h.as_slice());
    }

    #[test]
    fn truncation_keeps_most_recent() {
        let v = vocab();
        let obs = vec!["a"; 298].join(" ");
        let action = v.tokenize("<act> go </act>");
        let lp = vec![-1.0; action.len()];
        let tr = Trajectory {
            task_id: "t".into(),
            steps: vec![Step::new(v.tokenize(&obs), action, vec![], lp, String::new()).unwrap()],
            outcome_reward: 0.0,
            success: false,
        };
        let cfg = TrainConfig::default();
        // 298 + 2 markers = 300 tokens
        let full = build_history(&tr, 0, 0, &TrainConfig { context_cap: 10_000, ..cfg.clone() }).unwrap();
        assert_eq!(full.len(), 300);
        let h = build_history(&tr, 0, 0, &cfg).unwrap();
        assert_eq!(h.len(), 256);
        assert_eq!(h.as_slice(), &full[44..]);
    }

    #[test]
    fn prefix_extension_appends_one_token() {
        let v = vocab();
        let tr = two_step(&v);
        let cfg = TrainConfig::default();
        for t in 0..2 {
            let len = tr.steps[t].action_tokens.len();
            for i in 0..len {
                let a = build_history(&tr, t, i, &cfg).unwrap();
                let b = build_history(&tr, t, i + 1, &cfg).unwrap();
                assert_eq!(&b[..a.len()], a.as_slice());
                assert_eq!(b.len(), a.len() + 1);
                assert_eq!(a, build_history(&tr, t, i, &cfg).unwrap());
            }
        }
    }

    #[test]
    fn out_of_range_errors() {
        let v = vocab();
        let tr = two_step(&v);
        let cfg = TrainConfig::default();
        assert!(build_history(&tr, 2, 0, &cfg).is_err());
        assert!(build_history(&tr, 1, 4, &cfg).is_err());
        let stream = HistoryStream::from_trajectory(&tr);
        assert!(stream.prefix(1, 4).is_err());
        assert!(stream.prefix(5, 0).is_err());
    }
}
