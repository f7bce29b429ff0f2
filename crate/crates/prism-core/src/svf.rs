//! Self-verified feedback: scoring candidate completions with a judge.
//!
//! A verifier backend is asked a yes/no question about a rendered
//! (problem, completion) prompt and returns the logits of every token that
//! spells the affirmative verdict and every token that spells the negative
//! one. The feedback score is the two-way softmax of the best logit on each
//! side:
//!
//! ```text
//! score = exp(s_yes) / (exp(s_yes) + exp(s_no)),   s_* = max over that side
//! ```
//!
//! When one side has no token at all the score saturates to 1 or 0; when both
//! sides are empty the verdict is undefined and falls back to a neutral 0.5.
//! Scores are used for ranking only, so any strictly increasing transform of
//! `s_yes − s_no` would induce the same pruning decisions.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{BackendError, Error};
use crate::ledger::{ChargeKind, NfeLedger, Stage};
use crate::num;
use crate::state::Token;

/// Outcome of one verification: a ranking score in `[0, 1]` plus whether the
/// judge actually produced a verdict (`defined == false` means the neutral
/// fallback was used).
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SvfScore {
    pub value: f64,
    pub defined: bool,
}

impl SvfScore {
    pub const NEUTRAL: SvfScore = SvfScore {
        value: 0.5,
        defined: false,
    };
}

/// Computes the feedback score from verdict-token logit sets.
///
/// Errors if any provided logit is NaN or infinite. Empty sets are allowed
/// and resolve as documented on the module.
pub fn svf_score(yes_logits: &[f64], no_logits: &[f64]) -> Result<SvfScore, Error> {
    for &logit in yes_logits.iter().chain(no_logits) {
        if !logit.is_finite() {
            return Err(Error::NonFiniteLogit);
        }
    }
    let best = |logits: &[f64]| logits.iter().copied().reduce(f64::max);
    match (best(yes_logits), best(no_logits)) {
        (None, None) => Ok(SvfScore::NEUTRAL),
        (Some(_), None) => Ok(SvfScore {
            value: 1.0,
            defined: true,
        }),
        (None, Some(_)) => Ok(SvfScore {
            value: 0.0,
            defined: true,
        }),
        (Some(yes), Some(no)) => Ok(SvfScore {
            value: num::sigmoid(yes - no),
            defined: true,
        }),
    }
}

/// Which judge wording a template carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum TaskKind {
    Math,
    Code,
}

/// Slot marker for the problem statement.
pub const PROBLEM_SLOT: &str = "{{PROBLEM}}";
/// Slot marker for the candidate completion.
pub const COMPLETION_SLOT: &str = "{{COMPLETION}}";
/// Appended to a completion that was cut at the length limit.
pub const TRUNCATION_MARKER: &str = "(TRUNCATED)";
/// Default completion length limit, in characters.
pub const DEFAULT_COMPLETION_LIMIT: usize = 1024;

const MATH_TEMPLATE_TEXT: &str = include_str!("../templates/math_judge.txt");
const CODE_TEMPLATE_TEXT: &str = include_str!("../templates/code_judge.txt");

/// A verification prompt: plain text with exactly one problem slot and one
/// completion slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifyPromptTemplate {
    pub kind: TaskKind,
    text: String,
    /// Maximum completion length (in characters) inserted into the prompt;
    /// anything longer is cut and suffixed with [`TRUNCATION_MARKER`].
    pub completion_limit: usize,
}

impl VerifyPromptTemplate {
    pub fn new(kind: TaskKind, text: impl Into<String>) -> Result<Self, Error> {
        let text = text.into();
        for slot in [PROBLEM_SLOT, COMPLETION_SLOT] {
            match text.matches(slot).count() {
                1 => {}
                n => {
                    return Err(Error::InvalidArgument {
                        what: "template",
                        message: format!("expected exactly one {slot} slot, found {n}"),
                    });
                }
            }
        }
        Ok(Self {
            kind,
            text,
            completion_limit: DEFAULT_COMPLETION_LIMIT,
        })
    }

    /// Built-in math-judge wording.
    pub fn math_default() -> Self {
        Self::new(TaskKind::Math, MATH_TEMPLATE_TEXT).expect("built-in template is well-formed")
    }

    /// Built-in code-judge wording.
    pub fn code_default() -> Self {
        Self::new(TaskKind::Code, CODE_TEMPLATE_TEXT).expect("built-in template is well-formed")
    }

    pub fn with_completion_limit(mut self, limit: usize) -> Self {
        self.completion_limit = limit;
        self
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

/// Fills a template's slots.
///
/// The completion is truncated to the template's character limit (with a
/// marker appended) before insertion. Errors on an empty problem statement.
pub fn render_verify_prompt(
    template: &VerifyPromptTemplate,
    problem: &str,
    completion: &str,
) -> Result<String, Error> {
    if problem.is_empty() {
        return Err(Error::InvalidArgument {
            what: "problem",
            message: "must not be empty".into(),
        });
    }
    let mut shown: String = completion
        .chars()
        .take(template.completion_limit)
        .collect();
    if completion.chars().count() > template.completion_limit {
        shown.push_str(TRUNCATION_MARKER);
    }
    Ok(template
        .text
        .replacen(PROBLEM_SLOT, problem, 1)
        .replacen(COMPLETION_SLOT, &shown, 1))
}

/// What a verifier backend sees: the rendered prompt plus structured views
/// for judges that do not parse text.
#[derive(Debug)]
pub struct VerifyRequest<'a> {
    pub prompt_text: String,
    pub problem: &'a str,
    pub completion: &'a [Token],
}

/// Verdict-token logits returned by a judge.
#[derive(Debug, Clone, PartialEq)]
pub struct JudgeResponse {
    pub yes_logits: Vec<f64>,
    pub no_logits: Vec<f64>,
}

/// A judge that can be asked whether a completion is correct.
///
/// Implementations must be pure functions of the request and their own
/// parameters, and callable concurrently.
pub trait VerifierBackend: Sync {
    fn judge(&self, request: &VerifyRequest<'_>) -> Result<JudgeResponse, BackendError>;
}

/// Canonical plain-text rendering of a token sequence for prompt insertion.
pub fn tokens_to_text(tokens: &[Token]) -> String {
    let mut out = String::new();
    for (i, tok) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        match tok {
            Token::Mask => out.push_str("<mask>"),
            Token::Id(id) => out.push_str(&format!("{id}")),
        }
    }
    out
}

/// Renders, judges, and scores one completion, charging exactly one verifier
/// call. A backend failure is not fatal: it logs a warning and yields the
/// neutral fallback score so the search can continue.
pub fn svf_eval(
    verifier: &dyn VerifierBackend,
    template: &VerifyPromptTemplate,
    problem: &str,
    completion: &[Token],
    ledger: &NfeLedger,
    stage: Stage,
) -> Result<SvfScore, Error> {
    ledger.charge(ChargeKind::Svf, stage, 1)?;
    let completion_text = tokens_to_text(completion);
    let prompt_text = match render_verify_prompt(template, problem, &completion_text) {
        Ok(text) => text,
        Err(err) => {
            log::warn!("verification prompt could not be rendered ({err}); using neutral score");
            return Ok(SvfScore::NEUTRAL);
        }
    };
    let request = VerifyRequest {
        prompt_text,
        problem,
        completion,
    };
    match verifier.judge(&request) {
        Ok(response) => match svf_score(&response.yes_logits, &response.no_logits) {
            Ok(score) => Ok(score),
            Err(err) => {
                log::warn!("judge returned unusable logits ({err}); using neutral score");
                Ok(SvfScore::NEUTRAL)
            }
        },
        Err(err) => {
            log::warn!("judge call failed ({err}); using neutral score");
            Ok(SvfScore::NEUTRAL)
        }
    }
}

/// True when a verifier-guided prune event is due at countdown step `t`.
///
/// Prune events happen inside the thinning window `floor < t ≤ top` every
/// `interval` steps, anchored at `t = top` (which is always due).
pub fn svf_due(t: u32, top: u32, floor: u32, interval: u32) -> Result<bool, Error> {
    if interval == 0 {
        return Err(Error::InvalidArgument {
            what: "interval",
            message: "must be at least 1".into(),
        });
    }
    Ok(floor < t && t <= top && (top - t) % interval == 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::NfeLedger;

    const TOL: f64 = 1e-12;

    #[test]
    fn score_is_two_way_softmax_over_best_logits() {
        // With logits ln(3) and 0 the affirmative mass is 3/(3+1).
        let s = svf_score(&[3.0f64.ln()], &[0.0]).unwrap();
        assert!((s.value - 0.75).abs() < TOL);
        assert!(s.defined);

        // Only the maximum on each side matters.
        let s = svf_score(&[0.0, 3.0f64.ln(), -5.0], &[-9.0, 0.0]).unwrap();
        assert!((s.value - 0.75).abs() < TOL);
    }

    #[test]
    fn empty_sides_saturate_or_fall_back() {
        let s = svf_score(&[], &[]).unwrap();
        assert_eq!(s.value, 0.5);
        assert!(!s.defined);

        let s = svf_score(&[1.0], &[]).unwrap();
        assert_eq!(s.value, 1.0);
        assert!(s.defined);

        let s = svf_score(&[], &[1.0]).unwrap();
        assert_eq!(s.value, 0.0);
        assert!(s.defined);
    }

    #[test]
    fn non_finite_logits_are_rejected() {
        assert_eq!(
            svf_score(&[f64::NAN], &[0.0]).unwrap_err(),
            Error::NonFiniteLogit
        );
        assert_eq!(
            svf_score(&[0.0], &[f64::INFINITY]).unwrap_err(),
            Error::NonFiniteLogit
        );
    }

    #[test]
    fn score_depends_only_on_the_logit_gap() {
        for (yes, no) in [(2.0, 0.0), (102.0, 100.0), (-7.5, -9.5)] {
            let s = svf_score(&[yes], &[no]).unwrap();
            assert!((s.value - 0.8807970779778823).abs() < TOL);
        }
    }

    #[test]
    fn extreme_gaps_stay_finite_and_ordered() {
        let hi = svf_score(&[1000.0], &[0.0]).unwrap();
        let lo = svf_score(&[0.0], &[1000.0]).unwrap();
        assert_eq!(hi.value, 1.0);
        assert_eq!(lo.value, 0.0);
        let near = svf_score(&[30.0], &[0.0]).unwrap();
        assert!(near.value < 1.0 && near.value > 0.999999);
    }

    #[test]
    fn templates_render_with_both_slots_filled() {
        let template = VerifyPromptTemplate::math_default();
        let out = render_verify_prompt(&template, "2+2?", "4").unwrap();
        assert!(out.contains("[Math Problem]\n2+2?"));
        assert!(out.contains("[Proposed Mathematical Solution]\n4"));
        assert!(out.contains("Reasoning Validity: Are the logical steps"));
        assert!(out.contains("Answer with a single word: Yes or No."));
        assert!(!out.contains(PROBLEM_SLOT));
        assert!(!out.contains(COMPLETION_SLOT));

        let code = VerifyPromptTemplate::code_default();
        let out = render_verify_prompt(&code, "sum two ints", "print(a+b)").unwrap();
        assert!(out.contains("[BEGIN_CODE]\nprint(a+b)\n[END_CODE]"));
        assert!(out.contains("Edge Cases & Constraints"));
    }

    #[test]
    fn long_completions_are_truncated_with_a_marker() {
        let template = VerifyPromptTemplate::math_default().with_completion_limit(10);
        let completion = "0123456789ABCDEF";
        let out = render_verify_prompt(&template, "p", completion).unwrap();
        assert!(out.contains(&alloc::format!("0123456789{TRUNCATION_MARKER}")));
        assert!(!out.contains("ABCDEF"));

        // At or below the limit nothing is appended.
        let out = render_verify_prompt(&template, "p", "0123456789").unwrap();
        assert!(!out.contains(TRUNCATION_MARKER));
    }

    #[test]
    fn empty_problem_is_an_error() {
        let template = VerifyPromptTemplate::math_default();
        assert!(render_verify_prompt(&template, "", "x").is_err());
    }

    #[test]
    fn malformed_templates_are_rejected() {
        assert!(VerifyPromptTemplate::new(TaskKind::Math, "no slots").is_err());
        assert!(VerifyPromptTemplate::new(TaskKind::Math, "{{PROBLEM}} only").is_err());
        assert!(
            VerifyPromptTemplate::new(
                TaskKind::Math,
                "{{PROBLEM}} {{COMPLETION}} {{COMPLETION}}"
            )
            .is_err()
        );
        assert!(
            VerifyPromptTemplate::new(TaskKind::Math, "{{PROBLEM}} {{COMPLETION}}").is_ok()
        );
    }

    struct FixedJudge(JudgeResponse);

    impl VerifierBackend for FixedJudge {
        fn judge(&self, _: &VerifyRequest<'_>) -> Result<JudgeResponse, BackendError> {
            Ok(self.0.clone())
        }
    }

    struct FailingJudge;

    impl VerifierBackend for FailingJudge {
        fn judge(&self, _: &VerifyRequest<'_>) -> Result<JudgeResponse, BackendError> {
            Err(BackendError::new("judge offline"))
        }
    }

    #[test]
    fn eval_charges_exactly_one_call_and_scores() {
        let ledger = NfeLedger::new();
        let judge = FixedJudge(JudgeResponse {
            yes_logits: alloc::vec![3.0f64.ln()],
            no_logits: alloc::vec![0.0],
        });
        let template = VerifyPromptTemplate::math_default();
        let completion = [Token::Id(4)];
        let s = svf_eval(
            &judge,
            &template,
            "2+2?",
            &completion,
            &ledger,
            Stage::Thinning,
        )
        .unwrap();
        assert!((s.value - 0.75).abs() < TOL);
        assert_eq!(ledger.svf_total(), 1);
        assert_eq!(ledger.denoise_total(), 0);
        assert_eq!(ledger.stage_counts(Stage::Thinning), (0, 1));
    }

    #[test]
    fn judge_failure_falls_back_to_neutral_but_still_charges() {
        let ledger = NfeLedger::new();
        let template = VerifyPromptTemplate::math_default();
        let completion = [Token::Id(4)];
        let s = svf_eval(
            &FailingJudge,
            &template,
            "2+2?",
            &completion,
            &ledger,
            Stage::Thinning,
        )
        .unwrap();
        assert_eq!(s, SvfScore::NEUTRAL);
        assert_eq!(ledger.svf_total(), 1);
    }

    #[test]
    fn due_steps_anchor_at_the_window_top() {
        // top = 20, floor = 4, interval = 3.
        let due: Vec<u32> = (1..=32)
            .filter(|&t| svf_due(t, 20, 4, 3).unwrap())
            .collect();
        assert_eq!(due, alloc::vec![5, 8, 11, 14, 17, 20]);
        assert!(svf_due(20, 20, 4, 3).unwrap());
        assert!(!svf_due(19, 20, 4, 3).unwrap());
        assert!(svf_due(17, 20, 4, 3).unwrap());
        assert!(!svf_due(4, 20, 4, 3).unwrap());
        assert!(!svf_due(23, 20, 4, 3).unwrap());
        assert!(svf_due(5, 20, 4, 1).unwrap());
        assert!(svf_due(0, 20, 4, 3).is_ok());
        assert!(svf_due(5, 20, 4, 0).is_err());
    }

    #[test]
    fn token_text_is_space_separated_ids() {
        let toks = [Token::Id(17), Token::Id(3), Token::Mask, Token::Id(0)];
        assert_eq!(tokens_to_text(&toks), "17 3 <mask> 0");
        assert_eq!(tokens_to_text(&[]), "");
    }
}
