use serde::{Deserialize, Serialize};

/// One optimizer step of a training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss_ce: f64,
    /// Loss weight used for this step.
    pub w: f64,
    pub loss_total: f64,
    /// Mean bias norm after the update; absent for base pretraining.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bias_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dw: Option<f64>,
    /// Loss weight for the next step.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w_next: Option<f64>,
}

impl StepRecord {
    pub fn is_finite(&self) -> bool {
        [
            Some(self.loss_ce),
            Some(self.w),
            Some(self.loss_total),
            self.bias_norm,
            self.error,
            self.dw,
            self.w_next,
        ]
        .into_iter()
        .flatten()
        .all(f64::is_finite)
    }
}

/// A periodic held-out evaluation during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub token_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact_match: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

impl RunMetrics {
    /// Steps strictly increasing and every field finite.
    pub fn is_complete(&self, expected_steps: usize) -> bool {
        self.steps.len() == expected_steps
            && self.steps.iter().enumerate().all(|(i, s)| s.step == i)
            && self.steps.iter().all(StepRecord::is_finite)
    }

    /// JSON-lines: step records then eval records, each tagged by kind.
    pub fn to_jsonl(&self) -> String {
        #[derive(Serialize)]
        struct Tagged<'a, T> {
            kind: &'a str,
            #[serde(flatten)]
            inner: &'a T,
        }
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(&Tagged { kind: "step", inner: s }).expect("serialisable"));
            out.push('\n');
        }
        for e in &self.evals {
            out.push_str(&serde_json::to_string(&Tagged { kind: "eval", inner: e }).expect("serialisable"));
            out.push('\n');
        }
        out
    }
}
