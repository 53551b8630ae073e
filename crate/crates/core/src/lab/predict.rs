use crate::adapters::AdapterSet;
use crate::backbone::{encode_pair, encode_prompt, Backbone};
use crate::error::Result;
use crate::synthbench::{TaskKind, TaskSpec};

/// Index of the most likely candidate output; ties go to the lowest index.
pub fn rank_candidates(
    model: &Backbone,
    adapters: Option<&AdapterSet>,
    input: &str,
    candidates: &[String],
) -> Result<usize> {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, c) in candidates.iter().enumerate() {
        let ll = model.completion_log_likelihood(adapters, &encode_pair(input, c)?)?;
        if ll > best.1 {
            best = (i, ll);
        }
    }
    Ok(best.0)
}

/// Model output for one query: the best label for label tasks, greedy
/// decoding otherwise.
pub fn predict(model: &Backbone, adapters: Option<&AdapterSet>, spec: &TaskSpec, input: &str) -> Result<String> {
    match (spec.kind, spec.label_space()) {
        (TaskKind::Classification | TaskKind::Ordinal, Some(labels)) => {
            let i = rank_candidates(model, adapters, input, &labels)?;
            Ok(labels[i].clone())
        }
        _ => {
            let prompt = encode_prompt(input)?;
            let out = model.generate(adapters, &prompt, spec.max_output_len() + 1)?;
            Ok(out.completion_text())
        }
    }
}
