//! Request templates for external judge and rewriter models. Placeholders
//! are `{name}` and are substituted verbatim.

pub const CORRECTNESS_TEMPLATE: &str = "You are an annotator, your goal is to check if the reasoning process is aligned with multimodal question and answer.\n\
You will be given the question, ground truth, the reasoning chain and the original answer. Output an integer from 0 to 5: output 5 if the reasoning chain is aligned with the ground truth (even if the answer has some mistakes), output 0 if the reasoning chain is not aligned with the ground truth.\n\
Question: {question}\nGround truth: {gt}\nReasoning chain: {answer}\nOriginal answer: {final_answer}";

pub const GROUNDING_TEMPLATE: &str = "You are an annotator, your goal is to check if the short content description of the bounding box is aligned with the image. I will send you two images: one is the original image and the other is the bounding box area cropped from the original image.\n\
Output a integer from 0 to 5, 0 means the content is not aligned with the content, 5 means well aligned.\n\
Check if the content from the second image is \"{content}\".";

pub const GROUND_TRUTH_REWRITE_TEMPLATE: &str = "You are an annotator, your goal is to check if the reasoning process is aligned with multimodal question and answer, and rewrite the reasoning chain and the answer to match the ground truth. You can add more details to the answer, but all information introduced by the ground truth should be covered. \
You will be given the question, ground truth, and the original answer with the reasoning for reference. Output the answer with the reasoning process: think first, then answer the problem. The final answer that matches the ground truth should be written after \"Final answer:\".\n\
Question:{question}\nGround truth: {gt}\nAnswer with Reasoning: {answer}";

pub const REASONING_CHAIN_REWRITE_TEMPLATE: &str = "You are an annotator. Your goal is to check whether the reasoning process aligns with the multimodal question and answer, and rewrite the reasoning chain and the answer to match the ground truth. You can add more details to the answer, but it must cover all the information provided by the ground truth.\n\
You need to remove any redundant, confusing, or incorrect information from the original answer. The rewritten answer should be logical and concise. The answer should follow a strict format: all the thinking parts should be enclosed within <think></think> tags, and then state the ground truth starting with \"Final answer:\". All location information should be enclosed within <sot><eot> tags; the content of <sot><eot> includes \"bbox_2d\" and \"label\", which are simply copied from the original answer and should NOT be changed. You need to reference the area before mentioning any information in the area, and each location should be mentioned only once (i.e., duplicate <sot><eot> tags with the same information should be removed).\n\
You will be provided with the question, the ground truth, and the original answer with its reasoning for reference. Output the answer along with the reasoning process, make the answer fluent, and do not use the ground truth in the reasoning process. You must reference at least one location with <sot>...<eot>, the content of <sot><eot> is copied exactly from the original answer. Think through the problem and the referenced area, and then write the final answer that matches the ground truth after \"Final answer:\". Only return a single-line final answer, which should strictly conform to the ground truth.\n\
Question: {question} Ground truth: {gt} Answer with Reasoning: {answer}";

/// Replaces each `{key}` in `template`. Substituted values are not rescanned.
pub fn fill(template: &str, fields: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = after.find('}').and_then(|close| {
            let key = &after[..close];
            fields
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| (close, *v))
        });
        match hit {
            Some((close, value)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fill_substitutes_known_keys_once() {
        let s = fill("a {x} b {y} {unknown}", &[("x", "{y}"), ("y", "2")]);
        assert_eq!(s, "a {y} b 2 {unknown}");
    }
}
