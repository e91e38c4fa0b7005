//! Prompt templates for the four tasks.
//!
//! Target prompts carry the [`PLACEHOLDER`] marker where the patched noun goes.
//! Gender targets use a fixed `"She" or "He"` option pair; every other task
//! lists `a_pri` before `a_sec` in the original order.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Datapoint, DatasetError, OptionOrder, Result, Task};

pub const PLACEHOLDER: &str = "{x}";

/// Instruction prefixes of the prompt-based baselines, verbatim.
pub const CB_PREFIX: &str = "Do not use outside or empirical knowledge, directly answer.";
pub const IE_PREFIX: &str =
    "Use only internal evidence from the input, exclude background knowledge.";
pub const DB_PREFIX: &str = "Answer strictly from the given data, avoid any external reasoning.";

/// Interrogative clause appended to a source prompt when scoring layers.
pub fn ld_clause(relation: &str, noun: &str) -> String {
    format!("What {relation} is {noun}?")
}

/// Rendered prompt set for one datapoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedPrompts {
    pub source: String,
    pub target: String,
    pub target_swapped: String,
    pub contrastive: String,
    pub contrastive_swapped: String,
    pub fewshot_target: Option<String>,
}

fn gender_category(dp: &Datapoint) -> &str {
    dp.category.as_deref().unwrap_or("characteristic")
}

/// Concrete word standing in for the secondary gender in a source prompt.
fn gender_word(category: &str, a_sec: &str) -> &'static str {
    let male = a_sec.eq_ignore_ascii_case("he");
    match (category, male) {
        ("name", true) => "He",
        ("name", false) => "She",
        ("degree", true) => "male",
        ("degree", false) => "female",
        (_, true) => "man",
        (_, false) => "woman",
    }
}

pub fn source_prompt(dp: &Datapoint) -> String {
    let n = &dp.noun;
    match dp.task {
        Task::Gender => {
            let cat = gender_category(dp);
            let g = gender_word(cat, &dp.a_sec);
            match cat {
                "occupation" => format!("This is an exceptional {n} {g}."),
                "name" => format!("{g} has the name {n}."),
                "degree" => format!("This is a {g} outstanding student in department of {n}."),
                _ => format!("This {g} is a {n} person."),
            }
        }
        _ => format!("Here is an {} {n}.", dp.a_sec),
    }
}

/// The two options in the order they appear for `order`.
pub fn options(dp: &Datapoint, order: OptionOrder) -> (&str, &str) {
    let original = match dp.task {
        Task::Gender => ("She", "He"),
        _ => (dp.a_pri.as_str(), dp.a_sec.as_str()),
    };
    match order {
        OptionOrder::Original => original,
        OptionOrder::Swapped => (original.1, original.0),
    }
}

/// Zero-shot target prompt with `slot` in place of the noun.
pub fn zero_shot_target(dp: &Datapoint, order: OptionOrder, slot: &str) -> String {
    let (o1, o2) = options(dp, order);
    match dp.task {
        Task::Gender => {
            let tail = match gender_category(dp) {
                "occupation" => format!("? is an exceptional {slot}."),
                "name" => format!("? has the name {slot}."),
                "degree" => format!("? stands out in the department of {slot}."),
                _ => format!("? is a {slot} person."),
            };
            format!("Replace ? with \"{o1}\" or \"{o2}\". {tail}")
        }
        _ => format!("The {} of {slot} is {o1} or {o2}?", dp.relation()),
    }
}

/// Prompt used by the option-swapping bias split: the noun itself, no patching.
pub fn bias_probe_prompt(dp: &Datapoint, order: OptionOrder) -> String {
    match dp.task {
        Task::Color => {
            let (o1, o2) = options(dp, order);
            format!("The color of a {} is {o1} or {o2}?", dp.noun)
        }
        _ => zero_shot_target(dp, order, &dp.noun),
    }
}

/// Few-shot target: `shots` exemplars followed by the open slot.
pub fn few_shot_target(dp: &Datapoint, exemplars: &[(&str, &str)], slot: &str) -> String {
    let rel = dp.relation();
    let mut parts: Vec<String> = exemplars
        .iter()
        .map(|(n, a)| format!("the {rel} of {n} is {a}"))
        .collect();
    parts.push(format!("the {rel} of {slot} is"));
    let mut s = parts.join(", ");
    s[..1].make_ascii_uppercase();
    s
}

pub(super) fn render_zero_shot(dp: &Datapoint) -> RenderedPrompts {
    RenderedPrompts {
        source: source_prompt(dp),
        target: zero_shot_target(dp, OptionOrder::Original, PLACEHOLDER),
        target_swapped: zero_shot_target(dp, OptionOrder::Swapped, PLACEHOLDER),
        contrastive: zero_shot_target(dp, OptionOrder::Original, &dp.noun),
        contrastive_swapped: zero_shot_target(dp, OptionOrder::Swapped, &dp.noun),
        fewshot_target: None,
    }
}

/// Renders the full prompt set. With `shots > 0`, exemplars are drawn without
/// replacement from the other datapoints of the same task in `pool`, seeded.
pub fn render_prompts(
    dp: &Datapoint,
    shots: usize,
    pool: &[Datapoint],
    seed: u64,
) -> Result<RenderedPrompts> {
    let mut r = render_zero_shot(dp);
    if shots > 0 {
        let candidates: Vec<&Datapoint> = pool
            .iter()
            .filter(|o| o.task == dp.task && o.id != dp.id && o.noun != dp.noun)
            .collect();
        if candidates.len() < shots {
            return Err(DatasetError::InsufficientExemplars {
                id: dp.id.clone(),
                needed: shots,
                available: candidates.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(dp.id.as_bytes()));
        let picked: Vec<(&str, &str)> = candidates
            .choose_multiple(&mut rng, shots)
            .map(|o| (o.noun.as_str(), o.a_sec.as_str()))
            .collect();
        r.fewshot_target = Some(few_shot_target(dp, &picked, PLACEHOLDER));
    }
    Ok(r)
}

/// Attaches a few-shot target to every datapoint.
pub fn attach_few_shot(dps: &mut [Datapoint], shots: usize, seed: u64) -> Result<()> {
    let pool = dps.to_vec();
    for dp in dps.iter_mut() {
        dp.fewshot_target = render_prompts(dp, shots, &pool, seed)?.fewshot_target;
    }
    Ok(())
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Fixed template text, used to build toy vocabularies that cover every prompt.
pub fn template_texts() -> Vec<String> {
    let mut out: Vec<String> = [CB_PREFIX, IE_PREFIX, DB_PREFIX]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for (task, cats) in [
        (Task::Color, vec![None]),
        (Task::Culture, vec![Some("religion"), Some("country")]),
        (Task::Age, vec![None]),
        (
            Task::Gender,
            vec![
                Some("occupation"),
                Some("name"),
                Some("degree"),
                Some("characteristic"),
            ],
        ),
    ] {
        for cat in cats {
            for a_sec in ["He", "She"] {
                let a_pri = if a_sec == "He" { "She" } else { "He" };
                let dp = Datapoint::new(task, cat.map(str::to_string), "x", a_pri, a_sec, None)
                    .expect("distinct attributes");
                let r = render_zero_shot(&dp);
                out.extend([
                    r.source,
                    r.target,
                    r.target_swapped,
                    bias_probe_prompt(&dp, OptionOrder::Original),
                ]);
                out.push(few_shot_target(&dp, &[("x", "x")], "x"));
                out.push(ld_clause(dp.relation(), "x"));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn broccoli() -> Datapoint {
        Datapoint::new(Task::Color, None, "broccoli", "green", "purple", Some(4.0)).unwrap()
    }

    #[test]
    fn color_zero_shot_templates() {
        let dp = broccoli();
        assert_eq!(dp.source_prompt, "Here is an purple broccoli.");
        assert_eq!(dp.target_prompt, "The color of {x} is green or purple?");
        assert_eq!(
            dp.target_prompt_swapped,
            "The color of {x} is purple or green?"
        );
        assert_eq!(
            dp.contrastive_prompt,
            "The color of broccoli is green or purple?"
        );
    }

    #[test]
    fn gender_characteristic_target_follows_table() {
        let dp = Datapoint::new(
            Task::Gender,
            Some("characteristic".into()),
            "compassionate",
            "She",
            "He",
            None,
        )
        .unwrap();
        assert_eq!(dp.source_prompt, "This man is a compassionate person.");
        assert_eq!(
            dp.target_prompt,
            "Replace ? with \"She\" or \"He\". ? is a {x} person."
        );
        assert_eq!(
            dp.target_prompt_swapped,
            "Replace ? with \"He\" or \"She\". ? is a {x} person."
        );
    }

    #[test]
    fn gender_sources_substitute_concrete_words() {
        let mk = |cat: &str, noun: &str, sec: &str| {
            let pri = if sec == "He" { "She" } else { "He" };
            Datapoint::new(Task::Gender, Some(cat.into()), noun, pri, sec, None)
                .unwrap()
                .source_prompt
        };
        assert_eq!(
            mk("occupation", "nurse", "He"),
            "This is an exceptional nurse man."
        );
        assert_eq!(mk("name", "James", "She"), "She has the name James.");
        assert_eq!(
            mk("degree", "physics", "She"),
            "This is a female outstanding student in department of physics."
        );
    }

    #[test]
    fn culture_uses_category_as_relation() {
        let dp = Datapoint::new(
            Task::Culture,
            Some("religion".into()),
            "Ajahn",
            "Buddhism",
            "Judaism",
            None,
        )
        .unwrap();
        assert_eq!(
            dp.target_prompt,
            "The religion of {x} is Buddhism or Judaism?"
        );
    }

    #[test]
    fn swapped_differs_only_in_option_order() {
        let dp = broccoli();
        let a = dp
            .target_prompt
            .replace("green", "#")
            .replace("purple", "green")
            .replace('#', "purple");
        assert_eq!(a, dp.target_prompt_swapped);
    }

    #[test]
    fn few_shot_excludes_current_and_is_seeded() {
        let pool: Vec<Datapoint> = ["broccoli", "tomato", "banana", "grape"]
            .iter()
            .map(|n| Datapoint::new(Task::Color, None, n, "green", "red", None).unwrap())
            .collect();
        let a = render_prompts(&pool[0], 2, &pool, 3)
            .unwrap()
            .fewshot_target
            .unwrap();
        let b = render_prompts(&pool[0], 2, &pool, 3)
            .unwrap()
            .fewshot_target
            .unwrap();
        assert_eq!(a, b);
        assert!(a.starts_with("The color of "));
        assert!(a.ends_with("the color of {x} is"));
        assert!(!a.contains("broccoli"));
        assert!(matches!(
            render_prompts(&pool[0], 4, &pool, 3),
            Err(DatasetError::InsufficientExemplars { available: 3, .. })
        ));
    }

    #[test]
    fn bias_probe_uses_article_for_color() {
        let dp = broccoli();
        assert_eq!(
            bias_probe_prompt(&dp, OptionOrder::Swapped),
            "The color of a broccoli is purple or green?"
        );
    }
}
