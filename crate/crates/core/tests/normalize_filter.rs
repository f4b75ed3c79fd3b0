mod common;

use proptest::prelude::*;

use tikzkit_core::normalize::{dedup, detect_packages, length_filter, wrap_standalone, LengthBounds, RuleSet};
use tikzkit_core::reward::format_reward;

#[test]
fn length_boundaries_are_inclusive() {
    let kept: Vec<usize> = [99, 100, 4000, 4001]
        .into_iter()
        .filter(|n| {
            let body = common::body_of_len(*n);
            assert_eq!(body.chars().count(), *n);
            length_filter(&wrap_standalone(&body, &[]), LengthBounds::default())
        })
        .collect();
    assert_eq!(kept, [100, 4000]);
}

#[test]
fn dedup_keeps_first_occurrence() {
    let a = wrap_standalone(&common::body_of_len(150), &[]).with_record_id("first");
    let b = wrap_standalone(&common::body_of_len(150), &[]).with_record_id("second");
    let c = wrap_standalone(&common::body_of_len(151), &[]).with_record_id("other");
    let out = dedup(vec![a, c, b]);
    assert_eq!(out.kept.iter().map(|p| p.record_id.as_str()).collect::<Vec<_>>(), ["first", "other"]);
    assert_eq!(out.dropped, 1);
}

#[test]
fn packages_follow_the_rules() {
    let rules = RuleSet::default_rules();
    let pk = detect_packages("\\begin{tikzcd} A \\arrow[r] & B \\end{tikzcd}", &rules);
    assert!(pk.iter().any(|l| l.contains("tikz-cd")));
    let pk = detect_packages("\\begin{circuitikz}\\draw (0,0) to[R] (2,0);\\end{circuitikz}", &rules);
    assert!(pk.iter().any(|l| l.contains("circuitikz")));
}

proptest! {
    #[test]
    fn wrapped_programs_have_format_reward_one(body in "[a-z0-9 ,;()\\n]{0,200}") {
        let p = wrap_standalone(&format!("\\begin{{tikzpicture}}{body}\\end{{tikzpicture}}"), &["\\usepackage{tikz}".into()]);
        prop_assert_eq!(format_reward(&p.code), 1.0);
    }

    #[test]
    fn truncated_programs_fail_format(cut in 1usize..14) {
        let p = wrap_standalone("\\begin{tikzpicture}\\end{tikzpicture}", &[]);
        prop_assert_eq!(format_reward(&p.code[..p.code.len() - cut]), 0.0);
    }
}
