mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tikzkit_core::extract::{extract_environments, strip_comments};

#[test]
fn planted_environments_match_the_stack_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut total = 0;
    for id in 0..150 {
        let (text, planted) = common::planted_document(&mut rng);
        let oracle = common::stack_scan(&text);
        assert_eq!(oracle.len(), planted);
        let ex = extract_environments(&common::document(id, text.clone()));
        let spans: Vec<(usize, usize)> = ex.snippets.iter().map(|s| s.byte_span).collect();
        assert_eq!(spans, oracle, "document {id}");
        for s in &ex.snippets {
            assert_eq!(s.body, text[s.byte_span.0..s.byte_span.1]);
        }
        assert!(ex.diagnostics.is_empty());
        total += planted;
    }
    assert!(total >= 150);
}

#[test]
fn subfigure_siblings_are_numbered() {
    let text = "\\begin{figure}\n\\begin{subfigure}{1cm}\\begin{tikzpicture}\\end{tikzpicture}\\end{subfigure}\n\
                \\begin{subfigure}{1cm}\\begin{tikzcd}A\\end{tikzcd}\\end{subfigure}\n\\end{figure}";
    let ex = extract_environments(&common::document(0, text.to_string()));
    assert_eq!(ex.snippets.iter().map(|s| s.sibling_index).collect::<Vec<_>>(), [0, 1]);
}

#[test]
fn commented_and_verbatim_environments_are_ignored() {
    let text = "% \\begin{tikzpicture}\\end{tikzpicture}\n\\begin{verbatim}\n\\begin{tikzpicture}\\end{tikzpicture}\n\\end{verbatim}\n\\begin{tikzpicture}\\draw (0,0) -- (1,1); % note\n\\end{tikzpicture}";
    let ex = extract_environments(&common::document(0, text.to_string()));
    assert_eq!(ex.snippets.len(), 1);
    assert!(!strip_comments(&ex.snippets[0].body).contains("note"));
    assert!(strip_comments("50\\% done % gone").contains("50\\% done"));
}

#[test]
fn unclosed_environment_is_reported_not_extracted() {
    let text = "\\begin{tikzpicture}\\draw (0,0);\n\\begin{tikzpicture}\\end{tikzpicture}";
    let ex = extract_environments(&common::document(0, text.to_string()));
    assert_eq!(ex.snippets.len(), 1);
    assert_eq!(ex.diagnostics.len(), 1);
}
