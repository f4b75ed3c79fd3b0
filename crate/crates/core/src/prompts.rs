//! Fixed prompt templates for repair, description and generation requests.

pub const REPAIR_INSTRUCTION: &str = "I will provide you with some TikZ code and the corresponding LaTeX error log. Fix the TikZ code so that it compiles without errors. Only output the corrected TikZ code.";
pub const REPAIR_CODE_HEADER: &str = "Original TikZ Code:";
pub const REPAIR_LOG_HEADER: &str = "Compilation Error Log:";

/// `{tikz_code}` and `{log_message}` are substituted once each.
pub const REPAIR_TEMPLATE: &str = "I will provide you with some TikZ code and the corresponding LaTeX error log. Fix the TikZ code so that it compiles without errors. Only output the corrected TikZ code.\n\nOriginal TikZ Code:\n{tikz_code}\n\nCompilation Error Log:\n{log_message}";

pub const DESCRIBE_INSTRUCTIONS: [&str; 8] = [
    "You are a scientific illustrator describing images for precise redrawing in TikZ.",
    "Your task is to describe the image in precise, continuous prose without bullet points, lists, or line breaks.",
    "Start directly with the main object or scene. Avoid introductory phrases like 'Certainly!', 'The image depicts...', 'Here is a precise description.'.",
    "Use clear, active language focused on geometry, labels, colors, spatial relationships, coordinates, and other visible properties.",
    "Describe all visible elements such as shapes, lines, arrows, and labels, including their relative or absolute positions, dimensions, and orientation.",
    "Use consistent, minimal naming for objects (e.g., 'circle A', 'line L1') and specify label positions relative to shapes precisely.",
    "Only describe exact, concrete visual elements that enable precise image reconstruction in TikZ.",
    "Avoid vague, interpretive, or inferential language, and exclude summaries, conclusions, or commentary about the image's meaning, function, or aesthetics.",
];

pub const DESCRIBE_EXAMPLES_HEADER: &str = "Here are a few examples:";

pub const DESCRIBE_EXAMPLES: [&str; 2] = [
    "A thin black horizontal line centered in the middle, containing nine evenly spaced black dots, and labeled $x_2$ at the left. Each dot is connected by a thin black line in an alternating pattern to either $x_0$ (placed at the top middle) or $x_1$ (placed at the bottom middle).",
    "A line chart has different instruction scales of 1/10, 1/4, 1/2, and 1 on the x-axis. On the y-axis it shows BLEU scores between 20 and 50, with steps of 5. The chart contains three lines with Zh-En in blue, De-En in red, and Fr-En in brown. All BLEU scores are initially 20 at the lowest instruction scale. As the instruction scale increases, BLEU scores improve for all pairs. De-En is the highest, closely followed by Fr-En and then Zh-En far below. The increase is largest from 1/10 to 1/4 and only marginally above an instruction scale of 1/4. The legend is placed inside the chart at the top left.",
];

pub const DESCRIBE_CLOSING: &str = "Write a description in this exact style for the given image.";

/// `{figure_description}` is substituted once.
pub const GENERATION_TEMPLATE: &str = "Generate a complete LaTeX document that contains a TikZ figure according to the following requirements:\n{figure_description}\nWrap your code using \\documentclass[tikz]{standalone}, and include \\begin{document}...\\end{document}. Only output valid LaTeX code with no extra text.";

/// Substitutes each `(placeholder, value)` in order, scanning the template once so
/// that placeholder-like text inside values is left alone.
pub fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + values.iter().map(|(_, v)| v.len()).sum::<usize>());
    let mut rest = template;
    'outer: while !rest.is_empty() {
        for (key, value) in values {
            if let Some(tail) = rest.strip_prefix(key) {
                out.push_str(value);
                rest = tail;
                continue 'outer;
            }
        }
        let ch = rest.chars().next().expect("non-empty");
        out.push(ch);
        rest = &rest[ch.len_utf8()..];
    }
    out
}

pub fn repair_prompt(code: &str, log: &str) -> String {
    fill(REPAIR_TEMPLATE, &[("{tikz_code}", code), ("{log_message}", log)])
}

pub fn describe_prompt() -> String {
    let mut parts: Vec<&str> = DESCRIBE_INSTRUCTIONS.to_vec();
    parts.push(DESCRIBE_EXAMPLES_HEADER);
    parts.extend(DESCRIBE_EXAMPLES);
    parts.push(DESCRIBE_CLOSING);
    parts.join("\n\n")
}

pub fn generation_prompt(figure_description: &str) -> String {
    fill(GENERATION_TEMPLATE, &[("{figure_description}", figure_description)])
}
