/// Contents of the first fenced code block in `raw`.
///
/// A fence is a line starting (after indentation) with three or more
/// backticks, optionally followed by a language tag. The block closes at the
/// next line made only of at least as many backticks; an unclosed block runs
/// to the end of the text. Fence lines are dropped and the inner text is
/// returned verbatim.
pub fn extract_code(raw: &str) -> Option<String> {
    let mut lines = raw.split('\n');
    let fence_len = loop {
        let line = lines.next()?;
        if let Some(n) = opening_fence(line) {
            break n;
        }
    };
    let mut body: Vec<&str> = Vec::new();
    for line in lines {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if closes(line, fence_len) {
            return Some(body.join("\n"));
        }
        body.push(line);
    }
    Some(body.join("\n"))
}

fn opening_fence(line: &str) -> Option<usize> {
    let trimmed = line.trim_start();
    let ticks = trimmed.chars().take_while(|c| *c == '`').count();
    if ticks < 3 {
        return None;
    }
    // backticks are not allowed in the info string of a backtick fence
    if trimmed[ticks..].contains('`') {
        return None;
    }
    Some(ticks)
}

fn closes(line: &str, fence_len: usize) -> bool {
    let t = line.trim();
    t.len() >= fence_len && t.chars().all(|c| c == '`')
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_fenced_block() {
        assert_eq!(extract_code("```\ndef f(): pass\n```").as_deref(), Some("def f(): pass"));
    }

    #[test]
    fn language_tag_dropped() {
        assert_eq!(extract_code("```python\nx=1\n```").as_deref(), Some("x=1"));
    }

    #[test]
    fn prose_only_is_unqualified() {
        assert_eq!(extract_code("no code here"), None);
        assert_eq!(extract_code(""), None);
        assert_eq!(extract_code("inline ```code``` only"), None);
    }

    #[test]
    fn first_of_two_blocks() {
        let raw = "Here:\n```python\na = 1\n```\nand tests:\n```python\nb = 2\n```\n";
        assert_eq!(extract_code(raw).as_deref(), Some("a = 1"));
    }

    #[test]
    fn inner_backticks_and_whitespace_preserved() {
        let raw = "````\ns = \"```\"\n```\n\n    indented\n````";
        assert_eq!(extract_code(raw).as_deref(), Some("s = \"```\"\n```\n\n    indented"));
        let raw = "```py\nx = '``'\n  ```\n";
        assert_eq!(extract_code(raw).as_deref(), Some("x = '``'"));
    }

    #[test]
    fn unclosed_block_runs_to_end_and_crlf() {
        assert_eq!(extract_code("```\na\nb").as_deref(), Some("a\nb"));
        assert_eq!(extract_code("```\r\nx = 1\r\n```\r\n").as_deref(), Some("x = 1"));
        assert_eq!(extract_code("```\n```").as_deref(), Some(""));
    }
}
