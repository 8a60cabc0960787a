//! Private dataset files: one example per line, `prompt ids | target ids`,
//! whitespace-separated; blank lines and `#` comments are ignored.

use crate::error::{Error, Result};
use crate::model::{Example, TokenId};

pub fn parse_dataset(text: &str, vocab: usize) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (p, t) = line
            .split_once('|')
            .ok_or_else(|| Error::Input(format!("line {}: expected `prompt | target`", i + 1)))?;
        let ids = |s: &str| -> Result<Vec<TokenId>> {
            s.split_whitespace()
                .map(|w| {
                    let id: TokenId = w
                        .parse()
                        .map_err(|_| Error::Input(format!("line {}: `{w}` is not a token id", i + 1)))?;
                    if id as usize >= vocab {
                        return Err(Error::Input(format!("line {}: token {id} outside vocabulary {vocab}", i + 1)));
                    }
                    Ok(id)
                })
                .collect()
        };
        let (prompt, target) = (ids(p)?, ids(t)?);
        if prompt.is_empty() || target.is_empty() {
            return Err(Error::Input(format!("line {}: prompt and target must be non-empty", i + 1)));
        }
        out.push(Example::new(prompt, target));
    }
    if out.is_empty() {
        return Err(Error::Input("dataset holds no examples".into()));
    }
    Ok(out)
}

pub fn format_dataset(examples: &[Example]) -> String {
    let join = |ids: &[TokenId]| ids.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ");
    examples
        .iter()
        .map(|e| format!("{} | {}\n", join(&e.prompt), join(&e.target)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_format_round_trip() {
        let text = "# pairs\n1 2 3 | 4 5\n\n7 | 8  # trailing\n";
        let ex = parse_dataset(text, 10).unwrap();
        assert_eq!(ex.len(), 2);
        assert_eq!(ex[1].prompt, vec![7]);
        assert_eq!(parse_dataset(&format_dataset(&ex), 10).unwrap(), ex);
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(parse_dataset("1 2 3", 10).is_err());
        assert!(parse_dataset("1 | 12", 10).is_err());
        assert!(parse_dataset("1 | x", 10).is_err());
        assert!(parse_dataset("# nothing\n", 10).is_err());
    }
}
