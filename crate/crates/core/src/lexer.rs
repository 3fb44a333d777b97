//! Best-effort lexical scanner for Python code cells.
//!
//! The scanner never fails: unterminated strings run to the end of their line
//! (or the end of input for triple-quoted strings), unbalanced brackets are
//! clamped at depth zero, and unknown characters become single-character
//! operator tokens. Comments are dropped. Physical lines are folded into
//! logical lines across open brackets and trailing backslashes, and logical
//! lines are split into simple statements at top-level semicolons.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Name,
    Number,
    Str,
    Op,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Token<'a> {
    pub kind: TokenKind,
    pub text: &'a str,
    /// 1-based physical line of the first character.
    pub line: usize,
    /// Byte offset of the first character.
    pub start: usize,
    /// Bracket nesting depth outside this token.
    pub depth: u32,
}

impl<'a> Token<'a> {
    pub fn is_name(&self, name: &str) -> bool {
        self.kind == TokenKind::Name && self.text == name
    }

    pub fn is_op(&self, op: &str) -> bool {
        self.kind == TokenKind::Op && self.text == op
    }

    pub fn end(&self) -> usize {
        self.start + self.text.len()
    }

    /// Contents of a string literal without prefix and quotes. Escapes are
    /// left as written.
    pub fn string_value(&self) -> Option<&'a str> {
        if self.kind != TokenKind::Str {
            return None;
        }
        let body = self.text.trim_start_matches(|c: char| c.is_ascii_alphabetic());
        let quote = if body.starts_with("\"\"\"") || body.starts_with("'''") {
            &body[..3]
        } else {
            &body[..1]
        };
        let inner = &body[quote.len()..];
        Some(inner.strip_suffix(quote).unwrap_or(inner))
    }

    /// True for string tokens carrying an `f` prefix.
    pub fn is_fstring(&self) -> bool {
        self.kind == TokenKind::Str
            && self
                .text
                .chars()
                .take_while(|c| c.is_ascii_alphabetic())
                .any(|c| c == 'f' || c == 'F')
    }
}

/// One simple statement: a logical line, or a `;`-separated piece of one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Statement<'a> {
    pub line: usize,
    /// Indentation width of the logical line the statement belongs to.
    pub indent: usize,
    pub tokens: Vec<Token<'a>>,
    src: &'a str,
}

impl<'a> Statement<'a> {
    pub fn start(&self) -> usize {
        self.tokens.first().map_or(0, |t| t.start)
    }

    pub fn end(&self) -> usize {
        self.tokens.last().map_or(0, |t| t.end())
    }

    /// Source text from the first to the last token, comments and
    /// continuation lines included verbatim.
    pub fn text(&self) -> &'a str {
        &self.src[self.start()..self.end()]
    }

    pub fn first_name(&self) -> Option<&'a str> {
        self.tokens
            .first()
            .filter(|t| t.kind == TokenKind::Name)
            .map(|t| t.text)
    }
}

pub const KEYWORDS: &[&str] = &[
    "False", "None", "True", "and", "as", "assert", "async", "await", "break", "class",
    "continue", "def", "del", "elif", "else", "except", "finally", "for", "from", "global",
    "if", "import", "in", "is", "lambda", "nonlocal", "not", "or", "pass", "raise", "return",
    "try", "while", "with", "yield",
];

pub fn is_keyword(word: &str) -> bool {
    KEYWORDS.contains(&word)
}

const THREE_CHAR_OPS: &[&str] = &["**=", "//=", ">>=", "<<=", "..."];
const TWO_CHAR_OPS: &[&str] = &[
    "==", "!=", "<=", ">=", "->", ":=", "**", "//", "<<", ">>", "+=", "-=", "*=", "/=", "%=",
    "&=", "|=", "^=", "@=",
];

struct Scanner<'a> {
    src: &'a str,
    bytes: &'a [u8],
    pos: usize,
    line: usize,
    depth: u32,
}

impl<'a> Scanner<'a> {
    fn peek(&self, offset: usize) -> Option<u8> {
        self.bytes.get(self.pos + offset).copied()
    }

    fn string_prefix_len(&self) -> Option<usize> {
        let mut n = 0;
        while n < 2 {
            match self.peek(n) {
                Some(b'r' | b'R' | b'b' | b'B' | b'u' | b'U' | b'f' | b'F') => n += 1,
                _ => break,
            }
        }
        match self.peek(n) {
            Some(b'"' | b'\'') => Some(n),
            _ => None,
        }
    }

    fn scan_string(&mut self, prefix: usize) {
        self.pos += prefix;
        let quote = self.bytes[self.pos];
        let triple = self.peek(1) == Some(quote) && self.peek(2) == Some(quote);
        self.pos += if triple { 3 } else { 1 };
        while let Some(b) = self.peek(0) {
            match b {
                b'\\' => {
                    if self.peek(1) == Some(b'\n') {
                        self.line += 1;
                    }
                    self.pos += 2;
                }
                b'\n' if !triple => return,
                b'\n' => {
                    self.line += 1;
                    self.pos += 1;
                }
                _ if b == quote => {
                    if !triple {
                        self.pos += 1;
                        return;
                    }
                    if self.peek(1) == Some(quote) && self.peek(2) == Some(quote) {
                        self.pos += 3;
                        return;
                    }
                    self.pos += 1;
                }
                _ => self.pos += 1,
            }
        }
        self.pos = self.pos.min(self.bytes.len());
    }

    fn scan_number(&mut self) {
        let start = self.pos;
        while let Some(b) = self.peek(0) {
            let hex = self.src[start..self.pos].starts_with("0x")
                || self.src[start..self.pos].starts_with("0X");
            if (b == b'e' || b == b'E') && matches!(self.peek(1), Some(b'+' | b'-')) && !hex {
                self.pos += 2;
            } else if b.is_ascii_alphanumeric() || b == b'_' || b == b'.' {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn scan_name(&mut self) {
        let rest = &self.src[self.pos..];
        let len = rest
            .char_indices()
            .find(|&(_, c)| !(c.is_alphanumeric() || c == '_'))
            .map_or(rest.len(), |(i, _)| i);
        self.pos += len;
    }

    fn scan_op(&mut self) {
        let rest = &self.src[self.pos..];
        for op in THREE_CHAR_OPS.iter().chain(TWO_CHAR_OPS) {
            if rest.starts_with(op) {
                self.pos += op.len();
                return;
            }
        }
        self.pos += rest.chars().next().map_or(1, char::len_utf8);
    }
}

/// A logical line: physical lines joined across brackets and backslashes.
#[derive(Debug, Clone)]
pub struct LogicalLine<'a> {
    pub line: usize,
    pub indent: usize,
    pub tokens: Vec<Token<'a>>,
}

pub fn logical_lines(src: &str) -> Vec<LogicalLine<'_>> {
    let mut sc = Scanner {
        src,
        bytes: src.as_bytes(),
        pos: 0,
        line: 1,
        depth: 0,
    };
    let mut out = Vec::new();
    let mut current: Vec<Token<'_>> = Vec::new();
    let mut indent = 0usize;
    let mut at_line_start = true;

    while sc.pos < sc.bytes.len() {
        if at_line_start {
            indent = 0;
            while let Some(b) = sc.peek(0) {
                match b {
                    b' ' => indent += 1,
                    b'\t' => indent = (indent / 8 + 1) * 8,
                    b'\x0c' => indent = 0,
                    _ => break,
                }
                sc.pos += 1;
            }
            at_line_start = false;
            continue;
        }
        let b = sc.bytes[sc.pos];
        match b {
            b'\n' => {
                sc.pos += 1;
                sc.line += 1;
                if sc.depth == 0 {
                    if !current.is_empty() {
                        out.push(LogicalLine {
                            line: current[0].line,
                            indent,
                            tokens: std::mem::take(&mut current),
                        });
                    }
                    at_line_start = true;
                }
            }
            b'\\' if sc.peek(1) == Some(b'\n') => {
                sc.pos += 2;
                sc.line += 1;
            }
            b'\\' if sc.peek(1) == Some(b'\r') && sc.peek(2) == Some(b'\n') => {
                sc.pos += 3;
                sc.line += 1;
            }
            b'#' => {
                while sc.peek(0).is_some_and(|c| c != b'\n') {
                    sc.pos += 1;
                }
            }
            b' ' | b'\t' | b'\r' | b'\x0c' => sc.pos += 1,
            _ => {
                let start = sc.pos;
                let line = sc.line;
                if matches!(b, b')' | b']' | b'}') {
                    sc.depth = sc.depth.saturating_sub(1);
                }
                let depth = sc.depth;
                let kind = if let Some(prefix) = sc.string_prefix_len() {
                    sc.scan_string(prefix);
                    TokenKind::Str
                } else if b.is_ascii_digit()
                    || (b == b'.' && sc.peek(1).is_some_and(|c| c.is_ascii_digit()))
                {
                    sc.scan_number();
                    TokenKind::Number
                } else if b == b'_' || b.is_ascii_alphabetic() || b >= 0x80 && {
                    let c = src[start..].chars().next().unwrap_or(' ');
                    c.is_alphabetic()
                } {
                    sc.scan_name();
                    TokenKind::Name
                } else {
                    if matches!(b, b'(' | b'[' | b'{') {
                        sc.depth += 1;
                    }
                    sc.scan_op();
                    TokenKind::Op
                };
                current.push(Token {
                    kind,
                    text: &src[start..sc.pos],
                    line,
                    start,
                    depth,
                });
            }
        }
    }
    if !current.is_empty() {
        out.push(LogicalLine {
            line: current[0].line,
            indent,
            tokens: current,
        });
    }
    out
}

/// Every token in source order, comments excluded.
pub fn tokenize(src: &str) -> Vec<Token<'_>> {
    logical_lines(src)
        .into_iter()
        .flat_map(|l| l.tokens)
        .collect()
}

/// Simple statements in source order.
pub fn statements(src: &str) -> Vec<Statement<'_>> {
    let mut out = Vec::new();
    for ll in logical_lines(src) {
        let base = ll.tokens[0].depth;
        let mut piece: Vec<Token<'_>> = Vec::new();
        for tok in ll.tokens {
            if tok.is_op(";") && tok.depth == base {
                if !piece.is_empty() {
                    out.push(Statement {
                        line: piece[0].line,
                        indent: ll.indent,
                        tokens: std::mem::take(&mut piece),
                        src,
                    });
                }
            } else {
                piece.push(tok);
            }
        }
        if !piece.is_empty() {
            out.push(Statement {
                line: piece[0].line,
                indent: ll.indent,
                tokens: piece,
                src,
            });
        }
    }
    out
}
