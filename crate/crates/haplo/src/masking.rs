//! Hybrid attention masking: causal over text and timestep tokens,
//! bidirectional within vision and noise spans.

use crate::error::HaploError;

/// Modality tag of one sequence position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenType {
    Text,
    Vision,
    Timestep,
    Noise,
}

impl TokenType {
    /// Vision and noise spans attend bidirectionally inside the span.
    pub fn bidirectional(self) -> bool {
        matches!(self, TokenType::Vision | TokenType::Noise)
    }

    pub const ALL: [TokenType; 4] = [
        TokenType::Text,
        TokenType::Vision,
        TokenType::Timestep,
        TokenType::Noise,
    ];

    pub fn label(self) -> &'static str {
        match self {
            TokenType::Text => "Text",
            TokenType::Vision => "Vision",
            TokenType::Timestep => "Timestep",
            TokenType::Noise => "Noise",
        }
    }

    /// One-letter alphabet used by trace files and mask inspection:
    /// T(ext), V(ision), S(timestep), N(oise).
    pub fn to_char(self) -> char {
        match self {
            TokenType::Text => 'T',
            TokenType::Vision => 'V',
            TokenType::Timestep => 'S',
            TokenType::Noise => 'N',
        }
    }

    pub fn from_char(c: char) -> Result<Self, HaploError> {
        match c {
            'T' => Ok(TokenType::Text),
            'V' => Ok(TokenType::Vision),
            'S' => Ok(TokenType::Timestep),
            'N' => Ok(TokenType::Noise),
            other => Err(HaploError::Argument(format!(
                "unknown token type character {other:?}; expected T, V, S, or N"
            ))),
        }
    }
}

/// Per-position modality tags plus contiguous-span bookkeeping.
#[derive(Debug, Clone)]
pub struct TokenTypeSequence {
    tags: Vec<TokenType>,
    span_index: Vec<usize>,
}

impl TokenTypeSequence {
    pub fn new(tags: Vec<TokenType>) -> Result<Self, HaploError> {
        if tags.is_empty() {
            return Err(HaploError::Argument(
                "token type sequence must be nonempty".into(),
            ));
        }
        let mut span_index = Vec::with_capacity(tags.len());
        let mut span = 0usize;
        for (i, &t) in tags.iter().enumerate() {
            if i > 0 && t != tags[i - 1] {
                span += 1;
            }
            span_index.push(span);
        }
        Ok(TokenTypeSequence { tags, span_index })
    }

    pub fn push(&mut self, t: TokenType) {
        let span = match self.tags.last() {
            Some(&last) if last == t => *self.span_index.last().unwrap(),
            Some(_) => *self.span_index.last().unwrap() + 1,
            None => 0,
        };
        self.tags.push(t);
        self.span_index.push(span);
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn tags(&self) -> &[TokenType] {
        &self.tags
    }

    pub fn span(&self, i: usize) -> usize {
        self.span_index[i]
    }
}

/// L x L allow-grid; `allowed[q][k]` means query q may attend key k.
#[derive(Debug, Clone)]
pub struct AttentionMask {
    allowed: Vec<bool>,
    len: usize,
    tags: Vec<TokenType>,
}

impl AttentionMask {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.len + k]
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.allowed[q * self.len..(q + 1) * self.len]
    }

    pub fn tags(&self) -> &[TokenType] {
        &self.tags
    }

    /// Text rendering: '#' allowed, '·' disallowed.
    pub fn render(&self) -> String {
        let mut out = String::with_capacity(self.len * (self.len + 1));
        for q in 0..self.len {
            for k in 0..self.len {
                out.push(if self.allowed(q, k) { '#' } else { '·' });
            }
            out.push('\n');
        }
        out
    }
}

/// Build the hybrid mask for a type sequence:
/// (a) every position attends all strictly earlier spans,
/// (b) vision/noise spans are bidirectional inside the span,
/// (c) text/timestep spans are causal inside the span,
/// (d) no position attends a later span.
pub fn build_mask(seq: &TokenTypeSequence) -> AttentionMask {
    let n = seq.len();
    let mut allowed = vec![false; n * n];
    for q in 0..n {
        for k in 0..n {
            let sq = seq.span(q);
            let sk = seq.span(k);
            allowed[q * n + k] = sk < sq
                || (sk == sq && (seq.tags()[q].bidirectional() || k <= q));
        }
    }
    AttentionMask {
        allowed,
        len: n,
        tags: seq.tags().to_vec(),
    }
}

/// Grow a mask by one appended token without rebuilding the grid: copy the
/// old rows, fill the new row, and open the new column only for same-span
/// bidirectional queries.
pub fn extend_mask_for_decoding(mask: &AttentionMask, new_type: TokenType) -> AttentionMask {
    let old = mask.len;
    let n = old + 1;
    let mut allowed = vec![false; n * n];
    for q in 0..old {
        allowed[q * n..q * n + old].copy_from_slice(mask.row(q));
    }

    let same_span_as_last = mask
        .tags
        .last()
        .map(|&t| t == new_type)
        .unwrap_or(false);
    // Span id of each old position, recomputed from stored tags.
    let mut spans = Vec::with_capacity(old);
    let mut span = 0usize;
    for (i, &t) in mask.tags.iter().enumerate() {
        if i > 0 && t != mask.tags[i - 1] {
            span += 1;
        }
        spans.push(span);
    }
    let new_span = if same_span_as_last { span } else { span + 1 };
    let new_span = if old == 0 { 0 } else { new_span };

    // New row: earlier spans are fully visible and every same-span key
    // precedes the appended position, so the whole row is allowed.
    for k in 0..=old {
        allowed[old * n + k] = true;
    }

    // New column: an old query sees the appended key only when they share a
    // bidirectional span.
    if same_span_as_last && new_type.bidirectional() {
        for q in (0..old).rev() {
            if mask.tags[q] == new_type && spans[q] == new_span {
                allowed[q * n + old] = true;
            } else {
                break;
            }
        }
    }

    let mut tags = mask.tags.clone();
    tags.push(new_type);
    AttentionMask {
        allowed,
        len: n,
        tags,
    }
}

/// Independent evaluator of rules (a)-(d), written directly against the
/// rule text rather than span arithmetic. Kept alongside `build_mask` as the
/// reference the test and verification suites compare against.
pub fn rule_oracle(tags: &[TokenType]) -> Vec<Vec<bool>> {
    let n = tags.len();
    // Span id per position, derived by counting boundaries up to i.
    let span_of = |i: usize| -> usize { (1..=i).filter(|&j| tags[j] != tags[j - 1]).count() };
    let mut grid = vec![vec![false; n]; n];
    for q in 0..n {
        for k in 0..n {
            let (sq, sk) = (span_of(q), span_of(k));
            let v = if sk > sq {
                false // rule (d)
            } else if sk < sq {
                true // rule (a)
            } else if tags[q] == TokenType::Vision || tags[q] == TokenType::Noise {
                true // rule (b)
            } else {
                k <= q // rule (c)
            };
            grid[q][k] = v;
        }
    }
    grid
}
