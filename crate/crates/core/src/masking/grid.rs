use crate::error::{Error, Result};

/// Codeword index at one depth; `MASK` is the absorbing state.
pub type Token = u32;

/// Reserved sentinel outside every vocabulary.
pub const MASK: Token = Token::MAX;

/// An `L × D` grid of codeword indices, stored position-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    len: usize,
    depth: usize,
    tokens: Vec<Token>,
}

impl TokenGrid {
    pub fn masked(len: usize, depth: usize) -> Self {
        TokenGrid {
            len,
            depth,
            tokens: vec![MASK; len * depth],
        }
    }

    pub fn from_tokens(len: usize, depth: usize, tokens: Vec<Token>) -> Result<Self> {
        if tokens.len() != len * depth {
            return Err(Error::Dimension {
                expected: len * depth,
                found: tokens.len(),
            });
        }
        Ok(TokenGrid { len, depth, tokens })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    /// Token at position `i`, zero-based depth `j`.
    pub fn get(&self, i: usize, j: usize) -> Token {
        self.tokens[i * self.depth + j]
    }

    pub fn set(&mut self, i: usize, j: usize, token: Token) {
        self.tokens[i * self.depth + j] = token;
    }

    pub fn position(&self, i: usize) -> &[Token] {
        &self.tokens[i * self.depth..(i + 1) * self.depth]
    }

    /// Number of leading non-MASK tokens at position `i`.
    pub fn revealed_depth(&self, i: usize) -> usize {
        self.position(i).iter().take_while(|&&t| t != MASK).count()
    }

    /// Checks that MASK never sits below a revealed token.
    pub fn check_depth_prefix(&self) -> Result<()> {
        for i in 0..self.len {
            let d = self.revealed_depth(i);
            if self.position(i)[d..].iter().any(|&t| t != MASK) {
                return Err(Error::DepthSuffix(i));
            }
        }
        Ok(())
    }

    /// Copy of the grid with every depth at or beyond `D − masked[i]` set to MASK.
    pub fn apply_mask(&self, state: &MaskState) -> TokenGrid {
        let mut out = self.clone();
        for i in 0..self.len {
            for j in state.visible(i)..self.depth {
                out.set(i, j, MASK);
            }
        }
        out
    }

    /// Depth-major text rendering: depth 0 for all positions, then depth 1, ...
    /// MASK renders as `_`.
    pub fn to_depth_major_line(&self) -> String {
        let mut parts = Vec::with_capacity(self.tokens.len());
        for j in 0..self.depth {
            for i in 0..self.len {
                let t = self.get(i, j);
                parts.push(if t == MASK {
                    "_".to_string()
                } else {
                    t.to_string()
                });
            }
        }
        parts.join(" ")
    }
}

/// Binary mask in count form: position `i` has its deepest `masked[i]` depths masked.
///
/// Storing counts makes the depth-suffix shape hold by construction.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MaskState {
    len: usize,
    depth: usize,
    masked: Vec<usize>,
    pub step: usize,
}

impl MaskState {
    pub fn fully_masked(len: usize, depth: usize) -> Self {
        MaskState {
            len,
            depth,
            masked: vec![depth; len],
            step: 0,
        }
    }

    pub fn unmasked(len: usize, depth: usize) -> Self {
        MaskState {
            len,
            depth,
            masked: vec![0; len],
            step: 0,
        }
    }

    pub fn from_counts(depth: usize, masked: Vec<usize>) -> Result<Self> {
        if let Some(i) = masked.iter().position(|&q| q > depth) {
            return Err(Error::invalid(format!(
                "position {i} masks {} of {depth} depths",
                masked[i]
            )));
        }
        Ok(MaskState {
            len: masked.len(),
            depth,
            masked,
            step: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Per-position masked counts `q_i`.
    pub fn masked_counts(&self) -> &[usize] {
        &self.masked
    }

    pub fn masked_count(&self, i: usize) -> usize {
        self.masked[i]
    }

    /// Number of revealed (shallowest) depths at position `i`.
    pub fn visible(&self, i: usize) -> usize {
        self.depth - self.masked[i]
    }

    pub fn total_masked(&self) -> usize {
        self.masked.iter().sum()
    }

    /// `m_{i,j}` with 1 = visible, 0 = masked.
    pub fn bit(&self, i: usize, j: usize) -> u8 {
        u8::from(j < self.visible(i))
    }

    /// Row-major `L × D` mask bits.
    pub fn bits(&self) -> Vec<u8> {
        (0..self.len)
            .flat_map(|i| (0..self.depth).map(move |j| (i, j)))
            .map(|(i, j)| self.bit(i, j))
            .collect()
    }

    /// Reveals the next `k` shallowest masked depths at position `i`.
    pub fn reveal(&mut self, i: usize, k: usize) {
        assert!(k <= self.masked[i], "cannot reveal more than is masked");
        self.masked[i] -= k;
    }
}
