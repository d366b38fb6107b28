//! Network Structure Codes: the 5-tuple layer descriptors every other module speaks.
//!
//! A code is `{layer index, op type, kernel, pred1, pred2}`. Predecessor value `0`
//! names the block input; a `pred2` of `0` on a one-input op means "unused".

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Layer operation, numbered as in the code table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum OpType {
    Convolution = 1,
    MaxPooling = 2,
    AveragePooling = 3,
    Identity = 4,
    ElementalAdd = 5,
    Concat = 6,
    Terminal = 7,
}

impl OpType {
    pub const ALL: [OpType; 7] = [
        OpType::Convolution,
        OpType::MaxPooling,
        OpType::AveragePooling,
        OpType::Identity,
        OpType::ElementalAdd,
        OpType::Concat,
        OpType::Terminal,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u32) -> Option<OpType> {
        match code {
            1 => Some(OpType::Convolution),
            2 => Some(OpType::MaxPooling),
            3 => Some(OpType::AveragePooling),
            4 => Some(OpType::Identity),
            5 => Some(OpType::ElementalAdd),
            6 => Some(OpType::Concat),
            7 => Some(OpType::Terminal),
            _ => None,
        }
    }

    /// Add and Concat consume two predecessors.
    pub fn is_binary(self) -> bool {
        matches!(self, OpType::ElementalAdd | OpType::Concat)
    }

    pub fn is_pooling(self) -> bool {
        matches!(self, OpType::MaxPooling | OpType::AveragePooling)
    }
}

impl fmt::Display for OpType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            OpType::Convolution => "Convolution",
            OpType::MaxPooling => "MaxPooling",
            OpType::AveragePooling => "AveragePooling",
            OpType::Identity => "Identity",
            OpType::ElementalAdd => "ElementalAdd",
            OpType::Concat => "Concat",
            OpType::Terminal => "Terminal",
        };
        f.write_str(name)
    }
}

/// One layer descriptor. Serializes as `[index, type, kernel, pred1, pred2]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "[u32; 5]", try_from = "[u32; 5]")]
pub struct NscCode {
    pub index: u8,
    pub op: OpType,
    /// Kernel size; in connection search this carries the block's channel width.
    pub kernel: u16,
    pub pred1: u8,
    pub pred2: u8,
}

impl NscCode {
    pub const fn new(index: u8, op: OpType, kernel: u16, pred1: u8, pred2: u8) -> Self {
        NscCode { index, op, kernel, pred1, pred2 }
    }

    pub const fn terminal(index: u8) -> Self {
        NscCode::new(index, OpType::Terminal, 0, 0, 0)
    }

    pub fn is_terminal(&self) -> bool {
        self.op == OpType::Terminal
    }

    /// The predecessors this layer actually reads.
    pub fn inputs(&self) -> impl Iterator<Item = u8> {
        let second = if self.op.is_binary() { Some(self.pred2) } else { None };
        let first = if self.op == OpType::Terminal { None } else { Some(self.pred1) };
        first.into_iter().chain(second)
    }

    /// Same code relocated to another position, with predecessors remapped.
    pub fn relabeled(&self, index: u8, map: impl Fn(u8) -> u8) -> Self {
        let pred2 = if self.op.is_binary() { map(self.pred2) } else { 0 };
        let pred1 = if self.op == OpType::Terminal { 0 } else { map(self.pred1) };
        NscCode { index, pred1, pred2, ..*self }
    }
}

impl From<NscCode> for [u32; 5] {
    fn from(c: NscCode) -> Self {
        [c.index as u32, c.op.code() as u32, c.kernel as u32, c.pred1 as u32, c.pred2 as u32]
    }
}

impl TryFrom<[u32; 5]> for NscCode {
    type Error = String;

    fn try_from(v: [u32; 5]) -> Result<Self, Self::Error> {
        let op = OpType::from_code(v[1]).ok_or_else(|| format!("unknown op type {}", v[1]))?;
        let narrow8 = |x: u32, what: &str| u8::try_from(x).map_err(|_| format!("{what} {x} out of range"));
        Ok(NscCode {
            index: narrow8(v[0], "layer index")?,
            op,
            kernel: u16::try_from(v[2]).map_err(|_| format!("kernel {} out of range", v[2]))?,
            pred1: narrow8(v[3], "pred1")?,
            pred2: narrow8(v[4], "pred2")?,
        })
    }
}

impl fmt::Display for NscCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{},{}", self.index, self.op.code(), self.kernel, self.pred1, self.pred2)
    }
}

/// Bounds on the code space for one search run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeSpaceLimits {
    pub max_layer_index: u8,
    /// Legal kernel values per op type; an op absent from the map is not allowed.
    pub kernels: BTreeMap<OpType, Vec<u16>>,
    /// Cap on pooling layers per trajectory (connection search only).
    #[serde(default)]
    pub max_pooling_layers: Option<u8>,
}

impl CodeSpaceLimits {
    /// The block search space: max index 23, every op type.
    pub fn block_search() -> Self {
        Self::block_search_with_max(23)
    }

    pub fn block_search_with_max(max_layer_index: u8) -> Self {
        let mut kernels = BTreeMap::new();
        kernels.insert(OpType::Convolution, vec![1, 3, 5]);
        kernels.insert(OpType::MaxPooling, vec![1, 3]);
        kernels.insert(OpType::AveragePooling, vec![1, 3]);
        kernels.insert(OpType::Identity, vec![0]);
        kernels.insert(OpType::ElementalAdd, vec![0]);
        kernels.insert(OpType::Concat, vec![0]);
        kernels.insert(OpType::Terminal, vec![0]);
        CodeSpaceLimits { max_layer_index, kernels, max_pooling_layers: None }
    }

    /// The connection search space: "convolution" codes stand for block instances whose
    /// kernel field is a channel width; max index 12, at most 5 pooling layers.
    pub fn connection_search() -> Self {
        let mut limits = Self::block_search_with_max(12);
        limits.kernels.insert(OpType::Convolution, vec![32, 64, 128, 256]);
        limits.max_pooling_layers = Some(5);
        limits
    }

    pub fn allows(&self, op: OpType) -> bool {
        self.kernels.contains_key(&op)
    }

    pub fn kernels_for(&self, op: OpType) -> &[u16] {
        self.kernels.get(&op).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Checks the limits themselves are usable.
    pub fn check(&self) -> Result<(), NscError> {
        if self.max_layer_index < 2 {
            return Err(NscError::Limits(format!(
                "max_layer_index must be at least 2, got {}",
                self.max_layer_index
            )));
        }
        if !self.allows(OpType::Terminal) {
            return Err(NscError::Limits("Terminal must be allowed".into()));
        }
        Ok(())
    }
}

impl Default for CodeSpaceLimits {
    fn default() -> Self {
        Self::block_search()
    }
}

/// Why a code is illegal at a position.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Rejection {
    #[error("layer index {found} does not match position {position}")]
    IndexMismatch { position: u32, found: u8 },
    #[error("position {position} exceeds max layer index {max}")]
    PositionOutOfRange { position: u32, max: u8 },
    #[error("op type {0} not allowed")]
    OpNotAllowed(OpType),
    #[error("kernel {kernel} not allowed for {op}")]
    KernelNotAllowed { op: OpType, kernel: u16 },
    #[error("pred1 {pred} out of range for position {position}")]
    Pred1OutOfRange { pred: u8, position: u32 },
    #[error("pred2 {pred} out of range for position {position}")]
    Pred2OutOfRange { pred: u8, position: u32 },
    #[error("pred2 must be 0 for {0}")]
    Pred2NotZero(OpType),
    #[error("pred1 and pred2 must differ for {0}")]
    SamePredecessors(OpType),
    #[error("Terminal requires pred1 = pred2 = 0")]
    TerminalPredecessors,
    #[error("only Terminal is allowed at max layer index {0}")]
    TerminalRequired(u8),
}

impl Rejection {
    /// Stable machine-readable tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Rejection::IndexMismatch { .. } => "index_mismatch",
            Rejection::PositionOutOfRange { .. } => "position_out_of_range",
            Rejection::OpNotAllowed(_) => "op_not_allowed",
            Rejection::KernelNotAllowed { .. } => "kernel_not_allowed",
            Rejection::Pred1OutOfRange { .. } => "pred1_out_of_range",
            Rejection::Pred2OutOfRange { .. } => "pred2_out_of_range",
            Rejection::Pred2NotZero(_) => "pred2_not_zero",
            Rejection::SamePredecessors(_) => "same_predecessors",
            Rejection::TerminalPredecessors => "terminal_predecessors",
            Rejection::TerminalRequired(_) => "terminal_required",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NscError {
    #[error("position {position} outside 1..={max}")]
    Range { position: u32, max: u8 },
    #[error("parse error at column {column}: {message}")]
    Parse { column: usize, message: String },
    #[error("invalid code space limits: {0}")]
    Limits(String),
}

/// Checks one code at a 1-based position. Never panics.
pub fn validate_code(code: &NscCode, position: u32, limits: &CodeSpaceLimits) -> Result<(), Rejection> {
    if position == 0 || position > limits.max_layer_index as u32 {
        return Err(Rejection::PositionOutOfRange { position, max: limits.max_layer_index });
    }
    if code.index as u32 != position {
        return Err(Rejection::IndexMismatch { position, found: code.index });
    }
    let Some(kernels) = limits.kernels.get(&code.op) else {
        return Err(Rejection::OpNotAllowed(code.op));
    };
    if position == limits.max_layer_index as u32 && code.op != OpType::Terminal {
        return Err(Rejection::TerminalRequired(limits.max_layer_index));
    }
    if !kernels.contains(&code.kernel) {
        return Err(Rejection::KernelNotAllowed { op: code.op, kernel: code.kernel });
    }
    match code.op {
        OpType::Terminal => {
            if code.pred1 != 0 || code.pred2 != 0 {
                return Err(Rejection::TerminalPredecessors);
            }
        }
        op if op.is_binary() => {
            if code.pred1 as u32 >= position {
                return Err(Rejection::Pred1OutOfRange { pred: code.pred1, position });
            }
            if code.pred2 == 0 || code.pred2 as u32 >= position {
                return Err(Rejection::Pred2OutOfRange { pred: code.pred2, position });
            }
            if code.pred1 == code.pred2 {
                return Err(Rejection::SamePredecessors(op));
            }
        }
        op => {
            if code.pred1 as u32 >= position {
                return Err(Rejection::Pred1OutOfRange { pred: code.pred1, position });
            }
            if code.pred2 != 0 {
                return Err(Rejection::Pred2NotZero(op));
            }
        }
    }
    Ok(())
}

/// Every legal code at `position`, sorted by field tuple.
pub fn enumerate_actions(position: u32, limits: &CodeSpaceLimits) -> Result<Vec<NscCode>, NscError> {
    if position == 0 || position > limits.max_layer_index as u32 {
        return Err(NscError::Range { position, max: limits.max_layer_index });
    }
    let index = position as u8;
    if position == limits.max_layer_index as u32 {
        return Ok(vec![NscCode::terminal(index)]);
    }
    let mut out = Vec::new();
    for (&op, kernels) in &limits.kernels {
        for &kernel in kernels {
            match op {
                OpType::Terminal => {
                    if kernel == 0 {
                        out.push(NscCode::terminal(index));
                    }
                }
                op if op.is_binary() => {
                    for p1 in 0..index {
                        for p2 in 1..index {
                            if p1 != p2 {
                                out.push(NscCode::new(index, op, kernel, p1, p2));
                            }
                        }
                    }
                }
                op => {
                    for p1 in 0..index {
                        out.push(NscCode::new(index, op, kernel, p1, 0));
                    }
                }
            }
        }
    }
    out.sort();
    debug_assert!(out.iter().all(|c| validate_code(c, position, limits).is_ok()));
    Ok(out)
}

/// Canonical single-line text form: codes joined by `;`, fields by `,`.
pub fn serialize_block(codes: &[NscCode]) -> String {
    let mut s = String::with_capacity(codes.len() * 12);
    for (i, c) in codes.iter().enumerate() {
        if i > 0 {
            s.push(';');
        }
        s.push_str(&c.to_string());
    }
    s
}

/// Parses the canonical text form. A trailing newline is tolerated.
pub fn parse_block(text: &str) -> Result<Vec<NscCode>, NscError> {
    let text = text.strip_suffix('\n').unwrap_or(text);
    let text = text.strip_suffix('\r').unwrap_or(text);
    if text.is_empty() {
        return Err(NscError::Parse { column: 1, message: "empty input".into() });
    }
    let mut codes = Vec::new();
    let mut column = 1usize;
    for chunk in text.split(';') {
        let mut fields = [0u32; 5];
        let mut n = 0usize;
        let mut field_col = column;
        for field in chunk.split(',') {
            if n == 5 {
                return Err(NscError::Parse { column: field_col, message: "more than 5 fields in code".into() });
            }
            if field.is_empty() || !field.bytes().all(|b| b.is_ascii_digit()) {
                return Err(NscError::Parse {
                    column: field_col,
                    message: format!("expected unsigned integer, found {field:?}"),
                });
            }
            fields[n] = field.parse().map_err(|_| NscError::Parse {
                column: field_col,
                message: format!("integer {field} out of range"),
            })?;
            n += 1;
            field_col += field.len() + 1;
        }
        if n != 5 {
            return Err(NscError::Parse {
                column: column + chunk.len(),
                message: format!("expected 5 fields, found {n}"),
            });
        }
        let code = NscCode::try_from(fields).map_err(|message| NscError::Parse { column, message })?;
        codes.push(code);
        column += chunk.len() + 1;
    }
    Ok(codes)
}

/// Newtype for a block's code list with the canonical text form as `Display`/`FromStr`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BlockCodes(pub Vec<NscCode>);

impl fmt::Display for BlockCodes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serialize_block(&self.0))
    }
}

impl FromStr for BlockCodes {
    type Err = NscError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_block(s).map(BlockCodes)
    }
}

/// Validates a whole code list: each code at its position, ending at the first Terminal.
pub fn validate_block(codes: &[NscCode], limits: &CodeSpaceLimits) -> Result<(), (usize, Rejection)> {
    for (i, code) in codes.iter().enumerate() {
        validate_code(code, i as u32 + 1, limits).map_err(|r| (i, r))?;
        if code.is_terminal() {
            break;
        }
    }
    Ok(())
}
