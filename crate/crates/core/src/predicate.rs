//! Atomic payload comparisons shared by conformance steps and permission
//! constraints, plus the wildcard matcher used for resource and goal
//! patterns.

use serde::{Deserialize, Serialize};

use crate::telemetry::{Event, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CmpOp {
    #[serde(rename = "eq", alias = "==")]
    Eq,
    #[serde(rename = "ne", alias = "!=")]
    Ne,
    #[serde(rename = "ge", alias = ">=")]
    Ge,
    #[serde(rename = "le", alias = "<=")]
    Le,
    #[serde(rename = "gt", alias = ">")]
    Gt,
    #[serde(rename = "lt", alias = "<")]
    Lt,
}

impl CmpOp {
    /// Compares `lhs op rhs`. Ordering ops need numbers on both sides; a
    /// missing or non-numeric value never satisfies them.
    pub fn apply(self, lhs: &Scalar, rhs: &Scalar) -> bool {
        match self {
            CmpOp::Eq => lhs.loosely_eq(rhs),
            CmpOp::Ne => !lhs.loosely_eq(rhs),
            _ => match (lhs.as_f64(), rhs.as_f64()) {
                (Some(a), Some(b)) => match self {
                    CmpOp::Ge => a >= b,
                    CmpOp::Le => a <= b,
                    CmpOp::Gt => a > b,
                    CmpOp::Lt => a < b,
                    CmpOp::Eq | CmpOp::Ne => unreachable!(),
                },
                _ => false,
            },
        }
    }
}

/// `payload[key] op value`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub key: String,
    pub op: CmpOp,
    pub value: Scalar,
}

impl Condition {
    pub fn new(key: impl Into<String>, op: CmpOp, value: impl Into<Scalar>) -> Self {
        Self {
            key: key.into(),
            op,
            value: value.into(),
        }
    }

    /// An absent key fails every op except `ne`.
    pub fn eval(&self, event: &Event) -> bool {
        match event.payload.get(&self.key) {
            Some(v) => self.op.apply(v, &self.value),
            None => self.op == CmpOp::Ne,
        }
    }
}

/// Wildcard match where `*` matches any run of characters (including none).
pub fn glob_match(pattern: &str, text: &str) -> bool {
    let p = pattern.as_bytes();
    let t = text.as_bytes();
    let (mut pi, mut ti) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while ti < t.len() {
        if pi < p.len() && p[pi] == b'*' {
            star = Some((pi, ti));
            pi += 1;
        } else if pi < p.len() && p[pi] == t[ti] {
            pi += 1;
            ti += 1;
        } else if let Some((sp, st)) = star {
            pi = sp + 1;
            ti = st + 1;
            star = Some((sp, st + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|&c| c == b'*')
}
