//! Mixed point/text sequence layout:
//! `[<bos>, <p_start>, point tokens ×M, <p_end>, instruction, response]`,
//! where a supervised response ends in `<eos>`.

use crate::error::{Error, Result};
use crate::lm::vocab::{BOS, PAD, P_END, P_START};

/// Index of the first point token.
pub const POINT_OFFSET: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sequence {
    /// Token id per position; point positions hold `<pad>` as a placeholder.
    pub ids: Vec<usize>,
    pub n_points: usize,
    pub instruction_len: usize,
    pub response_len: usize,
    /// Next-token label per position (`<pad>` where masked).
    pub targets: Vec<usize>,
    /// True where the next token belongs to the response.
    pub loss_mask: Vec<bool>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `<bos>, <p_start>`.
    pub fn prefix_ids(&self) -> &[usize] {
        &self.ids[..POINT_OFFSET]
    }

    /// Everything after the point span, starting at `<p_end>`.
    pub fn suffix_ids(&self) -> &[usize] {
        &self.ids[POINT_OFFSET + self.n_points..]
    }

    pub fn response_start(&self) -> usize {
        self.len() - self.response_len
    }

    pub fn is_point(&self, pos: usize) -> bool {
        (POINT_OFFSET..POINT_OFFSET + self.n_points).contains(&pos)
    }

    pub fn n_active(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

pub fn build_sequence(n_points: usize, instruction: &[usize], response: &[usize], max_ctx: usize) -> Result<Sequence> {
    let len = POINT_OFFSET + n_points + 1 + instruction.len() + response.len();
    if len > max_ctx {
        return Err(Error::ContextOverflow {
            len,
            max_ctx,
            points: n_points,
            instruction: instruction.len(),
            response: response.len(),
        });
    }
    let mut ids = Vec::with_capacity(len);
    ids.extend_from_slice(&[BOS, P_START]);
    ids.extend(std::iter::repeat_n(PAD, n_points));
    ids.push(P_END);
    ids.extend_from_slice(instruction);
    ids.extend_from_slice(response);
    let resp_start = len - response.len();
    let loss_mask: Vec<bool> = (0..len).map(|t| t + 1 >= resp_start && t + 1 < len).collect();
    let targets = (0..len)
        .map(|t| if loss_mask[t] { ids[t + 1] } else { PAD })
        .collect();
    Ok(Sequence {
        ids,
        n_points,
        instruction_len: instruction.len(),
        response_len: response.len(),
        targets,
        loss_mask,
    })
}
