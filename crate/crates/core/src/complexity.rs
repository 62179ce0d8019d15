//! Multiply-accumulate counts of windowed versus global attention.

use crate::attention::{window_attention, Scoring, CORE_SCOPE};
use crate::config::ModelConfig;
use crate::encoder::PATCH;
use crate::error::Result;
use crate::layers::{attention_params, init_attention};
use crate::model::{forward, init_params};
use crate::params::{Bound, ParamInit, Params};
use crate::tensor::{Tape, Tensor};
use crate::window::{effective_window, window_partition};

/// `QKᵀ` plus `AV` over `n` tokens of width `c` when every token attends
/// to every other: `2·n²·c`.
pub fn dense_attention_macs(n: u64, c: u64) -> u64 {
    2 * n * n * c
}

/// Counted attention-core MACs of one unshifted window-attention layer on
/// an `h×w` map of `c`-wide tokens.
pub fn windowed_attention_macs(h: usize, w: usize, c: usize, heads: usize, window: usize) -> Result<u64> {
    let mut init = ParamInit::<f32>::new(0);
    init_attention(&mut init, "a", c, heads, window, false)?;
    let params = init.finish();
    let tape = Tape::new();
    let bound = Bound::new(&tape, &params, false);
    let x = tape.leaf(&Tensor::from_fn([1, h, w, c], |i| ((i * 31 % 17) as f32 - 8.0) / 8.0));
    let (size, shift) = effective_window(h, w, window, false);
    let (win, geo) = window_partition(x, size, shift)?;
    window_attention(win, heads, &attention_params(&bound, "a")?, &geo, Scoring::Dot)?;
    Ok(tape.macs(CORE_SCOPE))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexityRow {
    /// Input image side.
    pub side: usize,
    /// Tokens of the first encoder stage.
    pub tokens: u64,
    /// One window-attention layer at the first stage.
    pub windowed: u64,
    /// The same layer with global attention.
    pub dense: u64,
    /// Attention-core MACs of a whole forward pass.
    pub model_attention: u64,
    /// All MACs of a whole forward pass.
    pub model_total: u64,
}

/// Counts for square inputs of each side in `sides`.
pub fn complexity_table(cfg: &ModelConfig, sides: &[usize]) -> Result<Vec<ComplexityRow>> {
    let params: Params<f32> = init_params(cfg)?;
    let c = cfg.stage_dim(0);
    sides
        .iter()
        .map(|&side| {
            let t = side / PATCH;
            let tape = Tape::new();
            let bound = Bound::new(&tape, &params, false);
            let img = tape.leaf(&Tensor::full([1, 3, side, side], 0.5f32));
            forward(&bound, cfg, img)?;
            Ok(ComplexityRow {
                side,
                tokens: (t * t) as u64,
                windowed: windowed_attention_macs(t, t, c, cfg.heads[0], cfg.window_size)?,
                dense: dense_attention_macs((t * t) as u64, c as u64),
                model_attention: tape.macs(CORE_SCOPE),
                model_total: tape.macs("total"),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_whole_window_matches_the_dense_count() {
        assert_eq!(windowed_attention_macs(5, 5, 8, 2, 5).unwrap(), dense_attention_macs(25, 8));
    }

    #[test]
    fn windowed_count_is_linear_without_padding() {
        let a = windowed_attention_macs(8, 8, 4, 1, 4).unwrap();
        let b = windowed_attention_macs(16, 16, 4, 1, 4).unwrap();
        assert_eq!(a, 2 * 64 * 16 * 4);
        assert_eq!(b, 4 * a);
        assert_eq!(dense_attention_macs(256, 4), 16 * dense_attention_macs(64, 4));
    }
}
