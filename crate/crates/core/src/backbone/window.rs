use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

fn check(h: usize, w: usize, win: usize) -> Result<(usize, usize)> {
    if win == 0 || !h.is_multiple_of(win) || !w.is_multiple_of(win) {
        return Err(Error::Dimension(format!(
            "window {win} does not tile a {h}x{w} feature map"
        )));
    }
    Ok((h / win, w / win))
}

/// `[B, d, H, W] → [B·N_w, w², d]`; windows are ordered row-major per image and
/// positions row-major within a window.
pub fn window_partition(tape: &mut Tape, x: Var, win: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::Dimension(format!("window_partition expects [B,d,H,W], got {s:?}")));
    }
    let (b, d, h, w) = (s[0], s[1], s[2], s[3]);
    let (nh, nw) = check(h, w, win)?;
    let x = tape.reshape(x, &[b, d, nh, win, nw, win])?;
    let x = tape.permute(x, &[0, 2, 4, 3, 5, 1])?;
    tape.reshape(x, &[b * nh * nw, win * win, d])
}

/// Inverse of [`window_partition`] for a `[B, d, h, w]` map.
pub fn window_reverse(tape: &mut Tape, x: Var, win: usize, b: usize, h: usize, w: usize) -> Result<Var> {
    let (nh, nw) = check(h, w, win)?;
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[0] != b * nh * nw || s[1] != win * win {
        return Err(Error::Dimension(format!(
            "window_reverse: {s:?} is not a {win}x{win} partition of {b}x{h}x{w}"
        )));
    }
    let d = s[2];
    let x = tape.reshape(x, &[b, nh, nw, win, win, d])?;
    let x = tape.permute(x, &[0, 5, 1, 3, 2, 4])?;
    tape.reshape(x, &[b, d, h, w])
}
