use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Scaled dot-product attention of queries `q` (D or T×D) over `m` keys
/// (M×D) and values (M×D_v). Returns the context (D_v or T×D_v) and the
/// attention weights (M or T×M); the scale is √D.
pub fn scaled_dot_attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let (qv, kv, vv) = (tape.value(q), tape.value(k), tape.value(v));
    if kv.numel() == 0 || vv.numel() == 0 {
        return Err(Error::EmptyCatalog);
    }
    let d = qv.cols();
    if kv.cols() != d {
        return Err(Error::dim(
            "scaled_dot_attention",
            "key width (D)",
            d,
            kv.cols(),
        ));
    }
    if kv.rows() != vv.rows() {
        return Err(Error::dim(
            "scaled_dot_attention",
            "value rows (M)",
            kv.rows(),
            vv.rows(),
        ));
    }
    let vector_query = qv.rank() == 1;
    let scores = tape.matmul_bt(q, k)?;
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = tape.softmax_rows(scaled);
    let ctx = tape.matmul(weights, v)?;
    if vector_query {
        let m = tape.value(weights).cols();
        let dv = tape.value(ctx).cols();
        let w = tape.reshape(weights, vec![m])?;
        let c = tape.reshape(ctx, vec![dv])?;
        return Ok((c, w));
    }
    Ok((ctx, weights))
}
