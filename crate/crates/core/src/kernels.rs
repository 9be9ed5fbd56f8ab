//! Inner loops shared by matching and attention.
//!
//! Each kernel is written once as an `#[inline(always)]` body and compiled
//! twice: a baseline build and an AVX2 build selected at runtime. The bodies
//! never reassociate floating-point sums (reductions use fixed 8-lane
//! accumulators), so both builds produce bit-identical results.

macro_rules! dispatch {
    ($(#[$meta:meta])* $vis:vis fn $name:ident($($arg:ident : $ty:ty),* $(,)?) $(-> $ret:ty)? => $body:ident) => {
        $(#[$meta])*
        $vis fn $name($($arg: $ty),*) $(-> $ret)? {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2")]
                unsafe fn avx2($($arg: $ty),*) $(-> $ret)? {
                    $body($($arg),*)
                }
                if std::is_x86_feature_detected!("avx2") {
                    // SAFETY: the CPU supports AVX2, checked just above.
                    return unsafe { avx2($($arg),*) };
                }
            }
            $body($($arg),*)
        }
    };
}

const LANES: usize = 8;

/// `out[r, :] = x[r, :] · w (+ bias)` with `w` stored `in_dim x out_dim`
/// row-major. Each output element accumulates in input-dimension order.
#[inline(always)]
fn linear_body(x: &[f32], in_dim: usize, w: &[f32], out_dim: usize, bias: Option<&[f32]>, out: &mut [f32]) {
    let rows = x.len() / in_dim.max(1);
    for r in 0..rows {
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        let or = &mut out[r * out_dim..(r + 1) * out_dim];
        or.fill(0.0);
        for (k, &a) in xr.iter().enumerate() {
            let wk = &w[k * out_dim..(k + 1) * out_dim];
            for (o, &b) in or.iter_mut().zip(wk) {
                *o += a * b;
            }
        }
        if let Some(bias) = bias {
            for (o, &b) in or.iter_mut().zip(bias) {
                *o += b;
            }
        }
    }
}

dispatch!(pub(crate) fn linear(x: &[f32], in_dim: usize, w: &[f32], out_dim: usize, bias: Option<&[f32]>, out: &mut [f32]) => linear_body);

/// `out[j] = sum_c a[c] * bt[c * n + j]`, summed in channel order, where
/// `bt` holds `n` column vectors stored channel-major.
#[inline(always)]
fn dot_columns_body(a: &[f32], bt: &[f32], n: usize, out: &mut [f32]) {
    out[..n].fill(0.0);
    for (c, &ac) in a.iter().enumerate() {
        let col = &bt[c * n..(c + 1) * n];
        for (o, &b) in out[..n].iter_mut().zip(col) {
            *o += ac * b;
        }
    }
}

dispatch!(pub(crate) fn dot_columns(a: &[f32], bt: &[f32], n: usize, out: &mut [f32]) => dot_columns_body);

/// Branch-free `exp` for `x <= 0` with a range-reduced degree-6 polynomial.
/// Relative error is within a few ulp over the clamped range; inputs below
/// about -87 return the smallest normal value instead of zero.
#[inline(always)]
fn exp_nonpositive(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_145_75;
    const LN2_LO: f32 = 1.428_606_8e-6;
    const ROUND: f32 = 12_582_912.0; // 1.5 * 2^23
    #[allow(clippy::manual_clamp)]
    let x = if x < -87.0 {
        -87.0
    } else if x > 0.0 {
        0.0
    } else {
        x
    };
    let shifted = x * LOG2E + ROUND;
    let n = shifted - ROUND;
    let r = (x - n * LN2_HI) - n * LN2_LO;
    let p = 1.0 / 720.0;
    let p = p * r + 1.0 / 120.0;
    let p = p * r + 1.0 / 24.0;
    let p = p * r + 1.0 / 6.0;
    let p = p * r + 0.5;
    let p = p * r + 1.0;
    let p = p * r + 1.0;
    // the low mantissa bits of `shifted` hold n as an integer
    let scale = f32::from_bits(shifted.to_bits().wrapping_sub(ROUND.to_bits()).wrapping_add(127) << 23);
    p * scale
}

/// Query rows processed together by [`attend_rows`].
pub(crate) const ROW_BLOCK: usize = 4;

/// Scales, biases and exponentiates one row of logits in place. Returns the
/// row maximum and the reciprocal of the exponential sum.
#[inline(always)]
fn softmax_row(logits: &mut [f32], scale: f32, bias: Option<&[f32]>) -> (f32, f32) {
    match bias {
        Some(bias) => {
            for (l, &b) in logits.iter_mut().zip(bias) {
                *l = *l * scale + b;
            }
        }
        None => logits.iter_mut().for_each(|l| *l *= scale),
    }

    let mut lane_max = [f32::NEG_INFINITY; LANES];
    let mut chunks = logits.chunks_exact(LANES);
    for chunk in &mut chunks {
        for (mx, &l) in lane_max.iter_mut().zip(chunk) {
            *mx = mx.max(l);
        }
    }
    let mut max = lane_max.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    for &l in chunks.remainder() {
        max = max.max(l);
    }
    if !max.is_finite() {
        return (max, f32::NAN);
    }

    // exponentiate and sum in separate passes so both vectorize
    for l in logits.iter_mut() {
        *l = exp_nonpositive(*l - max);
    }
    let mut lane_sum = [0.0f32; LANES];
    let mut chunks = logits.chunks_exact(LANES);
    for chunk in &mut chunks {
        for (s, &l) in lane_sum.iter_mut().zip(chunk) {
            *s += l;
        }
    }
    let mut sum: f32 = lane_sum.iter().sum();
    for &l in chunks.remainder() {
        sum += l;
    }
    (max, 1.0 / sum)
}

/// One attention head for [`ROW_BLOCK`] query rows.
///
/// `q` holds the rows' head slices back to back (`ROW_BLOCK x d`); `kt`/`vt`
/// are the head's keys and values stored channel-major (`d x m`); `bias` is
/// added to the scaled logits (log token sizes for proportional attention).
/// `logits` is scratch of `ROW_BLOCK x m`. Writes the softmax-weighted value
/// mixes into `out` (`ROW_BLOCK x d`) and returns false if any row's logits
/// were not finite.
///
/// Every output element is accumulated in the same order as a row-at-a-time
/// loop would use, so the blocking does not change results.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn attend_rows_body(
    q: &[f32],
    kt: &[f32],
    vt: &[f32],
    m: usize,
    scale: f32,
    bias: Option<&[f32]>,
    logits: &mut [f32],
    out: &mut [f32],
) -> bool {
    const R: usize = ROW_BLOCK;
    let d = q.len() / R;
    let logits = &mut logits[..R * m];
    let full = m - m % LANES;

    for j in (0..full).step_by(LANES) {
        let mut acc = [[0.0f32; LANES]; R];
        for c in 0..d {
            let col: &[f32; LANES] = kt[c * m + j..c * m + j + LANES].try_into().unwrap();
            for (r, acc) in acc.iter_mut().enumerate() {
                let a = q[r * d + c];
                for l in 0..LANES {
                    acc[l] += a * col[l];
                }
            }
        }
        for (r, acc) in acc.iter().enumerate() {
            logits[r * m + j..r * m + j + LANES].copy_from_slice(acc);
        }
    }
    for j in full..m {
        for r in 0..R {
            let mut acc = 0.0f32;
            for c in 0..d {
                acc += q[r * d + c] * kt[c * m + j];
            }
            logits[r * m + j] = acc;
        }
    }

    let mut inv = [0.0f32; R];
    for (r, inv) in inv.iter_mut().enumerate() {
        let (max, i) = softmax_row(&mut logits[r * m..(r + 1) * m], scale, bias);
        if !max.is_finite() {
            return false;
        }
        *inv = i;
    }

    for c in 0..d {
        let vc = &vt[c * m..(c + 1) * m];
        let mut acc = [[0.0f32; LANES]; R];
        for j in (0..full).step_by(LANES) {
            let v: &[f32; LANES] = vc[j..j + LANES].try_into().unwrap();
            for (r, acc) in acc.iter_mut().enumerate() {
                let p: &[f32; LANES] = logits[r * m + j..r * m + j + LANES].try_into().unwrap();
                for l in 0..LANES {
                    acc[l] += p[l] * v[l];
                }
            }
        }
        for (r, acc) in acc.iter().enumerate() {
            let mut total: f32 = acc.iter().sum();
            for j in full..m {
                total += logits[r * m + j] * vc[j];
            }
            out[r * d + c] = total * inv[r];
        }
    }
    true
}

dispatch!(
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn attend_rows(q: &[f32], kt: &[f32], vt: &[f32], m: usize, scale: f32, bias: Option<&[f32]>, logits: &mut [f32], out: &mut [f32]) -> bool => attend_rows_body
);
