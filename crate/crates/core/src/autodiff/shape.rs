//! Broadcasting arithmetic over row-major buffers.

/// NumPy-style broadcast of two shapes (right aligned).
pub(crate) fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `src` when iterated over the (larger) `space` shape; broadcast
/// dimensions get stride zero.
pub(crate) fn broadcast_strides(src: &[usize], space: &[usize]) -> Vec<usize> {
    let n = space.len();
    let mut strides = vec![0; n];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        let j = i + n - src.len();
        strides[j] = if src[i] == 1 && space[j] != 1 { 0 } else { acc };
        acc *= src[i];
    }
    strides
}

/// Iterate `space` in row-major order as maximal contiguous runs.
///
/// For each run, `f(space_offset, a_offset, b_offset, len, a_step, b_step)`
/// is called; the space offset always advances by one per element.
pub(crate) fn for_each_run(
    space: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize, usize, usize, usize),
) {
    // Coalesce from the innermost dimension outwards.
    let mut dims: Vec<(usize, usize, usize)> = Vec::with_capacity(space.len());
    for i in (0..space.len()).rev() {
        let (d, a, b) = (space[i], sa[i], sb[i]);
        if d == 1 {
            continue;
        }
        if let Some(last) = dims.last_mut() {
            let (ld, la, lb) = *last;
            if a == la * ld && b == lb * ld {
                *last = (ld * d, la, lb);
                continue;
            }
        }
        dims.push((d, a, b));
    }
    dims.reverse();
    let total: usize = space.iter().product();
    if total == 0 {
        return;
    }
    let Some(&(inner, ia, ib)) = dims.last() else {
        f(0, 0, 0, 1, 0, 0);
        return;
    };
    let outer = &dims[..dims.len() - 1];
    let mut idx = vec![0usize; outer.len()];
    let (mut off_a, mut off_b) = (0usize, 0usize);
    let mut off = 0usize;
    loop {
        f(off, off_a, off_b, inner, ia, ib);
        off += inner;
        // odometer increment
        let mut k = outer.len();
        loop {
            if k == 0 {
                return;
            }
            k -= 1;
            let (d, a, b) = outer[k];
            idx[k] += 1;
            off_a += a;
            off_b += b;
            if idx[k] < d {
                break;
            }
            off_a -= a * d;
            off_b -= b * d;
            idx[k] = 0;
        }
    }
}
