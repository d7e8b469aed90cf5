//! Low-level numeric kernels behind the tape operations.
//!
//! Forward kernels allocate and return the output; gradient kernels
//! accumulate (`+=`) into caller-provided buffers so fan-out sums naturally.

// ── matmul ───────────────────────────────────────────────────────────

/// C[m,n] = A[m,k] @ B[k,n]
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// dA += dC @ B^T
pub(crate) fn matmul_grad_a(dc: &[f64], b: &[f64], m: usize, k: usize, n: usize, da: &mut [f64]) {
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        let darow = &mut da[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += drow[j] * brow[j];
            }
            darow[p] += s;
        }
    }
}

/// dB += A^T @ dC
pub(crate) fn matmul_grad_b(a: &[f64], dc: &[f64], m: usize, k: usize, n: usize, db: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let drow = &dc[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let dbrow = &mut db[p * n..(p + 1) * n];
            for j in 0..n {
                dbrow[j] += av * drow[j];
            }
        }
    }
}

// ── coefficient contraction  y[n,o] = Σ_h Σ_j t[n,h,j]·c[h,o,j] ─────

/// Permute c[h,o,j] to c[h,j,o] so the innermost accumulation runs over a
/// contiguous output row.
fn permute_hoj_to_hjo(c: &[f64], h: usize, o: usize, j: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * o * j];
    for ih in 0..h {
        for io in 0..o {
            for ij in 0..j {
                out[(ih * j + ij) * o + io] = c[(ih * o + io) * j + ij];
            }
        }
    }
    out
}

pub(crate) fn contract_basis(
    t: &[f64],
    c: &[f64],
    n: usize,
    h: usize,
    o: usize,
    j: usize,
) -> Vec<f64> {
    let cp = permute_hoj_to_hjo(c, h, o, j);
    let mut out = vec![0.0; n * o];
    for inn in 0..n {
        let trow = &t[inn * h * j..(inn + 1) * h * j];
        let orow = &mut out[inn * o..(inn + 1) * o];
        for (hj, &tv) in trow.iter().enumerate() {
            if tv == 0.0 {
                continue;
            }
            let crow = &cp[hj * o..(hj + 1) * o];
            for io in 0..o {
                orow[io] += tv * crow[io];
            }
        }
    }
    out
}

/// dT[n,h,j] += Σ_o dy[n,o]·c[h,o,j]
pub(crate) fn contract_basis_grad_t(
    dy: &[f64],
    c: &[f64],
    n: usize,
    h: usize,
    o: usize,
    j: usize,
    dt: &mut [f64],
) {
    let cp = permute_hoj_to_hjo(c, h, o, j);
    for inn in 0..n {
        let dyrow = &dy[inn * o..(inn + 1) * o];
        let dtrow = &mut dt[inn * h * j..(inn + 1) * h * j];
        for hj in 0..h * j {
            let crow = &cp[hj * o..(hj + 1) * o];
            let mut s = 0.0;
            for io in 0..o {
                s += dyrow[io] * crow[io];
            }
            dtrow[hj] += s;
        }
    }
}

/// dC[h,o,j] += Σ_n t[n,h,j]·dy[n,o]
pub(crate) fn contract_basis_grad_c(
    t: &[f64],
    dy: &[f64],
    n: usize,
    h: usize,
    o: usize,
    j: usize,
    dc: &mut [f64],
) {
    // accumulate in [h,j,o] layout, then fold back to [h,o,j]
    let mut dcp = vec![0.0; h * j * o];
    for inn in 0..n {
        let trow = &t[inn * h * j..(inn + 1) * h * j];
        let dyrow = &dy[inn * o..(inn + 1) * o];
        for (hj, &tv) in trow.iter().enumerate() {
            if tv == 0.0 {
                continue;
            }
            let drow = &mut dcp[hj * o..(hj + 1) * o];
            for io in 0..o {
                drow[io] += tv * dyrow[io];
            }
        }
    }
    for ih in 0..h {
        for io in 0..o {
            for ij in 0..j {
                dc[(ih * o + io) * j + ij] += dcp[(ih * j + ij) * o + io];
            }
        }
    }
}

// ── standard 1-D convolution (cross-correlation) ─────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero-fill so the output length equals the input length.
    Same,
    /// No fill; output length is `t - k + 1`.
    Valid,
}

impl Padding {
    pub(crate) fn left(&self, k: usize) -> usize {
        match self {
            Padding::Same => (k - 1) / 2,
            Padding::Valid => 0,
        }
    }

    pub(crate) fn out_len(&self, t: usize, k: usize) -> usize {
        match self {
            Padding::Same => t,
            Padding::Valid => t + 1 - k,
        }
    }
}

/// y[b,o,t] = bias[o] + Σ_{ci,a} x[b, base(o)+ci, t+a-pad]·w[o,ci,a]
/// with `groups` splitting channels; w has shape [o, c/groups, k].
pub(crate) fn conv1d(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    batch: usize,
    c_in: usize,
    t_in: usize,
    c_out: usize,
    k: usize,
    groups: usize,
    padding: Padding,
) -> Vec<f64> {
    let cpg = c_in / groups; // channels per group
    let opg = c_out / groups;
    let pad = padding.left(k);
    let t_out = padding.out_len(t_in, k);
    let mut y = vec![0.0; batch * c_out * t_out];
    for b in 0..batch {
        for o in 0..c_out {
            let g = o / opg;
            let yrow = &mut y[(b * c_out + o) * t_out..(b * c_out + o + 1) * t_out];
            if let Some(bias) = bias {
                yrow.fill(bias[o]);
            }
            for ci in 0..cpg {
                let xrow = &x[(b * c_in + g * cpg + ci) * t_in..(b * c_in + g * cpg + ci + 1) * t_in];
                let wrow = &w[(o * cpg + ci) * k..(o * cpg + ci + 1) * k];
                for t in 0..t_out {
                    let mut s = 0.0;
                    for (a, &wv) in wrow.iter().enumerate() {
                        let q = t + a;
                        if q >= pad && q - pad < t_in {
                            s += xrow[q - pad] * wv;
                        }
                    }
                    yrow[t] += s;
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1d_grad(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    batch: usize,
    c_in: usize,
    t_in: usize,
    c_out: usize,
    k: usize,
    groups: usize,
    padding: Padding,
    dx: &mut [f64],
    dw: &mut [f64],
    dbias: Option<&mut [f64]>,
) {
    let cpg = c_in / groups;
    let opg = c_out / groups;
    let pad = padding.left(k);
    let t_out = padding.out_len(t_in, k);
    if let Some(dbias) = dbias {
        for b in 0..batch {
            for o in 0..c_out {
                let dyrow = &dy[(b * c_out + o) * t_out..(b * c_out + o + 1) * t_out];
                dbias[o] += dyrow.iter().sum::<f64>();
            }
        }
    }
    for b in 0..batch {
        for o in 0..c_out {
            let g = o / opg;
            let dyrow = &dy[(b * c_out + o) * t_out..(b * c_out + o + 1) * t_out];
            for ci in 0..cpg {
                let ch = g * cpg + ci;
                let xrow = &x[(b * c_in + ch) * t_in..(b * c_in + ch + 1) * t_in];
                let wrow = &w[(o * cpg + ci) * k..(o * cpg + ci + 1) * k];
                let dwrow_off = (o * cpg + ci) * k;
                for t in 0..t_out {
                    let d = dyrow[t];
                    if d == 0.0 {
                        continue;
                    }
                    for a in 0..k {
                        let q = t + a;
                        if q >= pad && q - pad < t_in {
                            dw[dwrow_off + a] += d * xrow[q - pad];
                            dx[(b * c_in + ch) * t_in + q - pad] += d * wrow[a];
                        }
                    }
                }
            }
        }
    }
}

// ── Chebyshev basis rows ─────────────────────────────────────────────

/// T_0..T_degree at `u` via the recursion T_m = 2u·T_{m-1} - T_{m-2}.
pub(crate) fn cheby_row(u: f64, degree: usize, out: &mut [f64]) {
    out[0] = 1.0;
    if degree >= 1 {
        out[1] = u;
    }
    for m in 2..=degree {
        out[m] = 2.0 * u * out[m - 1] - out[m - 2];
    }
}

/// Values and derivatives of T_0..T_degree at `u`
/// (T'_m = 2T_{m-1} + 2u·T'_{m-1} - T'_{m-2}).
pub(crate) fn cheby_row_with_deriv(u: f64, degree: usize, t: &mut [f64], dt: &mut [f64]) {
    t[0] = 1.0;
    dt[0] = 0.0;
    if degree >= 1 {
        t[1] = u;
        dt[1] = 1.0;
    }
    for m in 2..=degree {
        t[m] = 2.0 * u * t[m - 1] - t[m - 2];
        dt[m] = 2.0 * t[m - 1] + 2.0 * u * dt[m - 1] - dt[m - 2];
    }
}

// ── B-spline basis (Cox–de Boor) ─────────────────────────────────────

/// Knot vector for `grid` intervals on [lo, hi] with a uniform extension of
/// `order` knots beyond each end. Yields `grid + order` basis functions.
/// Core knots are built by interpolation so the boundary knots equal `lo`
/// and `hi` exactly.
pub(crate) fn bspline_knots(lo: f64, hi: f64, grid: usize, order: usize) -> Vec<f64> {
    let h = (hi - lo) / grid as f64;
    (0..=grid + 2 * order)
        .map(|j| {
            let i = j as isize - order as isize;
            if (0..=grid as isize).contains(&i) {
                let s = i as f64 / grid as f64;
                lo * (1.0 - s) + hi * s
            } else {
                lo + i as f64 * h
            }
        })
        .collect()
}

/// Cox–de Boor value of the i-th degree-`p` basis over `knots` at `x`.
/// At x == right boundary the interval ending there is closed so the
/// partition of unity extends to the full closed range.
fn cdb(knots: &[f64], right_end: f64, i: usize, p: usize, x: f64) -> f64 {
    if p == 0 {
        let hit = if x == right_end {
            knots[i] < right_end && right_end <= knots[i + 1]
        } else {
            knots[i] <= x && x < knots[i + 1]
        };
        return if hit { 1.0 } else { 0.0 };
    }
    let mut v = 0.0;
    let d0 = knots[i + p] - knots[i];
    if d0 > 0.0 {
        v += (x - knots[i]) / d0 * cdb(knots, right_end, i, p - 1, x);
    }
    let d1 = knots[i + p + 1] - knots[i + 1];
    if d1 > 0.0 {
        v += (knots[i + p + 1] - x) / d1 * cdb(knots, right_end, i + 1, p - 1, x);
    }
    v
}

/// All `grid + order` basis values at `x` (caller clamps x to the grid range).
pub(crate) fn bspline_row(knots: &[f64], grid: usize, order: usize, x: f64, out: &mut [f64]) {
    let right_end = knots[grid + order];
    for (i, o) in out.iter_mut().enumerate().take(grid + order) {
        *o = cdb(knots, right_end, i, order, x);
    }
}

/// Derivatives of all basis functions at `x`:
/// B'_{i,p} = p·( B_{i,p-1}/(t_{i+p}-t_i) - B_{i+1,p-1}/(t_{i+p+1}-t_{i+1}) ).
pub(crate) fn bspline_row_deriv(knots: &[f64], grid: usize, order: usize, x: f64, out: &mut [f64]) {
    let right_end = knots[grid + order];
    let p = order;
    for (i, o) in out.iter_mut().enumerate().take(grid + order) {
        if p == 0 {
            *o = 0.0;
            continue;
        }
        let mut v = 0.0;
        let d0 = knots[i + p] - knots[i];
        if d0 > 0.0 {
            v += cdb(knots, right_end, i, p - 1, x) / d0;
        }
        let d1 = knots[i + p + 1] - knots[i + 1];
        if d1 > 0.0 {
            v -= cdb(knots, right_end, i + 1, p - 1, x) / d1;
        }
        *o = p as f64 * v;
    }
}

// ── Kolmogorov-Arnold convolution (1-D) ──────────────────────────────
//
// Every kernel tap is a univariate function: Chebyshev expansion of the
// tanh-squashed input. Coefficient layouts:
//   pointwise  [c_in, c_out, j]   (k = 1, channel mixing only)
//   depthwise  [k, c, j]          (no channel sum, c_out == c_in)
//   full       [k, c_in, c_out, j]

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KanConvMode {
    Pointwise,
    Depthwise,
    Full,
}

pub(crate) struct KanConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub t_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub degree: usize,
    pub padding: Padding,
}

impl KanConvDims {
    fn t_out(&self) -> usize {
        self.padding.out_len(self.t_in, self.k)
    }

    /// tanh-squashed input at padded position `q` of channel row `xrow`.
    fn squashed(&self, xrow: &[f64], q: usize) -> f64 {
        let pad = self.padding.left(self.k);
        if q >= pad && q - pad < self.t_in {
            xrow[q - pad].tanh()
        } else {
            0.0
        }
    }
}

/// Basis of one padded channel row: bas[q*(j+1)..] holds T_0..T_deg.
fn padded_basis(d: &KanConvDims, xrow: &[f64]) -> Vec<f64> {
    let j = d.degree + 1;
    let t_pad = d.t_in + (d.k - 1);
    let t_pad = match d.padding {
        Padding::Same => t_pad,
        Padding::Valid => d.t_in,
    };
    let mut bas = vec![0.0; t_pad * j];
    for q in 0..t_pad {
        cheby_row(d.squashed(xrow, q), d.degree, &mut bas[q * j..(q + 1) * j]);
    }
    bas
}

pub(crate) fn kan_conv1d_fwd(
    x: &[f64],
    coeffs: &[f64],
    mode: KanConvMode,
    d: &KanConvDims,
) -> Vec<f64> {
    let j = d.degree + 1;
    let t_out = d.t_out();
    let mut y = vec![0.0; d.batch * d.c_out * t_out];
    match mode {
        KanConvMode::Pointwise => {
            // y[b,o,t] = Σ_c Σ_j T_j(tanh x[b,c,t])·coeffs[c,o,j]
            let cp = permute_hoj_to_hjo(coeffs, d.c_in, d.c_out, j);
            let mut bas = vec![0.0; j];
            let mut yrow = vec![0.0; d.c_out];
            for b in 0..d.batch {
                for t in 0..t_out {
                    yrow.fill(0.0);
                    for c in 0..d.c_in {
                        let u = x[(b * d.c_in + c) * d.t_in + t].tanh();
                        cheby_row(u, d.degree, &mut bas);
                        for (ij, &bv) in bas.iter().enumerate() {
                            let crow = &cp[(c * j + ij) * d.c_out..(c * j + ij + 1) * d.c_out];
                            for o in 0..d.c_out {
                                yrow[o] += bv * crow[o];
                            }
                        }
                    }
                    for o in 0..d.c_out {
                        y[(b * d.c_out + o) * t_out + t] = yrow[o];
                    }
                }
            }
        }
        KanConvMode::Depthwise => {
            // y[b,c,t] = Σ_a Σ_j T_j(tanh xpad[b,c,t+a])·coeffs[a,c,j]
            for b in 0..d.batch {
                for c in 0..d.c_in {
                    let xrow = &x[(b * d.c_in + c) * d.t_in..(b * d.c_in + c + 1) * d.t_in];
                    let bas = padded_basis(d, xrow);
                    let yrow = &mut y[(b * d.c_out + c) * t_out..(b * d.c_out + c + 1) * t_out];
                    for (t, yv) in yrow.iter_mut().enumerate() {
                        let mut s = 0.0;
                        for a in 0..d.k {
                            let brow = &bas[(t + a) * j..(t + a + 1) * j];
                            let crow = &coeffs[(a * d.c_in + c) * j..(a * d.c_in + c + 1) * j];
                            for ij in 0..j {
                                s += brow[ij] * crow[ij];
                            }
                        }
                        *yv = s;
                    }
                }
            }
        }
        KanConvMode::Full => {
            // y[b,o,t] = Σ_c Σ_a Σ_j T_j(tanh xpad[b,c,t+a])·coeffs[a,c,o,j]
            let mut yrow = vec![0.0; d.c_out];
            for b in 0..d.batch {
                let bases: Vec<Vec<f64>> = (0..d.c_in)
                    .map(|c| {
                        padded_basis(
                            d,
                            &x[(b * d.c_in + c) * d.t_in..(b * d.c_in + c + 1) * d.t_in],
                        )
                    })
                    .collect();
                for t in 0..t_out {
                    yrow.fill(0.0);
                    for c in 0..d.c_in {
                        for a in 0..d.k {
                            let brow = &bases[c][(t + a) * j..(t + a + 1) * j];
                            for (ij, &bv) in brow.iter().enumerate() {
                                if bv == 0.0 {
                                    continue;
                                }
                                let off = ((a * d.c_in + c) * d.c_out) * j + ij;
                                for o in 0..d.c_out {
                                    yrow[o] += bv * coeffs[off + o * j];
                                }
                            }
                        }
                    }
                    for o in 0..d.c_out {
                        y[(b * d.c_out + o) * t_out + t] = yrow[o];
                    }
                }
            }
        }
    }
    y
}

pub(crate) fn kan_conv1d_grad(
    x: &[f64],
    coeffs: &[f64],
    dy: &[f64],
    mode: KanConvMode,
    d: &KanConvDims,
    dx: &mut [f64],
    dcoeffs: &mut [f64],
) {
    let j = d.degree + 1;
    let t_out = d.t_out();
    let pad = d.padding.left(d.k);
    let mut bas = vec![0.0; j];
    let mut dbas = vec![0.0; j];
    match mode {
        KanConvMode::Pointwise => {
            for b in 0..d.batch {
                for t in 0..t_out {
                    for c in 0..d.c_in {
                        let xv = x[(b * d.c_in + c) * d.t_in + t];
                        let u = xv.tanh();
                        cheby_row_with_deriv(u, d.degree, &mut bas, &mut dbas);
                        let dsq = 1.0 - u * u;
                        let mut gx = 0.0;
                        for o in 0..d.c_out {
                            let g = dy[(b * d.c_out + o) * t_out + t];
                            if g == 0.0 {
                                continue;
                            }
                            let coff = (c * d.c_out + o) * j;
                            for ij in 0..j {
                                dcoeffs[coff + ij] += g * bas[ij];
                                gx += g * coeffs[coff + ij] * dbas[ij];
                            }
                        }
                        dx[(b * d.c_in + c) * d.t_in + t] += gx * dsq;
                    }
                }
            }
        }
        KanConvMode::Depthwise => {
            // basis and derivative tables per padded channel row
            let t_pad = d.t_in + d.k - 1;
            let mut tab = vec![0.0; t_pad * j];
            let mut dtab = vec![0.0; t_pad * j];
            let mut us = vec![0.0; t_pad];
            for b in 0..d.batch {
                for c in 0..d.c_in {
                    let xrow_off = (b * d.c_in + c) * d.t_in;
                    for q in 0..t_pad {
                        let inside = q >= pad && q - pad < d.t_in;
                        let u = if inside { x[xrow_off + q - pad].tanh() } else { 0.0 };
                        us[q] = u;
                        cheby_row_with_deriv(
                            u,
                            d.degree,
                            &mut tab[q * j..(q + 1) * j],
                            &mut dtab[q * j..(q + 1) * j],
                        );
                    }
                    for t in 0..t_out {
                        let g = dy[(b * d.c_out + c) * t_out + t];
                        if g == 0.0 {
                            continue;
                        }
                        for a in 0..d.k {
                            let q = t + a;
                            let coff = (a * d.c_in + c) * j;
                            let mut gu = 0.0;
                            for ij in 0..j {
                                dcoeffs[coff + ij] += g * tab[q * j + ij];
                                gu += coeffs[coff + ij] * dtab[q * j + ij];
                            }
                            if q >= pad && q - pad < d.t_in {
                                let u = us[q];
                                dx[xrow_off + q - pad] += g * gu * (1.0 - u * u);
                            }
                        }
                    }
                }
            }
        }
        KanConvMode::Full => {
            let t_pad = d.t_in + d.k - 1;
            let mut tab = vec![0.0; t_pad * j];
            let mut dtab = vec![0.0; t_pad * j];
            let mut us = vec![0.0; t_pad];
            for b in 0..d.batch {
                for c in 0..d.c_in {
                    let xrow_off = (b * d.c_in + c) * d.t_in;
                    for q in 0..t_pad {
                        let inside = q >= pad && q - pad < d.t_in;
                        let u = if inside { x[xrow_off + q - pad].tanh() } else { 0.0 };
                        us[q] = u;
                        cheby_row_with_deriv(
                            u,
                            d.degree,
                            &mut tab[q * j..(q + 1) * j],
                            &mut dtab[q * j..(q + 1) * j],
                        );
                    }
                    for t in 0..t_out {
                        for a in 0..d.k {
                            let q = t + a;
                            let mut gu = 0.0;
                            for o in 0..d.c_out {
                                let g = dy[(b * d.c_out + o) * t_out + t];
                                if g == 0.0 {
                                    continue;
                                }
                                let coff = ((a * d.c_in + c) * d.c_out + o) * j;
                                for ij in 0..j {
                                    dcoeffs[coff + ij] += g * tab[q * j + ij];
                                    gu += g * coeffs[coff + ij] * dtab[q * j + ij];
                                }
                            }
                            if q >= pad && q - pad < d.t_in {
                                let u = us[q];
                                dx[xrow_off + q - pad] += gu * (1.0 - u * u);
                            }
                        }
                    }
                }
            }
        }
    }
}

// ── fused ChebyKAN layer kernel ──────────────────────────────────────
//
// y[n,o] = Σ_h Σ_j T_j(tanh x[n,h]) · c[h,o,j], with the basis built on
// the fly instead of materialized as an [N,H,J] tensor.

pub(crate) fn cheby_kan_fwd(
    x: &[f64],
    coeffs: &[f64],
    n: usize,
    h: usize,
    o: usize,
    degree: usize,
) -> Vec<f64> {
    let j = degree + 1;
    let cp = permute_hoj_to_hjo(coeffs, h, o, j);
    let mut out = vec![0.0; n * o];
    let mut bas = vec![0.0; j];
    for inn in 0..n {
        let orow = &mut out[inn * o..(inn + 1) * o];
        for ih in 0..h {
            let u = x[inn * h + ih].tanh();
            cheby_row(u, degree, &mut bas);
            for (ij, &bv) in bas.iter().enumerate() {
                let crow = &cp[(ih * j + ij) * o..(ih * j + ij + 1) * o];
                for io in 0..o {
                    orow[io] += bv * crow[io];
                }
            }
        }
    }
    out
}

pub(crate) fn cheby_kan_grad(
    x: &[f64],
    coeffs: &[f64],
    dy: &[f64],
    n: usize,
    h: usize,
    o: usize,
    degree: usize,
    dx: &mut [f64],
    dcoeffs: &mut [f64],
) {
    let j = degree + 1;
    let cp = permute_hoj_to_hjo(coeffs, h, o, j);
    let mut dcp = vec![0.0; h * j * o];
    let mut bas = vec![0.0; j];
    let mut dbas = vec![0.0; j];
    for inn in 0..n {
        let dyrow = &dy[inn * o..(inn + 1) * o];
        for ih in 0..h {
            let u = x[inn * h + ih].tanh();
            cheby_row_with_deriv(u, degree, &mut bas, &mut dbas);
            let mut gu = 0.0;
            for ij in 0..j {
                let off = (ih * j + ij) * o;
                let crow = &cp[off..off + o];
                let drow = &mut dcp[off..off + o];
                let bv = bas[ij];
                let mut dot = 0.0;
                for io in 0..o {
                    drow[io] += bv * dyrow[io];
                    dot += crow[io] * dyrow[io];
                }
                gu += dot * dbas[ij];
            }
            dx[inn * h + ih] += gu * (1.0 - u * u);
        }
    }
    for ih in 0..h {
        for io in 0..o {
            for ij in 0..j {
                dcoeffs[(ih * o + io) * j + ij] += dcp[(ih * j + ij) * o + io];
            }
        }
    }
}

/// 2-D full-mode KA convolution with valid padding and a single output map:
/// out[i,j] = Σ_d Σ_a Σ_b φ_{a,b,d}(y[d, i+a, j+b]), coeffs[a,b,d,deg+1].
/// Used by the fidelity oracle; the production path is 1-D.
pub fn kan_conv2d_full(
    y: &[f64],
    coeffs: &[f64],
    channels: usize,
    height: usize,
    width: usize,
    k: usize,
    degree: usize,
) -> Vec<f64> {
    let j = degree + 1;
    let h_out = height + 1 - k;
    let w_out = width + 1 - k;
    let mut bas = vec![0.0; j];
    let mut out = vec![0.0; h_out * w_out];
    for i in 0..h_out {
        for jj in 0..w_out {
            let mut s = 0.0;
            for d in 0..channels {
                for a in 0..k {
                    for b in 0..k {
                        let u = y[(d * height + i + a) * width + jj + b].tanh();
                        cheby_row(u, degree, &mut bas);
                        let coff = ((a * k + b) * channels + d) * j;
                        for ij in 0..j {
                            s += bas[ij] * coeffs[coff + ij];
                        }
                    }
                }
            }
            out[i * w_out + jj] = s;
        }
    }
    out
}
