//! Adaptive Gauss–Kronrod (7/15) quadrature used as an independent oracle
//! for the closed-form integrals. Test code only.

#![allow(dead_code)]

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn kronrod<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = fc * WGK[7];
    let mut g = fc * WG[3];
    let mut fv = [(0.0, 0.0); 7];
    for i in 0..7 {
        let dx = h * XGK[i];
        let (f1, f2) = (f(c - dx), f(c + dx));
        fv[i] = (f1, f2);
        k += WGK[i] * (f1 + f2);
        if i % 2 == 1 {
            g += WG[i / 2] * (f1 + f2);
        }
    }
    // QUADPACK error scaling: the raw |K - G| difference grossly
    // overestimates the Kronrod error on smooth integrands.
    let mean = 0.5 * k;
    let mut asc = WGK[7] * (fc - mean).abs();
    for i in 0..7 {
        asc += WGK[i] * ((fv[i].0 - mean).abs() + (fv[i].1 - mean).abs());
    }
    let asc = asc * h.abs();
    let mut err = ((k - g) * h).abs();
    if asc != 0.0 && err != 0.0 {
        err = asc * (200.0 * err / asc).powf(1.5).min(1.0);
    }
    (k * h, err)
}

fn adapt<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    let (val, err) = kronrod(f, a, b);
    if depth == 0 || err <= tol {
        return val;
    }
    let m = 0.5 * (a + b);
    adapt(f, a, m, 0.5 * tol, depth - 1) + adapt(f, m, b, 0.5 * tol, depth - 1)
}

/// ∫_a^b f, splitting first at the given breakpoints (sorted, inside
/// (a, b)). The absolute tolerance is `rel_tol` times a coarse estimate of
/// ∫|f|, so tiny tails do not force deep subdivision.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, breaks: &[f64], rel_tol: f64) -> f64 {
    let mut points = vec![a];
    points.extend(breaks.iter().copied().filter(|&x| x > a && x < b));
    points.push(b);
    let abs_f = |x: f64| f(x).abs();
    let mass: f64 = points.windows(2).map(|w| kronrod(&abs_f, w[0], w[1]).0).sum();
    let tol = rel_tol * mass;
    let panels = (points.len() - 1) as f64;
    let mut total = 0.0;
    // Kahan summation across panels.
    let mut comp = 0.0;
    for w in points.windows(2) {
        let v = adapt(&f, w[0], w[1], tol / panels, 20) - comp;
        let t = total + v;
        comp = (t - total) - v;
        total = t;
    }
    total
}

/// Breakpoints every half period of an oscillation of angular frequency
/// `omega` on [a, b], plus extra points so no panel is wider than `max_width`.
pub fn oscillation_breaks(a: f64, b: f64, omega: f64, max_width: f64) -> Vec<f64> {
    let mut step = max_width;
    if omega > 0.0 {
        step = step.min(std::f64::consts::PI / omega);
    }
    let n = ((b - a) / step).ceil().min(2_000_000.0) as usize;
    (1..n).map(|i| a + (b - a) * i as f64 / n as f64).collect()
}
