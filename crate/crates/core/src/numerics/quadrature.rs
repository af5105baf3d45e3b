use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// Kronrod abscissae on [0, 1) of the 15-point rule (QUADPACK qk15), descending;
// the Gauss 7-point nodes are the odd-indexed entries.
const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadratureKind {
    GaussKronrod15,
    GaussHermite,
}

/// Nodes and weights of a one-dimensional rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub kind: QuadratureKind,
}

impl QuadratureRule {
    /// The 15-point Kronrod rule on [-1, 1], nodes ascending.
    pub fn gauss_kronrod_15() -> Self {
        let mut nodes = Vec::with_capacity(15);
        let mut weights = Vec::with_capacity(15);
        for j in 0..7 {
            nodes.push(-XGK[j]);
            weights.push(WGK[j]);
        }
        nodes.push(0.0);
        weights.push(WGK[7]);
        for j in (0..7).rev() {
            nodes.push(XGK[j]);
            weights.push(WGK[j]);
        }
        QuadratureRule {
            nodes,
            weights,
            kind: QuadratureKind::GaussKronrod15,
        }
    }

    /// Nodes and weights mapped affinely from [-1, 1] to [a, b].
    pub fn rescaled(&self, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
        let c = 0.5 * (a + b);
        let h = 0.5 * (b - a);
        let nodes = self.nodes.iter().map(|x| c + h * x).collect();
        let weights = self.weights.iter().map(|w| h * w).collect();
        (nodes, weights)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// 15-point Gauss-Kronrod estimate of the integral of `f` over `[a, b]`.
pub fn gk15<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut sum = WGK[7] * f(c);
    for j in 0..7 {
        let dx = h * XGK[j];
        sum += WGK[j] * (f(c - dx) + f(c + dx));
    }
    sum * h
}

/// Sorted panel boundaries covering `[a, b]`, split at every breakpoint
/// strictly inside the interval.
pub fn panel_breaks(a: f64, b: f64, breakpoints: &[f64]) -> Vec<f64> {
    let mut out = vec![a];
    let mut inner: Vec<f64> = breakpoints
        .iter()
        .copied()
        .filter(|&k| k > a && k < b)
        .collect();
    inner.sort_by(f64::total_cmp);
    inner.dedup();
    out.extend(inner);
    if b > a {
        out.push(b);
    }
    out
}

/// One GK15 panel per piece of `[a, b]` split at `breakpoints`.
pub fn gk15_panels<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, breakpoints: &[f64]) -> f64 {
    let breaks = panel_breaks(a, b, breakpoints);
    breaks.windows(2).map(|w| gk15(&mut f, w[0], w[1])).sum()
}

/// Flattened GK15 nodes and weights over `[a, b]` split at `breakpoints`.
pub fn gk15_panel_points(a: f64, b: f64, breakpoints: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let rule = QuadratureRule::gauss_kronrod_15();
    let breaks = panel_breaks(a, b, breakpoints);
    let mut nodes = Vec::with_capacity(15 * breaks.len());
    let mut weights = Vec::with_capacity(15 * breaks.len());
    for w in breaks.windows(2) {
        let (n, wt) = rule.rescaled(w[0], w[1]);
        nodes.extend(n);
        weights.extend(wt);
    }
    (nodes, weights)
}

/// Like [`gk15_panel_points`], with the first panel mapped through
/// `s = a + (b_1 - a) v^3` so that integrands behaving like `(s - a)^c`
/// with `c >= 0` are integrated accurately.
pub fn gk15_panel_points_graded(a: f64, b: f64, breakpoints: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let rule = QuadratureRule::gauss_kronrod_15();
    let breaks = panel_breaks(a, b, breakpoints);
    let mut nodes = Vec::with_capacity(15 * breaks.len());
    let mut weights = Vec::with_capacity(15 * breaks.len());
    for (k, w) in breaks.windows(2).enumerate() {
        let (n, wt) = rule.rescaled(
            if k == 0 { 0.0 } else { w[0] },
            if k == 0 { 1.0 } else { w[1] },
        );
        if k == 0 {
            let h = w[1] - w[0];
            for (v, wv) in n.iter().zip(&wt) {
                nodes.push(w[0] + h * v * v * v);
                weights.push(wv * 3.0 * h * v * v);
            }
        } else {
            nodes.extend(n);
            weights.extend(wt);
        }
    }
    (nodes, weights)
}

/// Physicists' Gauss-Hermite rule (weight `exp(-x^2)`), nodes ascending.
pub fn gauss_hermite(n: usize) -> Result<QuadratureRule> {
    if !(1..=25).contains(&n) {
        return Err(Error::Usage(format!(
            "Gauss-Hermite node count must be in 1..=25, got {n}"
        )));
    }
    const PIM4: f64 = 0.751_125_544_464_942_5; // pi^(-1/4)
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let nf = n as f64;
    let mut z = 0.0_f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = PIM4;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * (1.0 + z.abs()) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    let mut pairs: Vec<(f64, f64)> = x.into_iter().zip(w).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(QuadratureRule {
        nodes: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1).collect(),
        kind: QuadratureKind::GaussHermite,
    })
}
