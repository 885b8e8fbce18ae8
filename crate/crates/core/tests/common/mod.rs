//! Straight-line reference formulas, written without the library's helpers.
#![allow(dead_code)]

use repspace::harness::ReportRow;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn cos_dev(a: &[f64], b: &[f64]) -> f64 {
    1.0 - dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

pub fn softmax(z: &[f64], t: f64) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| ((x - m) / t).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        if p[i] > 0.0 {
            s += p[i] * (p[i] / q[i]).ln();
        }
    }
    s
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// `‖Δ⊥‖² / ‖b‖²`.
pub fn rel_orth(b: &[f64], d: &[f64]) -> f64 {
    let bb = dot(b, b);
    let c = dot(b, d) / bb;
    let perp: Vec<f64> = d.iter().zip(b).map(|(x, y)| x - c * y).collect();
    dot(&perp, &perp) / bb
}

pub fn weighted_var(v: &[f64], w: &[f64]) -> f64 {
    let mean = dot(v, w);
    let mut s = 0.0;
    for i in 0..v.len() {
        s += w[i] * (v[i] - mean) * (v[i] - mean);
    }
    s
}

pub fn squared_weights(p: &[f64]) -> Vec<f64> {
    let n = dot(p, p);
    p.iter().map(|x| x * x / n).collect()
}

/// Exact and estimated values for the four `(space, metric)` pairs:
/// embedding, logit, probability angular deviation, KL.
pub struct Reference {
    pub exact: [f64; 4],
    pub estimated: [f64; 4],
}

pub fn reference(h: &[f64], h2: &[f64], z: &[f64], z2: &[f64], t: f64) -> Reference {
    let p = softmax(z, t);
    let q = softmax(z2, t);
    let dz = sub(z2, z);
    let dh = sub(h2, h);
    Reference {
        exact: [cos_dev(h, h2), cos_dev(z, z2), cos_dev(&p, &q), kl(&p, &q)],
        estimated: [
            rel_orth(h, &dh) / 2.0,
            rel_orth(z, &dz) / 2.0,
            weighted_var(&dz, &squared_weights(&p)) / (2.0 * t * t),
            weighted_var(&dz, &p) / (2.0 * t * t),
        ],
    }
}

/// Position of a report row among the four reference slots.
pub fn slot(row: &ReportRow) -> usize {
    use repspace::estimators::{Metric, Space};
    match (row.space, row.metric) {
        (Space::Embedding, _) => 0,
        (Space::Logit, _) => 1,
        (Space::Probability, Metric::AngularDeviation) => 2,
        (Space::Probability, Metric::Kl) => 3,
    }
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

/// Per-layer `(exact, estimated)` means of the seeded single-layer attention
/// drop sweep at T = 1, slots as in [`slot`].
pub const INTERVENE_GOLDEN: [[(f64, f64); 4]; 8] = [
    [
        (6.481653407086303e-1, 4.1489834562307115e-1),
        (6.719378576850654e-1, 5.0993805109822e-1),
        (4.027537592250995e-1, 4.4692873414711265e-1),
        (5.794132372158393e-1, 5.628404137174483e-1),
    ],
    [
        (1.2892414891076381e-1, 1.177529729638523e-1),
        (1.5123881449349233e-1, 1.434358935355159e-1),
        (1.188296202127508e-1, 1.1479464971220875e-1),
        (1.2878641650490175e-1, 1.2733307901553204e-1),
    ],
    [
        (2.2983961043971357e-1, 1.9896137133463565e-1),
        (2.607310761873949e-1, 2.4269848614541573e-1),
        (1.6400586888571445e-1, 2.2137400213627056e-1),
        (2.1787765517574184e-1, 2.3250622864456272e-1),
    ],
    [
        (5.341419223529103e-2, 5.153348446513562e-2),
        (6.192487019660209e-2, 6.014475118067159e-2),
        (4.023467421815453e-2, 4.161661939369955e-2),
        (4.856844793751094e-2, 4.8782933674767645e-2),
    ],
    [
        (5.155723631508585e-2, 4.993926693871987e-2),
        (6.385919091203465e-2, 6.750361467291238e-2),
        (5.2549245648867496e-2, 5.1072310310494806e-2),
        (5.498043073006289e-2, 5.3975279139304055e-2),
    ],
    [
        (5.524948984061246e-2, 5.333725107080587e-2),
        (5.663058776761176e-2, 5.557883948509482e-2),
        (4.307557664421197e-2, 4.5952910188243136e-2),
        (4.898353198789355e-2, 4.9867606208496666e-2),
    ],
    [
        (4.60174747793348e-2, 4.479650529338715e-2),
        (5.404629482414475e-2, 5.452204904336338e-2),
        (4.076837484103045e-2, 4.014820601248588e-2),
        (4.427956296958088e-2, 4.3930976358217515e-2),
    ],
    [
        (2.2765927613920878e-2, 2.248698028087912e-2),
        (2.3124366900644355e-2, 2.2934048475268105e-2),
        (1.538950108945146e-2, 1.5534985093201146e-2),
        (1.8482442030011013e-2, 1.8461098578967508e-2),
    ],
];

pub const STEPWISE_BASELINE_TOKENS: [usize; 16] = [
    16, 3, 62, 47, 62, 47, 35, 45, 51, 47, 44, 47, 62, 51, 19, 51,
];
pub const STEPWISE_PRUNED_TOKENS: [usize; 16] =
    [16, 16, 62, 16, 7, 16, 16, 62, 44, 7, 44, 44, 44, 46, 44, 16];

pub const STEPWISE_KL_GOLDEN: [f64; 16] = [
    1.4884409129154869e-1,
    1.40824581164554e-1,
    3.125085180641876e-1,
    3.790261864659512e-1,
    2.4890265571797468e-1,
    3.405418590586047e-1,
    2.78910674803678e-1,
    1.2428890578582534e0,
    7.522508556359581e-1,
    5.15691029819098e-1,
    1.865706119417405e-1,
    6.110142636989764e-1,
    4.139392224367672e-1,
    5.783822364973773e-1,
    4.446726995379303e-1,
    9.483898392811209e-1,
];
