//! Closed-form attention FLOP counts for a dense-query baseline (6-layer
//! encoder, 6-layer decoder over all image tokens) and the agglomerative
//! pipeline (two clustering stages, 3-layer decoder over instance tokens).

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};

/// Default query count of the dense-query baseline.
pub const BASELINE_QUERIES: u64 = 100;
/// Whole-model GFLOPs quoted for the two architectures, shown for reference only.
pub const REFERENCE_GFLOPS_BASELINE: f64 = 36.95;
pub const REFERENCE_GFLOPS_AGGLOMERATIVE: f64 = 33.81;
pub const CAVEAT: &str = "counts cover attention layers only; backbone and prediction heads are excluded, \
so totals are not comparable with whole-model GFLOPs";

/// Cluster-center counts of the agglomerative pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StageConstants {
    pub stage1_human: u64,
    pub stage1_object: u64,
    pub stage2_human: u64,
    pub stage2_object: u64,
    pub patterns: u64,
}

impl Default for StageConstants {
    fn default() -> Self {
        StageConstants {
            stage1_human: 16,
            stage1_object: 64,
            stage2_human: 4,
            stage2_object: 8,
            patterns: 3,
        }
    }
}

impl StageConstants {
    pub fn stage1_centers(&self) -> u64 {
        self.stage1_human + self.stage1_object
    }

    pub fn instance_tokens(&self) -> u64 {
        self.stage2_human + self.stage2_object
    }

    /// Interaction queries: patterns times instance tokens.
    pub fn queries(&self) -> u64 {
        self.patterns * self.instance_tokens()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Architecture {
    Baseline,
    Agglomerative,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Term {
    pub name: &'static str,
    pub flops: u128,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ComplexityReport {
    pub architecture: Architecture,
    pub tokens: u64,
    pub dim: u64,
    pub queries: u64,
    pub stages: Option<StageConstants>,
    pub terms: Vec<Term>,
    pub total: u128,
}

fn report(architecture: Architecture, n: u64, c: u64, q: u64, stages: Option<StageConstants>, terms: Vec<Term>) -> ComplexityReport {
    let total = terms.iter().map(|t| t.flops).sum();
    ComplexityReport {
        architecture,
        tokens: n,
        dim: c,
        queries: q,
        stages,
        terms,
        total,
    }
}

/// Self-attention layer cost over `len` tokens: `4 len C^2 + 2 len^2 C`.
fn sa(len: u128, c: u128) -> u128 {
    4 * len * c * c + 2 * len * len * c
}

/// Cross-attention layer cost of `q` queries over `mem` memory tokens.
fn ca(q: u128, mem: u128, c: u128) -> u128 {
    2 * q * c * c + 2 * mem * c * c + mem * q * c + mem * mem * c
}

pub fn omega_baseline(n: u64, c: u64, queries: u64) -> ComplexityReport {
    let (nn, cc, q) = (u128::from(n), u128::from(c), u128::from(queries));
    report(
        Architecture::Baseline,
        n,
        c,
        queries,
        None,
        vec![
            Term {
                name: "encoder_sa",
                flops: 6 * sa(nn, cc),
            },
            Term {
                name: "decoder_sa",
                flops: 6 * sa(q, cc),
            },
            Term {
                name: "decoder_ca",
                flops: 6 * ca(q, nn, cc),
            },
        ],
    )
}

pub fn omega_agglomerative(n: u64, c: u64, queries: u64) -> ComplexityReport {
    omega_agglomerative_with(n, c, queries, StageConstants::default())
}

/// Stage 1 runs 4 SA layers over image tokens plus stage-1 centers; stage 2
/// runs 2 SA layers over stage-1 groups plus stage-2 centers; the decoder
/// cross-attends to the instance tokens only.
pub fn omega_agglomerative_with(n: u64, c: u64, queries: u64, stages: StageConstants) -> ComplexityReport {
    let (nn, cc, q) = (u128::from(n), u128::from(c), u128::from(queries));
    let s1 = u128::from(stages.stage1_centers());
    let s2_len = s1 + u128::from(stages.instance_tokens());
    let inst = u128::from(stages.instance_tokens());
    report(
        Architecture::Agglomerative,
        n,
        c,
        queries,
        Some(stages),
        vec![
            Term {
                name: "stage1_sa",
                flops: 4 * sa(nn + s1, cc),
            },
            Term {
                name: "stage2_sa",
                flops: 2 * sa(s2_len, cc),
            },
            Term {
                name: "decoder_sa",
                flops: 3 * sa(q, cc),
            },
            Term {
                name: "decoder_ca",
                flops: 3 * ca(q, inst, cc),
            },
        ],
    )
}

/// `baseline(N) - agglomerative(N) = a N^2 + b N + c`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Crossover {
    pub a: i128,
    pub b: i128,
    pub c: i128,
    /// Real roots in ascending order.
    pub roots: Vec<f64>,
    /// Largest real root, if any.
    pub root: Option<f64>,
    /// True when the difference is positive for every `N >= 1`.
    pub agglomerative_cheaper_for_all: bool,
}

pub fn crossover(dim: u64, baseline_queries: u64, stages: StageConstants) -> Result<Crossover> {
    let diff = |n: u64| -> i128 {
        let b = omega_baseline(n, dim, baseline_queries).total;
        let a = omega_agglomerative_with(n, dim, stages.queries(), stages).total;
        b as i128 - a as i128
    };
    let (d0, d1, d2, d3) = (diff(0), diff(1), diff(2), diff(3));
    let a2 = d2 - 2 * d1 + d0;
    if a2 == 0 || a2 % 2 != 0 || d3 - 3 * d2 + 3 * d1 - d0 != 0 {
        return Err(Error::Degenerate("token-count difference is not quadratic".into()));
    }
    let a = a2 / 2;
    let c = d0;
    let b = d1 - d0 - a;
    let (af, bf, cf) = (a as f64, b as f64, c as f64);
    let disc = bf * bf - 4.0 * af * cf;
    let mut roots = if disc < 0.0 {
        Vec::new()
    } else {
        let s = disc.sqrt();
        // Numerically stable pair.
        let q = -0.5 * (bf + bf.signum() * s);
        let mut r = vec![q / af];
        if q != 0.0 {
            r.push(cf / q);
        }
        r
    };
    roots.sort_by(f64::total_cmp);
    roots.dedup();
    let root = roots.last().copied();
    let agglomerative_cheaper_for_all = a > 0 && d1 > 0 && root.is_none_or(|r| r < 1.0);
    Ok(Crossover {
        a,
        b,
        c,
        roots,
        root,
        agglomerative_cheaper_for_all,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SweepRow {
    pub resolution: u64,
    pub tokens: u64,
    pub baseline: u128,
    pub agglomerative: u128,
}

/// Parses `start:stop:step` (inclusive stop).
pub fn parse_sweep(spec: &str) -> Result<(u64, u64, u64)> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || Error::Config(format!("sweep `{spec}` is not start:stop:step"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let v: Vec<u64> = parts.iter().map(|p| p.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?;
    if v[2] == 0 || v[0] == 0 || v[0] > v[1] {
        return Err(bad());
    }
    Ok((v[0], v[1], v[2]))
}

/// Square resolutions `start..=stop` in `step` pixels, tokens `(res / stride)^2`.
pub fn sweep(start: u64, stop: u64, step: u64, stride: u64, dim: u64, baseline_queries: u64, stages: StageConstants) -> Vec<SweepRow> {
    (start..=stop)
        .step_by(step.max(1) as usize)
        .map(|res| {
            let side = res / stride;
            let n = side * side;
            SweepRow {
                resolution: res,
                tokens: n,
                baseline: omega_baseline(n, dim, baseline_queries).total,
                agglomerative: omega_agglomerative_with(n, dim, stages.queries(), stages).total,
            }
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("resolution,tokens,baseline_flops,agglomerative_flops\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.resolution, r.tokens, r.baseline, r.agglomerative);
    }
    s
}

/// Minimal SVG line chart of GFLOPs against resolution.
pub fn sweep_svg(rows: &[SweepRow]) -> String {
    let (w, h, m) = (640.0, 400.0, 50.0);
    let xmin = rows.first().map_or(0.0, |r| r.resolution as f64);
    let xmax = rows.last().map_or(1.0, |r| r.resolution as f64).max(xmin + 1.0);
    let ymax = rows
        .iter()
        .map(|r| r.baseline.max(r.agglomerative) as f64 / 1e9)
        .fold(1e-9, f64::max);
    let px = |x: f64| m + (x - xmin) / (xmax - xmin) * (w - 2.0 * m);
    let py = |y: f64| h - m - y / ymax * (h - 2.0 * m);
    let line = |f: &dyn Fn(&SweepRow) -> u128| -> String {
        rows.iter()
            .map(|r| format!("{:.1},{:.1}", px(r.resolution as f64), py(f(r) as f64 / 1e9)))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{m}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/><line x1="{m}" y1="{m}" x2="{m}" y2="{y0}" stroke="black"/>"#,
        y0 = h - m,
        x1 = w - m
    );
    let _ = writeln!(s, r#"<polyline fill="none" stroke="crimson" stroke-width="2" points="{}"/>"#, line(&|r| r.baseline));
    let _ = writeln!(s, r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#, line(&|r| r.agglomerative));
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">resolution (px)</text>"#, w / 2.0, h - 12.0);
    let _ = writeln!(s, r#"<text x="12" y="{}" transform="rotate(-90 12 {})" text-anchor="middle">attention GFLOPs</text>"#, h / 2.0, h / 2.0);
    let _ = writeln!(s, r#"<text x="{m}" y="{}">{xmin}</text><text x="{}" y="{}" text-anchor="end">{xmax}</text>"#, h - m + 16.0, w - m, h - m + 16.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{ymax:.1}</text>"#, m - 4.0, m + 4.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" fill="crimson">baseline</text>"#, m + 10.0, m + 10.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" fill="steelblue">agglomerative</text>"#, m + 10.0, m + 26.0);
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn unit_inputs() {
        let b = omega_baseline(1, 1, 1);
        assert_eq!(b.total, 108);
        assert!(b.terms.iter().all(|t| t.flops == 36));
        let a = omega_agglomerative(1, 1, 36);
        assert_eq!(a.total, 98600);
        let f: Vec<u128> = a.terms.iter().map(|t| t.flops).collect();
        assert_eq!(f, vec![53784, 34592, 8208, 2016]);
    }

    #[test]
    fn totals_are_term_sums() {
        for (n, c, q) in [(400, 256, 100), (1600, 256, 36), (7, 3, 2)] {
            for r in [omega_baseline(n, c, q), omega_agglomerative(n, c, q)] {
                assert_eq!(r.total, r.terms.iter().map(|t| t.flops).sum::<u128>());
            }
        }
    }

    #[test]
    fn quadratic_in_dim() {
        let enc = |c| {
            let r = omega_baseline(10, c, 5);
            r.terms[0].flops
        };
        // 4NC^2 part: remove the linear-in-C part 12 N^2 C.
        let quad = |c: u64| enc(c) - 12 * 100 * u128::from(c);
        assert_eq!(quad(8), 4 * quad(4));
    }

    #[test]
    fn only_stage1_depends_on_tokens() {
        let a = omega_agglomerative(10, 256, 36);
        let b = omega_agglomerative(1000, 256, 36);
        assert_ne!(a.terms[0].flops, b.terms[0].flops);
        for k in 1..4 {
            assert_eq!(a.terms[k].flops, b.terms[k].flops);
        }
    }

    #[test]
    fn default_queries() {
        assert_eq!(StageConstants::default().queries(), 36);
        assert_eq!(StageConstants::default().stage1_centers() + StageConstants::default().instance_tokens(), 92);
    }

    #[test]
    fn crossover_coefficients() {
        let x = crossover(256, 100, StageConstants::default()).unwrap();
        assert_eq!((x.a, x.b, x.c), (2560, 1_136_640, 63_135_744));
        assert_eq!(x.a, 10 * 256);
        assert_eq!(x.roots.len(), 2);
        assert!((x.root.unwrap() + 65.087).abs() < 1e-3);
        assert!(x.agglomerative_cheaper_for_all);
        for r in &x.roots {
            let v = x.a as f64 * r * r + x.b as f64 * r + x.c as f64;
            assert!(v.abs() < 1e-6 * x.c as f64);
        }
    }

    #[test]
    fn degenerate_difference() {
        // Equal query counts and zero dim make the difference identically zero.
        assert!(matches!(crossover(0, 36, StageConstants::default()), Err(Error::Degenerate(_))));
    }

    #[test]
    fn sweep_parsing_and_rows() {
        assert_eq!(parse_sweep("64:640:64").unwrap(), (64, 640, 64));
        assert!(parse_sweep("64:32:1").is_err());
        assert!(parse_sweep("1:2").is_err());
        let rows = sweep(64, 640, 64, 32, 256, 100, StageConstants::default());
        assert_eq!(rows.len(), 10);
        assert_eq!(rows.last().unwrap().tokens, 400);
        assert!(rows.iter().all(|r| r.agglomerative < r.baseline));
        let csv = sweep_csv(&rows);
        assert_eq!(csv.lines().count(), 11);
        assert!(sweep_svg(&rows).contains("<polyline"));
    }

    proptest! {
        #[test]
        fn monotone_in_each_argument(n in 1u64..5000, c in 1u64..512, q in 1u64..200) {
            for f in [omega_baseline, omega_agglomerative] {
                let base = f(n, c, q).total;
                prop_assert!(f(n + 1, c, q).total >= base);
                prop_assert!(f(n, c + 1, q).total >= base);
                prop_assert!(f(n, c, q + 1).total >= base);
            }
        }
    }
}
