//! Per-token perspective weights from the weighted aggregator.

use std::fmt::Write as _;

use crate::autograd::Real;
use crate::error::{Error, Result};
use crate::kernels;
use crate::model::{Aggregation, PerspectiveModel};

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub position: usize,
    /// Token fed at this position.
    pub token: u32,
    /// Selector softmax output, one entry per perspective.
    pub weights: Vec<f32>,
    /// Zero-based index of the largest weight.
    pub top_perspective: usize,
}

impl TraceRecord {
    fn new<F: Real>(position: usize, token: u32, weights: &[F]) -> Self {
        Self {
            position,
            token,
            weights: weights.iter().map(|w| w.to_f32().unwrap()).collect(),
            top_perspective: kernels::argmax(weights),
        }
    }
}

fn require_weighted<F: Real>(model: &PerspectiveModel<F>) -> Result<()> {
    if model.config.aggregation != Aggregation::Weighted {
        return Err(Error::config(
            "aggregation",
            format!(
                "tracing needs the weighted aggregator, model uses `{}`",
                model.config.aggregation
            ),
        ));
    }
    Ok(())
}

/// One record per prompt position, from an empty state.
pub fn trace_weights<F: Real>(
    model: &PerspectiveModel<F>,
    prompt: &[u32],
) -> Result<Vec<TraceRecord>> {
    require_weighted(model)?;
    let mut state = model.new_state();
    prompt
        .iter()
        .enumerate()
        .map(|(t, &tok)| {
            let out = model.step(tok, &mut state)?;
            let weights = out.weights.ok_or(Error::Inconsistent(
                "weighted aggregator returned no weights".into(),
            ))?;
            Ok(TraceRecord::new(t, tok, &weights))
        })
        .collect()
}

/// Feeds `prompt`, then greedily decodes `new_tokens` more, tracing every
/// position. Returns the records and the generated tokens.
pub fn trace_decode<F: Real>(
    model: &PerspectiveModel<F>,
    prompt: &[u32],
    new_tokens: usize,
) -> Result<(Vec<TraceRecord>, Vec<u32>)> {
    require_weighted(model)?;
    if prompt.is_empty() {
        return Err(Error::EmptyInput("prompt"));
    }
    let mut state = model.new_state();
    let mut records = Vec::with_capacity(prompt.len() + new_tokens);
    let mut generated = Vec::with_capacity(new_tokens);
    let mut next = prompt[0];
    for t in 0..prompt.len() + new_tokens {
        let out = model.step(next, &mut state)?;
        let weights = out.weights.ok_or(Error::Inconsistent(
            "weighted aggregator returned no weights".into(),
        ))?;
        records.push(TraceRecord::new(t, next, &weights));
        next = match prompt.get(t + 1) {
            Some(&tok) => tok,
            None => {
                let tok = kernels::argmax(&out.logits) as u32;
                if generated.len() < new_tokens {
                    generated.push(tok);
                }
                tok
            }
        };
    }
    Ok((records, generated))
}

/// CSV with header `position,token,weight_1,..,weight_n,top`. Weights carry
/// nine significant digits (exact for 32-bit reals); `top` is one-based like
/// the weight columns.
pub fn trace_to_csv(records: &[TraceRecord]) -> String {
    let n = records.first().map_or(0, |r| r.weights.len());
    let mut out = String::from("position,token");
    for i in 1..=n {
        let _ = write!(out, ",weight_{i}");
    }
    out.push_str(",top\n");
    for r in records {
        let _ = write!(out, "{},{}", r.position, r.token);
        for w in &r.weights {
            let _ = write!(out, ",{w:.8e}");
        }
        let _ = writeln!(out, ",{}", r.top_perspective + 1);
    }
    out
}

pub fn parse_trace_csv(text: &str) -> Result<Vec<TraceRecord>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or(Error::EmptyInput("trace csv"))?;
    let cols: Vec<&str> = header.split(',').collect();
    let n = cols
        .len()
        .checked_sub(3)
        .ok_or_else(|| Error::Parse(format!("bad trace header `{header}`")))?;
    let expected: Vec<String> = ["position".to_string(), "token".to_string()]
        .into_iter()
        .chain((1..=n).map(|i| format!("weight_{i}")))
        .chain(["top".to_string()])
        .collect();
    if cols != expected {
        return Err(Error::Parse(format!("bad trace header `{header}`")));
    }
    let field = |line: usize, s: &str| Error::Parse(format!("line {line}: bad field `{s}`"));
    lines
        .enumerate()
        .map(|(i, line)| {
            let line_no = i + 2;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != n + 3 {
                return Err(Error::Parse(format!(
                    "line {line_no}: expected {} fields",
                    n + 3
                )));
            }
            let weights = f[2..2 + n]
                .iter()
                .map(|s| s.parse::<f32>().map_err(|_| field(line_no, s)))
                .collect::<Result<Vec<_>>>()?;
            let top: usize = f[n + 2].parse().map_err(|_| field(line_no, f[n + 2]))?;
            if top == 0 || top > n {
                return Err(field(line_no, f[n + 2]));
            }
            Ok(TraceRecord {
                position: f[0].parse().map_err(|_| field(line_no, f[0]))?,
                token: f[1].parse().map_err(|_| field(line_no, f[1]))?,
                weights,
                top_perspective: top - 1,
            })
        })
        .collect()
}

const PALETTE: [&str; 8] = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7",
];

/// Stacked-area chart of the weights over positions, perspective 1 at the bottom.
pub fn render_trace_svg(records: &[TraceRecord]) -> String {
    let (width, height, margin) = (800.0f64, 300.0f64, 40.0f64);
    let plot_w = width - 2.0 * margin;
    let plot_h = height - 2.0 * margin;
    let n = records.first().map_or(0, |r| r.weights.len());
    let steps = records.len().max(2) - 1;
    let x = |i: usize| margin + plot_w * i as f64 / steps as f64;
    let y = |v: f64| margin + plot_h * (1.0 - v);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let mut lower = vec![0.0f64; records.len()];
    for k in 0..n {
        let upper: Vec<f64> = records
            .iter()
            .zip(&lower)
            .map(|(r, lo)| lo + f64::from(r.weights[k]))
            .collect();
        let mut points: Vec<String> = upper
            .iter()
            .enumerate()
            .map(|(i, v)| format!("{:.2},{:.2}", x(i), y(*v)))
            .collect();
        points.extend(
            lower
                .iter()
                .enumerate()
                .rev()
                .map(|(i, v)| format!("{:.2},{:.2}", x(i), y(*v))),
        );
        let _ = writeln!(
            svg,
            r#"<polygon points="{}" fill="{}" fill-opacity="0.85"><title>perspective {}</title></polygon>"#,
            points.join(" "),
            PALETTE[k % PALETTE.len()],
            k + 1
        );
        lower = upper;
    }
    let _ = writeln!(
        svg,
        r#"<rect x="{margin}" y="{margin}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">position</text>"#,
        width / 2.0,
        height - 10.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="10" y="{}" font-size="12">weight</text>"#,
        margin - 10.0
    );
    for k in 0..n {
        let _ = writeln!(
            svg,
            r#"<rect x="{}" y="8" width="10" height="10" fill="{}"/><text x="{}" y="17" font-size="11">P{}</text>"#,
            margin + 60.0 * k as f64,
            PALETTE[k % PALETTE.len()],
            margin + 60.0 * k as f64 + 14.0,
            k + 1
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig, SelectorParams};
    use crate::params::ParamStore;

    fn model(n: usize) -> PerspectiveModel<f32> {
        let config = ModelConfig::tiny().with_perspectives(n);
        let store: ParamStore<f32> = init_model(&config, 0).unwrap();
        PerspectiveModel::from_store(&config, &store).unwrap()
    }

    #[test]
    fn zero_selector_traces_uniform_weights() {
        let records = trace_weights(&model(4), &[1, 2, 3, 4, 5]).unwrap();
        for r in records {
            assert!(r.weights.iter().all(|w| *w == 0.25));
            assert_eq!(r.top_perspective, 0);
        }
    }

    #[test]
    fn single_perspective_traces_unit_weight() {
        let records = trace_weights(&model(1), &[7, 8, 9]).unwrap();
        assert!(records.iter().all(|r| r.weights == [1.0]));
    }

    #[test]
    fn wrong_aggregator_is_rejected() {
        let mut m = model(2);
        m.config.aggregation = Aggregation::Average;
        assert!(matches!(
            trace_weights(&m, &[1]),
            Err(Error::InvalidConfig {
                field: "aggregation",
                ..
            })
        ));
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let mut m = model(3);
        m.aggregator = crate::model::Aggregator::Weighted(SelectorParams {
            weight: crate::autograd::Tensor::from_fn(&[3, 8], |i| (i as f32 * 0.37).sin()),
            bias: vec![0.1, -0.2, 0.3],
        });
        let (records, generated) = trace_decode(&m, &[1, 2, 3], 20).unwrap();
        assert_eq!(records.len(), 23);
        assert_eq!(generated.len(), 20);
        let parsed = parse_trace_csv(&trace_to_csv(&records)).unwrap();
        assert_eq!(parsed, records);
        assert!(
            trace_to_csv(&records).starts_with("position,token,weight_1,weight_2,weight_3,top\n")
        );
        let svg = render_trace_svg(&records);
        assert_eq!(svg.matches("<polygon").count(), 3);
    }
}
