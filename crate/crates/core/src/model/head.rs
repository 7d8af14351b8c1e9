use rand::Rng;

use super::{dot, Matrix, ModelConfig, SpanClassifierParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active on hidden activations.
    Train,
    Eval,
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = p.iter().sum();
    for v in &mut p {
        *v /= sum;
    }
    p
}

/// `h_start ⊕ h_end ⊕ D[end - start]`.
pub fn span_repr(
    h: &Matrix,
    start: usize,
    end: usize,
    params: &SpanClassifierParams,
    cfg: &ModelConfig,
) -> Result<Vec<f64>> {
    if start > end || end >= h.rows {
        return Err(Error::contract(format!(
            "span ({start}, {end}) out of range for {} tokens",
            h.rows
        )));
    }
    if end - start > cfg.max_width {
        return Err(Error::contract(format!(
            "span width {} exceeds max width {}",
            end - start,
            cfg.max_width
        )));
    }
    let mut x = Vec::with_capacity(cfg.span_dim());
    x.extend_from_slice(h.row(start));
    x.extend_from_slice(h.row(end));
    x.extend_from_slice(params.width.row(end - start));
    Ok(x)
}

/// Activations of one sample through the head.
pub(crate) struct HeadTrace {
    /// Pre-activation of each hidden layer.
    pre: Vec<Vec<f64>>,
    /// Post-activation (after dropout) of each hidden layer.
    act: Vec<Vec<f64>>,
    /// Inverted-dropout scale per hidden unit; empty when dropout is off.
    masks: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
}

/// Runs the head from the first layer's pre-activation onward. `dropout`
/// carries the rate and the mask source in train mode.
pub(crate) fn head_from_pre<R: Rng + ?Sized>(
    pre0: Vec<f64>,
    params: &SpanClassifierParams,
    dropout: Option<(f64, &mut R)>,
) -> HeadTrace {
    let layers = params.hidden.len();
    let mut trace = HeadTrace {
        pre: Vec::with_capacity(layers),
        act: Vec::with_capacity(layers),
        masks: Vec::with_capacity(layers),
        logits: Vec::new(),
    };
    let (rate, mut rng) = match dropout {
        Some((rate, rng)) if rate > 0.0 => (rate, Some(rng)),
        _ => (0.0, None),
    };
    let keep_scale = 1.0 / (1.0 - rate);
    let mut pre = pre0;
    for k in 0..layers {
        let mut act: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
        let mask = match rng.as_deref_mut() {
            Some(rng) => {
                let m: Vec<f64> = (0..act.len())
                    .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep_scale })
                    .collect();
                for (a, &s) in act.iter_mut().zip(&m) {
                    *a *= s;
                }
                m
            }
            None => Vec::new(),
        };
        let next = if k + 1 < layers {
            Some(linear(&params.hidden[k + 1].weight, &params.hidden[k + 1].bias, &act))
        } else {
            None
        };
        trace.pre.push(pre);
        trace.act.push(act);
        trace.masks.push(mask);
        if let Some(n) = next {
            pre = n;
        } else {
            break;
        }
    }
    let last = trace.act.last().expect("at least one hidden layer");
    trace.logits = linear(&params.output.weight, &params.output.bias, last);
    trace
}

fn linear(w: &Matrix, b: &Matrix, x: &[f64]) -> Vec<f64> {
    (0..w.rows).map(|r| dot(w.row(r), x) + b.data[r]).collect()
}

/// Backpropagates `dz` through the head, accumulating gradients for every
/// layer except the first layer's weight, and returns `dL/dpre0`.
pub(crate) fn head_backward(
    trace: &HeadTrace,
    dz: &[f64],
    params: &SpanClassifierParams,
    grads: &mut SpanClassifierParams,
) -> Vec<f64> {
    let layers = params.hidden.len();
    let last = &trace.act[layers - 1];
    grads.output.weight.add_outer_block(0, dz, last);
    for (b, &g) in grads.output.bias.data.iter_mut().zip(dz) {
        *b += g;
    }
    let mut da = vec![0.0; last.len()];
    params.output.weight.add_matvec_t_block(0, dz, &mut da);
    for k in (0..layers).rev() {
        let mask = &trace.masks[k];
        let mut dpre: Vec<f64> = da
            .iter()
            .zip(&trace.pre[k])
            .map(|(&g, &p)| if p > 0.0 { g } else { 0.0 })
            .collect();
        if !mask.is_empty() {
            for (g, &s) in dpre.iter_mut().zip(mask) {
                *g *= s;
            }
        }
        if k == 0 {
            for (b, &g) in grads.hidden[0].bias.data.iter_mut().zip(&dpre) {
                *b += g;
            }
            return dpre;
        }
        grads.hidden[k].weight.add_outer_block(0, &dpre, &trace.act[k - 1]);
        for (b, &g) in grads.hidden[k].bias.data.iter_mut().zip(&dpre) {
            *b += g;
        }
        da = vec![0.0; trace.act[k - 1].len()];
        params.hidden[k].weight.add_matvec_t_block(0, &dpre, &mut da);
    }
    unreachable!("head has at least one hidden layer")
}

pub(crate) fn check_finite(values: &[f64], what: &str, params: &SpanClassifierParams) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        return Ok(());
    }
    let culprit = params.first_non_finite().unwrap_or_else(|| what.to_string());
    Err(Error::numeric(culprit, format!("non-finite {what}")))
}

/// Logits and class probabilities for an explicit span vector.
pub fn forward<R: Rng + ?Sized>(
    x: &[f64],
    params: &SpanClassifierParams,
    cfg: &ModelConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.len() != cfg.span_dim() {
        return Err(Error::contract(format!(
            "span vector has length {}, expected {}",
            x.len(),
            cfg.span_dim()
        )));
    }
    check_finite(x, "span vector", params)?;
    let first = &params.hidden[0];
    let pre0 = linear(&first.weight, &first.bias, x);
    let dropout = match mode {
        Mode::Train => Some((cfg.dropout, rng)),
        Mode::Eval => None,
    };
    let trace = head_from_pre(pre0, params, dropout);
    check_finite(&trace.logits, "logits", params)?;
    let p = softmax(&trace.logits);
    Ok((trace.logits, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{encode, EncoderVariant};
    use crate::rng::seeded;
    use proptest::prelude::*;

    fn small() -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            embed_dim: 3,
            encoder: EncoderVariant::Window,
            window_radius: 1,
            hidden_dim: 5,
            num_layers: 2,
            width_embed_dim: 2,
            max_width: 3,
            num_classes: 4,
            dropout: 0.2,
        }
    }

    #[test]
    fn zero_weights_give_bias_logits() {
        let cfg = small();
        let mut p = SpanClassifierParams::zeros(&cfg);
        let x = vec![1.0; cfg.span_dim()];
        let (z, prob) = forward(&x, &p, &cfg, Mode::Eval, &mut seeded(0)).unwrap();
        assert_eq!(z, vec![0.0; 4]);
        assert!(prob.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        p.output.bias.data = vec![1.0, -2.0, 0.5, 3.0];
        let (z, _) = forward(&x, &p, &cfg, Mode::Eval, &mut seeded(0)).unwrap();
        assert_eq!(z, p.output.bias.data);
    }

    #[test]
    fn softmax_uniform_and_shift_invariant() {
        assert_eq!(softmax(&[0.0; 5]), vec![0.2; 5]);
        let z = [1.5, -3.0, 0.25, 8.0];
        let a = softmax(&z);
        let b = softmax(&z.map(|v| v + 1234.5));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        let big = softmax(&[1000.0, 0.0]);
        assert!(big.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn span_repr_layout() {
        let cfg = small();
        let p = SpanClassifierParams::init(&cfg, &mut seeded(4)).unwrap();
        let h = encode(&[2, 3, 4, 5, 6], &p, &cfg);
        let x = span_repr(&h, 1, 1, &p, &cfg).unwrap();
        assert_eq!(x.len(), cfg.span_dim());
        assert_eq!(&x[0..3], h.row(1));
        assert_eq!(&x[3..6], h.row(1));
        assert_eq!(&x[6..], p.width.row(0));

        let a = span_repr(&h, 1, 3, &p, &cfg).unwrap();
        let b = span_repr(&h, 1, 3, &p, &cfg).unwrap();
        assert_eq!(a, b);
        let c = span_repr(&h, 2, 3, &p, &cfg).unwrap();
        assert_eq!(&a[3..6], &c[3..6]);
        assert!(span_repr(&h, 0, 4, &p, &cfg).is_err());
        assert!(span_repr(&h, 3, 2, &p, &cfg).is_err());
    }

    #[test]
    fn spans_sharing_endpoints_differ_only_in_width_block() {
        // same endpoint tokens at different positions
        let cfg = small();
        let p = SpanClassifierParams::init(&cfg, &mut seeded(5)).unwrap();
        let mut lookup = cfg;
        lookup.encoder = EncoderVariant::Lookup;
        let mut pl = SpanClassifierParams::zeros(&lookup);
        pl.embedding = p.embedding.clone();
        pl.width = p.width.clone();
        let h = encode(&[2, 9, 3, 2, 3], &pl, &lookup);
        let a = span_repr(&h, 0, 2, &pl, &lookup).unwrap();
        let b = span_repr(&h, 3, 4, &pl, &lookup).unwrap();
        assert_eq!(&a[..6], &b[..6]);
        assert_ne!(&a[6..], &b[6..]);
    }

    #[test]
    fn non_finite_input_is_reported() {
        let cfg = small();
        let p = SpanClassifierParams::init(&cfg, &mut seeded(6)).unwrap();
        let mut x = vec![0.0; cfg.span_dim()];
        x[0] = f64::NAN;
        assert!(matches!(
            forward(&x, &p, &cfg, Mode::Eval, &mut seeded(0)),
            Err(Error::Numeric { .. })
        ));
        let mut bad = p.clone();
        bad.hidden[1].weight.data[0] = f64::INFINITY;
        let x = vec![1.0; cfg.span_dim()];
        match forward(&x, &bad, &cfg, Mode::Eval, &mut seeded(0)) {
            Err(Error::Numeric { tensor, .. }) => assert_eq!(tensor, "hidden.1.weight"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn eval_mode_ignores_rng() {
        let cfg = small();
        let p = SpanClassifierParams::init(&cfg, &mut seeded(7)).unwrap();
        let x: Vec<f64> = (0..cfg.span_dim()).map(|i| i as f64 * 0.1 - 0.3).collect();
        let a = forward(&x, &p, &cfg, Mode::Eval, &mut seeded(1)).unwrap();
        let b = forward(&x, &p, &cfg, Mode::Eval, &mut seeded(2)).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(z in prop::collection::vec(-15.0f64..15.0, 2..12)) {
            let p = softmax(&z);
            let s: f64 = p.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}
